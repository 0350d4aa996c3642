use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use planner::citysynth::{generate_dataset_with, Dataset, Instruction, SynthOptions};
use planner::config::RunConfig;
use planner::export::{export_plan, ExportFormat, PlanFile};
use planner::pipeline::{self, PlannerModel, TrainingReport};
use planner::Error;

#[derive(Parser)]
#[command(name = "planner", version, about = "Instruction-conditioned land-use planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration in canonical form.
    Config(Common),
    /// Generate the synthetic dataset.
    Synth(Common),
    /// Fit the topic model and write one zone raster per area.
    Zones(Common),
    /// Train the encoder, the zone GAN and the grid stage.
    Train(Common),
    /// Generate a plan for one context and instruction.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Instruction level 0-4 or a label such as Green3.
        #[arg(long)]
        instruction: String,
        /// Area whose geospatial contexts condition the plan.
        #[arg(long)]
        context: usize,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate on the test split and write the group report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate freshly initialised weights instead of the checkpoints.
        #[arg(long)]
        baseline: bool,
    },
    /// Render a plan file as csv, pgm or json.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> planner::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &common.work_dir {
        cfg.work_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn invalid(detail: String) -> Error {
    Error::Invalid { what: "arguments", detail }
}

fn guard(path: &Path, force: bool) -> planner::Result<()> {
    if path.exists() && !force {
        return Err(invalid(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> planner::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read_dataset(cfg: &RunConfig) -> planner::Result<Dataset> {
    let manifest = cfg.data_dir.join(planner::citysynth::MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::MissingStage { stage: "dataset", path: manifest });
    }
    let ds = Dataset::read(&cfg.data_dir)?;
    if ds.m != cfg.m {
        return Err(invalid(format!("dataset has M={} but the configuration says M={}", ds.m, cfg.m)));
    }
    Ok(ds)
}

fn zones_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join("zones")
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join("checkpoints")
}

fn parse_instruction(s: &str) -> planner::Result<Instruction> {
    let digits = s.strip_prefix("Green").unwrap_or(s);
    let level: usize = digits
        .parse()
        .map_err(|_| invalid(format!("instruction `{s}`; expected 0-4 or Green0-Green4")))?;
    Instruction::new(level)
}

fn run(cli: Cli) -> planner::Result<()> {
    match cli.command {
        Command::Config(common) => {
            print!("{}", load_config(&common)?.to_canonical());
        }
        Command::Synth(common) => {
            let cfg = load_config(&common)?;
            guard(&cfg.data_dir.join(planner::citysynth::MANIFEST_FILE), common.force)?;
            let opts = SynthOptions {
                trajectories_per_sample: cfg.trajectories,
                    trajectory_length: None,
                mean_pois: cfg.mean_pois,
                bin_edges: cfg.bin_edges,
            };
            let ds = generate_dataset_with(cfg.seed, cfg.k, cfg.n, cfg.m, &opts)?;
            ds.write(&cfg.data_dir)?;
            let m = ds.manifest();
            println!(
                "wrote {} areas ({} train, {} test) to {}",
                m.k,
                m.train_count,
                m.test_count,
                cfg.data_dir.display()
            );
        }
        Command::Zones(common) => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&cfg)?;
            let dir = zones_dir(&cfg);
            guard(&pipeline::zone_file(&dir, 0), common.force)?;
            let (state, plans) = pipeline::discover_dataset_zones(&ds, &cfg)?;
            pipeline::save_zones(&dir, &plans)?;
            println!("wrote {} zone rasters with {} topics to {}", plans.len(), state.topics, dir.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&cfg)?;
            let ckpt = checkpoint_dir(&cfg);
            guard(&ckpt.join(pipeline::GRID_FILE), common.force)?;
            let zones = pipeline::load_zones(&zones_dir(&cfg), ds.len(), ds.n, cfg.m)?;
            let (model, report) = pipeline::train(&ds, &zones, &cfg)?;
            model.save(&ckpt)?;
            let logs = cfg.work_dir.join("logs");
            write(&logs.join("encoder_loss.csv"), &TrainingReport::history_csv(&report.encoder_history))?;
            write(&logs.join("gan_loss.csv"), &report.gan_csv())?;
            write(&logs.join("grid_loss.csv"), &TrainingReport::history_csv(&report.grid_history))?;
            write(&cfg.work_dir.join("train_config.txt"), &cfg.to_canonical())?;
            println!(
                "trained; grid loss {:.1} -> {:.1}; checkpoints in {}",
                report.grid_history[0],
                report.grid_history.last().copied().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::Generate {
            common,
            instruction,
            context,
            sample_seed,
            out,
        } => {
            let cfg = load_config(&common)?;
            let instruction = parse_instruction(&instruction)?;
            let ds = read_dataset(&cfg)?;
            let sample = ds
                .samples
                .get(context)
                .ok_or_else(|| invalid(format!("context {context} outside 0..{}", ds.len())))?;
            let out = out.unwrap_or_else(|| {
                cfg.work_dir
                    .join("plans")
                    .join(format!("plan_g{}_c{context}_s{sample_seed}.json", instruction.level()))
            });
            guard(&out, common.force)?;
            let model = PlannerModel::load(&checkpoint_dir(&cfg), &cfg, ds.n)?;
            let g = model.generate(&sample.context_graph()?, instruction, sample_seed)?;
            let plan = PlanFile::new(instruction, context, sample_seed, &g.zones, &g.raw);
            write(&out, &plan.to_json())?;
            println!(
                "wrote {} (green share {:.4})",
                out.display(),
                g.counts.green_share()
            );
        }
        Command::Eval { common, baseline } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&cfg)?;
            let stem = if baseline { "baseline_report" } else { "report" };
            let json_path = cfg.work_dir.join(format!("{stem}.json"));
            guard(&json_path, common.force)?;
            let report = if baseline {
                let model = PlannerModel::untrained(&cfg, ds.n)?;
                pipeline::evaluate_unchecked(&model, &ds, cfg.seed)?.0
            } else {
                let model = PlannerModel::load(&checkpoint_dir(&cfg), &cfg, ds.n)?;
                pipeline::evaluate(&model, &ds, cfg.seed)?.0
            };
            write(&json_path, &(report.to_json() + "\n"))?;
            write(&cfg.work_dir.join(format!("{stem}.csv")), &report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Export {
            common,
            plan,
            format,
            out,
        } => {
            let format: ExportFormat = format.parse()?;
            let non_empty = out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
            if non_empty && !common.force {
                return Err(invalid(format!("{} is not empty; pass --force to overwrite", out.display())));
            }
            let plan = PlanFile::load(&plan)?;
            let files = export_plan(&plan, format, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingStage { .. } | Error::Untrained(_) => 2,
        e if e.is_validation() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
