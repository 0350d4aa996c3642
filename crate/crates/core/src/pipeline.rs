//! End-to-end training, generation and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use numgrad::checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::citysynth::{substream, CitySample, Dataset, Instruction, FEATURE_DIM};
use crate::config::{Ablations, RunConfig};
use crate::ctxembed::{
    fuse_condition, normal_tensor, train_graph_encoder, EncoderDims, EncoderTraining, GraphEncoder,
    SpatialAttributedGraph,
};
use crate::error::{Error, Result};
use crate::evalmetrics::GroupReport;
use crate::gridgen::{train_grid_stage, GridExample, GridGenConfig, GridModel, GridTraining};
use crate::landuse::{LandUseConfiguration, ZonePlan};
use crate::zonedisc::{discover_zones, fit_topics, Corpus, TopicModelState};
use crate::zonegan::{
    train_zone_gan, GanEpochStats, GanStepLog, GanTraining, SoftZonePlan, ZoneExample, ZoneGan, ZoneGanConfig,
};

const STREAM_TOPICS: u64 = 101;
const STREAM_ENCODER: u64 = 102;
const STREAM_GAN: u64 = 103;
const STREAM_GRID: u64 = 104;
const STREAM_UNTRAINED: u64 = 105;

pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const GRID_FILE: &str = "grid.ckpt";

/// Fits topics over every area and labels each area's grids.
pub fn discover_dataset_zones(dataset: &Dataset, cfg: &RunConfig) -> Result<(TopicModelState, Vec<ZonePlan>)> {
    let corpus = Corpus::from_trajectories(dataset.n, dataset.samples.iter().map(|s| s.trajectories.as_slice()))?;
    let state = fit_topics(
        corpus,
        cfg.m,
        cfg.alpha(),
        cfg.lda_beta,
        cfg.lda_sweeps,
        substream(cfg.seed, STREAM_TOPICS),
    )?;
    let plans = discover_zones(&state, dataset.n)?;
    Ok((state, plans))
}

pub fn zone_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("area_{index:05}.csv"))
}

pub fn save_zones(dir: &Path, plans: &[ZonePlan]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in plans.iter().enumerate() {
        p.save_csv(&zone_file(dir, i))?;
    }
    Ok(())
}

pub fn load_zones(dir: &Path, count: usize, n: usize, m: usize) -> Result<Vec<ZonePlan>> {
    (0..count)
        .map(|i| {
            let path = zone_file(dir, i);
            if !path.exists() {
                return Err(Error::MissingStage { stage: "zones", path });
            }
            let plan = ZonePlan::load_csv(&path)?;
            if plan.n() != n || plan.max_label() >= m {
                return Err(Error::format(&path, format!("expected a {n}x{n} raster with labels below {m}")));
            }
            Ok(plan)
        })
        .collect()
}

/// All trained stages plus the ablation switches they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerModel {
    pub ablations: Ablations,
    pub width: usize,
    pub encoder: GraphEncoder,
    pub gan: ZoneGan,
    pub grid: GridModel,
    pub trained: bool,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub soft_zones: SoftZonePlan,
    pub zones: ZonePlan,
    pub raw: LandUseConfiguration,
    /// `raw` with negative entries clamped to zero.
    pub counts: LandUseConfiguration,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub encoder_history: Vec<f64>,
    pub gan_steps: Vec<GanStepLog>,
    pub gan_epochs: Vec<GanEpochStats>,
    pub grid_history: Vec<f64>,
}

impl TrainingReport {
    pub fn gan_csv(&self) -> String {
        let mut out = String::from("step,L_G,L_D,KL\n");
        for s in &self.gan_steps {
            out.push_str(&format!("{},{},{},{}\n", s.step, s.generator_loss, s.discriminator_loss, s.kl));
        }
        out
    }

    pub fn history_csv(history: &[f64]) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in history.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

fn encoder_dims(cfg: &RunConfig) -> EncoderDims {
    EncoderDims {
        input: FEATURE_DIM,
        hidden: cfg.encoder_hidden,
        output: cfg.d_g,
    }
}

fn gan_config(cfg: &RunConfig, n: usize) -> ZoneGanConfig {
    ZoneGanConfig {
        n,
        m: cfg.m,
        cond_width: cfg.cond_width(),
        noise_dim: cfg.noise_dim,
        hidden: cfg.gan_hidden,
        lambda: cfg.lambda,
        non_saturating: cfg.non_saturating,
        augment: !cfg.ablations.no_condaug,
    }
}

fn grid_config(cfg: &RunConfig, n: usize) -> GridGenConfig {
    GridGenConfig {
        n,
        m: cfg.m,
        c: cfg.c,
        width: cfg.cond_width(),
        heads: cfg.heads,
        head_mode: cfg.head_mode,
        attention: !cfg.ablations.no_attention,
        train_w_a: cfg.train_w_a,
    }
}

fn check_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<()> {
    if dataset.m != cfg.m || dataset.c != cfg.c {
        return Err(Error::invalid(
            "dataset",
            format!("M={} C={} but the configuration says M={} C={}", dataset.m, dataset.c, cfg.m, cfg.c),
        ));
    }
    Ok(())
}

/// Encoder pretraining, then the zone GAN, then the grid stage.
pub fn train(dataset: &Dataset, zones: &[ZonePlan], cfg: &RunConfig) -> Result<(PlannerModel, TrainingReport)> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    if zones.len() != dataset.len() {
        return Err(Error::invalid("zones", format!("{} plans for {} areas", zones.len(), dataset.len())));
    }
    let train: Vec<&CitySample> = dataset.train().collect();
    let graphs: Vec<SpatialAttributedGraph> = train.iter().map(|s| s.context_graph()).collect::<Result<_>>()?;

    let (encoder, encoder_history) = train_graph_encoder(
        &graphs,
        encoder_dims(cfg),
        &EncoderTraining {
            epochs: cfg.epochs_encoder,
            batch_size: cfg.batch_size,
            lr: cfg.lr_encoder,
            seed: substream(cfg.seed, STREAM_ENCODER),
        },
    )?;
    let width = cfg.cond_width();
    let mut model = PlannerModel {
        ablations: cfg.ablations,
        width,
        encoder,
        gan: ZoneGan::new(gan_config(cfg, dataset.n), 0),
        grid: GridModel::new(grid_config(cfg, dataset.n), 0)?,
        trained: false,
    };

    let conditions: Vec<Vec<f64>> = train
        .iter()
        .zip(&graphs)
        .map(|(s, g)| model.condition(g, s.instruction))
        .collect::<Result<_>>()?;

    let zone_examples: Vec<ZoneExample> = train
        .iter()
        .zip(&conditions)
        .map(|(s, z)| ZoneExample {
            z: z.clone(),
            plan: zones[s.index].clone(),
        })
        .collect();
    let gan_run = train_zone_gan(
        &zone_examples,
        gan_config(cfg, dataset.n),
        &GanTraining {
            epochs: cfg.epochs_gan,
            batch_size: cfg.batch_size,
            lr: cfg.lr_gan,
            seed: substream(cfg.seed, STREAM_GAN),
        },
    )?;

    let grid_examples: Vec<GridExample> = train
        .iter()
        .zip(&conditions)
        .map(|(s, z)| GridExample::new(z.clone(), &zones[s.index], cfg.m, &s.configuration))
        .collect::<Result<_>>()?;
    let grid_run = train_grid_stage(
        &grid_examples,
        grid_config(cfg, dataset.n),
        &GridTraining {
            epochs: cfg.epochs_grid,
            batch_size: cfg.batch_size,
            lr: cfg.lr_grid,
            seed: substream(cfg.seed, STREAM_GRID),
        },
    )?;

    model.gan = gan_run.model;
    model.grid = grid_run.model;
    model.trained = true;
    let report = TrainingReport {
        encoder_history,
        gan_steps: gan_run.steps,
        gan_epochs: gan_run.epochs,
        grid_history: grid_run.history,
    };
    Ok((model, report))
}

impl PlannerModel {
    /// Freshly initialised weights for every stage; generation needs
    /// [`PlannerModel::generate_unchecked`].
    pub fn untrained(cfg: &RunConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let seed = substream(cfg.seed, STREAM_UNTRAINED);
        Ok(Self {
            ablations: cfg.ablations,
            width: cfg.cond_width(),
            encoder: GraphEncoder::new(encoder_dims(cfg), substream(seed, 1)),
            gan: ZoneGan::new(gan_config(cfg, n), substream(seed, 2)),
            grid: GridModel::new(grid_config(cfg, n), substream(seed, 3))?,
            trained: false,
        })
    }

    pub fn n(&self) -> usize {
        self.grid.config.n
    }

    /// Padded `z` for a context graph and instruction, with ablations applied.
    pub fn condition(&self, graph: &SpatialAttributedGraph, instruction: Instruction) -> Result<Vec<f64>> {
        let pooled = self.encoder.encode(graph)?.pooled;
        let mut z = fuse_condition(&pooled, instruction);
        if self.ablations.no_instruction {
            z = z.with_instruction_zeroed();
        }
        if self.ablations.no_context {
            z = z.with_graph_zeroed();
        }
        if z.width() > self.width {
            return Err(Error::invalid("condition", format!("width {} exceeds {}", z.width(), self.width)));
        }
        Ok(z.padded(self.width))
    }

    pub fn generate(&self, graph: &SpatialAttributedGraph, instruction: Instruction, seed: u64) -> Result<Generated> {
        if !self.trained {
            return Err(Error::Untrained("planner"));
        }
        self.generate_unchecked(graph, instruction, seed)
    }

    /// Same as [`PlannerModel::generate`] without the trained check.
    pub fn generate_unchecked(&self, graph: &SpatialAttributedGraph, instruction: Instruction, seed: u64) -> Result<Generated> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.condition(graph, instruction)?;
        let eps = normal_tensor(&mut rng, 1, self.width).into_data();
        let eta = normal_tensor(&mut rng, 1, self.gan.config.noise_dim).into_data();
        let c = if self.gan.config.augment {
            self.gan.augmentor().augment(&self.gan.augmentor_tensors(), &z, &eps)?
        } else {
            z.clone()
        };
        let soft_zones = self.gan.generate_zones(&eta, &c)?;
        let zones = soft_zones.harden();
        let raw = self.grid.predict(&zones, &z)?;
        let counts = raw.clamped_nonnegative();
        Ok(Generated {
            soft_zones,
            zones,
            raw,
            counts,
        })
    }

    /// Writes the four stage checkpoints into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.trained {
            return Err(Error::Untrained("planner"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(dir.join(ENCODER_FILE), &self.encoder.params)?;
        checkpoint::save(dir.join(GENERATOR_FILE), &self.gan.generator)?;
        checkpoint::save(dir.join(DISCRIMINATOR_FILE), &self.gan.discriminator)?;
        checkpoint::save(dir.join(GRID_FILE), &self.grid.params)?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &RunConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let read = |stage: &'static str, file: &str| {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::MissingStage { stage, path });
            }
            checkpoint::load(&path).map_err(|e| Error::format(&path, e.to_string()))
        };
        let encoder = GraphEncoder::from_params(read("encoder", ENCODER_FILE)?)?;
        if encoder.dims != encoder_dims(cfg) {
            return Err(Error::invalid("encoder checkpoint", "dimensions disagree with the configuration"));
        }
        let mut gan = ZoneGan::new(gan_config(cfg, n), 0);
        let generator = read("zone generator", GENERATOR_FILE)?;
        let discriminator = read("zone discriminator", DISCRIMINATOR_FILE)?;
        gan.generator.load_values(&generator)?;
        gan.discriminator.load_values(&discriminator)?;
        let grid = GridModel::from_params(grid_config(cfg, n), read("grid", GRID_FILE)?)?;
        Ok(Self {
            ablations: cfg.ablations,
            width: cfg.cond_width(),
            encoder,
            gan,
            grid,
            trained: true,
        })
    }
}

/// Per-sample generation seed for evaluation.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    substream(seed, 1_000_000 + index as u64)
}

/// Generates every test area under its own instruction and compares by group.
pub fn evaluate(model: &PlannerModel, dataset: &Dataset, seed: u64) -> Result<(GroupReport, Vec<(usize, Generated)>)> {
    evaluate_with(dataset, seed, |g, i, s| model.generate(g, i, s))
}

/// As [`evaluate`] but without the trained check, for baselines.
pub fn evaluate_unchecked(model: &PlannerModel, dataset: &Dataset, seed: u64) -> Result<(GroupReport, Vec<(usize, Generated)>)> {
    evaluate_with(dataset, seed, |g, i, s| model.generate_unchecked(g, i, s))
}

fn evaluate_with(
    dataset: &Dataset,
    seed: u64,
    generate: impl Fn(&SpatialAttributedGraph, Instruction, u64) -> Result<Generated>,
) -> Result<(GroupReport, Vec<(usize, Generated)>)> {
    let test: Vec<&CitySample> = dataset.test().collect();
    if test.is_empty() {
        return Err(Error::invalid("dataset", "empty test split"));
    }
    let generated: Vec<(usize, Generated)> = test
        .iter()
        .map(|s| Ok((s.index, generate(&s.context_graph()?, s.instruction, eval_seed(seed, s.index))?)))
        .collect::<Result<_>>()?;
    let items: Vec<_> = test
        .iter()
        .zip(&generated)
        .map(|(s, (_, g))| (s.instruction, &s.configuration, &g.counts))
        .collect();
    Ok((GroupReport::build(&items)?, generated))
}
