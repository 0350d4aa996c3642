//! Run configuration as a flat `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected. [`RunConfig::to_canonical`] writes every
//! key in a fixed order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::citysynth::{validate_grid, BinEdges, INSTRUCTION_LEVELS};
use crate::error::{Error, Result};
use crate::gridgen::HeadMode;
use crate::landuse::PoiTaxonomy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// `c := z`, no KL term.
    pub no_condaug: bool,
    /// `T' := T`.
    pub no_attention: bool,
    /// Instruction one-hot replaced by zeros.
    pub no_instruction: bool,
    /// Graph embedding replaced by zeros.
    pub no_context: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_condaug", "no_attention", "no_instruction", "no_context"];

    pub fn single(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "no_condaug" => a.no_condaug = true,
            "no_attention" => a.no_attention = true,
            "no_instruction" => a.no_instruction = true,
            "no_context" => a.no_context = true,
            other => return Err(Error::invalid("ablation", format!("unknown `{other}`"))),
        }
        Ok(a)
    }

    pub fn any(&self) -> bool {
        self.no_condaug || self.no_attention || self.no_instruction || self.no_context
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub k: usize,
    pub seed: u64,
    pub d_g: usize,
    pub encoder_hidden: usize,
    pub heads: usize,
    pub head_mode: HeadMode,
    pub noise_dim: usize,
    pub gan_hidden: usize,
    pub lambda: f64,
    pub non_saturating: bool,
    pub train_w_a: bool,
    pub lr_encoder: f64,
    pub lr_gan: f64,
    pub lr_grid: f64,
    pub epochs_encoder: usize,
    pub epochs_gan: usize,
    pub epochs_grid: usize,
    pub batch_size: usize,
    /// `None` means `50 / M`.
    pub lda_alpha: Option<f64>,
    pub lda_beta: f64,
    pub lda_sweeps: usize,
    /// `None` means quintiles of the generated green rates.
    pub bin_edges: Option<BinEdges>,
    pub trajectories: usize,
    pub mean_pois: f64,
    pub ablations: Ablations,
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 10,
            m: 4,
            c: PoiTaxonomy::COUNT,
            k: 500,
            seed: 7,
            d_g: 16,
            encoder_hidden: 32,
            heads: 4,
            head_mode: HeadMode::Split,
            noise_dim: 16,
            gan_hidden: 128,
            lambda: 1.0,
            non_saturating: false,
            train_w_a: true,
            lr_encoder: 1e-2,
            lr_gan: 2e-4,
            lr_grid: 1e-2,
            epochs_encoder: 30,
            epochs_gan: 20,
            epochs_grid: 60,
            batch_size: 32,
            lda_alpha: None,
            lda_beta: 0.01,
            lda_sweeps: 200,
            bin_edges: None,
            trajectories: 20,
            mean_pois: 800.0,
            ablations: Ablations::default(),
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("run"),
        }
    }
}

/// Keys in canonical order with their one-line descriptions.
pub const KEYS: [(&str, &str); 30] = [
    ("n", "grid side length N"),
    ("m", "number of functional zones M"),
    ("c", "POI categories; must be 20"),
    ("k", "number of synthetic areas"),
    ("seed", "master seed"),
    ("d_g", "graph embedding width"),
    ("encoder_hidden", "graph encoder hidden width"),
    ("heads", "attention heads h"),
    ("head_mode", "split (width O/h per head) or full (width O per head)"),
    ("noise_dim", "generator noise length"),
    ("gan_hidden", "hidden width of both GAN networks"),
    ("lambda", "weight of the augmentation KL term"),
    ("non_saturating", "use -ln D(fake) for the generator"),
    ("train_w_a", "train the zone-proportion weights W_a with the grid stage"),
    ("lr_encoder", "Adam learning rate, graph encoder"),
    ("lr_gan", "Adam learning rate, generator and discriminator"),
    ("lr_grid", "Adam learning rate, grid stage"),
    ("epochs_encoder", "graph encoder epochs"),
    ("epochs_gan", "zone GAN epochs"),
    ("epochs_grid", "grid stage epochs"),
    ("batch_size", "minibatch size for every stage"),
    ("lda_alpha", "topic prior, or auto for 50/M"),
    ("lda_beta", "word prior"),
    ("lda_sweeps", "Gibbs sweeps"),
    ("bin_edges", "four comma-separated green-rate edges, or auto for quintiles"),
    ("trajectories", "trajectories per area"),
    ("mean_pois", "expected POIs per area"),
    ("ablations", "comma-separated subset of no_condaug,no_attention,no_instruction,no_context, or none"),
    ("data_dir", "dataset directory"),
    ("work_dir", "directory for zones, checkpoints and outputs"),
];

fn parse<T: FromStr>(key: &'static str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::invalid("config", format!("{key} = `{v}`: {e}")))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let Some(&(key, _)) = KEYS.iter().find(|(k, _)| *k == key.trim()) else {
            return Err(Error::invalid("config", format!("unknown key `{}`", key.trim())));
        };
        match key {
            "n" => self.n = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "c" => self.c = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "d_g" => self.d_g = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "head_mode" => {
                self.head_mode = match v {
                    "split" => HeadMode::Split,
                    "full" => HeadMode::Full,
                    _ => return Err(Error::invalid("config", format!("head_mode = `{v}`"))),
                }
            }
            "noise_dim" => self.noise_dim = parse(key, v)?,
            "gan_hidden" => self.gan_hidden = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "non_saturating" => self.non_saturating = parse(key, v)?,
            "train_w_a" => self.train_w_a = parse(key, v)?,
            "lr_encoder" => self.lr_encoder = parse(key, v)?,
            "lr_gan" => self.lr_gan = parse(key, v)?,
            "lr_grid" => self.lr_grid = parse(key, v)?,
            "epochs_encoder" => self.epochs_encoder = parse(key, v)?,
            "epochs_gan" => self.epochs_gan = parse(key, v)?,
            "epochs_grid" => self.epochs_grid = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lda_alpha" => self.lda_alpha = if v == "auto" { None } else { Some(parse(key, v)?) },
            "lda_beta" => self.lda_beta = parse(key, v)?,
            "lda_sweeps" => self.lda_sweeps = parse(key, v)?,
            "bin_edges" => {
                self.bin_edges = if v == "auto" {
                    None
                } else {
                    let parts: Vec<f64> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                    let edges: [f64; 4] = parts
                        .try_into()
                        .map_err(|_| Error::invalid("config", "bin_edges needs four values"))?;
                    Some(BinEdges::new(edges)?)
                }
            }
            "trajectories" => self.trajectories = parse(key, v)?,
            "mean_pois" => self.mean_pois = parse(key, v)?,
            "ablations" => {
                let mut a = Ablations::default();
                if v != "none" && !v.is_empty() {
                    for name in v.split(',') {
                        let one = Ablations::single(name.trim())?;
                        a.no_condaug |= one.no_condaug;
                        a.no_attention |= one.no_attention;
                        a.no_instruction |= one.no_instruction;
                        a.no_context |= one.no_context;
                    }
                }
                self.ablations = a;
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "work_dir" => self.work_dir = PathBuf::from(v),
            _ => unreachable!("key table and match arms agree"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n" => self.n.to_string(),
            "m" => self.m.to_string(),
            "c" => self.c.to_string(),
            "k" => self.k.to_string(),
            "seed" => self.seed.to_string(),
            "d_g" => self.d_g.to_string(),
            "encoder_hidden" => self.encoder_hidden.to_string(),
            "heads" => self.heads.to_string(),
            "head_mode" => match self.head_mode {
                HeadMode::Split => "split".into(),
                HeadMode::Full => "full".into(),
            },
            "noise_dim" => self.noise_dim.to_string(),
            "gan_hidden" => self.gan_hidden.to_string(),
            "lambda" => fmt_f64(self.lambda),
            "non_saturating" => self.non_saturating.to_string(),
            "train_w_a" => self.train_w_a.to_string(),
            "lr_encoder" => fmt_f64(self.lr_encoder),
            "lr_gan" => fmt_f64(self.lr_gan),
            "lr_grid" => fmt_f64(self.lr_grid),
            "epochs_encoder" => self.epochs_encoder.to_string(),
            "epochs_gan" => self.epochs_gan.to_string(),
            "epochs_grid" => self.epochs_grid.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lda_alpha" => self.lda_alpha.map_or("auto".into(), fmt_f64),
            "lda_beta" => fmt_f64(self.lda_beta),
            "lda_sweeps" => self.lda_sweeps.to_string(),
            "bin_edges" => self.bin_edges.map_or("auto".into(), |b| {
                b.edges().iter().map(|e| fmt_f64(*e)).collect::<Vec<_>>().join(",")
            }),
            "trajectories" => self.trajectories.to_string(),
            "mean_pois" => fmt_f64(self.mean_pois),
            "ablations" => {
                let a = self.ablations;
                let on: Vec<&str> = Ablations::NAMES
                    .iter()
                    .zip([a.no_condaug, a.no_attention, a.no_instruction, a.no_context])
                    .filter_map(|(n, f)| f.then_some(*n))
                    .collect();
                if on.is_empty() {
                    "none".into()
                } else {
                    on.join(",")
                }
            }
            "data_dir" => self.data_dir.display().to_string(),
            "work_dir" => self.work_dir.display().to_string(),
            _ => return None,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Invalid { detail, what } => Error::format(path, format!("{what}: {detail}")),
            other => other,
        })
    }

    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", self.get(key).expect("every key has a value"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(self.n, self.m)?;
        let bad = |what: &'static str, detail: String| Err(Error::invalid(what, detail));
        if self.c != PoiTaxonomy::COUNT {
            return bad("c", format!("{} categories; the taxonomy has {}", self.c, PoiTaxonomy::COUNT));
        }
        if self.k < 2 * INSTRUCTION_LEVELS {
            return bad("k", format!("{} areas; need at least {}", self.k, 2 * INSTRUCTION_LEVELS));
        }
        for (name, v) in [
            ("d_g", self.d_g),
            ("encoder_hidden", self.encoder_hidden),
            ("heads", self.heads),
            ("noise_dim", self.noise_dim),
            ("gan_hidden", self.gan_hidden),
            ("batch_size", self.batch_size),
            ("lda_sweeps", self.lda_sweeps),
            ("trajectories", self.trajectories),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_gan", self.lr_gan),
            ("lr_grid", self.lr_grid),
            ("lda_beta", self.lda_beta),
            ("mean_pois", self.mean_pois),
            ("lda_alpha", self.lda_alpha.unwrap_or(1.0)),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, format!("{v} must be positive"));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", format!("{}", self.lambda));
        }
        Ok(())
    }

    /// Width of the condition `z` after padding to a multiple of `heads`.
    pub fn cond_width(&self) -> usize {
        let raw = self.d_g + INSTRUCTION_LEVELS;
        raw.div_ceil(self.heads) * self.heads
    }

    pub fn alpha(&self) -> f64 {
        self.lda_alpha.unwrap_or(50.0 / self.m as f64)
    }
}
