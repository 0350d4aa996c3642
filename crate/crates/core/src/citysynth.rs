//! Seeded synthetic city samples.
//!
//! Every sample is a target area laid out as Voronoi regions, each region
//! drawn from one of `M` category-mixture archetypes shared across the
//! dataset. A latent greenness shifts mass towards the green categories, and
//! the green rate (and therefore the instruction level) is read back from the
//! realised counts. Eight context regions around the target share the
//! sample's archetype weights and density, so their socioeconomic features
//! carry information about the target.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctxembed::SpatialAttributedGraph;
use crate::error::{Error, Result};
use crate::landuse::{LandUseConfiguration, PoiTaxonomy, ZonePlan};

pub const FEATURE_DIM: usize = 4;
pub const CONTEXT_COUNT: usize = 8;
pub const INSTRUCTION_LEVELS: usize = 5;
pub const SCHEMA_VERSION: u32 = 1;
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const MIN_GRID: usize = 2;
pub const MAX_GRID: usize = 128;
pub const MAX_ZONES: usize = 16;

const GREEN_SHIFT: f64 = 0.6;
const GREEN_RATE_NOISE: f64 = 0.02;
const CONTEXT_GREEN_COUPLING: f64 = 0.15;

/// Green-rate level, `Green0` (least green) to `Green4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Instruction(u8);

impl Instruction {
    pub const ALL: [Instruction; INSTRUCTION_LEVELS] =
        [Instruction(0), Instruction(1), Instruction(2), Instruction(3), Instruction(4)];

    pub fn new(level: usize) -> Result<Self> {
        if level >= INSTRUCTION_LEVELS {
            return Err(Error::invalid(
                "instruction",
                format!("level {level} outside 0..{INSTRUCTION_LEVELS}"),
            ));
        }
        Ok(Self(level as u8))
    }

    pub fn level(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> String {
        format!("Green{}", self.0)
    }
}

impl TryFrom<u8> for Instruction {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Instruction::new(v as usize).map_err(|e| e.to_string())
    }
}

impl From<Instruction> for u8 {
    fn from(i: Instruction) -> u8 {
        i.0
    }
}

/// Socioeconomic features of one context region:
/// traffic volume, check-in count, price index, POI density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextRegion {
    pub features: [f64; FEATURE_DIM],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Four interior edges splitting `[0, 1]` into five instruction bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BinEdges([f64; 4]);

impl BinEdges {
    pub fn new(edges: [f64; 4]) -> Result<Self> {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "bin edges",
                format!("{edges:?} must be finite and strictly increasing"),
            ));
        }
        Ok(Self(edges))
    }

    pub fn edges(&self) -> [f64; 4] {
        self.0
    }

    /// Empirical quintiles: with distinct rates each bin holds a fifth of them.
    pub fn quintiles(rates: &[f64]) -> Self {
        if rates.len() < INSTRUCTION_LEVELS {
            return Self([0.2, 0.4, 0.6, 0.8]);
        }
        let mut sorted = rates.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let mut edges = [0.0; 4];
        for (j, e) in edges.iter_mut().enumerate() {
            *e = sorted[(j + 1) * k / INSTRUCTION_LEVELS];
        }
        for j in 1..4 {
            if edges[j] <= edges[j - 1] {
                edges[j] = edges[j - 1].next_up();
            }
        }
        Self(edges)
    }
}

impl TryFrom<[f64; 4]> for BinEdges {
    type Error = String;
    fn try_from(v: [f64; 4]) -> std::result::Result<Self, String> {
        BinEdges::new(v).map_err(|e| e.to_string())
    }
}

impl From<BinEdges> for [f64; 4] {
    fn from(b: BinEdges) -> Self {
        b.0
    }
}

/// Maps a green rate to its level. Bins are `[e_{j-1}, e_j)`, the top bin
/// is closed at 1.
pub fn derive_instruction(green_rate: f64, edges: &BinEdges) -> Result<Instruction> {
    if !(0.0..=1.0).contains(&green_rate) {
        return Err(Error::invalid("green rate", format!("{green_rate} outside [0, 1]")));
    }
    let level = edges.0.iter().filter(|&&e| green_rate >= e).count();
    Instruction::new(level)
}

/// Counts POI events into an `N x N x C` tensor.
pub fn build_configuration(events: &[(usize, usize, usize)], n: usize, c: usize) -> Result<LandUseConfiguration> {
    let mut cfg = LandUseConfiguration::zeros(n, c);
    for &(row, col, cat) in events {
        if row >= n || col >= n || cat >= c {
            return Err(Error::invalid(
                "poi event",
                format!("({row}, {col}, {cat}) outside {n}x{n}x{c}"),
            ));
        }
        let idx = cfg.index(row, col, cat);
        cfg.values_mut()[idx] += 1.0;
    }
    Ok(cfg)
}

/// Grid coordinates of the 3x3 layout: node 0 is the target in the centre,
/// nodes 1..=8 run clockwise from the top-left corner.
pub const RING_LAYOUT: [(i32, i32); 9] = [
    (1, 1),
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (2, 1),
    (2, 0),
    (1, 0),
];

/// Spatial attributed graph over the target and its eight context regions.
/// The target's features are unknown and zero-filled; edges follow
/// 8-connectivity of the 3x3 layout, with self-loops.
pub fn build_context_graph(contexts: &[ContextRegion]) -> Result<SpatialAttributedGraph> {
    if contexts.len() != CONTEXT_COUNT {
        return Err(Error::invalid(
            "context graph",
            format!("expected {CONTEXT_COUNT} context regions, got {}", contexts.len()),
        ));
    }
    let nodes = RING_LAYOUT.len();
    let mut adjacency = vec![0.0; nodes * nodes];
    for (i, &(ri, ci)) in RING_LAYOUT.iter().enumerate() {
        for (j, &(rj, cj)) in RING_LAYOUT.iter().enumerate() {
            if (ri - rj).abs() <= 1 && (ci - cj).abs() <= 1 {
                adjacency[i * nodes + j] = 1.0;
            }
        }
    }
    let mut features = vec![0.0; FEATURE_DIM];
    for region in contexts {
        features.extend_from_slice(&region.features);
    }
    SpatialAttributedGraph::new(nodes, FEATURE_DIM, adjacency, features)
}

/// Random walks on the lattice. Each step picks one of the four neighbours
/// with probability proportional to its POI mass plus one; a move off the
/// lattice stays in place. Starts are drawn with the same weights.
pub fn simulate_trajectories(
    configuration: &LandUseConfiguration,
    count: usize,
    length: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let n = configuration.n();
    let weights: Vec<f64> = (0..n * n)
        .map(|g| configuration.cell_mass(g / n, g % n).max(0.0) + 1.0)
        .collect();
    let start_dist = WeightedIndex::new(&weights).expect("smoothed weights are positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut cell = start_dist.sample(&mut rng);
            let mut walk = Vec::with_capacity(length);
            walk.push(cell);
            for _ in 1..length {
                let (r, c) = (cell / n, cell % n);
                let dests = [
                    if r > 0 { cell - n } else { cell },
                    if r + 1 < n { cell + n } else { cell },
                    if c > 0 { cell - 1 } else { cell },
                    if c + 1 < n { cell + 1 } else { cell },
                ];
                let w: [f64; 4] = dests.map(|d| weights[d]);
                let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
                let mut pick = 3;
                for (k, &wk) in w.iter().enumerate() {
                    if u < wk {
                        pick = k;
                        break;
                    }
                    u -= wk;
                }
                cell = dests[pick];
                walk.push(cell);
            }
            walk
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CitySample {
    pub index: usize,
    pub split: Split,
    pub configuration: LandUseConfiguration,
    pub contexts: Vec<ContextRegion>,
    pub trajectories: Vec<Vec<usize>>,
    pub green_rate: f64,
    pub instruction: Instruction,
    /// Archetype that generated each grid.
    pub planted_zones: ZonePlan,
}

impl CitySample {
    pub fn context_graph(&self) -> Result<SpatialAttributedGraph> {
        build_context_graph(&self.contexts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub n: usize,
    pub c: usize,
    pub m: usize,
    pub bin_edges: BinEdges,
    pub samples: Vec<CitySample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &CitySample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &CitySample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub trajectories_per_sample: usize,
    /// Defaults to `max(10, 2N)` steps.
    pub trajectory_length: Option<usize>,
    /// Expected POIs over the whole target area.
    pub mean_pois: f64,
    /// Fixed green-rate edges; quintiles of the generated rates when unset.
    pub bin_edges: Option<BinEdges>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            trajectories_per_sample: 20,
            trajectory_length: None,
            mean_pois: 800.0,
            bin_edges: None,
        }
    }
}

pub fn validate_grid(n: usize, m: usize) -> Result<()> {
    if !(MIN_GRID..=MAX_GRID).contains(&n) {
        return Err(Error::invalid("N", format!("{n} outside {MIN_GRID}..={MAX_GRID}")));
    }
    if !(1..=MAX_ZONES).contains(&m) {
        return Err(Error::invalid("M", format!("{m} outside 1..={MAX_ZONES}")));
    }
    Ok(())
}

pub fn generate_dataset(seed: u64, k: usize, n: usize, m: usize) -> Result<Dataset> {
    generate_dataset_with(seed, k, n, m, &SynthOptions::default())
}

pub fn generate_dataset_with(seed: u64, k: usize, n: usize, m: usize, opts: &SynthOptions) -> Result<Dataset> {
    validate_grid(n, m)?;
    let c = PoiTaxonomy::COUNT;
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, 0));
    let archetypes = make_archetypes(m, &mut rng);

    let drafts: Vec<Draft> = (0..k)
        .into_par_iter()
        .map(|i| draft_sample(seed, i, n, &archetypes, opts))
        .collect();

    let rates: Vec<f64> = drafts.iter().map(|d| d.green_rate).collect();
    let bin_edges = opts.bin_edges.unwrap_or_else(|| BinEdges::quintiles(&rates));

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let train_count = k * 9 / 10;
    let mut split = vec![Split::Test; k];
    for &i in &order[..train_count] {
        split[i] = Split::Train;
    }

    let samples = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(CitySample {
                index: i,
                split: split[i],
                instruction: derive_instruction(d.green_rate, &bin_edges)?,
                configuration: d.configuration,
                contexts: d.contexts,
                trajectories: d.trajectories,
                green_rate: d.green_rate,
                planted_zones: d.planted_zones,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        seed,
        n,
        c,
        m,
        bin_edges,
        samples,
    })
}

pub(crate) fn substream(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dirichlet(alpha: f64, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut v: Vec<f64> = (0..dim).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn non_green_codes() -> Vec<usize> {
    (0..PoiTaxonomy::COUNT)
        .filter(|c| !PoiTaxonomy::GREEN.contains(c))
        .collect()
}

/// Base category mixtures. Archetype `m` concentrates on four of the
/// non-green categories, rotating so that the first four archetypes are
/// disjoint.
fn make_archetypes(m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let codes = non_green_codes();
    (0..m)
        .map(|a| {
            let noise = dirichlet(1.0, codes.len(), rng);
            let mut mix = vec![0.0; PoiTaxonomy::COUNT];
            for (j, &code) in codes.iter().enumerate() {
                mix[code] += 0.2 * noise[j];
            }
            for j in 0..4 {
                mix[codes[(a * 4 + j) % codes.len()]] += 0.8 / 4.0;
            }
            mix
        })
        .collect()
}

fn greened(base: &[f64], greenness: f64) -> Vec<f64> {
    let mut mix: Vec<f64> = base.iter().map(|p| p * (1.0 - GREEN_SHIFT * greenness)).collect();
    for &g in &PoiTaxonomy::GREEN {
        mix[g] += GREEN_SHIFT * greenness / PoiTaxonomy::GREEN.len() as f64;
    }
    mix
}

struct Draft {
    configuration: LandUseConfiguration,
    contexts: Vec<ContextRegion>,
    trajectories: Vec<Vec<usize>>,
    green_rate: f64,
    planted_zones: ZonePlan,
}

fn draft_sample(seed: u64, index: usize, n: usize, archetypes: &[Vec<f64>], opts: &SynthOptions) -> Draft {
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, index as u64 + 1));
    let m = archetypes.len();
    let c = PoiTaxonomy::COUNT;

    let greenness: f64 = rng.random();
    let weights = dirichlet(0.5, m, &mut rng);
    let density = Normal::new(0.0f64, 0.25).unwrap().sample(&mut rng).exp();

    let site_count = m + 2;
    let site_pick = WeightedIndex::new(&weights).unwrap();
    let sites: Vec<(f64, f64, usize)> = (0..site_count)
        .map(|_| {
            let r = rng.random::<f64>() * n as f64;
            let c = rng.random::<f64>() * n as f64;
            (r, c, site_pick.sample(&mut rng))
        })
        .collect();
    let labels: Vec<usize> = (0..n * n)
        .map(|g| {
            let (r, c) = ((g / n) as f64 + 0.5, (g % n) as f64 + 0.5);
            sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - r).powi(2) + (a.1 - c).powi(2);
                    let db = (b.0 - r).powi(2) + (b.1 - c).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
                .2
        })
        .collect();

    let mixes: Vec<Vec<f64>> = archetypes.iter().map(|a| greened(a, greenness)).collect();
    let per_cell = opts.mean_pois / (n * n) as f64 * density;
    let mut events = Vec::new();
    for (g, &arch) in labels.iter().enumerate() {
        for (cat, &p) in mixes[arch].iter().enumerate() {
            let lambda = per_cell * p;
            if lambda <= 0.0 {
                continue;
            }
            let count = Poisson::new(lambda).unwrap().sample(&mut rng) as usize;
            events.extend(std::iter::repeat_n((g / n, g % n, cat), count));
        }
    }
    let configuration = build_configuration(&events, n, c).expect("events are in range");

    let noise = Normal::new(0.0, GREEN_RATE_NOISE).unwrap().sample(&mut rng);
    let green_rate = (configuration.green_share() + noise).clamp(0.0, 1.0);

    let contexts = (0..CONTEXT_COUNT)
        .map(|_| context_region(&mut rng, archetypes, &weights, greenness, density, opts.mean_pois))
        .collect();

    let length = opts.trajectory_length.unwrap_or((2 * n).max(10));
    let trajectories = simulate_trajectories(
        &configuration,
        opts.trajectories_per_sample,
        length,
        rng.random(),
    );

    Draft {
        configuration,
        contexts,
        trajectories,
        green_rate,
        planted_zones: ZonePlan::new(n, labels).unwrap(),
    }
}

fn context_region(
    rng: &mut impl Rng,
    archetypes: &[Vec<f64>],
    weights: &[f64],
    greenness: f64,
    density: f64,
    mean_pois: f64,
) -> ContextRegion {
    let m = archetypes.len();
    let g = (CONTEXT_GREEN_COUPLING * greenness + (1.0 - CONTEXT_GREEN_COUPLING) * rng.random::<f64>()).clamp(0.0, 1.0);
    let jitter = dirichlet(1.0, m, rng);
    let w: Vec<f64> = weights.iter().zip(&jitter).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
    let rho = density * Normal::new(0.0f64, 0.1).unwrap().sample(rng).exp();
    let mut expected = vec![0.0; PoiTaxonomy::COUNT];
    for (arch, &wa) in archetypes.iter().zip(&w) {
        for (e, p) in expected.iter_mut().zip(greened(arch, g)) {
            *e += mean_pois * rho * wa * p;
        }
    }
    let mass = |codes: &[usize]| codes.iter().map(|&c| expected[c]).sum::<f64>();
    let scale = mean_pois / 8.0;
    let raw = [
        mass(&[0, 1, 14, 17]) / scale,
        mass(&[4, 5, 7, 10]) / scale,
        (mass(&[11, 15, 16]) + 2.0 * mass(&PoiTaxonomy::GREEN)) / scale,
        expected.iter().sum::<f64>() / mean_pois,
    ];
    let noise = Normal::new(0.0f64, 0.05).unwrap();
    ContextRegion {
        features: raw.map(|v| v * noise.sample(rng).exp()),
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    schema_version: u32,
    index: usize,
    split: Split,
    instruction: Instruction,
    green_rate: f64,
    configuration: LandUseConfiguration,
    contexts: Vec<ContextRegion>,
    trajectories: Vec<Vec<usize>>,
    planted_zones: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub c: usize,
    pub m: usize,
    pub bin_edges: BinEdges,
    pub train_count: usize,
    pub test_count: usize,
    pub samples_file: String,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            k: self.samples.len(),
            n: self.n,
            c: self.c,
            m: self.m,
            bin_edges: self.bin_edges,
            train_count: self.train().count(),
            test_count: self.test().count(),
            samples_file: SAMPLES_FILE.to_string(),
        }
    }

    /// Writes `samples.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SAMPLES_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for s in &self.samples {
            let record = SampleRecord {
                schema_version: SCHEMA_VERSION,
                index: s.index,
                split: s.split,
                instruction: s.instruction,
                green_rate: s.green_rate,
                configuration: s.configuration.clone(),
                contexts: s.contexts.clone(),
                trajectories: s.trajectories.clone(),
                planted_zones: s.planted_zones.to_nested(),
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| Error::format(&path, e.to_string()))?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serialises");
        fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                &mpath,
                format!("unsupported schema version {}", manifest.schema_version),
            ));
        }
        validate_grid(manifest.n, manifest.m).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let path = dir.join(&manifest.samples_file);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::with_capacity(manifest.k);
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| Error::format(&path, format!("line {}: {detail}", lineno + 1));
            let r: SampleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if r.schema_version != SCHEMA_VERSION {
                return Err(bad(format!("schema version {}", r.schema_version)));
            }
            if r.configuration.n() != manifest.n || r.configuration.categories() != manifest.c {
                return Err(bad("configuration shape disagrees with manifest".into()));
            }
            if r.contexts.len() != CONTEXT_COUNT {
                return Err(bad(format!("{} context regions", r.contexts.len())));
            }
            if r.trajectories.iter().flatten().any(|&g| g >= manifest.n * manifest.n) {
                return Err(bad("trajectory index out of range".into()));
            }
            if derive_instruction(r.green_rate, &manifest.bin_edges).ok() != Some(r.instruction) {
                return Err(bad("instruction does not match green rate".into()));
            }
            let planted = ZonePlan::new(manifest.n, r.planted_zones.concat()).map_err(|e| bad(e.to_string()))?;
            samples.push(CitySample {
                index: r.index,
                split: r.split,
                configuration: r.configuration,
                contexts: r.contexts,
                trajectories: r.trajectories,
                green_rate: r.green_rate,
                instruction: r.instruction,
                planted_zones: planted,
            });
        }
        if samples.len() != manifest.k {
            return Err(Error::format(
                &path,
                format!("{} samples, manifest says {}", samples.len(), manifest.k),
            ));
        }
        Ok(Dataset {
            seed: manifest.seed,
            n: manifest.n,
            c: manifest.c,
            m: manifest.m,
            bin_edges: manifest.bin_edges,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instruction_bins_are_left_closed() {
        let edges = BinEdges::new([0.2, 0.4, 0.6, 0.8]).unwrap();
        let level = |r| derive_instruction(r, &edges).unwrap().level();
        assert_eq!(level(0.0), 0);
        assert_eq!(level(0.199), 0);
        assert_eq!(level(0.2), 1);
        assert_eq!(level(0.8), 4);
        assert_eq!(level(1.0), 4);
        assert!(derive_instruction(1.01, &edges).is_err());
        assert!(derive_instruction(-0.1, &edges).is_err());
        assert!(BinEdges::new([0.2, 0.2, 0.6, 0.8]).is_err());
    }

    #[test]
    fn configuration_counts_events() {
        let empty = build_configuration(&[], 3, 20).unwrap();
        assert_eq!(empty.total(), 0.0);
        let one = build_configuration(&[(1, 2, 5)], 3, 20).unwrap();
        assert_eq!(one.get(1, 2, 5), 1.0);
        assert_eq!(one.values().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(build_configuration(&[(3, 0, 0)], 3, 20).is_err());
        assert!(build_configuration(&[(0, 0, 20)], 3, 20).is_err());
    }

    #[test]
    fn uniform_events_are_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let events: Vec<_> = (0..1000)
            .map(|_| (rng.random_range(0..10), rng.random_range(0..10), rng.random_range(0..20)))
            .collect();
        assert_eq!(build_configuration(&events, 10, 20).unwrap().total(), 1000.0);
    }

    #[test]
    fn context_graph_topology() {
        let regions = vec![ContextRegion { features: [1.0; 4] }; 8];
        let g = build_context_graph(&regions).unwrap();
        assert_eq!(g.nodes(), 9);
        assert!(g.is_symmetric());
        let degree = |i: usize| (0..9).filter(|&j| j != i && g.adjacency(i, j) == 1.0).count();
        // top-left corner: two ring neighbours plus the target
        assert_eq!(degree(1), 3);
        assert_eq!(g.adjacency(1, 0), 1.0);
        // top-middle: four ring neighbours plus the target
        assert_eq!(degree(2), 5);
        assert_eq!(degree(0), 8);
        assert!((0..9).all(|i| g.adjacency(i, i) == 1.0));
        assert!(g.features_of(0).iter().all(|&f| f == 0.0));
        assert!(build_context_graph(&regions[..7]).is_err());
    }

    #[test]
    fn single_step_walks() {
        let cfg = LandUseConfiguration::zeros(4, 20);
        let walks = simulate_trajectories(&cfg, 5, 1, 9);
        assert_eq!(walks.len(), 5);
        assert!(walks.iter().all(|w| w.len() == 1 && w[0] < 16));
        assert_eq!(walks, simulate_trajectories(&cfg, 5, 1, 9));
    }

    #[test]
    fn empty_dataset_has_metadata() {
        let ds = generate_dataset(1, 0, 5, 2).unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.n, ds.c, ds.m), (5, 20, 2));
        assert!(generate_dataset(1, 3, 1, 2).is_err());
        assert!(generate_dataset(1, 3, 5, 0).is_err());
    }
}
