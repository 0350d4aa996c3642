//! Grid-level generation: attention across zone projections, a residual
//! feed-forward block and bilinear planning layers.

use numgrad::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionalizer::{avg_fusion, partition_zones, project_tape};
use crate::landuse::{LandUseConfiguration, ZonePlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Heads of width `O / h`; `W_T` is `O x O`.
    Split,
    /// Heads of width `O`; `W_T` is `hO x O`.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridGenConfig {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub width: usize,
    pub heads: usize,
    pub head_mode: HeadMode,
    /// When false `T' = T`.
    pub attention: bool,
    pub train_w_a: bool,
}

impl GridGenConfig {
    pub fn head_dim(&self) -> usize {
        match self.head_mode {
            HeadMode::Split => self.width / self.heads,
            HeadMode::Full => self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.n == 0 || self.m == 0 || self.c == 0 {
            return Err(Error::invalid("grid stage", "dimensions must be positive"));
        }
        if self.head_mode == HeadMode::Split && self.width % self.heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("width {} not divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }
}

/// Slot indices into the grid-stage parameter set.
#[derive(Clone, Copy, Debug)]
struct Layout {
    heads: usize,
}

impl Layout {
    const W_A: usize = 0;

    fn qkv(self, head: usize) -> (usize, usize, usize) {
        let base = 1 + 3 * head;
        (base, base + 1, base + 2)
    }

    fn w_t(self) -> usize {
        1 + 3 * self.heads
    }

    fn w1(self) -> usize {
        self.w_t() + 1
    }

    fn w2(self) -> usize {
        self.w_t() + 2
    }

    fn w_u(self) -> usize {
        self.w_t() + 3
    }

    fn w_d(self) -> usize {
        self.w_t() + 4
    }

    fn b(self) -> usize {
        self.w_t() + 5
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GridForward {
    pub proportions: Var,
    pub t: Var,
    pub t_prime: Var,
    pub t_hat: Var,
    /// `N x (N * C)`.
    pub x: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    pub config: GridGenConfig,
    pub params: ParamSet,
}

impl GridModel {
    pub fn new(config: GridGenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (o, dh, n, nc) = (config.width, config.head_dim(), config.n, config.n * config.c);
        let mut params = ParamSet::new();
        params.push_glorot("functional.w_a", n, 1, &mut rng);
        for h in 0..config.heads {
            for kind in ["q", "k", "v"] {
                params.push_glorot(format!("attention.w_{kind}{h}"), o, dh, &mut rng);
            }
        }
        params.push_glorot("attention.w_t", config.heads * dh, o, &mut rng);
        params.push_glorot("ffn.w1", o, o, &mut rng);
        params.push_glorot("ffn.w2", o, o, &mut rng);
        params.push_glorot("planning.w_u", n, config.m, &mut rng);
        params.push_glorot("planning.w_d", o, nc, &mut rng);
        params.push_zeros("planning.b", &[n, nc]);
        Ok(Self { config, params })
    }

    pub fn from_params(config: GridGenConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len()
            || template.params.iter().zip(params.iter()).any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::invalid("grid checkpoint", "parameter layout does not match the configuration"));
        }
        Ok(Self { config, params })
    }

    fn layout(&self) -> Layout {
        Layout {
            heads: self.config.heads,
        }
    }

    pub fn w_a(&self) -> &Tensor {
        &self.params.get(Layout::W_A).value
    }

    /// Per-head attention matrices `softmax(Q K^T / sqrt(d_k))`, each `M x M`.
    pub fn attention_weights(&self, tape: &mut Tape, vars: &[Var], t: Var) -> Vec<Var> {
        let l = self.layout();
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        (0..self.config.heads)
            .map(|h| {
                let (q, k, _) = l.qkv(h);
                let qh = tape.matmul(t, vars[q]);
                let kh = tape.matmul(t, vars[k]);
                let kt = tape.transpose(kh);
                let s = tape.matmul(qh, kt);
                let s = tape.scale(s, scale);
                tape.softmax_rows(s)
            })
            .collect()
    }

    /// `T' = T + Concat(A_1..A_h) W_T`.
    pub fn attention(&self, tape: &mut Tape, vars: &[Var], t: Var) -> Var {
        let l = self.layout();
        let weights = self.attention_weights(tape, vars, t);
        let heads: Vec<Var> = weights
            .into_iter()
            .enumerate()
            .map(|(h, a)| {
                let v = tape.matmul(t, vars[l.qkv(h).2]);
                tape.matmul(a, v)
            })
            .collect();
        let cat = tape.concat_cols(&heads);
        let mixed = tape.matmul(cat, vars[l.w_t()]);
        tape.add(t, mixed)
    }

    /// `T_hat = T' + relu(T' W_1) W_2`.
    pub fn ffn(&self, tape: &mut Tape, vars: &[Var], t_prime: Var) -> Var {
        let l = self.layout();
        let h = tape.matmul(t_prime, vars[l.w1()]);
        let h = tape.relu(h);
        let out = tape.matmul(h, vars[l.w2()]);
        tape.add(t_prime, out)
    }

    /// `W_u T_hat W_d + b`, an `N x (N * C)` matrix.
    pub fn planning(&self, tape: &mut Tape, vars: &[Var], t_hat: Var) -> Var {
        let l = self.layout();
        let left = tape.matmul(vars[l.w_u()], t_hat);
        let full = tape.matmul(left, vars[l.w_d()]);
        tape.add(full, vars[l.b()])
    }

    /// Forward pass from fused masks (`M x N`) and a `1 x O` condition row.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], fused: Var, z: Var) -> GridForward {
        let (proportions, t) = project_tape(tape, fused, vars[Layout::W_A], z);
        let t_prime = if self.config.attention {
            self.attention(tape, vars, t)
        } else {
            t
        };
        let t_hat = self.ffn(tape, vars, t_prime);
        let x = self.planning(tape, vars, t_hat);
        GridForward {
            proportions,
            t,
            t_prime,
            t_hat,
            x,
        }
    }

    fn check_inputs(&self, plan: &ZonePlan, z: &[f64]) -> Result<Tensor> {
        if plan.n() != self.config.n {
            return Err(Error::invalid("zone plan", format!("{0}x{0} for a {1}x{1} model", plan.n(), self.config.n)));
        }
        if z.len() != self.config.width {
            return Err(Error::invalid("condition", format!("width {} vs {}", z.len(), self.config.width)));
        }
        Ok(avg_fusion(&partition_zones(plan, self.config.m)?))
    }

    /// Raw configuration for a zone plan and condition.
    pub fn predict(&self, plan: &ZonePlan, z: &[f64]) -> Result<LandUseConfiguration> {
        let fused = self.check_inputs(plan, z)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let f = tape.constant(fused);
        let zv = tape.constant(Tensor::row(z));
        let out = self.forward(&mut tape, &vars, f, zv);
        if let Some(what) = tape.non_finite() {
            return Err(numgrad::NumError::NonFinite(what.to_string()).into());
        }
        LandUseConfiguration::from_values(self.config.n, self.config.c, tape.value(out.x).data().to_vec())
    }

    /// `L_S` over a batch of prepared examples, summed in index order.
    pub fn batch_loss(&self, tape: &mut Tape, vars: &[Var], batch: &[&GridExample]) -> Var {
        let mut total: Option<Var> = None;
        for ex in batch {
            let f = tape.constant(ex.fused.clone());
            let z = tape.constant(Tensor::row(&ex.z));
            let out = self.forward(tape, vars, f, z);
            let target = tape.constant(ex.target.clone());
            let diff = tape.sub(out.x, target);
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            total = Some(match total {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        total.expect("nonempty batch")
    }

    pub fn dataset_loss(&self, examples: &[GridExample]) -> f64 {
        examples
            .chunks(64)
            .map(|chunk| {
                let mut tape = Tape::new();
                let vars = self.params.bind_frozen(&mut tape);
                let refs: Vec<&GridExample> = chunk.iter().collect();
                let l = self.batch_loss(&mut tape, &vars, &refs);
                tape.scalar(l)
            })
            .sum()
    }
}

/// `sum_k ||real_k - generated_k||^2` over all entries.
pub fn reconstruction_loss(real: &[LandUseConfiguration], generated: &[LandUseConfiguration]) -> Result<f64> {
    if real.len() != generated.len() {
        return Err(Error::invalid("reconstruction loss", format!("{} vs {} samples", real.len(), generated.len())));
    }
    let mut total = 0.0;
    for (a, b) in real.iter().zip(generated) {
        if a.n() != b.n() || a.categories() != b.categories() {
            return Err(Error::invalid("reconstruction loss", "configuration shapes differ"));
        }
        total += a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total)
}

/// Training triple with the fused masks precomputed.
#[derive(Clone, Debug)]
pub struct GridExample {
    pub z: Vec<f64>,
    pub fused: Tensor,
    /// `N x (N * C)`.
    pub target: Tensor,
}

impl GridExample {
    pub fn new(z: Vec<f64>, plan: &ZonePlan, m: usize, target: &LandUseConfiguration) -> Result<Self> {
        if plan.n() != target.n() {
            return Err(Error::invalid("grid example", "zone plan and configuration sizes differ"));
        }
        let n = target.n();
        Ok(Self {
            z,
            fused: avg_fusion(&partition_zones(plan, m)?),
            target: Tensor::new(vec![n, n * target.categories()], target.values().to_vec())?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct GridRun {
    pub model: GridModel,
    /// Full train-split `L_S`; index 0 is before the first update.
    pub history: Vec<f64>,
}

pub fn train_grid_stage(examples: &[GridExample], config: GridGenConfig, opts: &GridTraining) -> Result<GridRun> {
    if examples.is_empty() {
        return Err(Error::invalid("grid training", "no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = GridModel::new(config, rng.random())?;
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &model.params);
    let mut history = vec![model.dataset_loss(examples)];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<&GridExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let loss = model.batch_loss(&mut tape, &vars, &batch);
            let grads = tape.backward(loss).map_err(|e| Error::Diverged {
                stage: "grid",
                step,
                detail: e.to_string(),
            })?;
            model.params.zero_grad();
            model.params.accumulate(&grads, &vars);
            if !model.config.train_w_a {
                model.params.get_mut(Layout::W_A).zero_grad();
            }
            adam.step(&mut model.params)?;
            step += 1;
        }
        let l = model.dataset_loss(examples);
        if !l.is_finite() {
            return Err(Error::Diverged {
                stage: "grid",
                step,
                detail: format!("train loss {l}"),
            });
        }
        history.push(l);
    }
    Ok(GridRun { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(m: usize, width: usize, heads: usize) -> GridGenConfig {
        GridGenConfig {
            n: 2,
            m,
            c: 3,
            width,
            heads,
            head_mode: HeadMode::Split,
            attention: true,
            train_w_a: true,
        }
    }

    fn set(model: &mut GridModel, name: &str, t: Tensor) {
        let i = model.params.position(name).unwrap();
        model.params.get_mut(i).value = t;
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(GridModel::new(config(2, 6, 4), 0).is_err());
        let mut full = config(2, 6, 4);
        full.head_mode = HeadMode::Full;
        let m = GridModel::new(full, 0).unwrap();
        assert_eq!(m.params.by_name("attention.w_t").unwrap().value.shape(), &[24, 6]);
        let split = GridModel::new(config(2, 8, 4), 0).unwrap();
        assert_eq!(split.params.by_name("attention.w_t").unwrap().value.shape(), &[8, 8]);
        assert_eq!(split.params.by_name("attention.w_q0").unwrap().value.shape(), &[8, 2]);
    }

    #[test]
    fn hand_attention_one_head() {
        let mut model = GridModel::new(config(2, 2, 1), 0).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for name in ["attention.w_q0", "attention.w_k0", "attention.w_v0", "attention.w_t"] {
            set(&mut model, name, eye.clone());
        }
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let vars = model.params.bind_frozen(&mut tape);
        let tv = tape.constant(t.clone());
        let out = model.attention(&mut tape, &vars, tv);
        // Q K^T / sqrt 2 = [[1, 0], [0, 4]] / sqrt 2
        let s = 2f64.sqrt();
        let row0 = [(1.0 / s).exp(), 1.0];
        let row1 = [1.0, (4.0 / s).exp()];
        let a0 = [row0[0] / (row0[0] + row0[1]), row0[1] / (row0[0] + row0[1])];
        let a1 = [row1[0] / (row1[0] + row1[1]), row1[1] / (row1[0] + row1[1])];
        // A V with V = T, then residual
        let expected = [1.0 + a0[0], 2.0 * a0[1], a1[0], 2.0 + 2.0 * a1[1]];
        for (got, want) in tape.value(out).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_zone_attention_passes_values() {
        let model = GridModel::new(config(1, 4, 2), 5).unwrap();
        let mut tape = Tape::new();
        let vars = model.params.bind_frozen(&mut tape);
        let t = tape.constant(Tensor::row(&[0.5, -1.0, 2.0, 0.25]));
        let w = model.attention_weights(&mut tape, &vars, t);
        assert!(w.iter().all(|&a| tape.value(a).data() == [1.0]));
        let out = model.attention(&mut tape, &vars, t);
        let vs: Vec<Var> = (0..2).map(|h| tape.matmul(t, vars[1 + 3 * h + 2])).collect();
        let cat = tape.concat_cols(&vs);
        let mixed = tape.matmul(cat, vars[7]);
        let want = tape.add(t, mixed);
        let (a, b) = (tape.value(out).data().to_vec(), tape.value(want).data().to_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn ffn_hand_case() {
        let mut model = GridModel::new(config(1, 2, 1), 0).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        set(&mut model, "ffn.w1", eye.clone());
        set(&mut model, "ffn.w2", eye);
        let mut tape = Tape::new();
        let vars = model.params.bind_frozen(&mut tape);
        let t = tape.constant(Tensor::row(&[1.0, -1.0]));
        let out = model.ffn(&mut tape, &vars, t);
        assert_eq!(tape.value(out).data(), &[2.0, -1.0]);
    }

    #[test]
    fn planning_hand_case() {
        let cfg = GridGenConfig {
            n: 2,
            m: 1,
            c: 1,
            width: 1,
            heads: 1,
            head_mode: HeadMode::Split,
            attention: true,
            train_w_a: true,
        };
        let mut model = GridModel::new(cfg, 0).unwrap();
        set(&mut model, "planning.w_u", Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        set(&mut model, "planning.w_d", Tensor::row(&[1.0, -1.0]));
        let mut tape = Tape::new();
        let vars = model.params.bind_frozen(&mut tape);
        let t = tape.constant(Tensor::row(&[3.0]));
        let x = model.planning(&mut tape, &vars, t);
        assert_eq!(tape.value(x).data(), &[3.0, -3.0, 6.0, -6.0]);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let zero = LandUseConfiguration::zeros(2, 1);
        let ones = LandUseConfiguration::from_values(2, 1, vec![1.0; 4]).unwrap();
        assert_eq!(reconstruction_loss(&[zero.clone()], &[ones]).unwrap(), 4.0);
        assert_eq!(reconstruction_loss(&[zero.clone()], &[zero.clone()]).unwrap(), 0.0);
        assert!(reconstruction_loss(&[zero], &[LandUseConfiguration::zeros(3, 1)]).is_err());
    }

    #[test]
    fn predict_rejects_bad_shapes() {
        let model = GridModel::new(config(2, 4, 2), 1).unwrap();
        assert!(model.predict(&ZonePlan::uniform(3, 0), &[0.0; 4]).is_err());
        assert!(model.predict(&ZonePlan::uniform(2, 0), &[0.0; 3]).is_err());
        assert!(model.predict(&ZonePlan::uniform(2, 2), &[0.0; 4]).is_err());
        let x = model.predict(&ZonePlan::uniform(2, 1), &[0.0, 1.0, 0.5, -0.5]).unwrap();
        assert_eq!((x.n(), x.categories()), (2, 3));
    }
}
