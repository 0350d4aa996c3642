//! Zone-level conditional GAN.
//!
//! The generator maps `eta ++ c` to per-grid logits over `M` zone labels and
//! relaxes them with a per-grid softmax. The discriminator scores a flattened
//! plan (soft for generated, one-hot for real) concatenated with the
//! un-augmented condition `z`.

use numgrad::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::condaug::{augmentor_tensors, Augmentor, AUGMENTOR_SLOTS};
use crate::ctxembed::normal_tensor;
use crate::error::{Error, Result};
use crate::evalmetrics::{self, Divergence};
use crate::landuse::ZonePlan;

pub const LOG_CLAMP: f64 = 1e-7;

/// Per-grid simplex over `M` zone labels, grid-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftZonePlan {
    n: usize,
    m: usize,
    probs: Vec<f64>,
}

impl SoftZonePlan {
    pub fn new(n: usize, m: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * n * m {
            return Err(Error::invalid("soft zone plan", format!("{} values", probs.len())));
        }
        Ok(Self { n, m, probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn zones(&self) -> usize {
        self.m
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn grid(&self, g: usize) -> &[f64] {
        &self.probs[g * self.m..(g + 1) * self.m]
    }

    /// Per-grid argmax, ties to the lowest label.
    pub fn harden(&self) -> ZonePlan {
        let labels = self
            .probs
            .chunks(self.m)
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect();
        ZonePlan::new(self.n, labels).unwrap()
    }
}

pub fn one_hot_plan(plan: &ZonePlan, m: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; plan.labels().len() * m];
    for (g, &l) in plan.labels().iter().enumerate() {
        if l >= m {
            return Err(Error::invalid("zone plan", format!("label {l} outside 0..{m}")));
        }
        out[g * m + l] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneGanConfig {
    pub n: usize,
    pub m: usize,
    pub cond_width: usize,
    pub noise_dim: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub non_saturating: bool,
    /// When false the generator consumes `z` directly and the KL term is dropped.
    pub augment: bool,
}

impl ZoneGanConfig {
    pub fn plan_width(&self) -> usize {
        self.n * self.n * self.m
    }
}

// generator slots 0..6, augmentor slots from GEN_AUG
const GEN_AUG: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneGan {
    pub config: ZoneGanConfig,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
}

/// One minibatch; every tensor has one row per sample.
#[derive(Clone, Debug)]
pub struct GanBatch {
    pub z: Tensor,
    pub eta: Tensor,
    pub eps: Tensor,
    pub real: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepLog {
    pub step: usize,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanEpochStats {
    pub epoch: usize,
    pub mean_real_score: f64,
    pub mean_fake_score: f64,
    /// Mean over grids of `KL(real label distribution || generated)`.
    pub label_kl: f64,
}

fn push_mlp(ps: &mut ParamSet, prefix: &str, dims: &[usize], rng: &mut impl Rng) {
    for (i, w) in dims.windows(2).enumerate() {
        ps.push_glorot(format!("{prefix}.w{}", i + 1), w[0], w[1], rng);
        ps.push_zeros(format!("{prefix}.b{}", i + 1), &[1, w[1]]);
    }
}

fn mlp(tape: &mut Tape, vars: &[Var], x: Var) -> Var {
    let layers = vars.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = tape.linear(h, vars[2 * l], vars[2 * l + 1]);
        if l + 1 < layers {
            h = tape.relu(h);
        }
    }
    h
}

impl ZoneGan {
    pub fn new(config: ZoneGanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let mut generator = ParamSet::new();
        push_mlp(
            &mut generator,
            "generator",
            &[config.noise_dim + config.cond_width, h, h, config.plan_width()],
            &mut rng,
        );
        Augmentor::new(config.cond_width).init_params(&mut generator, rng.random());
        let mut discriminator = ParamSet::new();
        push_mlp(
            &mut discriminator,
            "discriminator",
            &[config.plan_width() + config.cond_width, h, h, 1],
            &mut rng,
        );
        Self {
            config,
            generator,
            discriminator,
        }
    }

    pub fn augmentor(&self) -> Augmentor {
        Augmentor::new(self.config.cond_width)
    }

    pub fn augmentor_tensors(&self) -> Vec<Tensor> {
        augmentor_tensors(&self.generator, GEN_AUG)
    }

    /// Generator body from `eta` and `c` rows to soft plans, `B x (N*N*M)`.
    pub fn generator_forward(&self, tape: &mut Tape, gvars: &[Var], eta: Var, c: Var) -> Var {
        let input = tape.concat_cols(&[eta, c]);
        let logits = mlp(tape, &gvars[..GEN_AUG], input);
        let rows = tape.value(logits).dims2().0;
        let grids = tape.reshape(logits, &[rows * self.config.n * self.config.n, self.config.m]);
        let soft = tape.softmax_rows(grids);
        tape.reshape(soft, &[rows, self.config.plan_width()])
    }

    /// `c` for a batch, plus `(mu, logvar)` when augmentation is on.
    pub fn condition(&self, tape: &mut Tape, gvars: &[Var], z: Var, eps: Var) -> (Var, Option<(Var, Var)>) {
        if self.config.augment {
            let aug = self.augmentor();
            let (c, mu, lv) = aug.sample(tape, &gvars[GEN_AUG..GEN_AUG + AUGMENTOR_SLOTS], z, eps);
            (c, Some((mu, lv)))
        } else {
            (z, None)
        }
    }

    /// Scores in `(0, 1)`, `B x 1`.
    pub fn discriminator_forward(&self, tape: &mut Tape, dvars: &[Var], plan: Var, z: Var) -> Var {
        let input = tape.concat_cols(&[plan, z]);
        let logit = mlp(tape, dvars, input);
        tape.sigmoid(logit)
    }

    fn check_width(&self, what: &'static str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::invalid(what, format!("width {got}, expected {want}")));
        }
        Ok(())
    }

    pub fn generate_zones(&self, eta: &[f64], c: &[f64]) -> Result<SoftZonePlan> {
        self.check_width("eta", eta.len(), self.config.noise_dim)?;
        self.check_width("condition", c.len(), self.config.cond_width)?;
        let mut tape = Tape::new();
        let g = self.generator.bind_frozen(&mut tape);
        let e = tape.constant(Tensor::row(eta));
        let cv = tape.constant(Tensor::row(c));
        let soft = self.generator_forward(&mut tape, &g, e, cv);
        if let Some(what) = tape.non_finite() {
            return Err(numgrad::NumError::NonFinite(what.to_string()).into());
        }
        SoftZonePlan::new(self.config.n, self.config.m, tape.value(soft).data().to_vec())
    }

    pub fn discriminate(&self, plan: &[f64], z: &[f64]) -> Result<f64> {
        self.check_width("plan", plan.len(), self.config.plan_width())?;
        self.check_width("condition", z.len(), self.config.cond_width)?;
        let mut tape = Tape::new();
        let d = self.discriminator.bind_frozen(&mut tape);
        let p = tape.constant(Tensor::row(plan));
        let zv = tape.constant(Tensor::row(z));
        let s = self.discriminator_forward(&mut tape, &d, p, zv);
        Ok(tape.scalar(s))
    }

    /// `sum_k ln(1 - D(G(eta, c), z)) + lambda * sum_k KL` (or the
    /// non-saturating `-sum_k ln D(G(eta, c), z)` first term). Returns
    /// `(loss, kl_sum)`; `kl_sum` is `None` without augmentation.
    pub fn generator_loss(&self, tape: &mut Tape, gvars: &[Var], dvars: &[Var], batch: &GanBatch) -> (Var, Option<Var>) {
        let z = tape.constant(batch.z.clone());
        let eta = tape.constant(batch.eta.clone());
        let eps = tape.constant(batch.eps.clone());
        let (c, dist) = self.condition(tape, gvars, z, eps);
        let fake = self.generator_forward(tape, gvars, eta, c);
        let score = self.discriminator_forward(tape, dvars, fake, z);
        let adv = if self.config.non_saturating {
            let l = tape.ln_clamped(score, LOG_CLAMP, 1.0 - LOG_CLAMP);
            let s = tape.sum(l);
            tape.scale(s, -1.0)
        } else {
            let one_minus = tape.rsub_scalar(1.0, score);
            let l = tape.ln_clamped(one_minus, LOG_CLAMP, 1.0 - LOG_CLAMP);
            tape.sum(l)
        };
        match dist {
            Some((mu, lv)) => {
                let kl = self.augmentor().kl_term(tape, mu, lv);
                let weighted = tape.scale(kl, self.config.lambda);
                (tape.add(adv, weighted), Some(kl))
            }
            None => (adv, None),
        }
    }

    /// `sum_k ln(1 - D(fake_k, z_k)) + ln D(U_k, z_k)`, to be maximised.
    /// `fake` is a constant: no gradient reaches the generator.
    pub fn discriminator_loss(&self, tape: &mut Tape, dvars: &[Var], batch: &GanBatch, fake: &Tensor) -> Var {
        let z = tape.constant(batch.z.clone());
        let f = tape.constant(fake.clone());
        let real = tape.constant(batch.real.clone());
        let fake_score = self.discriminator_forward(tape, dvars, f, z);
        let real_score = self.discriminator_forward(tape, dvars, real, z);
        let one_minus = tape.rsub_scalar(1.0, fake_score);
        let lf = tape.ln_clamped(one_minus, LOG_CLAMP, 1.0 - LOG_CLAMP);
        let lr = tape.ln_clamped(real_score, LOG_CLAMP, 1.0 - LOG_CLAMP);
        let both = tape.add(lf, lr);
        tape.sum(both)
    }

    /// Generated soft plans for a batch, evaluated without gradients.
    pub fn sample_plans(&self, batch: &GanBatch) -> Tensor {
        let mut tape = Tape::new();
        let g = self.generator.bind_frozen(&mut tape);
        let z = tape.constant(batch.z.clone());
        let eta = tape.constant(batch.eta.clone());
        let eps = tape.constant(batch.eps.clone());
        let (c, _) = self.condition(&mut tape, &g, z, eps);
        let fake = self.generator_forward(&mut tape, &g, eta, c);
        tape.value(fake).clone()
    }

    fn scores(&self, plans: &Tensor, z: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let d = self.discriminator.bind_frozen(&mut tape);
        let p = tape.constant(plans.clone());
        let zv = tape.constant(z.clone());
        let s = self.discriminator_forward(&mut tape, &d, p, zv);
        tape.value(s).data().to_vec()
    }
}

/// Training pair: padded condition `z` and the discovered zone plan.
#[derive(Clone, Debug)]
pub struct ZoneExample {
    pub z: Vec<f64>,
    pub plan: ZonePlan,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct GanRun {
    pub model: ZoneGan,
    pub steps: Vec<GanStepLog>,
    /// Index 0 is measured before the first update.
    pub epochs: Vec<GanEpochStats>,
}

pub fn make_batch(
    gan: &ZoneGan,
    examples: &[ZoneExample],
    indices: &[usize],
    rng: &mut impl Rng,
) -> Result<GanBatch> {
    let cfg = &gan.config;
    let b = indices.len();
    let mut z = Vec::with_capacity(b * cfg.cond_width);
    let mut real = Vec::with_capacity(b * cfg.plan_width());
    for &i in indices {
        let ex = &examples[i];
        if ex.z.len() != cfg.cond_width || ex.plan.n() != cfg.n {
            return Err(Error::invalid("zone example", format!("example {i} has the wrong shape")));
        }
        z.extend_from_slice(&ex.z);
        real.extend(one_hot_plan(&ex.plan, cfg.m)?);
    }
    Ok(GanBatch {
        z: Tensor::new(vec![b, cfg.cond_width], z)?,
        eta: normal_tensor(rng, b, cfg.noise_dim),
        eps: normal_tensor(rng, b, cfg.cond_width),
        real: Tensor::new(vec![b, cfg.plan_width()], real)?,
    })
}

/// Mean scores and per-grid label KL over `examples` with fresh noise.
pub fn epoch_stats(gan: &ZoneGan, examples: &[ZoneExample], epoch: usize, seed: u64) -> Result<GanEpochStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..examples.len()).collect();
    let batch = make_batch(gan, examples, &idx, &mut rng)?;
    let fake = gan.sample_plans(&batch);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mean_real_score = mean(gan.scores(&batch.real, &batch.z));
    let mean_fake_score = mean(gan.scores(&fake, &batch.z));

    let (n2, m) = (gan.config.n * gan.config.n, gan.config.m);
    let mut label_kl = 0.0;
    for g in 0..n2 {
        let mut real_hist = vec![0.0; m];
        let mut gen_hist = vec![0.0; m];
        for k in 0..examples.len() {
            for j in 0..m {
                real_hist[j] += batch.real.get2(k, g * m + j);
                gen_hist[j] += fake.get2(k, g * m + j);
            }
        }
        let p = evalmetrics::normalize_smoothed(&real_hist)?;
        let q = evalmetrics::normalize_smoothed(&gen_hist)?;
        label_kl += evalmetrics::divergence(Divergence::Kl, &p, &q)?;
    }
    Ok(GanEpochStats {
        epoch,
        mean_real_score,
        mean_fake_score,
        label_kl: label_kl / n2 as f64,
    })
}

/// Alternating optimisation: per minibatch one discriminator ascent step,
/// then one generator descent step.
pub fn train_zone_gan(examples: &[ZoneExample], config: ZoneGanConfig, opts: &GanTraining) -> Result<GanRun> {
    if examples.is_empty() {
        return Err(Error::invalid("zone GAN training", "no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut gan = ZoneGan::new(config, rng.random());
    let stats_seed: u64 = rng.random();
    let adam_cfg = AdamConfig::with_lr(opts.lr);
    let mut g_opt = Adam::new(adam_cfg, &gan.generator);
    let mut d_opt = Adam::new(adam_cfg, &gan.discriminator);
    let mut steps = Vec::new();
    let mut epochs = vec![epoch_stats(&gan, examples, 0, stats_seed)?];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let diverged = |step: usize, detail: String| Error::Diverged {
        stage: "zone GAN",
        step,
        detail,
    };

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let step = steps.len();
            let batch = make_batch(&gan, examples, chunk, &mut rng)?;

            let fake = gan.sample_plans(&batch);
            let mut tape = Tape::new();
            let dvars = gan.discriminator.bind(&mut tape);
            let ld = gan.discriminator_loss(&mut tape, &dvars, &batch, &fake);
            let neg = tape.scale(ld, -1.0);
            let grads = tape.backward(neg).map_err(|e| diverged(step, e.to_string()))?;
            let d_value = tape.scalar(ld);
            gan.discriminator.zero_grad();
            gan.discriminator.accumulate(&grads, &dvars);
            d_opt.step(&mut gan.discriminator)?;

            let mut tape = Tape::new();
            let gvars = gan.generator.bind(&mut tape);
            let dfrozen = gan.discriminator.bind_frozen(&mut tape);
            let (lg, kl) = gan.generator_loss(&mut tape, &gvars, &dfrozen, &batch);
            let grads = tape.backward(lg).map_err(|e| diverged(step, e.to_string()))?;
            gan.generator.zero_grad();
            gan.generator.accumulate(&grads, &gvars);
            g_opt.step(&mut gan.generator)?;

            let log = GanStepLog {
                step,
                generator_loss: tape.scalar(lg),
                discriminator_loss: d_value,
                kl: kl.map_or(0.0, |k| tape.scalar(k)),
            };
            if !(log.generator_loss.is_finite() && log.discriminator_loss.is_finite()) {
                return Err(diverged(step, format!("{log:?}")));
            }
            steps.push(log);
        }
        epochs.push(epoch_stats(&gan, examples, epoch, stats_seed)?);
    }
    Ok(GanRun {
        model: gan,
        steps,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize, m: usize) -> ZoneGanConfig {
        ZoneGanConfig {
            n,
            m,
            cond_width: 4,
            noise_dim: 3,
            hidden: 8,
            lambda: 1.0,
            non_saturating: false,
            augment: true,
        }
    }

    fn zero_weights(ps: &mut ParamSet) {
        for p in ps.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_generator_gives_uniform_grids() {
        let mut gan = ZoneGan::new(config(3, 4), 1);
        zero_weights(&mut gan.generator);
        let soft = gan.generate_zones(&[0.3, 1.0, -2.0], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(soft.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn soft_plans_are_simplexes() {
        let gan = ZoneGan::new(config(3, 4), 2);
        let soft = gan.generate_zones(&[0.3, 1.0, -2.0], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for g in 0..9 {
            let row = soft.grid(g);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn hardening_takes_argmax() {
        let soft = SoftZonePlan::new(2, 2, vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.3, 0.7]).unwrap();
        assert_eq!(soft.harden().labels(), &[0, 1, 0, 1]);
    }

    #[test]
    fn zero_discriminator_scores_one_half() {
        let mut gan = ZoneGan::new(config(2, 2), 3);
        zero_weights(&mut gan.discriminator);
        let plan = vec![0.5; 8];
        assert_eq!(gan.discriminate(&plan, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);
    }

    #[test]
    fn scores_are_open_unit_interval_and_deterministic() {
        let gan = ZoneGan::new(config(2, 2), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let plan: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = gan.discriminate(&plan, &z).unwrap();
            assert!(s > 0.0 && s < 1.0);
            assert_eq!(s, gan.discriminate(&plan, &z).unwrap());
        }
    }

    fn constant_half_batch(gan: &mut ZoneGan, k: usize) -> GanBatch {
        zero_weights(&mut gan.discriminator);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ex: Vec<ZoneExample> = (0..k)
            .map(|i| ZoneExample {
                z: vec![i as f64 * 0.1; 4],
                plan: ZonePlan::uniform(2, i % 2),
            })
            .collect();
        let idx: Vec<usize> = (0..k).collect();
        make_batch(gan, &ex, &idx, &mut rng).unwrap()
    }

    #[test]
    fn losses_at_constant_half_discriminator() {
        let k = 5;
        let mut cfg = config(2, 2);
        cfg.lambda = 0.0;
        let mut gan = ZoneGan::new(cfg, 5);
        let batch = constant_half_batch(&mut gan, k);

        let mut tape = Tape::new();
        let g = gan.generator.bind(&mut tape);
        let d = gan.discriminator.bind_frozen(&mut tape);
        let (lg, kl) = gan.generator_loss(&mut tape, &g, &d, &batch);
        assert!((tape.scalar(lg) - k as f64 * 0.5f64.ln()).abs() < 1e-12);
        let kl_value = tape.scalar(kl.unwrap());

        gan.config.lambda = 1.0;
        let mut tape = Tape::new();
        let g = gan.generator.bind(&mut tape);
        let d = gan.discriminator.bind_frozen(&mut tape);
        let (lg1, _) = gan.generator_loss(&mut tape, &g, &d, &batch);
        assert!((tape.scalar(lg1) - (k as f64 * 0.5f64.ln() + kl_value)).abs() < 1e-12);

        // the KL term equals the per-sample closed form summed over the batch
        let aug = gan.augmentor();
        let at = gan.augmentor_tensors();
        let summed: f64 = (0..k)
            .map(|i| aug.kl_penalty(&at, &batch.z.data()[i * 4..(i + 1) * 4]).unwrap())
            .sum();
        assert!((kl_value - summed).abs() < 1e-12);

        let fake = gan.sample_plans(&batch);
        let mut tape = Tape::new();
        let d = gan.discriminator.bind(&mut tape);
        let ld = gan.discriminator_loss(&mut tape, &d, &batch, &fake);
        assert!((tape.scalar(ld) + 2.0 * k as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_objective_is_nonpositive() {
        let mut gan = ZoneGan::new(config(2, 2), 6);
        let batch = constant_half_batch(&mut gan, 4);
        let gan = ZoneGan::new(config(2, 2), 7);
        let fake = gan.sample_plans(&batch);
        let mut tape = Tape::new();
        let d = gan.discriminator.bind(&mut tape);
        let ld = gan.discriminator_loss(&mut tape, &d, &batch, &fake);
        assert!(tape.scalar(ld) <= 0.0);
    }

    #[test]
    fn generator_loss_gradient_check() {
        let mut gan = ZoneGan::new(config(2, 3), 8);
        let batch = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let ex = vec![ZoneExample {
                z: vec![0.3, -0.5, 0.8, 0.1],
                plan: ZonePlan::new(2, vec![0, 1, 2, 1]).unwrap(),
            }];
            make_batch(&gan, &ex, &[0], &mut rng).unwrap()
        };
        let disc = gan.discriminator.clone();
        let g = gan.clone();
        let report = numgrad::gradient_check(&mut gan.generator, 200, 2, |tape, v| {
            let d = disc.bind_frozen(tape);
            Ok(g.generator_loss(tape, v, &d, &batch).0)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");

        let fake = g.sample_plans(&batch);
        let report = numgrad::gradient_check(&mut gan.discriminator, 200, 3, |tape, v| {
            Ok(g.discriminator_loss(tape, v, &batch, &fake))
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
