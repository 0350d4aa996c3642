//! Graph encoding of the geospatial context and fusion with the instruction.

use numgrad::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::citysynth::{Instruction, INSTRUCTION_LEVELS};
use crate::error::{Error, Result};

/// Symmetric 0/1 adjacency with self-loops plus an `n x d` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttributedGraph {
    n: usize,
    d: usize,
    adjacency: Vec<f64>,
    features: Vec<f64>,
}

impl SpatialAttributedGraph {
    pub fn new(n: usize, d: usize, adjacency: Vec<f64>, features: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 || adjacency.len() != n * n || features.len() != n * d {
            return Err(Error::invalid(
                "graph",
                format!(
                    "{} adjacency / {} feature values for n={n}, d={d}",
                    adjacency.len(),
                    features.len()
                ),
            ));
        }
        if adjacency.iter().any(|&a| a != 0.0 && a != 1.0) {
            return Err(Error::invalid("graph", "adjacency must be 0/1"));
        }
        Ok(Self {
            n,
            d,
            adjacency,
            features,
        })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn adjacency(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    pub fn features_of(&self, node: usize) -> &[f64] {
        &self.features[node * self.d..(node + 1) * self.d]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.adjacency(i, j) == self.adjacency(j, i)))
    }

    fn validate(&self) -> Result<()> {
        if !self.is_symmetric() {
            return Err(Error::invalid("graph", "adjacency is not symmetric"));
        }
        if (0..self.n).any(|i| self.adjacency(i, i) != 1.0) {
            return Err(Error::invalid("graph", "adjacency lacks self-loops"));
        }
        Ok(())
    }

    /// `D^{-1/2} A D^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.n;
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| {
                let deg: f64 = (0..n).map(|j| self.adjacency(i, j)).sum();
                if deg > 0.0 {
                    1.0 / deg.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let data = (0..n * n)
            .map(|k| self.adjacency[k] * inv_sqrt[k / n] * inv_sqrt[k % n])
            .collect();
        Tensor::new(vec![n, n], data).unwrap()
    }

    pub fn adjacency_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.adjacency.clone()).unwrap()
    }

    pub fn feature_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.d], self.features.clone()).unwrap()
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = self.adjacency(perm[i], perm[j]);
            }
        }
        let features = perm.iter().flat_map(|&p| self.features_of(p).to_vec()).collect();
        Self {
            n,
            d: self.d,
            adjacency,
            features,
        }
    }

    /// Same topology with every feature set to zero.
    pub fn without_features(&self) -> Self {
        Self {
            features: vec![0.0; self.features.len()],
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Two-layer graph convolution with mean and log-variance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder {
    pub dims: EncoderDims,
    pub params: ParamSet,
}

const W0: usize = 0;
const W_MU: usize = 1;
const W_LOGVAR: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoding {
    pub node_mu: Tensor,
    pub node_logvar: Tensor,
    pub pooled: Vec<f64>,
}

impl GraphEncoder {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push_glorot("encoder.w0", dims.input, dims.hidden, &mut rng);
        params.push_glorot("encoder.w_mu", dims.hidden, dims.output, &mut rng);
        params.push_glorot("encoder.w_logvar", dims.hidden, dims.output, &mut rng);
        Self { dims, params }
    }

    /// Wraps loaded weights, checking the three expected shapes.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let shape = |i: usize| params.get(i).value.dims2();
        if params.len() != 3 {
            return Err(Error::invalid("encoder checkpoint", format!("{} tensors", params.len())));
        }
        let (input, hidden) = shape(W0);
        let (h2, output) = shape(W_MU);
        if h2 != hidden || shape(W_LOGVAR) != (hidden, output) {
            return Err(Error::invalid("encoder checkpoint", "inconsistent layer shapes"));
        }
        Ok(Self {
            dims: EncoderDims { input, hidden, output },
            params,
        })
    }

    /// Records the forward pass; returns `(node_mu, node_logvar)`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], graph: &SpatialAttributedGraph) -> (Var, Var) {
        let a_hat = tape.constant(graph.normalized_adjacency());
        let x = tape.constant(graph.feature_tensor());
        let ax = tape.matmul(a_hat, x);
        let h = tape.matmul(ax, vars[W0]);
        let h = tape.relu(h);
        let ah = tape.matmul(a_hat, h);
        let mu = tape.matmul(ah, vars[W_MU]);
        let logvar = tape.matmul(ah, vars[W_LOGVAR]);
        (mu, logvar)
    }

    pub fn encode(&self, graph: &SpatialAttributedGraph) -> Result<GraphEncoding> {
        graph.validate()?;
        if graph.feature_dim() != self.dims.input {
            return Err(Error::invalid(
                "graph",
                format!("feature width {} vs encoder input {}", graph.feature_dim(), self.dims.input),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (mu, logvar) = self.forward(&mut tape, &vars, graph);
        let pooled_var = tape.mean_rows(mu);
        if let Some(what) = tape.non_finite() {
            return Err(numgrad::NumError::NonFinite(what.to_string()).into());
        }
        Ok(GraphEncoding {
            node_mu: tape.value(mu).clone(),
            node_logvar: tape.value(logvar).clone(),
            pooled: tape.value(pooled_var).data().to_vec(),
        })
    }

    /// Variational auto-encoder loss for one graph with latent noise `eps`
    /// (`n x d_g`): mean binary cross-entropy of the inner-product decoder
    /// against the adjacency, plus the standard-normal KL divided by `n^2`.
    pub fn vgae_loss(&self, tape: &mut Tape, vars: &[Var], graph: &SpatialAttributedGraph, eps: &Tensor) -> Var {
        let n = graph.nodes() as f64;
        let (mu, logvar) = self.forward(tape, vars, graph);
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(std, e);
        let z = tape.add(mu, noise);
        let recon = inner_product_bce(tape, z, graph);
        let kl = gaussian_kl(tape, mu, logvar);
        let kl = tape.scale(kl, 1.0 / (n * n));
        tape.add(recon, kl)
    }

    /// Reconstruction term evaluated at the latent means.
    pub fn reconstruction_loss(&self, graph: &SpatialAttributedGraph) -> f64 {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (mu, _) = self.forward(&mut tape, &vars, graph);
        let loss = inner_product_bce(&mut tape, mu, graph);
        tape.scalar(loss)
    }
}

fn inner_product_bce(tape: &mut Tape, z: Var, graph: &SpatialAttributedGraph) -> Var {
    let n = graph.nodes() as f64;
    let zt = tape.transpose(z);
    let logits = tape.matmul(z, zt);
    let sp = tape.softplus(logits);
    let a = tape.constant(graph.adjacency_tensor());
    let pos = tape.mul(a, logits);
    let bce = tape.sub(sp, pos);
    let total = tape.sum(bce);
    tape.scale(total, 1.0 / (n * n))
}

/// `1/2 sum(mu^2 + e^logvar - logvar - 1)` on the tape.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let m2 = tape.square(mu);
    let var = tape.exp(logvar);
    let s = tape.add(m2, var);
    let s = tape.sub(s, logvar);
    let s = tape.offset(s, -1.0);
    let total = tape.sum(s);
    tape.scale(total, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains the encoder on unlabeled graphs. The returned history holds the
/// mean reconstruction loss at the latent means before training (index 0)
/// and after every epoch.
pub fn train_graph_encoder(
    graphs: &[SpatialAttributedGraph],
    dims: EncoderDims,
    opts: &EncoderTraining,
) -> Result<(GraphEncoder, Vec<f64>)> {
    if graphs.is_empty() {
        return Err(Error::invalid("encoder training", "no graphs"));
    }
    for g in graphs {
        g.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut encoder = GraphEncoder::new(dims, rng.random());
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &encoder.params);
    let mean_recon = |enc: &GraphEncoder| {
        graphs.iter().map(|g| enc.reconstruction_loss(g)).sum::<f64>() / graphs.len() as f64
    };
    let mut history = vec![mean_recon(&encoder)];
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars = encoder.params.bind(&mut tape);
            let mut total: Option<Var> = None;
            for &gi in batch {
                let g = &graphs[gi];
                let eps = normal_tensor(&mut rng, g.nodes(), dims.output);
                let l = encoder.vgae_loss(&mut tape, &vars, g, &eps);
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let loss = total.expect("batch is non-empty");
            let grads = tape.backward(loss).map_err(|e| Error::Diverged {
                stage: "encoder",
                step,
                detail: e.to_string(),
            })?;
            encoder.params.zero_grad();
            encoder.params.accumulate(&grads, &vars);
            adam.step(&mut encoder.params)?;
            step += 1;
        }
        history.push(mean_recon(&encoder));
    }
    Ok((encoder, history))
}

pub fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `z = pooled graph embedding ++ one-hot instruction`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    values: Vec<f64>,
    graph_dim: usize,
}

impl ConditionEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn graph_part(&self) -> &[f64] {
        &self.values[..self.graph_dim]
    }

    pub fn instruction_part(&self) -> &[f64] {
        &self.values[self.graph_dim..]
    }

    /// Zero-pads on the right to `width`.
    pub fn padded(&self, width: usize) -> Vec<f64> {
        assert!(width >= self.values.len(), "cannot pad {} to {width}", self.values.len());
        let mut v = self.values.clone();
        v.resize(width, 0.0);
        v
    }

    pub fn with_graph_zeroed(mut self) -> Self {
        self.values[..self.graph_dim].fill(0.0);
        self
    }

    pub fn with_instruction_zeroed(mut self) -> Self {
        self.values[self.graph_dim..].fill(0.0);
        self
    }
}

pub fn fuse_condition(pooled: &[f64], instruction: Instruction) -> ConditionEmbedding {
    let mut values = pooled.to_vec();
    let mut one_hot = [0.0; INSTRUCTION_LEVELS];
    one_hot[instruction.level()] = 1.0;
    values.extend_from_slice(&one_hot);
    ConditionEmbedding {
        values,
        graph_dim: pooled.len(),
    }
}
