//! Per-zone functionality projections `T = softmax(avg(F) W_a) z^T`.

use numgrad::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::landuse::ZonePlan;

/// `M` binary membership masks over an `N x N` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMasks {
    m: usize,
    n: usize,
    masks: Vec<f64>,
}

impl ZoneMasks {
    pub fn zones(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, zone: usize, row: usize, col: usize) -> f64 {
        self.masks[(zone * self.n + row) * self.n + col]
    }

    pub fn mask(&self, zone: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.masks[zone * nn..(zone + 1) * nn]
    }
}

pub fn partition_zones(plan: &ZonePlan, m: usize) -> Result<ZoneMasks> {
    let n = plan.n();
    let mut masks = vec![0.0; m * n * n];
    for (g, &l) in plan.labels().iter().enumerate() {
        if l >= m {
            return Err(Error::invalid("zone plan", format!("label {l} outside 0..{m}")));
        }
        masks[l * n * n + g] = 1.0;
    }
    Ok(ZoneMasks { m, n, masks })
}

/// `M x N` matrix whose entry `(m, j)` is the mean of `F_m[.., j]`.
pub fn avg_fusion(masks: &ZoneMasks) -> Tensor {
    let (m, n) = (masks.m, masks.n);
    let mut out = vec![0.0; m * n];
    for z in 0..m {
        for i in 0..n {
            for j in 0..n {
                out[z * n + j] += masks.get(z, i, j);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::new(vec![m, n], out).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalityProjections {
    /// Zone proportions, an `M`-simplex.
    pub proportions: Vec<f64>,
    /// `M x O`, row `m` equal to `p_m z`.
    pub t: Tensor,
}

/// Value-only projection.
pub fn project(masks: &ZoneMasks, z: &[f64], w_a: &Tensor) -> Result<FunctionalityProjections> {
    let mut tape = Tape::new();
    let fused = tape.constant(avg_fusion(masks));
    if w_a.dims2() != (masks.n, 1) {
        return Err(Error::invalid("W_a", format!("shape {:?}, expected [{}, 1]", w_a.shape(), masks.n)));
    }
    let wa = tape.constant(w_a.clone());
    let zv = tape.constant(Tensor::row(z));
    let (p, t) = project_tape(&mut tape, fused, wa, zv);
    Ok(FunctionalityProjections {
        proportions: tape.value(p).data().to_vec(),
        t: tape.value(t).clone(),
    })
}

/// Taped projection from the fused `M x N` masks, `W_a` (`N x 1`) and a
/// `1 x O` row `z`. Returns `(p, T)` with `p` as an `M x 1` column.
pub fn project_tape(tape: &mut Tape, fused: Var, w_a: Var, z: Var) -> (Var, Var) {
    let scores = tape.matmul(fused, w_a);
    let row = tape.transpose(scores);
    let soft = tape.softmax_rows(row);
    let p = tape.transpose(soft);
    let t = tape.matmul(p, z);
    (p, t)
}
