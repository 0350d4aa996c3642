//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape from the loss node to the front and accumulates vector-Jacobian
//! products. Shape mismatches are programming errors and panic; non-finite
//! values are recorded and surface as an error from [`Tape::backward`].

use crate::error::{NumError, Result};
use crate::tensor::{matmul_into, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    LnClamped { x: Var, lo: f64, hi: f64 },
    Square(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.check(&value, "leaf");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.check(&value, op_name(&op));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&mut self, value: &Tensor, what: &str) {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("{what} (node {})", self.nodes.len()));
        }
    }

    /// First op that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y).unwrap();
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y).unwrap();
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y).unwrap();
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `a[r x c] + row[1 x c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.value(a).dims2();
        let rv = self.value(row);
        assert_eq!(rv.len(), c, "add_row: row width {} vs {}", rv.len(), c);
        let rd = rv.data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(&rd) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a), &[a])
    }

    /// `k - a` elementwise.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `x * w + b` with `b` a row broadcast.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// `ln(clamp(x, lo, hi))`; zero gradient where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi).ln());
        self.push(v, Op::LnClamped { x: a, lo, hi }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.dims2();
        let mut v = src.clone();
        if src.is_finite() {
            for i in 0..r {
                softmax_in_place(&mut v.data_mut()[i * c..(i + 1) * c]);
            }
        } else {
            v = src.map(|_| f64::NAN);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat_cols: row count {r} vs {rows}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], out).unwrap();
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        let (r, c) = src.dims2();
        assert!(start + width <= c && width > 0, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src.data()[i * c + start..i * c + start + width]);
        }
        let v = Tensor::new(vec![r, width], out).unwrap();
        self.push(v, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Column means over rows: `[r x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.dims2();
        let mut out = vec![0.0; c];
        for row in src.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let v = Tensor::new(vec![1, c], out).unwrap();
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(what) = &self.non_finite {
            return Err(NumError::NonFinite(what.clone()));
        }
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || g.zip_map(self.value(*b), "mul", |x, y| x * y).unwrap());
                self.acc(grads, *b, || g.zip_map(self.value(*a), "mul", |x, y| x * y).unwrap());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *row, || {
                    let rv = self.value(*row);
                    let c = rv.len();
                    let mut out = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (o, &x) in out.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    Tensor::new(rv.shape().to_vec(), out).unwrap()
                });
            }
            Op::Scale(a, k) => self.acc(grads, *a, || g.map(|x| x * k)),
            Op::Offset(a) => self.acc(grads, *a, || g.clone()),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let (_, n) = bv.dims2();
                self.acc(grads, *a, || {
                    // dA = G * B^T
                    let mut out = vec![0.0; m * k];
                    let bd = bv.data();
                    for i in 0..m {
                        let g_row = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &bd[p * n..(p + 1) * n];
                            out[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor::new(av.shape().to_vec(), out).unwrap()
                });
                self.acc(grads, *b, || {
                    // dB = A^T * G
                    let at = av.transpose();
                    let mut out = vec![0.0; k * n];
                    matmul_into(at.data(), gd, &mut out, k, m, n);
                    Tensor::new(bv.shape().to_vec(), out).unwrap()
                });
            }
            Op::Transpose(a) => {
                let (r, c) = g.dims2();
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, || {
                    let t = g.transpose();
                    debug_assert_eq!(t.len(), r * c);
                    t.reshape(&shape).unwrap()
                });
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, || g.reshape(&shape).unwrap());
            }
            Op::Relu(a) => self.acc(grads, *a, || {
                g.zip_map(self.value(*a), "relu", |x, v| if v > 0.0 { x } else { 0.0 })
                    .unwrap()
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, || {
                g.zip_map(&node.value, "sigmoid", |x, y| x * y * (1.0 - y)).unwrap()
            }),
            Op::Exp(a) => self.acc(grads, *a, || {
                g.zip_map(&node.value, "exp", |x, y| x * y).unwrap()
            }),
            Op::Softplus(a) => self.acc(grads, *a, || {
                g.zip_map(self.value(*a), "softplus", |x, v| x * sigmoid(v)).unwrap()
            }),
            Op::LnClamped { x, lo, hi } => self.acc(grads, *x, || {
                g.zip_map(self.value(*x), "ln", |gx, v| {
                    if v < *lo || v > *hi {
                        0.0
                    } else {
                        gx / v
                    }
                })
                .unwrap()
            }),
            Op::Square(a) => self.acc(grads, *a, || {
                g.zip_map(self.value(*a), "square", |x, v| 2.0 * x * v).unwrap()
            }),
            Op::SoftmaxRows(a) => self.acc(grads, *a, || {
                let y = &node.value;
                let (r, c) = y.dims2();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Tensor::new(y.shape().to_vec(), out).unwrap()
            }),
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.dims2().1;
                    let shape = pv.shape().to_vec();
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            out.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        Tensor::new(shape, out).unwrap()
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2();
                let w = g.dims2().1;
                self.acc(grads, *x, || {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    Tensor::new(xv.shape().to_vec(), out).unwrap()
                });
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, || Tensor::full(&shape, gd[0]));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (r, _) = av.dims2();
                self.acc(grads, *a, || {
                    let mut out = Vec::with_capacity(av.len());
                    for _ in 0..r {
                        out.extend(gd.iter().map(|x| x / r as f64));
                    }
                    Tensor::new(av.shape().to_vec(), out).unwrap()
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], var: Var, delta: impl FnOnce() -> Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let d = delta();
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(d),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Offset(..) => "offset",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Softplus(..) => "softplus",
        Op::LnClamped { .. } => "ln",
        Op::Square(..) => "square",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::Sum(..) => "sum",
        Op::MeanRows(..) => "mean_rows",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
