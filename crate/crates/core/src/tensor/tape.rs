//! Recording tape with reverse-mode gradient accumulation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state for its backward rule. Nodes are only ever appended, so inputs
//! always precede the nodes that consume them and a reverse sweep over the
//! node list is a valid topological order.

use super::edge::{EdgeInput, EdgeMaxCache};
use super::gemm::{gemm, View};
use super::params::BnStats;
use super::Tensor;
use crate::error::{Error, Result};

/// Batchnorm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    LeakyRelu(f64),
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Hadamard,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sigmoid(Var),
    /// The branch mask is kept only when the pattern was replayed.
    LeakyRelu(Var, f64, Option<Vec<u32>>),
    Affine(Var, f64),
    Reduce {
        x: Var,
        kind: ReduceKind,
        len: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    EdgeDiff {
        x: Var,
        nbr: Vec<usize>,
        k: usize,
    },
    EdgeMax {
        y: Var,
        gamma: Var,
        beta: Var,
        nbr: Vec<usize>,
        k: usize,
        slope: f64,
        train: bool,
        cache: EdgeMaxCache,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Branch choices of the piecewise-linear operations (leaky activations,
/// maxima) of one forward pass, in the order they ran.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationPattern(Vec<Vec<u32>>);

impl ActivationPattern {
    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Default)]
enum PatternMode {
    #[default]
    Off,
    Record(Vec<Vec<u32>>),
    Replay {
        choices: Vec<Vec<u32>>,
        next: usize,
        broken: bool,
    },
}

/// An append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    pattern: PatternMode,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    /// Gradient of a leaf after [`Tape::backward`]; intermediate nodes do
    /// not retain theirs.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) . op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(dim_err("matmul", av, bv));
        }
        let va = View::maybe_t(av.data(), av.rows(), av.cols(), ta);
        let vb = View::maybe_t(bv.data(), bv.rows(), bv.cols(), tb);
        if va.cols != vb.rows {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![0.0; m * n];
        gemm(va, vb, 0.0, &mut out, n as isize, 1);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.shape() == bv.shape() {
            false
        } else if av.rank() == 2
            && ((bv.rank() == 1 && bv.len() == av.cols()) || (bv.rank() == 2 && bv.shape() == [1, av.cols()]))
        {
            true
        } else {
            return Err(dim_err("elementwise", av, bv));
        };
        let c = av.cols();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Hadamard => |x: f64, y: f64| x * y,
        };
        let data: Vec<f64> = if broadcast {
            av.data()
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Starts recording the branch taken by every piecewise-linear op.
    pub fn record_pattern(&mut self) {
        self.pattern = PatternMode::Record(Vec::new());
    }

    /// Makes later piecewise-linear ops follow `pattern` instead of
    /// comparing values, so the forward pass evaluates the same linear
    /// piece. Shape mismatches fall back to comparing and are reported by
    /// [`Tape::pattern_intact`].
    pub fn replay_pattern(&mut self, pattern: ActivationPattern) {
        self.pattern = PatternMode::Replay {
            choices: pattern.0,
            next: 0,
            broken: false,
        };
    }

    /// The recorded pattern, if recording.
    pub fn take_pattern(&mut self) -> Option<ActivationPattern> {
        match std::mem::take(&mut self.pattern) {
            PatternMode::Record(v) => Some(ActivationPattern(v)),
            other => {
                self.pattern = other;
                None
            }
        }
    }

    /// False when a replayed pattern did not fit the ops that consumed it.
    pub fn pattern_intact(&self) -> bool {
        match &self.pattern {
            PatternMode::Replay { choices, next, broken } => !broken && *next == choices.len(),
            _ => true,
        }
    }

    fn pattern_active(&self) -> bool {
        !matches!(self.pattern, PatternMode::Off)
    }

    /// Records `computed`, or swaps in the next replayed choice.
    fn choose(&mut self, computed: Vec<u32>) -> (Vec<u32>, bool) {
        match &mut self.pattern {
            PatternMode::Off => (computed, false),
            PatternMode::Record(v) => {
                v.push(computed.clone());
                (computed, false)
            }
            PatternMode::Replay { choices, next, broken } => match choices.get(*next) {
                Some(c) if c.len() == computed.len() => {
                    *next += 1;
                    (c.clone(), true)
                }
                _ => {
                    *broken = true;
                    (computed, false)
                }
            },
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Hadamard, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        match kind {
            Unary::Sigmoid => self.sigmoid(x),
            Unary::LeakyRelu(alpha) => self.leaky_relu(x, alpha),
            Unary::Scale(s) => self.affine(x, s, 0.0),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&z| sigmoid(z)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Sigmoid(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let mut mask = None;
        if self.pattern_active() {
            let computed = self.value(x).data().iter().map(|&z| u32::from(z > 0.0)).collect();
            let (m, replayed) = self.choose(computed);
            if replayed {
                mask = Some(m);
            }
        }
        let xv = self.value(x);
        let data = match &mask {
            Some(m) => xv.data().iter().zip(m).map(|(&z, &p)| if p == 1 { z } else { alpha * z }).collect(),
            None => xv.data().iter().map(|&z| if z > 0.0 { z } else { alpha * z }).collect(),
        };
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::LeakyRelu(x, alpha, mask), rg)
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&z| mul * z + add).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Affine(x, mul), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Reduces along `axis`, removing it from the shape (rank-1 inputs
    /// reduce to shape `[1]`). Max routes its gradient to the first maximal
    /// element; sums are accumulated in sorted order so the result does not
    /// depend on the order of the reduced elements.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::Domain(format!("axis {axis} out of range for rank {}", shape.len())));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    let base = o * len * inner;
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    let am = &mut argmax[o * inner..(o + 1) * inner];
                    dst.copy_from_slice(&src[base..base + inner]);
                    for j in 1..len {
                        let row = &src[base + j * inner..base + (j + 1) * inner];
                        for ((d, a), &v) in dst.iter_mut().zip(am.iter_mut()).zip(row) {
                            if v > *d {
                                *d = v;
                                *a = j as u32;
                            }
                        }
                    }
                }
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                let scale = if kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                let mut buf = Vec::with_capacity(len);
                for o in 0..outer {
                    for i in 0..inner {
                        buf.clear();
                        buf.extend((0..len).map(|j| src[(o * len + j) * inner + i]));
                        buf.sort_unstable_by(f64::total_cmp);
                        out[o * inner + i] = buf.iter().sum::<f64>() * scale;
                    }
                }
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        if kind == ReduceKind::Max && self.pattern_active() {
            let (am, replayed) = self.choose(argmax);
            argmax = am;
            if replayed {
                let src = self.value(x).data();
                for o in 0..outer {
                    for i in 0..inner {
                        let t = o * inner + i;
                        out[t] = src[(o * len + argmax[t] as usize) * inner + i];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Reduce {
                x,
                kind,
                len,
                inner,
                argmax,
            },
            rg,
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.reduce(ReduceKind::Sum, flat, 0)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in log-softmax input".into()));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::LogSoftmaxRows(x), rg))
    }

    /// Copies rows of `x` (first extent) in the order given by `idx`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, extent: n });
        }
        if idx.is_empty() {
            return Err(Error::Domain("gather with no indices".into()));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, idx }, rg))
    }

    /// Edge differences over a neighbor table: row `i * k + j` of the output
    /// is `x[i] - x[nbr[i * k + j]]`. `nbr` holds `k` entries per row of `x`.
    pub fn edge_diff(&mut self, x: Var, nbr: Vec<usize>, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if k == 0 || nbr.len() != n * k {
            return Err(Error::Dimension {
                op: "edge_diff",
                lhs: xv.shape().to_vec(),
                rhs: vec![nbr.len(), k],
            });
        }
        if let Some(&bad) = nbr.iter().find(|&&j| j >= n) {
            return Err(Error::Index { index: bad, extent: n });
        }
        let mut data = Vec::with_capacity(n * k * c);
        for (i, row) in nbr.chunks_exact(k).enumerate() {
            let center = xv.row(i);
            for &j in row {
                data.extend(center.iter().zip(xv.row(j)).map(|(a, b)| a - b));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![n * k, c], data }, Op::EdgeDiff { x, nbr, k }, rg))
    }

    /// `out[i] = max_j leaky(batchnorm(y[i] - y[nbr[i * k + j]]))` with the
    /// batchnorm taken over all `N k` edges. Same values as chaining
    /// [`Tape::edge_diff`], [`Tape::batchnorm`], [`Tape::leaky_relu`] and a
    /// max over `j`, in `O(N C)` memory.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_max_bn(
        &mut self,
        y: Var,
        nbr: Vec<usize>,
        k: usize,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: Mode,
        momentum: f64,
        slope: f64,
    ) -> Result<Var> {
        let yv = self.value(y);
        let (n, c) = (yv.rows(), yv.cols());
        if k == 0 || nbr.len() != n * k {
            return Err(Error::Dimension {
                op: "edge_max_bn",
                lhs: yv.shape().to_vec(),
                rhs: vec![nbr.len(), k],
            });
        }
        if let Some(&bad) = nbr.iter().find(|&&j| j >= n) {
            return Err(Error::Index { index: bad, extent: n });
        }
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(dim_err("edge_max_bn", yv, self.value(p)));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension {
                op: "edge_max_bn",
                lhs: yv.shape().to_vec(),
                rhs: vec![stats.mean.len()],
            });
        }
        let train = mode == Mode::Train;
        if train && n * k < 2 {
            return Err(Error::Domain(format!("batchnorm in train mode needs at least 2 rows, got {}", n * k)));
        }
        let input = EdgeInput {
            y: yv.data(),
            c,
            nbr: &nbr,
            k,
            slope,
        };
        let fixed = match &self.pattern {
            PatternMode::Replay { choices, next, .. } => match (choices.get(*next), choices.get(*next + 1)) {
                (Some(a), Some(b)) if a.len() == n * c && b.len() == n * c => Some((a.clone(), b.clone())),
                _ => None,
            },
            _ => None,
        };
        let fixed_refs = fixed.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
        let (out, cache) = input.forward(self.value(gamma).data(), self.value(beta).data(), stats, train, momentum, fixed_refs);
        match &mut self.pattern {
            PatternMode::Off => {}
            PatternMode::Record(v) => {
                v.push(cache.sel.clone());
                v.push(cache.pos.clone());
            }
            PatternMode::Replay { next, broken, .. } => {
                if fixed.is_some() {
                    *next += 2;
                } else {
                    *broken = true;
                }
            }
        }
        let rg = self.rg(&[y, gamma, beta]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data: out,
            },
            Op::EdgeMax {
                y,
                gamma,
                beta,
                nbr,
                k,
                slope,
                train,
                cache,
            },
            rg,
        ))
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != xv.rows() {
            return Err(dim_err("scale_rows", xv, sv));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .chunks_exact(c)
            .zip(sv.data())
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor { shape, data }, Op::ScaleRows { x, s }, rg))
    }

    /// Batch normalization over the rows of an `R x C` input.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `stats` as `(1 - momentum) * running + momentum
    /// * batch` (unbiased variance). Eval mode uses `stats` as is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: Mode,
        momentum: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(dim_err("batchnorm", xv, self.value(p)));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension {
                op: "batchnorm",
                lhs: xv.shape().to_vec(),
                rhs: vec![stats.mean.len()],
            });
        }
        let train = mode == Mode::Train;
        let (mean, inv_std) = if train {
            if r < 2 {
                return Err(Error::Domain(format!("batchnorm in train mode needs at least 2 rows, got {r}")));
            }
            let mut mean = vec![0.0; c];
            for row in xv.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= r as f64);
            let mut var = vec![0.0; c];
            for row in xv.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= r as f64);
            let unbias = r as f64 / (r as f64 - 1.0);
            for j in 0..c {
                stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
                stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j] * unbias;
            }
            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>();
            (mean, inv)
        } else {
            let inv = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>();
            (stats.mean.clone(), inv)
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.data().chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Concatenates rank-2 inputs with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Domain("empty concat".into()))?);
        let r = first.rows();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != r {
                return Err(dim_err("concat_cols", first, v));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks inputs with equal trailing extents along the first extent.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Domain("empty concat".into()))?);
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(dim_err("concat_rows", first, v));
            }
            rows += v.rows();
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Runs the reverse sweep from a scalar `loss`, replacing any gradients
    /// from a previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, &mut self.grads, i, &g);
            }
            // only leaf gradients are observable; dropping the rest bounds memory
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let opa = View::maybe_t(av.data(), av.rows(), av.cols(), *ta);
            let opb = View::maybe_t(bv.data(), bv.rows(), bv.cols(), *tb);
            let (m, k, n) = (opa.rows, opa.cols, opb.cols);
            let dc = View::row_major(g, m, n);
            if let Some(ga) = slot(nodes, grads, *a) {
                let (rs, cs) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                gemm(dc, opb.t(), 1.0, ga, rs, cs);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let (rs, cs) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                gemm(opa.t(), dc, 1.0, gb, rs, cs);
            }
        }
        Op::Binary {
            kind,
            a,
            b,
            broadcast,
        } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let c = val(*a).cols();
            let bidx = |j: usize| if *broadcast { j % c } else { j };
            if let Some(ga) = slot(nodes, grads, *a) {
                match kind {
                    Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(d, s)| *d += s),
                    Binary::Hadamard => {
                        for (j, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                            *d += s * bv[bidx(j)];
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let sign = if *kind == Binary::Sub { -1.0 } else { 1.0 };
                for (j, s) in g.iter().enumerate() {
                    let contrib = match kind {
                        Binary::Hadamard => s * av[j],
                        _ => sign * s,
                    };
                    gb[bidx(j)] += contrib;
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * y * (1.0 - y);
                }
            }
        }
        Op::LeakyRelu(x, alpha, mask) => {
            let xv = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                match mask {
                    Some(m) => {
                        for ((d, s), p) in gx.iter_mut().zip(g).zip(m) {
                            *d += if *p == 1 { *s } else { alpha * s };
                        }
                    }
                    None => {
                        for ((d, s), z) in gx.iter_mut().zip(g).zip(xv) {
                            *d += if *z > 0.0 { *s } else { alpha * s };
                        }
                    }
                }
            }
        }
        Op::Affine(x, mul) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += mul * s);
            }
        }
        Op::Reduce {
            x,
            kind,
            len,
            inner,
            argmax,
        } => {
            let (len, inner) = (*len, *inner);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (o, gchunk) in g.chunks_exact(inner).enumerate() {
                    match kind {
                        ReduceKind::Max => {
                            for (i, s) in gchunk.iter().enumerate() {
                                let j = argmax[o * inner + i] as usize;
                                gx[(o * len + j) * inner + i] += s;
                            }
                        }
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let scale = if *kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                            for j in 0..len {
                                let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                                dst.iter_mut().zip(gchunk).for_each(|(d, s)| *d += s * scale);
                            }
                        }
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let c = y.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dst, yr), gr) in gx.chunks_exact_mut(c).zip(y.data().chunks_exact(c)).zip(g.chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(x) => {
            let y = &node.value;
            let c = y.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dst, yr), gr) in gx.chunks_exact_mut(c).zip(y.data().chunks_exact(c)).zip(g.chunks_exact(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, yv), gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += gv - yv.exp() * total;
                    }
                }
            }
        }
        Op::Gather { x, idx } => {
            let c = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&r, gr) in idx.iter().zip(g.chunks_exact(c)) {
                    gx[r * c..(r + 1) * c].iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::EdgeDiff { x, nbr, k } => {
            let c = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (e, (&j, gr)) in nbr.iter().zip(g.chunks_exact(c)).enumerate() {
                    let i = e / k;
                    gx[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    gx[j * c..(j + 1) * c].iter_mut().zip(gr).for_each(|(d, s)| *d -= s);
                }
            }
        }
        Op::EdgeMax {
            y,
            gamma,
            beta,
            nbr,
            k,
            slope,
            train,
            cache,
        } => {
            let yv = val(*y);
            let input = EdgeInput {
                y: yv.data(),
                c: yv.cols(),
                nbr,
                k: *k,
                slope: *slope,
            };
            let mut take = |v: Var| slot(nodes, grads, v).map(std::mem::take);
            let (mut gy, mut gg, mut gb) = (take(*y), take(*gamma), take(*beta));
            input.backward(
                cache,
                val(*gamma).data(),
                *train,
                g,
                gy.as_mut(),
                gg.as_mut(),
                gb.as_mut(),
            );
            for (v, gv) in [(*y, gy), (*gamma, gg), (*beta, gb)] {
                if gv.is_some() {
                    grads[v.0] = gv;
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let (xv, sv) = (val(*x), val(*s).data());
            let c = xv.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dst, gr), k) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(sv) {
                    dst.iter_mut().zip(gr).for_each(|(d, v)| *d += v * k);
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for ((d, xr), gr) in gs.iter_mut().zip(xv.data().chunks_exact(c)).zip(g.chunks_exact(c)) {
                    *d += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let c = inv_std.len();
            let r = g.len() / c;
            let gam = val(*gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for j in 0..c {
                    sum_g[j] += gr[j];
                    sum_gx[j] += gr[j] * hr[j];
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let rf = r as f64;
                for ((dst, gr), hr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        let k = gam[j] * inv_std[j];
                        dst[j] += if *train {
                            k * (gr[j] - sum_g[j] / rf - hr[j] * sum_gx[j] / rf)
                        } else {
                            k * gr[j]
                        };
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(gp) = slot(nodes, grads, p) {
                    for (dst, gr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                        dst.iter_mut().zip(&gr[off..off + w]).for_each(|(d, s)| *d += s);
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(&g[off..off + n]).for_each(|(d, s)| *d += s);
                }
                off += n;
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }
}
