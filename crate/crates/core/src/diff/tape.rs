use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{gelu_derivative, gelu_scalar, sigmoid, softplus, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<usize>,
        table_rows: usize,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Mask(Var, Vec<f64>),
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanRows(Var),
    SumCols(Var),
    Sum(Var),
    RowNorms(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Parameter gradients collected by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(|g| g.iter().all(|x| x.is_finite()))
    }

    fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        self.by_param.entry(id).or_insert_with(|| vec![0.0; len])
    }
}

/// Reverse-mode recording of a single forward pass.
///
/// Records are appended in evaluation order, so every record's inputs
/// precede it. `backward` may run once; call [`Tape::reset`] before the
/// next step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    /// Embedding-table lookup: copies the selected rows of a parameter.
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let p = store.get(id);
        let cols = p.value.cols();
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= p.value.rows() {
                return Err(Error::Contract(alloc::format!(
                    "row {r} out of range for {} ({} rows)",
                    p.name,
                    p.value.rows()
                )));
            }
            data.extend_from_slice(p.value.row(r));
        }
        let t = Tensor::new(rows.len(), cols, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
                table_rows: p.value.rows(),
            },
            !p.frozen,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_bt inner", k, k2));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_bt_into(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("elementwise", ta.len(), tb.len()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(row) != [1, n] {
            return Err(Error::dim("add_row", n, self.value(row).len()));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            out.row_mut(i).iter_mut().zip(&r).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(t.rows(), t.cols(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// Multiplies row `i` of `a` by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: &[f64]) -> Result<Var> {
        let [m, _] = self.shape(a);
        if coeffs.len() != m {
            return Err(Error::dim("scale_rows", m, coeffs.len()));
        }
        let mut out = self.value(a).clone();
        for (i, c) in coeffs.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= c);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ScaleRows(a, coeffs.to_vec()), rg))
    }

    /// Elementwise multiplication by a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim("mask", self.value(a).len(), mask.len()));
        }
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.rows(), t.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, libm::exp, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias` (both `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(gain) != [1, n] || self.shape(bias) != [1, n] {
            return Err(Error::dim("layer_norm gain/bias", n, self.value(gain).len()));
        }
        let tx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd[i] = r;
            let orow = out.row_mut(i);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                orow[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut acc = vec![0.0; t.cols()];
        for row in t.iter_rows() {
            acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        let m = t.rows() as f64;
        acc.iter_mut().for_each(|s| *s /= m);
        let rg = self.rg(&[a]);
        self.push(Tensor::row_vector(acc), Op::MeanRows(a), rg)
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = t.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, data).expect("rows positive");
        let rg = self.rg(&[a]);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of each row: `m × n → m × 1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = t.iter_rows().map(super::l2_norm).collect();
        let out = Tensor::new(t.rows(), 1, data).expect("rows positive");
        let rg = self.rg(&[a]);
        self.push(out, Op::RowNorms(a), rg)
    }

    /// Scales each row to unit L2 norm; all-zero rows pass through unchanged.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = super::l2_norm(row);
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows { x: a, norms }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let m = self.shape(*first)[0];
        let mut total = 0;
        for p in parts {
            let [r, c] = self.shape(*p);
            if r != m {
                return Err(Error::dim("concat_cols rows", m, r));
            }
            total += c;
        }
        let mut out = Tensor::zeros(m, total);
        for i in 0..m {
            let mut off = 0;
            for p in parts {
                let row = self.value(*p).row(i);
                out.row_mut(i)[off..off + row.len()].copy_from_slice(row);
                off += row.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let n = self.shape(*first)[1];
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != n {
                return Err(Error::dim("concat_rows cols", n, t.cols()));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(data.len() / n, n, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of a recorded value (indices may repeat).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Contract(alloc::format!(
                    "row {i} out of range ({} rows)",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(idx.len(), t.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), rg))
    }

    /// Row-wise log-softmax, stabilized by max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for row in t.iter_rows() {
            data.extend(super::log_softmax(row));
        }
        let out = Tensor::new(t.rows(), t.cols(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for `j > i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let limit = if causal { (i + 1).min(n) } else { n };
            let row = &t.row(i)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(i);
            let mut total = 0.0;
            for j in 0..limit {
                let e = libm::exp(row[j] - max);
                orow[j] = e;
                total += e;
            }
            orow[..limit].iter_mut().for_each(|x| *x /= total);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// `-log σ(x)` elementwise, i.e. `softplus(-x)`.
    pub fn neg_log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.softplus(n)
    }

    /// Propagates from the scalar `loss` to every reachable input.
    ///
    /// Fails on a non-scalar loss and when called twice without [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape; reset first".into()));
        }
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract("backward requires a scalar loss".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, &mut out);
            let shape = self.nodes[i].value.shape();
            self.nodes[i].grad = Some(Tensor::new(shape[0], shape[1], g)?);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let [m, n] = node.value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = out.slot(*id, g.len());
                slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            Op::Gather {
                param,
                rows,
                table_rows,
            } => {
                let slot = out.slot(*param, table_rows * n);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut slot[r * n..(r + 1) * n];
                    dst.iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(s, x)| *s += x);
                }
            }
            Op::MatMul(a, b) => {
                let [_, k] = self.shape(*a);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |s| matmul_bt_into(g, bv, s, m, n, k));
                acc(*b, &mut |s| matmul_at_into(av, g, s, k, m, n));
            }
            Op::MatMulBt(a, b) => {
                let [_, k] = self.shape(*a);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |s| matmul_into(g, bv, s, m, n, k));
                acc(*b, &mut |s| matmul_at_into(g, av, s, n, m, k));
            }
            Op::Transpose(a) => acc(*a, &mut |s| {
                // node is m×n, input is n×m
                for r in 0..m {
                    for c in 0..n {
                        s[c * m + r] += g[r * n + c];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, x)| *s -= x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for r in 0..m {
                        add_into(s, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, x)| *s += c * x)),
            Op::ScaleRows(a, coeffs) => acc(*a, &mut |s| {
                for r in 0..m {
                    for j in 0..n {
                        s[r * n + j] += coeffs[r] * g[r * n + j];
                    }
                }
            }),
            Op::Mask(a, mask) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += mask[j] * g[j];
                }
            }),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * gelu_derivative(av[j]);
                    }
                })
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j];
                    }
                })
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * sigmoid(av[j]);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                acc(*gain, &mut |s| {
                    for r in 0..m {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for r in 0..m {
                        add_into(s, &g[r * n..(r + 1) * n]);
                    }
                });
                acc(*x, &mut |s| {
                    let nf = n as f64;
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            s[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.shape(*a)[0];
                let inv = 1.0 / rows as f64;
                acc(*a, &mut |s| {
                    for r in 0..rows {
                        for j in 0..n {
                            s[r * n + j] += g[j] * inv;
                        }
                    }
                })
            }
            Op::SumCols(a) => {
                let cols = self.shape(*a)[1];
                acc(*a, &mut |s| {
                    for r in 0..m {
                        s[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x += g[r]);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::RowNorms(a) => {
                let t = self.value(*a);
                let cols = t.cols();
                let norms = node.value.data();
                acc(*a, &mut |s| {
                    for r in 0..m {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let scale = g[r] / norms[r];
                        for (j, v) in t.row(r).iter().enumerate() {
                            s[r * cols + j] += scale * v;
                        }
                    }
                })
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                acc(*x, &mut |s| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        if norms[r] == 0.0 {
                            add_into(&mut s[r * n..(r + 1) * n], gr);
                            continue;
                        }
                        let yr = y.row(r);
                        let proj = super::dot(yr, gr);
                        for j in 0..n {
                            s[r * n + j] += (gr[j] - yr[j] * proj) / norms[r];
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    acc(*p, &mut |s| {
                        for r in 0..m {
                            add_into(&mut s[r * c..(r + 1) * c], &g[r * n + off..r * n + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SelectRows(a, idx) => acc(*a, &mut |s| {
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut s[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }),
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for (j, ly) in y.row(r).iter().enumerate() {
                            s[r * n + j] += gr[j] - libm::exp(*ly) * total;
                        }
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = y.row(r);
                        let inner = super::dot(yr, gr);
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
