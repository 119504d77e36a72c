//! Reverse-mode differentiation tape.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so inputs always
//! precede the ops that consume them. [`Tape::backward`] walks the list once in
//! reverse and accumulates vector-Jacobian products into a [`Gradients`] table.

use std::fmt;

use super::tensor::{argmax, matrix_dims, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-recorded op.
///
/// Receives the input values, the output value and the upstream gradient and
/// returns one gradient per input (same length as that input).
pub type BackwardRule = Box<dyn Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MaxRows(Var, Vec<usize>),
    SteOneHot(Var),
    ClampMax(Var, f64),
    Ln(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardRule,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::MaxRows(..) => "max_rows",
            Op::SteOneHot(_) => "ste_one_hot",
            Op::ClampMax(..) => "clamp_max",
            Op::Ln(_) => "ln",
            Op::Reshape(_) => "reshape",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations; single-threaded, one per generation task.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("ops", &self.nodes.len()).finish()
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

    /// Trainable input: receives gradient on backward.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Detached input: never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Constant, false))
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// True if a straight-through op lies anywhere on the path into `root`.
    pub fn depends_on_ste(&self, root: Var) -> bool {
        let mut reach = vec![false; root.0 + 1];
        reach[root.0] = true;
        for i in (0..=root.0).rev() {
            if !reach[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            if matches!(op, Op::SteOneHot(_)) {
                return true;
            }
            for input in op_inputs(op) {
                reach[input.0] = true;
            }
        }
        false
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(shape, value, op, requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// Records an op with caller-supplied forward and backward rules.
    pub fn record_op<F>(&mut self, kind: &'static str, inputs: &[Var], forward: F, backward: BackwardRule) -> Result<Var>
    where
        F: FnOnce(&[&Tensor]) -> Result<Tensor>,
    {
        let owned: Vec<Tensor> = inputs.iter().map(|&v| self.tensor(v)).collect();
        let refs: Vec<&Tensor> = owned.iter().collect();
        let out = forward(&refs).map_err(|e| match e {
            Error::Shape { lhs, rhs, .. } => Error::Shape { op: kind, lhs, rhs },
            other => other,
        })?;
        let shape = out.shape().to_vec();
        Ok(self.derived(
            shape,
            out.into_data(),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// One-hot rows times an embedding matrix; the gradient reaches the rows.
    pub fn embed(&mut self, one_hots: Var, table: Var) -> Result<Var> {
        self.matmul(one_hots, table)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        Ok(self.derived(vec![m, n], out, Op::MatMulT(a, b)))
    }

    /// Elementwise sum; a single-row `b` is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa == self.nodes[b.0].shape {
            let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
            return Ok(self.derived(sa, out, Op::Add(a, b)));
        }
        let (m, n) = self.dims(a);
        let (bm, bn) = self.dims(b);
        if bm == 1 && bn == n {
            let bv = &self.nodes[b.0].value;
            let out: Vec<f64> = self.nodes[a.0]
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % n])
                .collect();
            debug_assert_eq!(out.len(), m * n);
            return Ok(self.derived(sa, out, Op::AddRow(a, b)));
        }
        Err(self.mismatch("add", a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("mul", a, b));
        }
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.derived(shape, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.derived(shape, out, Op::Scale(a, s))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.derived(shape, out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.derived(shape, out, Op::LogSoftmax(a))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.nodes[gamma.0].value.len() != n {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.nodes[beta.0].value.len() != n {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.derived(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.derived(shape, out, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.derived(vec![1], vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.derived(vec![1], vec![s], Op::MeanAll(a))
    }

    /// Sum across columns: `m x n -> m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let out = (0..m).map(|r| v[r * n..(r + 1) * n].iter().sum()).collect();
        self.derived(vec![m, 1], out, Op::SumRows(a))
    }

    /// Sum down rows: `m x n -> 1 x n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += v[r * n + c];
            }
        }
        self.derived(vec![1, n], out, Op::SumCols(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::TokenOutOfRange { id: bad, size: n });
        }
        let mut probs = self.nodes[logits.0].value.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= m as f64;
        Ok(self.derived(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += pm;
        }
        Ok(self.derived(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for r in 0..m {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.derived(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![start, end],
            });
        }
        let out = self.nodes[a.0].value[start * n..end * n].to_vec();
        Ok(self.derived(vec![end - start, n], out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + end]);
        }
        Ok(self.derived(vec![m, w], out, Op::SliceCols(a, start)))
    }

    /// Row-wise maximum, `m x n -> m x 1`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let idx: Vec<usize> = (0..m).map(|r| argmax(&v[r * n..(r + 1) * n])).collect();
        let out = idx.iter().enumerate().map(|(r, &c)| v[r * n + c]).collect();
        self.derived(vec![m, 1], out, Op::MaxRows(a, idx))
    }

    /// Straight-through one-hot: the forward value is the row-wise argmax as a
    /// one-hot vector, the backward pass hands the upstream gradient to the
    /// logits unchanged. Equivalent to `one_hot(argmax(y)) + y - detach(y)`.
    pub fn ste_one_hot(&mut self, logits: Var) -> Result<Var> {
        let (m, n) = self.dims(logits);
        let v = &self.nodes[logits.0].value;
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("NaN logits passed to ste_one_hot".into()));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            out[r * n + argmax(&v[r * n..(r + 1) * n])] = 1.0;
        }
        let shape = self.nodes[logits.0].shape.clone();
        Ok(self.derived(shape, out, Op::SteOneHot(logits)))
    }

    /// `min(a, cap)`; the gradient passes where `a < cap`.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x.min(cap)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.derived(shape, out, Op::ClampMax(a, cap))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.derived(shape, out, Op::Ln(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.nodes[a.0].value.clone();
        Ok(self.derived(shape, out, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let lens = self.nodes[..=root.0].iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, lens })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let slot = slot(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &gg) in slot[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gg;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let slot = slot(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gg = g[i * n + j];
                            if gg == 0.0 {
                                continue;
                            }
                            for (d, &bb) in slot[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += gg * bb;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let slot = slot(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gg = g[i * n + j];
                            if gg == 0.0 {
                                continue;
                            }
                            for (d, &aa) in slot[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += gg * aa;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let n = self.dims(*b).1;
                    let slot = slot(grads, *b, n);
                    for (i, &gg) in g.iter().enumerate() {
                        slot[i % n] += gg;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().map(|x| x * s).collect());
                }
            }
            Op::Softmax(a) => {
                let (m, n) = self.dims(*a);
                let y = &node.value;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(gr, yr);
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let (m, n) = self.dims(*a);
                let y = &node.value;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for c in 0..n {
                        da[r * n + c] = gr[c] - y[r * n + c].exp() * s;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = val(*gamma);
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            dx[r * n + c] = rstd[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let da = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gg)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gg * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a);
                let da = (0..m * n).map(|i| g[i / n]).collect();
                accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let (m, n) = self.dims(*a);
                let da = (0..m * n).map(|i| g[i % n]).collect();
                accumulate(grads, *a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                let scale = g[0] / m as f64;
                let mut da: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    da[r * n + t] -= scale;
                }
                accumulate(grads, *logits, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = matrix_dims(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.dims(*a).1;
                let len = val(*a).len();
                let slot = slot(grads, *a, len);
                for (d, &gg) in slot[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *d += gg;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let w = matrix_dims(&node.shape).1;
                let slot = slot(grads, *a, m * n);
                for r in 0..m {
                    for c in 0..w {
                        slot[r * n + start + c] += g[r * w + c];
                    }
                }
            }
            Op::MaxRows(a, idx) => {
                let (m, n) = self.dims(*a);
                let slot = slot(grads, *a, m * n);
                for (r, &c) in idx.iter().enumerate() {
                    slot[r * n + c] += g[r];
                }
            }
            Op::SteOneHot(a) => accumulate(grads, *a, g.to_vec()),
            Op::ClampMax(a, cap) => {
                let da = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gg)| if x < *cap { gg } else { 0.0 })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let da = val(*a).iter().zip(g).map(|(&x, &gg)| gg / x).collect();
                accumulate(grads, *a, da);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Custom { inputs, backward } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|&v| val(v)).collect();
                let outs = backward(&ins, &node.value, g);
                for (&v, d) in inputs.iter().zip(outs) {
                    if self.wants(v) {
                        accumulate(grads, v, d);
                    }
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Gelu(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::MaxRows(a, _)
        | Op::SteOneHot(a)
        | Op::ClampMax(a, _)
        | Op::Ln(a)
        | Op::Reshape(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        Op::Custom { inputs, .. } => inputs.clone(),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        empty => *empty = Some(delta),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no path from the root reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var, len_hint: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens.get(v.0).copied().unwrap_or(len_hint)],
        }
    }

    /// Writes the gradient of `v` into `t.grad` (zeros when unreachable).
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.wrt(v, t.len());
        t.set_grad(g)
    }
}
