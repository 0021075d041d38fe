use crate::error::{shape_err, Result, TensorError};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Negative slope used by [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

const PROB_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, end: usize },
    Reshape(Var),
    RepeatCols { src: Var, times: usize },
    Sigmoid(Var),
    LeakyRelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Mean(Var),
    Sum(Var),
    Bce { probs: Var, targets: Vec<f64>, pos_weight: Option<Vec<f64>> },
    BceLogits { logits: Var, targets: Vec<f64>, pos_weight: Option<Vec<f64>> },
    CrossEntropy { log_probs: Var, targets: Vec<usize> },
    Clamp { src: Var, lo: f64, hi: f64 },
    StraightThrough(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Reshape(a) | Sigmoid(a) | LeakyRelu(a) | Softmax(a)
            | LogSoftmax(a) | Mean(a) | Sum(a) | StraightThrough(a) => vec![*a],
            Concat(vs) => vs.clone(),
            Slice { src, .. } | RepeatCols { src, .. } | Clamp { src, .. } => vec![*src],
            Bce { probs, .. } => vec![*probs],
            BceLogits { logits, .. } => vec![*logits],
            CrossEntropy { log_probs, .. } => vec![*log_probs],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each operation once.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    record: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (numel / cols, cols)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// `c[m,n] = a[m,k] * b[k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn matmul_nt_acc(out: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn matmul_tn_acc(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gj) in orow.iter_mut().zip(grow) {
                *o += aip * gj;
            }
        }
    }
}

impl Tape {
    /// A recording tape. Finite-value checks are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            record: true,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A tape that evaluates values only; nothing on it requires gradient.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it takes part in differentiation if the tensor
    /// requires gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("constant", format!("shape {shape:?} with {} values", data.len())));
        }
        self.push_leaf(shape, data, false)
    }

    /// Records a differentiable leaf from raw parts.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("variable", format!("shape {shape:?} with {} values", data.len())));
        }
        self.push_leaf(shape, data, true)
    }

    /// Copies a parameter onto the tape. Gradients flow back into `params`
    /// through [`Tape::backward_into`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let t = params.get(id);
        let v = self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)?;
        self.params.push((v, id));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push_leaf(shape, value, false)
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` row to every row of `a` (last axis `n`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if self.value(row).len() != cols {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", self.shape(a), self.shape(row))));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..rows {
            for (o, &b) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v + s).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar(a))
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != self.shape(first).len() || &s[..s.len().saturating_sub(1)] != lead {
                return Err(shape_err("concat", format!("{:?} vs {:?}", self.shape(first), s)));
            }
            total += rows_cols(s).1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = rows_cols(self.shape(p));
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(src));
        if start > end || end > cols {
            return Err(shape_err("slice", format!("{start}..{end} of {:?}", self.shape(src))));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let mut shape = self.shape(src).to_vec();
        *shape.last_mut().expect("slice of a scalar") = end - start;
        self.push("slice", shape, out, Op::Slice { src, start, end })
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(src).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(src))));
        }
        let out = self.value(src).to_vec();
        self.push("reshape", shape, out, Op::Reshape(src))
    }

    /// Repeats every entry of the last axis `times` times in place:
    /// `[a, b] -> [a, a, b, b]` for `times = 2`.
    pub fn repeat_cols(&mut self, src: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(TensorError::InvalidArgument("repeat_cols by zero".into()));
        }
        let out: Vec<f64> = self
            .value(src)
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(times))
            .collect();
        let mut shape = self.shape(src).to_vec();
        match shape.last_mut() {
            Some(l) => *l *= times,
            None => shape.push(times),
        }
        self.push("repeat_cols", shape, out, Op::RepeatCols { src, times })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_RELU_SLOPE * v })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("leaky_relu", shape, out, Op::LeakyRelu(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        let out = softmax_rows(self.value(a), rows, cols);
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax(a))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        let out = log_softmax_rows(self.value(a), rows, cols);
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::InvalidArgument("mean of an empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![m], Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum::<f64>();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    fn check_targets(&self, op: &'static str, v: Var, targets: &[f64], pos_weight: Option<&[f64]>) -> Result<()> {
        let n = self.value(v).len();
        if targets.len() != n {
            return Err(shape_err(op, format!("{} targets for {:?}", targets.len(), self.shape(v))));
        }
        if let Some(w) = pos_weight {
            let (_, cols) = rows_cols(self.shape(v));
            if w.len() != cols {
                return Err(shape_err(op, format!("{} weights for {cols} columns", w.len())));
            }
        }
        Ok(())
    }

    /// Mean binary cross-entropy of probabilities against targets in [0,1].
    /// `pos_weight` (one per column) scales the positive-class term.
    pub fn bce(&mut self, probs: Var, targets: &[f64], pos_weight: Option<&[f64]>) -> Result<Var> {
        self.check_targets("bce", probs, targets, pos_weight)?;
        let (_, cols) = rows_cols(self.shape(probs));
        let p = self.value(probs);
        let n = p.len() as f64;
        let mut total = 0.0;
        for (i, (&pi, &ci)) in p.iter().zip(targets).enumerate() {
            let w = pos_weight.map_or(1.0, |w| w[i % cols]);
            let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total += -(w * ci * pc.ln() + (1.0 - ci) * (1.0 - pc).ln());
        }
        let op = Op::Bce {
            probs,
            targets: targets.to_vec(),
            pos_weight: pos_weight.map(<[f64]>::to_vec),
        };
        self.push("bce", vec![], vec![total / n], op)
    }

    /// Mean binary cross-entropy computed from pre-sigmoid logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], pos_weight: Option<&[f64]>) -> Result<Var> {
        self.check_targets("bce_with_logits", logits, targets, pos_weight)?;
        let (_, cols) = rows_cols(self.shape(logits));
        let z = self.value(logits);
        let n = z.len() as f64;
        let mut total = 0.0;
        for (i, (&zi, &ci)) in z.iter().zip(targets).enumerate() {
            let w = pos_weight.map_or(1.0, |w| w[i % cols]);
            total += w * ci * softplus(-zi) + (1.0 - ci) * softplus(zi);
        }
        let op = Op::BceLogits {
            logits,
            targets: targets.to_vec(),
            pos_weight: pos_weight.map(<[f64]>::to_vec),
        };
        self.push("bce_with_logits", vec![], vec![total / n], op)
    }

    /// Mean over rows of `-log_probs[r, targets[r]]`.
    pub fn cross_entropy(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(log_probs));
        if targets.len() != rows || rows == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {:?}", targets.len(), self.shape(log_probs)),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err("cross_entropy", format!("target {t} out of {cols} classes")));
        }
        let lp = self.value(log_probs);
        let loss = -targets.iter().enumerate().map(|(r, &t)| lp[r * cols + t]).sum::<f64>() / rows as f64;
        let op = Op::CrossEntropy {
            log_probs,
            targets: targets.to_vec(),
        };
        self.push("cross_entropy", vec![], vec![loss], op)
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, src: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(src).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(src).to_vec();
        self.push("clamp", shape, out, Op::Clamp { src, lo, hi })
    }

    /// Row-wise hard one-hot of the argmax (lowest index on ties) whose
    /// gradient is the identity onto `src`.
    pub fn straight_through(&mut self, src: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(src));
        let v = self.value(src);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            out[r * cols + best] = 1.0;
        }
        let shape = self.shape(src).to_vec();
        self.push("straight_through", shape, out, Op::StraightThrough(src))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and writes the gradient of every parameter
    /// loaded with [`Tape::param`] into `params`. Parameters not reached by
    /// the loss get zero gradient.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        params.zero_grads();
        for &(v, id) in &self.params {
            if let Some(g) = grads.get(v) {
                let t = params.get_mut(id);
                let acc = t.grad.as_mut().expect("zeroed above");
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| matmul_nt_acc(ga, g, bv, m, k, n));
                acc(*b, &mut |gb| matmul_tn_acc(gb, av, g, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let cols = nodes[row.0].value.len();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
            Op::Concat(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut off = 0;
                for p in parts {
                    let (_, c) = rows_cols(&nodes[p.0].shape);
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + c];
                            gp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    off += c;
                }
            }
            Op::Slice { src, start, end } => {
                let (rows, cols) = rows_cols(&nodes[src.0].shape);
                let w = end - start;
                acc(*src, &mut |gs| {
                    for r in 0..rows {
                        gs[r * cols + start..r * cols + end]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::RepeatCols { src, times } => acc(*src, &mut |gs| {
                for (x, chunk) in gs.iter_mut().zip(g.chunks(*times)) {
                    *x += chunk.iter().sum::<f64>();
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, gi), s) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * s * (1.0 - s);
                }
            }),
            Op::LeakyRelu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += if *v > 0.0 { *gi } else { LEAKY_RELU_SLOPE * gi };
                    }
                })
            }
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let s = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += s[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let lp = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - lp[j].exp() * gsum;
                        }
                    }
                })
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Bce {
                probs,
                targets,
                pos_weight,
            } => {
                let p = &nodes[probs.0].value;
                let (_, cols) = rows_cols(&nodes[probs.0].shape);
                let n = p.len() as f64;
                acc(*probs, &mut |gp| {
                    for (i, x) in gp.iter_mut().enumerate() {
                        let w = pos_weight.as_ref().map_or(1.0, |w| w[i % cols]);
                        let pc = p[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
                        let c = targets[i];
                        *x += g[0] * (-w * c / pc + (1.0 - c) / (1.0 - pc)) / n;
                    }
                })
            }
            Op::BceLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let z = &nodes[logits.0].value;
                let (_, cols) = rows_cols(&nodes[logits.0].shape);
                let n = z.len() as f64;
                acc(*logits, &mut |gz| {
                    for (i, x) in gz.iter_mut().enumerate() {
                        let w = pos_weight.as_ref().map_or(1.0, |w| w[i % cols]);
                        let s = sigmoid(z[i]);
                        let c = targets[i];
                        *x += g[0] * (-w * c * (1.0 - s) + (1.0 - c) * s) / n;
                    }
                })
            }
            Op::CrossEntropy { log_probs, targets } => {
                let (rows, cols) = rows_cols(&nodes[log_probs.0].shape);
                acc(*log_probs, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * cols + t] -= g[0] / rows as f64;
                    }
                })
            }
            Op::Clamp { src, lo, hi } => {
                let sv = &nodes[src.0].value;
                acc(*src, &mut |gs| {
                    for ((x, gi), v) in gs.iter_mut().zip(g).zip(sv) {
                        if *v >= *lo && *v <= *hi {
                            *x += gi;
                        }
                    }
                })
            }
        }
    }
}
