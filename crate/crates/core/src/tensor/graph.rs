use std::fmt;

use super::kernels::{gemm_acc, matmul, sigmoid, softplus};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module (the reconstruction losses).
///
/// The forward value is computed by the caller; the op only has to map the
/// output gradient back onto its inputs.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// One entry per input, `None` where the input receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

/// How a batch-norm node normalises its input.
#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalise by the statistics of the batch itself. `slot` identifies the
    /// layer whose running statistics should absorb them.
    Train { slot: usize },
    /// Normalise by stored running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Batch statistics recorded by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub slot: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    SoftplusEps(Var),
    MaxPool {
        x: Var,
        groups: usize,
        rows: usize,
        cols: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: Option<BatchStats>,
    },
    TransposedConv {
        x: Var,
        w: Var,
        bias: Var,
        batch: usize,
        height: usize,
        width: usize,
        cin: usize,
        cout: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::SoftplusEps(x) => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::LeakyRelu { x, .. } | Op::MaxPool { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::TransposedConv { x, w, bias, .. } => vec![*x, *w, *bias],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias { .. } => "add_bias",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::SoftplusEps(..) => "softplus_eps",
            Op::MaxPool { .. } => "max_pool_points",
            Op::BatchNorm { .. } => "batch_norm",
            Op::TransposedConv { .. } => "transposed_conv2d",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Accumulated gradient; kept for leaves only.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A differentiation tape. Nodes are appended in evaluation order, so the
/// node list is always a topological order of the computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(
                self.nodes
                    .iter()
                    .map(|n| (n.op.name(), n.value.shape().to_vec())),
            )
            .finish()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {op}")))
    }
}

fn acc(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
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

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Statistics of every training-mode batch-norm node, in evaluation order.
    pub fn batch_stats(&self) -> Vec<BatchStats> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNorm { stats: Some(s), .. } => Some(s.clone()),
                _ => None,
            })
            .collect()
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let c = matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// Adds a `C`-vector to every row of an `R×C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "add_bias: {} bias values for {c} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::exp);
        check_finite(&out, "exp")?;
        Ok(self.push(out, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain(format!("log of non-positive value {v}")));
        }
        let out = self.map(x, f64::ln);
        Ok(self.push(out, Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenates tensors of equal rank along `axis`; all other dimensions
    /// must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope })
    }

    /// `ln(1 + eˣ) + eps`, strictly greater than `eps`.
    pub fn softplus_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::domain(format!("softplus eps {eps} is negative")));
        }
        let floor = eps.next_up();
        // softplus underflows below eps's ulp for very negative inputs
        let out = self.map(x, |v| (softplus(v) + eps).max(floor));
        check_finite(&out, "softplus_eps")?;
        Ok(self.push(out, Op::SoftplusEps(x)))
    }

    /// Column-wise maximum over the point axis: `[N, C] -> [C]` or
    /// `[B, N, C] -> [B, C]`. Ties resolve to the lowest point index.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let (groups, rows, cols) = match *self.shape(x) {
            [n, c] => (1, n, c),
            [b, n, c] => (b, n, c),
            ref s => {
                return Err(Error::dim(format!(
                    "max_pool_points expects [N,C] or [B,N,C], got {s:?}"
                )))
            }
        };
        let data = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; groups * cols];
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            let block = &data[g * rows * cols..(g + 1) * rows * cols];
            let best = &mut out[g * cols..(g + 1) * cols];
            let arg = &mut argmax[g * cols..(g + 1) * cols];
            for (r, row) in block.chunks_exact(cols).enumerate() {
                for c in 0..cols {
                    if row[c] > best[c] || r == 0 {
                        best[c] = row[c];
                        arg[c] = r;
                    }
                }
            }
        }
        let shape = if self.shape(x).len() == 2 {
            vec![cols]
        } else {
            vec![groups, cols]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::MaxPool {
                x,
                groups,
                rows,
                cols,
                argmax,
            },
        ))
    }

    /// Per-column normalisation of an `R×C` matrix followed by the affine map
    /// `gamma·x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim(format!(
                "batch_norm: affine parameters must have {cols} entries"
            )));
        }
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train { slot } => {
                if rows < 2 {
                    return Err(Error::config(
                        "batch_norm in train mode needs at least two rows",
                    ));
                }
                let mut mean = vec![0.0; cols];
                for row in xs.chunks_exact(cols) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for row in xs.chunks_exact(cols) {
                    for c in 0..cols {
                        let d = row[c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BatchStats {
                    slot,
                    mean: mean.clone(),
                    var: var.clone(),
                    count: rows,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::dim("batch_norm: running statistics width mismatch"));
                }
                (mean, var, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xs.chunks_exact(cols) {
            for c in 0..cols {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        check_finite(&out, "batch_norm")?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
        ))
    }

    /// Stride-2 transposed convolution with a 2×2 kernel and no padding.
    ///
    /// `x` is `[H, W, Cin]` or `[B, H, W, Cin]` (channels last), `w` is
    /// `[2, 2, Cin, Cout]`, `bias` is `[Cout]`. Every input cell scatters into
    /// its own 2×2 output block, so the output is exactly `[.., 2H, 2W, Cout]`.
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (batch, height, width, cin) = match *self.shape(x) {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            ref s => {
                return Err(Error::dim(format!(
                    "transposed_conv2d expects [H,W,C] or [B,H,W,C], got {s:?}"
                )))
            }
        };
        let cout = match *self.shape(w) {
            [2, 2, ci, co] if ci == cin => co,
            ref s => {
                return Err(Error::dim(format!(
                    "transposed_conv2d: kernel {s:?} does not match {cin} input channels"
                )))
            }
        };
        if self.value(bias).len() != cout {
            return Err(Error::dim("transposed_conv2d: bias width mismatch"));
        }
        let cells = batch * height * width;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(bias).data();
        let (oh, ow) = (2 * height, 2 * width);
        let mut out = vec![0.0; batch * oh * ow * cout];
        let mut tap = vec![0.0; cells * cout];
        for ki in 0..2 {
            for kj in 0..2 {
                let wk = &ws[(ki * 2 + kj) * cin * cout..(ki * 2 + kj + 1) * cin * cout];
                tap.iter_mut().for_each(|v| *v = 0.0);
                gemm_acc(cells, cin, cout, xs, false, wk, false, &mut tap);
                for cell in 0..cells {
                    let (b, h, wi) = (
                        cell / (height * width),
                        (cell / width) % height,
                        cell % width,
                    );
                    let o = ((b * oh + 2 * h + ki) * ow + 2 * wi + kj) * cout;
                    let dst = &mut out[o..o + cout];
                    let src = &tap[cell * cout..(cell + 1) * cout];
                    for c in 0..cout {
                        dst[c] = src[c] + bs[c];
                    }
                }
            }
        }
        let shape = if self.shape(x).len() == 3 {
            vec![oh, ow, cout]
        } else {
            vec![batch, oh, ow, cout]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::TransposedConv {
                x,
                w,
                bias,
                batch,
                height,
                width,
                cin,
                cout,
            },
        ))
    }

    /// Records an externally computed node. `output` must already hold the
    /// forward value of `op` applied to `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        check_finite(&output, op.name())?;
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient. Leaf gradients accumulate across calls until `zero_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                acc(&mut self.nodes[id].grad, &g);
                continue;
            }
            for (input, gi) in self.backward_node(id, &g) {
                if self.nodes[input.0].requires_grad {
                    acc(&mut grads[input.0], &gi);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, m, k, n } => {
                let mut out = vec![];
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, g, false, val(b), true, &mut ga);
                    out.push((a, ga));
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, val(a), true, g, false, &mut gb);
                    out.push((b, gb));
                }
                out
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            &Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                vec![(a, ga), (b, gb)]
            }
            &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::AddScalar(x) | &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::AddBias { x, bias } => {
                let c = self.nodes[bias.0].value.len();
                let mut gb = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(b, r)| *b += r);
                }
                vec![(x, g.to_vec()), (bias, gb)]
            }
            &Op::Exp(x) => {
                let y = node.value.data();
                vec![(x, g.iter().zip(y).map(|(g, y)| g * y).collect())]
            }
            &Op::Log(x) => vec![(x, g.iter().zip(val(x)).map(|(g, x)| g / x).collect())],
            &Op::Square(x) => vec![(x, g.iter().zip(val(x)).map(|(g, x)| 2.0 * g * x).collect())],
            &Op::Sum(x) => vec![(x, vec![g[0]; self.nodes[x.0].value.len()])],
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                vec![(x, vec![g[0] / n as f64; n])]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut out = vec![];
                for &v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    let mut gi = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gi.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    offset += chunk;
                    out.push((v, gi));
                }
                out
            }
            &Op::LeakyRelu { x, slope } => vec![(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect(),
            )],
            &Op::SoftplusEps(x) => vec![(
                x,
                g.iter().zip(val(x)).map(|(g, &x)| g * sigmoid(x)).collect(),
            )],
            Op::MaxPool {
                x,
                groups,
                rows,
                cols,
                argmax,
            } => {
                let mut gx = vec![0.0; groups * rows * cols];
                for grp in 0..*groups {
                    for c in 0..*cols {
                        let r = argmax[grp * cols + c];
                        gx[(grp * rows + r) * cols + c] += g[grp * cols + c];
                    }
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let cols = inv_std.len();
                let rows = xhat.len() / cols;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        sum_g[c] += grow[c];
                        sum_gx[c] += grow[c] * hrow[c];
                    }
                }
                let mut out = vec![];
                if wants(*x) {
                    let mut gx = Vec::with_capacity(rows * cols);
                    let nr = rows as f64;
                    for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            let v = if stats.is_some() {
                                gam[c] * inv_std[c] / nr
                                    * (nr * grow[c] - sum_g[c] - hrow[c] * sum_gx[c])
                            } else {
                                gam[c] * inv_std[c] * grow[c]
                            };
                            gx.push(v);
                        }
                    }
                    out.push((*x, gx));
                }
                out.push((*gamma, sum_gx));
                out.push((*beta, sum_g));
                out
            }
            &Op::TransposedConv {
                x,
                w,
                bias,
                batch,
                height,
                width,
                cin,
                cout,
            } => {
                let cells = batch * height * width;
                let (oh, ow) = (2 * height, 2 * width);
                let xs = val(x);
                let ws = val(w);
                let mut gx = vec![0.0; cells * cin];
                let mut gw = vec![0.0; 4 * cin * cout];
                let mut gb = vec![0.0; cout];
                let mut tap = vec![0.0; cells * cout];
                for ki in 0..2 {
                    for kj in 0..2 {
                        for cell in 0..cells {
                            let (b, h, wi) = (
                                cell / (height * width),
                                (cell / width) % height,
                                cell % width,
                            );
                            let o = ((b * oh + 2 * h + ki) * ow + 2 * wi + kj) * cout;
                            tap[cell * cout..(cell + 1) * cout].copy_from_slice(&g[o..o + cout]);
                        }
                        for row in tap.chunks_exact(cout) {
                            gb.iter_mut().zip(row).for_each(|(b, r)| *b += r);
                        }
                        let k = (ki * 2 + kj) * cin * cout;
                        if wants(x) {
                            gemm_acc(
                                cells,
                                cout,
                                cin,
                                &tap,
                                false,
                                &ws[k..k + cin * cout],
                                true,
                                &mut gx,
                            );
                        }
                        gemm_acc(
                            cin,
                            cells,
                            cout,
                            xs,
                            true,
                            &tap,
                            false,
                            &mut gw[k..k + cin * cout],
                        );
                    }
                }
                vec![(x, gx), (w, gw), (bias, gb)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|gi| (v, gi)))
                    .collect()
            }
        }
    }
}
