use super::kernels::{self, ConvDims, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    XLnY(Var, Var),
    Reshape(Var),
    Sum(Var),
    Expand(Var),
    SumAxis { x: Var, axis: usize },
    BroadcastAxis { x: Var, axis: usize },
    SumToDim1(Var),
    BroadcastDim1(Var),
    LogSoftmax { x: Var, axis: usize },
    Conv { x: Var, k: Var, geom: ConvGeom },
    ConvInputGrad { g: Var, k: Var, geom: ConvGeom },
    ConvKernelGrad { x: Var, g: Var, geom: ConvGeom },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![a, b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | XLnY(a, b) => vec![a, b],
            Affine { x, .. } | SumAxis { x, .. } | BroadcastAxis { x, .. } => vec![x],
            LogSoftmax { x, .. } => vec![x],
            Relu(a) | Tanh(a) | Exp(a) | Ln(a) | Reshape(a) | Sum(a) | Expand(a) => vec![a],
            SumToDim1(a) | BroadcastDim1(a) => vec![a],
            Conv { x, k, .. } => vec![x, k],
            ConvInputGrad { g, k, .. } => vec![g, k],
            ConvKernelGrad { x, g, .. } => vec![x, g],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Whether the gradient computation is itself recorded for further
/// differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients are plain values; no new differentiable nodes.
    FirstOrder,
    /// Backward rules are recorded as ordinary graph nodes, so the returned
    /// gradients can be differentiated again.
    CreateGraph,
}

/// A single-threaded computation graph recorded in topological order.
///
/// Every backward rule is expressed with the tape's own differentiable
/// primitives. In [`GradMode::CreateGraph`] the gradient graph is therefore a
/// first-class part of the tape, which is what makes differentiating through
/// a parameter update possible.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = !self.frozen
            && op
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant: backward never reaches past it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    /// Copies the value out of the graph.
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)`, where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            ka,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            0.0,
            &mut out,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x · ln(y)` with the convention `0 · ln(y) = 0`.
    pub fn xlny(&mut self, x: Var, y: Var) -> Result<Var> {
        self.zip(
            "xlny",
            x,
            y,
            |a, b| if a == 0.0 { 0.0 } else { a * b.ln() },
            Op::XLnY(x, y),
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    // ---- shape and reductions ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).item()?;
        Ok(self.push(Tensor::full(shape, v), Op::Expand(x)))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let src = self.value(x);
        let (outer, n, inner) = Self::axis_split(src.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = src.data();
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the values.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let src = self.value(x);
        if axis > src.rank() {
            return Err(Error::Dimension(format!(
                "broadcast axis {axis} out of range for shape {:?}",
                src.shape()
            )));
        }
        let mut shape = src.shape().to_vec();
        shape.insert(axis, n);
        let (outer, _, inner) = Self::axis_split(&shape, axis);
        let d = src.data();
        let mut out = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for a in 0..n {
                out[(o * n + a) * inner..(o * n + a + 1) * inner]
                    .copy_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::BroadcastAxis { x, axis }))
    }

    /// Sums a `[B, C, ...]` tensor down to `[C]`.
    pub fn sum_to_dim1(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.rank() < 2 {
            return Err(Error::Dimension(format!(
                "sum_to_dim1 needs rank >= 2, got {:?}",
                src.shape()
            )));
        }
        let (outer, c, inner) = Self::axis_split(src.shape(), 1);
        let d = src.data();
        let mut out = vec![0.0; c];
        for o in 0..outer {
            for (ch, acc) in out.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *acc += d[base..base + inner].iter().sum::<f64>();
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::SumToDim1(x)))
    }

    /// Broadcasts a `[C]` tensor to `shape = [B, C, ...]`.
    pub fn broadcast_dim1(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 1 || shape.len() < 2 || shape[1] != src.len() {
            return Err(shape_err("broadcast_dim1", src.shape(), shape));
        }
        let (outer, c, inner) = Self::axis_split(shape, 1);
        let d = src.data();
        let mut out = Vec::with_capacity(numel(shape));
        for _ in 0..outer {
            for &v in d.iter().take(c) {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastDim1(x)))
    }

    /// Adds a per-channel bias `[C]` to `x: [B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast_dim1(bias, &shape)?;
        self.add(x, b)
    }

    // ---- activations and losses -------------------------------------------

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let src = self.value(x);
        let (outer, n, inner) = Self::axis_split(src.shape(), axis);
        let d = src.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                // shift first so large logits keep their precision
                let lse = (0..n).map(|a| (d[at(a)] - max).exp()).sum::<f64>().ln();
                for a in 0..n {
                    out[at(a)] = (d[at(a)] - max) - lse;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(src.shape().to_vec(), out),
            Op::LogSoftmax { x, axis },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ls = self.log_softmax(x, axis)?;
        Ok(self.exp(ls))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} with {} labels",
                shape,
                labels.len()
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let mut onehot = vec![0.0; b * c];
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Data(format!(
                    "label {l} at batch index {i} is outside [0, {c})"
                )));
            }
            onehot[i * c + l] = 1.0;
        }
        let onehot = self.constant(Tensor::from_parts(shape, onehot));
        let ls = self.log_softmax(logits, 1)?;
        let picked = self.mul(ls, onehot)?;
        let total = self.sum(picked);
        Ok(self.scale(total, -1.0 / b.max(1) as f64))
    }

    /// Mean over rows of `Σ p·(ln p − ln q)` for probability rows `p`, `q`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        for (name, v) in [("p", p), ("q", q)] {
            let t = self.value(v);
            if t.rank() != 2 {
                return Err(Error::Dimension(format!(
                    "kl_divergence: {name} must be [batch x classes], got {:?}",
                    t.shape()
                )));
            }
            for r in 0..t.shape()[0] {
                let row = t.row(r);
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| !(x >= 0.0)) {
                    return Err(Error::Precondition(format!(
                        "kl_divergence: row {r} of {name} is not a probability vector (sum {s})"
                    )));
                }
            }
        }
        let b = self.shape(p)[0].max(1);
        let plp = self.xlny(p, p)?;
        let plq = self.xlny(p, q)?;
        let d = self.sub(plp, plq)?;
        let s = self.sum(d);
        Ok(self.scale(s, 1.0 / b as f64))
    }

    /// KL divergence between temperature-softened distributions of two logit
    /// tensors, `KL(σ(student/T) ‖ σ(teacher/T))`, averaged over rows.
    pub fn kl_divergence_logits(&mut self, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
        let b = self.shape(student).first().copied().unwrap_or(1).max(1);
        let s = self.scale(student, 1.0 / temperature);
        let t = self.scale(teacher, 1.0 / temperature);
        let lp = self.log_softmax(s, 1)?;
        let lq = self.log_softmax(t, 1)?;
        let p = self.exp(lp);
        let diff = self.sub(lp, lq)?;
        let terms = self.mul(p, diff)?;
        let total = self.sum(terms);
        Ok(self.scale(total, 1.0 / b as f64))
    }

    // ---- convolution ------------------------------------------------------

    fn conv_dims(x_shape: &[usize], k_shape: &[usize], geom: ConvGeom) -> Result<ConvDims> {
        if x_shape.len() != 4 || k_shape.len() != 4 || x_shape[1] != k_shape[1] {
            return Err(shape_err("conv2d", x_shape, k_shape));
        }
        if geom.stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (x_shape[2] + 2 * geom.pad, x_shape[3] + 2 * geom.pad);
        let (kh, kw) = (k_shape[2], k_shape[3]);
        if h < kh || w < kw {
            return Err(Error::Dimension(format!(
                "conv2d: padded input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(ConvDims {
            batch: x_shape[0],
            c_in: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            c_out: k_shape[0],
            kh,
            kw,
            ho: (h - kh) / geom.stride + 1,
            wo: (w - kw) / geom.stride + 1,
            geom,
        })
    }

    /// Cross-correlation of `x: [B, C_in, H, W]` with `kernel: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, geom: ConvGeom) -> Result<Var> {
        let d = Self::conv_dims(self.shape(x), self.shape(kernel), geom)?;
        let out = kernels::conv_forward(self.value(x).data(), self.value(kernel).data(), &d);
        Ok(self.push(
            Tensor::from_parts(vec![d.batch, d.c_out, d.ho, d.wo], out),
            Op::Conv { x, k: kernel, geom },
        ))
    }

    /// Transposed convolution: the adjoint of [`conv2d`](Self::conv2d) with
    /// respect to its input. `z: [B, C_out, h, w]` maps to
    /// `[B, C_in, out_hw.0, out_hw.1]` for `kernel: [C_out, C_in, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        z: Var,
        kernel: Var,
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (zs, ks) = (self.shape(z).to_vec(), self.shape(kernel).to_vec());
        if zs.len() != 4 || ks.len() != 4 || zs[1] != ks[0] {
            return Err(shape_err("conv_transpose2d", &zs, &ks));
        }
        let x_shape = [zs[0], ks[1], out_hw.0, out_hw.1];
        let d = Self::conv_dims(&x_shape, &ks, geom)?;
        if d.ho != zs[2] || d.wo != zs[3] {
            return Err(Error::Dimension(format!(
                "conv_transpose2d: output {out_hw:?} inconsistent with input {zs:?} and kernel {ks:?}"
            )));
        }
        Ok(self.conv_input_grad(z, kernel, geom, &x_shape))
    }

    fn conv_input_grad(&mut self, g: Var, k: Var, geom: ConvGeom, x_shape: &[usize]) -> Var {
        let d = Self::conv_dims(x_shape, self.shape(k), geom).expect("geometry checked by caller");
        let out = kernels::conv_input_grad(self.value(g).data(), self.value(k).data(), &d);
        self.push(
            Tensor::from_parts(x_shape.to_vec(), out),
            Op::ConvInputGrad { g, k, geom },
        )
    }

    fn conv_kernel_grad(&mut self, x: Var, g: Var, geom: ConvGeom, k_shape: &[usize]) -> Var {
        let d = Self::conv_dims(self.shape(x), k_shape, geom).expect("geometry checked by caller");
        let out = kernels::conv_kernel_grad(self.value(x).data(), self.value(g).data(), &d);
        self.push(
            Tensor::from_parts(k_shape.to_vec(), out),
            Op::ConvKernelGrad { x, g, geom },
        )
    }

    // ---- reverse mode -----------------------------------------------------

    /// Vector-Jacobian products of node `out` for the inputs flagged in `need`.
    fn vjp(&mut self, out: Var, h: Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[out.0].op.clone();
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        let mut g = vec![None; need.len()];
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if want(0) {
                    g[0] = Some(if ta {
                        self.matmul_t(b, h, tb, true)?
                    } else {
                        self.matmul_t(h, b, false, !tb)?
                    });
                }
                if want(1) {
                    g[1] = Some(if tb {
                        self.matmul_t(h, a, true, ta)?
                    } else {
                        self.matmul_t(a, h, !ta, false)?
                    });
                }
            }
            Op::Add(..) => {
                g[0] = want(0).then_some(h);
                g[1] = want(1).then_some(h);
            }
            Op::Sub(..) => {
                g[0] = want(0).then_some(h);
                if want(1) {
                    g[1] = Some(self.neg(h));
                }
            }
            Op::Mul(a, b) => {
                if want(0) {
                    g[0] = Some(self.mul(h, b)?);
                }
                if want(1) {
                    g[1] = Some(self.mul(h, a)?);
                }
            }
            Op::Div(_, b) => {
                if want(0) {
                    g[0] = Some(self.div(h, b)?);
                }
                if want(1) {
                    let t = self.mul(h, out)?;
                    let t = self.div(t, b)?;
                    g[1] = Some(self.neg(t));
                }
            }
            Op::Affine { scale, .. } => g[0] = Some(self.scale(h, scale)),
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                g[0] = Some(self.mul(h, mask)?);
            }
            Op::Tanh(_) => {
                let sq = self.mul(out, out)?;
                let d = self.affine(sq, -1.0, 1.0);
                g[0] = Some(self.mul(h, d)?);
            }
            Op::Exp(_) => g[0] = Some(self.mul(h, out)?),
            Op::Ln(x) => g[0] = Some(self.div(h, x)?),
            Op::XLnY(x, y) => {
                if want(0) {
                    let l = self.ln(y);
                    g[0] = Some(self.mul(h, l)?);
                }
                if want(1) {
                    let t = self.mul(h, x)?;
                    g[1] = Some(self.div(t, y)?);
                }
            }
            Op::Reshape(x) => {
                let s = self.shape(x).to_vec();
                g[0] = Some(self.reshape(h, &s)?);
            }
            Op::Sum(x) => {
                let s = self.shape(x).to_vec();
                g[0] = Some(self.expand(h, &s)?);
            }
            Op::Expand(_) => g[0] = Some(self.sum(h)),
            Op::SumAxis { x, axis } => {
                let n = self.shape(x)[axis];
                g[0] = Some(self.broadcast_axis(h, axis, n)?);
            }
            Op::BroadcastAxis { axis, .. } => g[0] = Some(self.sum_axis(h, axis)?),
            Op::SumToDim1(x) => {
                let s = self.shape(x).to_vec();
                g[0] = Some(self.broadcast_dim1(h, &s)?);
            }
            Op::BroadcastDim1(_) => g[0] = Some(self.sum_to_dim1(h)?),
            Op::LogSoftmax { x, axis } => {
                let n = self.shape(x)[axis];
                let p = self.exp(out);
                let hs = self.sum_axis(h, axis)?;
                let hb = self.broadcast_axis(hs, axis, n)?;
                let t = self.mul(p, hb)?;
                g[0] = Some(self.sub(h, t)?);
            }
            Op::Conv { x, k, geom } => {
                if want(0) {
                    let s = self.shape(x).to_vec();
                    g[0] = Some(self.conv_input_grad(h, k, geom, &s));
                }
                if want(1) {
                    let s = self.shape(k).to_vec();
                    g[1] = Some(self.conv_kernel_grad(x, h, geom, &s));
                }
            }
            Op::ConvInputGrad { g: up, k, geom } => {
                if want(0) {
                    g[0] = Some(self.conv2d(h, k, geom)?);
                }
                if want(1) {
                    let s = self.shape(k).to_vec();
                    g[1] = Some(self.conv_kernel_grad(h, up, geom, &s));
                }
            }
            Op::ConvKernelGrad { x, g: up, geom } => {
                if want(0) {
                    let s = self.shape(x).to_vec();
                    g[0] = Some(self.conv_input_grad(up, h, geom, &s));
                }
                if want(1) {
                    g[1] = Some(self.conv2d(x, h, geom)?);
                }
            }
        }
        Ok(g)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// Only nodes lying on a path from some `wrt` entry to `loss` are
    /// visited, each exactly once, in reverse topological order. Entries of
    /// `wrt` that `loss` does not depend on receive zeros.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], mode: GradMode) -> Result<Vec<Var>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut reaches = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reaches[w.0] = true;
            }
        }
        for i in 0..n {
            if !reaches[i] && self.nodes[i].requires_grad {
                reaches[i] = self.nodes[i].op.inputs().iter().any(|v| reaches[v.0]);
            }
        }

        let was_frozen = self.frozen;
        self.frozen = mode == GradMode::FirstOrder;
        let result = self.backward_pass(loss, &reaches);
        self.frozen = was_frozen;
        let grads = result?;

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    out.push(self.constant(z));
                }
            }
        }
        Ok(out)
    }

    fn backward_pass(&mut self, loss: Var, reaches: &[bool]) -> Result<Vec<Option<Var>>> {
        let n = reaches.len();
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if !reaches[loss.0] {
            return Ok(grads);
        }
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(self.constant(Tensor::full(&seed_shape, 1.0)));
        for i in (0..n).rev() {
            let Some(h) = grads[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let inputs = self.nodes[i].op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|v| reaches[v.0]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let local = self.vjp(Var(i), h, &need)?;
            for (inp, g) in inputs.into_iter().zip(local) {
                let Some(g) = g else { continue };
                grads[inp.0] = Some(match grads[inp.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }
        Ok(grads)
    }

    /// First-order gradients as plain tensors.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(loss, wrt, GradMode::FirstOrder)?;
        Ok(g.into_iter().map(|v| self.detach(v)).collect())
    }
}
