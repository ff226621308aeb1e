//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Nodes are appended in evaluation order, so node indices already form a
//! topological order and `backward` is a single reverse sweep.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sigmoid,
    LeakyRelu(f64),
}

/// A fused operation defined outside this module. Its forward value is
/// computed by the caller; the graph only needs the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the upstream gradient of
    /// the output. `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// How a binary operand maps onto the output: full shape, or broadcast over a
/// trailing axis of extent 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Operand {
    Full,
    Trailing(usize),
}

impl Operand {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Operand::Full => i,
            Operand::Trailing(last) => i / last,
        }
    }
}

enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var, Operand, Operand),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Unary(UnaryOp::Neg, _) => "neg",
            Op::Unary(UnaryOp::Exp, _) => "exp",
            Op::Unary(UnaryOp::Log, _) => "log",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::LeakyRelu(_), _) => "leaky_relu",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample2(_) => "nearest_upsample2",
            Op::ConcatChannels(..) => "concat_channels",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of tensor operations.
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph that checks every op output for NaN/Inf in debug builds.
    pub fn new() -> Graph {
        Graph::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Graph {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b, ..) | Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Custom(_, inputs) => inputs.clone(),
        }
    }

    fn operands(&self, a: Var, b: Var) -> Result<(Vec<usize>, Operand, Operand)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), Operand::Full, Operand::Full));
        }
        let trailing = |narrow: &[usize], wide: &[usize]| {
            narrow.len() == wide.len()
                && !wide.is_empty()
                && narrow[narrow.len() - 1] == 1
                && narrow[..narrow.len() - 1] == wide[..wide.len() - 1]
        };
        if trailing(sb, sa) {
            let last = sa[sa.len() - 1];
            Ok((sa.to_vec(), Operand::Full, Operand::Trailing(last)))
        } else if trailing(sa, sb) {
            let last = sb[sb.len() - 1];
            Ok((sb.to_vec(), Operand::Trailing(last), Operand::Full))
        } else {
            Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (shape, oa, ob) = self.operands(a, b)?;
        let n: usize = shape.iter().product();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..n).map(|i| f(xa[oa.index(i)], xb[ob.index(i)])).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Binary(op, a, b, oa, ob))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match op {
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Exp => x.map(math::exp),
            UnaryOp::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(TensorError::LogOfNonPositive { value: bad });
                }
                x.map(math::ln)
            }
            UnaryOp::Sigmoid => x.map(math::sigmoid),
            UnaryOp::LeakyRelu(alpha) => x.map(|v| if v >= 0.0 { v } else { alpha * v }),
        };
        self.push(value, Op::Unary(op, a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(alpha), a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a))
    }

    /// Zero-padded cross-correlation of `x` (NCHW) with `w` (O, C, K, K).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = self.value(x).dims4("conv2d")?;
        let (o, i, kh, kw) = self.value(w).dims4("conv2d")?;
        if i != dims.1 {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d",
                input: dims.1,
                weight: i,
            });
        }
        if kh != kw {
            return Err(TensorError::Invalid(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(dims, o, kh, stride, pad).ok_or_else(|| {
            TensorError::NonPositiveOutput {
                op: "conv2d",
                input: self.shape(x).to_vec(),
            }
        })?;
        let bias = b.map(|b| self.value(b).data()).unwrap_or(&[]);
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let value = Tensor::new([geom.n, o, geom.out_h, geom.out_w], data)?;
        self.push(value, Op::Conv2d { x, w, b, geom })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatialExtent {
                op: "avg_pool2",
                shape: self.shape(x).to_vec(),
            });
        }
        let data = kernels::avg_pool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new([n, c, h / 2, w / 2], data)?;
        self.push(value, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("nearest_upsample2")?;
        let data = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new([n, c, 2 * h, 2 * w], data)?;
        self.push(value, Op::Upsample2(x))
    }

    /// Concatenate along the channel axis; `a` occupies the leading channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut data = Vec::with_capacity(na * (pa + pb));
        for n in 0..na {
            data.extend_from_slice(&xa[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&xb[n * pb..(n + 1) * pb]);
        }
        let value = Tensor::new([na, ca + cb, ha, wa], data)?;
        self.push(value, Op::ConcatChannels(a, b))
    }

    /// Per-channel normalization of an NCHW tensor followed by the affine map
    /// `gamma * xhat + beta`.
    ///
    /// With `stats = None` the batch mean and biased variance are used and
    /// returned (for running-average updates). With `Some((mean, var))` the
    /// given statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: vec![c],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xs = self.value(x).data();
        let (mean, var) = match stats {
            Some((mu, v)) => (mu.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * plane;
                        s += xs[base..base + plane].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * plane;
                        q += xs[base..base + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
        )?;
        Ok((v, mean, var))
    }

    /// Record a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        self.push(value, Op::Custom(op, inputs))
    }

    /// Propagate gradients from a scalar `loss` to every leaf that requires
    /// them. Gradients from every path into a node are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            for (parent, contrib) in self.vjp(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            let g = Tensor::new(shape, g)?;
            if self.check_finite && !g.all_finite() {
                return Err(TensorError::NonFinite {
                    op: "backward".to_string(),
                });
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `i` with upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(op, a, b, oa, ob) => {
                let (xa, xb) = (val(*a), val(*b));
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for (k, &gk) in g.iter().enumerate() {
                    let (ia, ib) = (oa.index(k), ob.index(k));
                    match op {
                        BinaryOp::Add => {
                            ga[ia] += gk;
                            gb[ib] += gk;
                        }
                        BinaryOp::Sub => {
                            ga[ia] += gk;
                            gb[ib] -= gk;
                        }
                        BinaryOp::Mul => {
                            ga[ia] += gk * xb[ib];
                            gb[ib] += gk * xa[ia];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Unary(op, a) => {
                let x = val(*a);
                let y = node.value.data();
                let gx = match *op {
                    UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                    UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryOp::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryOp::LeakyRelu(alpha) => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= 0.0 { *g } else { alpha * g })
                        .collect(),
                };
                vec![(*a, gx)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = wants(*x).then(|| vec![0.0; val(*x).len()]);
                let mut dw = wants(*w).then(|| vec![0.0; val(*w).len()]);
                let mut db = b.filter(|b| wants(*b)).map(|_| vec![0.0; geom.out_c]);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                let mut out = Vec::with_capacity(3);
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPool2(a) => {
                let x = &self.nodes[a.0].value;
                let s = x.shape();
                let mut dx = vec![0.0; x.numel()];
                kernels::avg_pool2_backward(g, s[0] * s[1], s[2], s[3], &mut dx);
                vec![(*a, dx)]
            }
            Op::Upsample2(a) => {
                let x = &self.nodes[a.0].value;
                let s = x.shape();
                let mut dx = vec![0.0; x.numel()];
                kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3], &mut dx);
                vec![(*a, dx)]
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let pa = sa[1] * sa[2] * sa[3];
                let pb = sb[1] * sb[2] * sb[3];
                let mut ga = Vec::with_capacity(sa[0] * pa);
                let mut gb = Vec::with_capacity(sb[0] * pb);
                for n in 0..sa[0] {
                    let base = n * (pa + pb);
                    ga.extend_from_slice(&g[base..base + pa]);
                    gb.extend_from_slice(&g[base + pa..base + pa + pb]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = val(*gamma);
                let m = (n * plane) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s_i in 0..n {
                    for ch in 0..c {
                        let base = (s_i * c + ch) * plane;
                        for k in base..base + plane {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for s_i in 0..n {
                    for ch in 0..c {
                        let base = (s_i * c + ch) * plane;
                        let scale = gam[ch] * inv_std[ch];
                        for k in base..base + plane {
                            dx[k] = if *batch_stats {
                                scale * (g[k] - (dbeta[ch] + xhat[k] * dgamma[ch]) / m)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Custom(op, inputs) => {
                let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.backward(&xs, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gx, v)| gx.map(|gx| (*v, gx)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_activations() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(sg).data(), &[0.5]);
        let m = g.constant(Tensor::scalar(-1.0));
        let lr = g.leaky_relu(m, 0.2).unwrap();
        assert!((g.value(lr).data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(c), Err(TensorError::LogOfNonPositive { .. })));
    }

    #[test]
    fn trailing_axis_broadcast() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.variable(t(&[2, 1], &[10.0, 20.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 20.0, 30.0, 80.0, 100.0, 120.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn simple_backward_cases() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[0.3, -1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::with_finite_check(true);
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(TensorError::ChannelMismatch { .. })));
        let x = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(TensorError::NonPositiveOutput { .. })));
    }

    #[test]
    fn pool_and_upsample() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let odd = g.constant(Tensor::zeros([1, 1, 3, 2]));
        assert!(matches!(g.avg_pool2(odd), Err(TensorError::OddSpatialExtent { .. })));

        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let u = g.upsample2(one).unwrap();
        assert_eq!(g.value(u).data(), &[1.0; 4]);
        let u = g.upsample2(x).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let c = g.constant(Tensor::full([2, 3, 4, 6], 1.5));
        let p = g.avg_pool2(c).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 2, 3]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pool_and_upsample_gradients() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full([1, 2, 4, 4], 1.0));
        let p = g.avg_pool2(x).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.25));

        let mut g = Graph::new();
        let x = g.variable(Tensor::full([1, 2, 3, 3], 1.0));
        let u = g.upsample2(x).unwrap();
        let s = g.sum(u).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([1, 512, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 512, 2, 2]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1024, 2, 2]);

        let x = g.constant(Tensor::from_fn([2, 3, 2, 2], |i| i as f64));
        let empty = g.constant(Tensor::zeros([2, 0, 2, 2]));
        let c = g.concat_channels(x, empty).unwrap();
        assert_eq!(g.value(c), g.value(x));

        let bad = g.constant(Tensor::zeros([2, 1, 3, 2]));
        assert!(g.concat_channels(x, bad).is_err());
    }
}
