use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::conv::{
    broadcast_conv_backward, broadcast_conv_forward, conv2d_backward, conv2d_forward,
    coordinate_planes, BroadcastConvGeometry, ConvGeometry, Padding,
};
use super::ops;
use super::tensor::{broadcast_binary, broadcast_to, split_axis, sum_to_shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    StopGradient,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(S),
    AddScalar(S),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Elu,
    Softplus,
    Square,
    GaussianLogPdf { sigma: S },
    MatMul,
    Conv2d(ConvGeometry),
    BroadcastConv2d(BroadcastConvGeometry),
    SpatialBroadcast,
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    LayerNorm(usize),
    SumAll,
    SumAxis,
    Reshape,
    BroadcastTo,
    Narrow { axis: usize, start: usize },
    Concat(usize),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Elu => "elu",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::GaussianLogPdf { .. } => "gaussian_logpdf",
            Op::MatMul => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::BroadcastConv2d(_) => "broadcast_conv2d",
            Op::SpatialBroadcast => "spatial_broadcast",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::LayerNorm(_) => "layer_norm",
            Op::SumAll => "sum_all",
            Op::SumAxis => "sum_axis",
            Op::Reshape => "reshape",
            Op::BroadcastTo => "broadcast_to",
            Op::Narrow { .. } => "narrow",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    inputs: Vec<usize>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Append-only computation record. Every forward method evaluates eagerly and
/// returns a handle; [`Graph::backward`] walks the nodes in reverse order.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Result of a backward pass: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

fn zip3_map<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    f: impl Fn(S, S, S) -> S,
) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<usize>, value: Tensor<S>) -> Result<Var> {
        let requires_grad = match op {
            Op::Leaf | Op::StopGradient => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|&i| self.nodes[i].value.all_finite())
        {
            return Err(Error::NonFinite(format!(
                "{} output (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.push(Op::StopGradient, vec![x.0], v)
    }

    fn binary(&mut self, op: Op<S>, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let v = broadcast_binary(op.name(), self.value(a), self.value(b), f)?;
        self.push(op, vec![a.0, b.0], v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op<S>, x: Var, f: impl Fn(S) -> S) -> Result<Var> {
        let v = self.value(x).map(f);
        self.push(op, vec![x.0], v)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(Op::AddScalar(c), x, |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, S::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log, x, S::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh, x, S::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, ops::sigmoid)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Elu, x, ops::elu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus, x, ops::softplus)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square, x, |v| v * v)
    }

    /// Elementwise `log N(x; mean, sigma^2)` with broadcasting.
    pub fn gaussian_logpdf(&mut self, x: Var, mean: Var, sigma: S) -> Result<Var> {
        if !(sigma > S::zero()) {
            return Err(Error::Domain {
                op: "gaussian_logpdf",
                detail: format!("sigma must be positive, got {sigma}"),
            });
        }
        self.binary(Op::GaussianLogPdf { sigma }, x, mean, |a, m| {
            ops::gaussian_logpdf(a, m, sigma)
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul, vec![a.0, b.0], v)
    }

    /// Batched 2-D convolution: `x` is `[N, C, H, W]`, `w` is `[O, C, KH, KW]`,
    /// `b` is `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (xs, ws) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} and kernel {ws:?} must both be rank 4"),
            ));
        };
        if c != c2 {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {c2}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeometry::new((c, h, wd), (kh, kw), stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} on {h}x{wd} input"),
            )
        })?;
        let out = conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            o,
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(Op::Conv2d(geom), inputs, v)
    }

    /// Same-padded stride-1 convolution applied to the spatial broadcast of
    /// each row of `z` (`[K, M]`) with coordinate channels appended. Equal to
    /// `conv2d(spatial_broadcast(z))` but without materializing the broadcast.
    pub fn broadcast_conv2d(
        &mut self,
        z: Var,
        w: Var,
        b: Option<Var>,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let (zs, ws) = (self.shape(z), self.shape(w));
        let (&[k, m], &[o, cin, kh, kw]) = (zs, ws) else {
            return Err(Error::shape(
                "broadcast_conv2d",
                format!("latents {zs:?} must be rank 2 and kernel {ws:?} rank 4"),
            ));
        };
        if cin != m + 2 {
            return Err(Error::shape(
                "broadcast_conv2d",
                format!("kernel expects {cin} channels, broadcast has {}", m + 2),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "broadcast_conv2d",
                    format!("bias {:?} for {o} output channels", self.shape(b)),
                ));
            }
        }
        let conv = ConvGeometry::new((cin, height, width), (kh, kw), 1, Padding::Same)
            .ok_or_else(|| Error::shape("broadcast_conv2d", "invalid geometry"))?;
        let geom = BroadcastConvGeometry {
            slots: k,
            latent: m,
            out_channels: o,
            conv,
        };
        let out = broadcast_conv_forward(
            &geom,
            self.value(z).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(vec![k, o, height, width], out)?;
        let mut inputs = vec![z.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(Op::BroadcastConv2d(geom), inputs, v)
    }

    /// Tiles each latent vector over an `height x width` grid and appends the
    /// horizontal and vertical coordinate ramps: `[.., M]` to `[.., M+2, H, W]`.
    pub fn spatial_broadcast(&mut self, z: Var, height: usize, width: usize) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        let Some((&m, lead)) = zs.split_last() else {
            return Err(Error::shape("spatial_broadcast", "latent must have rank >= 1"));
        };
        let k: usize = lead.iter().product();
        let p = height * width;
        let coords = coordinate_planes::<S>(height, width);
        let zd = self.value(z).data();
        let mut out = Vec::with_capacity(k * (m + 2) * p);
        for s in 0..k {
            for j in 0..m {
                out.extend(std::iter::repeat_n(zd[s * m + j], p));
            }
            out.extend_from_slice(&coords);
        }
        let mut shape = lead.to_vec();
        shape.extend([m + 2, height, width]);
        let v = Tensor::new(shape, out)?;
        self.push(Op::SpatialBroadcast, vec![z.0], v)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        self.push(Op::Softmax(axis), vec![x.0], v)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::log_softmax(self.value(x), axis)?;
        self.push(Op::LogSoftmax(axis), vec![x.0], v)
    }

    /// Log-sum-exp along `axis`, keeping it with length 1.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::logsumexp(self.value(x), axis)?;
        self.push(Op::LogSumExp(axis), vec![x.0], v)
    }

    /// Standardizes each slice over the axes from `axis` onwards.
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::layer_norm(self.value(x), axis)?;
        self.push(Op::LayerNorm(axis), vec![x.0], v)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll, vec![x.0], v)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x)?;
        self.scale(s, S::one() / S::from_usize(n).unwrap())
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::sum_axis(self.value(x), axis)?;
        self.push(Op::SumAxis, vec![x.0], v)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![x.0], v)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = broadcast_to(self.value(x), shape)?;
        self.push(Op::BroadcastTo, vec![x.0], v)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::narrow(self.value(x), axis, start, len)?;
        self.push(Op::Narrow { axis, start }, vec![x.0], v)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&values, axis)?;
        self.push(Op::Concat(axis), parts.iter().map(|p| p.0).collect(), v)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let need: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let keep: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf))
            .collect();
        self.propagate(loss, &need, &keep)
    }

    /// Gradients of `loss` with respect to arbitrary nodes (leaves or
    /// intermediates). Only nodes downstream of a target are visited, so no
    /// parameter gradients are computed. Unreachable targets get zeros.
    pub fn grad_wrt(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor<S>>> {
        let mut need = vec![false; self.nodes.len()];
        let mut keep = vec![false; self.nodes.len()];
        let first = targets.iter().map(|t| t.0).min().unwrap_or(self.nodes.len());
        for t in targets {
            need[t.0] = true;
            keep[t.0] = true;
        }
        for i in first..self.nodes.len() {
            let n = &self.nodes[i];
            if !matches!(n.op, Op::StopGradient) && n.inputs.iter().any(|&j| need[j]) {
                need[i] = true;
            }
        }
        let grads = self.propagate(loss, &need, &keep)?;
        Ok(targets
            .iter()
            .map(|&t| {
                grads
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(t).to_vec()))
            })
            .collect())
    }

    fn propagate(&self, loss: Var, need: &[bool], keep: &[bool]) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        if need[loss.0] {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), S::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let wants: Vec<bool> = node.inputs.iter().map(|&j| need[j]).collect();
            if wants.iter().any(|&w| w) && !matches!(node.op, Op::StopGradient | Op::Leaf) {
                let input_grads = self.input_grads(i, &g, &wants)?;
                for (&j, gj) in node.inputs.iter().zip(input_grads) {
                    if let Some(gj) = gj {
                        match &mut grads[j] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(gj.data()) {
                                    *a += *b;
                                }
                            }
                            slot => *slot = Some(gj),
                        }
                    }
                }
            }
            if keep[i] {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, i: usize, g: &Tensor<S>, wants: &[bool]) -> Result<Vec<Option<Tensor<S>>>> {
        let node = &self.nodes[i];
        let x = |k: usize| &self.nodes[node.inputs[k]].value;
        let y = &node.value;
        let one = S::one();
        let single = |t: Tensor<S>| vec![Some(t)];
        let r = match &node.op {
            Op::Leaf | Op::StopGradient => vec![None; node.inputs.len()],
            Op::Add => vec![
                wants[0].then(|| sum_to_shape(g, x(0).shape())),
                wants[1].then(|| sum_to_shape(g, x(1).shape())),
            ],
            Op::Sub => vec![
                wants[0].then(|| sum_to_shape(g, x(0).shape())),
                wants[1].then(|| sum_to_shape(&g.map(|v| -v), x(1).shape())),
            ],
            Op::Mul => {
                let ga = if wants[0] {
                    let t = broadcast_binary("mul", g, x(1), |p, q| p * q)?;
                    Some(sum_to_shape(&t, x(0).shape()))
                } else {
                    None
                };
                let gb = if wants[1] {
                    let t = broadcast_binary("mul", g, x(0), |p, q| p * q)?;
                    Some(sum_to_shape(&t, x(1).shape()))
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Div => {
                let ga = if wants[0] {
                    let t = broadcast_binary("div", g, x(1), |p, q| p / q)?;
                    Some(sum_to_shape(&t, x(0).shape()))
                } else {
                    None
                };
                let gb = if wants[1] {
                    let gy = zip_map(g, y, |p, q| p * q);
                    let t = broadcast_binary("div", &gy, x(1), |p, q| -p / q)?;
                    Some(sum_to_shape(&t, x(1).shape()))
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Neg => single(g.map(|v| -v)),
            Op::Scale(c) => {
                let c = *c;
                single(g.map(|v| v * c))
            }
            Op::AddScalar(_) => single(g.clone()),
            Op::Exp => single(zip_map(g, y, |p, q| p * q)),
            Op::Log => single(zip_map(g, x(0), |p, q| p / q)),
            Op::Tanh => single(zip_map(g, y, |p, q| p * (one - q * q))),
            Op::Sigmoid => single(zip_map(g, y, |p, q| p * q * (one - q))),
            Op::Elu => single(zip3_map(g, x(0), y, |p, a, b| {
                if a > S::zero() {
                    p
                } else {
                    p * (b + one)
                }
            })),
            Op::Softplus => single(zip_map(g, x(0), |p, a| p * ops::sigmoid(a))),
            Op::Square => single(zip_map(g, x(0), |p, a| S::lit(2.0) * p * a)),
            Op::GaussianLogPdf { sigma } => {
                let inv_var = one / (*sigma * *sigma);
                let r = broadcast_binary("gaussian_logpdf", x(0), x(1), |a, m| (a - m) * inv_var)?;
                let gr = zip_map(g, &r, |p, q| p * q);
                vec![
                    wants[0].then(|| sum_to_shape(&gr.map(|v| -v), x(0).shape())),
                    wants[1].then(|| sum_to_shape(&gr, x(1).shape())),
                ]
            }
            Op::MatMul => {
                let (a, b) = (x(0), x(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = wants[0].then(|| {
                    let mut out = vec![S::zero(); m * k];
                    S::gemm(m, n, k, one, g.data(), (n, 1), b.data(), (1, n), S::zero(), &mut out, (k, 1));
                    Tensor::new(vec![m, k], out).expect("shape")
                });
                let gb = wants[1].then(|| {
                    let mut out = vec![S::zero(); k * n];
                    S::gemm(k, m, n, one, a.data(), (1, k), g.data(), (n, 1), S::zero(), &mut out, (n, 1));
                    Tensor::new(vec![k, n], out).expect("shape")
                });
                vec![ga, gb]
            }
            Op::Conv2d(geom) => {
                let (xin, w) = (x(0), x(1));
                let n = xin.shape()[0];
                let o = w.shape()[0];
                let mut gx = wants[0].then(|| Tensor::zeros(xin.shape().to_vec()));
                let mut gw = wants[1].then(|| Tensor::zeros(w.shape().to_vec()));
                let has_bias = node.inputs.len() == 3;
                let mut gb = (has_bias && wants[2]).then(|| Tensor::zeros(vec![o]));
                conv2d_backward(
                    geom,
                    n,
                    xin.data(),
                    w.data(),
                    o,
                    g.data(),
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                let mut r = vec![gx, gw];
                if has_bias {
                    r.push(gb);
                }
                r
            }
            Op::BroadcastConv2d(geom) => {
                let (z, w) = (x(0), x(1));
                let mut gz = wants[0].then(|| Tensor::zeros(z.shape().to_vec()));
                let mut gw = wants[1].then(|| Tensor::zeros(w.shape().to_vec()));
                let has_bias = node.inputs.len() == 3;
                let mut gb = (has_bias && wants[2]).then(|| Tensor::zeros(vec![geom.out_channels]));
                broadcast_conv_backward(
                    geom,
                    z.data(),
                    w.data(),
                    g.data(),
                    gz.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                let mut r = vec![gz, gw];
                if has_bias {
                    r.push(gb);
                }
                r
            }
            Op::SpatialBroadcast => {
                let zs = x(0).shape();
                let m = zs[zs.len() - 1];
                let k = x(0).len() / m.max(1);
                let p: usize = y.shape()[y.rank() - 2..].iter().product();
                let mut out = vec![S::zero(); k * m];
                for s in 0..k {
                    for j in 0..m {
                        let base = (s * (m + 2) + j) * p;
                        out[s * m + j] = g.data()[base..base + p].iter().copied().sum();
                    }
                }
                single(Tensor::new(zs.to_vec(), out)?)
            }
            Op::Softmax(axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut out = vec![S::zero(); y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let dot: S = (0..n).map(|j| gd[base + j * inner] * yd[base + j * inner]).sum();
                        for j in 0..n {
                            let at = base + j * inner;
                            out[at] = yd[at] * (gd[at] - dot);
                        }
                    }
                }
                single(Tensor::new(y.shape().to_vec(), out)?)
            }
            Op::LogSoftmax(axis) => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut out = vec![S::zero(); y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let total: S = (0..n).map(|j| gd[base + j * inner]).sum();
                        for j in 0..n {
                            let at = base + j * inner;
                            out[at] = gd[at] - yd[at].exp() * total;
                        }
                    }
                }
                single(Tensor::new(y.shape().to_vec(), out)?)
            }
            Op::LogSumExp(axis) => {
                let xin = x(0);
                let (outer, n, inner) = split_axis(xin.shape(), *axis);
                let mut out = vec![S::zero(); xin.len()];
                let (xd, yd, gd) = (xin.data(), y.data(), g.data());
                for o in 0..outer {
                    for ii in 0..inner {
                        let r = o * inner + ii;
                        let base = o * n * inner + ii;
                        for j in 0..n {
                            let at = base + j * inner;
                            out[at] = gd[r] * (xd[at] - yd[r]).exp();
                        }
                    }
                }
                single(Tensor::new(xin.shape().to_vec(), out)?)
            }
            Op::LayerNorm(axis) => {
                let xin = x(0);
                let n: usize = xin.shape()[*axis..].iter().product();
                let nf = S::from_usize(n.max(1)).unwrap();
                let eps = S::lit(ops::LAYER_NORM_EPS);
                let mut out = vec![S::zero(); xin.len()];
                for (((oc, xc), yc), gc) in out
                    .chunks_exact_mut(n.max(1))
                    .zip(xin.data().chunks_exact(n.max(1)))
                    .zip(y.data().chunks_exact(n.max(1)))
                    .zip(g.data().chunks_exact(n.max(1)))
                {
                    let mean = xc.iter().copied().sum::<S>() / nf;
                    let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
                    let inv = one / (var + eps).sqrt();
                    let gm = gc.iter().copied().sum::<S>() / nf;
                    let gym = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<S>() / nf;
                    for ((o, &gv), &yv) in oc.iter_mut().zip(gc).zip(yc) {
                        *o = inv * (gv - gm - yv * gym);
                    }
                }
                single(Tensor::new(xin.shape().to_vec(), out)?)
            }
            Op::SumAll => single(Tensor::full(x(0).shape().to_vec(), g.data()[0])),
            Op::SumAxis => single(broadcast_to(g, x(0).shape())?),
            Op::Reshape => single(g.clone().reshape(x(0).shape().to_vec())?),
            Op::BroadcastTo => single(sum_to_shape(g, x(0).shape())),
            Op::Narrow { axis, start } => {
                let xin = x(0);
                let (outer, n, inner) = split_axis(xin.shape(), *axis);
                let len = g.shape()[*axis];
                let mut out = Tensor::zeros(xin.shape().to_vec());
                let od = out.data_mut();
                for o in 0..outer {
                    od[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                single(out)
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                let mut r = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let len = x(k).shape()[*axis];
                    r.push(if wants[k] {
                        Some(ops::narrow(g, *axis, offset, len)?)
                    } else {
                        None
                    });
                    offset += len;
                }
                r
            }
        };
        Ok(r)
    }
}
