use super::{conv, Graph, NodeId, Op, Shape, Tensor};
use crate::error::{Error, Result};
use crate::filters::Kernel2D;

/// How an elementwise binary op lines its operands up.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Left operand has one channel, spread over the right's channels.
    Left,
    /// Right operand has one channel, spread over the left's channels.
    Right,
}

fn broadcast(a: Shape, b: Shape) -> Result<(Broadcast, Shape)> {
    if a == b {
        return Ok((Broadcast::Same, a));
    }
    if a.with_channels(1) == b.with_channels(1) {
        if a.c() == 1 {
            return Ok((Broadcast::Left, b));
        }
        if b.c() == 1 {
            return Ok((Broadcast::Right, a));
        }
    }
    Err(Error::shape(format!("cannot broadcast {a} with {b}")))
}

/// Elementwise `f(a, b)` with optional single-channel broadcast.
fn zip_broadcast(a: &Tensor, b: &Tensor, mode: Broadcast, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = out.c();
    let data = match mode {
        Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Left => (0..out.numel()).map(|i| f(a.data[i / c], b.data[i])).collect(),
        Broadcast::Right => (0..out.numel()).map(|i| f(a.data[i], b.data[i / c])).collect(),
    };
    Tensor { shape: out, data }
}

/// Sums a full-size gradient down to a single-channel operand.
fn reduce_channels(full: &[f64], c: usize) -> Vec<f64> {
    full.chunks_exact(c).map(|p| p.iter().sum()).collect()
}

/// Gradient of `x * other` w.r.t. `x`. `x_single` marks `x` as the
/// broadcast single-channel operand.
fn mul_grad(up: &[f64], other: &Tensor, x_single: bool, c: usize) -> Vec<f64> {
    let oc = other.shape.c();
    if x_single {
        let prod: Vec<f64> = up.iter().zip(&other.data).map(|(u, y)| u * y).collect();
        reduce_channels(&prod, c)
    } else if oc == c {
        up.iter().zip(&other.data).map(|(u, y)| u * y).collect()
    } else {
        up.iter().enumerate().map(|(i, u)| u * other.data[i / c]).collect()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&t| f(t)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (mode, shape) = broadcast(a.shape, b.shape)?;
    Ok(zip_broadcast(a, b, mode, shape, f))
}

/// Evaluates one op from the current values of its inputs.
pub(super) fn eval(g: &Graph, op: &Op) -> Result<Tensor> {
    let val = |n: &NodeId| g.value(*n);
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => zip(val(a), val(b), |x, y| x + y)?,
        Op::Sub(a, b) => zip(val(a), val(b), |x, y| x - y)?,
        Op::Mul(a, b) => zip(val(a), val(b), |x, y| x * y)?,
        Op::Scale(x, s) => map(val(x), |t| s * t),
        Op::Exp(x) => map(val(x), f64::exp),
        Op::Log { x, eps } => {
            let eps = *eps;
            if eps > 0.0 {
                map(val(x), |t| t.max(eps).ln())
            } else {
                if let Some(bad) = val(x).data.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::invalid(format!("log of non-positive value {bad} without clamp")));
                }
                map(val(x), f64::ln)
            }
        }
        Op::Abs(x) => map(val(x), f64::abs),
        Op::Mean(x) => {
            let v = val(x);
            Tensor::scalar(v.data.iter().sum::<f64>() / v.numel() as f64)
        }
        Op::Concat(xs) => {
            let first = val(xs.first().ok_or_else(|| Error::shape("concat of nothing"))?).shape;
            let mut total_c = 0;
            for x in xs {
                let s = val(x).shape;
                if s.with_channels(1) != first.with_channels(1) {
                    return Err(Error::shape(format!("concat {s} with {first}")));
                }
                total_c += s.c();
            }
            let shape = first.with_channels(total_c);
            let pixels = first.numel() / first.c();
            let mut data = Vec::with_capacity(shape.numel());
            for p in 0..pixels {
                for x in xs {
                    let v = val(x);
                    let c = v.shape.c();
                    data.extend_from_slice(&v.data[p * c..(p + 1) * c]);
                }
            }
            Tensor { shape, data }
        }
        Op::ChannelMax(x) => {
            let v = val(x);
            Tensor {
                shape: v.shape.with_channels(1),
                data: v
                    .data
                    .chunks_exact(v.shape.c())
                    .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect(),
            }
        }
        Op::SelectChannel(x, ch) => {
            let v = val(x);
            let c = v.shape.c();
            if *ch >= c {
                return Err(Error::shape(format!("channel {ch} out of range for {}", v.shape)));
            }
            Tensor {
                shape: v.shape.with_channels(1),
                data: v.data.iter().skip(*ch).step_by(c).copied().collect(),
            }
        }
        Op::Sigmoid(x) => map(val(x), sigmoid),
        Op::LeakyRelu(x, slope) => map(val(x), |t| if t > 0.0 { t } else { slope * t }),
        Op::Hypot(a, b) => {
            if val(a).shape != val(b).shape {
                return Err(Error::shape(format!("hypot of {} and {}", val(a).shape, val(b).shape)));
            }
            zip(val(a), val(b), f64::hypot)?
        }
        Op::ReflectPad(x, pad) => conv::reflect_pad_forward(val(x), *pad)?,
        Op::Conv2d {
            input,
            kernel,
            bias,
        } => conv::conv2d_forward(val(input), val(kernel), val(bias))?,
        Op::FixedConv2d(x, k) => conv::fixed_conv_forward(val(x), k)?,
    })
}

impl Graph {
    fn apply(&mut self, op: Op) -> Result<NodeId> {
        let value = eval(self, &op)?;
        Ok(self.push(value, op))
    }

    /// `a + b`; a single-channel operand broadcasts over the other's channels.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.apply(Op::Scale(x, s)).expect("infallible")
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.apply(Op::Exp(x)).expect("infallible")
    }

    /// Natural log; fails on any non-positive input.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log { x, eps: 0.0 })
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("log clamp eps must be positive, got {eps}")));
        }
        self.apply(Op::Log { x, eps })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.apply(Op::Abs(x)).expect("infallible")
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.apply(Op::Mean(x)).expect("infallible")
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat(xs.to_vec()))
    }

    /// Per-pixel maximum over channels.
    pub fn channel_max(&mut self, x: NodeId) -> NodeId {
        self.apply(Op::ChannelMax(x)).expect("infallible")
    }

    pub fn select_channel(&mut self, x: NodeId, ch: usize) -> Result<NodeId> {
        self.apply(Op::SelectChannel(x, ch))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.apply(Op::Sigmoid(x)).expect("infallible")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.apply(Op::LeakyRelu(x, slope)).expect("infallible")
    }

    /// `sqrt(a² + b²)` elementwise; the gradient at the origin is taken as zero.
    pub fn hypot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Hypot(a, b))
    }

    /// Mirror-pads `h` and `w` by `pad` pixels (reflect-101).
    pub fn reflection_pad(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        self.apply(Op::ReflectPad(x, pad))
    }

    /// Valid, stride-1 correlation. `kernel` is `(kh, kw, c_in, c_out)`,
    /// `bias` is `(1, 1, 1, c_out)`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::Conv2d {
            input,
            kernel,
            bias,
        })
    }

    /// Same-size per-channel correlation with a fixed kernel, reflect-101 borders.
    pub fn fixed_conv2d(&mut self, x: NodeId, kernel: &Kernel2D) -> Result<NodeId> {
        self.apply(Op::FixedConv2d(x, kernel.clone()))
    }

    /// Re-evaluates every non-leaf node after leaf values changed.
    pub fn recompute(&mut self) -> Result<()> {
        self.recompute_from(NodeId(0))
    }

    /// Re-evaluates the nodes recorded after `start`, which are the only ones
    /// that can depend on it.
    pub fn recompute_from(&mut self, start: NodeId) -> Result<()> {
        for i in start.0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = eval(self, &self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }
}

/// Adjoint contributions of node `id` to its inputs, given `d loss / d node`.
pub(super) fn backward_rule(g: &Graph, id: NodeId, up: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    let node = &g.nodes[id.0];
    let out = &node.value;
    let val = |n: NodeId| g.value(n);
    let tracked = |n: NodeId| g.requires_grad(n);
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let c = out.shape.c();
            let fit = |n: NodeId, s: f64| {
                let full: Vec<f64> = up.iter().map(|u| s * u).collect();
                if val(n).shape.c() == 1 && c != 1 {
                    reduce_channels(&full, c)
                } else {
                    full
                }
            };
            let mut res = Vec::new();
            if tracked(*a) {
                res.push((*a, fit(*a, 1.0)));
            }
            if tracked(*b) {
                res.push((*b, fit(*b, sign)));
            }
            res
        }
        Op::Mul(a, b) => {
            let c = out.shape.c();
            let mut res = Vec::new();
            if tracked(*a) {
                res.push((*a, mul_grad(up, val(*b), val(*a).shape.c() != c, c)));
            }
            if tracked(*b) {
                res.push((*b, mul_grad(up, val(*a), val(*b).shape.c() != c, c)));
            }
            res
        }
        Op::Scale(x, s) => vec![(*x, up.iter().map(|u| s * u).collect())],
        Op::Exp(x) => vec![(*x, up.iter().zip(&out.data).map(|(u, y)| u * y).collect())],
        Op::Log { x, eps } => {
            let xs = &val(*x).data;
            vec![(
                *x,
                up.iter()
                    .zip(xs)
                    .map(|(u, &t)| if t > *eps { u / t } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Abs(x) => {
            let xs = &val(*x).data;
            vec![(
                *x,
                up.iter()
                    .zip(xs)
                    .map(|(u, &t)| if t > 0.0 { *u } else if t < 0.0 { -u } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            vec![(*x, vec![up[0] / n as f64; n])]
        }
        Op::Concat(xs) => {
            let total = out.shape.c();
            let pixels = out.numel() / total;
            let mut offset = 0;
            let mut res = Vec::new();
            for &x in xs {
                let c = val(x).shape.c();
                if tracked(x) {
                    let mut gx = Vec::with_capacity(pixels * c);
                    for p in 0..pixels {
                        gx.extend_from_slice(&up[p * total + offset..p * total + offset + c]);
                    }
                    res.push((x, gx));
                }
                offset += c;
            }
            res
        }
        Op::ChannelMax(x) => {
            let v = val(*x);
            let c = v.shape.c();
            let mut gx = vec![0.0; v.numel()];
            for (p, px) in v.data.chunks_exact(c).enumerate() {
                let arg = px
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &t)| if t > px[best] { i } else { best });
                gx[p * c + arg] = up[p];
            }
            vec![(*x, gx)]
        }
        Op::SelectChannel(x, ch) => {
            let v = val(*x);
            let c = v.shape.c();
            let mut gx = vec![0.0; v.numel()];
            for (p, u) in up.iter().enumerate() {
                gx[p * c + ch] = *u;
            }
            vec![(*x, gx)]
        }
        Op::Sigmoid(x) => vec![(
            *x,
            up.iter().zip(&out.data).map(|(u, y)| u * y * (1.0 - y)).collect(),
        )],
        Op::LeakyRelu(x, slope) => {
            let xs = &val(*x).data;
            vec![(
                *x,
                up.iter()
                    .zip(xs)
                    .map(|(u, &t)| if t > 0.0 { *u } else { slope * u })
                    .collect(),
            )]
        }
        Op::Hypot(a, b) => {
            let (xa, xb) = (&val(*a).data, &val(*b).data);
            let part = |xs: &[f64]| -> Vec<f64> {
                up.iter()
                    .zip(xs)
                    .zip(&out.data)
                    .map(|((u, t), h)| if *h > 0.0 { u * t / h } else { 0.0 })
                    .collect()
            };
            let mut res = Vec::new();
            if tracked(*a) {
                res.push((*a, part(xa)));
            }
            if tracked(*b) {
                res.push((*b, part(xb)));
            }
            res
        }
        Op::ReflectPad(x, pad) => vec![(*x, conv::reflect_pad_backward(up, val(*x).shape, *pad))],
        Op::FixedConv2d(x, k) => vec![(*x, conv::fixed_conv_backward(up, val(*x).shape, k))],
        Op::Conv2d {
            input,
            kernel,
            bias,
        } => {
            let grads = conv::conv2d_backward(
                up,
                val(*input),
                val(*kernel),
                tracked(*input),
                tracked(*kernel) || tracked(*bias),
            );
            let mut res = Vec::new();
            if let Some(gi) = grads.input {
                res.push((*input, gi));
            }
            if let Some((gk, gb)) = grads.params {
                if tracked(*kernel) {
                    res.push((*kernel, gk));
                }
                if tracked(*bias) {
                    res.push((*bias, gb));
                }
            }
            res
        }
    }
}
