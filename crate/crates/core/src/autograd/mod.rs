//! Reverse-mode automatic differentiation over dense `(N, H, W, C)` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs already exist,
//! so insertion order is a topological order and [`Graph::backward`] walks the
//! tape once in reverse. Gradients are retained for leaf nodes created with
//! `requires_grad`; intermediate adjoints are dropped as soon as they have
//! been propagated. Repeated `backward` calls accumulate into leaf gradients
//! until [`Graph::zero_grad`].

pub(crate) mod conv;
mod gradcheck;
mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::Kernel2D;
use crate::image::ImageTensor;

pub(crate) use ops::sigmoid;
pub use gradcheck::{grad_check, grad_check_fn, grad_check_many, sample_point, GradCheckOptions, GradCheckReport};

/// Tensor dimensions `(n, h, w, c)`. Convolution kernels reuse the same four
/// slots as `(kh, kw, c_in, c_out)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn h(&self) -> usize {
        self.0[1]
    }

    pub fn w(&self) -> usize {
        self.0[2]
    }

    pub fn c(&self) -> usize {
        self.0[3]
    }

    /// Same `(n, h, w)` with a different channel count.
    pub fn with_channels(&self, c: usize) -> Self {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n},{h},{w},{c})")
    }
}

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Shape::SCALAR,
            data: vec![v],
        }
    }

    /// Stacks equally sized images into an `(N, H, W, C)` batch.
    pub fn from_images(images: &[&ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot batch zero images"))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(Error::shape(format!(
                    "batch images differ in size: {:?} vs {:?}",
                    img.dims(),
                    (h, w, c)
                )));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(Shape::new(images.len(), h, w, c), data)
    }

    /// Splits a batch back into images (channels must be 1 or 3).
    pub fn to_images(&self) -> Result<Vec<ImageTensor>> {
        let [n, h, w, c] = self.shape.0;
        let per = h * w * c;
        (0..n)
            .map(|i| ImageTensor::new(h, w, c, self.data[i * per..(i + 1) * per].to_vec()))
            .collect()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log { x: NodeId, eps: f64 },
    Abs(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    ChannelMax(NodeId),
    SelectChannel(NodeId, usize),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    ReflectPad(NodeId, usize),
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId },
    FixedConv2d(NodeId, Kernel2D),
    Hypot(NodeId, NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Hypot(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log { x, .. }
            | Op::Abs(x)
            | Op::Mean(x)
            | Op::ChannelMax(x)
            | Op::SelectChannel(x, _)
            | Op::Sigmoid(x)
            | Op::LeakyRelu(x, _)
            | Op::ReflectPad(x, _)
            | Op::FixedConv2d(x, _) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    /// Adds an input. Tracked leaves receive gradients on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf (zeros before any backward pass).
    /// `None` for untracked or intermediate nodes.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape;
        Some(match &node.grad {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Replaces a leaf value in place (same shape), e.g. for finite differences.
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid("only leaf values can be replaced"));
        }
        if node.value.shape != value.shape {
            return Err(Error::shape(format!(
                "leaf shape {} vs {}",
                node.value.shape, value.shape
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Propagates `d loss / d node` to every tracked leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adjoints.resize_with(loss.0 + 1, || None);
        adjoints[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(upstream) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&upstream).for_each(|(g, u)| *g += u),
                    None => node.grad = Some(upstream),
                }
                continue;
            }
            let contributions = ops::backward_rule(self, NodeId(id), &upstream);
            for (input, grad) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adjoints[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}
