//! Tape-based reverse-mode differentiation over the kernels in [`crate::ops`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Linear { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Upsample(Var),
    Softmax { input: Var, axis: usize },
    WeightedCe { probs: Var, onehot: Tensor, weights: Tensor },
    Kl { student: Var, teacher: Tensor },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Dot { input: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so that [`Tape::backward`] can differentiate it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` was not reached.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad matches value"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), geom)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(input), out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Upsample(input), rg))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(input), axis)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Softmax { input, axis }, rg))
    }

    pub fn weighted_cross_entropy(&mut self, probs: Var, onehot: Tensor, weights: Tensor) -> Result<Var> {
        let loss = ops::weighted_cross_entropy(self.value(probs), &onehot, &weights)?;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedCe { probs, onehot, weights }, rg))
    }

    pub fn kl_divergence(&mut self, student: Var, teacher: Tensor) -> Result<Var> {
        let loss = ops::kl_divergence(self.value(student), &teacher)?;
        let rg = self.rg(student);
        Ok(self.push(Tensor::scalar(loss), Op::Kl { student, teacher }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(arg_err!("add: shape mismatch {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// `sum(a * weights)` against a constant tensor of the same shape.
    pub fn dot(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != weights.shape() {
            return Err(arg_err!("dot: shape mismatch {:?} vs {:?}", x.shape(), weights.shape()));
        }
        let out = Tensor::scalar(x.data().iter().zip(weights.data()).map(|(p, q)| p * q).sum());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dot { input: a, weights }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(*input), self.value(*weight), &g, *geom, self.rg(*input))?;
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *weight, gw);
                    self.accumulate(&mut grads, *bias, gb);
                }
                Op::Linear { input, weight, bias } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*input), self.value(*weight), &g);
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *weight, gw);
                    self.accumulate(&mut grads, *bias, gb);
                }
                Op::Relu(input) => {
                    let gx = ops::relu_backward(self.value(*input), &g);
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::Upsample(input) => {
                    let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                    let gx = ops::upsample_bilinear_backward(self.value(*input).shape(), &g, oh, ow);
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::Softmax { input, axis } => {
                    let gx = ops::softmax_backward(&node.value, &g, *axis)?;
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::WeightedCe { probs, onehot, weights } => {
                    let gx = ops::weighted_cross_entropy_backward(self.value(*probs), onehot, weights, g[0]);
                    self.accumulate(&mut grads, *probs, gx);
                }
                Op::Kl { student, teacher } => {
                    let gx = ops::kl_divergence_backward(self.value(*student), teacher, g[0]);
                    self.accumulate(&mut grads, *student, gx);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Scale(a, f) => {
                    let gx = g.iter().map(|v| v * f).collect();
                    self.accumulate(&mut grads, *a, gx);
                }
                Op::Sum(a) => {
                    let gx = vec![g[0]; self.value(*a).len()];
                    self.accumulate(&mut grads, *a, gx);
                }
                Op::Dot { input, weights } => {
                    let gx = weights.data().iter().map(|w| w * g[0]).collect();
                    self.accumulate(&mut grads, *input, gx);
                }
            }
        }
        // Only leaves keep their gradient; intermediate buffers were consumed.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}
