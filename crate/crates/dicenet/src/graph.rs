//! Reverse-mode tape.
//!
//! Each forward op appends a node holding its output value and enough
//! bookkeeping to replay its adjoint. `backward` walks the tape once in
//! reverse and leaves gradients on every node that received one.

use crate::error::{shape_err, Result};
use crate::ops;
use crate::tensor::{Real, Shape5, Tensor5};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var },
    Pointwise { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factors: [usize; 3] },
    Concat(Var, Var),
    TwoClass(Var),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor5<T>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor5<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor5<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor5<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape5 {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::conv3d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv3d { x, w, b }))
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::pointwise_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Pointwise { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid_forward(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn maxpool(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let (y, argmax) = ops::maxpool_forward(self.value(x), factors)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let y = ops::upsample_forward(self.value(x), factors);
        self.push(y, Op::Upsample { x, factors })
    }

    /// Trilinear upsampling followed by a 1x1x1 convolution.
    pub fn upconv3d(&mut self, x: Var, factors: [usize; 3], w: Var, b: Var) -> Result<Var> {
        let up = self.upsample(x, factors);
        self.pointwise(up, w, b)
    }

    pub fn concat_skip(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    /// `[1 - p, p]` along channels, for two-class losses on a sigmoid head.
    pub fn two_class(&mut self, p: Var) -> Result<Var> {
        let y = ops::two_class_forward(self.value(p))?;
        Ok(self.push(y, Op::TwoClass(p)))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0].value;
        match node.take_grad() {
            Some(mut acc) => {
                acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                node.set_grad(acc).expect("same length");
            }
            None => node.set_grad(g).expect("gradient length matches by construction"),
        }
    }

    /// Back-propagate `seed` (dL/d output) through every node up to `output`.
    pub fn backward(&mut self, output: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(output).data().len() {
            return shape_err(
                "backward",
                format!("seed of {} for output {}", seed.len(), self.shape(output)),
            );
        }
        for node in &mut self.nodes {
            node.value.take_grad();
        }
        self.accumulate(output, seed);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Interior gradients are released once propagated; leaves keep theirs.
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => unreachable!(),
                Op::Conv3d { x, w, b } => {
                    let (gx, gw, gb) = ops::conv3d_backward(self.value(*x), self.value(*w), &g);
                    self.accumulate(*x, gx);
                    self.accumulate(*w, gw);
                    self.accumulate(*b, gb);
                }
                Op::Pointwise { x, w, b } => {
                    let (gx, gw, gb) = ops::pointwise_backward(self.value(*x), self.value(*w), &g);
                    self.accumulate(*x, gx);
                    self.accumulate(*w, gw);
                    self.accumulate(*b, gb);
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x), &g);
                    self.accumulate(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = ops::sigmoid_backward(&self.nodes[i].value, &g);
                    self.accumulate(*x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = ops::maxpool_backward(self.shape(*x).len(), argmax, &g);
                    self.accumulate(*x, gx);
                }
                Op::Upsample { x, factors } => {
                    let gx = ops::upsample_backward(self.shape(*x), *factors, &g);
                    self.accumulate(*x, gx);
                }
                Op::Concat(a, b) => {
                    let (ga, gb) = ops::concat_backward(self.shape(*a), self.shape(*b), &g);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::TwoClass(p) => {
                    let gp = ops::two_class_backward(self.shape(*p), &g);
                    self.accumulate(*p, gp);
                }
            }
            self.nodes[i].op = op;
        }
        Ok(())
    }
}
