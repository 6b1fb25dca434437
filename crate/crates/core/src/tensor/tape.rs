use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, ConvGeom, DenseGeom};
use crate::tensor::{numel, Tensor};

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
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Dense { input: Var, weights: Var, bias: Var, geom: DenseGeom },
    LeakyRelu(Var),
    Sigmoid(Var),
    PixelShuffle(Var),
    Reshape(Var),
    L1 { pred: Var, target: Var },
    Sum(Var),
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; inputs always precede their
/// consumers, so a reverse sweep is a valid topological traversal.
///
/// Leaves borrow their data from the caller's tensors.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    /// Records a borrowed leaf; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Records an owned leaf.
    pub fn leaf_owned(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.to_vec()).expect("recorded shapes are consistent")
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, pad)?;
        if self.shape(bias) != [geom.out_c] {
            return Err(Error::InvalidShape(format!(
                "conv2d bias {:?} for {} kernels",
                self.shape(bias),
                geom.out_c
            )));
        }
        let out = ops::conv2d_forward(&geom, self.value(input), self.value(kernel), self.value(bias));
        let shape = geom.output_shape(self.shape(input).len() == 4);
        let ng = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(shape, Cow::Owned(out), Op::Conv2d { input, kernel, bias, geom }, ng))
    }

    pub fn fully_connected(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let geom = DenseGeom::new(self.shape(input), self.shape(weights), self.shape(bias))?;
        let out = ops::dense_forward(&geom, self.value(input), self.value(weights), self.value(bias));
        let shape = if self.shape(input).len() == 2 {
            vec![geom.batch, geom.outputs]
        } else {
            vec![geom.outputs]
        };
        let ng = self.any_grad(&[input, weights, bias]);
        Ok(self.push(shape, Cow::Owned(out), Op::Dense { input, weights, bias, geom }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| ops::leaky_relu_value(v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.node(x).needs_grad);
        self.push(shape, Cow::Owned(out), Op::LeakyRelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| ops::sigmoid_value(v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.node(x).needs_grad);
        self.push(shape, Cow::Owned(out), Op::Sigmoid(x), ng)
    }

    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let shape = ops::pixel_shuffle_shape(self.shape(x))?;
        let out = ops::pixel_shuffle_permute(self.shape(x), self.value(x), false);
        let ng = self.node(x).needs_grad;
        Ok(self.push(shape, Cow::Owned(out), Op::PixelShuffle(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.node(x).needs_grad;
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(x), ng))
    }

    /// Mean absolute error, a `[1]` scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::InvalidShape(format!(
                "l1_loss shapes differ: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let loss = ops::l1_mean(self.value(pred), self.value(target));
        let ng = self.any_grad(&[pred, target]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), Op::L1 { pred, target }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let ng = self.node(x).needs_grad;
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar. Every leaf that requires grad receives a
    /// buffer, zero-filled when the loss does not depend on it. Intermediate
    /// gradients are dropped as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, n.needs_grad && matches!(n.op, Op::Leaf)) {
                (Some(g), true) => Some(g),
                (None, true) => Some(vec![T::zero(); n.value.len()]),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |v: Var| self.node(v).needs_grad;
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, ref geom } => {
                let cg = ops::conv2d_backward(
                    geom,
                    self.value(input),
                    self.value(kernel),
                    g,
                    (wants(input), wants(kernel), wants(bias)),
                );
                add_into(grads, input, cg.input);
                add_into(grads, kernel, cg.kernel);
                add_into(grads, bias, cg.bias);
            }
            Op::Dense { input, weights, bias, ref geom } => {
                let (dx, dw, db) = ops::dense_backward(
                    geom,
                    self.value(input),
                    self.value(weights),
                    g,
                    (wants(input), wants(weights), wants(bias)),
                );
                add_into(grads, input, dx);
                add_into(grads, weights, dw);
                add_into(grads, bias, db);
            }
            Op::LeakyRelu(x) => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * ops::leaky_relu_slope(v))
                    .collect();
                add_into(grads, x, Some(dx));
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                add_into(grads, x, Some(dx));
            }
            Op::PixelShuffle(x) => {
                let dx = ops::pixel_shuffle_permute(self.shape(x), g, true);
                add_into(grads, x, Some(dx));
            }
            Op::Reshape(x) => add_into(grads, x, Some(g.to_vec())),
            Op::L1 { pred, target } => {
                let dp = ops::l1_grad(self.value(pred), self.value(target), g[0]);
                if wants(target) {
                    add_into(grads, target, Some(dp.iter().map(|&v| -v).collect()));
                }
                if wants(pred) {
                    add_into(grads, pred, Some(dp));
                }
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                add_into(grads, x, Some(vec![g[0]; n]));
            }
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => grads[v.0] = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        let g = self
            .get(v)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for node {}", v.0)))?;
        tensor.accumulate_grad(g)
    }
}
