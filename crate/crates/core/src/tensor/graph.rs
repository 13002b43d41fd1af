use crate::error::{Error, Result};

use super::ops::{self, ConvGeometry};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Result of an operation none of whose inputs needs a gradient.
    Detached,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        in_f: usize,
        out_f: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        area: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Slice {
        input: Var,
        offset: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so inputs
/// always precede their consumers and a reverse sweep is a valid
/// topological traversal.
///
/// Leaf gradients persist across [`Graph::backward`] calls and accumulate
/// until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Detached
        };
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Inserts a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        tensor.zero_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let (out, geom, cols) = ops::conv2d_impl(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
            needs,
        )?;
        let op = Op::Conv {
            input,
            weight,
            bias,
            geom,
            cols: cols.unwrap_or_default(),
        };
        self.push_checked(out, op, needs, "conv2d")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push_checked(out, Op::Relu(input), needs, "relu")
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (rows, in_f, out_f) = ops::linear_shape(self.value(input).shape(), self.value(weight), self.value(bias))?;
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let op = Op::Linear {
            input,
            weight,
            bias,
            rows,
            in_f,
            out_f,
        };
        self.push_checked(out, op, needs, "linear")
    }

    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d_impl(self.value(input), size)?;
        let needs = self.needs(input);
        self.push_checked(out, Op::MaxPool { input, argmax }, needs, "max_pool2d")
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let s = self.value(input).shape();
        let area = s[2] * s[3];
        let needs = self.needs(input);
        self.push_checked(out, Op::GlobalAvgPool { input, area }, needs, "global_avg_pool")
    }

    /// Batch-mean softmax cross-entropy; result has shape `[1]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (losses, probs) = ops::cross_entropy_rows(self.value(logits), labels)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let needs = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push_checked(Tensor::scalar(mean), op, needs, "softmax_cross_entropy")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(out, op, needs, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect());
        let needs = self.needs(a);
        self.push_checked(out, Op::Scale(a, c), needs, "scale")
    }

    /// Sum of all entries; result has shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push_checked(Tensor::scalar(s), Op::Sum(a), needs, "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// Flattened activation of channel `channel` of sample `sample` from a
    /// `(B, C, H, W)` tensor, as a differentiable `[H*W]` vector.
    pub fn channel_map(&mut self, a: Var, sample: usize, channel: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("channel_map needs (B, C, H, W), got {s:?}")));
        }
        if sample >= s[0] || channel >= s[1] {
            return Err(Error::Index(format!(
                "channel ({sample}, {channel}) outside batch {} x channels {}",
                s[0], s[1]
            )));
        }
        let len = s[2] * s[3];
        let offset = (sample * s[1] + channel) * len;
        let data = self.value(a).data()[offset..offset + len].to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(vec![len], data),
            Op::Slice { input: a, offset },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let emit = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Detached => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let need_in = self.nodes[input.0].needs_grad;
                    let cg = ops::conv2d_backward(geom, cols, self.nodes[weight.0].value.data(), &g, need_in);
                    if need_in {
                        emit(*input, cg.input, &mut grads);
                    }
                    emit(*weight, cg.weight, &mut grads);
                    emit(*bias, cg.bias, &mut grads);
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(self.nodes[input.0].value.data(), &g);
                    emit(*input, gi, &mut grads);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    rows,
                    in_f,
                    out_f,
                } => {
                    let (gi, gw, gb) = ops::linear_backward(
                        self.nodes[input.0].value.data(),
                        self.nodes[weight.0].value.data(),
                        &g,
                        *rows,
                        *in_f,
                        *out_f,
                    );
                    emit(*input, gi, &mut grads);
                    emit(*weight, gw, &mut grads);
                    emit(*bias, gb, &mut grads);
                }
                Op::MaxPool { input, argmax } => {
                    let mut gi = vec![0.0; self.nodes[input.0].value.numel()];
                    for (&src, gv) in argmax.iter().zip(&g) {
                        gi[src] += gv;
                    }
                    emit(*input, gi, &mut grads);
                }
                Op::GlobalAvgPool { input, area } => {
                    let scale = 1.0 / *area as f64;
                    let gi = g.iter().flat_map(|gv| std::iter::repeat_n(gv * scale, *area)).collect();
                    emit(*input, gi, &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * k + y] -= scale;
                    }
                    emit(*logits, gl, &mut grads);
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    emit(*b, g.iter().map(|x| -x).collect(), &mut grads);
                    emit(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    let ga = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    emit(*a, ga, &mut grads);
                    emit(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => {
                    emit(*a, g.iter().map(|x| x * c).collect(), &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    emit(*a, vec![g[0]; n], &mut grads);
                }
                Op::Reshape(a) => emit(*a, g, &mut grads),
                Op::Slice { input, offset } => {
                    let mut gi = vec![0.0; self.nodes[input.0].value.numel()];
                    gi[*offset..*offset + g.len()].copy_from_slice(&g);
                    emit(*input, gi, &mut grads);
                }
            }
        }
        Ok(())
    }
}
