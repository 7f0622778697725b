//! Reverse-mode differentiation over a per-forward-pass computation record.
//!
//! A [`Graph`] is built eagerly: every operation computes its value when it
//! is recorded, and nodes only ever reference earlier nodes, so the node
//! list is already in topological order. [`Graph::backward`] walks it once
//! in reverse. The graph is dropped after use; nothing persists between
//! forward passes.

use crate::batchnorm::{check_train_batch, BatchStats};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities inside [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: NodeId,
        kernel: usize,
        stride: usize,
    },
    MeanLast(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    ScaleChannels {
        input: NodeId,
        scale: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Bmm(NodeId, NodeId),
    TransposeLast2(NodeId),
    Sum(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
pub struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }
}

/// Evaluation-mode statistics for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own statistics.
    Train { eps: f64 },
    /// Normalize with fixed running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: Vec<Option<String>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of named leaves, in recording order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| Some((n.as_deref()?, g.as_ref()?)))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named().find(|(n, _)| *n == name).map(|(_, g)| g)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A differentiable leaf whose gradient is reported under `name`.
    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].name = Some(name.into());
        id
    }

    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = ops::conv1d_forward(self.value(input), self.value(kernel), geom)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            v,
            Op::Conv1d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization over `[B, C, T]`. In training mode also returns the
    /// batch statistics so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let x = self.value(input);
        let (b, _, t) = x.dims3()?;
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                check_train_batch(b, t)?;
                let (m, v) = ops::channel_stats(x)?;
                (m, v, eps, true)
            }
            BnMode::Eval { mean, var, eps } => (mean.to_vec(), var.to_vec(), eps, false),
        };
        let (out, xhat, inv_std) = ops::batchnorm_apply(
            x,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.rg(&[input, gamma, beta]);
        let id = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: train,
            },
            rg,
        );
        let stats = train.then(|| BatchStats::from_biased(mean, var, b * t));
        Ok((id, stats))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = ops::relu(self.value(input));
        let rg = self.rg(&[input]);
        self.push(v, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(input));
        let rg = self.rg(&[input]);
        self.push(v, Op::Sigmoid(input), rg)
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let v = ops::softmax(self.value(input), axis)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Softmax { input, axis }, rg))
    }

    pub fn max_pool(&mut self, input: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let (v, argmax) = ops::maxpool1d(self.value(input), kernel, stride, padding)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::MaxPool { input, argmax }, rg))
    }

    pub fn avg_pool(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let v = ops::avgpool1d(self.value(input), kernel, stride)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            v,
            Op::AvgPool {
                input,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Average over the time axis: `[B, C, T] -> [B, C]`.
    pub fn mean_time(&mut self, input: NodeId) -> Result<NodeId> {
        let v = ops::mean_last(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::MeanLast(input), rg))
    }

    /// Affine map `x W^T + b` for `x: [B, In]`, `W: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let (bsz, fin) = x.dims2()?;
        let (fout, win) = w.dims2()?;
        if fin != win {
            return Err(Error::shape(format!(
                "linear: input {:?} vs weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let mut out = vec![0.0; bsz * fout];
        for b in 0..bsz {
            let xr = &x.data()[b * fin..(b + 1) * fin];
            for o in 0..fout {
                let wr = &w.data()[o * fin..(o + 1) * fin];
                out[b * fout + o] = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
            }
        }
        if let Some(bias) = bias {
            let bv = self.value(bias);
            if bv.len() != fout {
                return Err(Error::shape(format!(
                    "linear: bias {:?} for {fout} outputs",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(fout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::new(vec![bsz, fout], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// `x[b, c, t] * s[b, c]`.
    pub fn scale_channels(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let s = self.value(scale);
        let (b, c, t) = x.dims3()?;
        if s.shape() != [b, c] {
            return Err(Error::shape(format!(
                "scale_channels: input {:?} vs scale {:?}",
                x.shape(),
                s.shape()
            )));
        }
        let mut out = x.data().to_vec();
        for (row, &sv) in out.chunks_mut(t).zip(s.data()) {
            for v in row {
                *v *= sv;
            }
        }
        let rg = self.rg(&[input, scale]);
        Ok(self.push(Tensor::new(vec![b, c, t], out)?, Op::ScaleChannels { input, scale }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = ops::concat(&vals, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::bmm(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Bmm(a, b), rg))
    }

    pub fn transpose_last2(&mut self, input: NodeId) -> Result<NodeId> {
        let v = ops::transpose_last2(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::TransposeLast2(input), rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(v, Op::Sum(input), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-stochastic
    /// `probs: [B, K]`, with probabilities clamped below at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let p = self.value(probs);
        let (b, k) = p.dims2()?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{k}"
            )));
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p.data()[i * k + l].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagate d`loss`/d(node) back to every differentiable leaf.
    ///
    /// The graph is left untouched, so calling this twice gives identical
    /// results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaf_grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_backward(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let names = self.nodes.iter().map(|n| n.name.clone()).collect();
        Ok(Gradients {
            grads: leaf_grads,
            names,
        })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv1d {
                input,
                kernel,
                geom,
            } => {
                let (gx, gw) = ops::conv1d_backward(val(*input), val(*kernel), g, *geom)?;
                vec![(*input, gx), (*kernel, gw)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (gx, dgamma, dbeta) =
                    ops::batchnorm_backward(g, xhat, inv_std, val(*gamma).data(), *batch_stats)?;
                let c = dgamma.len();
                vec![
                    (*input, gx),
                    (*gamma, Tensor::new(vec![c], dgamma)?),
                    (*beta, Tensor::new(vec![c], dbeta)?),
                ]
            }
            Op::Relu(x) => vec![(*x, val(*x).zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?)],
            Op::Sigmoid(x) => vec![(*x, node.value.zip_map(g, |y, gv| gv * y * (1.0 - y))?)],
            Op::Softmax { input, axis } => {
                vec![(*input, ops::softmax_backward(&node.value, g, *axis)?)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, ops::maxpool1d_backward(val(*input).shape(), argmax, g)?)]
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
            } => vec![(
                *input,
                ops::avgpool1d_backward(val(*input).shape(), *kernel, *stride, g)?,
            )],
            Op::MeanLast(x) => {
                let shape = val(*x).shape();
                let t = shape[2];
                let inv = 1.0 / t as f64;
                let mut gx = Vec::with_capacity(val(*x).len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, t));
                }
                vec![(*x, Tensor::new(shape.to_vec(), gx)?)]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let (b, fin) = x.dims2()?;
                let fout = w.shape()[0];
                let gd = g.data();
                let mut gx = vec![0.0; b * fin];
                let mut gw = vec![0.0; fout * fin];
                for bi in 0..b {
                    let xr = &x.data()[bi * fin..(bi + 1) * fin];
                    let gxr = &mut gx[bi * fin..(bi + 1) * fin];
                    for o in 0..fout {
                        let gv = gd[bi * fout + o];
                        let wr = &w.data()[o * fin..(o + 1) * fin];
                        let gwr = &mut gw[o * fin..(o + 1) * fin];
                        for i in 0..fin {
                            gxr[i] += gv * wr[i];
                            gwr[i] += gv * xr[i];
                        }
                    }
                }
                let mut out = vec![
                    (*input, Tensor::new(vec![b, fin], gx)?),
                    (*weight, Tensor::new(vec![fout, fin], gw)?),
                ];
                if let Some(bias) = bias {
                    let mut gb = vec![0.0; fout];
                    for row in gd.chunks(fout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), gb)?));
                }
                out
            }
            Op::ScaleChannels { input, scale } => {
                let x = val(*input);
                let s = val(*scale);
                let t = x.shape()[2];
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; s.len()];
                for (row, ((gxr, xr), &sv)) in gx
                    .chunks_mut(t)
                    .zip(x.data().chunks(t))
                    .zip(s.data())
                    .enumerate()
                {
                    let mut acc = 0.0;
                    for (gv, xv) in gxr.iter_mut().zip(xr) {
                        acc += *gv * xv;
                        *gv *= sv;
                    }
                    gs[row] = acc;
                }
                vec![
                    (*input, Tensor::new(x.shape().to_vec(), gx)?),
                    (*scale, Tensor::new(s.shape().to_vec(), gs)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs.iter().map(|&i| val(i).shape()[*axis]).collect();
                let parts = ops::concat_backward(g, &sizes, *axis)?;
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Bmm(a, b) => {
                // C = A B  =>  dA = dC B^T, dB = A^T dC
                let bt = ops::transpose_last2(val(*b))?;
                let at = ops::transpose_last2(val(*a))?;
                vec![(*a, ops::bmm(g, &bt)?), (*b, ops::bmm(&at, g)?)]
            }
            Op::TransposeLast2(x) => vec![(*x, ops::transpose_last2(g)?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::CrossEntropy { probs, labels } => {
                let p = val(*probs);
                let (b, k) = p.dims2()?;
                let scale = g.data()[0] / b as f64;
                let mut gp = vec![0.0; b * k];
                for (i, &l) in labels.iter().enumerate() {
                    let pv = p.data()[i * k + l];
                    if pv > PROB_FLOOR {
                        gp[i * k + l] = -scale / pv;
                    }
                }
                vec![(*probs, Tensor::new(vec![b, k], gp)?)]
            }
        })
    }
}
