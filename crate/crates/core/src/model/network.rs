//! Forward pass: low-level features, channel attention, non-local temporal
//! attention, DenseNet backbone and softmax classifier.

use crate::batchnorm::{BatchNormState, BatchStats};
use crate::dsp::epoch::WINDOW_SAMPLES;
use crate::dsp::recording::{AttentionClass, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::model::params::{
    CaParams, ClassifierParams, DenseLayerParams, HfeParams, LfeParams, ModelParams, NtaParams,
    TransitionParams,
};
use crate::ops::{ConvGeometry, Padding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch norm; running averages are reported
    /// back as updates.
    Train,
    /// Running statistics.
    Eval,
}

/// Builds one forward graph, registering parameters by name.
pub struct Builder {
    pub graph: Graph,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<(String, BatchStats)>,
}

impl Builder {
    pub fn new(mode: Mode, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics gathered so far, keyed by batch-norm prefix.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// A data input; never differentiated.
    pub fn input(&mut self, x: Tensor) -> NodeId {
        self.graph.constant(x)
    }

    /// A differentiable input, for checking a block's input gradient.
    pub fn variable(&mut self, x: Tensor) -> NodeId {
        self.graph.variable(x)
    }

    pub fn param(&mut self, name: String, value: &Tensor) -> NodeId {
        if self.track_grads {
            self.graph.parameter(name, value.clone())
        } else {
            self.graph.constant(value.clone())
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.graph.value(id)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        name: String,
        kernel: &Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let len = *self.value(x).shape().last().unwrap_or(&0);
        let width = *kernel.shape().last().unwrap_or(&0);
        let (pad_left, pad_right) = padding.resolve(len, width, stride);
        let w = self.param(name, kernel);
        self.graph.conv1d(
            x,
            w,
            ConvGeometry {
                stride,
                pad_left,
                pad_right,
            },
        )
    }

    pub fn batch_norm(&mut self, x: NodeId, state: &BatchNormState, name: &str) -> Result<NodeId> {
        let gamma = self.param(format!("{name}.gamma"), &state.gamma);
        let beta = self.param(format!("{name}.beta"), &state.beta);
        let mode = match self.mode {
            Mode::Train => BnMode::Train { eps: state.eps },
            Mode::Eval => BnMode::Eval {
                mean: state.running_mean.data(),
                var: state.running_var.data(),
                eps: state.eps,
            },
        };
        let (id, stats) = self.graph.batch_norm(x, gamma, beta, mode)?;
        if let Some(s) = stats {
            self.bn_updates.push((name.to_string(), s));
        }
        Ok(id)
    }

    fn bn_relu(&mut self, x: NodeId, state: &BatchNormState, name: &str) -> Result<NodeId> {
        let y = self.batch_norm(x, state, name)?;
        Ok(self.graph.relu(y))
    }
}

fn expect_shape(b: &Builder, id: NodeId, expected: &[usize], stage: &str) -> Result<()> {
    let got = b.value(id).shape();
    if got != expected {
        return Err(Error::shape(format!("{stage} produced {got:?}, expected {expected:?}")));
    }
    Ok(())
}

/// `[B, 14, T] -> [B, C_f, T]`: same-padded convolution then batch norm.
pub fn lfe(b: &mut Builder, x: NodeId, p: &LfeParams) -> Result<NodeId> {
    let (_, c_in, _) = b.value(x).dims3()?;
    if c_in != p.conv.shape()[1] {
        return Err(Error::shape(format!(
            "input has {c_in} channels but the feature kernel expects {}",
            p.conv.shape()[1]
        )));
    }
    let y = b.conv(x, "lfe.conv".into(), &p.conv, 1, Padding::Same)?;
    b.batch_norm(y, &p.bn, "lfe.bn")
}

/// Channel attention. Returns the rescaled maps and the `[B, C_f]` weights.
pub fn channel_attention(b: &mut Builder, x: NodeId, p: &CaParams) -> Result<(NodeId, NodeId)> {
    let s = b.graph.mean_time(x)?;
    let w1 = b.param("ca.fc1.weight".into(), &p.fc1_weight);
    let b1 = b.param("ca.fc1.bias".into(), &p.fc1_bias);
    let h = b.graph.linear(s, w1, Some(b1))?;
    let h = b.graph.relu(h);
    let w2 = b.param("ca.fc2.weight".into(), &p.fc2_weight);
    let b2 = b.param("ca.fc2.bias".into(), &p.fc2_bias);
    let a = b.graph.linear(h, w2, Some(b2))?;
    let weights = b.graph.sigmoid(a);
    let out = b.graph.scale_channels(x, weights)?;
    Ok((out, weights))
}

/// Nodes produced by the non-local block.
#[derive(Clone, Copy, Debug)]
pub struct NtaNodes {
    /// Residual output `BN(W y) + x`.
    pub out: NodeId,
    /// Row-stochastic `[B, T, T']` attention matrix.
    pub attention: NodeId,
    /// `[B, C_e, T]` attended embedding before the output projection.
    pub attended: NodeId,
}

/// Embedded-Gaussian non-local block over time with max-pooled keys and
/// values. Pooling is skipped for sequences too short to pool.
pub fn nta(b: &mut Builder, x: NodeId, p: &NtaParams) -> Result<NtaNodes> {
    let (_, _, t) = b.value(x).dims3()?;
    let theta = b.conv(x, "nta.theta".into(), &p.theta, 1, Padding::Explicit(0))?;
    let mut phi = b.conv(x, "nta.phi".into(), &p.phi, 1, Padding::Explicit(0))?;
    let mut g = b.conv(x, "nta.g".into(), &p.g, 1, Padding::Explicit(0))?;
    if t >= 2 {
        phi = b.graph.max_pool(phi, 2, 2, 0)?;
        g = b.graph.max_pool(g, 2, 2, 0)?;
    }
    // scores[b, i, j] = theta[:, i] . phi[:, j]
    let theta_t = b.graph.transpose_last2(theta)?;
    let scores = b.graph.bmm(theta_t, phi)?;
    let attention = b.graph.softmax(scores, 2)?;
    // y[b, c, i] = sum_j g[c, j] A[i, j]
    let attention_t = b.graph.transpose_last2(attention)?;
    let attended = b.graph.bmm(g, attention_t)?;
    let z = b.conv(attended, "nta.w_out".into(), &p.w_out, 1, Padding::Explicit(0))?;
    let z = b.batch_norm(z, &p.bn, "nta.bn")?;
    let out = b.graph.add(z, x)?;
    Ok(NtaNodes {
        out,
        attention,
        attended,
    })
}

fn dense_layer(b: &mut Builder, x: NodeId, p: &DenseLayerParams, name: &str) -> Result<NodeId> {
    let h = b.bn_relu(x, &p.bn1, &format!("{name}.bn1"))?;
    let h = b.conv(h, format!("{name}.conv1"), &p.conv1, 1, Padding::Explicit(0))?;
    let h = b.bn_relu(h, &p.bn2, &format!("{name}.bn2"))?;
    let h = b.conv(h, format!("{name}.conv2"), &p.conv2, 1, Padding::Explicit(1))?;
    b.graph.concat(&[x, h], 1)
}

fn transition(b: &mut Builder, x: NodeId, p: &TransitionParams, name: &str) -> Result<NodeId> {
    let h = b.bn_relu(x, &p.bn, &format!("{name}.bn"))?;
    let h = b.conv(h, format!("{name}.conv"), &p.conv, 1, Padding::Explicit(0))?;
    b.graph.avg_pool(h, 2, 2)
}

/// `[B, C_f, T] -> [B, D_h]` 1-D DenseNet with global average pooling.
pub fn hfe(b: &mut Builder, x: NodeId, p: &HfeParams) -> Result<NodeId> {
    let mut h = b.conv(x, "hfe.stem.conv".into(), &p.stem_conv, 2, Padding::Explicit(3))?;
    h = b.bn_relu(h, &p.stem_bn, "hfe.stem.bn")?;
    h = b.graph.max_pool(h, 3, 2, 1)?;
    for (bi, block) in p.blocks.iter().enumerate() {
        for (li, layer) in block.iter().enumerate() {
            h = dense_layer(b, h, layer, &format!("hfe.block{bi}.layer{li}"))?;
        }
        if let Some(t) = p.transitions.get(bi) {
            h = transition(b, h, t, &format!("hfe.transition{bi}"))?;
        }
    }
    h = b.bn_relu(h, &p.final_bn, "hfe.final_bn")?;
    b.graph.mean_time(h)
}

/// Affine map to class scores, then softmax. Returns `(logits, probs)`.
pub fn classify(b: &mut Builder, x: NodeId, p: &ClassifierParams) -> Result<(NodeId, NodeId)> {
    let w = b.param("head.weight".into(), &p.weight);
    let bias = b.param("head.bias".into(), &p.bias);
    let logits = b.graph.linear(x, w, Some(bias))?;
    let probs = b.graph.softmax(logits, 1)?;
    Ok((logits, probs))
}

/// Node ids of every intermediate in one forward graph.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub input: NodeId,
    pub lfe: NodeId,
    pub ca_weights: NodeId,
    pub ca: NodeId,
    pub nta: NtaNodes,
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

pub struct ForwardPass {
    pub builder: Builder,
    pub nodes: ModelNodes,
}

impl ForwardPass {
    pub fn graph(&self) -> &Graph {
        &self.builder.graph
    }

    pub fn probs(&self) -> &Tensor {
        self.builder.value(self.nodes.probs)
    }
}

/// Build the full graph for a `[B, 14, 128]` batch.
pub fn build_forward(params: &ModelParams, x: Tensor, mode: Mode, track_grads: bool) -> Result<ForwardPass> {
    let (batch, c, t) = x.dims3()?;
    if c != NUM_CHANNELS || t != WINDOW_SAMPLES {
        return Err(Error::shape(format!(
            "expected input [B, {NUM_CHANNELS}, {WINDOW_SAMPLES}], got {:?}",
            x.shape()
        )));
    }
    let cfg = &params.config;
    let cf = cfg.lfe_filters;
    let mut b = Builder::new(mode, track_grads);
    let input = b.input(x);
    let lfe_out = lfe(&mut b, input, &params.lfe)?;
    expect_shape(&b, lfe_out, &[batch, cf, t], "low-level features")?;
    let (ca, ca_weights) = channel_attention(&mut b, lfe_out, &params.ca)?;
    expect_shape(&b, ca, &[batch, cf, t], "channel attention")?;
    let nta_nodes = nta(&mut b, ca, &params.nta)?;
    expect_shape(&b, nta_nodes.out, &[batch, cf, t], "temporal attention")?;
    let features = hfe(&mut b, nta_nodes.out, &params.hfe)?;
    expect_shape(&b, features, &[batch, cfg.feature_width()], "backbone")?;
    let (logits, probs) = classify(&mut b, features, &params.head)?;
    expect_shape(&b, probs, &[batch, AttentionClass::COUNT], "classifier")?;
    Ok(ForwardPass {
        builder: b,
        nodes: ModelNodes {
            input,
            lfe: lfe_out,
            ca_weights,
            ca,
            nta: nta_nodes,
            features,
            logits,
            probs,
        },
    })
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub lfe: Tensor,
    pub ca_weights: Tensor,
    pub ca: Tensor,
    pub nta_attention: Tensor,
    pub nta: Tensor,
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Gradient-free forward pass returning every intermediate.
pub fn model_forward(params: &ModelParams, x: &Tensor, mode: Mode) -> Result<ActivationCache> {
    let pass = build_forward(params, x.clone(), mode, false)?;
    let v = |id| pass.builder.value(id).clone();
    let n = pass.nodes;
    Ok(ActivationCache {
        lfe: v(n.lfe),
        ca_weights: v(n.ca_weights),
        ca: v(n.ca),
        nta_attention: v(n.nta.attention),
        nta: v(n.nta.out),
        features: v(n.features),
        logits: v(n.logits),
        probs: v(n.probs),
    })
}

/// Class probabilities `[B, 5]` in evaluation mode.
pub fn predict_proba(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let pass = build_forward(params, x.clone(), Mode::Eval, false)?;
    Ok(pass.probs().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_params, ModelConfig};

    fn batch(n: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[n, 14, 128], |i| ((i as f64 + seed as f64) * 0.731).sin())
    }

    #[test]
    fn shapes_through_the_tiny_model() {
        let p = init_params(0, &ModelConfig::tiny()).unwrap();
        let c = model_forward(&p, &batch(3, 1), Mode::Train).unwrap();
        assert_eq!(c.lfe.shape(), &[3, 8, 128]);
        assert_eq!(c.ca_weights.shape(), &[3, 8]);
        assert_eq!(c.nta_attention.shape(), &[3, 128, 64]);
        assert_eq!(c.features.shape(), &[3, 32]);
        assert_eq!(c.probs.shape(), &[3, 5]);
        for row in c.probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_config_feature_width() {
        let p = init_params(0, &ModelConfig::default()).unwrap();
        let c = model_forward(&p, &batch(2, 0), Mode::Train).unwrap();
        assert_eq!(c.features.shape(), &[2, 1024]);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let p = init_params(0, &ModelConfig::tiny()).unwrap();
        let x = Tensor::zeros(&[1, 13, 128]);
        assert!(model_forward(&p, &x, Mode::Eval).is_err());
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let p = init_params(5, &ModelConfig::tiny()).unwrap();
        let x = batch(4, 2);
        let all = predict_proba(&p, &x).unwrap();
        let one = predict_proba(&p, &x.slice_outer(2).unwrap().reshape(&[1, 14, 128]).unwrap()).unwrap();
        let diff = all.data()[10..15]
            .iter()
            .zip(one.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn train_mode_reports_every_batch_norm() {
        let p = init_params(0, &ModelConfig::tiny()).unwrap();
        let mut pass = build_forward(&p, batch(2, 0), Mode::Train, false).unwrap();
        let updates = pass.builder.take_bn_updates();
        let bn_count = p
            .named()
            .iter()
            .filter(|(n, _, _)| n.ends_with("running_mean"))
            .count();
        assert_eq!(updates.len(), bn_count);
        let mut q = p.clone();
        q.apply_bn_updates(&updates).unwrap();
        assert_ne!(q.lfe.bn.running_mean, p.lfe.bn.running_mean);
    }
}
