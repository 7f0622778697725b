//! Model configuration and the named parameter set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNormState, BatchStats};
use crate::dsp::recording::{AttentionClass, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of low-level feature maps (C_f).
    pub lfe_filters: usize,
    /// Width of the low-level convolution kernel.
    pub lfe_kernel: usize,
    /// Hidden units of the channel-attention MLP.
    pub ca_hidden: usize,
    /// Dense-block growth rate.
    pub growth: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck: usize,
    /// Layers per dense block.
    pub block_layers: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    /// 32 low-level filters in front of a 1-D DenseNet-121.
    fn default() -> Self {
        Self {
            lfe_filters: 32,
            lfe_kernel: 7,
            ca_hidden: 64,
            growth: 32,
            bottleneck: 4,
            block_layers: vec![6, 12, 24, 16],
            bn_eps: crate::batchnorm::DEFAULT_EPS,
            bn_momentum: crate::batchnorm::DEFAULT_MOMENTUM,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and desk-scale experiments:
    /// 8 low-level filters, growth 8, two layers per dense block.
    pub fn tiny() -> Self {
        Self {
            lfe_filters: 8,
            growth: 8,
            block_layers: vec![2, 2, 2, 2],
            ..Self::default()
        }
    }

    /// Embedding width of the non-local block, half the feature maps.
    pub fn nta_embed(&self) -> usize {
        self.lfe_filters / 2
    }

    pub fn stem_features(&self) -> usize {
        2 * self.growth
    }

    /// Channel widths entering each dense block, and the backbone output
    /// width.
    pub fn block_widths(&self) -> (Vec<usize>, usize) {
        let mut c = self.stem_features();
        let mut inputs = Vec::new();
        for (i, &n) in self.block_layers.iter().enumerate() {
            inputs.push(c);
            c += n * self.growth;
            if i + 1 < self.block_layers.len() {
                c /= 2;
            }
        }
        (inputs, c)
    }

    /// Width of the backbone feature vector.
    pub fn feature_width(&self) -> usize {
        self.block_widths().1
    }

    pub fn validate(&self) -> Result<()> {
        if self.lfe_filters < 2 || !self.lfe_filters.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "lfe_filters must be even and at least 2, got {}",
                self.lfe_filters
            )));
        }
        if self.lfe_kernel == 0 || self.ca_hidden == 0 || self.growth == 0 || self.bottleneck == 0 {
            return Err(Error::invalid("kernel, hidden, growth and bottleneck sizes must be positive"));
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(Error::invalid("every dense block needs at least one layer"));
        }
        Ok(())
    }
}

/// Whether a stored tensor is optimized or is a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Trainable,
    Buffer,
}

/// Walk named tensors in a fixed order.
pub trait NamedTensors {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl NamedTensors for BatchNormState {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        f(join(prefix, "gamma"), &self.gamma, TensorKind::Trainable);
        f(join(prefix, "beta"), &self.beta, TensorKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, TensorKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        f(join(prefix, "gamma"), &mut self.gamma, TensorKind::Trainable);
        f(join(prefix, "beta"), &mut self.beta, TensorKind::Trainable);
        f(join(prefix, "running_mean"), &mut self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, TensorKind::Buffer);
    }
}

fn bn(channels: usize, cfg: &ModelConfig) -> BatchNormState {
    let mut s = BatchNormState::new(channels);
    s.eps = cfg.bn_eps;
    s.momentum = cfg.bn_momentum;
    s
}

/// Low-level feature extraction: one convolution and batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LfeParams {
    /// `[C_f, 14, K]`
    pub conv: Tensor,
    pub bn: BatchNormState,
}

/// Channel attention MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct CaParams {
    /// `[hidden, C_f]`
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    /// `[C_f, hidden]`
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// Non-local temporal attention: width-1 projections θ, φ, g into C_e
/// channels and the output projection back to C_f.
#[derive(Clone, Debug, PartialEq)]
pub struct NtaParams {
    pub theta: Tensor,
    pub phi: Tensor,
    pub g: Tensor,
    /// `[C_f, C_e, 1]`
    pub w_out: Tensor,
    pub bn: BatchNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerParams {
    pub bn1: BatchNormState,
    /// 1x1 bottleneck, `[bottleneck * growth, C_in, 1]`
    pub conv1: Tensor,
    pub bn2: BatchNormState,
    /// `[growth, bottleneck * growth, 3]`
    pub conv2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionParams {
    pub bn: BatchNormState,
    /// `[C / 2, C, 1]`
    pub conv: Tensor,
}

/// 1-D DenseNet backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct HfeParams {
    /// `[2 * growth, C_f, 7]`
    pub stem_conv: Tensor,
    pub stem_bn: BatchNormState,
    pub blocks: Vec<Vec<DenseLayerParams>>,
    pub transitions: Vec<TransitionParams>,
    pub final_bn: BatchNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `[5, D_h]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Every parameter and running statistic of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub lfe: LfeParams,
    pub ca: CaParams,
    pub nta: NtaParams,
    pub hfe: HfeParams,
    pub head: ClassifierParams,
}

impl NamedTensors for LfeParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        f(join(p, "conv"), &self.conv, TensorKind::Trainable);
        self.bn.visit(&join(p, "bn"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        f(join(p, "conv"), &mut self.conv, TensorKind::Trainable);
        self.bn.visit_mut(&join(p, "bn"), f);
    }
}

impl NamedTensors for CaParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        f(join(p, "fc1.weight"), &self.fc1_weight, TensorKind::Trainable);
        f(join(p, "fc1.bias"), &self.fc1_bias, TensorKind::Trainable);
        f(join(p, "fc2.weight"), &self.fc2_weight, TensorKind::Trainable);
        f(join(p, "fc2.bias"), &self.fc2_bias, TensorKind::Trainable);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        f(join(p, "fc1.weight"), &mut self.fc1_weight, TensorKind::Trainable);
        f(join(p, "fc1.bias"), &mut self.fc1_bias, TensorKind::Trainable);
        f(join(p, "fc2.weight"), &mut self.fc2_weight, TensorKind::Trainable);
        f(join(p, "fc2.bias"), &mut self.fc2_bias, TensorKind::Trainable);
    }
}

impl NamedTensors for NtaParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        f(join(p, "theta"), &self.theta, TensorKind::Trainable);
        f(join(p, "phi"), &self.phi, TensorKind::Trainable);
        f(join(p, "g"), &self.g, TensorKind::Trainable);
        f(join(p, "w_out"), &self.w_out, TensorKind::Trainable);
        self.bn.visit(&join(p, "bn"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        f(join(p, "theta"), &mut self.theta, TensorKind::Trainable);
        f(join(p, "phi"), &mut self.phi, TensorKind::Trainable);
        f(join(p, "g"), &mut self.g, TensorKind::Trainable);
        f(join(p, "w_out"), &mut self.w_out, TensorKind::Trainable);
        self.bn.visit_mut(&join(p, "bn"), f);
    }
}

impl NamedTensors for DenseLayerParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        self.bn1.visit(&join(p, "bn1"), f);
        f(join(p, "conv1"), &self.conv1, TensorKind::Trainable);
        self.bn2.visit(&join(p, "bn2"), f);
        f(join(p, "conv2"), &self.conv2, TensorKind::Trainable);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        self.bn1.visit_mut(&join(p, "bn1"), f);
        f(join(p, "conv1"), &mut self.conv1, TensorKind::Trainable);
        self.bn2.visit_mut(&join(p, "bn2"), f);
        f(join(p, "conv2"), &mut self.conv2, TensorKind::Trainable);
    }
}

impl NamedTensors for TransitionParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        self.bn.visit(&join(p, "bn"), f);
        f(join(p, "conv"), &self.conv, TensorKind::Trainable);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        self.bn.visit_mut(&join(p, "bn"), f);
        f(join(p, "conv"), &mut self.conv, TensorKind::Trainable);
    }
}

impl NamedTensors for HfeParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        f(join(p, "stem.conv"), &self.stem_conv, TensorKind::Trainable);
        self.stem_bn.visit(&join(p, "stem.bn"), f);
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.iter().enumerate() {
                layer.visit(&join(p, &format!("block{bi}.layer{li}")), f);
            }
            if let Some(t) = self.transitions.get(bi) {
                t.visit(&join(p, &format!("transition{bi}")), f);
            }
        }
        self.final_bn.visit(&join(p, "final_bn"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        f(join(p, "stem.conv"), &mut self.stem_conv, TensorKind::Trainable);
        self.stem_bn.visit_mut(&join(p, "stem.bn"), f);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.iter_mut().enumerate() {
                layer.visit_mut(&join(p, &format!("block{bi}.layer{li}")), f);
            }
            if let Some(t) = self.transitions.get_mut(bi) {
                t.visit_mut(&join(p, &format!("transition{bi}")), f);
            }
        }
        self.final_bn.visit_mut(&join(p, "final_bn"), f);
    }
}

impl NamedTensors for ClassifierParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        f(join(p, "weight"), &self.weight, TensorKind::Trainable);
        f(join(p, "bias"), &self.bias, TensorKind::Trainable);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        f(join(p, "weight"), &mut self.weight, TensorKind::Trainable);
        f(join(p, "bias"), &mut self.bias, TensorKind::Trainable);
    }
}

impl NamedTensors for ModelParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorKind)) {
        self.lfe.visit(&join(p, "lfe"), f);
        self.ca.visit(&join(p, "ca"), f);
        self.nta.visit(&join(p, "nta"), f);
        self.hfe.visit(&join(p, "hfe"), f);
        self.head.visit(&join(p, "head"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorKind)) {
        self.lfe.visit_mut(&join(p, "lfe"), f);
        self.ca.visit_mut(&join(p, "ca"), f);
        self.nta.visit_mut(&join(p, "nta"), f);
        self.hfe.visit_mut(&join(p, "hfe"), f);
        self.head.visit_mut(&join(p, "head"), f);
    }
}

impl ModelParams {
    /// All-zero weights with batch-norm defaults (gamma 1, beta 0, running
    /// mean 0, running variance 1).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cf = config.lfe_filters;
        let ce = config.nta_embed();
        let g = config.growth;
        let bw = config.bottleneck * g;
        let (inputs, width) = config.block_widths();
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, (&n, &cin)) in config.block_layers.iter().zip(&inputs).enumerate() {
            let layers = (0..n)
                .map(|li| {
                    let c = cin + li * g;
                    DenseLayerParams {
                        bn1: bn(c, config),
                        conv1: Tensor::zeros(&[bw, c, 1]),
                        bn2: bn(bw, config),
                        conv2: Tensor::zeros(&[g, bw, 3]),
                    }
                })
                .collect();
            blocks.push(layers);
            if bi + 1 < config.block_layers.len() {
                let c = cin + n * g;
                transitions.push(TransitionParams {
                    bn: bn(c, config),
                    conv: Tensor::zeros(&[c / 2, c, 1]),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            lfe: LfeParams {
                conv: Tensor::zeros(&[cf, NUM_CHANNELS, config.lfe_kernel]),
                bn: bn(cf, config),
            },
            ca: CaParams {
                fc1_weight: Tensor::zeros(&[config.ca_hidden, cf]),
                fc1_bias: Tensor::zeros(&[config.ca_hidden]),
                fc2_weight: Tensor::zeros(&[cf, config.ca_hidden]),
                fc2_bias: Tensor::zeros(&[cf]),
            },
            nta: NtaParams {
                theta: Tensor::zeros(&[ce, cf, 1]),
                phi: Tensor::zeros(&[ce, cf, 1]),
                g: Tensor::zeros(&[ce, cf, 1]),
                w_out: Tensor::zeros(&[cf, ce, 1]),
                bn: bn(cf, config),
            },
            hfe: HfeParams {
                stem_conv: Tensor::zeros(&[config.stem_features(), cf, 7]),
                stem_bn: bn(config.stem_features(), config),
                blocks,
                transitions,
                final_bn: bn(width, config),
            },
            head: ClassifierParams {
                weight: Tensor::zeros(&[AttentionClass::COUNT, width]),
                bias: Tensor::zeros(&[AttentionClass::COUNT]),
            },
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor, TensorKind)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, k| out.push((n, t, k)));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }

    /// Names of trainable tensors in visiting order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _, k| {
            if k == TensorKind::Trainable {
                out.push(n)
            }
        });
        out
    }

    pub fn trainable_count(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, t, k| {
            if k == TensorKind::Trainable {
                total += t.len()
            }
        });
        total
    }

    /// Fold training-mode batch statistics into the matching running
    /// averages. Each update is keyed by its batch-norm prefix.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let state = self.batch_norm_mut(prefix).ok_or_else(|| {
                Error::invalid(format!("no batch-norm layer named '{prefix}'"))
            })?;
            state.update_running(stats);
        }
        Ok(())
    }

    fn batch_norm_mut(&mut self, prefix: &str) -> Option<&mut BatchNormState> {
        let parts: Vec<&str> = prefix.split('.').collect();
        match parts.as_slice() {
            ["lfe", "bn"] => Some(&mut self.lfe.bn),
            ["nta", "bn"] => Some(&mut self.nta.bn),
            ["hfe", "stem", "bn"] => Some(&mut self.hfe.stem_bn),
            ["hfe", "final_bn"] => Some(&mut self.hfe.final_bn),
            ["hfe", block, layer, which] if block.starts_with("block") => {
                let bi: usize = block.strip_prefix("block")?.parse().ok()?;
                let li: usize = layer.strip_prefix("layer")?.parse().ok()?;
                let l = self.hfe.blocks.get_mut(bi)?.get_mut(li)?;
                match *which {
                    "bn1" => Some(&mut l.bn1),
                    "bn2" => Some(&mut l.bn2),
                    _ => None,
                }
            }
            ["hfe", tr, "bn"] if tr.starts_with("transition") => {
                let ti: usize = tr.strip_prefix("transition")?.parse().ok()?;
                Some(&mut self.hfe.transitions.get_mut(ti)?.bn)
            }
            _ => None,
        }
    }
}

/// Fan-in-scaled (He) uniform initialization of every weight of rank ≥ 2,
/// bounded by `sqrt(6 / fan_in)`. Biases start at zero; batch norms at
/// gamma 1, beta 0.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut("", &mut |_, t, kind| {
        if kind == TensorKind::Trainable && t.ndim() >= 2 {
            let fan_in: usize = t.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densenet121_feature_width() {
        let cfg = ModelConfig::default();
        let (inputs, width) = cfg.block_widths();
        assert_eq!(inputs, vec![64, 128, 256, 512]);
        assert_eq!(width, 1024);
    }

    #[test]
    fn densenet121_has_121_weight_layers() {
        let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
        let mut convs = 0;
        p.hfe.visit("", &mut |n, t, _| {
            if t.ndim() == 3 && !n.starts_with("x") {
                convs += 1;
            }
        });
        // stem + 2 per dense layer + transitions; the classifier makes 121
        assert_eq!(convs + 1, 121);
    }

    #[test]
    fn dense_layer_input_widths_grow_by_growth() {
        let cfg = ModelConfig::default();
        let p = ModelParams::zeros(&cfg).unwrap();
        for (block, &cin) in p.hfe.blocks.iter().zip(&cfg.block_widths().0) {
            for (l, layer) in block.iter().enumerate() {
                assert_eq!(layer.conv1.shape()[1], cin + l * 32);
            }
        }
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny();
        assert_eq!(init_params(3, &cfg).unwrap(), init_params(3, &cfg).unwrap());
        assert_ne!(init_params(3, &cfg).unwrap(), init_params(4, &cfg).unwrap());
    }

    #[test]
    fn init_std_matches_fan_in_scale() {
        let p = init_params(1, &ModelConfig::default()).unwrap();
        // head weight: 5 x 1024
        let w = p.head.weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0 / 1024f64).sqrt();
        assert!((std / expected - 1.0).abs() < 0.1, "{std} vs {expected}");
        assert!(p.ca.fc1_bias.data().iter().all(|&v| v == 0.0));
        assert!(p.lfe.bn.gamma.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn names_are_unique_and_bn_prefixes_resolve() {
        let mut p = ModelParams::zeros(&ModelConfig::tiny()).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        for n in names.iter().filter(|n| n.ends_with(".running_mean")) {
            let prefix = n.trim_end_matches(".running_mean");
            assert!(p.batch_norm_mut(prefix).is_some(), "{prefix}");
        }
    }
}
