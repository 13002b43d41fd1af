//! Small configurable CNNs with a replaceable classifier head, a frozen
//! source snapshot for every shared parameter, and feature taps exposing
//! per-filter post-ReLU activations.

mod checkpoint;
mod spec;

pub use checkpoint::{checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use spec::{LayerSpec, ModelSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, Tensor, Var};

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: usize,
    pub value: Tensor,
    /// Part of the classifier head replaced at transfer time (`ω \ ω*`).
    pub head: bool,
    /// Source value `ω*` of this parameter; `None` for head parameters and
    /// for models that were never transferred.
    pub reference: Option<Tensor>,
}

/// Which parameters enter a graph as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    None,
}

/// Layered network plus its parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetModel {
    spec: ModelSpec,
    params: Vec<Param>,
    /// For each layer, the indices of its weight and bias in `params`.
    layer_params: Vec<Option<(usize, usize)>>,
}

/// A tapped layer: conv layer index and its filter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapInfo {
    pub layer: usize,
    pub channels: usize,
}

/// Post-ReLU activations of each tapped conv layer for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    taps: Vec<(usize, Tensor)>,
}

impl FeatureMapSet {
    pub fn tap_layers(&self) -> Vec<usize> {
        self.taps.iter().map(|(l, _)| *l).collect()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Activation tensor `(B, N, h, w)` of the `k`-th tap.
    pub fn activation(&self, k: usize) -> &Tensor {
        &self.taps[k].1
    }

    fn position(&self, layer: usize) -> Result<usize> {
        self.taps
            .iter()
            .position(|(l, _)| *l == layer)
            .ok_or_else(|| Error::Lookup(format!("layer {layer} is not tapped")))
    }

    /// `FM_j` of `sample` at tap `layer`: filter `j`'s map flattened row-major.
    pub fn get(&self, layer: usize, j: usize, sample: usize) -> Result<&[f64]> {
        let act = &self.taps[self.position(layer)?].1;
        let s = act.shape();
        if sample >= s[0] || j >= s[1] {
            return Err(Error::Index(format!(
                "feature map ({sample}, {j}) outside batch {} x filters {}",
                s[0], s[1]
            )));
        }
        let len = s[2] * s[3];
        let off = (sample * s[1] + j) * len;
        Ok(&act.data()[off..off + len])
    }
}

/// Result of a recorded forward pass.
pub struct GraphForward {
    pub logits: Var,
    /// `(tap layer, post-ReLU activation)` per tapped layer.
    pub taps: Vec<(usize, Var)>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl ConvNetModel {
    /// Builds a model with He-normal weights (std `sqrt(2 / fan_in)`) and
    /// zero biases. Identical seeds give bitwise-identical parameters.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = spec.layers.len() - 1;
        let mut params = Vec::new();
        let mut layer_params = vec![None; spec.layers.len()];
        for (i, layer) in spec.layers.iter().enumerate() {
            let in_shape = &shapes[i];
            let (w, b) = match *layer {
                LayerSpec::Conv {
                    out_channels, kernel, ..
                } => {
                    let c_in = in_shape[0];
                    let fan_in = c_in * kernel * kernel;
                    (
                        he_normal(&[out_channels, c_in, kernel, kernel], fan_in, &mut rng),
                        Tensor::zeros(&[out_channels]),
                    )
                }
                LayerSpec::Linear { out_features } => {
                    let fan_in: usize = in_shape.iter().product();
                    (
                        he_normal(&[out_features, fan_in], fan_in, &mut rng),
                        Tensor::zeros(&[out_features]),
                    )
                }
                _ => continue,
            };
            layer_params[i] = Some((params.len(), params.len() + 1));
            for (suffix, value) in [("weight", w), ("bias", b)] {
                params.push(Param {
                    name: format!("layer{i}.{suffix}"),
                    layer: i,
                    value,
                    head: i == last,
                    reference: None,
                });
            }
        }
        Ok(Self {
            spec,
            params,
            layer_params,
        })
    }

    /// Reassembles a model from stored parameters, checking them against the `ModelSpec`.
    pub fn from_parts(spec: ModelSpec, params: Vec<Param>) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut layer_params = vec![None; spec.layers.len()];
        let mut k = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            let expect_w = match *layer {
                LayerSpec::Conv {
                    out_channels, kernel, ..
                } => vec![out_channels, shapes[i][0], kernel, kernel],
                LayerSpec::Linear { out_features } => {
                    vec![out_features, shapes[i].iter().product()]
                }
                _ => continue,
            };
            let out = expect_w[0];
            for (off, expect) in [(0, expect_w), (1, vec![out])] {
                let p = params
                    .get(k + off)
                    .ok_or_else(|| Error::Validation(format!("missing parameters for layer {i}")))?;
                if p.layer != i || p.value.shape() != expect.as_slice() {
                    return Err(Error::Validation(format!(
                        "parameter {} has shape {:?}, layer {i} needs {expect:?}",
                        p.name,
                        p.value.shape()
                    )));
                }
                if let Some(r) = &p.reference {
                    if r.shape() != p.value.shape() {
                        return Err(Error::Validation(format!(
                            "reference of {} has shape {:?}",
                            p.name,
                            r.shape()
                        )));
                    }
                }
            }
            layer_params[i] = Some((k, k + 1));
            k += 2;
        }
        if k != params.len() {
            return Err(Error::Validation(format!(
                "{} parameters supplied, spec uses {k}",
                params.len()
            )));
        }
        Ok(Self {
            spec,
            params,
            layer_params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        match self.spec.layers.last() {
            Some(LayerSpec::Linear { out_features }) => *out_features,
            _ => unreachable!("validated spec ends in a linear layer"),
        }
    }

    /// Whether a source snapshot `ω*` is attached.
    pub fn has_reference(&self) -> bool {
        self.params.iter().any(|p| p.reference.is_some())
    }

    pub fn head_ids(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].head).collect()
    }

    /// Ids of parameters with a counterpart in `ω*`.
    pub fn shared_ids(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].reference.is_some())
            .collect()
    }

    pub fn layer_param_ids(&self, layer: usize) -> Option<(usize, usize)> {
        self.layer_params.get(layer).copied().flatten()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn taps(&self) -> Vec<TapInfo> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match *l {
                LayerSpec::Conv {
                    out_channels,
                    tap: true,
                    ..
                } => Some(TapInfo {
                    layer: i,
                    channels: out_channels,
                }),
                _ => None,
            })
            .collect()
    }

    /// Replaces the tap set with the given conv layers.
    pub fn set_taps(&mut self, layers: &[usize]) -> Result<()> {
        let mut spec = self.spec.clone();
        for (i, l) in spec.layers.iter_mut().enumerate() {
            if let LayerSpec::Conv { tap, .. } = l {
                *tap = layers.contains(&i);
            }
        }
        for &l in layers {
            if !matches!(spec.layers.get(l), Some(LayerSpec::Conv { .. })) {
                return Err(Error::config(format!("tap layer {l} is not a conv layer")));
            }
        }
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// Swaps the final linear layer for a freshly initialized `k_target`-way
    /// head. Every other parameter is kept bitwise and snapshotted as `ω*`.
    pub fn replace_head(&self, k_target: usize, seed: u64) -> Result<Self> {
        if k_target < 2 {
            return Err(Error::config(format!(
                "target head needs at least 2 classes, got {k_target}"
            )));
        }
        let mut spec = self.spec.clone();
        let last = spec.layers.len() - 1;
        spec.layers[last] = LayerSpec::Linear { out_features: k_target };
        let shapes = spec.validate()?;
        let fan_in: usize = shapes[last].iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if p.layer == last {
                continue;
            }
            params.push(Param {
                head: false,
                reference: Some(p.reference.clone().unwrap_or_else(|| p.value.clone())),
                ..p.clone()
            });
        }
        for (suffix, value) in [
            ("weight", he_normal(&[k_target, fan_in], fan_in, &mut rng)),
            ("bias", Tensor::zeros(&[k_target])),
        ] {
            params.push(Param {
                name: format!("layer{last}.{suffix}"),
                layer: last,
                value,
                head: true,
                reference: None,
            });
        }
        Self::from_parts(spec, params)
    }

    /// A copy whose shared parameters are reset to `ω*` (head kept).
    pub fn reset_to_reference(&self) -> Self {
        let mut m = self.clone();
        for p in &mut m.params {
            if let Some(r) = &p.reference {
                p.value = r.clone();
            }
        }
        m
    }

    /// Zeroes filter `j` of conv layer `layer`: its weight slice and bias entry.
    pub fn zero_filter(&mut self, layer: usize, j: usize) -> Result<()> {
        let (wi, bi) = match (self.spec.layers.get(layer), self.layer_param_ids(layer)) {
            (Some(LayerSpec::Conv { .. }), Some(ids)) => ids,
            _ => return Err(Error::Index(format!("layer {layer} is not a conv layer"))),
        };
        let c_out = self.params[bi].value.numel();
        if j >= c_out {
            return Err(Error::Index(format!("filter {j} outside {c_out} filters")));
        }
        let per = self.params[wi].value.numel() / c_out;
        self.params[wi].value.data_mut()[j * per..(j + 1) * per].fill(0.0);
        self.params[bi].value.data_mut()[j] = 0.0;
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.spec.input[0] {
            return Err(Error::shape(format!(
                "model expects (B, {}, H, W) input, got {s:?}",
                self.spec.input[0]
            )));
        }
        Ok(())
    }

    /// Applies layer `i` to a value using the given parameter values.
    fn apply_layer(&self, i: usize, x: &Tensor, params: &[&Tensor]) -> Result<Tensor> {
        let ids = self.layer_params[i];
        match self.spec.layers[i] {
            LayerSpec::Conv { stride, padding, .. } => {
                let (w, b) = ids.expect("conv has parameters");
                ops::conv2d_impl(x, params[w], params[b], stride, padding, false).map(|r| r.0)
            }
            LayerSpec::Relu => Ok(ops::relu(x)),
            LayerSpec::MaxPool { size } => ops::max_pool2d(x, size),
            LayerSpec::GlobalAvgPool => ops::global_avg_pool(x),
            LayerSpec::Linear { .. } => {
                let (w, b) = ids.expect("linear has parameters");
                ops::linear(x, params[w], params[b])
            }
        }
    }

    fn current_values(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.value).collect()
    }

    /// Output of every layer for `batch`: entry `i` is the output of layer `i`.
    pub fn layer_outputs(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(batch)?;
        let values = self.current_values();
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.spec.layers.len());
        for i in 0..self.spec.layers.len() {
            let y = self.apply_layer(i, outs.last().unwrap_or(batch), &values)?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Runs layers `start..` on `x`, which must be the input of layer `start`.
    pub fn forward_from(&self, start: usize, x: &Tensor) -> Result<Tensor> {
        let values = self.current_values();
        let mut cur: Option<Tensor> = None;
        for i in start..self.spec.layers.len() {
            cur = Some(self.apply_layer(i, cur.as_ref().unwrap_or(x), &values)?);
        }
        cur.ok_or_else(|| Error::Index(format!("start layer {start} is past the last layer")))
    }

    /// Plain forward pass to logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let out = self.forward_from(0, batch)?;
        out.check_finite("logits")?;
        Ok(out)
    }

    /// Logits plus the post-ReLU activation of each tapped layer.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, FeatureMapSet)> {
        let outs = self.layer_outputs(batch)?;
        let taps = self
            .taps()
            .iter()
            .map(|t| (t.layer, outs[t.layer + 1].clone()))
            .collect();
        let logits = outs.into_iter().last().expect("non-empty spec");
        logits.check_finite("logits")?;
        Ok((logits, FeatureMapSet { taps }))
    }

    /// Tapped feature maps of the source network `ω*`, evaluated without
    /// gradients and stopping after the deepest tap.
    pub fn source_feature_maps(&self, batch: &Tensor) -> Result<FeatureMapSet> {
        self.check_input(batch)?;
        let taps = self.taps();
        let Some(deepest) = taps.iter().map(|t| t.layer + 1).max() else {
            return Ok(FeatureMapSet { taps: Vec::new() });
        };
        let mut values = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if p.layer <= deepest {
                let r = p
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::contract(format!("no source snapshot for {}", p.name)))?;
                values.push(r);
            } else {
                values.push(&p.value);
            }
        }
        let mut outs: Vec<Tensor> = Vec::with_capacity(deepest + 1);
        for i in 0..=deepest {
            let y = self.apply_layer(i, outs.last().unwrap_or(batch), &values)?;
            outs.push(y);
        }
        Ok(FeatureMapSet {
            taps: taps.iter().map(|t| (t.layer, outs[t.layer + 1].clone())).collect(),
        })
    }

    /// Inserts parameters into `g` as leaves; parameters outside `trainable`
    /// become constants.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let grad = match trainable {
                    Trainable::All => true,
                    Trainable::HeadOnly => p.head,
                    Trainable::None => false,
                };
                if grad {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Recorded forward pass using bound parameter handles from [`Self::bind`].
    pub fn forward_graph(&self, g: &mut Graph, input: Var, params: &[Var]) -> Result<GraphForward> {
        self.check_input(g.value(input))?;
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let tapped: Vec<usize> = self.taps().iter().map(|t| t.layer).collect();
        let mut taps = Vec::with_capacity(tapped.len());
        let mut x = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let (w, b) = self.layer_params[i].expect("conv has parameters");
                    g.conv2d(x, params[w], params[b], stride, padding)?
                }
                LayerSpec::Relu => g.relu(x)?,
                LayerSpec::MaxPool { size } => g.max_pool2d(x, size)?,
                LayerSpec::GlobalAvgPool => g.global_avg_pool(x)?,
                LayerSpec::Linear { .. } => {
                    let (w, b) = self.layer_params[i].expect("linear has parameters");
                    g.linear(x, params[w], params[b])?
                }
            };
            if i > 0 && tapped.contains(&(i - 1)) {
                taps.push((i - 1, x));
            }
        }
        Ok(GraphForward { logits: x, taps })
    }

    /// Fingerprint of every parameter value, for detecting mutation.
    pub fn parameter_checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_spec(classes: usize) -> ModelSpec {
        ModelSpec {
            input: [3, 16, 16],
            layers: vec![
                LayerSpec::conv(8, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(6, 3, 1, 0).tapped(),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { out_features: classes },
            ],
        }
    }

    fn batch(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, 16, 16], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identical_seeds_build_identical_models() {
        let a = ConvNetModel::build(small_spec(4), 7).unwrap();
        let b = ConvNetModel::build(small_spec(4), 7).unwrap();
        let c = ConvNetModel::build(small_spec(4), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn shape_chain_yields_batch_by_classes() {
        let spec = ModelSpec {
            input: [3, 16, 16],
            layers: vec![
                LayerSpec::conv(8, 3, 1, 0),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Linear { out_features: 5 },
            ],
        };
        let m = ConvNetModel::build(spec, 1).unwrap();
        assert_eq!(m.forward(&batch(3, 1)).unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn illegal_chain_is_a_config_error() {
        let spec = ModelSpec {
            input: [3, 4, 4],
            layers: vec![LayerSpec::conv(2, 5, 1, 0), LayerSpec::Linear { out_features: 2 }],
        };
        assert!(matches!(ConvNetModel::build(spec, 0), Err(Error::Config(_))));
        let no_head = ModelSpec {
            input: [3, 4, 4],
            layers: vec![LayerSpec::conv(2, 3, 1, 0)],
        };
        assert!(matches!(ConvNetModel::build(no_head, 0), Err(Error::Config(_))));
    }

    #[test]
    fn he_init_variance() {
        let spec = ModelSpec {
            input: [32, 8, 8],
            layers: vec![
                LayerSpec::conv(64, 3, 1, 1),
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { out_features: 2 },
            ],
        };
        let m = ConvNetModel::build(spec, 42).unwrap();
        let w = m.params()[0].value.data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.2, "var {var} vs {want}");
    }

    #[test]
    fn replace_head_keeps_shared_parameters() {
        let src = ConvNetModel::build(small_spec(4), 3).unwrap();
        let tgt = src.replace_head(3, 9).unwrap();
        assert_eq!(tgt.num_classes(), 3);
        let heads = tgt.head_ids();
        let shared = tgt.shared_ids();
        for (i, p) in tgt.params().iter().enumerate() {
            if p.head {
                assert!(p.reference.is_none());
            } else {
                assert!(p.value.bitwise_eq(&src.params()[i].value));
                assert!(p.reference.as_ref().unwrap().bitwise_eq(&p.value));
            }
        }
        let all: Vec<usize> = (0..tgt.params().len()).collect();
        let diff: Vec<usize> = all.into_iter().filter(|i| !shared.contains(i)).collect();
        assert_eq!(heads, diff);
        let logits = tgt.forward(&batch(2, 4)).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
        assert!(matches!(src.replace_head(1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn taps_expose_per_filter_maps() {
        let spec = ModelSpec {
            input: [3, 7, 7],
            layers: vec![
                LayerSpec::conv(8, 3, 1, 0).tapped(),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { out_features: 2 },
            ],
        };
        let m = ConvNetModel::build(spec, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 3, 7, 7], |_| rng.random_range(-1.0..1.0));
        let (logits, fms) = m.forward_with_taps(&x).unwrap();
        assert!(logits.bitwise_eq(&m.forward(&x).unwrap()));
        let act = fms.activation(0);
        assert_eq!(act.shape(), &[2, 8, 5, 5]);
        for s in 0..2 {
            for j in 0..8 {
                let fm = fms.get(0, j, s).unwrap();
                assert_eq!(fm.len(), 25);
                for (k, v) in fm.iter().enumerate() {
                    let (y, xx) = (k / 5, k % 5);
                    assert_eq!(*v, act.data()[((s * 8 + j) * 5 + y) * 5 + xx]);
                }
            }
        }
        let (_, zero) = m.forward_with_taps(&Tensor::zeros(&[1, 3, 7, 7])).unwrap();
        assert!(zero.activation(0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_forward_matches_value_forward_bitwise() {
        let m = ConvNetModel::build(small_spec(4), 5).unwrap();
        let x = batch(2, 6);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = m.bind(&mut g, Trainable::All);
        let out = m.forward_graph(&mut g, xv, &pv).unwrap();
        let (logits, fms) = m.forward_with_taps(&x).unwrap();
        assert!(g.value(out.logits).bitwise_eq(&logits));
        assert_eq!(out.taps.len(), 1);
        assert!(g.value(out.taps[0].1).bitwise_eq(fms.activation(0)));
    }

    #[test]
    fn source_maps_need_a_snapshot() {
        let m = ConvNetModel::build(small_spec(4), 5).unwrap();
        assert!(matches!(m.source_feature_maps(&batch(1, 0)), Err(Error::Contract(_))));
        let t = m.replace_head(3, 0).unwrap();
        let src = t.source_feature_maps(&batch(1, 0)).unwrap();
        let (_, own) = t.forward_with_taps(&batch(1, 0)).unwrap();
        assert_eq!(src, own);
    }

    #[test]
    fn zero_filter_checks_range() {
        let mut m = ConvNetModel::build(small_spec(4), 5).unwrap();
        assert!(matches!(m.zero_filter(3, 6), Err(Error::Index(_))));
        assert!(matches!(m.zero_filter(1, 0), Err(Error::Index(_))));
        m.zero_filter(3, 2).unwrap();
        let (w, b) = m.layer_param_ids(3).unwrap();
        assert!(m.params()[w].value.data()[2 * 72..3 * 72].iter().all(|&v| v == 0.0));
        assert_eq!(m.params()[b].value.data()[2], 0.0);
    }
}
