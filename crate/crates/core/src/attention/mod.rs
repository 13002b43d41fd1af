//! Supervised attention over filters.
//!
//! A head is trained on the frozen source feature extractor; each filter of
//! a tapped layer is then removed in turn and the increase of that model's
//! per-sample loss is turned into weights with a softmax across the filters
//! of the layer.

mod table;

pub use table::AttentionTable;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::sha256;
use crate::data::{eval_view, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{checkpoint_hash, ConvNetModel, LayerSpec, TapInfo};
use crate::tensor::{ops, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeHeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FeHeadConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Deterministic views of every sample, stacked in chunks of `chunk`.
fn view_batches(dataset: &Dataset, view: &AugmentSpec, chunk: usize) -> Result<Vec<Tensor>> {
    let images = dataset
        .samples()
        .iter()
        .map(|s| eval_view(&s.image, view))
        .collect::<Result<Vec<_>>>()?;
    images.chunks(chunk.max(1)).map(Dataset::stack).collect()
}

fn head_layer(model: &ConvNetModel) -> Result<(usize, usize, usize)> {
    let last = model.spec().layers.len() - 1;
    let (w, b) = model
        .layer_param_ids(last)
        .ok_or_else(|| Error::contract("model has no classifier parameters"))?;
    if !model.params()[w].head {
        return Err(Error::contract(
            "train_fe_head needs a model whose head was replaced for the target task",
        ));
    }
    Ok((last, w, b))
}

/// Trains only the classifier head with plain minibatch SGD on
/// cross-entropy over the frozen features of `dataset` (evaluation views).
/// Every other parameter is returned bitwise unchanged.
pub fn train_fe_head(
    model: &ConvNetModel,
    dataset: &Dataset,
    view: &AugmentSpec,
    cfg: &FeHeadConfig,
) -> Result<ConvNetModel> {
    let (last, wi, bi) = head_layer(model)?;
    let mut out = model.clone();
    if cfg.epochs == 0 || dataset.is_empty() {
        return Ok(out);
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::config(format!(
            "head has {} outputs, dataset has {} classes",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let mut rows = Vec::new();
    for batch in view_batches(dataset, view, 64)? {
        let outs = model.layer_outputs(&batch)?;
        rows.extend_from_slice(outs[last - 1].data());
    }
    let dim = rows.len() / dataset.len();
    let labels = dataset.labels();
    let mut w = model.params()[wi].value.clone();
    let mut b = model.params()[bi].value.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                x.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![chunk.len(), dim], x)?);
            let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
            let logits = g.linear(xv, wv, bv)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            g.backward(loss)?;
            for (t, v) in [(&mut w, wv), (&mut b, bv)] {
                let grad = g.grad(v).expect("head is differentiable");
                t.data_mut().iter_mut().zip(grad).for_each(|(p, d)| *p -= cfg.lr * d);
                t.check_finite("head parameter")?;
            }
        }
    }
    out.params_mut()[wi].value = w;
    out.params_mut()[bi].value = b;
    Ok(out)
}

fn conv_channels(model: &ConvNetModel, layer: usize) -> Result<usize> {
    match model.spec().layers.get(layer) {
        Some(LayerSpec::Conv { out_channels, .. }) => Ok(*out_channels),
        _ => Err(Error::Index(format!("layer {layer} is not a conv layer"))),
    }
}

/// Ablation scans for one sample, reusing its clean activations.
///
/// Zeroing filter `j` (weights and bias) makes channel `j` of that conv's
/// output exactly `+0.0`, so the scan zeroes the cached channel and resumes
/// the forward pass at the next layer. The result is bitwise identical to
/// a full forward through the ablated model.
pub struct AblationScanner<'a> {
    model: &'a ConvNetModel,
    outputs: Vec<Tensor>,
    label: usize,
    baseline: f64,
}

impl<'a> AblationScanner<'a> {
    /// `image` is a prepared `(C, H, W)` view.
    pub fn new(model: &'a ConvNetModel, image: &Tensor, label: usize) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let outputs = model.layer_outputs(&image.reshape(&shape)?)?;
        let baseline = ops::cross_entropy_per_sample(outputs.last().expect("layers"), &[label])?[0];
        Ok(Self {
            model,
            outputs,
            label,
            baseline,
        })
    }

    pub fn baseline_loss(&self) -> f64 {
        self.baseline
    }

    fn ablated_losses(&self, layer: usize, filters: &[usize]) -> Result<Vec<f64>> {
        let n = conv_channels(self.model, layer)?;
        if let Some(&j) = filters.iter().find(|&&j| j >= n) {
            return Err(Error::Index(format!("filter {j} outside {n} filters of layer {layer}")));
        }
        if filters.is_empty() {
            return Ok(Vec::new());
        }
        let clean = &self.outputs[layer];
        let per = clean.numel();
        let area = per / n;
        let mut data = Vec::with_capacity(per * filters.len());
        for &j in filters {
            let start = data.len();
            data.extend_from_slice(clean.data());
            data[start + j * area..start + (j + 1) * area].fill(0.0);
        }
        let mut shape = clean.shape().to_vec();
        shape[0] = filters.len();
        let logits = self.model.forward_from(layer + 1, &Tensor::new(shape, data)?)?;
        ops::cross_entropy_per_sample(&logits, &vec![self.label; filters.len()])
    }

    /// Loss with filter `j` of conv `layer` removed.
    pub fn ablate(&self, layer: usize, j: usize) -> Result<f64> {
        Ok(self.ablated_losses(layer, &[j])?[0])
    }

    /// `softmax_j(L(ablate j) - L(baseline))` across the filters of `layer`.
    pub fn weights(&self, layer: usize) -> Result<Vec<f64>> {
        let n = conv_channels(self.model, layer)?;
        let filters: Vec<usize> = (0..n).collect();
        let gaps: Vec<f64> = self
            .ablated_losses(layer, &filters)?
            .into_iter()
            .map(|l| l - self.baseline)
            .collect();
        Ok(ops::softmax(&gaps))
    }
}

/// Per-sample loss of `fe_model` with filter `j` of conv layer `tap` zeroed.
pub fn ablate_filter_loss(fe_model: &ConvNetModel, image: &Tensor, label: usize, tap: usize, j: usize) -> Result<f64> {
    AblationScanner::new(fe_model, image, label)?.ablate(tap, j)
}

/// Attention weights of one sample at one tapped conv layer.
pub fn attention_weights(fe_model: &ConvNetModel, image: &Tensor, label: usize, tap: usize) -> Result<Vec<f64>> {
    AblationScanner::new(fe_model, image, label)?.weights(tap)
}

fn cache_key(dataset: &Dataset, view: &AugmentSpec) -> Result<[u8; 32]> {
    let mut bytes = dataset.hash().to_vec();
    bytes.extend_from_slice(serde_json::to_string(view)?.as_bytes());
    Ok(sha256(&bytes))
}

/// Attention rows for every sample of `dataset` (evaluation views) at the
/// given conv layers.
pub fn build_attention_table(
    fe_model: &ConvNetModel,
    dataset: &Dataset,
    view: &AugmentSpec,
    taps: &[usize],
) -> Result<AttentionTable> {
    let infos = taps
        .iter()
        .map(|&layer| conv_channels(fe_model, layer).map(|channels| TapInfo { layer, channels }))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let image = eval_view(&s.image, view)?;
        let scanner = AblationScanner::new(fe_model, &image, s.label)?;
        let mut row = Vec::new();
        for t in &infos {
            row.extend(scanner.weights(t.layer)?);
        }
        rows.push(row);
    }
    AttentionTable::new(infos, cache_key(dataset, view)?, checkpoint_hash(fe_model)?, rows)
}

/// Loads the table cached at `path` when its dataset key, checkpoint hash
/// and taps match; otherwise builds and writes it. Returns whether the
/// table was rebuilt.
pub fn load_or_build_attention(
    fe_model: &ConvNetModel,
    dataset: &Dataset,
    view: &AugmentSpec,
    taps: &[usize],
    path: impl AsRef<Path>,
) -> Result<(AttentionTable, bool)> {
    let path = path.as_ref();
    if let Ok(cached) = AttentionTable::load(path) {
        let tap_layers: Vec<usize> = cached.taps().iter().map(|t| t.layer).collect();
        if cached.dataset_hash() == cache_key(dataset, view)?
            && cached.checkpoint_hash() == checkpoint_hash(fe_model)?
            && tap_layers == taps
            && cached.len() == dataset.len()
        {
            return Ok((cached, false));
        }
    }
    let table = build_attention_table(fe_model, dataset, view, taps)?;
    table.save(path)?;
    Ok((table, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, Split};
    use crate::model::ModelSpec;
    use rand::Rng;

    fn fe_model() -> ConvNetModel {
        let spec = ModelSpec::reference([3, 8, 8], [3, 4, 5], 4);
        ConvNetModel::build(spec, 11).unwrap().replace_head(3, 12).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0))
    }

    fn naive(model: &ConvNetModel, image: &Tensor, label: usize, layer: usize, j: usize) -> f64 {
        let mut m = model.clone();
        m.zero_filter(layer, j).unwrap();
        let logits = m.forward(&image.reshape(&[1, 3, 8, 8]).unwrap()).unwrap();
        ops::cross_entropy_per_sample(&logits, &[label]).unwrap()[0]
    }

    #[test]
    fn cached_ablation_matches_rebuilt_model_bitwise() {
        let m = fe_model();
        for s in 0..20 {
            let x = image(s);
            let label = s as usize % 3;
            let scan = AblationScanner::new(&m, &x, label).unwrap();
            for layer in m.conv_layers() {
                for j in 0..conv_channels(&m, layer).unwrap() {
                    let fast = scan.ablate(layer, j).unwrap();
                    assert_eq!(fast.to_bits(), naive(&m, &x, label, layer, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn out_of_range_filter_is_index_error() {
        let m = fe_model();
        assert!(matches!(
            ablate_filter_loss(&m, &image(0), 0, 3, 4),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            ablate_filter_loss(&m, &image(0), 0, 1, 0),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn weights_form_a_distribution() {
        let m = fe_model();
        let w = attention_weights(&m, &image(3), 1, 6).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_build_is_pure_and_cached() {
        let m = fe_model();
        let samples = (0..4)
            .map(|i| Sample {
                image: image(i),
                label: i as usize % 3,
            })
            .collect();
        let ds = Dataset::new(samples, 3, Split::Train).unwrap();
        let view = AugmentSpec::new(8);
        let before = m.parameter_checksum();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("att.datt");
        let (a, rebuilt) = load_or_build_attention(&m, &ds, &view, &[3, 6], &path).unwrap();
        assert!(rebuilt);
        let (b, rebuilt) = load_or_build_attention(&m, &ds, &view, &[3, 6], &path).unwrap();
        assert!(!rebuilt);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(m.parameter_checksum(), before);
        let other = ds.subset(&[1, 0, 2, 3]).unwrap();
        let (_, rebuilt) = load_or_build_attention(&m, &other, &view, &[3, 6], &path).unwrap();
        assert!(rebuilt);
    }
}
