//! Fine-tuning objectives: empirical cross-entropy plus one of the weight
//! penalties (L2, L2-SP), the frozen-extractor baseline, or the behavioral
//! penalty on feature maps with attention (DELTA).
//!
//! Weight penalties use the `½‖·‖²` convention. The behavioral term is the
//! attention-weighted sum of squared feature-map distances, summed over the
//! samples of the batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTable;
use crate::error::{Error, Result};
use crate::model::{ConvNetModel, FeatureMapSet, Trainable};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegularizerKind {
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "L2SP")]
    L2Sp,
    #[serde(rename = "L2FE")]
    L2Fe,
    #[serde(rename = "DELTA")]
    Delta,
    #[serde(rename = "DELTA_NO_ATT")]
    DeltaNoAtt,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 5] = [
        RegularizerKind::L2,
        RegularizerKind::L2Sp,
        RegularizerKind::L2Fe,
        RegularizerKind::Delta,
        RegularizerKind::DeltaNoAtt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::L2 => "L2",
            RegularizerKind::L2Sp => "L2SP",
            RegularizerKind::L2Fe => "L2FE",
            RegularizerKind::Delta => "DELTA",
            RegularizerKind::DeltaNoAtt => "DELTA_NO_ATT",
        }
    }

    /// Whether only the classifier head is optimized.
    pub fn freezes_extractor(self) -> bool {
        self == RegularizerKind::L2Fe
    }

    /// Whether the objective needs the source snapshot `ω*`.
    pub fn needs_reference(self) -> bool {
        matches!(
            self,
            RegularizerKind::L2Sp | RegularizerKind::Delta | RegularizerKind::DeltaNoAtt
        )
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace(['-', '²'], "_");
        let norm = norm.trim_matches('_');
        Ok(match norm {
            "L2" => RegularizerKind::L2,
            "L2SP" | "L2_SP" => RegularizerKind::L2Sp,
            "L2FE" | "L2_FE" => RegularizerKind::L2Fe,
            "DELTA" => RegularizerKind::Delta,
            "DELTA_NO_ATT" | "DELTA_NOATT" => RegularizerKind::DeltaNoAtt,
            _ => return Err(Error::config(format!("unknown regularizer kind {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub alpha: f64,
    pub beta: f64,
    /// Divide each feature-map distance by the map's area.
    #[serde(default)]
    pub normalize_by_area: bool,
}

impl RegularizerConfig {
    pub fn new(kind: RegularizerKind, alpha: f64, beta: f64) -> Self {
        Self {
            kind,
            alpha,
            beta,
            normalize_by_area: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Where the behavioral term gets its filter weights.
#[derive(Clone, Copy, Debug)]
pub enum FilterWeights<'a> {
    Table(&'a AttentionTable),
    Uniform,
}

/// Scalar nodes of one objective evaluation.
pub struct Objective {
    pub total: Var,
    pub empirical: Var,
    pub logits: Var,
}

fn check_binding(model: &ConvNetModel, params: &[Var]) -> Result<()> {
    if params.len() != model.params().len() {
        return Err(Error::shape(format!(
            "{} parameter handles for {} parameters",
            params.len(),
            model.params().len()
        )));
    }
    Ok(())
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn half_sq_norm(g: &mut Graph, v: Var) -> Result<Var> {
    let sq = g.mul(v, v)?;
    let s = g.sum(sq)?;
    g.scale(s, 0.5)
}

fn accumulate(g: &mut Graph, acc: Var, term: Var) -> Result<Var> {
    g.add(acc, term)
}

pub mod graph {
    //! Penalties recorded on a [`Graph`] against parameter handles from
    //! [`ConvNetModel::bind`].

    use super::*;

    /// `½ Σ ‖ω_k‖²` over every parameter.
    pub fn l2_penalty(g: &mut Graph, model: &ConvNetModel, params: &[Var]) -> Result<Var> {
        check_binding(model, params)?;
        let mut acc = zero(g);
        for &p in params {
            let t = half_sq_norm(g, p)?;
            acc = accumulate(g, acc, t)?;
        }
        Ok(acc)
    }

    /// `½ Σ ‖ω_k - ω*_k‖²` over the shared parameters.
    pub fn l2_sp_shared(g: &mut Graph, model: &ConvNetModel, params: &[Var]) -> Result<Var> {
        check_binding(model, params)?;
        if !model.has_reference() {
            return Err(Error::contract("L2-SP needs the source snapshot ω*"));
        }
        let mut acc = zero(g);
        for (p, &v) in model.params().iter().zip(params) {
            if let Some(r) = &p.reference {
                let rv = g.constant(r.clone());
                let d = g.sub(v, rv)?;
                let t = half_sq_norm(g, d)?;
                acc = accumulate(g, acc, t)?;
            }
        }
        Ok(acc)
    }

    /// `½ Σ ‖ω_h‖²` over the head parameters.
    pub fn private_penalty(g: &mut Graph, model: &ConvNetModel, params: &[Var]) -> Result<Var> {
        check_binding(model, params)?;
        let mut acc = zero(g);
        for i in model.head_ids() {
            let t = half_sq_norm(g, params[i])?;
            acc = accumulate(g, acc, t)?;
        }
        Ok(acc)
    }

    /// `Σ_i Σ_taps Σ_j W_j(x_i) ‖FM_j(ω, x_i) - FM_j(ω*, x_i)‖²` for the taps
    /// recorded in `taps`; `source` holds the matching `ω*` maps.
    pub fn behavioral_penalty(
        g: &mut Graph,
        taps: &[(usize, Var)],
        source: &FeatureMapSet,
        sample_ids: &[usize],
        weights: FilterWeights<'_>,
        normalize_by_area: bool,
    ) -> Result<Var> {
        let src_layers = source.tap_layers();
        let mut acc = zero(g);
        for &(layer, act) in taps {
            let k = src_layers
                .iter()
                .position(|&l| l == layer)
                .ok_or_else(|| Error::Lookup(format!("no source maps for tap layer {layer}")))?;
            let src = source.activation(k);
            let shape = g.value(act).shape().to_vec();
            if src.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "tap {layer}: maps {shape:?} vs source {:?}",
                    src.shape()
                )));
            }
            let (b, n, area) = (shape[0], shape[1], shape[2] * shape[3]);
            if sample_ids.len() != b {
                return Err(Error::shape(format!(
                    "{} sample ids for a batch of {b}",
                    sample_ids.len()
                )));
            }
            let scale = if normalize_by_area { 1.0 / area as f64 } else { 1.0 };
            let mut wdata = Vec::with_capacity(b * n * area);
            for &id in sample_ids {
                let row: Vec<f64> = match weights {
                    FilterWeights::Table(t) => {
                        let w = t.weights(id, layer)?;
                        if w.len() != n {
                            return Err(Error::Lookup(format!(
                                "attention at layer {layer} has {} weights for {n} filters",
                                w.len()
                            )));
                        }
                        w.to_vec()
                    }
                    FilterWeights::Uniform => vec![1.0 / n as f64; n],
                };
                for w in row {
                    wdata.extend(std::iter::repeat_n(w * scale, area));
                }
            }
            let srcv = g.constant(src.clone());
            let wv = g.constant(Tensor::new(shape, wdata)?);
            let d = g.sub(act, srcv)?;
            let wd = g.mul(d, wv)?;
            let sq = g.mul(wd, d)?;
            let t = g.sum(sq)?;
            acc = accumulate(g, acc, t)?;
        }
        Ok(acc)
    }

    /// Empirical loss (batch-mean cross-entropy) plus the penalty selected
    /// by `cfg.kind`. `sample_ids` index the attention table rows of the
    /// batch; they are only read for `DELTA`.
    #[allow(clippy::too_many_arguments)]
    pub fn total_objective(
        g: &mut Graph,
        model: &ConvNetModel,
        params: &[Var],
        input: Var,
        labels: &[usize],
        sample_ids: &[usize],
        cfg: &RegularizerConfig,
        attention: Option<&AttentionTable>,
    ) -> Result<Objective> {
        cfg.validate()?;
        let fwd = model.forward_graph(g, input, params)?;
        let empirical = g.softmax_cross_entropy(fwd.logits, labels)?;
        let penalty = match cfg.kind {
            RegularizerKind::L2Fe => None,
            RegularizerKind::L2 => {
                let p = l2_penalty(g, model, params)?;
                Some(g.scale(p, cfg.alpha)?)
            }
            RegularizerKind::L2Sp => {
                let s = l2_sp_shared(g, model, params)?;
                let h = private_penalty(g, model, params)?;
                let s = g.scale(s, cfg.alpha)?;
                let h = g.scale(h, cfg.beta)?;
                Some(g.add(s, h)?)
            }
            RegularizerKind::Delta | RegularizerKind::DeltaNoAtt => {
                let weights = match (cfg.kind, attention) {
                    (RegularizerKind::DeltaNoAtt, _) => FilterWeights::Uniform,
                    (_, Some(t)) => FilterWeights::Table(t),
                    (_, None) => return Err(Error::contract("DELTA needs an attention table")),
                };
                let source = model.source_feature_maps(g.value(input))?;
                let b = behavioral_penalty(g, &fwd.taps, &source, sample_ids, weights, cfg.normalize_by_area)?;
                let h = private_penalty(g, model, params)?;
                let b = g.scale(b, cfg.alpha)?;
                let h = g.scale(h, cfg.beta)?;
                Some(g.add(b, h)?)
            }
        };
        let total = match penalty {
            Some(p) => g.add(empirical, p)?,
            None => empirical,
        };
        Ok(Objective {
            total,
            empirical,
            logits: fwd.logits,
        })
    }
}

fn evaluate(model: &ConvNetModel, f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, Trainable::None);
    let v = f(&mut g, &params)?;
    g.value(v).item()
}

/// `½ Σ ‖ω_k‖²` over every parameter.
pub fn l2_penalty(model: &ConvNetModel) -> Result<f64> {
    evaluate(model, |g, p| graph::l2_penalty(g, model, p))
}

/// `½ Σ ‖ω_shared - ω*‖² + ½ Σ ‖ω_head‖²`.
pub fn l2_sp_penalty(model: &ConvNetModel) -> Result<f64> {
    evaluate(model, |g, p| {
        let s = graph::l2_sp_shared(g, model, p)?;
        let h = graph::private_penalty(g, model, p)?;
        g.add(s, h)
    })
}

/// `½ Σ ‖ω_head‖²`.
pub fn private_penalty(model: &ConvNetModel) -> Result<f64> {
    evaluate(model, |g, p| graph::private_penalty(g, model, p))
}

/// Behavioral term for a prepared `(B, C, H, W)` batch whose rows are
/// samples `sample_ids` of the attention table.
pub fn behavioral_penalty(
    model: &ConvNetModel,
    batch: &Tensor,
    sample_ids: &[usize],
    weights: FilterWeights<'_>,
    normalize_by_area: bool,
) -> Result<f64> {
    evaluate(model, |g, p| {
        let x = g.constant(batch.clone());
        let fwd = model.forward_graph(g, x, p)?;
        let source = model.source_feature_maps(batch)?;
        graph::behavioral_penalty(g, &fwd.taps, &source, sample_ids, weights, normalize_by_area)
    })
}

/// Value of the full objective for one batch.
pub fn total_objective(
    model: &ConvNetModel,
    batch: &Tensor,
    labels: &[usize],
    sample_ids: &[usize],
    cfg: &RegularizerConfig,
    attention: Option<&AttentionTable>,
) -> Result<f64> {
    evaluate(model, |g, p| {
        let x = g.constant(batch.clone());
        graph::total_objective(g, model, p, x, labels, sample_ids, cfg, attention).map(|o| o.total)
    })
}
