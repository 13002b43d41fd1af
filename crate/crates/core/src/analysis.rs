//! Diagnostics: activation-map normalization, per-filter distance from the
//! starting point, and multi-seed method comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_view, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::ConvNetModel;
use crate::regularizers::RegularizerKind;
use crate::tensor::{ops, Graph, Tensor};

/// `(a - min) / (max - min)` over the whole map; a constant map becomes
/// all zeros.
pub fn normalize_activation_map(map: &Tensor) -> Result<Tensor> {
    if map.ndim() != 2 {
        return Err(Error::shape(format!(
            "activation map must be 2-D, got {:?}",
            map.shape()
        )));
    }
    map.check_finite("activation map")?;
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        map.data().iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; map.numel()]
    };
    Tensor::new(map.shape().to_vec(), data)
}

/// Rows of a 2-D map as CSV lines.
pub fn grid_to_csv(map: &Tensor) -> Result<String> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape(format!("grid must be 2-D, got {:?}", map.shape())));
    };
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = map.data()[y * w..(y + 1) * w].iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDistance {
    pub layer: usize,
    pub filter: usize,
    pub group: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Per filter, in layer then filter order.
    pub filters: Vec<FilterDistance>,
    /// Group label to its distances sorted descending; groups keep the
    /// order of their first conv layer.
    pub groups: Vec<(String, Vec<f64>)>,
}

impl DistanceReport {
    pub fn all_sorted(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.filters.iter().map(|f| f.distance).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        d
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,filter,group,distance\n");
        for f in &self.filters {
            let _ = writeln!(out, "{},{},{},{}", f.layer, f.filter, f.group, f.distance);
        }
        out
    }
}

/// Default stage labels: `conv1`, `conv2`, ... in layer order.
pub fn default_grouping(model: &ConvNetModel) -> BTreeMap<usize, String> {
    model
        .conv_layers()
        .into_iter()
        .enumerate()
        .map(|(k, l)| (l, format!("conv{}", k + 1)))
        .collect()
}

/// Euclidean distance between the flattened weights of every conv filter
/// before and after training (bias excluded). Conv layers missing from
/// `grouping` get their default label.
pub fn param_distance_report(
    before: &ConvNetModel,
    after: &ConvNetModel,
    grouping: &BTreeMap<usize, String>,
) -> Result<DistanceReport> {
    let convs = before.conv_layers();
    if convs != after.conv_layers() {
        return Err(Error::contract("models have different conv layouts"));
    }
    let defaults = default_grouping(before);
    let mut filters = Vec::new();
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for layer in convs {
        let (wa, _) = before.layer_param_ids(layer).expect("conv has parameters");
        let (wb, _) = after.layer_param_ids(layer).expect("conv has parameters");
        let (a, b) = (&before.params()[wa].value, &after.params()[wb].value);
        if a.shape() != b.shape() {
            return Err(Error::contract(format!(
                "layer {layer}: weight shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let group = grouping
            .get(&layer)
            .or_else(|| defaults.get(&layer))
            .cloned()
            .expect("conv layers have default labels");
        let n = a.shape()[0];
        let per = a.numel() / n;
        for j in 0..n {
            let d = a.data()[j * per..(j + 1) * per]
                .iter()
                .zip(&b.data()[j * per..(j + 1) * per])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            filters.push(FilterDistance {
                layer,
                filter: j,
                group: group.clone(),
                distance: d,
            });
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, v)) => v.push(d),
                None => groups.push((group.clone(), vec![d])),
            }
        }
    }
    for (_, v) in &mut groups {
        v.sort_by(|a, b| b.total_cmp(a));
    }
    Ok(DistanceReport { filters, groups })
}

/// Fraction of ranks at which `a`'s descending-sorted distances exceed
/// `b`'s. Both reports must cover the same filters.
pub fn larger_distance_fraction(a: &DistanceReport, b: &DistanceReport) -> Result<f64> {
    let (x, y) = (a.all_sorted(), b.all_sorted());
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::contract(format!(
            "distance reports cover {} and {} filters",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter().zip(&y).filter(|(p, q)| p > q).count() as f64 / x.len() as f64)
}

/// Fraction of filters whose own distance is larger in `a` than in `b`.
pub fn paired_larger_fraction(a: &DistanceReport, b: &DistanceReport) -> Result<f64> {
    if a.filters.len() != b.filters.len() || a.filters.is_empty() {
        return Err(Error::contract("distance reports cover different filters"));
    }
    let wins = a
        .filters
        .iter()
        .zip(&b.filters)
        .filter(|(p, q)| p.distance > q.distance)
        .count();
    Ok(wins as f64 / a.filters.len() as f64)
}

/// Mean and sample (n - 1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final test accuracies of one method over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub kind: RegularizerKind,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kind: RegularizerKind,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// DELTA vs L2-SP larger-distance fraction, when both were run.
    pub delta_vs_l2sp_distance_fraction: Option<f64>,
}

pub const COMPARISON_HEADER: &str = "method,mean_acc,std_acc,seeds";

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.kind, r.mean_acc, r.std_acc, r.seeds);
        }
        out
    }

    /// Parses [`Comparison::to_csv`] output; the distance fraction is not
    /// part of the CSV and comes back as `None`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(COMPARISON_HEADER) {
            return Err(Error::Validation(format!(
                "comparison CSV must start with `{COMPARISON_HEADER}`"
            )));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let bad = || Error::Validation(format!("comparison row `{line}`"));
                let f: Vec<&str> = line.split(',').collect();
                let [kind, mean, std, seeds] = f.as_slice() else {
                    return Err(bad());
                };
                Ok(ComparisonRow {
                    kind: kind.parse().map_err(|_| bad())?,
                    mean_acc: mean.parse().map_err(|_| bad())?,
                    std_acc: std.parse().map_err(|_| bad())?,
                    seeds: seeds.parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows,
            delta_vs_l2sp_distance_fraction: None,
        })
    }

    pub fn row(&self, kind: RegularizerKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// `{kind: {mean_acc, std_acc}}`.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry {
            mean_acc: f64,
            std_acc: f64,
        }
        let map: BTreeMap<&str, Entry> = self
            .rows
            .iter()
            .map(|r| {
                (
                    r.kind.as_str(),
                    Entry {
                        mean_acc: r.mean_acc,
                        std_acc: r.std_acc,
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)? + "\n")
    }
}

/// One table row per method; all methods must share the dataset and seeds.
pub fn compare_methods(results: &[MethodResult], distance_fraction: Option<f64>) -> Result<Comparison> {
    if let Some(first) = results.first() {
        for r in results {
            if r.dataset_hash != first.dataset_hash {
                return Err(Error::Validation(format!(
                    "{} was run on dataset {}, {} on {}",
                    r.kind, r.dataset_hash, first.kind, first.dataset_hash
                )));
            }
            if r.seeds != first.seeds || r.accuracies.len() != r.seeds.len() {
                return Err(Error::Validation(format!("{} does not share the seed list", r.kind)));
            }
        }
    }
    let rows = results
        .iter()
        .map(|r| {
            let (mean_acc, std_acc) = mean_std(&r.accuracies);
            ComparisonRow {
                kind: r.kind,
                mean_acc,
                std_acc,
                seeds: r.accuracies.len(),
            }
        })
        .collect();
    Ok(Comparison {
        rows,
        delta_vs_l2sp_distance_fraction: distance_fraction,
    })
}

/// Test accuracy of softmax regression on flattened evaluation views,
/// trained with minibatch SGD; a reference point for how much of a task
/// is solvable without learned features.
pub fn pixel_linear_baseline(
    train: &Dataset,
    test: &Dataset,
    view: &AugmentSpec,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let flat = |ds: &Dataset| -> Result<(Vec<f64>, usize)> {
        let mut rows = Vec::new();
        for s in ds.samples() {
            rows.extend(eval_view(&s.image, view)?.into_data());
        }
        let dim = rows.len() / ds.len().max(1);
        Ok((rows, dim))
    };
    let (x, dim) = flat(train)?;
    let k = train.num_classes();
    let labels = train.labels();
    let mut w = Tensor::zeros(&[k, dim]);
    let mut b = Tensor::zeros(&[k]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(16) {
            let mut rows = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                rows.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![chunk.len(), dim], rows)?);
            let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
            let logits = g.linear(xv, wv, bv)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            g.backward(loss)?;
            for (t, v) in [(&mut w, wv), (&mut b, bv)] {
                let grad = g.grad(v).expect("differentiable");
                t.data_mut().iter_mut().zip(grad).for_each(|(p, d)| *p -= lr * d);
            }
        }
    }
    let (tx, _) = flat(test)?;
    let logits = ops::linear(&Tensor::new(vec![test.len(), dim], tx)?, &w, &b)?;
    let hits = logits
        .data()
        .chunks(k)
        .zip(test.samples())
        .filter(|(row, s)| ops::argmax(row) == s.label)
        .count();
    Ok(hits as f64 / test.len().max(1) as f64)
}
