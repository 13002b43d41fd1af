use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTable;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ConvNetModel;

use super::{evaluate, fine_tune, TrainConfig};

/// Validation accuracy of every candidate on every fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best_alpha: f64,
    pub scores: Vec<(f64, Vec<f64>)>,
}

/// Splits sample positions into `k` folds with every class spread as evenly
/// as possible. Each class is shuffled, then dealt round-robin, continuing
/// where the previous class stopped so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::config(format!(
            "cross-validation needs at least 2 folds, got {k}"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::config(format!(
                "class {c} has {} samples, {k}-fold stratification needs at least {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Picks α by stratified `folds`-fold cross-validation on `train`. Each
/// fold fine-tunes from `start` on the remaining folds and scores the final
/// model on the held-out fold. The best mean accuracy wins; ties go to the
/// smallest α. A single candidate is returned without training.
pub fn cross_validate_alpha(
    start: &ConvNetModel,
    train: &Dataset,
    candidates: &[f64],
    cfg: &TrainConfig,
    attention: Option<&AttentionTable>,
    folds: usize,
) -> Result<CvReport> {
    let mut alphas = candidates.to_vec();
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::config("alpha candidates must be finite and non-negative"));
    }
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    match alphas.as_slice() {
        [] => return Err(Error::config("no alpha candidates")),
        [only] => {
            return Ok(CvReport {
                best_alpha: *only,
                scores: Vec::new(),
            })
        }
        _ => {}
    }
    let split = stratified_folds(&train.labels(), folds, cfg.seed)?;
    let mut scores = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let mut per_fold = Vec::with_capacity(folds);
        for (f, held) in split.iter().enumerate() {
            let rest: Vec<usize> = (0..train.len()).filter(|i| held.binary_search(i).is_err()).collect();
            let fit = train.subset(&rest)?;
            let val = train.subset(held)?;
            let table = attention.map(|t| t.subset(&rest)).transpose()?;
            let mut c = cfg.clone();
            c.regularizer.alpha = alpha;
            c.seed = cfg.seed.wrapping_add(1 + f as u64);
            let out = fine_tune(start, &fit, None, &c, table.as_ref())?;
            per_fold.push(evaluate(&out.model, &val, &cfg.eval)?);
        }
        scores.push((alpha, per_fold));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut best = &scores[0];
    for s in &scores[1..] {
        if mean(&s.1) > mean(&best.1) {
            best = s;
        }
    }
    Ok(CvReport {
        best_alpha: best.0,
        scores,
    })
}
