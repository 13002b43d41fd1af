//! Fine-tuning loop, evaluation and cross-validation over α.

mod cv;
mod optimizer;
mod schedule;

pub use cv::{cross_validate_alpha, stratified_folds, CvReport};
pub use optimizer::{sgd_momentum_step, OptimizerState};
pub use schedule::{schedule_lr, ScheduleSpec};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTable;
use crate::data::{augment, eval_view, ten_crop_views, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{ConvNetModel, Trainable};
use crate::regularizers::{graph, RegularizerConfig};
use crate::tensor::{ops, Graph};

/// How test accuracy is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub view: AugmentSpec,
    /// Average the softmax over ten crops instead of one center crop.
    #[serde(default)]
    pub ten_crop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regularizer: RegularizerConfig,
    pub schedule: ScheduleSpec,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// A metrics row is written every `log_interval` iterations and after
    /// the last one.
    pub log_interval: usize,
    pub augment: AugmentSpec,
    pub eval: EvalSpec,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::config("batch size and log interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Absent when training ran without a test set; an empty CSV field.
    pub test_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "iteration,epoch,lr,train_loss,train_acc,test_acc";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc,
                r.test_acc.map(|a| a.to_string()).unwrap_or_default()
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Validation(format!(
                "metrics CSV must start with `{METRICS_HEADER}`"
            )));
        }
        let rows = lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Validation(format!("metrics row {}: `{line}`", i + 1));
                if f.len() != 6 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
                Ok(MetricsRow {
                    iteration: int(f[0])?,
                    epoch: int(f[1])?,
                    lr: num(f[2])?,
                    train_loss: num(f[3])?,
                    train_acc: num(f[4])?,
                    test_acc: if f[5].is_empty() { None } else { Some(num(f[5])?) },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.test_acc)
    }

    /// First logged iteration whose test accuracy reaches `fraction` of the
    /// final test accuracy.
    pub fn iterations_to_fraction(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.final_test_acc()?;
        self.rows
            .iter()
            .find(|r| r.test_acc.is_some_and(|a| a >= target))
            .map(|r| r.iteration)
    }
}

pub struct TrainOutcome {
    pub model: ConvNetModel,
    pub log: MetricsLog,
}

/// SPAR start: the source network with a fresh `k_target`-way head; the
/// shared parameters equal `ω*` bitwise.
pub fn spar_init(source: &ConvNetModel, k_target: usize, seed: u64) -> Result<ConvNetModel> {
    source.replace_head(k_target, seed)
}

/// Top-1 accuracy of `model` on `dataset`.
pub fn evaluate(model: &ConvNetModel, dataset: &Dataset, eval: &EvalSpec) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    if eval.ten_crop {
        for s in dataset.samples() {
            let batch = Dataset::stack(&ten_crop_views(&s.image, &eval.view)?)?;
            let probs = ops::softmax_rows(&model.forward(&batch)?)?;
            let k = probs.shape()[1];
            let mut mean = vec![0.0; k];
            for row in probs.data().chunks(k) {
                mean.iter_mut().zip(row).for_each(|(m, p)| *m += p / 10.0);
            }
            correct += usize::from(ops::argmax(&mean) == s.label);
        }
    } else {
        for chunk in dataset.samples().chunks(64) {
            let views = chunk
                .iter()
                .map(|s| eval_view(&s.image, &eval.view))
                .collect::<Result<Vec<_>>>()?;
            let logits = model.forward(&Dataset::stack(&views)?)?;
            let k = logits.shape()[1];
            for (row, s) in logits.data().chunks(k).zip(chunk) {
                correct += usize::from(ops::argmax(row) == s.label);
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn divergence(iteration: usize, model: &ConvNetModel, lr: f64, last_loss: f64, cause: &Error) -> Error {
    let mut detail = format!("{cause}; lr {lr}, last finite loss {last_loss}; parameter norms:");
    for p in model.params() {
        let _ = write!(detail, " {}={:.6e}", p.name, p.value.squared_norm().sqrt());
    }
    Error::Diverged { iteration, detail }
}

/// Minimizes the configured objective on `train`, starting from `start`
/// (a SPAR-initialized model). `attention` rows are indexed by position in
/// `train`. Test accuracy is logged when `test` is given, otherwise the
/// column holds 0.
pub fn fine_tune(
    start: &ConvNetModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    attention: Option<&AttentionTable>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = cfg.regularizer.kind;
    if kind.needs_reference() && !start.has_reference() {
        return Err(Error::contract(format!(
            "{kind} needs a SPAR-initialized model with ω*"
        )));
    }
    if let Some(t) = attention {
        if t.len() != train.len() {
            return Err(Error::contract(format!(
                "attention table has {} rows for {} training samples",
                t.len(),
                train.len()
            )));
        }
    }
    if train.num_classes() != start.num_classes() {
        return Err(Error::config(format!(
            "model predicts {} classes, training set has {}",
            start.num_classes(),
            train.num_classes()
        )));
    }
    let mut model = start.clone();
    let mut log = MetricsLog::default();
    if cfg.iterations == 0 || train.is_empty() {
        return Ok(TrainOutcome { model, log });
    }
    let trainable = if kind.freezes_extractor() {
        Trainable::HeadOnly
    } else {
        Trainable::All
    };
    let frozen: Vec<bool> = model
        .params()
        .iter()
        .map(|p| kind.freezes_extractor() && !p.head)
        .collect();
    let mut opt = OptimizerState::new(&model, cfg.momentum, cfg.schedule.base_lr(), frozen)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
    let mut last_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let epoch = it * cfg.batch_size / n;
        let lr = cfg.schedule.lr(it, epoch);
        opt.set_lr(lr)?;
        let mut ids = Vec::with_capacity(cfg.batch_size);
        while ids.len() < cfg.batch_size {
            if cursor == n {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            ids.push(order[cursor]);
            cursor += 1;
        }
        let views = ids
            .iter()
            .map(|&i| augment(&train.samples()[i].image, &cfg.augment, &mut aug_rng))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = ids.iter().map(|&i| train.samples()[i].label).collect();

        let mut g = Graph::new();
        let params = model.bind(&mut g, trainable);
        let x = g.constant(Dataset::stack(&views)?);
        let step = (|| -> Result<(f64, usize)> {
            let obj = graph::total_objective(&mut g, &model, &params, x, &labels, &ids, &cfg.regularizer, attention)?;
            let loss = g.value(obj.total).item()?;
            let logits = g.value(obj.logits);
            let k = logits.shape()[1];
            let hits = logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| ops::argmax(row) == y)
                .count();
            g.backward(obj.total)?;
            Ok((loss, hits))
        })();
        let (loss, hits) = match step {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => return Err(divergence(it, &model, lr, last_loss, &e)),
            Err(e) => return Err(e),
        };
        let grads: Vec<Option<&[f64]>> = params.iter().map(|&p| g.grad(p)).collect();
        opt.step(&mut model, &grads)?;
        if let Some(p) = model.params().iter().find(|p| p.value.check_finite("").is_err()) {
            let cause = Error::NonFinite(format!("{} after update", p.name));
            return Err(divergence(it, &model, lr, loss, &cause));
        }
        last_loss = loss;
        loss_sum += loss;
        correct += hits;
        seen += labels.len();
        batches += 1;

        let done = it + 1;
        if done % cfg.log_interval == 0 || done == cfg.iterations {
            let test_acc = test.map(|t| evaluate(&model, t, &cfg.eval)).transpose()?;
            log.rows.push(MetricsRow {
                iteration: done,
                epoch: done * cfg.batch_size / n,
                lr,
                train_loss: loss_sum / batches as f64,
                train_acc: correct as f64 / seen as f64,
                test_acc,
            });
            (loss_sum, correct, seen, batches) = (0.0, 0, 0, 0);
        }
    }
    Ok(TrainOutcome { model, log })
}
