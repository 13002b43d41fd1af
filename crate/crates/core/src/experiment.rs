//! Config-driven transfer experiments: data, source pretraining, FE head,
//! attention, optional α search, multi-seed fine-tuning of every method,
//! and the comparison outputs.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! MANIFEST                     status line plus one line per finished stage
//! config.toml                  resolved configuration
//! data/*.dimg                  generated datasets (synthetic runs only)
//! source.dlta, source.csv      pretrained source network and its log
//! fe_head.dlta                 frozen-extractor head used for attention
//! attention.datt               attention cache
//! run.json                     dataset hash, seeds, methods and chosen α
//! cv.json                      α search results, when a grid is configured
//! runs/<METHOD>/seed<S>.csv    per-seed metrics
//! runs/<METHOD>/seed<S>.dlta   per-seed final checkpoints
//! summary.json                 {method: {mean_acc, std_acc}}
//! comparison.csv               method,mean_acc,std_acc,seeds
//! comparison.json              the same rows plus the DELTA vs L2-SP distance fraction
//! distances.json, distances_<METHOD>.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare_methods, larger_distance_fraction, mean_std, paired_larger_fraction, param_distance_report, Comparison,
    MethodResult,
};
use crate::attention::{load_or_build_attention, train_fe_head, AttentionTable, FeHeadConfig};
use crate::data::{load_dataset, save_dataset, AugmentSpec, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::hex;
use crate::model::{load_checkpoint, save_checkpoint, ConvNetModel, ModelSpec};
use crate::regularizers::{RegularizerConfig, RegularizerKind};
use crate::trainer::{
    cross_validate_alpha, fine_tune, spar_init, CvReport, EvalSpec, MetricsLog, ScheduleSpec, TrainConfig,
};

/// Mixes a run seed with a stage tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub seed: u64,
    /// Target samples per class held out for testing.
    pub test_per_class: usize,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
}

impl Default for SyntheticData {
    fn default() -> Self {
        let mut spec = SyntheticSpec::new(8, 6, 80, 18);
        spec.target_per_class = 30;
        Self {
            seed: 0,
            test_per_class: 20,
            spec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    /// Used when the target paths are not given.
    pub synthetic: SyntheticData,
    pub resize_shorter_edge: Option<usize>,
    pub crop: usize,
    pub mirror: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            target_train: None,
            target_test: None,
            synthetic: SyntheticData::default(),
            resize_shorter_edge: None,
            crop: 16,
            mirror: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// JSON model description; overrides `widths`.
    pub spec: Option<PathBuf>,
    pub widths: [usize; 3],
    pub source_checkpoint: Option<PathBuf>,
    /// Conv layers carrying the behavioral penalty; defaults to the
    /// layers tapped in the model description.
    pub taps: Option<Vec<usize>>,
    /// Layer id to stage label for distance reports, e.g. `{ "3" = "stage2" }`.
    /// Unlisted conv layers are labelled `conv1`, `conv2`, ...
    pub stage_labels: BTreeMap<String, String>,
}

impl ModelConfig {
    pub fn grouping(&self) -> Result<BTreeMap<usize, String>> {
        self.stage_labels
            .iter()
            .map(|(k, v)| {
                k.parse()
                    .map(|l| (l, v.clone()))
                    .map_err(|_| Error::config(format!("stage label key {k:?} is not a layer id")))
            })
            .collect()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spec: None,
            widths: [8, 16, 16],
            source_checkpoint: None,
            taps: None,
            stage_labels: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            schedule: ScheduleSpec::step(0.02, 0.1, 1500),
            weight_decay: 5e-4,
            seed: 0,
            log_interval: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// α per method; methods without an entry use `default_alpha`.
    pub alpha: BTreeMap<RegularizerKind, f64>,
    pub default_alpha: f64,
    /// Candidate α per method; a non-empty list triggers cross-validation.
    pub alpha_grid: BTreeMap<RegularizerKind, Vec<f64>>,
    pub cv_folds: usize,
    /// Iterations per cross-validation fit; defaults to `iterations`.
    pub cv_iterations: Option<usize>,
    pub beta: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub log_interval: usize,
    pub schedule: ScheduleSpec,
    pub normalize_by_area: bool,
    pub ten_crop: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            alpha: BTreeMap::new(),
            default_alpha: 0.01,
            alpha_grid: default_alpha_grid(),
            cv_folds: 5,
            cv_iterations: Some(300),
            beta: 0.01,
            momentum: 0.9,
            batch_size: 16,
            iterations: 600,
            log_interval: 50,
            schedule: ScheduleSpec::step(0.01, 0.1, 400),
            normalize_by_area: false,
            ten_crop: false,
        }
    }
}

fn default_alpha_grid() -> BTreeMap<RegularizerKind, Vec<f64>> {
    use RegularizerKind::*;
    BTreeMap::from([
        (L2, vec![1e-4, 1e-3, 1e-2]),
        (L2Sp, vec![1e-3, 1e-2, 1e-1]),
        (Delta, vec![3e-4, 1e-3, 3e-3, 1e-2]),
        (DeltaNoAtt, vec![1e-3, 1e-2, 1e-1]),
    ])
}

impl FinetuneConfig {
    pub fn alpha_for(&self, kind: RegularizerKind) -> f64 {
        self.alpha.get(&kind).copied().unwrap_or(self.default_alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<RegularizerKind>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub fe_head: FeHeadConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_methods() -> Vec<RegularizerKind> {
    RegularizerKind::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            seeds: default_seeds(),
            methods: default_methods(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            fe_head: FeHeadConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        let paths = [
            &self.data.source,
            &self.data.target_train,
            &self.data.target_test,
            &self.model.spec,
            &self.model.source_checkpoint,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::config(format!("{} does not exist", p.display())));
            }
        }
        if self.data.target_train.is_some() != self.data.target_test.is_some() {
            return Err(Error::config("target_train and target_test must be given together"));
        }
        if self.data.target_train.is_some() && self.data.source.is_none() && self.model.source_checkpoint.is_none() {
            return Err(Error::config(
                "file-based runs need a source dataset or a source checkpoint",
            ));
        }
        self.model.grouping()?;
        self.finetune.schedule.validate()?;
        self.pretrain.schedule.validate()?;
        Ok(())
    }
}

/// Source and target datasets of a run.
pub struct TaskData {
    pub source: Option<Dataset>,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_task_data(cfg: &DataConfig) -> Result<TaskData> {
    if let (Some(tr), Some(te)) = (&cfg.target_train, &cfg.target_test) {
        let source = cfg.source.as_ref().map(load_dataset).transpose()?;
        return Ok(TaskData {
            source,
            train: load_dataset(tr)?.with_split(Split::Train),
            test: load_dataset(te)?.with_split(Split::Test),
        });
    }
    let syn = &cfg.synthetic;
    let (source, target) = syn.spec.generate(syn.seed)?;
    let (train, test) = target.split_per_class(syn.test_per_class)?;
    Ok(TaskData {
        source: Some(source),
        train,
        test,
    })
}

fn view(cfg: &DataConfig, mean: Vec<f64>, mirror: bool) -> AugmentSpec {
    AugmentSpec {
        resize_shorter_edge: cfg.resize_shorter_edge,
        crop: cfg.crop,
        mirror,
        mean,
    }
}

pub fn model_spec(cfg: &ExperimentConfig, channels: usize, classes: usize) -> Result<ModelSpec> {
    let mut spec = match &cfg.model.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ModelSpec::reference([channels, cfg.data.crop, cfg.data.crop], cfg.model.widths, classes),
    };
    spec.validate()?;
    if let Some(taps) = &cfg.model.taps {
        let mut m = ConvNetModel::build(spec.clone(), 0)?;
        m.set_taps(taps)?;
        spec = m.spec().clone();
    }
    Ok(spec)
}

/// Trains a source network from scratch with L2 weight decay.
pub fn pretrain_source(cfg: &ExperimentConfig, source: &Dataset) -> Result<(ConvNetModel, MetricsLog)> {
    let channels = source.image_shape().map_or(3, |s| s[0]);
    let spec = model_spec(cfg, channels, source.num_classes())?;
    let model = ConvNetModel::build(spec, derive_seed(cfg.pretrain.seed, 1))?;
    let mean = source.channel_means();
    let tc = TrainConfig {
        regularizer: RegularizerConfig::new(RegularizerKind::L2, cfg.pretrain.weight_decay, 0.0),
        schedule: cfg.pretrain.schedule.clone(),
        momentum: cfg.finetune.momentum,
        batch_size: cfg.pretrain.batch_size,
        iterations: cfg.pretrain.iterations,
        log_interval: cfg.pretrain.log_interval,
        augment: view(&cfg.data, mean.clone(), cfg.data.mirror),
        eval: EvalSpec {
            view: view(&cfg.data, mean, false),
            ten_crop: false,
        },
        seed: derive_seed(cfg.pretrain.seed, 2),
    };
    let out = fine_tune(&model, source, None, &tc, None)?;
    Ok((out.model, out.log))
}

/// Fine-tuning configuration of one method and seed on `train`.
pub fn train_config(
    cfg: &ExperimentConfig,
    kind: RegularizerKind,
    alpha: f64,
    seed: u64,
    train: &Dataset,
) -> TrainConfig {
    let f = &cfg.finetune;
    let mean = train.channel_means();
    TrainConfig {
        regularizer: RegularizerConfig {
            kind,
            alpha,
            beta: f.beta,
            normalize_by_area: f.normalize_by_area,
        },
        schedule: f.schedule.clone(),
        momentum: f.momentum,
        batch_size: f.batch_size,
        iterations: f.iterations,
        log_interval: f.log_interval,
        augment: view(&cfg.data, mean.clone(), cfg.data.mirror),
        eval: EvalSpec {
            view: view(&cfg.data, mean, false),
            ten_crop: f.ten_crop,
        },
        seed: derive_seed(seed, 3),
    }
}

/// Attention weights are computed on the deterministic evaluation view.
pub fn attention_view(cfg: &ExperimentConfig, train: &Dataset) -> AugmentSpec {
    view(&cfg.data, train.channel_means(), false)
}

pub fn tap_layers(model: &ConvNetModel) -> Vec<usize> {
    model.taps().iter().map(|t| t.layer).collect()
}

/// Records stage completion so interrupted runs can be recognised.
pub struct Manifest {
    path: PathBuf,
    stages: Vec<String>,
}

impl Manifest {
    pub fn start(dir: &Path) -> Result<Self> {
        let m = Self {
            path: dir.join("MANIFEST"),
            stages: Vec::new(),
        };
        m.write("incomplete")?;
        Ok(m)
    }

    fn write(&self, status: &str) -> Result<()> {
        let mut text = format!("status {status}\n");
        for s in &self.stages {
            text.push_str(&format!("stage {s}\n"));
        }
        fs::write(&self.path, text)?;
        Ok(())
    }

    pub fn stage(&mut self, name: impl Into<String>) -> Result<()> {
        self.stages.push(name.into());
        self.write("incomplete")
    }

    pub fn complete(self) -> Result<()> {
        self.write("complete")
    }

    /// Whether the manifest in `dir` marks a finished run.
    pub fn is_complete(dir: &Path) -> bool {
        fs::read_to_string(dir.join("MANIFEST")).is_ok_and(|t| t.starts_with("status complete\n"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    /// Rank-wise fraction per seed (sorted DELTA vs sorted L2-SP distances).
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Fraction of filters farther from ω* under DELTA than under L2-SP.
    pub paired_per_seed: Vec<f64>,
    pub paired_mean: f64,
}

pub struct ExperimentOutcome {
    pub comparison: Comparison,
    pub logs: BTreeMap<RegularizerKind, Vec<MetricsLog>>,
    pub alphas: BTreeMap<RegularizerKind, f64>,
    pub distances: Option<DistanceSummary>,
    pub dataset_hash: String,
}

impl ExperimentOutcome {
    /// Test accuracy averaged over seeds at each logged iteration.
    pub fn mean_curve(&self, kind: RegularizerKind) -> Vec<(usize, f64)> {
        let Some(logs) = self.logs.get(&kind) else {
            return Vec::new();
        };
        let Some(first) = logs.first() else {
            return Vec::new();
        };
        first
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let acc = logs.iter().filter_map(|l| l.rows[i].test_acc).sum::<f64>() / logs.len() as f64;
                (r.iteration, acc)
            })
            .collect()
    }

    /// First logged iteration where the seed-averaged test accuracy
    /// reaches `fraction` of its final value.
    pub fn iterations_to_fraction(&self, kind: RegularizerKind, fraction: f64) -> Option<usize> {
        let curve = self.mean_curve(kind);
        let target = fraction * curve.last()?.1;
        curve.iter().find(|(_, a)| *a >= target).map(|(i, _)| *i)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Runs every stage and writes the result bundle. On failure the outputs
/// written so far stay on disk and the MANIFEST reads `incomplete`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::start(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let data = load_task_data(&cfg.data)?;
    if cfg.data.target_train.is_none() {
        fs::create_dir_all(out.join("data"))?;
        if let Some(s) = &data.source {
            save_dataset(s, out.join("data/source.dimg"))?;
        }
        save_dataset(&data.train, out.join("data/target_train.dimg"))?;
        save_dataset(&data.test, out.join("data/target_test.dimg"))?;
    }
    manifest.stage("data")?;

    let source = match &cfg.model.source_checkpoint {
        Some(p) => {
            let mut m = load_checkpoint(p)?;
            if let Some(taps) = &cfg.model.taps {
                m.set_taps(taps)?;
            }
            m
        }
        None => {
            let src = data
                .source
                .as_ref()
                .ok_or_else(|| Error::config("no source dataset to pretrain on"))?;
            let (m, log) = pretrain_source(cfg, src)?;
            fs::write(out.join("source.csv"), log.to_csv())?;
            m
        }
    };
    save_checkpoint(&source, out.join("source.dlta"))?;
    manifest.stage("source")?;

    let k = data.train.num_classes();
    let taps = tap_layers(&source);
    let att_view = attention_view(cfg, &data.train);
    let needs_attention = cfg.methods.contains(&RegularizerKind::Delta);
    let attention: Option<AttentionTable> = if needs_attention {
        let head_start = spar_init(&source, k, derive_seed(cfg.pretrain.seed, 4))?;
        let mut fe_cfg = cfg.fe_head.clone();
        fe_cfg.seed = derive_seed(cfg.fe_head.seed, 5);
        let fe = train_fe_head(&head_start, &data.train, &att_view, &fe_cfg)?;
        save_checkpoint(&fe, out.join("fe_head.dlta"))?;
        let (table, _) = load_or_build_attention(&fe, &data.train, &att_view, &taps, out.join("attention.datt"))?;
        manifest.stage("attention")?;
        Some(table)
    } else {
        None
    };

    let mut alphas = BTreeMap::new();
    let mut cv_reports: BTreeMap<RegularizerKind, CvReport> = BTreeMap::new();
    for &kind in &cfg.methods {
        let grid = cfg.finetune.alpha_grid.get(&kind).filter(|g| !g.is_empty());
        let alpha = match grid {
            Some(grid) if kind != RegularizerKind::L2Fe => {
                let start = spar_init(&source, k, derive_seed(cfg.seeds[0], 6))?;
                let mut tc = train_config(cfg, kind, 0.0, cfg.seeds[0], &data.train);
                tc.iterations = cfg.finetune.cv_iterations.unwrap_or(tc.iterations);
                let report = cross_validate_alpha(
                    &start,
                    &data.train,
                    grid,
                    &tc,
                    attention.as_ref(),
                    cfg.finetune.cv_folds,
                )?;
                let best = report.best_alpha;
                cv_reports.insert(kind, report);
                best
            }
            _ => cfg.finetune.alpha_for(kind),
        };
        alphas.insert(kind, alpha);
    }
    if !cv_reports.is_empty() {
        write_json(&out.join("cv.json"), &cv_reports)?;
        manifest.stage("cross-validation")?;
    }

    let mut logs: BTreeMap<RegularizerKind, Vec<MetricsLog>> = BTreeMap::new();
    let mut finals: BTreeMap<RegularizerKind, Vec<ConvNetModel>> = BTreeMap::new();
    let mut starts = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let start = spar_init(&source, k, derive_seed(seed, 6))?;
        for &kind in &cfg.methods {
            let dir = out.join("runs").join(kind.as_str());
            fs::create_dir_all(&dir)?;
            let tc = train_config(cfg, kind, alphas[&kind], seed, &data.train);
            let table = if kind == RegularizerKind::Delta {
                attention.as_ref()
            } else {
                None
            };
            let run = fine_tune(&start, &data.train, Some(&data.test), &tc, table)?;
            fs::write(dir.join(format!("seed{seed}.csv")), run.log.to_csv())?;
            save_checkpoint(&run.model, dir.join(format!("seed{seed}.dlta")))?;
            logs.entry(kind).or_default().push(run.log);
            finals.entry(kind).or_default().push(run.model);
            manifest.stage(format!("finetune {kind} seed {seed}"))?;
        }
        starts.push(start);
    }

    let distances = match (finals.get(&RegularizerKind::Delta), finals.get(&RegularizerKind::L2Sp)) {
        (Some(delta), Some(sp)) => {
            let grouping = cfg.model.grouping()?;
            let mut summary = DistanceSummary::default();
            for (i, start) in starts.iter().enumerate() {
                let a = param_distance_report(start, &delta[i], &grouping)?;
                let b = param_distance_report(start, &sp[i], &grouping)?;
                if i == 0 {
                    fs::write(out.join("distances_DELTA.csv"), a.to_csv())?;
                    fs::write(out.join("distances_L2SP.csv"), b.to_csv())?;
                }
                summary.per_seed.push(larger_distance_fraction(&a, &b)?);
                summary.paired_per_seed.push(paired_larger_fraction(&a, &b)?);
            }
            summary.mean = mean_std(&summary.per_seed).0;
            summary.paired_mean = mean_std(&summary.paired_per_seed).0;
            write_json(&out.join("distances.json"), &summary)?;
            Some(summary)
        }
        _ => None,
    };

    let dataset_hash = hex(&data.train.hash());
    let results: Vec<MethodResult> = cfg
        .methods
        .iter()
        .map(|&kind| MethodResult {
            kind,
            dataset_hash: dataset_hash.clone(),
            seeds: cfg.seeds.clone(),
            accuracies: logs[&kind].iter().filter_map(MetricsLog::final_test_acc).collect(),
        })
        .collect();
    let info = RunInfo {
        dataset_hash: dataset_hash.clone(),
        seeds: cfg.seeds.clone(),
        methods: cfg.methods.clone(),
        alphas: alphas.clone(),
    };
    write_json(&out.join("run.json"), &info)?;
    let comparison = compare_methods(&results, distances.as_ref().map(|d| d.mean))?;
    fs::write(out.join("comparison.csv"), comparison.to_csv())?;
    write_json(&out.join("comparison.json"), &comparison)?;
    fs::write(out.join("summary.json"), comparison.summary_json()?)?;
    manifest.stage("summary")?;
    manifest.complete()?;
    Ok(ExperimentOutcome {
        comparison,
        logs,
        alphas,
        distances,
        dataset_hash,
    })
}

/// Identity of a finished run, written as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<RegularizerKind>,
    pub alphas: BTreeMap<RegularizerKind, f64>,
}

impl RunInfo {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?)
    }
}

/// Final test accuracy of every seed of `kind`, read back from the CSVs.
pub fn seed_accuracies(dir: &Path, kind: RegularizerKind, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|s| {
            let path = dir.join("runs").join(kind.as_str()).join(format!("seed{s}.csv"));
            let log = MetricsLog::from_csv(&fs::read_to_string(&path)?)?;
            log.final_test_acc()
                .ok_or_else(|| Error::Validation(format!("{} has no test accuracy", path.display())))
        })
        .collect()
}

/// Rebuilds the comparison table from the per-seed CSVs of one or more
/// finished runs. Runs must share the dataset and seeds; a method present
/// in several runs is taken from the first.
pub fn compare_run_dirs(dirs: &[PathBuf]) -> Result<Comparison> {
    let mut results: Vec<MethodResult> = Vec::new();
    for dir in dirs {
        let info = RunInfo::load(dir)?;
        for &kind in &info.methods {
            if results.iter().any(|r| r.kind == kind) {
                continue;
            }
            results.push(MethodResult {
                kind,
                dataset_hash: info.dataset_hash.clone(),
                seeds: info.seeds.clone(),
                accuracies: seed_accuracies(dir, kind, &info.seeds)?,
            });
        }
    }
    let fraction = dirs
        .iter()
        .find_map(|d| fs::read_to_string(d.join("distances.json")).ok())
        .map(|t| serde_json::from_str::<DistanceSummary>(&t))
        .transpose()?
        .map(|d| d.mean);
    compare_methods(&results, fraction)
}
