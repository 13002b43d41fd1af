use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use delta_core::analysis::{
    grid_to_csv, larger_distance_fraction, normalize_activation_map, paired_larger_fraction, param_distance_report,
};
use delta_core::attention::{load_or_build_attention, train_fe_head, AttentionTable};
use delta_core::data::{eval_view, load_dataset, save_dataset, Dataset, Split};
use delta_core::experiment::{
    attention_view, compare_run_dirs, derive_seed, pretrain_source, run_experiment, tap_layers, train_config,
    ExperimentConfig,
};
use delta_core::model::{load_checkpoint, save_checkpoint, ConvNetModel, LayerSpec};
use delta_core::regularizers::RegularizerKind;
use delta_core::tensor::Tensor;
use delta_core::trainer::{cross_validate_alpha, fine_tune, spar_init, ScheduleSpec};
use delta_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "delta",
    version,
    about = "Transfer learning with attentive feature-map regularization"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run seed. `run` accepts it repeatedly to replace the seed list.
    #[arg(long, global = true)]
    seed: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source/target datasets.
    Synth,
    /// Train the source network from scratch.
    Pretrain {
        /// Source dataset (file or class-directory tree).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Fit the linear head on frozen source features.
    TrainFeHead {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
    },
    /// Compute the per-sample filter attention table.
    BuildAttention {
        /// Frozen-extractor head checkpoint.
        #[arg(long)]
        fe_head: PathBuf,
        #[arg(long)]
        train: PathBuf,
    },
    /// Fine-tune the source network on the target task with one regularizer.
    Finetune {
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Attention table, required by DELTA.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Choose α by stratified k-fold cross-validation.
    CrossValidate {
        #[command(flatten)]
        fit: FitArgs,
        /// Candidate α values.
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Per-filter distance from the starting point.
    AnalyzeDistances {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Second fine-tuned model (e.g. L2-SP) to compare `after` against.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Min-max normalized activation map of one filter for one image.
    ActivationMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        filter: usize,
    },
    /// Comparison table from finished run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the full pipeline for every configured method and seed.
    Run,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value = "DELTA")]
    method: RegularizerKind,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `step:FACTOR:EVERY` or `exp:FACTOR`; the base rate comes from --lr.
    #[arg(long)]
    schedule: Option<String>,
    /// Layers carrying the behavioral penalty.
    #[arg(long, value_delimiter = ',')]
    taps: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new("out"),
    };
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    Ok(cfg)
}

fn run_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn parse_schedule(text: &str, base_lr: f64) -> Result<ScheduleSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number {s:?} in schedule")))
    };
    let spec = match parts.as_slice() {
        ["step", f, every] => ScheduleSpec::step(
            base_lr,
            num(f)?,
            every
                .parse()
                .map_err(|_| Error::Config(format!("bad step length {every:?}")))?,
        ),
        ["exp", f] => ScheduleSpec::exponential(base_lr, num(f)?),
        _ => return Err(Error::Config(format!("unknown schedule {text:?}"))),
    };
    spec.validate()?;
    Ok(spec)
}

fn apply_fit_args(cfg: &mut ExperimentConfig, fit: &FitArgs) -> Result<()> {
    let f = &mut cfg.finetune;
    if let Some(b) = fit.beta {
        f.beta = b;
    }
    if let Some(n) = fit.iterations {
        f.iterations = n;
    }
    if let Some(b) = fit.batch_size {
        f.batch_size = b;
    }
    let lr = fit.lr.unwrap_or(f.schedule.base_lr());
    f.schedule = match &fit.schedule {
        Some(s) => parse_schedule(s, lr)?,
        None => match f.schedule.clone() {
            ScheduleSpec::StepLR { factor, step, .. } => ScheduleSpec::step(lr, factor, step),
            ScheduleSpec::ExponentialLR { factor, .. } => ScheduleSpec::exponential(lr, factor),
        },
    };
    Ok(())
}

fn load_start(cfg: &ExperimentConfig, fit: &FitArgs, train: &Dataset) -> Result<ConvNetModel> {
    let mut source = load_checkpoint(&fit.checkpoint)?;
    if let Some(t) = fit.taps.as_ref().or(cfg.model.taps.as_ref()) {
        source.set_taps(t)?;
    }
    spar_init(&source, train.num_classes(), derive_seed(run_seed(cfg), 6))
}

fn load_attention(path: Option<&Path>, kind: RegularizerKind) -> Result<Option<AttentionTable>> {
    match (path, kind) {
        (Some(p), RegularizerKind::Delta) => Ok(Some(AttentionTable::load(p)?)),
        (None, RegularizerKind::Delta) => Err(Error::Config("DELTA needs --attention".into())),
        _ => Ok(None),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::Synth => {
            let syn = &cfg.data.synthetic;
            let seed = cli.common.seed.first().copied().unwrap_or(syn.seed);
            let (source, target) = syn.spec.generate(seed)?;
            let (train, test) = target.split_per_class(syn.test_per_class)?;
            save_dataset(&source, out.join("source.dimg"))?;
            save_dataset(&train, out.join("target_train.dimg"))?;
            save_dataset(&test, out.join("target_test.dimg"))?;
            println!(
                "source {} images, target train {} / test {} images in {}",
                source.len(),
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Pretrain { source, iterations } => {
            if let Some(n) = iterations {
                cfg.pretrain.iterations = n;
            }
            if let Some(&s) = cli.common.seed.first() {
                cfg.pretrain.seed = s;
            }
            let src = match source.or(cfg.data.source.clone()) {
                Some(p) => load_dataset(p)?,
                None => {
                    let syn = &cfg.data.synthetic;
                    syn.spec.generate(syn.seed)?.0
                }
            };
            let (model, log) = pretrain_source(&cfg, &src)?;
            save_checkpoint(&model, out.join("source.dlta"))?;
            fs::write(out.join("source.csv"), log.to_csv())?;
            println!(
                "final train accuracy {:.4}",
                log.rows.last().map_or(0.0, |r| r.train_acc)
            );
        }
        Command::TrainFeHead { checkpoint, train } => {
            let train = load_dataset(train)?.with_split(Split::Train);
            let source = load_checkpoint(checkpoint)?;
            let seed = run_seed(&cfg);
            let start = spar_init(&source, train.num_classes(), derive_seed(seed, 4))?;
            let mut fe_cfg = cfg.fe_head.clone();
            fe_cfg.seed = derive_seed(seed, 5);
            let fe = train_fe_head(&start, &train, &attention_view(&cfg, &train), &fe_cfg)?;
            save_checkpoint(&fe, out.join("fe_head.dlta"))?;
            println!("wrote {}", out.join("fe_head.dlta").display());
        }
        Command::BuildAttention { fe_head, train } => {
            let train = load_dataset(train)?.with_split(Split::Train);
            let fe = load_checkpoint(fe_head)?;
            let path = out.join("attention.datt");
            let taps = tap_layers(&fe);
            let (table, rebuilt) = load_or_build_attention(&fe, &train, &attention_view(&cfg, &train), &taps, &path)?;
            let verb = if rebuilt { "built" } else { "reused" };
            println!("{verb} attention for {} samples at {}", table.len(), path.display());
        }
        Command::Finetune {
            fit,
            test,
            alpha,
            attention,
        } => {
            apply_fit_args(&mut cfg, &fit)?;
            let train = load_dataset(&fit.train)?.with_split(Split::Train);
            let test = test.map(load_dataset).transpose()?.map(|d| d.with_split(Split::Test));
            let table = load_attention(attention.as_deref(), fit.method)?;
            let start = load_start(&cfg, &fit, &train)?;
            let alpha = alpha.unwrap_or(cfg.finetune.alpha_for(fit.method));
            let seed = run_seed(&cfg);
            let tc = train_config(&cfg, fit.method, alpha, seed, &train);
            let run = fine_tune(&start, &train, test.as_ref(), &tc, table.as_ref())?;
            let stem = format!("{}_seed{seed}", fit.method);
            fs::write(out.join(format!("{stem}.csv")), run.log.to_csv())?;
            save_checkpoint(&run.model, out.join(format!("{stem}.dlta")))?;
            match run.log.final_test_acc() {
                Some(acc) => println!("{} test accuracy {acc:.4}", fit.method),
                None => println!("{} finished {} iterations", fit.method, tc.iterations),
            }
        }
        Command::CrossValidate {
            fit,
            alphas,
            folds,
            attention,
        } => {
            apply_fit_args(&mut cfg, &fit)?;
            let train = load_dataset(&fit.train)?.with_split(Split::Train);
            let table = load_attention(attention.as_deref(), fit.method)?;
            let start = load_start(&cfg, &fit, &train)?;
            let mut tc = train_config(&cfg, fit.method, 0.0, run_seed(&cfg), &train);
            tc.iterations = cfg.finetune.cv_iterations.unwrap_or(tc.iterations);
            let folds = folds.unwrap_or(cfg.finetune.cv_folds);
            let report = cross_validate_alpha(&start, &train, &alphas, &tc, table.as_ref(), folds)?;
            write_json(&out.join("cv.json"), &BTreeMap::from([(fit.method, &report)]))?;
            println!("best alpha {}", report.best_alpha);
        }
        Command::AnalyzeDistances { before, after, against } => {
            let grouping = cfg.model.grouping()?;
            let start = load_checkpoint(before)?;
            let a = param_distance_report(&start, &load_checkpoint(after)?, &grouping)?;
            fs::write(out.join("distances.csv"), a.to_csv())?;
            if let Some(other) = against {
                let b = param_distance_report(&start, &load_checkpoint(other)?, &grouping)?;
                fs::write(out.join("distances_against.csv"), b.to_csv())?;
                let summary = serde_json::json!({
                    "larger_fraction": larger_distance_fraction(&a, &b)?,
                    "paired_larger_fraction": paired_larger_fraction(&a, &b)?,
                });
                write_json(&out.join("distances.json"), &summary)?;
                println!("{summary}");
            }
        }
        Command::ActivationMap {
            checkpoint,
            dataset,
            index,
            layer,
            filter,
        } => {
            let model = load_checkpoint(checkpoint)?;
            let data = load_dataset(dataset)?;
            let sample = data
                .samples()
                .get(index)
                .ok_or_else(|| Error::Index(format!("sample {index} outside {}", data.len())))?;
            let view = eval_view(&sample.image, &attention_view(&cfg, &data))?;
            let batch = Dataset::stack(&[view])?;
            let outputs = model.layer_outputs(&batch)?;
            // A conv followed by ReLU is read after the ReLU.
            let post_relu = matches!(model.spec().layers.get(layer + 1), Some(LayerSpec::Relu));
            let act = outputs
                .get(if post_relu { layer + 1 } else { layer })
                .ok_or_else(|| Error::Index(format!("layer {layer} outside {}", outputs.len())))?;
            let &[_, c, h, w] = act.shape() else {
                return Err(Error::Shape(format!(
                    "layer {layer} output {:?} is not a feature map",
                    act.shape()
                )));
            };
            if filter >= c {
                return Err(Error::Index(format!("filter {filter} outside {c}")));
            }
            let map = Tensor::new(vec![h, w], act.data()[filter * h * w..(filter + 1) * h * w].to_vec())?;
            let path = out.join(format!("activation_l{layer}_f{filter}_s{index}.csv"));
            fs::write(&path, grid_to_csv(&normalize_activation_map(&map)?)?)?;
            println!("wrote {}", path.display());
        }
        Command::Compare { runs } => {
            let table = compare_run_dirs(&runs)?;
            fs::write(out.join("comparison.csv"), table.to_csv())?;
            fs::write(out.join("summary.json"), table.summary_json()?)?;
            print!("{}", table.to_csv());
        }
        Command::Run => {
            let outcome = run_experiment(&cfg)?;
            print!("{}", outcome.comparison.to_csv());
            if let Some(d) = &outcome.distances {
                println!("DELTA vs L2SP larger-distance fraction {:.3}", d.mean);
            }
        }
    }
    Ok(())
}
