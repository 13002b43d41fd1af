//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs the full five-seed comparison, so expect several minutes.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use delta_core::attention::{build_attention_table, AttentionTable};
use delta_core::data::{eval_view, AugmentSpec, SyntheticSpec};
use delta_core::experiment::{run_experiment, ExperimentConfig};
use delta_core::model::ConvNetModel;
use delta_core::regularizers::{
    behavioral_penalty, graph, l2_sp_penalty, total_objective, FilterWeights, RegularizerConfig, RegularizerKind,
};
use delta_core::tensor::{grad_check_many, ops, Tensor};
use delta_core::trainer::{fine_tune, schedule_lr, spar_init, EvalSpec, ScheduleSpec, TrainConfig};
use rand::seq::index::sample;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let model = drifted_transfer_model(21, 2, 6, 3);
    let mut r = rng(22);
    let batch = random_tensor(&[4, 2, 6, 6], &mut r, 1.0);
    let (labels, ids) = ([0, 2, 1, 2], [0, 1, 2, 3]);
    let taps = model.taps();
    let rows = (0..4)
        .map(|_| {
            taps.iter()
                .flat_map(|t| ops::softmax(random_tensor(&[t.channels], &mut r, 1.0).data()))
                .collect()
        })
        .collect();
    let table = AttentionTable::new(taps, [0; 32], [0; 32], rows).map_err(|e| e.to_string())?;
    let cfg = RegularizerConfig::new(RegularizerKind::Delta, 0.3, 0.01);
    let points: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let err = grad_check_many(
        |g, vars| {
            let x = g.constant(batch.clone());
            graph::total_objective(g, &model, vars, x, &labels, &ids, &cfg, Some(&table)).map(|o| o.total)
        },
        &points,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        err < 1e-4 && secs < 30.0,
        format!("max relative error {err:.2e} in {secs:.2}s"),
    )
}

fn regularizer_identities() -> Outcome {
    let model = drifted_transfer_model(31, 2, 6, 3);
    let batch = random_tensor(&[4, 2, 6, 6], &mut rng(32), 1.0);
    let (labels, ids) = ([1, 0, 2, 1], [0, 1, 2, 3]);

    let mut at_ref = model.reset_to_reference();
    let behavioral =
        behavioral_penalty(&at_ref, &batch, &ids, FilterWeights::Uniform, false).map_err(|e| e.to_string())?;
    for id in at_ref.head_ids() {
        at_ref.params_mut()[id].value.data_mut().fill(0.0);
    }
    let sp = l2_sp_penalty(&at_ref).map_err(|e| e.to_string())?;

    let plain = ops::softmax_cross_entropy(&model.forward(&batch).map_err(|e| e.to_string())?, &labels)
        .map_err(|e| e.to_string())?;
    let table = AttentionTable::uniform(model.taps(), 4);
    let mut worst = 0f64;
    for kind in RegularizerKind::ALL {
        let cfg = RegularizerConfig::new(kind, 0.0, 0.0);
        let att = (kind == RegularizerKind::Delta).then_some(&table);
        let total = total_objective(&model, &batch, &labels, &ids, &cfg, att).map_err(|e| e.to_string())?;
        worst = worst.max((total - plain).abs());
    }
    check(
        behavioral == 0.0 && sp == 0.0 && worst <= 1e-12,
        format!("behavioral at ω* {behavioral:e}, L2-SP at ω* {sp:e}, α=β=0 vs CE {worst:.1e}"),
    )
}

fn attention_contract() -> Outcome {
    let uniform = ops::softmax(&[2.5; 7]);
    let uniform_ok = uniform.iter().all(|&w| w == uniform[0]) && (uniform[0] - 1.0 / 7.0).abs() <= 1e-12;
    let two = ops::softmax(&[3f64.ln(), 0.0]);
    let two_ok = (two[0] - 0.75).abs() <= 1e-12 && (two[1] - 0.25).abs() <= 1e-12;

    let (_, target) = SyntheticSpec::new(4, 3, 12, 8)
        .generate(41)
        .map_err(|e| e.to_string())?;
    let source = ConvNetModel::build(two_conv_spec(3, 8, 4), 42).map_err(|e| e.to_string())?;
    let fe = spar_init(&source, 3, 43).map_err(|e| e.to_string())?;
    let mut view = AugmentSpec::new(8);
    view.mean = target.channel_means();
    let layers: Vec<usize> = fe.taps().iter().map(|t| t.layer).collect();
    let table = build_attention_table(&fe, &target, &view, &layers).map_err(|e| e.to_string())?;

    let mut row_err = 0f64;
    let mut negative = false;
    for i in 0..table.len() {
        for &layer in &layers {
            let w = table.weights(i, layer).map_err(|e| e.to_string())?;
            negative |= w.iter().any(|&v| v < 0.0);
            row_err = row_err.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut mismatches = 0;
    for i in sample(&mut rng(44), target.len(), 20) {
        let s = &target.samples()[i];
        let image = eval_view(&s.image, &view).map_err(|e| e.to_string())?;
        for &layer in &layers {
            let naive = rebuilt_attention(&fe, &image, s.label, layer);
            if table.weights(i, layer).map_err(|e| e.to_string())? != naive.as_slice() {
                mismatches += 1;
            }
        }
    }
    check(
        uniform_ok && two_ok && !negative && row_err <= 1e-12 && mismatches == 0,
        format!(
            "row sum error {row_err:.1e}, negative {negative}, uniform {uniform_ok}, [ln3,0] -> [{:.6}, {:.6}], \
             cached vs naive mismatches {mismatches}/40",
            two[0], two[1]
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let conv = conv_sweep_deviation(51, 50);
    let ce = cross_entropy_deviation(52);
    check(
        conv <= 1e-12 && ce <= 1e-10,
        format!("conv {conv:.1e} over 50 shapes, CE {ce:.1e}"),
    )
}

fn protocol_fidelity() -> Outcome {
    let step = ScheduleSpec::step(0.01, 0.1, 6000);
    let step_ok = schedule_lr(&step, 5999, 0) == 0.01 && schedule_lr(&step, 6000, 0) == 0.01 / 10.0;
    let exp = ScheduleSpec::exponential(0.01, 0.93);
    let exp_ok = (0..60).all(|e| schedule_lr(&exp, 0, e) == 0.01 * 0.93f64.powi(e as i32));

    let (_, target) = SyntheticSpec::new(4, 3, 6, 8).generate(61).map_err(|e| e.to_string())?;
    let source = ConvNetModel::build(two_conv_spec(3, 8, 4), 62).map_err(|e| e.to_string())?;
    let start = spar_init(&source, 3, 63).map_err(|e| e.to_string())?;
    let spar_ok = start.params().iter().filter(|p| !p.head).all(|p| {
        source
            .params()
            .iter()
            .any(|q| q.name == p.name && q.value.bitwise_eq(&p.value))
    });

    let view = AugmentSpec::new(8);
    let cfg = TrainConfig {
        regularizer: RegularizerConfig::new(RegularizerKind::L2Fe, 0.01, 0.0),
        schedule: ScheduleSpec::exponential(0.05, 0.93),
        momentum: 0.9,
        batch_size: 4,
        iterations: 20,
        log_interval: 1,
        augment: view.clone(),
        eval: EvalSpec { view, ten_crop: false },
        seed: 64,
    };
    let out = fine_tune(&start, &target, None, &cfg, None).map_err(|e| e.to_string())?;
    let frozen_ok = start
        .params()
        .iter()
        .zip(out.model.params())
        .filter(|(p, _)| !p.head)
        .all(|(p, q)| p.value.bitwise_eq(&q.value));
    let head_moved = start
        .params()
        .iter()
        .zip(out.model.params())
        .any(|(p, q)| p.head && !p.value.bitwise_eq(&q.value));
    let logged_ok = out.log.rows.iter().all(|r| {
        let epoch = (r.iteration - 1) * cfg.batch_size / target.len();
        r.lr == 0.05 * 0.93f64.powi(epoch as i32)
    });
    check(
        step_ok && exp_ok && spar_ok && frozen_ok && head_moved && logged_ok,
        format!(
            "StepLR {step_ok}, ExponentialLR {exp_ok} (logged {logged_ok}), L2FE frozen {frozen_ok} \
             with head trained {head_moved}, SPAR start {spar_ok}"
        ),
    )
}

struct Directional {
    outcome: Outcome,
    fraction: Option<(f64, f64)>,
}

fn directional() -> Directional {
    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let out = match run_experiment(&ExperimentConfig::new(dir.path())) {
        Ok(o) => o,
        Err(e) => {
            return Directional {
                outcome: Err(e.to_string()),
                fraction: None,
            }
        }
    };
    let acc = |k| out.comparison.row(k).map_or(f64::NAN, |r| r.mean_acc);
    let (delta, sp, l2) = (
        acc(RegularizerKind::Delta),
        acc(RegularizerKind::L2Sp),
        acc(RegularizerKind::L2),
    );
    let t_delta = out.iterations_to_fraction(RegularizerKind::Delta, 0.9);
    let t_sp = out.iterations_to_fraction(RegularizerKind::L2Sp, 0.9);
    let speed_ok = matches!((t_delta, t_sp), (Some(a), Some(b)) if a <= b);
    let others: Vec<String> = out
        .comparison
        .rows
        .iter()
        .map(|r| format!("{} {:.4}±{:.4}", r.kind, r.mean_acc, r.std_acc))
        .collect();
    Directional {
        outcome: check(
            delta >= sp && sp >= l2 && delta - l2 >= 0.01 && speed_ok,
            format!(
                "{}; DELTA-L2 {:+.2} points; 90% of final at DELTA {t_delta:?} vs L2SP {t_sp:?}; {:.0}s",
                others.join(", "),
                100.0 * (delta - l2),
                start.elapsed().as_secs_f64()
            ),
        ),
        fraction: out.distances.map(|d| (d.mean, d.paired_mean)),
    }
}

fn determinism() -> Outcome {
    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    for d in &dirs {
        let mut cfg = tiny_experiment(d.path());
        cfg.seeds = vec![0, 1, 2];
        run_experiment(&cfg).map_err(|e| e.to_string())?;
    }
    let mut files = vec!["summary.json".to_string(), "comparison.csv".into()];
    for kind in RegularizerKind::ALL {
        for seed in 0..3 {
            files.push(format!("runs/{}/seed{seed}.csv", kind.as_str()));
        }
    }
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| fs::read(dirs[0].path().join(f)).ok() != fs::read(dirs[1].path().join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        format!("{} files compared, differing {differing:?}", files.len()),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(d) => println!("PASS {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL {name}: {d}");
        }
    };
    report("gradient check", gradient_check());
    report("regularizer identities", regularizer_identities());
    report("attention contract", attention_contract());
    report("oracle equivalence", oracle_equivalence());
    report("protocol fidelity", protocol_fidelity());
    let dir = directional();
    report("directional result", dir.outcome);
    report("determinism", determinism());
    match dir.fraction {
        Some((rank, paired)) => println!(
            "INFO distance diagnostic: DELTA filters farther from ω* than L2SP, rank-wise {rank:.3}, paired {paired:.3}"
        ),
        None => println!("INFO distance diagnostic: not computed"),
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
