//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its own line; exits nonzero if any hard criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use quadgate::augment::{compute_lambda, downsample_mask, mixed_score, CutMask};
use quadgate::data::{generate_synthetic, Sample, SyntheticSpec};
use quadgate::gradcheck::{operation_checks, TOLERANCE};
use quadgate::model::{gradcheck_model, Encoder, Ensemble, ModelConfig, QCrossModel};
use quadgate::scores::Modality;
use quadgate::train::{train, weighted_l1_loss, CosineWarmRestarts, RunOutputs, Split, TrainConfig, TrainReport, WeightTable};
use quadgate::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Soft criteria never fail the suite.
    Report(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let ops = operation_checks(1, None);
    let worst_op = ops.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
    let blocks = match gradcheck_model(16, 1, None) {
        Ok(b) => b,
        Err(e) => return Verdict::Fail(format!("gradcheck errored: {e}")),
    };
    let worst = blocks
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("blocks");
    let failing = blocks.iter().filter(|b| !b.passed(TOLERANCE)).count();
    let elapsed = start.elapsed();
    check(
        failing == 0 && worst_op < TOLERANCE && elapsed < Duration::from_secs(300),
        format!(
            "{} parameter blocks, {failing} failing, worst {:.2e} ({}); {} ops worst {worst_op:.2e}; {:.0} s",
            blocks.len(),
            worst.max_relative_error,
            worst.name,
            ops.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let cfg = ModelConfig::paper();
    let expected = vec![(56, 56, 32), (28, 28, 64), (14, 14, 160), (7, 7, 256)];
    let formula = cfg.stage_shapes().unwrap();
    // Also run one encoder on a real 224×224 region.
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "enc", &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut tape = Tape::inference();
    let region = tape.constant(Tensor::full(&[1, 224, 224], 0.5));
    let out = encoder.forward(&mut tape, &store, region).unwrap();
    check(
        formula == expected && out.stage_shapes == expected,
        format!("formula {formula:?}, forward {:?}", out.stage_shapes),
    )
}

/// Independent λ: walk the cells, read the center pixel of the rectangle directly.
fn lambda_by_hand(att: &[f64], mask: &CutMask, h: usize, w: usize, gh: usize, gw: usize) -> (f64, f64) {
    let (mut lambda, mut cells) = (0.0, 0.0);
    for i in 0..gh {
        for j in 0..gw {
            let y = (2 * i + 1) * h / (2 * gh);
            let x = (2 * j + 1) * w / (2 * gw);
            if mask.contains(y, x) {
                lambda += att[i * gw + j];
                cells += 1.0;
            }
        }
    }
    (lambda, cells / (gh * gw) as f64)
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut violations, mut worst_uniform, mut worst_oracle): (usize, f64, f64) = (0, 0.0, 0.0);
    for case in 0..10_000 {
        let (h, w) = (rng.random_range(8..=64), rng.random_range(8..=64));
        let (gh, gw) = (rng.random_range(1..=8usize).min(h), rng.random_range(1..=8usize).min(w));
        let mask = CutMask::sample(h, w, &mut rng).unwrap();
        let uniform = case % 2 == 0;
        let mut att: Vec<f64> = if uniform {
            vec![1.0; gh * gw]
        } else {
            (0..gh * gw).map(|_| rng.random::<f64>().powi(3)).collect()
        };
        let total: f64 = att.iter().sum();
        att.iter_mut().for_each(|a| *a /= total);
        let map = mask.to_map();
        let lambda = compute_lambda(&Tensor::new(&[gh, gw], att.clone()).unwrap(), &map, (gh, gw)).unwrap();
        let (ya, yb) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let ybar = mixed_score(ya, yb, lambda).unwrap();
        if !(0.0..=1.0).contains(&lambda) || ybar < ya.min(yb) || ybar > ya.max(yb) {
            violations += 1;
        }
        let (by_hand, fraction) = lambda_by_hand(&att, &mask, h, w, gh, gw);
        worst_oracle = worst_oracle.max((lambda - by_hand.clamp(0.0, 1.0)).abs());
        if uniform {
            let down = downsample_mask(&map, (gh, gw)).unwrap();
            debug_assert!((down.sum() / (gh * gw) as f64 - fraction).abs() < 1e-15);
            worst_uniform = worst_uniform.max((lambda - fraction).abs());
        }
    }
    check(
        violations == 0 && worst_uniform < 1e-12 && worst_oracle < 1e-12,
        format!("10000 cases, {violations} violations; uniform |λ − fraction| ≤ {worst_uniform:.1e}; oracle gap {worst_oracle:.1e}"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for batch in 0..1000 {
        let modality = [Modality::Ge, Modality::Lo, Modality::Cip][batch % 3];
        let k = modality.num_levels();
        let step = modality.level_step();
        let n_train = rng.random_range(1..200);
        let train_scores: Vec<f64> = (0..n_train).map(|_| rng.random_range(0..k) as f64 * step).collect();
        let table = WeightTable::from_scores(modality, &train_scores).unwrap();

        // Scalar oracle: count, w = N/(c·k), average w·|y − ŷ|.
        let mut counts = vec![0usize; k];
        for s in &train_scores {
            counts[(s / step).round() as usize] += 1;
        }
        let b = rng.random_range(1..32);
        let targets: Vec<f64> = (0..b).map(|_| train_scores[rng.random_range(0..n_train)]).collect();
        let preds: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..modality.range_max())).collect();
        let mut expected = 0.0;
        for (y, p) in targets.iter().zip(&preds) {
            let c = counts[(y / step).round() as usize] as f64;
            expected += n_train as f64 / (c * k as f64) * (y - p).abs();
        }
        expected /= b as f64;

        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::new(&[b], preds.clone()).unwrap(), true);
        let loss = weighted_l1_loss(&mut tape, pv, &targets, &table).unwrap();
        let got = tape.value(loss).data()[0];
        worst = worst.max((got - expected).abs() / expected.abs().max(1.0));
    }

    let preds: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..100.0)).collect();
    let targets: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..100.0)).collect();
    let mut tape = Tape::new();
    let pv = tape.leaf(Tensor::new(&[50], preds.clone()).unwrap(), true);
    let loss = tape.weighted_l1(pv, &targets, &[1.0; 50]).unwrap();
    let mae = quadgate::train::evaluate(&preds, &targets).unwrap().mae;
    let exact = tape.value(loss).data()[0] == mae;
    check(
        worst <= 1e-12 && exact,
        format!("1000 batches, worst gap {worst:.1e}; unit weights equal plain MAE exactly: {exact}"),
    )
}

fn criterion_5() -> Verdict {
    let mut sched = CosineWarmRestarts::new(1e-5, 0.0, 100, 2).unwrap();
    let mut worst: f64 = 0.0;
    let mut restarts = Vec::new();
    for step in 0..700u64 {
        let (t_cur, period) = match step {
            s if s < 100 => (s, 100),
            s if s < 300 => (s - 100, 200),
            s => (s - 300, 400),
        };
        let closed = 1e-5 * (1.0 + (std::f64::consts::PI * t_cur as f64 / period as f64).cos()) / 2.0;
        worst = worst.max((sched.lr() - closed).abs());
        if sched.tick() {
            restarts.push(step + 1);
        }
    }
    check(
        worst <= 1e-15 && restarts == [100, 300, 700],
        format!("700 steps, worst gap {worst:.1e}; restarts at {restarts:?}"),
    )
}

struct Surrogate {
    report: TrainReport,
    csv: Vec<u8>,
    elapsed: Duration,
}

fn surrogate_run(samples: &[Sample], n_train: usize, epochs: usize, transmix: bool, dir: &Path, tag: &str) -> quadgate::Result<Surrogate> {
    let (train_set, test_set) = samples.split_at(n_train);
    let mut cfg = ModelConfig::desk();
    cfg.output_scale = Modality::Cip.range_max();
    let mut model = QCrossModel::new(cfg, 7)?;
    let tc = TrainConfig {
        epochs,
        seed: 7,
        transmix,
        ..TrainConfig::desk(Modality::Cip)
    };
    let csv_path = dir.join(format!("{tag}.csv"));
    let outputs = RunOutputs {
        metrics_csv: Some(&csv_path),
        ..Default::default()
    };
    let start = Instant::now();
    let report = train(&mut model, train_set, test_set, &tc, &outputs, &mut |_| {})?;
    let elapsed = start.elapsed();
    let csv = std::fs::read(&csv_path).expect("metrics csv written");
    Ok(Surrogate { report, csv, elapsed })
}

fn surrogate_samples() -> Vec<Sample> {
    generate_synthetic(&SyntheticSpec::new(600, 64, Modality::Cip, 7))
}

fn criterion_6(run: &quadgate::Result<Surrogate>) -> Verdict {
    let run = match run {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("training failed: {e}")),
    };
    let losses = run.report.train_losses();
    let (first, last) = (losses[0], *losses.last().unwrap());
    let test = run.report.last(Split::Test).unwrap().metrics;
    let pc = test.pc.unwrap_or(f64::NAN);
    check(
        last < 0.5 * first && pc >= 0.8 && test.mae <= 8.0 && run.elapsed <= Duration::from_secs(1200),
        format!(
            "train loss {first:.3} → {last:.3} (ratio {:.3}); test PC {pc:.3}, MAE {:.3}; {:.0} s",
            last / first,
            test.mae,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(dir: &Path) -> Verdict {
    // Imbalanced: most scores near zero, a thin tail of severe cases.
    let mut spec = SyntheticSpec::new(300, 64, Modality::Cip, 11);
    spec.skew = 6.0;
    let samples = generate_synthetic(&spec);
    let runs = (
        surrogate_run(&samples, 200, 6, false, dir, "ablation_off"),
        surrogate_run(&samples, 200, 6, true, dir, "ablation_on"),
    );
    match runs {
        (Ok(off), Ok(on)) => {
            let mae_off = off.report.last(Split::Test).unwrap().metrics.mae;
            let mae_on = on.report.last(Split::Test).unwrap().metrics.mae;
            let change = (mae_on - mae_off) / mae_off;
            let holds = change <= 0.05;
            Verdict::Report(format!(
                "test MAE without {mae_off:.3}, with {mae_on:.3} ({:+.1}%): {}",
                100.0 * change,
                if holds { "within the 5% band" } else { "worse by more than 5%" }
            ))
        }
        (a, b) => Verdict::Report(format!(
            "a run failed: {:?} / {:?}",
            a.err().map(|e| e.to_string()),
            b.err().map(|e| e.to_string())
        )),
    }
}

fn criterion_8() -> Verdict {
    let cfg = ModelConfig::gradcheck(16);
    let members: Vec<QCrossModel> = (1..=3).map(|s| QCrossModel::new(cfg.clone(), s).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images: Vec<Tensor> = (0..20)
        .map(|_| Tensor::new(&[1, 16, 16], (0..256).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let member_preds: Vec<Vec<f64>> = members
        .iter()
        .map(|m| images.iter().map(|x| m.predict(x).unwrap()).collect())
        .collect();
    let ensemble = Ensemble::new(members).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in images.iter().enumerate() {
        let mean = (member_preds[0][i] + member_preds[1][i] + member_preds[2][i]) / 3.0;
        worst = worst.max((ensemble.predict(x).unwrap() - mean).abs());
    }
    check(worst <= 1e-15, format!("20 images, worst gap {worst:.1e}"))
}

fn criterion_9(first: &quadgate::Result<Surrogate>, dir: &Path) -> Verdict {
    let Ok(first) = first else {
        return Verdict::Fail("first run failed".into());
    };
    match surrogate_run(&surrogate_samples(), 500, 10, true, dir, "rerun") {
        Ok(second) => check(
            first.csv == second.csv,
            format!("metrics CSVs of two runs ({} bytes) are bit-identical: {}", first.csv.len(), first.csv == second.csv),
        ),
        Err(e) => Verdict::Fail(format!("rerun failed: {e}")),
    }
}

fn main() -> ExitCode {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Report(d) => ("REPORT", d),
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
    };

    if wanted(1) {
        report(1, "gradient correctness", criterion_1());
    }
    if wanted(2) {
        report(2, "stage-size law", criterion_2());
    }
    if wanted(3) {
        report(3, "TransMix algebra", criterion_3());
    }
    if wanted(4) {
        report(4, "loss/weights oracle", criterion_4());
    }
    if wanted(5) {
        report(5, "scheduler oracle", criterion_5());
    }
    let surrogate = (wanted(6) || wanted(9)).then(|| surrogate_run(&surrogate_samples(), 500, 10, true, dir.path(), "surrogate"));
    if let (true, Some(run)) = (wanted(6), &surrogate) {
        report(6, "surrogate training", criterion_6(run));
    }
    if wanted(7) {
        report(7, "TransMix ablation direction (report only)", criterion_7(dir.path()));
    }
    if wanted(8) {
        report(8, "ensemble contract", criterion_8());
    }
    if let (true, Some(run)) = (wanted(9), &surrogate) {
        report(9, "determinism", criterion_9(run, dir.path()));
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
