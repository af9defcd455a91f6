use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use quadgate::augment::transmix_pair;
use quadgate::autodiff::Fault;
use quadgate::data::{self, generate_synthetic, load_checkpoint, load_dataset, write_dataset, write_pgm, Sample, SyntheticSpec};
use quadgate::gradcheck::{operation_checks, TOLERANCE};
use quadgate::model::{gradcheck_model, mean_prediction, thread_count, AggregatorKind, EncoderKind, Ensemble, ModelConfig, QCrossModel};
use quadgate::scores::Modality;
use quadgate::train::{evaluate, AdamWConfig, EpochLog, Metrics, RunOutputs, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::settings::Settings;
use crate::{EvalArgs, Fail, GradcheckArgs, MixdemoArgs, SynthArgs, TrainArgs};

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail::usage(format!("{}: {e}", path.display()))
}

fn scores_file(dir: &Path) -> PathBuf {
    dir.join("scores.csv")
}

fn load(dir: &Path, modality: Modality, cfg: &ModelConfig) -> Result<Vec<Sample>, Fail> {
    Ok(load_dataset(dir, &scores_file(dir), modality, cfg.input_height, cfg.input_width)?)
}

pub fn synth(a: SynthArgs) -> Result<(), Fail> {
    let mut s = Settings::new(&[
        ("out", "synthetic"),
        ("n", "100"),
        ("side", "64"),
        ("modality", "cip"),
        ("seed", "0"),
        ("max_blobs", "3"),
        ("noise", "0.05"),
        ("skew", ""),
    ]);
    if let Some(path) = &a.config {
        s.apply_file(path)?;
    }
    s.set_opt("out", a.out.map(|p| p.display().to_string()))?;
    s.set_opt("n", a.n)?;
    s.set_opt("side", a.side)?;
    s.set_opt("modality", a.modality)?;
    s.set_opt("seed", a.seed)?;

    let modality: Modality = s.get("modality")?;
    let mut spec = SyntheticSpec::new(s.get("n")?, s.get("side")?, modality, s.get("seed")?);
    spec.max_blobs = s.get("max_blobs")?;
    spec.noise = s.get("noise")?;
    match s.get_opt("skew")? {
        Some(v) => spec.skew = v,
        None => s.set("skew", spec.skew)?,
    }
    if spec.count == 0 || spec.side == 0 {
        return Err(Fail::usage("n and side must be positive"));
    }
    println!("{}", s.audit("synth"));

    let out = PathBuf::from(s.raw("out"));
    let samples = generate_synthetic(&spec);
    write_dataset(&out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn model_preset(name: &str) -> Result<(ModelConfig, fn(Modality) -> TrainConfig), Fail> {
    match name {
        "desk" => Ok((ModelConfig::desk(), TrainConfig::desk)),
        "paper" => Ok((ModelConfig::paper(), TrainConfig::paper)),
        "tiny" => Ok((ModelConfig::gradcheck(16), TrainConfig::desk)),
        other => Err(Fail::usage(format!("unknown preset `{other}` (expected desk|paper|tiny)"))),
    }
}

/// Fills empty numeric settings from the preset so the audit line shows what runs.
fn fill<T: ToString>(s: &mut Settings, key: &str, value: T) -> Result<(), Fail> {
    if s.raw(key).is_empty() {
        s.set(key, value)?;
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Fail> {
    let mut s = Settings::new(&[
        ("data", ""),
        ("test_data", ""),
        ("test_fraction", "0.2"),
        ("out", "model.qgc"),
        ("metrics", ""),
        ("preset", "desk"),
        ("modality", "cip"),
        ("regions", "4"),
        ("aggregator", "vit"),
        ("encoder", "pvt"),
        ("output_scale", ""),
        ("epochs", ""),
        ("batch_size", ""),
        ("lr", ""),
        ("min_lr", ""),
        ("restart_mult", ""),
        ("beta1", ""),
        ("beta2", ""),
        ("eps", ""),
        ("weight_decay", ""),
        ("transmix", "true"),
        ("seed", "0"),
        ("threads", ""),
    ]);
    if let Some(path) = &a.config {
        s.apply_file(path)?;
    }
    s.set_opt("data", a.data.map(|p| p.display().to_string()))?;
    s.set_opt("test_data", a.test_data.map(|p| p.display().to_string()))?;
    s.set_opt("epochs", a.epochs)?;
    s.set_opt("seed", a.seed)?;
    if a.no_transmix {
        s.set("transmix", false)?;
    }
    s.set_opt("regions", a.regions)?;
    s.set_opt("aggregator", a.aggregator)?;
    s.set_opt("modality", a.modality)?;
    s.set_opt("out", a.out.map(|p| p.display().to_string()))?;
    s.set_opt("metrics", a.metrics.map(|p| p.display().to_string()))?;

    let modality: Modality = s.get("modality")?;
    let (mut cfg, train_preset) = model_preset(s.raw("preset"))?;
    let defaults = train_preset(modality);
    fill(&mut s, "epochs", defaults.epochs)?;
    fill(&mut s, "batch_size", defaults.batch_size)?;
    fill(&mut s, "lr", defaults.lr)?;
    fill(&mut s, "min_lr", defaults.min_lr)?;
    fill(&mut s, "restart_mult", defaults.restart_mult)?;
    fill(&mut s, "beta1", defaults.adamw.beta1)?;
    fill(&mut s, "beta2", defaults.adamw.beta2)?;
    fill(&mut s, "eps", defaults.adamw.eps)?;
    fill(&mut s, "weight_decay", defaults.adamw.weight_decay)?;
    fill(&mut s, "threads", thread_count())?;
    fill(&mut s, "output_scale", modality.range_max())?;
    let out = PathBuf::from(s.raw("out"));
    fill(&mut s, "metrics", out.with_extension("metrics.csv").display())?;

    let regions: usize = s.get("regions")?;
    if ![2, 4, 6].contains(&regions) {
        return Err(Fail::usage(format!("regions must be 2, 4 or 6, got {regions}")));
    }
    // Region size stays that of the four-region layout; six regions widen the input.
    let region_w = cfg.input_width / 2;
    cfg.num_regions = regions;
    if regions == 6 {
        cfg.input_width = region_w * 3;
    }
    cfg.aggregator.kind = s.get::<AggregatorKind>("aggregator")?;
    cfg.encoder_kind = s.get::<EncoderKind>("encoder")?;
    cfg.output_scale = s.get("output_scale")?;
    cfg.validate()?;

    let tc = TrainConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        lr: s.get("lr")?,
        min_lr: s.get("min_lr")?,
        restart_mult: s.get("restart_mult")?,
        adamw: AdamWConfig {
            beta1: s.get("beta1")?,
            beta2: s.get("beta2")?,
            eps: s.get("eps")?,
            weight_decay: s.get("weight_decay")?,
        },
        transmix: s.flag("transmix")?,
        modality,
        seed: s.get("seed")?,
        threads: s.get("threads")?,
    };
    tc.validate()?;
    if s.raw("data").is_empty() {
        return Err(Fail::usage("train needs --data (or `data = DIR` in the config file)"));
    }
    println!("{}", s.audit("train"));

    let all = load(Path::new(s.raw("data")), modality, &cfg)?;
    let (train_set, test_set) = if s.raw("test_data").is_empty() {
        let fraction: f64 = s.get("test_fraction")?;
        if !(0.0..1.0).contains(&fraction) {
            return Err(Fail::usage(format!("test_fraction must be in [0, 1), got {fraction}")));
        }
        hold_out(all, fraction, tc.seed)
    } else {
        (all, load(Path::new(s.raw("test_data")), modality, &cfg)?)
    };
    if test_set.is_empty() {
        return Err(Fail::usage("the test split is empty"));
    }

    let mut model = QCrossModel::new(cfg, tc.seed)?;
    println!(
        "model: {} parameters; {} train / {} test samples",
        model.count_params(),
        train_set.len(),
        test_set.len()
    );
    let metrics_path = PathBuf::from(s.raw("metrics"));
    let mut meta = BTreeMap::new();
    meta.insert("modality".to_string(), modality.to_string());
    meta.insert("seed".to_string(), tc.seed.to_string());
    meta.insert("epochs".to_string(), tc.epochs.to_string());
    meta.insert("transmix".to_string(), tc.transmix.to_string());
    let outputs = RunOutputs {
        metrics_csv: Some(&metrics_path),
        checkpoint: Some(&out),
        meta,
    };
    println!("{:>5}  {:<5}  {:>9}  {:>7}  {:>9}  {:>10}  {:>9}", "epoch", "split", "mae", "pc", "ae_sd", "lr", "loss");
    let mut print_row = |l: &EpochLog| {
        let pc = l.metrics.pc.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:>5}  {:<5}  {:>9.4}  {:>7}  {:>9.4}  {:>10.3e}  {:>9.4}",
            l.epoch, l.split, l.metrics.mae, pc, l.metrics.ae_sd, l.lr, l.loss
        );
    };
    match quadgate::train::train(&mut model, &train_set, &test_set, &tc, &outputs, &mut print_row) {
        Ok(_) => {
            println!("checkpoint {}  metrics {}", out.display(), metrics_path.display());
            Ok(())
        }
        Err(e @ quadgate::Error::NonFinite(_)) => Err(Fail::numerical(format!(
            "{e}; last good parameters saved to {}",
            out.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Seeded shuffle, then the last `fraction` of the samples become the test split.
fn hold_out(mut all: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let n_test = ((all.len() as f64) * fraction).ceil() as usize;
    let test = all.split_off(all.len() - n_test.min(all.len()));
    (all, test)
}

fn modality_for(flag: Option<String>, meta: &BTreeMap<String, String>) -> Result<Modality, Fail> {
    let raw = flag.or_else(|| meta.get("modality").cloned()).unwrap_or_else(|| "cip".to_string());
    Ok(raw.parse()?)
}

fn metrics_row(name: &str, m: &Metrics) -> String {
    let pc = m.pc.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
    format!("{name:<32}  {:>9.4}  {:>7}  {:>9.4}", m.mae, pc, m.ae_sd)
}

pub fn eval(a: EvalArgs) -> Result<(), Fail> {
    let mut members = Vec::with_capacity(a.ckpt.len());
    let mut meta = BTreeMap::new();
    for path in &a.ckpt {
        let (model, manifest) = load_checkpoint(path)?;
        if meta.is_empty() {
            meta = manifest.meta;
        }
        members.push(model);
    }
    let modality = modality_for(a.modality, &meta)?;
    let ckpts: Vec<String> = a.ckpt.iter().map(|p| p.display().to_string()).collect();
    let threads = thread_count();
    println!(
        "config eval: ckpt={} csv={} data={} modality={modality} threads={threads}",
        ckpts.join(","),
        a.csv.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        a.data.display()
    );
    let ensemble = Ensemble::new(members).map_err(|e| Fail::usage(format!("incompatible checkpoints: {e}")))?;
    let cfg = &ensemble.members[0].config;
    if cfg.channels != 1 {
        return Err(Fail::usage(format!(
            "checkpoint expects {} channels; datasets are single-channel",
            cfg.channels
        )));
    }
    let samples = load(&a.data, modality, cfg)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let targets = data::scores(&samples);

    let mut rows = Vec::new();
    let mut all_preds = Vec::new();
    for (path, model) in ckpts.iter().zip(&ensemble.members) {
        let preds = model.predict_many(&images, threads)?;
        rows.push((path.clone(), evaluate(&preds, &targets)?));
        all_preds.push(preds);
    }
    if all_preds.len() > 1 {
        let mean: Vec<f64> = (0..samples.len())
            .map(|i| mean_prediction(&all_preds.iter().map(|p| p[i]).collect::<Vec<_>>()))
            .collect::<quadgate::Result<_>>()?;
        rows.push(("ensemble".to_string(), evaluate(&mean, &targets)?));
    }

    println!("{:<32}  {:>9}  {:>7}  {:>9}", "model", "mae", "pc", "ae_sd");
    for (name, m) in &rows {
        println!("{}", metrics_row(name, m));
    }
    if let Some(path) = &a.csv {
        let mut w = BufWriter::new(File::create(path).map_err(|e| io_fail(path, e))?);
        writeln!(w, "model,mae,pc,ae_sd").map_err(|e| io_fail(path, e))?;
        for (name, m) in &rows {
            writeln!(w, "{name},{},{},{}", m.mae, m.pc_field(), m.ae_sd).map_err(|e| io_fail(path, e))?;
        }
        w.flush().map_err(|e| io_fail(path, e))?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Fail> {
    let fault = match a.fault.as_deref() {
        None => None,
        Some("gelu") => Some(Fault::Gelu),
        Some("sigmoid") => Some(Fault::Sigmoid),
        Some("softmax") => Some(Fault::Softmax),
        Some(other) => return Err(Fail::usage(format!("unknown fault `{other}`"))),
    };
    if a.size < 16 || a.size % 16 != 0 {
        return Err(Fail::usage(format!("size must be a positive multiple of 16, got {}", a.size)));
    }
    println!("config gradcheck: seed={} size={} tolerance={TOLERANCE}", a.seed, a.size);

    let mut worst: f64 = 0.0;
    let mut failed = 0;
    let mut verdict = |err: f64| {
        worst = worst.max(err);
        if err < TOLERANCE {
            "ok"
        } else {
            failed += 1;
            "FAIL"
        }
    };
    for e in operation_checks(a.seed, fault) {
        println!("op     {:<40} {:>10.3e}  {}", e.name, e.max_relative_error, verdict(e.max_relative_error));
    }
    for b in gradcheck_model(a.size, a.seed, fault)? {
        let shape = format!("{:?}", b.shape);
        println!(
            "param  {:<40} {:<16} {:>10.3e}  {}",
            b.name,
            shape,
            b.max_relative_error,
            verdict(b.max_relative_error)
        );
    }
    if failed == 0 {
        println!("gradcheck PASS  worst {worst:.3e}");
        Ok(())
    } else {
        println!("gradcheck FAIL  {failed} checks at or above {TOLERANCE}  worst {worst:.3e}");
        Err(Fail::numerical(format!("{failed} gradient checks failed")))
    }
}

pub fn mixdemo(a: MixdemoArgs) -> Result<(), Fail> {
    let (model, manifest) = load_checkpoint(&a.ckpt)?;
    let modality = modality_for(a.modality, &manifest.meta)?;
    println!(
        "config mixdemo: ckpt={} data={} modality={modality} out={} pairs={} seed={}",
        a.ckpt.display(),
        a.data.display(),
        a.out.display(),
        a.pairs,
        a.seed
    );
    let samples = load(&a.data, modality, &model.config)?;
    if samples.len() < 2 {
        return Err(Fail::usage("mixdemo needs at least two samples"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_fail(&a.out, e))?;
    let report = a.out.join("report.csv");
    let mut w = BufWriter::new(File::create(&report).map_err(|e| io_fail(&report, e))?);
    let header = "idA,idB,yA,yB,lambda,ybar";
    writeln!(w, "{header}").map_err(|e| io_fail(&report, e))?;
    println!("{header}");

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for k in 0..a.pairs {
        let i = rng.random_range(0..samples.len());
        let mut j = rng.random_range(0..samples.len() - 1);
        if j >= i {
            j += 1;
        }
        let (sa, sb) = (&samples[i], &samples[j]);
        let (_, image, lambda, y_bar) = transmix_pair(sa, sb, &model, &mut rng)?;
        write_pgm(&a.out.join(format!("mix_{k:03}_{}_{}.pgm", sa.id, sb.id)), &image)?;
        let line = format!("{},{},{},{},{},{}", sa.id, sb.id, sa.score, sb.score, lambda, y_bar);
        println!("{line}");
        writeln!(w, "{line}").map_err(|e| io_fail(&report, e))?;
    }
    w.flush().map_err(|e| io_fail(&report, e))?;
    Ok(())
}
