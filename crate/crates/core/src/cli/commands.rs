use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fxp::RealTensor;
use crate::kernels::{bench_gemm, preset, AccMode, BenchRecord, PRESETS};
use crate::netgraph::{
    accuracy, calibrate_model, carry_statistics, forward_trace, load_model, predictions, save_model,
    LayerCarryStats, ModelManifest, MANIFEST_FILE,
};
use crate::train::{make_synthetic_dataset, Dataset, EpochMetrics, TrainConfig, Trainer};

use super::provenance::RunManifest;
use super::report::{DivergenceInfo, TrainSummary, SUMMARY_FILE};
use super::{resolve_seed, BenchArgs, CalibrateArgs, CarrySimArgs, DataArgs, InferArgs, TrainArgs};

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(PathBuf::from(name))
}

fn write_jsonl<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(PathBuf::from(name))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(PathBuf::from(name))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dataset(data: &DataArgs, seed: u64) -> Result<Dataset> {
    make_synthetic_dataset(data.data_seed.unwrap_or(seed), data.samples, data.difficulty)
}

fn data_params(data: &DataArgs, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "data_seed": data.data_seed.unwrap_or(seed),
        "samples": data.samples,
        "difficulty": data.difficulty,
    })
}

/// Re-targets a model to another accumulator width.
fn with_accumulator_bits(model: ModelManifest, bits: u32) -> Result<ModelManifest> {
    let mut layers = model.layers;
    for l in &mut layers {
        if let Some(c) = l.cyclic {
            l.cyclic = Some(c.with_bits(bits - l.buffered as u32)?);
        }
    }
    ModelManifest::new(bits, model.seed, layers)
}

#[derive(Debug, Serialize)]
struct CalibrationRow {
    p_target: f64,
    layer: usize,
    name: String,
    step_size: f64,
    bits: u32,
    rate_percent: f64,
    reachable: bool,
}

pub(super) fn calibrate(a: CalibrateArgs, verbose: u8) -> Result<()> {
    let mut model = load_model(&a.model)?;
    if let Some(b) = a.bits {
        model = with_accumulator_bits(model, b)?;
    }
    let seed = resolve_seed(a.seed, Some(model.seed))?;
    let data = dataset(&a.data, seed)?;
    let calib = data.train.head(a.calibration_samples).tensor();
    create_dir(&a.out)?;

    let mut rows = Vec::new();
    let mut files = Vec::new();
    let sweep = a.p.len() > 1;
    for &p in &a.p {
        let mut m = model.clone();
        let report = calibrate_model(&mut m, &calib, p, a.shared)?;
        for r in report {
            rows.push(CalibrationRow {
                p_target: p,
                layer: r.layer,
                name: r.name,
                step_size: r.calibration.step_size,
                bits: r.calibration.bits,
                rate_percent: r.calibration.rate * 100.0,
                reachable: r.calibration.reachable,
            });
        }
        let dir = if sweep { PathBuf::from(format!("p{p}")) } else { PathBuf::new() };
        create_dir(&a.out.join(&dir))?;
        save_model(&m, &a.out.join(&dir))?;
        files.push(dir.join(MANIFEST_FILE));
        if verbose > 0 {
            eprintln!("calibrated p = {p}%");
        }
    }
    files.push(write_csv(&a.out, "calibration.csv", &rows)?);

    println!("{:>8} {:>3} {:<10} {:>12} {:>5} {:>9}", "p (%)", "l", "layer", "step", "bits", "rate (%)");
    for r in &rows {
        println!(
            "{:>8} {:>3} {:<10} {:>12.6e} {:>5} {:>9.3}{}",
            r.p_target,
            r.layer,
            r.name,
            r.step_size,
            r.bits,
            r.rate_percent,
            if r.reachable { "" } else { "  unreachable" }
        );
    }

    let unreachable: Vec<String> = rows
        .iter()
        .filter(|r| !r.reachable)
        .map(|r| format!("layer {} ({}) at p = {}%: best rate {:.3}%", r.layer, r.name, r.p_target, r.rate_percent))
        .collect();
    let mut run = RunManifest::new(
        "calibrate",
        seed,
        serde_json::json!({
            "model": a.model.display().to_string(),
            "p": a.p,
            "accumulator_bits": model.accumulator_bits,
            "shared": a.shared,
            "calibration_samples": a.calibration_samples,
            "data": data_params(&a.data, seed),
        }),
    );
    if !unreachable.is_empty() {
        run.status = "unreachable".into();
    }
    run.write(&a.out, &files)?;
    if unreachable.is_empty() {
        Ok(())
    } else {
        for u in &unreachable {
            eprintln!("  {u}");
        }
        Err(Error::Unreachable(format!("{} layer target(s) missed", unreachable.len())))
    }
}

fn load_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let (mut cfg, file_seed) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg: TrainConfig = toml::from_str(&text)
                .map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
            let seed = table.contains_key("seed").then_some(cfg.seed);
            (cfg, seed)
        }
        None => (TrainConfig::default(), None),
    };
    cfg.seed = resolve_seed(a.seed, file_seed)?;
    if let Some(v) = a.accumulator_bits {
        cfg.accumulator_bits = v;
    }
    if let Some(v) = a.weight_bits {
        cfg.weight_bits = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = &a.slope {
        cfg.slope = v.clone();
    }
    if let Some(v) = &a.cyclic {
        cfg.cyclic = v.clone();
    }
    if let Some(v) = a.p_target {
        cfg.p_target = v;
    }
    if let Some(v) = a.lambda_overflow {
        cfg.lambda_overflow = v;
    }
    if let Some(v) = a.lambda_carry {
        cfg.lambda_carry = v;
    }
    if let Some(v) = &a.last_stage {
        cfg.last_stage = v.clone();
    }
    if let Some(v) = a.epochs_pretrain {
        cfg.epochs.pretrain = v;
    }
    if let Some(v) = a.epochs_warmup {
        cfg.epochs.warmup = v;
    }
    if let Some(v) = a.epochs_finetune {
        cfg.epochs.finetune = v;
    }
    if let Some(v) = a.samples {
        cfg.dataset.samples = v;
    }
    if let Some(v) = a.difficulty {
        cfg.dataset.difficulty = v;
    }
    cfg.simulate_carries |= a.simulate_carries;
    cfg.schedule.enabled |= a.schedule;
    cfg.shared_step |= a.shared_step;
    cfg.full_precision |= a.full_precision;
    if cfg.full_precision && a.last_stage.is_none() {
        cfg.last_stage = "pretrain".into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_metrics(m: &[EpochMetrics]) {
    for e in m {
        eprintln!(
            "{:<9} {:>3}  acc {:.4}  overflow {:.4}  loss {:.4}",
            e.stage, e.epoch, e.acc, e.overflow_rate, e.loss
        );
    }
}

pub(super) fn train(a: TrainArgs, verbose: u8) -> Result<()> {
    let cfg = load_train_config(&a)?;
    let data = make_synthetic_dataset(cfg.seed, cfg.dataset.samples, cfg.dataset.difficulty)?;
    create_dir(&a.out)?;
    let mut trainer = Trainer::new(cfg.clone(), &data)?;
    let result = trainer.run(&data);
    if verbose > 0 {
        print_metrics(trainer.metrics());
    }
    let mut files = vec![write_jsonl(&a.out, "metrics.jsonl", trainer.metrics())?];
    let params = serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    let mut run = RunManifest::new("train", cfg.seed, params);
    match result {
        Ok(out) => {
            save_model(&out.model, &a.out)?;
            files.push(PathBuf::from(MANIFEST_FILE));
            let rows: Vec<CalibrationRow> = out
                .calibration
                .iter()
                .map(|r| CalibrationRow {
                    p_target: cfg.p_target,
                    layer: r.layer,
                    name: r.name.clone(),
                    step_size: r.calibration.step_size,
                    bits: r.calibration.bits,
                    rate_percent: r.calibration.rate * 100.0,
                    reachable: r.calibration.reachable,
                })
                .collect();
            files.push(write_csv(&a.out, "calibration.csv", &rows)?);
            let summary = TrainSummary {
                status: "ok".into(),
                test_acc: Some(out.test.acc),
                overflow_rate: Some(out.test.overflow_rate),
                carry_std: out.test.carry_std,
                divergence: None,
                schedule: out.schedule,
            };
            files.push(write_json(&a.out, SUMMARY_FILE, &summary)?);
            run.write(&a.out, &files)?;
            println!(
                "test accuracy {:.2}%  overflow rate {:.2}%",
                out.test.acc * 100.0,
                out.test.overflow_rate * 100.0
            );
            Ok(())
        }
        Err(Error::Divergence { stage, epoch, accuracy }) => {
            let summary = TrainSummary {
                status: "diverged".into(),
                test_acc: None,
                overflow_rate: None,
                carry_std: None,
                divergence: Some(DivergenceInfo {
                    stage: stage.clone(),
                    epoch,
                    accuracy: accuracy.is_finite().then_some(accuracy),
                }),
                schedule: None,
            };
            files.push(write_json(&a.out, SUMMARY_FILE, &summary)?);
            run.status = "diverged".into();
            run.write(&a.out, &files)?;
            Err(Error::Divergence { stage, epoch, accuracy })
        }
        Err(e) => Err(e),
    }
}

/// A `.bin` real tensor blob `[batch, features]`, or a headerless CSV.
fn read_input(path: &Path, features: usize) -> Result<RealTensor> {
    if path.extension().is_some_and(|e| e == "bin") {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let t = RealTensor::read_blob(std::io::BufReader::new(f))?;
        if t.shape.len() != 2 || t.shape[1] != features {
            return Err(Error::Format(format!(
                "{}: tensor shape {:?}, model expects [batch, {features}]",
                path.display(),
                t.shape
            )));
        }
        return Ok(t);
    }
    read_input_csv(path, features)
}

fn read_input_csv(path: &Path, features: usize) -> Result<RealTensor> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != features {
            return Err(Error::Format(format!(
                "{} row {}: {} columns, model expects {features}",
                path.display(),
                rows + 1,
                rec.len()
            )));
        }
        for f in rec.iter() {
            values.push(f.parse::<f64>().map_err(|_| {
                Error::Format(format!("{} row {}: `{f}` is not a number", path.display(), rows + 1))
            })?);
        }
        rows += 1;
    }
    RealTensor::new(vec![rows, features], values)
}

pub(super) fn infer(a: InferArgs, verbose: u8) -> Result<()> {
    let model = load_model(&a.model)?;
    let mode: AccMode = a.acc_mode.parse()?;
    mode.validate()?;
    let seed = resolve_seed(a.seed, Some(model.seed))?;
    let (x, labels) = match &a.input {
        Some(p) => (read_input(p, model.in_features())?, None),
        None => {
            let d = dataset(&a.data, seed)?;
            (d.test.tensor(), Some(d.test.y))
        }
    };
    let trace = forward_trace(&model, &x, mode, a.simulate_carries)?;
    let preds = predictions(&trace.output);
    let classes = trace.output.shape.last().copied().unwrap_or(0);
    create_dir(&a.out)?;

    let path = a.out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut header = vec!["sample".to_string(), "prediction".into()];
    if labels.is_some() {
        header.push("label".into());
    }
    header.extend((0..classes).map(|c| format!("logit_{c}")));
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (s, &p) in preds.iter().enumerate() {
        let mut rec = vec![s.to_string(), p.to_string()];
        if let Some(l) = &labels {
            rec.push(l[s].to_string());
        }
        rec.extend(trace.output.values[s * classes..(s + 1) * classes].iter().map(|v| format!("{v:.17e}")));
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let acc = labels.as_ref().map(|l| accuracy(&trace.output, l));
    let summary = serde_json::json!({
        "acc_mode": mode.to_string(),
        "samples": preds.len(),
        "accuracy": acc,
    });
    let files = vec![PathBuf::from("predictions.csv"), write_json(&a.out, "infer.json", &summary)?];
    RunManifest::new(
        "infer",
        seed,
        serde_json::json!({
            "model": a.model.display().to_string(),
            "acc_mode": mode.to_string(),
            "input": a.input.as_ref().map(|p| p.display().to_string()),
            "simulate_carries": a.simulate_carries,
            "data": data_params(&a.data, seed),
        }),
    )
    .write(&a.out, &files)?;
    if verbose > 0 {
        eprintln!("{} samples under {mode}", preds.len());
    }
    match acc {
        Some(acc) => println!("accuracy {:.2}% ({} samples, {mode})", acc * 100.0, preds.len()),
        None => println!("{} predictions written ({mode})", preds.len()),
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || Error::Config(vec![format!("shape `{s}` is not MxKxN")]);
    if parts.len() != 3 {
        return Err(bad());
    }
    let d: Vec<usize> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    if d.contains(&0) {
        return Err(bad());
    }
    Ok((d[0], d[1], d[2]))
}

#[derive(Debug, Serialize)]
struct RatioRow {
    shape: String,
    reference: String,
    mode: String,
    ratio: f64,
}

pub(super) fn bench(a: BenchArgs, verbose: u8) -> Result<()> {
    let mut bad = Vec::new();
    let mut shapes: Vec<(String, (usize, usize, usize))> = Vec::new();
    for name in &a.preset {
        match preset(name) {
            Some(p) => shapes.push((p.name.to_string(), p.gemm_shape())),
            None => bad.push(format!(
                "unknown preset `{name}` (known: {})",
                PRESETS.iter().map(|p| p.name).collect::<Vec<_>>().join(", ")
            )),
        }
    }
    for s in &a.shape {
        match parse_shape(s) {
            Ok(d) => shapes.push((s.clone(), d)),
            Err(Error::Config(mut v)) => bad.append(&mut v),
            Err(e) => return Err(e),
        }
    }
    let mut modes = Vec::new();
    for m in &a.modes {
        match m.parse::<AccMode>().and_then(|mode| mode.validate().map(|_| mode)) {
            Ok(mode) => modes.push(mode),
            Err(e) => bad.push(format!("mode `{m}`: {e}")),
        }
    }
    if modes.is_empty() {
        bad.push("no accumulator modes given".into());
    }
    if a.reps == 0 {
        bad.push("reps must be at least 1".into());
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    if shapes.is_empty() {
        shapes = PRESETS.iter().map(|p| (p.name.to_string(), p.gemm_shape())).collect();
    }
    let seed = resolve_seed(a.seed, None)?;

    let mut records: Vec<BenchRecord> = Vec::new();
    for (label, dims) in &shapes {
        for &mode in &modes {
            let r = bench_gemm(label, *dims, mode, a.reps, seed)?;
            if verbose > 0 {
                eprintln!("{label} {mode}: {:.3} ms", r.median_ns / 1e6);
            }
            records.push(r);
        }
    }
    create_dir(&a.out)?;

    let reference = modes[0];
    let mut ratios = Vec::new();
    let mut table = String::new();
    table.push_str(&format!("{:<20}", "shape"));
    for m in &modes {
        table.push_str(&format!(" {:>22}", format!("{m} (ms)")));
    }
    for m in &modes[1..] {
        table.push_str(&format!(" {:>32}", format!("{reference} / {m}")));
    }
    table.push('\n');
    for (s, (label, _)) in shapes.iter().enumerate() {
        let row = &records[s * modes.len()..(s + 1) * modes.len()];
        table.push_str(&format!("{label:<20}"));
        for r in row {
            table.push_str(&format!(" {:>22.3}", r.median_ns / 1e6));
        }
        for (m, r) in modes[1..].iter().zip(&row[1..]) {
            let ratio = row[0].median_ns / r.median_ns;
            table.push_str(&format!(" {ratio:>32.2}"));
            ratios.push(RatioRow {
                shape: label.clone(),
                reference: reference.to_string(),
                mode: m.to_string(),
                ratio,
            });
        }
        table.push('\n');
    }
    print!("{table}");

    let files = vec![
        write_csv(&a.out, "bench.csv", &records)?,
        write_jsonl(&a.out, "bench.jsonl", &records)?,
        write_csv(&a.out, "ratios.csv", &ratios)?,
    ];
    let mode_names: Vec<String> = modes.iter().map(|m| m.to_string()).collect();
    RunManifest::new(
        "bench",
        seed,
        serde_json::json!({
            "shapes": shapes.iter().map(|(l, (m, k, n))| serde_json::json!({"label": l, "M": m, "K": k, "N": n})).collect::<Vec<_>>(),
            "modes": mode_names,
            "reps": a.reps,
            "threads": 1,
        }),
    )
    .write(&a.out, &files)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct NeuronRow {
    neuron_id: usize,
    layer: usize,
    mean: f64,
    var: f64,
}

#[derive(Debug, Serialize)]
struct CarrySummaryRow {
    model: String,
    layer: String,
    neurons: usize,
    carry_mean: f64,
    carry_std: f64,
}

fn summarize(label: &str, stats: &[LayerCarryStats]) -> Vec<CarrySummaryRow> {
    let mut rows: Vec<CarrySummaryRow> = stats
        .iter()
        .map(|s| CarrySummaryRow {
            model: label.into(),
            layer: s.name.clone(),
            neurons: s.mean.len(),
            carry_mean: s.mean_carry(),
            carry_std: s.mean_std(),
        })
        .collect();
    let n = stats.len().max(1) as f64;
    rows.push(CarrySummaryRow {
        model: label.into(),
        layer: "all".into(),
        neurons: stats.iter().map(|s| s.mean.len()).sum(),
        carry_mean: stats.iter().map(|s| s.mean_carry()).sum::<f64>() / n,
        carry_std: stats.iter().map(|s| s.mean_std()).sum::<f64>() / n,
    });
    rows
}

pub(super) fn carry_sim(a: CarrySimArgs, verbose: u8) -> Result<()> {
    let model = load_model(&a.model)?;
    let seed = resolve_seed(a.seed, Some(model.seed))?;
    let data = dataset(&a.data, seed)?;
    let x = data.test.tensor();
    let stats = carry_statistics(&model, &x)?;
    create_dir(&a.out)?;

    let mut neurons = Vec::new();
    for s in &stats {
        for (m, v) in s.mean.iter().zip(&s.var) {
            neurons.push(NeuronRow {
                neuron_id: neurons.len(),
                layer: s.layer,
                mean: *m,
                var: *v,
            });
        }
    }
    let mut summary = summarize("model", &stats);
    if let Some(b) = &a.baseline {
        let base = load_model(b)?;
        summary.extend(summarize("baseline", &carry_statistics(&base, &x)?));
    }
    println!("{:<9} {:<10} {:>8} {:>12} {:>12}", "model", "layer", "neurons", "carry mean", "carry std");
    for r in &summary {
        println!(
            "{:<9} {:<10} {:>8} {:>12.4} {:>12.4}",
            r.model, r.layer, r.neurons, r.carry_mean, r.carry_std
        );
    }
    let totals: Vec<&CarrySummaryRow> = summary.iter().filter(|r| r.layer == "all").collect();
    if let [m, b] = totals[..] {
        if b.carry_std > 0.0 {
            println!("std ratio model/baseline: {:.3}", m.carry_std / b.carry_std);
        }
    }
    if verbose > 0 {
        eprintln!("{} neurons over {} samples", neurons.len(), data.test.len());
    }
    let files = vec![
        write_csv(&a.out, "carry.csv", &neurons)?,
        write_csv(&a.out, "carry_summary.csv", &summary)?,
    ];
    RunManifest::new(
        "carry-sim",
        seed,
        serde_json::json!({
            "model": a.model.display().to_string(),
            "baseline": a.baseline.as_ref().map(|p| p.display().to_string()),
            "data": data_params(&a.data, seed),
        }),
    )
    .write(&a.out, &files)?;
    Ok(())
}
