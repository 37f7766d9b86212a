//! Command-line front end. Each subcommand loads its inputs, calls one
//! library entry point and writes its outputs, an effective `config.json`,
//! a deterministic `report.json` and a `meta.json` holding timings.
//!
//! Config files are flat JSON objects. Keys of the adaptation config are
//! unprefixed; other sections use `pretrain.`, `benchmark.` and `toggles.`.
//! Command-line flags override file values.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::io::{
    create_dir, flatten_sections, load_checkpoint, read_flat_config, read_jsonl, read_manifest, reject_leftovers,
    save_checkpoint, take_section, write_atomic, write_dataset, write_json, write_jsonl, CheckpointMeta,
};
use crate::metrics::{benchmark_seed, evaluate, frozen_scores, run_ablation, tabulate, MetricsReport};
use crate::pretrain::{pretrain_with_report, PretrainConfig};
use crate::synth::{make_shift_benchmark_with, BenchmarkConfig, Sample};
use crate::tta::{run_stream, AdaptConfig, StepReport, Toggles};

#[derive(Debug, Parser)]
#[command(
    name = "sdd-tta",
    version,
    about = "Test-time adaptation for surface defect detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shift benchmark as PGM datasets.
    GenData(GenDataArgs),
    /// Train the source model on a labelled dataset.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint online along a sample stream.
    Adapt(AdaptArgs),
    /// Score a checkpoint, or a recorded step stream, against labels.
    Eval(EvalArgs),
    /// Run the four-setting component ablation over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory; receives source/ and target/ datasets.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    source_samples: Option<usize>,
    #[arg(long)]
    target_samples: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Labelled dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; receives model.sddckpt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Source checkpoint; also the frozen supervisor.
    #[arg(long)]
    ckpt: PathBuf,
    /// Target stream manifest, processed in file order.
    #[arg(long)]
    stream: PathBuf,
    /// Output directory for steps.jsonl, report.json and adapted.sddckpt.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p_th: Option<f64>,
    #[arg(long)]
    n_aug: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon_n: Option<usize>,
    #[arg(long)]
    lambda_min: Option<f64>,
    /// Update on every sample regardless of supervisor confidence.
    #[arg(long)]
    no_gate: bool,
    /// Train on the model's own prediction instead of the fused pseudo-label.
    #[arg(long)]
    no_aug_mean: bool,
    /// Hold the class/segmentation loss balance at one half.
    #[arg(long)]
    no_dyn_loss: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Labelled dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to score without adaptation.
    #[arg(long, conflicts_with = "steps", required_unless_present = "steps")]
    ckpt: Option<PathBuf>,
    /// steps.jsonl of an earlier adapt run over the same manifest.
    #[arg(long)]
    steps: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fixed checkpoint; without it every seed generates and pretrains its
    /// own benchmark replicate.
    #[arg(long, requires = "stream")]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    stream: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---- config plumbing ----

/// File values overlaid with flag values.
fn merged_config(file: Option<&Path>, flags: Vec<(&str, Option<Value>)>) -> Result<(Map<String, Value>, String)> {
    let (mut flat, source) = match file {
        Some(p) => (read_flat_config(p)?, p.display().to_string()),
        None => (Map::new(), "command line".to_string()),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            flat.insert(k.to_string(), v);
        }
    }
    Ok((flat, source))
}

fn opt<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|x| serde_json::to_value(x).expect("plain values serialise"))
}

fn flag_off(set: bool) -> Option<Value> {
    set.then_some(Value::Bool(false))
}

fn section<T: Serialize>(prefix: &'static str, value: &T) -> (&'static str, Value) {
    (prefix, serde_json::to_value(value).expect("configs serialise"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn input_record(path: &Path) -> Result<Value> {
    Ok(json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }))
}

/// Wall-clock facts kept apart from the report so reports stay
/// byte-identical across reruns.
fn write_meta(dir: &Path, command: &str, started: SystemTime, elapsed: f64, extra: Value) -> Result<()> {
    let mut meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "elapsed_s": elapsed,
    });
    if let (Value::Object(m), Value::Object(x)) = (&mut meta, extra) {
        m.extend(x);
    }
    write_json(&dir.join("meta.json"), &meta)
}

fn provenance(pairs: &[(&str, String)]) -> std::collections::BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn labelled(samples: &[Sample]) -> bool {
    samples.iter().all(|s| s.label.is_some())
}

// ---- subcommands ----

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (mut flat, source) = merged_config(
        a.config.as_deref(),
        vec![
            ("seed", opt(a.seed)),
            ("benchmark.source_samples", opt(a.source_samples)),
            ("benchmark.target_samples", opt(a.target_samples)),
            ("benchmark.height", opt(a.height)),
            ("benchmark.width", opt(a.width)),
        ],
    )?;
    let seed: u64 = match flat.remove("seed") {
        None => 0,
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("{source}: seed: {e}")))?,
    };
    let bench: BenchmarkConfig = take_section(&mut flat, "benchmark.", &source)?;
    reject_leftovers(&flat, &source)?;

    let b = make_shift_benchmark_with(&bench, seed)?;
    create_dir(&a.out)?;
    write_dataset(&a.out.join("source"), &b.source_data)?;
    write_dataset(&a.out.join("target"), &b.target_stream)?;

    let mut effective = flatten_sections(&[section("benchmark.", &bench)]);
    effective.insert("seed".into(), json!(seed));
    write_json(&a.out.join("config.json"), &effective)?;
    let count = |s: &[Sample]| json!({ "n": s.len(), "positives": s.iter().filter(|x| x.label == Some(true)).count() });
    let report = json!({
        "source_domains": b.source,
        "target_domain": b.target,
        "source": count(&b.source_data),
        "target": count(&b.target_stream),
    });
    write_json(&a.out.join("report.json"), &report)?;
    write_meta(&a.out, "gen-data", started, clock.elapsed().as_secs_f64(), json!({}))?;
    println!(
        "wrote {} source and {} target samples under {}",
        b.source_data.len(),
        b.target_stream.len(),
        a.out.display()
    );
    Ok(0)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (mut flat, source) = merged_config(
        a.config.as_deref(),
        vec![
            ("epochs", opt(a.epochs)),
            ("lr", opt(a.lr)),
            ("batch_size", opt(a.batch_size)),
            ("seed", opt(a.seed)),
        ],
    )?;
    let cfg: PretrainConfig = take_section(&mut flat, "", &source)?;
    reject_leftovers(&flat, &source)?;
    cfg.validate()?;

    let data = read_manifest(&a.data)?;
    let (params, pre) = pretrain_with_report(&data, &cfg)?;
    let train_metrics = evaluate(&frozen_scores(&params, &data)?, &data, 0)?;

    create_dir(&a.out)?;
    let data_hash = sha256_file(&a.data)?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        provenance: provenance(&[("command", "pretrain".into()), ("data_sha256", data_hash)]),
    };
    save_checkpoint(&a.out.join("model.sddckpt"), &params, &meta)?;
    write_json(&a.out.join("config.json"), &flatten_sections(&[section("", &cfg)]))?;
    let report = json!({
        "inputs": { "data": input_record(&a.data)? },
        "epoch_loss": pre.epoch_loss,
        "negative_usage": pre.negative_usage,
        "train_metrics": train_metrics,
    });
    write_json(&a.out.join("report.json"), &report)?;
    write_meta(&a.out, "pretrain", started, clock.elapsed().as_secs_f64(), json!({}))?;
    println!(
        "trained on {} samples, final epoch loss {:.4}, train AP {}",
        data.len(),
        pre.epoch_loss.last().copied().unwrap_or(f64::NAN),
        fmt_opt(train_metrics.ap)
    );
    Ok(0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn adapt(a: AdaptArgs) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (mut flat, source) = merged_config(
        a.config.as_deref(),
        vec![
            ("p_th", opt(a.p_th)),
            ("n_aug", opt(a.n_aug)),
            ("lr", opt(a.lr)),
            ("seed", opt(a.seed)),
            ("horizon_n", opt(a.horizon_n)),
            ("lambda_min", opt(a.lambda_min)),
            ("toggles.supervisor_gate", flag_off(a.no_gate)),
            ("toggles.aug_mean", flag_off(a.no_aug_mean)),
            ("toggles.dyn_loss", flag_off(a.no_dyn_loss)),
        ],
    )?;
    let cfg: AdaptConfig = take_section(&mut flat, "", &source)?;
    let toggles: Toggles = take_section(&mut flat, "toggles.", &source)?;
    reject_leftovers(&flat, &source)?;
    cfg.validate()?;

    let (theta0, _) = load_checkpoint(&a.ckpt)?;
    let stream = read_manifest(&a.stream)?;
    let run_clock = Instant::now();
    let out = run_stream(&theta0, &stream, &cfg, toggles)?;
    let run_secs = run_clock.elapsed().as_secs_f64();

    create_dir(&a.report)?;
    write_jsonl(&a.report.join("steps.jsonl"), &out.steps)?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        provenance: provenance(&[
            ("command", "adapt".into()),
            ("parent_sha256", sha256_file(&a.ckpt)?),
            ("stream_sha256", sha256_file(&a.stream)?),
        ]),
    };
    if out.summary.n_accepted == 0 {
        // nothing was updated; keep the parent file as is, provenance included
        let bytes = std::fs::read(&a.ckpt).map_err(|e| Error::io(&a.ckpt, e))?;
        write_atomic(&a.report.join("adapted.sddckpt"), &bytes)?;
    } else {
        save_checkpoint(&a.report.join("adapted.sddckpt"), &out.model, &meta)?;
    }
    write_json(
        &a.report.join("config.json"),
        &flatten_sections(&[section("", &cfg), section("toggles.", &toggles)]),
    )?;
    let (metrics, frozen) = if labelled(&stream) {
        let scores: Vec<f64> = out.steps.iter().map(|s| s.cls_prob).collect();
        (
            Some(evaluate(&scores, &stream, out.summary.n_accepted)?),
            Some(evaluate(&frozen_scores(&theta0, &stream)?, &stream, 0)?),
        )
    } else {
        (None, None)
    };
    let report = json!({
        "inputs": { "ckpt": input_record(&a.ckpt)?, "stream": input_record(&a.stream)? },
        "summary": out.summary,
        "metrics": metrics,
        "frozen_metrics": frozen,
    });
    write_json(&a.report.join("report.json"), &report)?;
    write_meta(
        &a.report,
        "adapt",
        started,
        clock.elapsed().as_secs_f64(),
        json!({ "adapt_s": run_secs, "samples_per_s": stream.len() as f64 / run_secs }),
    )?;
    println!(
        "adapted on {} samples ({} accepted, {} rolled back), {:.1} samples/s",
        out.summary.n_samples,
        out.summary.n_accepted,
        out.summary.n_poisoned,
        stream.len() as f64 / run_secs
    );
    if let (Some(m), Some(f)) = (&metrics, &frozen) {
        println!(
            "AP {} (frozen {}), CA {:.4} (frozen {:.4})",
            fmt_opt(m.ap),
            fmt_opt(f.ap),
            m.classification_accuracy,
            f.classification_accuracy
        );
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let data = read_manifest(&a.data)?;
    let (scores, n_adapted, inputs) = match (&a.ckpt, &a.steps) {
        (Some(ckpt), None) => {
            let (params, _) = load_checkpoint(ckpt)?;
            let scores = frozen_scores(&params, &data)?;
            (
                scores,
                0,
                json!({ "data": input_record(&a.data)?, "ckpt": input_record(ckpt)? }),
            )
        }
        (None, Some(steps)) => {
            let records: Vec<StepReport> = read_jsonl(steps)?;
            if records.len() != data.len() {
                return Err(Error::format(
                    steps,
                    format!("{} steps for {} manifest records", records.len(), data.len()),
                ));
            }
            if let Some((r, s)) = records.iter().zip(&data).find(|(r, s)| r.id != s.id) {
                return Err(Error::format(
                    steps,
                    format!("step id {:?} does not match manifest id {:?}", r.id, s.id),
                ));
            }
            let n = records.iter().filter(|r| r.accepted).count();
            let scores = records.iter().map(|r| r.cls_prob).collect();
            (
                scores,
                n,
                json!({ "data": input_record(&a.data)?, "steps": input_record(steps)? }),
            )
        }
        _ => return Err(Error::Config("give exactly one of --ckpt and --steps".into())),
    };
    let metrics: MetricsReport = evaluate(&scores, &data, n_adapted)?;
    create_dir(&a.report)?;
    if a.ckpt.is_some() {
        let preds: Vec<Value> = data
            .iter()
            .zip(&scores)
            .map(|(s, p)| json!({ "id": s.id, "cls_prob": p }))
            .collect();
        write_jsonl(&a.report.join("predictions.jsonl"), &preds)?;
    }
    write_json(&a.report.join("config.json"), &Map::new())?;
    write_json(
        &a.report.join("report.json"),
        &json!({ "inputs": inputs, "metrics": metrics }),
    )?;
    write_meta(&a.report, "eval", started, clock.elapsed().as_secs_f64(), json!({}))?;
    println!(
        "{} samples: AP {}, CA {:.4}",
        metrics.n_samples,
        fmt_opt(metrics.ap),
        metrics.classification_accuracy
    );
    Ok(0)
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (mut flat, source) = merged_config(a.config.as_deref(), vec![("seeds", opt(a.seeds.clone()))])?;
    let seeds: Vec<u64> = match flat.remove("seeds") {
        None => (0..5).collect(),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("{source}: seeds: {e}")))?,
    };
    let adapt_cfg: AdaptConfig = take_section(&mut flat, "", &source)?;
    let pre_cfg: PretrainConfig = take_section(&mut flat, "pretrain.", &source)?;
    let bench: BenchmarkConfig = take_section(&mut flat, "benchmark.", &source)?;
    reject_leftovers(&flat, &source)?;
    adapt_cfg.validate()?;
    pre_cfg.validate()?;

    let (table, per_seed, inputs) = match (&a.ckpt, &a.stream) {
        (Some(ckpt), Some(stream_path)) => {
            let (theta0, _) = load_checkpoint(ckpt)?;
            let stream = read_manifest(stream_path)?;
            let table = run_ablation(&theta0, &stream, &seeds, &adapt_cfg)?;
            let inputs = json!({ "ckpt": input_record(ckpt)?, "stream": input_record(stream_path)? });
            (table, None, inputs)
        }
        _ => {
            let mut results = Vec::with_capacity(seeds.len());
            for &s in &seeds {
                let r = benchmark_seed(s, &bench, &pre_cfg, &adapt_cfg)?;
                println!(
                    "seed {s}: frozen AP {:.4}, {}",
                    r.frozen.0,
                    r.settings
                        .iter()
                        .zip(crate::metrics::ABLATION_SETTINGS)
                        .map(|((ap, _), (name, _))| format!("{name} {ap:.4}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                );
                results.push(r);
            }
            (tabulate(&results)?, Some(results), Value::Null)
        }
    };
    create_dir(&a.report)?;
    let mut effective = flatten_sections(&[
        section("", &adapt_cfg),
        section("pretrain.", &pre_cfg),
        section("benchmark.", &bench),
    ]);
    effective.insert("seeds".into(), json!(seeds));
    write_json(&a.report.join("config.json"), &effective)?;
    write_json(
        &a.report.join("report.json"),
        &json!({ "inputs": inputs, "table": table, "per_seed": per_seed }),
    )?;
    write_meta(&a.report, "ablate", started, clock.elapsed().as_secs_f64(), json!({}))?;
    println!("{:<10} {:>16} {:>16}", "setting", "AP", "CA");
    for row in std::iter::once(&table.frozen).chain(&table.rows) {
        println!(
            "{:<10} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}",
            row.setting, row.ap_mean, row.ap_std, row.ca_mean, row.ca_std
        );
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (mut flat, source) = merged_config(
        a.config.as_deref(),
        vec![
            ("h", opt(a.h)),
            ("tolerance", opt(a.tolerance)),
            ("input_size", opt(a.input_size)),
            ("seed", opt(a.seed)),
        ],
    )?;
    let cfg: GradcheckConfig = take_section(&mut flat, "", &source)?;
    reject_leftovers(&flat, &source)?;
    let report = run_gradcheck(&cfg)?;
    for c in &report.checks {
        println!(
            "{:<24} {} checked {:>6} skipped {:>4} max rel err {:.3e}",
            c.name,
            if c.passed { "ok  " } else { "FAIL" },
            c.n_checked,
            c.n_skipped,
            c.max_rel_err
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_err, cfg.tolerance
    );
    if let Some(dir) = &a.report {
        create_dir(dir)?;
        write_json(&dir.join("config.json"), &flatten_sections(&[section("", &cfg)]))?;
        write_json(&dir.join("report.json"), &report)?;
        write_meta(dir, "gradcheck", started, clock.elapsed().as_secs_f64(), json!({}))?;
    }
    Ok(if report.passed { 0 } else { 3 })
}
