//! Command-line surface. Every command is a function of its config file,
//! input artifacts and seed; outputs go to `--out` with a manifest.
//!
//! Exit codes: 0 success, 2 input or config error, 3 state or contract error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::combo::ModalityCombination;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::logs::{epoch_csv, read_epoch_csv, schedule_csv, MetricsDocument, RunManifest};
use crate::metrics::{Metrics, MetricsRecord, Protocol};
use crate::model::Phase;
use crate::synth::io::{load_dataset, save_dataset};
use crate::synth::{apply_fixed_missing, generate_dataset};
use crate::trainer::{
    dataset_metrics, evaluate, finetune, pretrain, ExperimentConfig, Splits,
};

#[derive(Debug, Parser)]
#[command(name = "mculora", version, about = "Combination-aware low-rank adaptation for incomplete multimodal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the base model on complete data.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint under a missing-modality protocol.
    Eval(EvalArgs),
    /// Compare finished runs and emit curve files.
    Report(ReportArgs),
    /// Generate, pretrain, fine-tune and evaluate in one go.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, value_parser = parse_switch)]
    pub mcla: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    pub dpft: Option<bool>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "fixed")]
    pub protocol: String,
    /// Restrict the fixed protocol to one condition.
    #[arg(long)]
    pub combo: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value = "fixed")]
    pub protocol: String,
}

pub fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on|off, got `{s}`")),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Contract(_) | Error::Shape { .. } => 3,
        Error::Config { .. } | Error::Format { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
    }
}

/// Layers: `base` (e.g. a checkpoint's echo), then the config file, then flags.
fn resolve(
    base: Option<&KvConfig>,
    file: Option<&Path>,
    seed_key: Option<(&str, u64)>,
    ov: &Overrides,
) -> Result<(KvConfig, ExperimentConfig)> {
    let mut kv = base.cloned().unwrap_or_default();
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", p.display()))
        })?;
        kv.merge(&KvConfig::parse(&text)?);
    }
    if let Some((key, seed)) = seed_key {
        kv.set(key, seed);
    }
    let onoff = |b: bool| if b { "on" } else { "off" };
    if let Some(b) = ov.mcla {
        kv.set("mcla", onoff(b));
    }
    if let Some(b) = ov.dpft {
        kv.set("dpft", onoff(b));
    }
    if let Some(r) = ov.rank {
        kv.set("rank", r);
    }
    if let Some(b) = ov.beta {
        kv.set("beta", b);
    }
    let cfg = ExperimentConfig::from_kv(&kv)?;
    Ok((cfg.to_kv(), cfg))
}

fn read_input<T>(path: &Path, what: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::config(what, format!("{} does not exist", path.display())));
    }
    f(path)
}

/// Data config comes from the dataset file; the rest from the layered config.
fn with_data(
    kv: KvConfig,
    mut cfg: ExperimentConfig,
    ds: &crate::synth::Dataset,
) -> (KvConfig, ExperimentConfig) {
    cfg.data = ds.config.clone();
    let mut kv = kv;
    kv.merge(&cfg.data.to_kv());
    (kv, cfg)
}

fn finish_manifest(mut m: RunManifest, files: &[&str], name: &str) -> Result<()> {
    for f in files {
        m.record(f)?;
    }
    let out = PathBuf::from(&m.out_dir);
    m.save(&out.join(format!("manifest-{name}.json")))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<String> {
    let (kv, cfg) = resolve(
        None,
        a.common.config.as_deref(),
        a.common.seed.map(|s| ("data_seed", s)),
        &Overrides::default(),
    )?;
    let ds = generate_dataset(&cfg.data)?;
    let out = &a.common.out;
    save_dataset(&ds, &out.join("dataset.bin"))?;
    let m = RunManifest::new("gen-data", a.common.config.as_deref(), &kv, cfg.data.seed, out);
    finish_manifest(m, &["dataset.bin"], "gen-data")?;
    Ok(format!("wrote {} samples to {}", ds.len(), out.join("dataset.bin").display()))
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<String> {
    let ds = read_input(&a.data, "--data", load_dataset)?;
    let (kv, cfg) = resolve(
        None,
        a.common.config.as_deref(),
        a.common.seed.map(|s| ("seed", s)),
        &Overrides::default(),
    )?;
    let (kv, cfg) = with_data(kv, cfg, &ds);
    let splits = Splits::new(&ds, &cfg.train);
    let (model, log) = pretrain(&splits.train, &cfg)?;
    let out = &a.common.out;
    checkpoint::save(&model, &kv, &out.join("checkpoint.json"))?;
    write_atomic(&out.join("epochs.csv"), epoch_csv(&log)?.as_bytes())?;
    let m = RunManifest::new("pretrain", a.common.config.as_deref(), &kv, cfg.train.seed, out);
    finish_manifest(m, &["checkpoint.json", "epochs.csv"], "pretrain")?;
    let last = log.last().map_or(f64::NAN, |l| l.loss.l_total);
    Ok(format!("pretrained {} epochs, final loss {last:.6}", log.len()))
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<String> {
    let ckpt = read_input(&a.checkpoint, "--checkpoint", checkpoint::load)?;
    if ckpt.model.phase != Phase::Pretrained {
        return Err(Error::contract(format!(
            "checkpoint {} is tagged {:?}; fine-tuning needs a pretrained checkpoint",
            a.checkpoint.display(),
            ckpt.model.phase
        )));
    }
    let ds = read_input(&a.data, "--data", load_dataset)?;
    let (kv, cfg) = resolve(
        Some(&ckpt.config),
        a.common.config.as_deref(),
        a.common.seed.map(|s| ("seed", s)),
        &a.overrides,
    )?;
    let (kv, cfg) = with_data(kv, cfg, &ds);
    let splits = Splits::new(&ds, &cfg.train);
    let (model, log) = finetune(&ckpt.model, &splits.train, &splits.val, &cfg)?;
    let out = &a.common.out;
    checkpoint::save(&model, &kv, &out.join("checkpoint.json"))?;
    write_atomic(&out.join("epochs.csv"), epoch_csv(&log.epochs)?.as_bytes())?;
    write_atomic(&out.join("schedule.csv"), schedule_csv(&log.schedule)?.as_bytes())?;
    let m = RunManifest::new("finetune", a.common.config.as_deref(), &kv, cfg.train.seed, out);
    finish_manifest(m, &["checkpoint.json", "epochs.csv", "schedule.csv"], "finetune")?;
    Ok(format!(
        "fine-tuned {} epochs (mcla={}, dpft={})",
        log.epochs.len(),
        cfg.train.mcla,
        cfg.train.dpft
    ))
}

fn eval_record(
    model: &crate::model::Model,
    test: &crate::synth::Dataset,
    protocol: Protocol,
    combo: Option<ModalityCombination>,
    cfg: &ExperimentConfig,
) -> Result<MetricsRecord> {
    match (protocol, combo) {
        (Protocol::Fixed, Some(c)) => {
            let masked = apply_fixed_missing(test, c)?;
            Ok(MetricsRecord::fixed(&[(c, dataset_metrics(model, &masked)?)]))
        }
        (Protocol::Random, Some(_)) => Err(Error::config(
            "--combo",
            "only applies to the fixed protocol",
        )),
        (p, None) => evaluate(model, test, p, &cfg.train),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let protocol: Protocol = a.protocol.parse()?;
    let combo = a
        .combo
        .as_deref()
        .map(|c| c.parse::<ModalityCombination>())
        .transpose()
        .map_err(|e| Error::config("--combo", e.to_string()))?;
    let ckpt = read_input(&a.checkpoint, "--checkpoint", checkpoint::load)?;
    let ds = read_input(&a.data, "--data", load_dataset)?;
    let (kv, cfg) = resolve(
        Some(&ckpt.config),
        a.common.config.as_deref(),
        a.common.seed.map(|s| ("eval_seed", s)),
        &Overrides::default(),
    )?;
    let (kv, cfg) = with_data(kv, cfg, &ds);
    let splits = Splits::new(&ds, &cfg.train);
    let record = eval_record(&ckpt.model, &splits.test, protocol, combo, &cfg)?;
    let doc = MetricsDocument::new(record, &kv);
    let out = &a.common.out;
    doc.save(out)?;
    let m = RunManifest::new("eval", a.common.config.as_deref(), &kv, cfg.train.eval_seed, out);
    finish_manifest(m, &["metrics.json", "metrics.txt"], "eval")?;
    Ok(doc.record.to_table())
}

pub fn cmd_run(a: &RunArgs) -> Result<String> {
    let protocol: Protocol = a.protocol.parse()?;
    let (kv, cfg) = resolve(
        None,
        a.common.config.as_deref(),
        a.common.seed.map(|s| ("seed", s)),
        &a.overrides,
    )?;
    let ds = generate_dataset(&cfg.data)?;
    let splits = Splits::new(&ds, &cfg.train);
    let (pre, pre_log) = pretrain(&splits.train, &cfg)?;
    let (model, log) = finetune(&pre, &splits.train, &splits.val, &cfg)?;
    let record = evaluate(&model, &splits.test, protocol, &cfg.train)?;
    let out = &a.common.out;
    checkpoint::save(&pre, &kv, &out.join("pretrained.json"))?;
    checkpoint::save(&model, &kv, &out.join("checkpoint.json"))?;
    write_atomic(&out.join("pretrain_epochs.csv"), epoch_csv(&pre_log)?.as_bytes())?;
    write_atomic(&out.join("epochs.csv"), epoch_csv(&log.epochs)?.as_bytes())?;
    write_atomic(&out.join("schedule.csv"), schedule_csv(&log.schedule)?.as_bytes())?;
    let doc = MetricsDocument::new(record, &kv);
    doc.save(out)?;
    let m = RunManifest::new("run", a.common.config.as_deref(), &kv, cfg.train.seed, out);
    finish_manifest(
        m,
        &[
            "pretrained.json",
            "checkpoint.json",
            "pretrain_epochs.csv",
            "epochs.csv",
            "schedule.csv",
            "metrics.json",
            "metrics.txt",
        ],
        "run",
    )?;
    Ok(doc.record.to_table())
}

struct LoadedRun {
    name: String,
    doc: MetricsDocument,
    epochs: Option<Vec<(usize, String, f64, f64, f64)>>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let doc = MetricsDocument::load(&dir.join("metrics.json"))?;
    let epochs_path = dir.join("epochs.csv");
    let epochs = if epochs_path.exists() {
        Some(read_epoch_csv(&epochs_path)?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun { name, doc, epochs })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn curve_file(rows: &mut [(usize, String, Metrics)]) -> String {
    rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut s = String::from("rank,run,acc,f1,wa,ua\n");
    for (rank, run, m) in rows.iter() {
        let _ = writeln!(s, "{rank},{run},{},{},{},{}", m.acc, m.f1, m.wa, m.ua);
    }
    s
}

/// Side-by-side ACC table (percent), the Average delta against the first run,
/// per-condition curve files keyed by rank, and concatenated training curves.
pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let mut runs = Vec::new();
    for dir in &a.runs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("warning: skipping {}: {e}", dir.display()),
        }
    }
    if runs.is_empty() {
        return Err(Error::config("runs", "no valid run directories"));
    }
    let mut columns: Vec<String> = Vec::new();
    for r in &runs {
        for c in &r.doc.record.conditions {
            if !columns.contains(&c.condition) {
                columns.push(c.condition.clone());
            }
        }
    }
    let label = |c: &str| match c.parse::<ModalityCombination>() {
        Ok(combo) if c != "random" => combo.to_string(),
        _ => c.to_string(),
    };
    let base_avg = runs[0].doc.record.average.map(|m| m.acc);
    let mut table = format!("{:<16}", "run");
    for c in &columns {
        let _ = write!(table, " {:>9}", label(c));
    }
    let _ = writeln!(table, " {:>9} {:>9}", "Average", "dAverage");
    for r in &runs {
        let _ = write!(table, "{:<16}", r.name);
        for c in &columns {
            let v = r.doc.record.get(c).map_or("-".to_string(), |m| pct(m.acc));
            let _ = write!(table, " {v:>9}");
        }
        let avg = r.doc.record.average.map(|m| m.acc);
        let delta = match (avg, base_avg) {
            (Some(x), Some(b)) => format!("{:+.2}", 100.0 * (x - b)),
            _ => "-".into(),
        };
        let _ = writeln!(
            table,
            " {:>9} {delta:>9}",
            avg.map_or("-".to_string(), pct)
        );
    }

    let out = &a.out;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;

    let mut curves: BTreeMap<String, Vec<(usize, String, Metrics)>> = BTreeMap::new();
    for r in &runs {
        let rank: usize = r
            .doc
            .config
            .get("rank")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        for c in &r.doc.record.conditions {
            curves
                .entry(c.condition.clone())
                .or_default()
                .push((rank, r.name.clone(), c.metrics));
        }
        if let Some(avg) = r.doc.record.average {
            curves
                .entry("average".into())
                .or_default()
                .push((rank, r.name.clone(), avg));
        }
    }
    for (cond, rows) in curves.iter_mut() {
        write_atomic(&out.join(format!("curve_{cond}.csv")), curve_file(rows).as_bytes())?;
    }

    let mut training = String::from("run,epoch,phase,l_task,l_ort,l_total\n");
    for r in &runs {
        for (epoch, phase, lt, lo, ltot) in r.epochs.iter().flatten() {
            let _ = writeln!(training, "{},{epoch},{phase},{lt},{lo},{ltot}", r.name);
        }
    }
    write_atomic(&out.join("training_curves.csv"), training.as_bytes())?;
    Ok(table)
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
    }
}
