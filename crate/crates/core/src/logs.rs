//! Run artifacts: epoch and schedule CSVs, metrics documents and manifests.
//!
//! Column orders are fixed:
//!
//! * epoch log: `epoch,phase,l_task,l_ort,l_total,wallclock_ms`
//! * schedule log: `epoch,s1..s7,ds1..ds7,q1..q7`, combination `i` in table
//!   order `{a} {t} {v} {a,v} {a,t} {t,v} {a,t,v}`

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::fsutil::{sha256_file, write_atomic};
use crate::metrics::MetricsRecord;
use crate::trainer::{EpochLog, ScheduleRow};

pub const EPOCH_HEADER: [&str; 6] = ["epoch", "phase", "l_task", "l_ort", "l_total", "wallclock_ms"];

pub fn version_string() -> String {
    match option_env!("MCULORA_GIT_DESCRIBE") {
        Some(g) => format!("mculora {} ({g})", env!("CARGO_PKG_VERSION")),
        None => format!("mculora {}", env!("CARGO_PKG_VERSION")),
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("csv", e.to_string()))
}

pub fn epoch_csv(rows: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EPOCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.loss.l_task.to_string(),
            r.loss.l_ort.to_string(),
            r.loss.l_total.to_string(),
            r.wallclock_ms.to_string(),
        ])?;
    }
    finish(w)
}

pub fn schedule_header() -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    for prefix in ["s", "ds", "q"] {
        h.extend((1..=7).map(|i| format!("{prefix}{i}")));
    }
    h
}

pub fn schedule_csv(rows: &[ScheduleRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(schedule_header())?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string()];
        for block in [&r.scores, &r.delta, &r.q] {
            rec.extend(block.iter().map(f64::to_string));
        }
        w.write_record(rec)?;
    }
    finish(w)
}

/// Reads a CSV with a header into column-name-keyed rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Parses an epoch log back; only the columns needed for curves.
pub fn read_epoch_csv(path: &Path) -> Result<Vec<(usize, String, f64, f64, f64)>> {
    let (header, rows) = read_csv(path)?;
    if header != EPOCH_HEADER {
        return Err(Error::format("epoch log", format!("unexpected header {header:?}")));
    }
    rows.iter()
        .map(|r| {
            let f = |i: usize| -> Result<f64> {
                r[i].parse()
                    .map_err(|_| Error::format("epoch log", format!("bad number `{}`", r[i])))
            };
            let epoch = r[0]
                .parse()
                .map_err(|_| Error::format("epoch log", format!("bad epoch `{}`", r[0])))?;
            Ok((epoch, r[1].clone(), f(2)?, f(3)?, f(4)?))
        })
        .collect()
}

/// Metrics output: the record, the config echo and a version string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub record: MetricsRecord,
}

impl MetricsDocument {
    pub fn new(record: MetricsRecord, config: &KvConfig) -> Self {
        Self {
            version: version_string(),
            config: config
                .keys()
                .map(|k| (k.to_string(), config.raw(k).unwrap_or("").to_string()))
                .collect(),
            record,
        }
    }

    /// Human-readable rendering: table, then the config echo.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n# protocol: {}\n\n", self.version, self.record.protocol);
        s.push_str(&self.record.to_table());
        s.push_str("\n# config\n");
        for (k, v) in &self.config {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Writes `metrics.json` and `metrics.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(
            &dir.join("metrics.json"),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )?;
        write_atomic(&dir.join("metrics.txt"), self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: String,
    /// File name (relative to `out_dir`) to SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &KvConfig, seed: u64, out_dir: &Path) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: config
                .keys()
                .map(|k| (k.to_string(), config.raw(k).unwrap_or("").to_string()))
                .collect(),
            seed,
            out_dir: out_dir.display().to_string(),
            checksums: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, file: &str) -> Result<()> {
        let digest = sha256_file(&Path::new(&self.out_dir).join(file))?;
        self.checksums.insert(file.to_string(), digest);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
