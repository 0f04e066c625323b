//! Append-only run records: `events.jsonl` (timestamped, every record) and
//! `metrics.csv` (one row per iteration, no wall-clock fields, so two runs of
//! the same config produce identical files).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalreport::EvalResult;

/// Loss columns present in every metrics file, whatever the mode.
pub const LOSS_COLUMNS: [&str; 7] = ["cls_pos", "cls_neg", "loc", "st_pos", "st_neg", "adv", "domain"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub losses: BTreeMap<String, f64>,
    pub pseudo_count: Option<usize>,
    pub mean_srrs: Option<f64>,
    pub epsilon: Option<f64>,
    /// Schedule progress that produced `epsilon`.
    pub progress: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Number of completed iterations when the evaluation ran.
    pub iteration: usize,
    pub result: EvalResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub num_classes: usize,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub diverged: Option<String>,
}

impl RunLog {
    pub fn first_map(&self) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch >= 1).and_then(|e| e.result.map)
    }

    pub fn final_map(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.result.map)
    }

    pub fn best_map(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.result.map).reduce(f64::max)
    }

    /// (epoch, mAP) for every evaluated epoch.
    pub fn map_curve(&self) -> Vec<(usize, f64)> {
        self.epochs
            .iter()
            .filter_map(|e| e.result.map.map(|m| (e.epoch, m)))
            .collect()
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes events and metrics as they happen.
pub struct RunWriter {
    seed: u64,
    num_classes: usize,
    events: BufWriter<File>,
    metrics: csv::Writer<File>,
    events_path: PathBuf,
}

impl RunWriter {
    pub fn create(dir: &Path, seed: u64, num_classes: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let events_path = dir.join("events.jsonl");
        let events = BufWriter::new(File::create(&events_path).map_err(|e| Error::io(&events_path, e))?);
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        metrics.write_record(Self::header(num_classes))?;
        Ok(RunWriter {
            seed,
            num_classes,
            events,
            metrics,
            events_path,
        })
    }

    pub fn header(num_classes: usize) -> Vec<String> {
        let mut h: Vec<String> = ["iteration", "epoch", "lr", "total"].iter().map(|s| s.to_string()).collect();
        h.extend(LOSS_COLUMNS.iter().map(|s| s.to_string()));
        h.push("target_mAP".into());
        h.extend((1..=num_classes).map(|c| format!("ap_{}", crate::data::ShapeClass::name(c))));
        h.extend(["pseudo_count", "mean_srrs", "epsilon"].iter().map(|s| s.to_string()));
        h
    }

    /// Append one JSON event with kind, seed and wall-clock time.
    pub fn event(&mut self, kind: &str, body: serde_json::Value) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("kind".into(), kind.into());
        obj.insert("seed".into(), self.seed.into());
        obj.insert("time".into(), now().into());
        if let serde_json::Value::Object(m) = body {
            obj.extend(m);
        } else {
            obj.insert("data".into(), body);
        }
        serde_json::to_writer(&mut self.events, &obj)?;
        self.events
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.events_path, e))
    }

    fn fmt_opt<T: ToString>(v: Option<T>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }

    /// One metrics row. An epoch evaluation that ran right after this
    /// iteration shares its row.
    pub fn iteration(&mut self, rec: &IterationRecord, eval: Option<&EpochRecord>) -> Result<()> {
        self.event("iteration", serde_json::to_value(rec)?)?;
        if let Some(e) = eval {
            self.event("eval", serde_json::to_value(e)?)?;
        }
        self.row(rec, eval.map(|e| &e.result))
    }

    /// Evaluation before any training step, written as its own row.
    pub fn initial_evaluation(&mut self, rec: &EpochRecord) -> Result<()> {
        self.event("eval", serde_json::to_value(rec)?)?;
        let mut row = vec![String::new(); Self::header(self.num_classes).len()];
        row[0] = rec.iteration.to_string();
        row[1] = rec.epoch.to_string();
        let off = 4 + LOSS_COLUMNS.len();
        row[off] = Self::fmt_opt(rec.result.map);
        for c in 1..=self.num_classes {
            row[off + c] = Self::fmt_opt(rec.result.ap(c));
        }
        self.metrics.write_record(&row)?;
        Ok(())
    }

    fn row(&mut self, rec: &IterationRecord, eval: Option<&EvalResult>) -> Result<()> {
        let mut row = vec![
            rec.iteration.to_string(),
            rec.epoch.to_string(),
            rec.lr.to_string(),
            rec.total.to_string(),
        ];
        for c in LOSS_COLUMNS {
            row.push(Self::fmt_opt(rec.losses.get(c)));
        }
        row.push(Self::fmt_opt(eval.and_then(|e| e.map)));
        for c in 1..=self.num_classes {
            row.push(Self::fmt_opt(eval.and_then(|e| e.ap(c))));
        }
        row.push(Self::fmt_opt(rec.pseudo_count));
        row.push(Self::fmt_opt(rec.mean_srrs));
        row.push(Self::fmt_opt(rec.epsilon));
        self.metrics.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.events
            .flush()
            .map_err(|e| Error::io(&self.events_path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.events_path, e))
    }
}

/// Read the iteration records back from an events file.
pub fn read_iteration_events(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("iteration") {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}
