//! Self-training ablation (methods A–F) and BSR parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{base_model, fan_out, train_with_data, AblationToggles, Mode, RunLog, TrainConfig, TrainData};
use crate::error::{Error, Result};
use crate::evalreport::plot::plot_trends;
use crate::par::Exec;

/// (name, use_srrs, mask_all_negatives, weak_mask)
pub const ABLATION_METHODS: [(&str, bool, bool, bool); 6] = [
    ("A", false, false, false),
    ("B", true, false, false),
    ("C", false, true, false),
    ("D", true, true, false),
    ("E", false, false, true),
    ("F", true, false, true),
];

pub fn ablation_config(base: &TrainConfig, method: &str) -> Result<TrainConfig> {
    let &(_, use_srrs, mask_all_negatives, weak_mask) = ABLATION_METHODS
        .iter()
        .find(|m| m.0 == method)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation method `{method}`")))?;
    let mut c = base.clone();
    c.mode = Mode::Wst;
    c.ablation = AblationToggles {
        use_srrs,
        mask_all_negatives,
        weak_mask,
    };
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub status: String,
    pub first_map: Option<f64>,
    pub final_map: Option<f64>,
    pub best_map: Option<f64>,
    pub iterations: usize,
}

impl SuiteRow {
    fn from_result(name: &str, r: &Result<RunLog>) -> Result<SuiteRow> {
        match r {
            Ok(log) => Ok(SuiteRow {
                name: name.to_string(),
                status: "ok".into(),
                first_map: log.first_map(),
                final_map: log.final_map(),
                best_map: log.best_map(),
                iterations: log.iterations.len(),
            }),
            Err(Error::Divergence { iteration, .. }) => Ok(SuiteRow {
                name: name.to_string(),
                status: "not_converged".into(),
                first_map: None,
                final_map: None,
                best_map: None,
                iterations: *iteration,
            }),
            Err(e) => Err(Error::InvalidInput(format!("run {name} failed: {e}"))),
        }
    }
}

fn write_rows(path: &Path, key: &str, rows: &[SuiteRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([key, "status", "first_mAP", "final_mAP", "best_mAP", "iterations"])?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.status.clone(),
            f(r.first_map),
            f(r.final_map),
            f(r.best_map),
            r.iterations.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct SuiteOutcome {
    pub rows: Vec<SuiteRow>,
    pub logs: Vec<Option<RunLog>>,
}

/// Ensure every run of a suite shares one base model: train it once into
/// `<out>/base/` unless the config already names a checkpoint.
fn shared_base(cfg: &TrainConfig, data: &TrainData, out: &Path, exec: Exec) -> Result<TrainConfig> {
    let mut c = cfg.clone();
    if c.schedule.base_checkpoint.is_none() {
        base_model(cfg, data, out, exec)?;
        c.schedule.base_checkpoint = Some(out.join("base").join("final.ckpt"));
    }
    Ok(c)
}

/// Methods A–F under identical seeds and budgets. Writes `<out>/<method>/`,
/// `comparison.csv` and the trend overlay.
pub fn ablation_suite(base: &TrainConfig, data: &TrainData, out: &Path, jobs: usize, exec: Exec) -> Result<SuiteOutcome> {
    let base = shared_base(base, data, out, exec)?;
    let names: Vec<&str> = ABLATION_METHODS.iter().map(|m| m.0).collect();
    let results = fan_out(jobs, &names, |_, name| -> Result<RunLog> {
        let cfg = ablation_config(&base, name)?;
        train_with_data(&cfg, data, &out.join(name), exec).map(|o| o.log)
    });
    let rows = names
        .iter()
        .zip(&results)
        .map(|(n, r)| SuiteRow::from_result(n, r))
        .collect::<Result<Vec<_>>>()?;
    write_rows(&out.join("comparison.csv"), "method", &rows)?;
    let runs: Vec<(String, PathBuf)> = names
        .iter()
        .zip(&results)
        .filter(|(_, r)| r.is_ok())
        .map(|(n, _)| (n.to_string(), out.join(n).join("metrics.csv")))
        .collect();
    if !runs.is_empty() {
        plot_trends(&runs, &out.join("plots"), "ablation_trends", "self-training ablation")?;
    }
    Ok(SuiteOutcome {
        rows,
        logs: results.into_iter().map(|r| r.ok()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    T,
    Epsilon,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "t" => Ok(SweepParam::T),
            "epsilon" => Ok(SweepParam::Epsilon),
            _ => Err(Error::InvalidConfig(format!("unknown sweep parameter `{s}` (gamma, t, epsilon)"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::T => "t",
            SweepParam::Epsilon => "epsilon",
        }
    }

    /// Standard sweep grid.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Gamma => vec![0.0, 1.0, 2.0, 4.0, 5.0],
            SweepParam::T => vec![0.25, 0.33, 0.5, 0.67, 0.75],
            SweepParam::Epsilon => vec![0.6, 0.7, 0.8, 0.9],
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, v: f64) {
        match self {
            SweepParam::Gamma => cfg.bsr.gamma = v,
            SweepParam::T => cfg.bsr.t = v,
            SweepParam::Epsilon => {
                cfg.srrs.epsilon_mode = crate::pseudolabel::EpsilonMode::Fixed;
                cfg.srrs.epsilon_fixed = v;
            }
        }
    }
}

/// One run per value with a shared seed; divergence becomes a
/// `not_converged` row. Writes `<out>/<param>_<value>/` and `summary.csv`.
pub fn sweep(
    cfg: &TrainConfig,
    data: &TrainData,
    param: SweepParam,
    values: &[f64],
    out: &Path,
    jobs: usize,
    exec: Exec,
) -> Result<SuiteOutcome> {
    match param {
        SweepParam::Gamma | SweepParam::T if !cfg.mode.uses_bsr() => {
            return Err(Error::InvalidConfig(format!(
                "sweeping {} needs a BSR mode, got {}",
                param.name(),
                cfg.mode.name()
            )))
        }
        SweepParam::Epsilon if !cfg.mode.is_self_training() => {
            return Err(Error::InvalidConfig(format!(
                "sweeping epsilon needs a self-training mode, got {}",
                cfg.mode.name()
            )))
        }
        _ => {}
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = shared_base(cfg, data, out, exec)?;
    let results = fan_out(jobs, values, |_, &v| -> Result<RunLog> {
        let mut c = base.clone();
        param.apply(&mut c, v);
        c.validate()?;
        train_with_data(&c, data, &out.join(format!("{}_{v}", param.name())), exec).map(|o| o.log)
    });
    let rows = values
        .iter()
        .zip(&results)
        .map(|(v, r)| SuiteRow::from_result(&v.to_string(), r))
        .collect::<Result<Vec<_>>>()?;
    write_rows(&out.join("summary.csv"), param.name(), &rows)?;
    Ok(SuiteOutcome {
        rows,
        logs: results.into_iter().map(|r| r.ok()).collect(),
    })
}
