//! Command-line front end.
//!
//! Config precedence is defaults < preset < config file < flags; the merged
//! result is written next to every output. Exit codes: 0 ok, 1 runtime
//! failure, 2 usage or config error, 3 numerical divergence. Failures end
//! with one JSON line on stderr.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{self, GenerateConfig, TARGET_TEST_SPLIT, TARGET_TRAIN_SPLIT};
use crate::detector::{postprocess, DetectorParams};
use crate::error::{Error, Result};
use crate::evalreport::plot::{bsr_curves, plot_trends, write_figure};
use crate::evalreport::{write_results_csv, ApStyle, ResultRow};
use crate::par::{self, Exec};
use crate::pseudolabel::{confidence_pseudo_labels, epsilon_schedule, generate_pseudo_labels};
use crate::trainloop::suite::{ablation_suite, sweep, SuiteRow, SweepParam};
use crate::trainloop::{train, EvalSection, Mode, TrainConfig, TrainData};

pub const OUT_ENV: &str = "UDADET_OUT";

#[derive(Debug, Parser)]
#[command(name = "udadet", version, about = "Domain-adaptive training of a tiny one-stage detector")]
struct Cli {
    /// Worker threads (training) or concurrent runs (ablate, sweep).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Default output root for commands run without --out.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the source/target synthetic domain pair.
    GenerateData(GenerateArgs),
    /// Train one mode (the source-only base is trained first if needed).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Dump the pseudo-labels a checkpoint would produce, one JSON line each.
    InspectPseudolabels(InspectArgs),
    /// Plot mAP-per-epoch curves of finished runs, or the regularizer shape.
    Plot(PlotArgs),
    /// Self-training ablation: methods A-F with a shared base model.
    Ablate(RunArgs),
    /// One run per value of a regularizer or threshold parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory [default: <out-root>/data].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Named preset: toy or paper-protocol.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// TOML file overriding the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory [default: <out-root>/data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reuse this source-only checkpoint instead of training a base.
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    /// Adaptation iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    base_iterations: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// source_only, st, dann, wst, bsr or bsr_wst.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = TARGET_TEST_SPLIT)]
    split: String,
    /// all-points or 11point.
    #[arg(long, default_value = "all-points")]
    ap_style: ApStyle,
    #[arg(long, default_value_t = 0.05)]
    conf_thresh: f64,
    #[arg(long, default_value_t = 0.45)]
    nms_iou: f64,
    /// Row label in results.csv.
    #[arg(long, default_value = "model")]
    method: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = TARGET_TRAIN_SPLIT)]
    split: String,
    /// Fixed threshold.
    #[arg(long, default_value_t = 0.8, conflicts_with = "progress")]
    epsilon: f64,
    /// Use the logistic schedule at this progress instead of a fixed threshold.
    #[arg(long)]
    progress: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Select by the detection's own confidence instead of SRRS.
    #[arg(long)]
    confidence: bool,
    #[arg(long, default_value_t = 0.05)]
    conf_thresh: f64,
    #[arg(long, default_value_t = 0.45)]
    nms_iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// A finished run as LABEL=DIR (repeatable).
    #[arg(long = "run", value_parser = parse_labeled)]
    runs: Vec<(String, PathBuf)>,
    /// Also draw the regularizer over p for the default (t, gamma) grid.
    #[arg(long)]
    bsr_curves: bool,
    #[arg(long, default_value = "trends")]
    stem: String,
    #[arg(long, default_value = "target mAP per epoch")]
    title: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// gamma, t or epsilon.
    #[arg(long)]
    param: String,
    /// Comma-separated values [default: the standard grid].
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Mode to sweep [default: bsr for gamma/t, wst for epsilon].
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_labeled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    s.split_once('=')
        .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
        .ok_or_else(|| format!("expected LABEL=DIR, got `{s}`"))
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidBox(_) => "invalid_box",
        Error::InvalidInput(_) => "invalid_input",
        Error::InvalidConfig(_) => "invalid_config",
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::Divergence { .. } => "divergence",
        Error::MissingColumn(_) => "missing_column",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Image(_) => "image",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn report(kind: &str, code: i32, message: &str) {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    let _ = writeln!(std::io::stderr(), "{line}");
}

/// Parse `argv` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or("usage error").to_string();
            report("usage", 2, &first);
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            report(error_kind(&e), code, &e.to_string());
            code
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
    }
    let root = cli.out_root.clone();
    match cli.command {
        Command::GenerateData(a) => generate(a, &root),
        Command::Train(a) => with_threads(cli.jobs, |exec| train_cmd(a, &root, exec)),
        Command::Eval(a) => with_threads(cli.jobs, |exec| eval_cmd(a, &root, exec)),
        Command::InspectPseudolabels(a) => with_threads(cli.jobs, |exec| inspect_cmd(a, &root, exec)),
        Command::Plot(a) => plot_cmd(a, &root),
        Command::Ablate(a) => ablate_cmd(a, &root, cli.jobs),
        Command::Sweep(a) => sweep_cmd(a, &root, cli.jobs),
    }
}

/// Run `f` with `jobs` worker threads; a single job runs sequentially.
fn with_threads<R>(jobs: usize, f: impl FnOnce(Exec) -> R + Send) -> R
where
    R: Send,
{
    if jobs == 1 {
        return f(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        return pool.install(|| f(Exec::Parallel));
    }
    f(Exec::Parallel)
}

/// Recursively overlay `over` onto `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_toml(path: &Path) -> Result<toml::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, file: Option<&toml::Value>) -> Result<T> {
    let mut v = toml::Value::try_from(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if let Some(f) = file {
        merge(&mut v, f.clone());
    }
    v.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
}

fn write_snapshot<T: Serialize>(value: &T, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn generate(a: GenerateArgs, root: &Path) -> Result<()> {
    let file = a.config.as_deref().map(read_toml).transpose()?;
    let mut cfg: GenerateConfig = overlay(&GenerateConfig::default(), file.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = a.out.unwrap_or_else(|| root.join("data"));
    data::generate_domain_pair(&out, &cfg, Exec::Parallel)?;
    write_snapshot(&cfg, &out, "generate.toml")?;
    println!("{}", serde_json::json!({ "dataset": out, "hash": data::directory_hash(&out)? }));
    Ok(())
}

/// Resolve a training config from preset, file and flags.
fn resolve(a: &RunArgs, mode: Option<Mode>, root: &Path) -> Result<TrainConfig> {
    let preset = TrainConfig::preset(&a.preset)?;
    let file = a.config.as_deref().map(read_toml).transpose()?;
    let file_mode = file
        .as_ref()
        .and_then(|f| f.get("mode"))
        .and_then(|m| m.as_str())
        .map(str::parse::<Mode>)
        .transpose()?;
    let mode = mode.or(file_mode).unwrap_or(preset.mode);
    let mut cfg: TrainConfig = overlay(&preset.for_mode(mode), file.as_ref())?;
    cfg.mode = mode;
    let file_sets_root = file
        .as_ref()
        .and_then(|f| f.get("data"))
        .and_then(|d| d.get("root"))
        .is_some();
    if let Some(d) = &a.data {
        cfg.data.root = d.clone();
    } else if !file_sets_root {
        cfg.data.root = root.join("data");
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.base_checkpoint {
        cfg.schedule.base_checkpoint = Some(p.clone());
    }
    if let Some(n) = a.iterations {
        cfg.schedule.iterations = n;
    }
    if let Some(n) = a.base_iterations {
        cfg.schedule.base_iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, root: &Path, exec: Exec) -> Result<()> {
    let mode = a.mode.as_deref().map(str::parse::<Mode>).transpose()?;
    let cfg = resolve(&a.run, mode, root)?;
    let out = a
        .run
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("{}_s{}", cfg.mode.name(), cfg.seed)));
    let o = train(&cfg, &out, exec)?;
    println!(
        "{}",
        serde_json::json!({
            "run": out,
            "mode": cfg.mode.name(),
            "first_mAP": o.log.first_map(),
            "final_mAP": o.log.final_map(),
            "best_mAP": o.log.best_map(),
            "checkpoint": o.final_checkpoint,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    eval: EvalSection,
}

fn eval_cmd(a: EvalArgs, root: &Path, exec: Exec) -> Result<()> {
    let params = DetectorParams::read_checkpoint(&a.checkpoint)?;
    let data_root = a.data.clone().unwrap_or_else(|| root.join("data"));
    let eval = EvalSection {
        conf_thresh: a.conf_thresh,
        nms_iou: a.nms_iou,
        ap_style: a.ap_style,
        ..Default::default()
    };
    let out = a.out.clone().unwrap_or_else(|| root.join("eval"));
    write_snapshot(
        &EvalSnapshot {
            checkpoint: &a.checkpoint,
            data: &data_root,
            split: &a.split,
            eval,
        },
        &out,
        "eval_config.toml",
    )?;
    let images = data::load_labeled(&data_root, &a.split, exec)?;
    let result = crate::trainloop::evaluate(&params, &images, &eval, exec)?;
    let p = out.join("eval.json");
    fs::write(&p, serde_json::to_vec_pretty(&result)?).map_err(|e| Error::io(&p, e))?;
    let names: Vec<&str> = (1..=params.arch.num_classes).map(data::ShapeClass::name).collect();
    write_results_csv(
        &out.join("results.csv"),
        &names,
        &[ResultRow {
            method: a.method.clone(),
            result: result.clone(),
        }],
    )?;
    println!("{}", serde_json::json!({ "split": a.split, "mAP": result.map, "out": out }));
    Ok(())
}

#[derive(Serialize)]
struct InspectSnapshot<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    epsilon: f64,
    progress: Option<f64>,
    delta: f64,
    selection: &'a str,
    conf_thresh: f64,
    nms_iou: f64,
}

#[derive(Serialize)]
struct PseudoRecord<'a> {
    image_id: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_id: usize,
    srrs: f64,
    confidence: f64,
    epsilon_used: f64,
}

fn inspect_cmd(a: InspectArgs, root: &Path, exec: Exec) -> Result<()> {
    let params = DetectorParams::read_checkpoint(&a.checkpoint)?;
    let data_root = a.data.clone().unwrap_or_else(|| root.join("data"));
    let epsilon = a.progress.map(epsilon_schedule).unwrap_or(a.epsilon);
    let out = a.out.clone().unwrap_or_else(|| root.join("pseudolabels"));
    write_snapshot(
        &InspectSnapshot {
            checkpoint: &a.checkpoint,
            data: &data_root,
            split: &a.split,
            epsilon,
            progress: a.progress,
            delta: a.delta,
            selection: if a.confidence { "confidence" } else { "srrs" },
            conf_thresh: a.conf_thresh,
            nms_iou: a.nms_iou,
        },
        &out,
        "inspect_config.toml",
    )?;
    // only pixels are read: the split's annotations stay untouched
    let images = data::load_unlabeled(&data_root, &a.split, exec)?;
    let anchors = params.arch.anchors()?;
    let labels = par::map(exec, &images, |_, img| -> Result<_> {
        let (raw, _) = params.forward(&img.pixels)?;
        let pred = postprocess(&anchors, &raw, a.conf_thresh, a.nms_iou)?;
        if a.confidence {
            confidence_pseudo_labels(&pred.all, &pred.finals, a.delta, epsilon)
        } else {
            generate_pseudo_labels(&pred.all, &pred.finals, a.delta, epsilon)
        }
    });
    let mut buf = Vec::new();
    let mut total = 0;
    for (img, ls) in images.iter().zip(labels) {
        for l in ls? {
            total += 1;
            serde_json::to_writer(
                &mut buf,
                &PseudoRecord {
                    image_id: &img.id,
                    bbox: [l.bbox.x_min, l.bbox.y_min, l.bbox.x_max, l.bbox.y_max],
                    class_id: l.class_id,
                    srrs: l.srrs,
                    confidence: l.confidence,
                    epsilon_used: epsilon,
                },
            )?;
            buf.push(b'\n');
        }
    }
    let p = out.join("pseudolabels.jsonl");
    fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
    println!(
        "{}",
        serde_json::json!({ "images": images.len(), "pseudo_labels": total, "epsilon": epsilon, "out": p })
    );
    Ok(())
}

#[derive(Serialize)]
struct PlotSnapshot<'a> {
    runs: Vec<[String; 2]>,
    bsr_curves: bool,
    stem: &'a str,
    title: &'a str,
}

fn plot_cmd(a: PlotArgs, root: &Path) -> Result<()> {
    if a.runs.is_empty() && !a.bsr_curves {
        return Err(Error::InvalidConfig("nothing to plot: give --run LABEL=DIR or --bsr-curves".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| root.join("plots"));
    write_snapshot(
        &PlotSnapshot {
            runs: a
                .runs
                .iter()
                .map(|(l, p)| [l.clone(), p.display().to_string()])
                .collect(),
            bsr_curves: a.bsr_curves,
            stem: &a.stem,
            title: &a.title,
        },
        &out,
        "plot_config.toml",
    )?;
    let mut files = Vec::new();
    if !a.runs.is_empty() {
        let runs: Vec<(String, PathBuf)> = a
            .runs
            .iter()
            .map(|(l, d)| (l.clone(), if d.is_dir() { d.join("metrics.csv") } else { d.clone() }))
            .collect();
        files.extend(plot_trends(&runs, &out, &a.stem, &a.title)?);
    }
    if a.bsr_curves {
        let grid: Vec<(f64, f64)> = [0.0, 1.0, 2.0, 4.0, 5.0].iter().map(|&g| (0.5, g)).collect();
        files.extend(write_figure(&bsr_curves(&grid, 200), &out, "bsr_gamma")?);
        let grid: Vec<(f64, f64)> = [0.25, 0.33, 0.5, 0.67, 0.75].iter().map(|&t| (t, 2.0)).collect();
        files.extend(write_figure(&bsr_curves(&grid, 200), &out, "bsr_t")?);
    }
    println!("{}", serde_json::json!({ "files": files }));
    Ok(())
}

fn print_rows(rows: &[SuiteRow]) {
    for r in rows {
        println!("{}", serde_json::to_string(r).unwrap_or_default());
    }
}

fn ablate_cmd(a: RunArgs, root: &Path, jobs: usize) -> Result<()> {
    let cfg = resolve(&a, Some(Mode::Wst), root)?;
    let out = a.out.clone().unwrap_or_else(|| root.join("ablation"));
    write_snapshot(&cfg, &out, "config.toml")?;
    let data = TrainData::load(&cfg, Exec::Sequential)?;
    let o = ablation_suite(&cfg, &data, &out, jobs, Exec::Sequential)?;
    print_rows(&o.rows);
    Ok(())
}

fn sweep_cmd(a: SweepArgs, root: &Path, jobs: usize) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let mode = match a.mode.as_deref() {
        Some(m) => m.parse()?,
        None if param == SweepParam::Epsilon => Mode::Wst,
        None => Mode::Bsr,
    };
    let cfg = resolve(&a.run, Some(mode), root)?;
    let values = if a.values.is_empty() {
        param.default_values()
    } else {
        a.values.clone()
    };
    let out = a
        .run
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("sweep_{}", param.name())));
    write_snapshot(&cfg, &out, "config.toml")?;
    let data = TrainData::load(&cfg, Exec::Sequential)?;
    let o = sweep(&cfg, &data, param, &values, &out, jobs, Exec::Sequential)?;
    print_rows(&o.rows);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overrides_nested_keys_only() {
        let mut base: toml::Value = toml::from_str("a = 1\n[s]\nx = 1\ny = 2\n").unwrap();
        merge(&mut base, toml::from_str("[s]\ny = 5\n").unwrap());
        assert_eq!(base["a"].as_integer(), Some(1));
        assert_eq!(base["s"]["x"].as_integer(), Some(1));
        assert_eq!(base["s"]["y"].as_integer(), Some(5));
    }

    #[test]
    fn flags_override_file_and_preset() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        fs::write(&f, "seed = 4\n[schedule]\niterations = 77\n[bsr]\ngamma = 4.0\n").unwrap();
        let a = RunArgs {
            preset: "paper-protocol".into(),
            config: Some(f),
            seed: Some(9),
            data: None,
            base_checkpoint: None,
            iterations: None,
            base_iterations: None,
            out: None,
        };
        let c = resolve(&a, Some(Mode::Bsr), Path::new("/r")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.schedule.iterations, 77);
        assert_eq!(c.schedule.batch_half, 16);
        assert_eq!(c.bsr.gamma, 4.0);
        assert_eq!(c.mode, Mode::Bsr);
        assert_eq!(c.data.root, Path::new("/r/data"));
    }

    #[test]
    fn unknown_config_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        fs::write(&f, "[bsr]\ngama = 4.0\n").unwrap();
        let a = RunArgs {
            preset: "toy".into(),
            config: Some(f),
            seed: None,
            data: None,
            base_checkpoint: None,
            iterations: None,
            base_iterations: None,
            out: None,
        };
        let e = resolve(&a, None, Path::new("r")).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["udadet", "train", "--no-such-flag"]), 2);
        assert_eq!(run(["udadet", "frobnicate"]), 2);
        assert_eq!(run(["udadet", "--help"]), 0);
    }

    #[test]
    fn presets_are_listed() {
        for p in crate::trainloop::PRESETS {
            TrainConfig::preset(p).unwrap();
        }
    }
}
