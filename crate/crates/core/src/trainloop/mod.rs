//! Training modes, schedules and the experiment suites built on them.
//!
//! Every adaptation mode fine-tunes a source-only base model. When no base
//! checkpoint is configured, the base phase is trained first into
//! `<out>/base/` and its checkpoint is reloaded (so an in-process base and a
//! base read back from disk give the same run).

pub mod runlog;
pub mod suite;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxops::{AnchorSet, GroundTruth};
use crate::data::{
    self, AugmentConfig, BatchComposer, LabeledImage, UnlabeledImage, SOURCE_SPLIT, TARGET_TEST_SPLIT,
    TARGET_TRAIN_SPLIT,
};
use crate::detector::{ArchConfig, DetectorParams, DomainClassifier};
use crate::error::{Error, Result};
use crate::evalreport::{evaluate_map, ApStyle, EvalResult};
use crate::losses::objective::{batch_objective, BatchObjective, DannTerm, PseudoSelection, SelfTrainTerm, SourceSample};
use crate::losses::{BsrConfig, NegativeMode, TaskLossConfig};
use crate::par::{self, Exec};
use crate::pseudolabel::{epsilon_schedule, EpsilonMode, ProgressOrigin, SrrsPolicy};

pub use runlog::{EpochRecord, IterationRecord, RunLog, RunWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    St,
    Dann,
    Wst,
    Bsr,
    BsrWst,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::SourceOnly, Mode::St, Mode::Dann, Mode::Wst, Mode::Bsr, Mode::BsrWst];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::St => "st",
            Mode::Dann => "dann",
            Mode::Wst => "wst",
            Mode::Bsr => "bsr",
            Mode::BsrWst => "bsr_wst",
        }
    }

    pub fn is_self_training(self) -> bool {
        matches!(self, Mode::St | Mode::Wst | Mode::BsrWst)
    }

    pub fn uses_bsr(self) -> bool {
        matches!(self, Mode::Bsr | Mode::BsrWst)
    }

    /// Modes trained on target images only.
    fn target_only(self) -> bool {
        matches!(self, Mode::St | Mode::Wst)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    /// Evaluate on the target training images instead of the held-out split.
    pub shared_split: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data"),
            shared_split: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative decay applied at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of the phase's iteration budget.
    pub milestones: Vec<f64>,
    /// Linear warm-up length in iterations.
    pub warmup: usize,
    /// Clip the global gradient norm; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            milestones: Vec::new(),
            warmup: 0,
            clip_norm: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, iteration: usize, budget: usize) -> f64 {
        let mut lr = self.lr;
        for m in &self.milestones {
            if iteration >= milestone_iteration(*m, budget) {
                lr *= self.lr_decay;
            }
        }
        if iteration < self.warmup {
            lr *= (iteration + 1) as f64 / self.warmup as f64;
        }
        lr
    }
}

fn milestone_iteration(frac: f64, budget: usize) -> usize {
    (frac * budget as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Iterations of the source-only base phase.
    pub base_iterations: usize,
    /// Iterations of the adaptation phase.
    pub iterations: usize,
    /// Images per domain half; target-only modes use twice this many target images.
    pub batch_half: usize,
    /// Iterations per epoch; the target split is evaluated at every epoch end.
    pub epoch_iterations: usize,
    /// Self-training window of bsr_wst as fractions of `iterations`. Training
    /// stops at the window end.
    pub wst_window: [f64; 2],
    pub base_checkpoint: Option<PathBuf>,
    /// Write a checkpoint at every epoch end.
    pub epoch_checkpoints: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_iterations: 1500,
            iterations: 600,
            batch_half: 8,
            epoch_iterations: 100,
            wst_window: [5.0 / 6.0, 1.0],
            base_checkpoint: None,
            epoch_checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsrSection {
    pub t: f64,
    pub gamma: f64,
    /// Reversal coefficient at the junction.
    pub lambda: f64,
    pub selection_multiplier: usize,
    pub detach_focal: bool,
    /// Weight of the regularizer in the summed objective.
    pub weight: f64,
}

impl Default for BsrSection {
    fn default() -> Self {
        let b = BsrConfig::default();
        BsrSection {
            t: b.t,
            gamma: b.gamma,
            lambda: 1.0,
            selection_multiplier: b.selection_multiplier,
            detach_focal: b.detach_focal,
            weight: 1.0,
        }
    }
}

impl BsrSection {
    pub fn config(&self) -> BsrConfig {
        BsrConfig {
            t: self.t,
            gamma: self.gamma,
            selection_multiplier: self.selection_multiplier,
            detach_focal: self.detach_focal,
        }
    }
}

/// Self-training toggles. `use_srrs = true, weak_mask = true` is the proposed
/// method; all false is naive self-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationToggles {
    pub use_srrs: bool,
    pub mask_all_negatives: bool,
    pub weak_mask: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            use_srrs: true,
            mask_all_negatives: false,
            weak_mask: true,
        }
    }
}

impl AblationToggles {
    pub fn negatives(&self) -> Result<NegativeMode> {
        match (self.mask_all_negatives, self.weak_mask) {
            (true, true) => Err(Error::InvalidConfig(
                "mask_all_negatives and weak_mask are mutually exclusive".into(),
            )),
            (true, false) => Ok(NegativeMode::Masked),
            (false, true) => Ok(NegativeMode::Weak),
            (false, false) => Ok(NegativeMode::Hard),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainSection {
    /// Confidence cutoff of mode `st`.
    pub st_confidence: f64,
    /// Confidence cutoff of the toggled modes when SRRS is off.
    pub confidence_without_srrs: f64,
    pub neg_pos_ratio: usize,
    /// Anchor matching threshold for pseudo boxes.
    pub pos_iou: f64,
    /// Weight of the self-training loss in the summed objective.
    pub weight: f64,
}

impl Default for SelfTrainSection {
    fn default() -> Self {
        SelfTrainSection {
            st_confidence: 0.5,
            confidence_without_srrs: 0.9,
            neg_pos_ratio: 3,
            pos_iou: 0.5,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DannSection {
    pub hidden: usize,
    pub lambda: f64,
}

impl Default for DannSection {
    fn default() -> Self {
        DannSection { hidden: 32, lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub nms_iou: f64,
    pub ap_style: ApStyle,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            conf_thresh: 0.05,
            iou_thresh: 0.5,
            nms_iou: 0.45,
            ap_style: ApStyle::AllPoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data: DataSection,
    pub schedule: ScheduleConfig,
    /// Optimizer of the base phase.
    pub base_optim: OptimConfig,
    /// Optimizer of the adaptation phase.
    pub optim: OptimConfig,
    pub task: TaskLossConfig,
    /// Anchor matching threshold for source ground truth.
    pub pos_iou: f64,
    pub bsr: BsrSection,
    pub srrs: SrrsPolicy,
    pub self_training: SelfTrainSection,
    pub ablation: AblationToggles,
    pub dann: DannSection,
    pub eval: EvalSection,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::BsrWst,
            seed: 0,
            data: DataSection::default(),
            schedule: ScheduleConfig::default(),
            base_optim: OptimConfig {
                lr: 0.02,
                milestones: vec![2.0 / 3.0, 5.0 / 6.0],
                warmup: 100,
                clip_norm: 10.0,
                ..Default::default()
            },
            optim: OptimConfig {
                lr: 5e-4,
                clip_norm: 10.0,
                ..Default::default()
            },
            task: TaskLossConfig::default(),
            pos_iou: 0.5,
            bsr: BsrSection::default(),
            srrs: SrrsPolicy::default(),
            self_training: SelfTrainSection::default(),
            ablation: AblationToggles::default(),
            dann: DannSection::default(),
            eval: EvalSection::default(),
            augment: AugmentConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["toy", "paper-protocol"];

impl TrainConfig {
    /// Named presets. `paper-protocol` keeps the full-scale phase structure
    /// (base 120k with decays at 80k/100k; BSR 50k + 10k at a tenth of the
    /// rate; self-training from 50k to an early stop at 55k; 16 + 16 images
    /// per batch) rescaled to a 6k-iteration base.
    pub fn preset(name: &str) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        match name {
            "toy" => {}
            "paper-protocol" => {
                c.schedule.base_iterations = 6000;
                c.schedule.iterations = 3600;
                c.schedule.batch_half = 16;
                c.schedule.epoch_iterations = 300;
                c.schedule.wst_window = [50.0 / 60.0, 55.0 / 60.0];
                c.base_optim.milestones = vec![80.0 / 120.0, 100.0 / 120.0];
                c.optim.milestones = vec![50.0 / 60.0];
                c.srrs.epsilon_mode = EpsilonMode::Scheduled;
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Mode-specific adjustments applied on top of a preset.
    pub fn for_mode(mut self, mode: Mode) -> TrainConfig {
        self.mode = mode;
        if mode == Mode::BsrWst {
            self.srrs.epsilon_mode = EpsilonMode::Scheduled;
            if self.optim.milestones.is_empty() {
                self.optim.milestones = vec![self.schedule.wst_window[0]];
            }
        }
        self
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.budget() == 0 || s.batch_half == 0 || s.epoch_iterations == 0 {
            return bad("iteration budget, batch_half and epoch_iterations must be positive".into());
        }
        if self.mode != Mode::SourceOnly && s.base_checkpoint.is_none() && s.base_iterations == 0 {
            return bad("adaptation modes need a base checkpoint or base_iterations > 0".into());
        }
        let [a, b] = s.wst_window;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a >= b {
            return bad(format!("wst_window must satisfy 0 <= start < end <= 1, got [{a}, {b}]"));
        }
        if self.mode == Mode::BsrWst && self.window().1 - self.window().0 < 1 {
            return bad("wst_window is empty at this iteration budget".into());
        }
        for o in [&self.optim, &self.base_optim] {
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
                return bad("optimizer needs lr > 0, momentum in [0,1), weight_decay >= 0".into());
            }
        }
        self.bsr.config().validate()?;
        self.srrs.validate()?;
        self.ablation.negatives()?;
        for (name, v) in [
            ("st_confidence", self.self_training.st_confidence),
            ("confidence_without_srrs", self.self_training.confidence_without_srrs),
            ("pos_iou", self.pos_iou),
            ("self_training.pos_iou", self.self_training.pos_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0,1], got {v}"));
            }
        }
        if self.ablation != AblationToggles::default() && !self.mode.is_self_training() {
            log::warn!("ablation toggles have no effect in mode {}", self.mode.name());
        }
        Ok(())
    }

    /// Self-training window in iterations, `[start, end)`.
    pub fn window(&self) -> (usize, usize) {
        let n = self.schedule.iterations;
        (
            milestone_iteration(self.schedule.wst_window[0], n),
            milestone_iteration(self.schedule.wst_window[1], n),
        )
    }

    /// Iteration budget of this run's phase; milestones are fractions of it.
    pub fn budget(&self) -> usize {
        match self.mode {
            Mode::SourceOnly => self.schedule.base_iterations,
            _ => self.schedule.iterations,
        }
    }

    /// Iterations actually run (bsr_wst stops at the window end).
    pub fn run_length(&self) -> usize {
        match self.mode {
            Mode::BsrWst => self.window().1,
            _ => self.budget(),
        }
    }

    pub fn phase_optim(&self) -> &OptimConfig {
        match self.mode {
            Mode::SourceOnly => &self.base_optim,
            _ => &self.optim,
        }
    }

    /// The source-only configuration that produces this run's base model.
    pub fn base_config(&self) -> TrainConfig {
        let mut b = self.clone();
        b.mode = Mode::SourceOnly;
        b.schedule.base_checkpoint = None;
        b.ablation = AblationToggles::default();
        b
    }

    pub fn eval_split(&self) -> &'static str {
        if self.data.shared_split {
            TARGET_TRAIN_SPLIT
        } else {
            TARGET_TEST_SPLIT
        }
    }
}

/// Datasets as the trainer sees them: target-train has no labels.
pub struct TrainData {
    pub source: Vec<LabeledImage>,
    pub target: Vec<UnlabeledImage>,
    /// Held-out labeled split used only for reporting.
    pub eval: Vec<LabeledImage>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig, exec: Exec) -> Result<TrainData> {
        let root = &cfg.data.root;
        data::read_manifest(root)?;
        Ok(TrainData {
            source: data::load_labeled(root, SOURCE_SPLIT, exec)?,
            target: data::load_unlabeled(root, TARGET_TRAIN_SPLIT, exec)?,
            eval: data::load_labeled(root, cfg.eval_split(), exec)?,
        })
    }
}

/// Evaluate a model on a labeled split.
pub fn evaluate(params: &DetectorParams, images: &[LabeledImage], eval: &EvalSection, exec: Exec) -> Result<EvalResult> {
    let pixels: Vec<Vec<f64>> = images.iter().map(|i| i.pixels.clone()).collect();
    let preds = params.predict(exec, &pixels, eval.conf_thresh, eval.nms_iou)?;
    let dets: Vec<_> = preds.into_iter().map(|p| p.finals).collect();
    let gts: Vec<Vec<GroundTruth>> = images.iter().map(|i| i.objects.clone()).collect();
    evaluate_map(&dets, &gts, params.arch.num_classes, eval.conf_thresh, eval.iou_thresh, eval.ap_style)
}

/// Momentum SGD with coupled weight decay. Frozen entries are never touched.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, cfg: &OptimConfig) -> Sgd {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, frozen: Option<&[bool]>) {
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= lr * self.velocity[i];
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Everything a finished (or diverged) run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub log: RunLog,
    pub final_checkpoint: PathBuf,
}

/// Result of a run that may have diverged: the partial log is kept either way.
pub fn train(cfg: &TrainConfig, out: &Path, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainData::load(cfg, exec)?;
    train_with_data(cfg, &data, out, exec)
}

pub fn snapshot_config(cfg: &TrainConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
}

/// Load or train the base model of an adaptation run.
pub fn base_model(cfg: &TrainConfig, data: &TrainData, out: &Path, exec: Exec) -> Result<DetectorParams> {
    if let Some(p) = &cfg.schedule.base_checkpoint {
        return DetectorParams::read_checkpoint(p);
    }
    let base = train_with_data(&cfg.base_config(), data, &out.join("base"), exec)?;
    DetectorParams::read_checkpoint(&base.final_checkpoint)
}

pub fn train_with_data(cfg: &TrainConfig, data: &TrainData, out: &Path, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    snapshot_config(cfg, out)?;
    let arch = ArchConfig::default();
    let mut params = if cfg.mode == Mode::SourceOnly {
        match &cfg.schedule.base_checkpoint {
            Some(p) => DetectorParams::read_checkpoint(p)?,
            None => DetectorParams::init(arch.clone(), cfg.seed)?,
        }
    } else {
        base_model(cfg, data, out, exec)?
    };
    let anchors = params.arch.anchors()?;
    let mut writer = RunWriter::create(out, cfg.seed, params.arch.num_classes)?;
    writer.event(
        "start",
        serde_json::json!({ "mode": cfg.mode.name(), "config": serde_json::to_value(cfg)? }),
    )?;

    let result = run_loop(cfg, data, &anchors, &mut params, &mut writer, out, exec);
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            if let Error::Divergence { iteration, detail } = &e {
                writer.event("divergence", serde_json::json!({ "iteration": iteration, "detail": detail }))?;
            }
            writer.flush()?;
            return Err(e);
        }
    };
    let final_checkpoint = out.join("final.ckpt");
    params.write_checkpoint(&final_checkpoint)?;
    writer.event(
        "end",
        serde_json::json!({ "final_checkpoint": final_checkpoint, "final_mAP": log.final_map() }),
    )?;
    writer.flush()?;
    let mut log = log;
    log.checkpoints.push(final_checkpoint.clone());
    Ok(TrainOutcome {
        params,
        log,
        final_checkpoint,
    })
}

/// Per-iteration objective settings.
struct Step {
    source_half: usize,
    target_half: usize,
    task: bool,
    bsr: bool,
    self_train: Option<SelfTrainTerm>,
    dann: bool,
    progress: Option<f64>,
}

fn plan(cfg: &TrainConfig, k: usize) -> Result<Step> {
    let half = cfg.schedule.batch_half;
    let st = &cfg.self_training;
    let srrs_term = |epsilon, negatives| SelfTrainTerm {
        selection: PseudoSelection::Srrs,
        epsilon,
        delta: cfg.srrs.delta,
        negatives,
        neg_pos_ratio: st.neg_pos_ratio,
        pos_iou: st.pos_iou,
        conf_thresh: cfg.eval.conf_thresh,
        nms_iou: cfg.eval.nms_iou,
    };
    let progress_of = |k: usize, start: usize, end: usize| match cfg.srrs.progress_origin {
        ProgressOrigin::Window if end - start > 1 => (k - start) as f64 / (end - start - 1) as f64,
        ProgressOrigin::Window => 0.0,
        ProgressOrigin::Global => k as f64 / (cfg.run_length().max(2) - 1) as f64,
    };
    Ok(match cfg.mode {
        Mode::SourceOnly => Step {
            source_half: 2 * half,
            target_half: 0,
            task: true,
            bsr: false,
            self_train: None,
            dann: false,
            progress: None,
        },
        Mode::St => Step {
            source_half: 0,
            target_half: 2 * half,
            task: false,
            bsr: false,
            self_train: Some(SelfTrainTerm {
                selection: PseudoSelection::Confidence,
                epsilon: st.st_confidence,
                ..srrs_term(0.0, NegativeMode::Hard)
            }),
            dann: false,
            progress: None,
        },
        Mode::Wst => {
            let neg = cfg.ablation.negatives()?;
            let (term, progress) = if cfg.ablation.use_srrs {
                let p = progress_of(k, 0, cfg.run_length());
                (srrs_term(cfg.srrs.epsilon(p), neg), Some(p))
            } else {
                (
                    SelfTrainTerm {
                        selection: PseudoSelection::Confidence,
                        epsilon: st.confidence_without_srrs,
                        ..srrs_term(0.0, neg)
                    },
                    None,
                )
            };
            Step {
                source_half: 0,
                target_half: 2 * half,
                task: false,
                bsr: false,
                self_train: Some(term),
                dann: false,
                progress: if cfg.srrs.epsilon_mode == EpsilonMode::Scheduled { progress } else { None },
            }
        }
        Mode::Bsr | Mode::Dann => Step {
            source_half: half,
            target_half: half,
            task: true,
            bsr: cfg.mode == Mode::Bsr,
            self_train: None,
            dann: cfg.mode == Mode::Dann,
            progress: None,
        },
        Mode::BsrWst => {
            let (start, end) = cfg.window();
            let active = k >= start && k < end;
            let p = active.then(|| progress_of(k, start, end));
            let neg = cfg.ablation.negatives()?;
            let term = p.map(|p| {
                if cfg.ablation.use_srrs {
                    srrs_term(cfg.srrs.epsilon(p), neg)
                } else {
                    SelfTrainTerm {
                        selection: PseudoSelection::Confidence,
                        epsilon: st.confidence_without_srrs,
                        ..srrs_term(0.0, neg)
                    }
                }
            });
            Step {
                source_half: half,
                target_half: half,
                task: true,
                bsr: true,
                self_train: term,
                dann: false,
                progress: p,
            }
        }
    })
}

fn run_loop(
    cfg: &TrainConfig,
    data: &TrainData,
    anchors: &AnchorSet,
    params: &mut DetectorParams,
    writer: &mut RunWriter,
    out: &Path,
    exec: Exec,
) -> Result<RunLog> {
    let total = cfg.run_length();
    let optim = cfg.phase_optim();
    let mut sgd = Sgd::new(params.values.len(), optim);
    let frozen = cfg.mode.target_only().then(|| params.localization_mask());
    let mut domain = (cfg.mode == Mode::Dann).then(|| {
        let layout = params.layout();
        DomainClassifier::init(layout.feature_channels, cfg.dann.hidden, cfg.seed ^ 0xD0)
    });
    let mut domain_sgd = domain.as_ref().map(|d| Sgd::new(d.values.len(), optim));
    let mut composer = BatchComposer::new(
        data.source.len(),
        data.target.len(),
        params.arch.image_size,
        cfg.augment,
        cfg.seed,
    )?;
    let mut log = RunLog {
        seed: cfg.seed,
        num_classes: params.arch.num_classes,
        ..Default::default()
    };

    let initial = EpochRecord {
        epoch: 0,
        iteration: 0,
        result: evaluate(params, &data.eval, &cfg.eval, exec)?,
    };
    writer.initial_evaluation(&initial)?;
    log.epochs.push(initial);

    let ckpt_dir = out.join("checkpoints");
    let mut best: Option<f64> = None;
    for k in 0..total {
        let step = plan(cfg, k)?;
        let batch = composer.compose(&data.source, &data.target, step.source_half, step.target_half)?;
        let src: Vec<SourceSample> = batch
            .source
            .iter()
            .map(|s| SourceSample {
                image: &s.pixels,
                gt: &s.objects,
            })
            .collect();
        let tgt: Vec<&[f64]> = batch.target.iter().map(|t| t.pixels.as_slice()).collect();
        let obj = BatchObjective {
            task: step.task.then_some(cfg.task),
            pos_iou: cfg.pos_iou,
            bsr: step.bsr.then(|| (cfg.bsr.config(), cfg.bsr.lambda)),
            self_train: step.self_train,
            dann: domain.as_ref().filter(|_| step.dann).map(|c| DannTerm {
                classifier: c,
                lambda: cfg.dann.lambda,
            }),
        };
        let weights = TermWeights {
            bsr: cfg.bsr.weight,
            st: cfg.self_training.weight,
        };
        let mut o = weighted_objective(params, anchors, exec, &src, &tgt, &obj, weights)?;
        if !o.loss.is_finite() || o.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: k,
                detail: format!("non-finite loss or gradient: {:?}", o.loss.components),
            });
        }
        let lr = optim.lr_at(k, cfg.budget());
        clip(&mut o.grad, optim.clip_norm);
        sgd.step(&mut params.values, &o.grad, lr, frozen.as_deref());
        if let (Some(d), Some(s), Some(mut g)) = (domain.as_mut(), domain_sgd.as_mut(), o.domain_grad.take()) {
            clip(&mut g, optim.clip_norm);
            s.step(&mut d.values, &g, lr, None);
        }

        let done = k + 1;
        let epoch = done.div_ceil(cfg.schedule.epoch_iterations);
        let rec = IterationRecord {
            iteration: k,
            epoch,
            lr,
            total: o.loss.total,
            losses: o.loss.components.clone(),
            pseudo_count: o.pseudo.map(|p| p.count),
            mean_srrs: o.pseudo.map(|p| p.mean_srrs),
            epsilon: o.pseudo.map(|p| p.epsilon),
            progress: step.progress,
        };
        let epoch_end = done % cfg.schedule.epoch_iterations == 0 || done == total;
        let eval = if epoch_end {
            let r = EpochRecord {
                epoch,
                iteration: done,
                result: evaluate(params, &data.eval, &cfg.eval, exec)?,
            };
            if cfg.schedule.epoch_checkpoints {
                fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
                let p = ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
                params.write_checkpoint(&p)?;
                log.checkpoints.push(p);
            }
            // reporting only; never fed back into training
            if r.result.map.is_some_and(|m| best.is_none_or(|b| m > b)) {
                best = r.result.map;
                params.write_checkpoint(&out.join("best_on_target_test.ckpt"))?;
            }
            log::info!(
                "{} seed {} epoch {epoch} iter {done}: loss {:.4} target mAP {:.4}",
                cfg.mode.name(),
                cfg.seed,
                o.loss.total,
                r.result.map.unwrap_or(f64::NAN)
            );
            Some(r)
        } else {
            None
        };
        writer.iteration(&rec, eval.as_ref())?;
        log.iterations.push(rec);
        if let Some(e) = eval {
            log.epochs.push(e);
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy)]
struct TermWeights {
    bsr: f64,
    st: f64,
}

/// The batch objective with per-term weights. Unit weights reduce to the
/// plain sum; otherwise the terms are evaluated separately and combined.
fn weighted_objective(
    params: &DetectorParams,
    anchors: &AnchorSet,
    exec: Exec,
    src: &[SourceSample],
    tgt: &[&[f64]],
    obj: &BatchObjective,
    w: TermWeights,
) -> Result<crate::losses::ObjectiveOutput> {
    if (w.bsr == 1.0 || obj.bsr.is_none()) && (w.st == 1.0 || obj.self_train.is_none()) {
        return batch_objective(params, anchors, exec, src, tgt, obj);
    }
    let mut base = batch_objective(
        params,
        anchors,
        exec,
        src,
        tgt,
        &BatchObjective {
            bsr: None,
            self_train: None,
            ..*obj
        },
    )?;
    for (term_w, only) in [
        (
            w.bsr,
            BatchObjective {
                bsr: obj.bsr,
                pos_iou: obj.pos_iou,
                ..Default::default()
            },
        ),
        (
            w.st,
            BatchObjective {
                self_train: obj.self_train,
                pos_iou: obj.pos_iou,
                ..Default::default()
            },
        ),
    ] {
        if only.bsr.is_none() && only.self_train.is_none() {
            continue;
        }
        let part = batch_objective(params, anchors, exec, src, tgt, &only)?;
        base.loss.total += term_w * part.loss.total;
        for (k, v) in &part.loss.components {
            *base.loss.components.entry(k.clone()).or_insert(0.0) += v;
        }
        base.loss.counts += part.loss.counts;
        for (g, p) in base.grad.iter_mut().zip(&part.grad) {
            *g += term_w * p;
        }
        if part.pseudo.is_some() {
            base.pseudo = part.pseudo;
            base.pseudo_labels = part.pseudo_labels;
        }
    }
    Ok(base)
}

/// ε the schedule should have produced at a given window progress; exposed
/// for audits of logged values.
pub fn expected_epsilon(progress: f64) -> f64 {
    epsilon_schedule(progress)
}

/// Run `f` over items on a pool of `jobs` threads (sequential when 1).
pub fn fan_out<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| par::map(Exec::Parallel, items, &f));
        }
    }
    let _ = jobs;
    par::map(Exec::Sequential, items, f)
}
