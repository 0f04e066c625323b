//! Training objectives.
//!
//! Per-image functions return unnormalized sums together with gradients
//! w.r.t. the class logits and box offsets; the batch wrappers normalize
//! (task and self-training terms by the batch positive count, the
//! background regularizer by the number of selected examples).

pub mod objective;

pub use objective::{
    adversarial_objectives, batch_objective, BatchObjective, DannTerm, ObjectiveOutput, PseudoSelection,
    PseudoStats, SelfTrainTerm, SourceSample,
};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxops::{encode_offsets, AnchorSet, MatchResult};
use crate::detector::RawOutput;
use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking logs.
pub const EPS_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub pos: usize,
    pub neg: usize,
    pub weak_neg: usize,
    /// Detections whose argmax is a foreground class (the N of the 3N rule).
    pub fg_predicted: usize,
    pub selected: usize,
}

impl std::ops::AddAssign for LossCounts {
    fn add_assign(&mut self, o: Self) {
        self.pos += o.pos;
        self.neg += o.neg;
        self.weak_neg += o.weak_neg;
        self.fg_predicted += o.fg_predicted;
        self.selected += o.selected;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    /// `cls_pos`, `cls_neg`, `loc`, `adv`, `st_pos`, `st_neg`, `domain`.
    pub components: BTreeMap<String, f64>,
    pub counts: LossCounts,
}

impl LossOutput {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }

    pub(crate) fn set(&mut self, name: &str, v: f64) {
        self.components.insert(name.to_string(), v);
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// Gradients w.r.t. one image's raw output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub dlogits: Vec<f64>,
    pub doffsets: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(raw: &RawOutput) -> Self {
        OutputGrad {
            dlogits: vec![0.0; raw.class_logits.len()],
            doffsets: vec![0.0; raw.box_offsets.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.dlogits.iter_mut().for_each(|v| *v *= s);
        self.doffsets.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.dlogits.iter().chain(&self.doffsets).all(|v| *v == 0.0)
    }
}

/// Log-softmax of one row.
fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Adds the gradient of `weight · (−log softmax(z)_class)` to `dz`.
fn add_ce_grad(z: &[f64], class: usize, weight: f64, dz: &mut [f64]) {
    let ls = log_softmax(z);
    for (k, (d, l)) in dz.iter_mut().zip(&ls).enumerate() {
        let p = l.exp();
        *d += weight * (p - if k == class { 1.0 } else { 0.0 });
    }
}

/// Per-anchor background cross-entropy −log p_i(0).
pub fn background_conf_losses(raw: &RawOutput) -> Vec<f64> {
    (0..raw.len()).map(|i| -log_softmax(raw.logits(i))[0]).collect()
}

/// Sort key: descending loss, ascending index.
fn hardest_first(losses: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| {
        losses[*b]
            .partial_cmp(&losses[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    }
}

/// Hard negative mining: the `count` candidates with the highest confidence
/// loss (lowest index first on ties), returned in ascending index order.
pub fn hard_negative_mining(conf_losses: &[f64], candidates: &[usize], count: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(hardest_first(conf_losses));
    c.truncate(count);
    c.sort_unstable();
    c
}

/// Weak negative mining: from an already mined negative set keep the
/// `max(1, ⌊|neg|/3⌋)` entries with the lowest confidence loss (lowest index
/// first on ties). Returned in ascending index order; empty input gives an
/// empty result.
pub fn weak_negative_mining(conf_losses: &[f64], neg: &[usize]) -> Vec<usize> {
    if neg.is_empty() {
        return Vec::new();
    }
    let keep = (neg.len() / 3).max(1);
    let mut c = neg.to_vec();
    c.sort_by(|a, b| {
        conf_losses[*a]
            .partial_cmp(&conf_losses[*b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    c.truncate(keep);
    c.sort_unstable();
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskLossConfig {
    /// Negatives per positive in hard mining.
    pub neg_pos_ratio: usize,
    /// Negatives mined per image when it has no positive.
    pub fallback_negatives: usize,
    pub loc_weight: f64,
}

impl Default for TaskLossConfig {
    fn default() -> Self {
        TaskLossConfig {
            neg_pos_ratio: 3,
            fallback_negatives: 3,
            loc_weight: 1.0,
        }
    }
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Unnormalized supervised multibox loss for one image.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub loc: f64,
    pub counts: LossCounts,
    pub grad: OutputGrad,
    /// Negatives that received background supervision.
    pub negatives: Vec<usize>,
}

pub fn task_loss_image(
    raw: &RawOutput,
    m: &MatchResult,
    anchors: &AnchorSet,
    cfg: &TaskLossConfig,
) -> Result<ImageLoss> {
    check_match(raw, m, anchors)?;
    let mut grad = OutputGrad::zeros(raw);
    let k1 = raw.num_classes;
    let mut cls_pos = 0.0;
    let mut loc = 0.0;
    for &i in &m.pos_indices {
        let g = &m.matched_gt[&i];
        let z = raw.logits(i);
        cls_pos -= log_softmax(z)[g.class_id];
        add_ce_grad(z, g.class_id, 1.0, &mut grad.dlogits[i * k1..(i + 1) * k1]);
        let target = encode_offsets(&anchors.boxes[i], &g.bbox)?;
        let pred = raw.offsets(i);
        for j in 0..4 {
            let (v, d) = smooth_l1(pred[j] - target[j]);
            loc += cfg.loc_weight * v;
            grad.doffsets[i * 4 + j] += cfg.loc_weight * d;
        }
    }
    let conf = background_conf_losses(raw);
    let want = if m.pos_indices.is_empty() {
        cfg.fallback_negatives
    } else {
        cfg.neg_pos_ratio * m.pos_indices.len()
    };
    let negatives = hard_negative_mining(&conf, &m.neg_candidate_indices, want);
    let mut cls_neg = 0.0;
    for &i in &negatives {
        cls_neg += conf[i];
        add_ce_grad(raw.logits(i), 0, 1.0, &mut grad.dlogits[i * k1..(i + 1) * k1]);
    }
    Ok(ImageLoss {
        cls_pos,
        cls_neg,
        loc,
        counts: LossCounts {
            pos: m.pos_indices.len(),
            neg: negatives.len(),
            ..Default::default()
        },
        grad,
        negatives,
    })
}

fn check_match(raw: &RawOutput, m: &MatchResult, anchors: &AnchorSet) -> Result<()> {
    let n = raw.len();
    if anchors.len() != n || m.pos_indices.len() + m.neg_candidate_indices.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} anchors in match and anchor set"),
            got: format!(
                "{} anchors, {} matched",
                anchors.len(),
                m.pos_indices.len() + m.neg_candidate_indices.len()
            ),
        });
    }
    Ok(())
}

/// Normalized multibox loss over a batch: all terms divided by the batch's
/// positive count (at least one). Gradients are scaled to match.
pub fn task_loss(
    raws: &[RawOutput],
    matches: &[MatchResult],
    anchors: &AnchorSet,
    cfg: &TaskLossConfig,
) -> Result<(LossOutput, Vec<OutputGrad>)> {
    let mut per = raws
        .iter()
        .zip(matches)
        .map(|(r, m)| task_loss_image(r, m, anchors, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = LossCounts::default();
    per.iter().for_each(|l| counts += l.counts);
    let norm = counts.pos.max(1) as f64;
    let (mut pos, mut neg, mut loc) = (0.0, 0.0, 0.0);
    for l in &mut per {
        pos += l.cls_pos;
        neg += l.cls_neg;
        loc += l.loc;
        l.grad.scale(1.0 / norm);
    }
    let mut out = LossOutput {
        counts,
        ..Default::default()
    };
    out.set("cls_pos", pos / norm);
    out.set("cls_neg", neg / norm);
    out.set("loc", loc / norm);
    out.total = (pos + neg + loc) / norm;
    Ok((out, per.into_iter().map(|l| l.grad).collect()))
}

/// Which negatives the self-training loss supervises as background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Full hard mining (naive self-training).
    Hard,
    /// No negative at all.
    Masked,
    /// Hard mining followed by weak negative mining.
    Weak,
}

/// Unnormalized self-training loss for one image: classification only, with
/// the box-offset gradient identically zero. Images without positives
/// contribute nothing.
pub fn self_training_loss_image(
    raw: &RawOutput,
    m: &MatchResult,
    anchors: &AnchorSet,
    neg_pos_ratio: usize,
    mode: NegativeMode,
) -> Result<ImageLoss> {
    check_match(raw, m, anchors)?;
    let mut grad = OutputGrad::zeros(raw);
    let k1 = raw.num_classes;
    if m.pos_indices.is_empty() {
        return Ok(ImageLoss {
            cls_pos: 0.0,
            cls_neg: 0.0,
            loc: 0.0,
            counts: LossCounts::default(),
            grad,
            negatives: Vec::new(),
        });
    }
    let mut cls_pos = 0.0;
    for &i in &m.pos_indices {
        let c = m.matched_gt[&i].class_id;
        let z = raw.logits(i);
        cls_pos -= log_softmax(z)[c];
        add_ce_grad(z, c, 1.0, &mut grad.dlogits[i * k1..(i + 1) * k1]);
    }
    let conf = background_conf_losses(raw);
    let hard = hard_negative_mining(&conf, &m.neg_candidate_indices, neg_pos_ratio * m.pos_indices.len());
    let negatives = match mode {
        NegativeMode::Hard => hard.clone(),
        NegativeMode::Masked => Vec::new(),
        NegativeMode::Weak => weak_negative_mining(&conf, &hard),
    };
    let mut cls_neg = 0.0;
    for &i in &negatives {
        cls_neg += conf[i];
        add_ce_grad(raw.logits(i), 0, 1.0, &mut grad.dlogits[i * k1..(i + 1) * k1]);
    }
    Ok(ImageLoss {
        cls_pos,
        cls_neg,
        loc: 0.0,
        counts: LossCounts {
            pos: m.pos_indices.len(),
            neg: hard.len(),
            weak_neg: if mode == NegativeMode::Weak { negatives.len() } else { 0 },
            ..Default::default()
        },
        grad,
        negatives,
    })
}

/// Weak self-training loss over a batch (weak negative mining), normalized
/// by the batch positive count.
pub fn wst_loss(
    raws: &[RawOutput],
    pseudo_matches: &[MatchResult],
    anchors: &AnchorSet,
    neg_pos_ratio: usize,
) -> Result<(LossOutput, Vec<OutputGrad>)> {
    self_training_loss(raws, pseudo_matches, anchors, neg_pos_ratio, NegativeMode::Weak)
}

/// Self-training loss over a batch with the given negative handling.
pub fn self_training_loss(
    raws: &[RawOutput],
    pseudo_matches: &[MatchResult],
    anchors: &AnchorSet,
    neg_pos_ratio: usize,
    mode: NegativeMode,
) -> Result<(LossOutput, Vec<OutputGrad>)> {
    let mut per = raws
        .iter()
        .zip(pseudo_matches)
        .map(|(r, m)| self_training_loss_image(r, m, anchors, neg_pos_ratio, mode))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = LossCounts::default();
    per.iter().for_each(|l| counts += l.counts);
    let norm = counts.pos.max(1) as f64;
    let (mut pos, mut neg) = (0.0, 0.0);
    for l in &mut per {
        pos += l.cls_pos;
        neg += l.cls_neg;
        l.grad.scale(1.0 / norm);
    }
    let mut out = LossOutput {
        counts,
        ..Default::default()
    };
    out.set("st_pos", pos / norm);
    out.set("st_neg", neg / norm);
    out.total = (pos + neg) / norm;
    Ok((out, per.into_iter().map(|l| l.grad).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsrConfig {
    /// Target background probability.
    pub t: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// The selection keeps `selection_multiplier · N` examples.
    pub selection_multiplier: usize,
    /// Treat |t − p|^γ as a constant weight when differentiating.
    pub detach_focal: bool,
}

impl Default for BsrConfig {
    fn default() -> Self {
        BsrConfig {
            t: 0.5,
            gamma: 2.0,
            selection_multiplier: 3,
            detach_focal: true,
        }
    }
}

impl BsrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::InvalidConfig(format!("bsr t must lie in (0,1), got {}", self.t)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("bsr gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Batch-wise selection: the `multiplier · N` lowest background
/// probabilities in the pooled list (lowest index first on ties), in
/// ascending probability order. `N = 0` selects nothing.
pub fn select_bsr_examples(background_probs: &[f64], fg_predicted: usize, multiplier: usize) -> Vec<usize> {
    let want = (fg_predicted * multiplier).min(background_probs.len());
    if want == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..background_probs.len()).collect();
    idx.sort_by(|a, b| {
        background_probs[*a]
            .partial_cmp(&background_probs[*b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    idx.truncate(want);
    idx
}

/// Focal background regularizer for one probability, and dL/dp.
pub fn bsr_term(p: f64, cfg: &BsrConfig) -> (f64, f64) {
    let clamped = p < EPS_CLAMP || p > 1.0 - EPS_CLAMP;
    let p = p.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
    let t = cfg.t;
    let diff = (t - p).abs();
    let w = diff.powf(cfg.gamma);
    let h = -t * p.ln() - (1.0 - t) * (1.0 - p).ln();
    if clamped {
        return (w * h, 0.0);
    }
    let dh = -t / p + (1.0 - t) / (1.0 - p);
    let mut d = w * dh;
    if !cfg.detach_focal && cfg.gamma > 0.0 && diff > 0.0 {
        let dw = cfg.gamma * diff.powf(cfg.gamma - 1.0) * (p - t).signum();
        d += dw * h;
    }
    (w * h, d)
}

/// Mean focal regularizer over the selected probabilities, with dL/dp per
/// entry. Empty selection gives zero.
pub fn bsr_loss(background_probs: &[f64], cfg: &BsrConfig) -> (f64, Vec<f64>) {
    if background_probs.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = background_probs.len() as f64;
    let mut total = 0.0;
    let grads = background_probs
        .iter()
        .map(|&p| {
            let (v, d) = bsr_term(p, cfg);
            total += v;
            d / norm
        })
        .collect();
    (total / norm, grads)
}

/// Batch background regularization over pooled target outputs. Returns the
/// loss and per-image logit gradients (offset gradients are zero).
pub fn bsr_batch(raws: &[RawOutput], cfg: &BsrConfig) -> (LossOutput, Vec<OutputGrad>) {
    let mut bg = Vec::new();
    let mut owner = Vec::new();
    let mut probs_all = Vec::with_capacity(raws.len());
    let mut fg = 0;
    for (img, raw) in raws.iter().enumerate() {
        let probs = raw.class_probs();
        for i in 0..raw.len() {
            let row = &probs[i * raw.num_classes..(i + 1) * raw.num_classes];
            if crate::boxops::argmax(row) != 0 {
                fg += 1;
            }
            bg.push(row[0]);
            owner.push((img, i));
        }
        probs_all.push(probs);
    }
    let sel = select_bsr_examples(&bg, fg, cfg.selection_multiplier);
    let chosen: Vec<f64> = sel.iter().map(|&j| bg[j]).collect();
    let (value, dps) = bsr_loss(&chosen, cfg);
    let mut grads: Vec<OutputGrad> = raws.iter().map(OutputGrad::zeros).collect();
    for (&j, dp) in sel.iter().zip(dps) {
        let (img, i) = owner[j];
        let k1 = raws[img].num_classes;
        let row = &probs_all[img][i * k1..(i + 1) * k1];
        let p0 = row[0];
        let dz = &mut grads[img].dlogits[i * k1..(i + 1) * k1];
        for (k, d) in dz.iter_mut().enumerate() {
            *d += dp * p0 * (if k == 0 { 1.0 } else { 0.0 } - row[k]);
        }
    }
    let mut out = LossOutput {
        total: value,
        counts: LossCounts {
            fg_predicted: fg,
            selected: sel.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    out.set("adv", value);
    (out, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxops::{BBox, GroundTruth};
    use proptest::prelude::*;

    fn raw_from_probs(rows: &[Vec<f64>]) -> RawOutput {
        RawOutput {
            num_classes: rows[0].len(),
            class_logits: rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect(),
            box_offsets: vec![0.0; rows.len() * 4],
        }
    }

    fn unit_anchors(n: usize) -> AnchorSet {
        AnchorSet {
            boxes: (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    BBox::new(x, 0.0, x + 1.0 / n as f64, 1.0).unwrap()
                })
                .collect(),
        }
    }

    fn pos_match(n: usize, pos: &[(usize, usize)], anchors: &AnchorSet) -> MatchResult {
        let mut m = MatchResult::all_negative(n);
        for &(i, c) in pos {
            m.matched_gt.insert(
                i,
                GroundTruth {
                    bbox: anchors.boxes[i],
                    class_id: c,
                },
            );
        }
        m.pos_indices = pos.iter().map(|p| p.0).collect();
        m.pos_indices.sort_unstable();
        m.neg_candidate_indices.retain(|i| !m.pos_indices.contains(i));
        m
    }

    #[test]
    fn task_loss_single_positive_half_probability() {
        let anchors = unit_anchors(1);
        let raw = raw_from_probs(&[vec![0.5, 0.5]]);
        let m = pos_match(1, &[(0, 1)], &anchors);
        let (out, _) = task_loss(&[raw], &[m], &anchors, &TaskLossConfig::default()).unwrap();
        assert!((out.component("cls_pos") - 0.693147).abs() < 1e-6);
        assert_eq!(out.component("cls_neg"), 0.0);
        assert_eq!(out.component("loc"), 0.0);
    }

    #[test]
    fn task_loss_mines_three_negatives_per_positive() {
        let anchors = unit_anchors(12);
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![0.5 + 0.01 * i as f64, 0.5 - 0.01 * i as f64]).collect();
        let m = pos_match(12, &[(0, 1), (1, 1)], &anchors);
        let (out, _) = task_loss(&[raw_from_probs(&rows)], &[m], &anchors, &TaskLossConfig::default()).unwrap();
        assert_eq!(out.counts.neg, 6);
    }

    #[test]
    fn task_loss_perfect_predictions_have_zero_classification_terms() {
        let anchors = unit_anchors(4);
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let raw = RawOutput {
            num_classes: 2,
            class_logits: rows.iter().flat_map(|r| r.iter().map(|p| if *p > 0.5 { 50.0 } else { -50.0 })).collect(),
            box_offsets: vec![0.0; 16],
        };
        let m = pos_match(4, &[(0, 1)], &anchors);
        let (out, _) = task_loss(&[raw], &[m], &anchors, &TaskLossConfig::default()).unwrap();
        assert!(out.component("cls_pos") < 1e-12);
        assert!(out.component("cls_neg") < 1e-12);
    }

    #[test]
    fn task_loss_without_positives_uses_fallback_negatives() {
        let anchors = unit_anchors(8);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| vec![0.7, 0.3]).collect();
        let m = MatchResult::all_negative(8);
        let (out, _) = task_loss(&[raw_from_probs(&rows)], &[m], &anchors, &TaskLossConfig::default()).unwrap();
        assert_eq!(out.counts.neg, 3);
        assert!((out.total - 3.0 * -(0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn weak_mining_examples() {
        let losses = [0.1, 0.9, 0.2, 0.5, 0.8, 0.3];
        assert_eq!(weak_negative_mining(&losses, &[0, 1, 2, 3, 4, 5]), vec![0, 2]);
        assert_eq!(weak_negative_mining(&[0.4, 0.2, 0.9], &[0, 1, 2]), vec![1]);
        assert_eq!(weak_negative_mining(&[0.5; 9], &[8, 2, 5, 0, 1, 3, 4, 6, 7]), vec![0, 1, 2]);
        assert!(weak_negative_mining(&[0.5], &[]).is_empty());
        assert_eq!(weak_negative_mining(&[0.5, 0.1], &[0, 1]), vec![1]);
    }

    #[test]
    fn wst_loss_example_value() {
        let anchors = unit_anchors(2);
        // anchor 0 is the positive with p(ĉ)=0.8; anchor 1 is the only mined
        // negative and therefore the only weak negative, with p(0)=0.9.
        let raw = raw_from_probs(&[vec![0.1, 0.8, 0.1], vec![0.9, 0.05, 0.05]]);
        let m = pos_match(2, &[(0, 1)], &anchors);
        let (out, grads) = wst_loss(&[raw], &[m], &anchors, 3).unwrap();
        assert!((out.total - 0.328504).abs() < 1e-6);
        assert_eq!(out.counts.weak_neg, 1);
        assert!(grads[0].doffsets.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wst_loss_all_certain_is_zero() {
        let anchors = unit_anchors(2);
        let raw = RawOutput {
            num_classes: 2,
            class_logits: vec![-60.0, 60.0, 60.0, -60.0],
            box_offsets: vec![0.3; 8],
        };
        let m = pos_match(2, &[(0, 1)], &anchors);
        let (out, _) = wst_loss(&[raw], &[m], &anchors, 3).unwrap();
        assert!(out.total < 1e-12);
    }

    #[test]
    fn wst_skips_images_without_pseudo_labels() {
        let anchors = unit_anchors(3);
        let raw = raw_from_probs(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.6, 0.4]]);
        let (out, grads) = wst_loss(&[raw], &[MatchResult::all_negative(3)], &anchors, 3).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(grads[0].is_zero());
    }

    #[test]
    fn masked_mode_never_touches_background_logits() {
        let anchors = unit_anchors(6);
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![0.3 + 0.1 * i as f64 / 6.0, 0.5, 0.2 - 0.1 * i as f64 / 6.0]).collect();
        let raw = raw_from_probs(&rows);
        let m = pos_match(6, &[(2, 1)], &anchors);
        let (_, grads) = self_training_loss(&[raw], &[m], &anchors, 3, NegativeMode::Masked).unwrap();
        // only the positive row moves, negatives get nothing
        for i in 0..6 {
            let row = &grads[0].dlogits[i * 3..i * 3 + 3];
            if i != 2 {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn bsr_selection_examples() {
        assert_eq!(select_bsr_examples(&[0.1, 0.9, 0.2, 0.8], 1, 3), vec![0, 2, 3]);
        assert!(select_bsr_examples(&[0.1, 0.9], 0, 3).is_empty());
        assert_eq!(select_bsr_examples(&[0.4, 0.3], 5, 3), vec![1, 0]);
    }

    #[test]
    fn bsr_pooling_equals_manual_concatenation() {
        let a = raw_from_probs(&[vec![0.2, 0.8], vec![0.9, 0.1]]);
        let b = raw_from_probs(&[vec![0.3, 0.7], vec![0.95, 0.05], vec![0.6, 0.4]]);
        let cfg = BsrConfig::default();
        let (pooled, _) = bsr_batch(&[a.clone(), b.clone()], &cfg);
        let joined = RawOutput {
            num_classes: 2,
            class_logits: [a.class_logits, b.class_logits].concat(),
            box_offsets: [a.box_offsets, b.box_offsets].concat(),
        };
        let (single, _) = bsr_batch(&[joined], &cfg);
        assert_eq!(pooled.counts.fg_predicted, 2);
        assert_eq!(pooled.counts.selected, 5);
        assert_eq!(pooled.total, single.total);
    }

    #[test]
    fn bsr_loss_shape() {
        let cfg = BsrConfig::default();
        assert_eq!(bsr_loss(&[0.5], &cfg).0, 0.0);
        let oracle = -0.5 * 0.0625 * (0.25f64.ln() + 0.75f64.ln());
        assert!((bsr_loss(&[0.25], &cfg).0 - oracle).abs() < 1e-6);
        assert_eq!(bsr_loss(&[], &cfg).0, 0.0);
    }

    proptest! {
        #[test]
        fn bsr_symmetric_at_half(p in 0.001..0.999f64, gamma in 0.0..6.0f64) {
            let cfg = BsrConfig { gamma, ..Default::default() };
            let a = bsr_loss(&[p], &cfg).0;
            let b = bsr_loss(&[1.0 - p], &cfg).0;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn bsr_nonnegative_and_zero_only_at_target(p in 0.0..1.0f64, t in 0.05..0.95f64, gamma in 0.5..6.0f64) {
            let cfg = BsrConfig { t, gamma, ..Default::default() };
            let v = bsr_loss(&[p], &cfg).0;
            prop_assert!(v >= 0.0);
            if (p - t).abs() > 1e-3 {
                prop_assert!(v > 0.0);
            }
            prop_assert_eq!(bsr_loss(&[t], &cfg).0, 0.0);
        }

        #[test]
        fn weak_mining_cardinality_and_subset(losses in proptest::collection::vec(0.0..5.0f64, 1..40), take in 1usize..40) {
            let neg: Vec<usize> = (0..losses.len().min(take)).collect();
            let w = weak_negative_mining(&losses, &neg);
            prop_assert_eq!(w.len(), (neg.len() / 3).max(1));
            prop_assert!(w.iter().all(|i| neg.contains(i)));
            let worst_kept = w.iter().map(|&i| losses[i]).fold(f64::NEG_INFINITY, f64::max);
            for i in neg.iter().filter(|i| !w.contains(i)) {
                prop_assert!(losses[*i] >= worst_kept);
            }
        }

        #[test]
        fn bsr_selection_permutation_invariant(probs in proptest::collection::vec(0.0..1.0f64, 1..30), n in 0usize..12, seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..probs.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let mut a: Vec<f64> = select_bsr_examples(&probs, n, 3).iter().map(|&i| probs[i]).collect();
            let mut b: Vec<f64> = select_bsr_examples(&shuffled, n, 3).iter().map(|&i| shuffled[i]).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
