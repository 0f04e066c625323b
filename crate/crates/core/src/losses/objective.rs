//! Batch objective: forward source and target images, evaluate every active
//! loss term, and backpropagate all of them in one pass per image.
//!
//! The background regularizer is attached to the target stream with a
//! reversed junction, so the head descends on it while the feature extractor
//! ascends. The domain classifier term of the feature-alignment baseline
//! reverses its feature gradient the same way.

use serde::{Deserialize, Serialize};

use super::{bsr_batch, self_training_loss, task_loss, BsrConfig, LossOutput, NegativeMode, OutputGrad, TaskLossConfig};
use crate::boxops::{match_anchors, AnchorSet, GroundTruth, MatchResult};
use crate::detector::{postprocess, DetectorParams, DomainClassifier, HeadGrad, Junction, RawOutput, Tape};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::pseudolabel::{confidence_pseudo_labels, generate_pseudo_labels, PseudoLabel};

/// A labeled source image as seen by the trainer.
#[derive(Debug, Clone, Copy)]
pub struct SourceSample<'a> {
    pub image: &'a [f64],
    pub gt: &'a [GroundTruth],
}

/// How pseudo-labels are chosen from the final detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSelection {
    /// Supporting-region score must reach ε.
    Srrs,
    /// The detection's own confidence must reach ε.
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTrainTerm {
    pub selection: PseudoSelection,
    pub epsilon: f64,
    pub delta: f64,
    pub negatives: NegativeMode,
    pub neg_pos_ratio: usize,
    /// Anchor matching threshold for pseudo boxes.
    pub pos_iou: f64,
    pub conf_thresh: f64,
    pub nms_iou: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DannTerm<'a> {
    pub classifier: &'a DomainClassifier,
    pub lambda: f64,
}

/// Active terms. Source terms need source samples; target terms need target images.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchObjective<'a> {
    pub task: Option<TaskLossConfig>,
    pub pos_iou: f64,
    /// Background regularization with the junction reversal coefficient.
    pub bsr: Option<(BsrConfig, f64)>,
    pub self_train: Option<SelfTrainTerm>,
    pub dann: Option<DannTerm<'a>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub count: usize,
    pub mean_srrs: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: LossOutput,
    pub grad: Vec<f64>,
    pub domain_grad: Option<Vec<f64>>,
    pub pseudo: Option<PseudoStats>,
    pub pseudo_labels: Vec<Vec<PseudoLabel>>,
}

fn merge(into: &mut LossOutput, part: &LossOutput) {
    into.total += part.total;
    for (k, v) in &part.components {
        *into.components.entry(k.clone()).or_insert(0.0) += v;
    }
    into.counts += part.counts;
}

pub fn batch_objective(
    params: &DetectorParams,
    anchors: &AnchorSet,
    exec: Exec,
    source: &[SourceSample],
    target: &[&[f64]],
    obj: &BatchObjective,
) -> Result<ObjectiveOutput> {
    let use_source = obj.task.is_some() || obj.dann.is_some();
    let use_target = obj.bsr.is_some() || obj.self_train.is_some() || obj.dann.is_some();
    let source = if use_source { source } else { &[] };
    let target = if use_target { target } else { &[] };

    let fwd_src: Vec<(RawOutput, Tape)> = par::map(exec, source, |_, s| params.forward(s.image))
        .into_iter()
        .collect::<Result<_>>()?;
    let fwd_tgt: Vec<(RawOutput, Tape)> = par::map(exec, target, |_, img| params.forward(img))
        .into_iter()
        .collect::<Result<_>>()?;

    let mut loss = LossOutput::default();
    let mut src_grads: Vec<Option<OutputGrad>> = vec![None; source.len()];
    let mut tgt_plain: Vec<Option<OutputGrad>> = vec![None; target.len()];
    let mut tgt_reversed: Vec<Option<OutputGrad>> = vec![None; target.len()];
    let mut pseudo = None;
    let mut pseudo_labels = Vec::new();

    if let (Some(cfg), false) = (obj.task, source.is_empty()) {
        let matches: Vec<MatchResult> = par::map(exec, source, |_, s| match_anchors(anchors, s.gt, obj.pos_iou))
            .into_iter()
            .collect::<Result<_>>()?;
        let raws: Vec<RawOutput> = fwd_src.iter().map(|(r, _)| r.clone()).collect();
        let (out, grads) = task_loss(&raws, &matches, anchors, &cfg)?;
        merge(&mut loss, &out);
        src_grads = grads.into_iter().map(Some).collect();
    }

    let tgt_raws: Vec<RawOutput> = fwd_tgt.iter().map(|(r, _)| r.clone()).collect();

    if let (Some((cfg, _)), false) = (obj.bsr, target.is_empty()) {
        let (out, grads) = bsr_batch(&tgt_raws, &cfg);
        merge(&mut loss, &out);
        tgt_reversed = grads.into_iter().map(Some).collect();
    }

    if let (Some(st), false) = (obj.self_train, target.is_empty()) {
        let labeled: Vec<(Vec<PseudoLabel>, MatchResult)> = par::map(exec, &tgt_raws, |_, raw| {
            let pred = postprocess(anchors, raw, st.conf_thresh, st.nms_iou)?;
            let labels = match st.selection {
                PseudoSelection::Srrs => generate_pseudo_labels(&pred.all, &pred.finals, st.delta, st.epsilon)?,
                PseudoSelection::Confidence => {
                    confidence_pseudo_labels(&pred.all, &pred.finals, st.delta, st.epsilon)?
                }
            };
            let gt: Vec<GroundTruth> = labels.iter().map(PseudoLabel::ground_truth).collect();
            let m = match_anchors(anchors, &gt, st.pos_iou)?;
            Ok((labels, m))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let matches: Vec<MatchResult> = labeled.iter().map(|(_, m)| m.clone()).collect();
        let (out, grads) = self_training_loss(&tgt_raws, &matches, anchors, st.neg_pos_ratio, st.negatives)?;
        merge(&mut loss, &out);
        tgt_plain = grads.into_iter().map(Some).collect();
        let all: Vec<&PseudoLabel> = labeled.iter().flat_map(|(l, _)| l).collect();
        pseudo = Some(PseudoStats {
            count: all.len(),
            mean_srrs: if all.is_empty() {
                0.0
            } else {
                all.iter().map(|p| p.srrs).sum::<f64>() / all.len() as f64
            },
            epsilon: st.epsilon,
        });
        pseudo_labels = labeled.into_iter().map(|(l, _)| l).collect();
    }

    // Domain classifier: source = 0, target = 1, mean binary cross-entropy.
    let mut src_feat_grads: Vec<Option<Vec<f64>>> = vec![None; source.len()];
    let mut tgt_feat_grads: Vec<Option<Vec<f64>>> = vec![None; target.len()];
    let mut domain_grad = None;
    if let Some(d) = obj.dann {
        let total = source.len() + target.len();
        if total > 0 {
            let mut dgrad = vec![0.0; d.classifier.values.len()];
            let mut value = 0.0;
            let items = fwd_src
                .iter()
                .map(|f| (f, 0.0))
                .chain(fwd_tgt.iter().map(|f| (f, 1.0)));
            for (i, ((_, tape), label)) in items.enumerate() {
                let (z, dtape) = d.classifier.forward(tape.features());
                // log(1+e^z) − y·z, computed stably
                value += z.max(0.0) + (-z.abs()).exp().ln_1p() - label * z;
                let sig = 1.0 / (1.0 + (-z).exp());
                let dz = (sig - label) / total as f64;
                let mut df = d.classifier.backward(&dtape, dz, &mut dgrad);
                df.iter_mut().for_each(|v| *v *= -d.lambda);
                if i < source.len() {
                    src_feat_grads[i] = Some(df);
                } else {
                    tgt_feat_grads[i - source.len()] = Some(df);
                }
            }
            let v = value / total as f64;
            loss.total += v;
            loss.set("domain", v);
            domain_grad = Some(dgrad);
        }
    }

    let len = params.values.len();
    let lambda = obj.bsr.map(|b| b.1).unwrap_or(1.0);
    let src_parts: Vec<Vec<f64>> = par::map_range(exec, source.len(), |i| {
        let mut g = vec![0.0; len];
        let mut streams = Vec::new();
        if let Some(og) = &src_grads[i] {
            streams.push(HeadGrad {
                dlogits: &og.dlogits,
                doffsets: &og.doffsets,
                junction: Junction::Plain,
            });
        }
        params.backward(&fwd_src[i].1, &streams, src_feat_grads[i].as_deref(), &mut g)?;
        Ok(g)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let tgt_parts: Vec<Vec<f64>> = par::map_range(exec, target.len(), |i| {
        let mut g = vec![0.0; len];
        let mut streams = Vec::new();
        if let Some(og) = &tgt_plain[i] {
            streams.push(HeadGrad {
                dlogits: &og.dlogits,
                doffsets: &og.doffsets,
                junction: Junction::Plain,
            });
        }
        if let Some(og) = &tgt_reversed[i] {
            streams.push(HeadGrad {
                dlogits: &og.dlogits,
                doffsets: &og.doffsets,
                junction: Junction::Reversed { lambda },
            });
        }
        params.backward(&fwd_tgt[i].1, &streams, tgt_feat_grads[i].as_deref(), &mut g)?;
        Ok(g)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut parts = src_parts;
    parts.extend(tgt_parts);
    let grad = par::sum_ordered(&parts, len);

    Ok(ObjectiveOutput {
        loss,
        grad,
        domain_grad,
        pseudo,
        pseudo_labels,
    })
}

/// Source supervised loss plus background regularization on the target half,
/// with the target stream reversed at the junction. Without target images this
/// is exactly the supervised loss.
pub fn adversarial_objectives(
    params: &DetectorParams,
    anchors: &AnchorSet,
    exec: Exec,
    source: &[SourceSample],
    target: &[&[f64]],
    task: TaskLossConfig,
    bsr: BsrConfig,
    lambda: f64,
) -> Result<ObjectiveOutput> {
    batch_objective(
        params,
        anchors,
        exec,
        source,
        target,
        &BatchObjective {
            task: Some(task),
            pos_iou: 0.5,
            bsr: Some((bsr, lambda)),
            ..Default::default()
        },
    )
}
