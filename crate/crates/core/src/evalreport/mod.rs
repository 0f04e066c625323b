//! VOC-style detection evaluation, result tables and trend plots.

pub mod plot;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxops::{Detection, GroundTruth};
use crate::error::{Error, Result};

pub const DEFAULT_CONF: f64 = 0.05;
pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApStyle {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean of the interpolated precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

impl std::str::FromStr for ApStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-points" | "all_points" | "allpoints" => Ok(ApStyle::AllPoints),
            "11point" | "11-point" | "eleven_point" => Ok(ApStyle::ElevenPoint),
            _ => Err(Error::InvalidConfig(format!("unknown AP style `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub ap: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Every foreground class 1..=K, including classes without ground truth.
    pub per_class: BTreeMap<usize, ClassStats>,
    /// Mean AP over classes that have ground truth; `None` when no class does.
    pub map: Option<f64>,
}

impl EvalResult {
    pub fn ap(&self, class: usize) -> Option<f64> {
        self.per_class.get(&class).filter(|s| s.num_gt > 0).map(|s| s.ap)
    }
}

/// Precision/recall points at the end of each block of tied scores.
/// `ranked` holds (score, is_tp) in descending score order.
pub fn pr_curve(ranked: &[(f64, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(s, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let block_end = ranked.get(i + 1).is_none_or(|n| n.0 != s);
        if block_end {
            out.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    out
}

/// AP from (recall, precision) points with non-decreasing recall.
pub fn average_precision(points: &[(f64, f64)], style: ApStyle) -> f64 {
    match style {
        ApStyle::AllPoints => {
            let mut rec = vec![0.0];
            let mut pre = vec![0.0];
            for &(r, p) in points {
                rec.push(r);
                pre.push(p);
            }
            rec.push(1.0);
            pre.push(0.0);
            for i in (0..pre.len() - 1).rev() {
                pre[i] = pre[i].max(pre[i + 1]);
            }
            (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * pre[i]).sum()
        }
        ApStyle::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    points
                        .iter()
                        .filter(|(r, _)| *r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Greedy matching within one image for one class. Detections are visited in
/// (score desc, index asc) order; each takes its highest-IoU ground truth and
/// counts as a true positive only if that box is unmatched and overlaps by at
/// least `iou_thresh`.
fn match_image(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| {
        b.score()
            .partial_cmp(&a.score())
            .unwrap_or(Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best = None;
            let mut best_iou = f64::NEG_INFINITY;
            for (j, g) in gts.iter().enumerate() {
                let v = d.bbox.iou(&g.bbox);
                if v > best_iou {
                    best_iou = v;
                    best = Some(j);
                }
            }
            let hit = match best {
                Some(j) if best_iou >= iou_thresh && !used[j] => {
                    used[j] = true;
                    true
                }
                _ => false,
            };
            (d.score(), hit)
        })
        .collect()
}

/// Per-class AP and mAP over a set of images.
///
/// `detections[i]` are the post-NMS detections of image i, scored by their
/// predicted-class probability. Detections below `conf_thresh` are ignored.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
    conf_thresh: f64,
    iou_thresh: f64,
    style: ApStyle,
) -> Result<EvalResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} images of detections", ground_truth.len()),
            got: detections.len().to_string(),
        });
    }
    let mut per_class = BTreeMap::new();
    for c in 1..=num_classes {
        let mut ranked = Vec::new();
        let mut num_gt = 0;
        for (dets, gts) in detections.iter().zip(ground_truth) {
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
            let d: Vec<&Detection> = dets
                .iter()
                .filter(|d| d.predicted_class == c && d.score() >= conf_thresh)
                .collect();
            num_gt += g.len();
            ranked.extend(match_image(&d, &g, iou_thresh));
        }
        // stable sort on score only: image order cannot reorder tied blocks'
        // endpoints, so the curve is permutation invariant
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let tp = ranked.iter().filter(|r| r.1).count();
        let fp = ranked.len() - tp;
        let ap = if num_gt == 0 {
            0.0
        } else {
            average_precision(&pr_curve(&ranked, num_gt), style)
        };
        per_class.insert(
            c,
            ClassStats {
                ap,
                num_gt,
                tp,
                fp,
                fn_: num_gt - tp,
            },
        );
    }
    let present: Vec<f64> = per_class.values().filter(|s| s.num_gt > 0).map(|s| s.ap).collect();
    let map = if present.is_empty() {
        log::warn!("no ground truth in any image; mAP undefined");
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    };
    Ok(EvalResult { per_class, map })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub result: EvalResult,
}

/// Method rows, one AP column per class name, then mAP. APs in percent.
pub fn write_results_csv(path: &Path, class_names: &[&str], rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(class_names.iter().map(|s| s.to_string()));
    header.push("mAP".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.clone()];
        for c in 1..=class_names.len() {
            rec.push(r.result.ap(c).map(|v| format!("{:.4}", 100.0 * v)).unwrap_or_default());
        }
        rec.push(r.result.map.map(|v| format!("{:.4}", 100.0 * v)).unwrap_or_else(|| "null".into()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
