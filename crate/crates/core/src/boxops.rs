//! Box geometry: IoU, NMS, anchors, anchor matching and offset coding.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Validating constructor.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x_min, self.y_min, self.x_max, self.y_max];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::InvalidBox(format!("min exceeds max in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    /// Clip to the unit square.
    pub fn clip_unit(&self) -> BBox {
        let x_min = self.x_min.clamp(0.0, 1.0);
        let y_min = self.y_min.clamp(0.0, 1.0);
        BBox {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, 1.0),
            y_max: self.y_max.clamp(y_min, 1.0),
        }
    }

    /// IoU without validation. Both boxes must already satisfy the invariants.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Validating IoU. Returns 0 when both boxes are degenerate.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One detector output: a box and its class distribution (index 0 is background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
    /// Position of this detection in the raw output set.
    pub index: usize,
}

impl Detection {
    pub fn new(bbox: BBox, class_probs: Vec<f64>, index: usize) -> Self {
        let predicted_class = argmax(&class_probs);
        Detection {
            bbox,
            class_probs,
            predicted_class,
            index,
        }
    }

    /// Probability of the predicted class.
    pub fn score(&self) -> f64 {
        self.class_probs[self.predicted_class]
    }

    pub fn background_prob(&self) -> f64 {
        self.class_probs[0]
    }
}

/// Descending score, then ascending index.
fn by_score_then_index(a: &Detection, b: &Detection) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

/// Greedy per-class non-maximum suppression.
///
/// Detections whose predicted class is background, or whose score is below
/// `conf_thresh`, are dropped first. A detection is suppressed when its IoU
/// with an already kept detection of the same class exceeds `iou_thresh`.
/// The result is sorted by descending score (ties: lower index first).
pub fn nms(dets: &[Detection], iou_thresh: f64, conf_thresh: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_thresh) || !(0.0..=1.0).contains(&conf_thresh) {
        return Err(Error::InvalidInput(format!(
            "nms thresholds must lie in [0,1], got iou={iou_thresh} conf={conf_thresh}"
        )));
    }
    let mut cand: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.predicted_class != 0 && d.score() >= conf_thresh)
        .collect();
    cand.sort_by(|a, b| by_score_then_index(a, b));

    let mut kept: Vec<&Detection> = Vec::new();
    for d in cand {
        let suppressed = kept
            .iter()
            .any(|k| k.predicted_class == d.predicted_class && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept.into_iter().cloned().collect())
}

/// One anchor shape: size and aspect ratio (w/h), so w = s·√a and h = s/√a.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub size: f64,
    pub aspect: f64,
}

/// One detection scale: a square grid of cells with the same shapes at each cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub grid: usize,
    pub shapes: Vec<AnchorShape>,
}

/// Ordered anchor boxes. Order: level, then row, then column, then shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn generate(levels: &[AnchorLevel]) -> Result<Self> {
        let mut boxes = Vec::new();
        for level in levels {
            let g = level.grid as f64;
            for row in 0..level.grid {
                for col in 0..level.grid {
                    let cx = (col as f64 + 0.5) / g;
                    let cy = (row as f64 + 0.5) / g;
                    for s in &level.shapes {
                        let w = s.size * s.aspect.sqrt();
                        let h = s.size / s.aspect.sqrt();
                        let b = BBox::from_center(cx, cy, w, h)?.clip_unit();
                        if b.is_degenerate() {
                            return Err(Error::InvalidConfig(format!(
                                "anchor shape {s:?} degenerates at grid {}",
                                level.grid
                            )));
                        }
                        boxes.push(b);
                    }
                }
            }
        }
        Ok(AnchorSet { boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// A labeled object: box plus foreground class in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Partition of anchor indices into positives and negative candidates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// Ascending.
    pub pos_indices: Vec<usize>,
    /// Ascending; every anchor not in `pos_indices`.
    pub neg_candidate_indices: Vec<usize>,
    pub matched_gt: BTreeMap<usize, GroundTruth>,
}

impl MatchResult {
    /// All anchors are negative candidates.
    pub fn all_negative(n: usize) -> Self {
        MatchResult {
            pos_indices: Vec::new(),
            neg_candidate_indices: (0..n).collect(),
            matched_gt: BTreeMap::new(),
        }
    }
}

/// Multibox matching.
///
/// An anchor is positive when its best IoU over the ground truth reaches
/// `pos_iou`; it is matched to that gt (lowest gt index on ties). Each gt
/// additionally claims its best anchor (lowest anchor index on ties), skipping
/// anchors already claimed by an earlier gt, so every gt has a positive.
pub fn match_anchors(anchors: &AnchorSet, gt: &[GroundTruth], pos_iou: f64) -> Result<MatchResult> {
    if !(pos_iou > 0.0 && pos_iou <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "pos_iou must lie in (0,1], got {pos_iou}"
        )));
    }
    let n = anchors.len();
    if gt.is_empty() {
        return Ok(MatchResult::all_negative(n));
    }
    for g in gt {
        g.bbox.validate()?;
    }

    let ious: Vec<Vec<f64>> = anchors
        .boxes
        .iter()
        .map(|a| gt.iter().map(|g| a.iou(&g.bbox)).collect())
        .collect();

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    for (a, row) in ious.iter().enumerate() {
        let j = argmax(row);
        if row[j] >= pos_iou {
            assigned[a] = Some(j);
        }
    }

    let mut forced = vec![false; n];
    for j in 0..gt.len() {
        let mut best: Option<usize> = None;
        for a in 0..n {
            if forced[a] {
                continue;
            }
            match best {
                None => best = Some(a),
                Some(b) if ious[a][j] > ious[b][j] => best = Some(a),
                _ => {}
            }
        }
        if let Some(a) = best {
            forced[a] = true;
            assigned[a] = Some(j);
        }
    }

    let mut res = MatchResult::default();
    for (a, m) in assigned.iter().enumerate() {
        match m {
            Some(j) => {
                res.pos_indices.push(a);
                res.matched_gt.insert(a, gt[*j]);
            }
            None => res.neg_candidate_indices.push(a),
        }
    }
    Ok(res)
}

/// Center/size offsets of `gt` relative to `anchor`:
/// (Δcx/w_a, Δcy/h_a, ln(w_g/w_a), ln(h_g/h_a)).
pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    anchor.validate()?;
    gt.validate()?;
    if anchor.is_degenerate() {
        return Err(Error::InvalidBox(format!("zero-size anchor {anchor:?}")));
    }
    if gt.is_degenerate() {
        return Err(Error::InvalidBox(format!("zero-size target box {gt:?}")));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Inverse of [`encode_offsets`].
pub fn decode_box(anchor: &BBox, offsets: &[f64; 4]) -> Result<BBox> {
    anchor.validate()?;
    if anchor.is_degenerate() {
        return Err(Error::InvalidBox(format!("zero-size anchor {anchor:?}")));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + offsets[0] * aw;
    let cy = acy + offsets[1] * ah;
    let w = aw * offsets[2].exp();
    let h = ah * offsets[3].exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bx: BBox, probs: &[f64], index: usize) -> Detection {
        Detection::new(bx, probs.to_vec(), index)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(0.0, 0.0, 1.0, 1.0)).unwrap(), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 0.1, 0.1), &b(0.5, 0.5, 0.6, 0.6)).unwrap(), 0.0);
        let v = iou(&b(0.0, 0.0, 0.2, 0.2), &b(0.1, 0.1, 0.3, 0.3)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_inverted_box() {
        let bad = BBox {
            x_min: 0.5,
            y_min: 0.0,
            x_max: 0.2,
            y_max: 1.0,
        };
        assert!(iou(&bad, &b(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(BBox::new(0.0, 0.3, 0.1, 0.2).is_err());
    }

    #[test]
    fn iou_of_two_points_is_zero() {
        let p = b(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn argmax_lowest_index_wins() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn nms_examples() {
        let one = vec![det(b(0.1, 0.1, 0.3, 0.3), &[0.1, 0.9], 0)];
        assert_eq!(nms(&one, 0.5, 0.05).unwrap(), one);

        let bx = b(0.1, 0.1, 0.3, 0.3);
        let two = vec![det(bx, &[0.1, 0.9], 0), det(bx, &[0.2, 0.8], 1)];
        let out = nms(&two, 0.5, 0.05).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].index, 0);

        let disjoint = vec![
            det(b(0.0, 0.0, 0.1, 0.1), &[0.1, 0.9], 0),
            det(b(0.5, 0.5, 0.6, 0.6), &[0.2, 0.8], 1),
        ];
        assert_eq!(nms(&disjoint, 0.5, 0.05).unwrap().len(), 2);
    }

    #[test]
    fn nms_keeps_overlapping_boxes_of_different_classes() {
        let bx = b(0.1, 0.1, 0.3, 0.3);
        let dets = vec![det(bx, &[0.1, 0.9, 0.0], 0), det(bx, &[0.1, 0.0, 0.9], 1)];
        assert_eq!(nms(&dets, 0.5, 0.05).unwrap().len(), 2);
    }

    #[test]
    fn match_identical_anchor_is_positive() {
        let anchors = AnchorSet {
            boxes: vec![b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0)],
        };
        let gt = [GroundTruth {
            bbox: b(0.0, 0.0, 0.5, 0.5),
            class_id: 2,
        }];
        let m = match_anchors(&anchors, &gt, 0.5).unwrap();
        assert_eq!(m.pos_indices, vec![0]);
        assert_eq!(m.neg_candidate_indices, vec![1]);
        assert_eq!(m.matched_gt[&0].class_id, 2);
    }

    #[test]
    fn match_low_iou_anchor_is_negative_candidate() {
        // anchor 1 overlaps the gt with IoU 0.4 but anchor 0 is the best match.
        let gt = [GroundTruth {
            bbox: b(0.0, 0.0, 0.5, 0.5),
            class_id: 1,
        }];
        let anchors = AnchorSet {
            boxes: vec![b(0.0, 0.0, 0.5, 0.5), b(0.0, 0.0, 0.5, 0.2)],
        };
        assert!((anchors.boxes[1].iou(&gt[0].bbox) - 0.4).abs() < 1e-12);
        let m = match_anchors(&anchors, &gt, 0.5).unwrap();
        assert_eq!(m.pos_indices, vec![0]);
        assert_eq!(m.neg_candidate_indices, vec![1]);
    }

    #[test]
    fn match_hand_built_grid() {
        // 2x2 quadrant anchors; IoU table worked out by hand:
        //   gt0 = (0,0,0.5,0.6): a0 = 0.25/0.30 = 0.8333, a2 = 0.05/0.50 = 0.1
        //   gt1 = (0.6,0.6,1,1): a3 = 0.16/0.25 = 0.64, all others 0
        // so Pos = {0, 3}.
        let anchors = AnchorSet {
            boxes: vec![
                b(0.0, 0.0, 0.5, 0.5),
                b(0.5, 0.0, 1.0, 0.5),
                b(0.0, 0.5, 0.5, 1.0),
                b(0.5, 0.5, 1.0, 1.0),
            ],
        };
        let gt = [
            GroundTruth {
                bbox: b(0.0, 0.0, 0.5, 0.6),
                class_id: 1,
            },
            GroundTruth {
                bbox: b(0.6, 0.6, 1.0, 1.0),
                class_id: 3,
            },
        ];
        let m = match_anchors(&anchors, &gt, 0.5).unwrap();
        assert_eq!(m.pos_indices, vec![0, 3]);
        assert_eq!(m.neg_candidate_indices, vec![1, 2]);
        assert_eq!(m.matched_gt[&3].class_id, 3);
    }

    #[test]
    fn match_small_gt_still_gets_an_anchor() {
        let anchors = AnchorSet {
            boxes: vec![b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0)],
        };
        let gt = [GroundTruth {
            bbox: b(0.6, 0.6, 0.65, 0.65),
            class_id: 1,
        }];
        let m = match_anchors(&anchors, &gt, 0.5).unwrap();
        assert_eq!(m.pos_indices, vec![1]);
    }

    #[test]
    fn match_empty_gt_is_all_negative() {
        let anchors = AnchorSet {
            boxes: vec![b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0)],
        };
        let m = match_anchors(&anchors, &[], 0.5).unwrap();
        assert!(m.pos_indices.is_empty());
        assert_eq!(m.neg_candidate_indices, vec![0, 1]);
    }

    #[test]
    fn encode_decode_identity_cases() {
        let a = b(0.2, 0.3, 0.4, 0.7);
        assert_eq!(encode_offsets(&a, &a).unwrap(), [0.0; 4]);
        let d = decode_box(&a, &[0.0; 4]).unwrap();
        for (u, v) in [(d.x_min, a.x_min), (d.y_min, a.y_min), (d.x_max, a.x_max), (d.y_max, a.y_max)] {
            assert!((u - v).abs() < 1e-12);
        }
        let flat = b(0.2, 0.3, 0.2, 0.7);
        assert!(encode_offsets(&flat, &a).is_err());
        assert!(decode_box(&flat, &[0.0; 4]).is_err());
    }

    #[test]
    fn anchor_set_length() {
        let levels = vec![
            AnchorLevel {
                grid: 8,
                shapes: vec![AnchorShape { size: 0.1, aspect: 1.0 }; 3],
            },
            AnchorLevel {
                grid: 4,
                shapes: vec![AnchorShape { size: 0.3, aspect: 1.0 }; 3],
            },
        ];
        assert_eq!(AnchorSet::generate(&levels).unwrap().len(), 240);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64).prop_map(|(x, y, w, h)| {
            BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(a in arb_box(), c in arb_box()) {
            prop_assert_eq!(a.iou(&c), c.iou(&a));
            prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
            let v = a.iou(&c);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn encode_decode_round_trip(a in arb_box(), g in arb_box()) {
            let off = encode_offsets(&a, &g).unwrap();
            let back = decode_box(&a, &off).unwrap();
            prop_assert!((back.x_min - g.x_min).abs() < 1e-9);
            prop_assert!((back.y_min - g.y_min).abs() < 1e-9);
            prop_assert!((back.x_max - g.x_max).abs() < 1e-9);
            prop_assert!((back.y_max - g.y_max).abs() < 1e-9);
        }

        #[test]
        fn every_gt_gets_a_positive(gts in proptest::collection::vec((arb_box(), 1usize..4), 1..6)) {
            let levels = vec![AnchorLevel { grid: 4, shapes: vec![AnchorShape { size: 0.25, aspect: 1.0 }] }];
            let anchors = AnchorSet::generate(&levels).unwrap();
            let gt: Vec<GroundTruth> = gts.iter().map(|(bx, c)| GroundTruth { bbox: *bx, class_id: *c }).collect();
            let m = match_anchors(&anchors, &gt, 0.5).unwrap();
            for g in &gt {
                prop_assert!(m.matched_gt.values().any(|x| x == g));
            }
            let mut all: Vec<usize> = m.pos_indices.iter().chain(&m.neg_candidate_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..anchors.len()).collect::<Vec<_>>());
        }
    }
}
