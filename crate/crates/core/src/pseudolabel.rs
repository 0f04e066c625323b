//! Supporting-region reliability scoring and pseudo-label generation.

use serde::{Deserialize, Serialize};

use crate::boxops::{BBox, Detection, GroundTruth};
use crate::error::{Error, Result};

/// A final detection kept as a training label for an unlabeled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    /// Foreground class, never 0.
    pub class_id: usize,
    pub srrs: f64,
    /// Probability of `class_id` at the final detection itself.
    pub confidence: f64,
    /// Position in the post-NMS list.
    pub source_detection_index: usize,
}

impl PseudoLabel {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            bbox: self.bbox,
            class_id: self.class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    Fixed,
    Scheduled,
}

/// What the schedule's progress `p` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressOrigin {
    /// Progress through the self-training window.
    Window,
    /// Progress through the whole run.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrrsPolicy {
    pub delta: f64,
    pub epsilon_mode: EpsilonMode,
    pub epsilon_fixed: f64,
    pub progress_origin: ProgressOrigin,
}

impl Default for SrrsPolicy {
    fn default() -> Self {
        SrrsPolicy {
            delta: 0.5,
            epsilon_mode: EpsilonMode::Fixed,
            epsilon_fixed: 0.8,
            progress_origin: ProgressOrigin::Window,
        }
    }
}

impl SrrsPolicy {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if !(self.epsilon_fixed > 0.0 && self.epsilon_fixed < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon_fixed
            )));
        }
        Ok(())
    }

    /// Threshold for the given schedule progress.
    pub fn epsilon(&self, progress: f64) -> f64 {
        match self.epsilon_mode {
            EpsilonMode::Fixed => self.epsilon_fixed,
            EpsilonMode::Scheduled => epsilon_schedule(progress),
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0,1], got {delta}")));
    }
    Ok(())
}

/// Logistic threshold ε = 1/(1+e^{−3p}). `p` outside [0,1] is clamped.
pub fn epsilon_schedule(progress: f64) -> f64 {
    let p = if (0.0..=1.0).contains(&progress) {
        progress
    } else {
        log::warn!("schedule progress {progress} outside [0,1]; clamping");
        if progress.is_nan() {
            0.0
        } else {
            progress.clamp(0.0, 1.0)
        }
    };
    1.0 / (1.0 + (-3.0 * p).exp())
}

/// Mean of IoU(r_i, r*)·P(c*|r_i) over every r_i in `all` overlapping `r_star`
/// by at least `delta`, where c* is the predicted class of `r_star`. Supports
/// are gathered regardless of their own predicted class. Returns 0 when
/// nothing supports `r_star` (only possible for a degenerate box).
pub fn srrs(r_star: &Detection, all: &[Detection], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let c = r_star.predicted_class;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in all {
        let iou = r.bbox.iou(&r_star.bbox);
        if iou >= delta {
            sum += iou * r.class_probs[c];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Keep each final detection whose score reaches `epsilon`, in the order of
/// `finals`. The score is SRRS over `all`.
pub fn generate_pseudo_labels(
    all: &[Detection],
    finals: &[Detection],
    delta: f64,
    epsilon: f64,
) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for (l, r) in finals.iter().enumerate() {
        let s = srrs(r, all, delta)?;
        if s >= epsilon && r.predicted_class != 0 {
            out.push(PseudoLabel {
                bbox: r.bbox,
                class_id: r.predicted_class,
                srrs: s,
                confidence: r.score(),
                source_detection_index: l,
            });
        }
    }
    Ok(out)
}

/// Keep each final detection whose own class probability reaches `threshold`
/// (naive self-training). SRRS is still reported for auditing.
pub fn confidence_pseudo_labels(
    all: &[Detection],
    finals: &[Detection],
    delta: f64,
    threshold: f64,
) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for (l, r) in finals.iter().enumerate() {
        if r.predicted_class != 0 && r.score() >= threshold {
            out.push(PseudoLabel {
                bbox: r.bbox,
                class_id: r.predicted_class,
                srrs: srrs(r, all, delta)?,
                confidence: r.score(),
                source_detection_index: l,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxops::nms;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], probs: &[f64], index: usize) -> Detection {
        Detection::new(BBox::new(b[0], b[1], b[2], b[3]).unwrap(), probs.to_vec(), index)
    }

    #[test]
    fn srrs_single_self_support() {
        let r = det([0.1, 0.1, 0.4, 0.4], &[0.1, 0.9], 0);
        assert!((srrs(&r, &[r.clone()], 0.5).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn srrs_two_supports() {
        // r* = (0,0,1,1); support (0,0,0.5,1) has IoU 0.5 with P(c*)=0.6.
        let r = det([0.0, 0.0, 1.0, 1.0], &[0.2, 0.8], 0);
        let s = det([0.0, 0.0, 0.5, 1.0], &[0.4, 0.6], 1);
        let v = srrs(&r, &[r.clone(), s], 0.5).unwrap();
        assert!((v - 0.55).abs() < 1e-12);
    }

    #[test]
    fn srrs_upper_bound() {
        let r = det([0.2, 0.2, 0.6, 0.6], &[0.0, 1.0], 0);
        let all = vec![r.clone(), det([0.2, 0.2, 0.6, 0.6], &[0.0, 1.0], 1)];
        assert_eq!(srrs(&r, &all, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn srrs_rejects_bad_delta() {
        let r = det([0.2, 0.2, 0.6, 0.6], &[0.0, 1.0], 0);
        assert!(srrs(&r, &[], 0.0).is_err());
        assert!(srrs(&r, &[], 1.5).is_err());
    }

    #[test]
    fn srrs_reads_class_probability_from_every_support() {
        // support predicts class 2 but still contributes its class-1 probability
        let r = det([0.0, 0.0, 1.0, 1.0], &[0.1, 0.8, 0.1], 0);
        let s = det([0.0, 0.0, 1.0, 1.0], &[0.1, 0.3, 0.6], 1);
        assert!((srrs(&r, &[r.clone(), s], 0.5).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn threshold_keeps_and_drops() {
        let r = det([0.1, 0.1, 0.4, 0.4], &[0.1, 0.9], 0);
        assert_eq!(generate_pseudo_labels(&[r.clone()], &[r.clone()], 0.5, 0.8).unwrap().len(), 1);
        let q = det([0.1, 0.1, 0.4, 0.4], &[0.3, 0.7], 0);
        assert!(generate_pseudo_labels(&[q.clone()], &[q], 0.5, 0.8).unwrap().is_empty());
        assert!(generate_pseudo_labels(&[], &[], 0.5, 0.8).unwrap().is_empty());
    }

    #[test]
    fn three_detections_two_finals() {
        // d0 and d1 overlap (IoU 0.6); d2 is far away.
        //   d0 final: supports d0 (1·0.9) and d1 (0.6·0.5) → 0.6
        //   d2 final: supports d2 only → 0.85
        let d0 = det([0.0, 0.0, 0.5, 0.5], &[0.1, 0.9], 0);
        let d1 = det([0.0, 0.0, 0.5, 0.3], &[0.5, 0.5], 1);
        let d2 = det([0.6, 0.6, 0.9, 0.9], &[0.15, 0.85], 2);
        assert!((d0.bbox.iou(&d1.bbox) - 0.6).abs() < 1e-12);
        let all = vec![d0.clone(), d1, d2.clone()];
        let finals = vec![d0, d2];
        let kept = generate_pseudo_labels(&all, &finals, 0.5, 0.8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source_detection_index, 1);
        assert!((kept[0].srrs - 0.85).abs() < 1e-12);
        let kept = generate_pseudo_labels(&all, &finals, 0.5, 0.5).unwrap();
        assert_eq!(kept.len(), 2);
        assert!((kept[0].srrs - 0.6).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        assert_eq!(epsilon_schedule(0.0), 0.5);
        assert!((epsilon_schedule(1.0) - 0.952574).abs() < 1e-6);
        let mut prev = 0.0;
        for i in 0..=100 {
            let e = epsilon_schedule(i as f64 / 100.0);
            assert!(e > prev);
            prev = e;
        }
        assert_eq!(epsilon_schedule(2.0), epsilon_schedule(1.0));
        assert_eq!(epsilon_schedule(-1.0), 0.5);
    }

    fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|i| {
                let x = rng.gen_range(0.0..0.6);
                let y = rng.gen_range(0.0..0.6);
                let w = rng.gen_range(0.05..0.4);
                let h = rng.gen_range(0.05..0.4);
                let mut p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
                det([x, y, x + w, y + h], &p, i)
            })
            .collect()
    }

    #[test]
    fn raising_thresholds_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let all = random_dets(&mut rng, 30);
            let finals = nms(&all, 0.45, 0.05).unwrap();
            for r in &finals {
                let mut prev = usize::MAX;
                for delta in [0.3, 0.5, 0.7, 0.9, 1.0] {
                    let ns = all.iter().filter(|d| d.bbox.iou(&r.bbox) >= delta).count();
                    assert!(ns <= prev);
                    prev = ns;
                }
                let s = srrs(r, &all, 0.5).unwrap();
                assert!((0.0..=1.0).contains(&s));
            }
            let lo = generate_pseudo_labels(&all, &finals, 0.5, 0.2).unwrap();
            let hi = generate_pseudo_labels(&all, &finals, 0.5, 0.4).unwrap();
            assert!(hi.iter().all(|h| lo.contains(h)));
        }
    }
}
