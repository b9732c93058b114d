//! IoU-matched precision, recall and F-measure with greedy one-to-one
//! matching, pooled over images.

use serde::Serialize;

use crate::assembler::Detection;
use crate::error::{Result, RtnError};
use crate::geom::{iou, BBox};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchPair {
    /// Index into the detection list as given.
    pub detection: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ImageMatches {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub matches: Vec<MatchPair>,
}

impl ImageMatches {
    pub fn num_gts(&self) -> usize {
        self.true_positives + self.false_negatives
    }

    pub fn num_detections(&self) -> usize {
        self.true_positives + self.false_positives
    }
}

/// Detection indices by descending score; equal scores fall back to box
/// coordinates so the result does not depend on input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.bbox.x0.total_cmp(&db.bbox.x0))
            .then(da.bbox.y0.total_cmp(&db.bbox.y0))
            .then(da.bbox.x1.total_cmp(&db.bbox.x1))
            .then(da.bbox.y1.total_cmp(&db.bbox.y1))
    });
    order
}

/// Greedy matching: detections in score order each take the unmatched
/// ground truth of highest IoU, if that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> ImageMatches {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            taken[g] = true;
            matches.push(MatchPair {
                detection: d,
                gt: g,
                iou: v,
            });
        }
    }
    let tp = matches.len();
    ImageMatches {
        true_positives: tp,
        false_positives: dets.len() - tp,
        false_negatives: gts.len() - tp,
        matches,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub per_image: Vec<ImageMatches>,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Micro-averaged precision and recall over all images.
///
/// With no detections and no ground truth at all, P = R = F = 1. A ratio
/// with an empty denominator is otherwise 0.
pub fn compute_prf(per_image: &[ImageMatches]) -> EvalReport {
    let tp: usize = per_image.iter().map(|m| m.true_positives).sum();
    let fp: usize = per_image.iter().map(|m| m.false_positives).sum();
    let fn_: usize = per_image.iter().map(|m| m.false_negatives).sum();
    let (precision, recall) = if tp + fp == 0 && tp + fn_ == 0 {
        (1.0, 1.0)
    } else {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        (ratio(tp, tp + fp), ratio(tp, tp + fn_))
    };
    let f = if tp + fp == 0 && tp + fn_ == 0 { 1.0 } else { f_measure(precision, recall) };
    EvalReport {
        precision,
        recall,
        f_measure: f,
        per_image: per_image.to_vec(),
    }
}

impl EvalReport {
    pub fn true_positives(&self) -> usize {
        self.per_image.iter().map(|m| m.true_positives).sum()
    }

    /// Mean IoU over all matched pairs; 0 without matches.
    pub fn mean_matched_iou(&self) -> f64 {
        let (sum, n) = self
            .per_image
            .iter()
            .flat_map(|m| &m.matches)
            .fold((0.0, 0usize), |(s, n), p| (s + p.iou, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// The three headline numbers, 6 decimals each.
    pub fn to_text(&self) -> String {
        format!(
            "precision: {:.6}\nrecall: {:.6}\nf_measure: {:.6}\n",
            self.precision, self.recall, self.f_measure
        )
    }
}

/// `a - b` for each headline number and for mean matched IoU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationDelta {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub mean_matched_iou: f64,
}

pub fn ablation_compare(a: &EvalReport, b: &EvalReport) -> Result<AblationDelta> {
    let gts = |r: &EvalReport| r.per_image.iter().map(ImageMatches::num_gts).collect::<Vec<_>>();
    if gts(a) != gts(b) {
        return Err(RtnError::Usage("reports were computed over different ground-truth sets".into()));
    }
    Ok(AblationDelta {
        precision: a.precision - b.precision,
        recall: a.recall - b.recall,
        f_measure: a.f_measure - b.f_measure,
        mean_matched_iou: a.mean_matched_iou() - b.mean_matched_iou(),
    })
}
