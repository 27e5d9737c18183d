//! Detection metrics: greedy TP/FP matching, every-point AP, PR curves,
//! and corner PCK.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::decoder::Detection;
use crate::model::CornerKind;

pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.75];
pub const DEFAULT_PCK_RADIUS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub category: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerPoint {
    pub kind: CornerKind,
    pub category: usize,
    pub x: f64,
    pub y: f64,
}

/// GT corners of a box list.
pub fn gt_corners(gts: &[GroundTruth]) -> Vec<CornerPoint> {
    gts.iter()
        .flat_map(|g| {
            [
                CornerPoint {
                    kind: CornerKind::TopLeft,
                    category: g.category,
                    x: g.bbox.x1,
                    y: g.bbox.y1,
                },
                CornerPoint {
                    kind: CornerKind::BottomRight,
                    category: g.category,
                    x: g.bbox.x2,
                    y: g.bbox.y2,
                },
            ]
        })
        .collect()
}

/// Everything needed to score one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
    /// Raw predicted corners; frames without them are skipped by PCK.
    pub corners: Option<Vec<CornerPoint>>,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// TP flags for `dets` (already sorted by descending score).
///
/// Each detection takes the highest-IoU still-unmatched GT of its category
/// if that IoU reaches `iou_thresh` (ties go to the lower GT index).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let mut used = alloc::vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.category != d.category {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Every-point interpolated AP of a ranked TP/FP list; `None` without GT.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Raw precision/recall after each ranked detection.
pub fn pr_curve(scores: &[f64], flags: &[bool], num_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    scores
        .iter()
        .zip(flags)
        .enumerate()
        .map(|(i, (&s, &f))| {
            tp += f as usize;
            PrPoint {
                threshold: s,
                precision: tp as f64 / (i + 1) as f64,
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            }
        })
        .collect()
}

/// Fraction of GT corners with a same-kind, same-category prediction within
/// Euclidean `radius`; `None` without GT corners.
pub fn corner_pck(pred: &[CornerPoint], gt: &[CornerPoint], radius: f64) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let r2 = radius * radius;
    let hit = gt
        .iter()
        .filter(|g| {
            pred.iter().any(|p| {
                let (dx, dy) = (p.x - g.x, p.y - g.y);
                p.kind == g.kind && p.category == g.category && dx * dx + dy * dy <= r2
            })
        })
        .count();
    Some(hit as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub pr50: Vec<PrPoint>,
    pub pr75: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
    pub map: f64,
    pub pck_radius: f64,
    pub pck_tl: Option<f64>,
    pub pck_br: Option<f64>,
}

/// Ranked flags for one category over all frames at one IoU threshold.
fn ranked_flags(frames: &[FrameEval], category: usize, iou_thresh: f64) -> (Vec<f64>, Vec<bool>) {
    let mut entries: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let mut dets: Vec<Detection> = f.detections.iter().copied().filter(|d| d.category == category).collect();
        dets.sort_by(|a, b| by_score_desc(a.score, b.score));
        let gts: Vec<GroundTruth> = f.ground_truth.iter().copied().filter(|g| g.category == category).collect();
        let flags = match_detections(&dets, &gts, iou_thresh);
        entries.extend(dets.iter().zip(flags).enumerate().map(|(k, (d, t))| (d.score, fi, k, t)));
    }
    entries.sort_by(|a, b| by_score_desc(a.0, b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    entries.into_iter().map(|(s, _, _, t)| (s, t)).unzip()
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores a set of frames over `num_categories` categories.
pub fn evaluate(frames: &[FrameEval], num_categories: usize, pck_radius: f64) -> EvalReport {
    let categories: Vec<CategoryReport> = (0..num_categories)
        .map(|c| {
            let num_gt = frames
                .iter()
                .flat_map(|f| &f.ground_truth)
                .filter(|g| g.category == c)
                .count();
            let (s50, f50) = ranked_flags(frames, c, IOU_THRESHOLDS[0]);
            let (s75, f75) = ranked_flags(frames, c, IOU_THRESHOLDS[1]);
            CategoryReport {
                category: c,
                num_gt,
                num_detections: s50.len(),
                ap50: average_precision(&f50, num_gt),
                ap75: average_precision(&f75, num_gt),
                pr50: pr_curve(&s50, &f50, num_gt),
                pr75: pr_curve(&s75, &f75, num_gt),
            }
        })
        .collect();
    let mean_ap50 = mean_present(categories.iter().map(|c| c.ap50));
    let mean_ap75 = mean_present(categories.iter().map(|c| c.ap75));

    let pck = |kind: CornerKind| {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        let (mut hit, mut total) = (0.0, 0usize);
        for f in frames {
            let Some(corners) = &f.corners else { continue };
            pred.clear();
            gt.clear();
            pred.extend(corners.iter().copied().filter(|c| c.kind == kind));
            gt.extend(gt_corners(&f.ground_truth).into_iter().filter(|c| c.kind == kind));
            if let Some(v) = corner_pck(&pred, &gt, pck_radius) {
                hit += v * gt.len() as f64;
                total += gt.len();
            }
        }
        (total > 0).then(|| hit / total as f64)
    };

    EvalReport {
        pck_tl: pck(CornerKind::TopLeft),
        pck_br: pck(CornerKind::BottomRight),
        categories,
        mean_ap50,
        mean_ap75,
        map: (mean_ap50 + mean_ap75) / 2.0,
        pck_radius,
    }
}
