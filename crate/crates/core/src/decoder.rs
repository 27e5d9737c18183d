//! From corner fields to boxes: peak extraction, embedding-based grouping,
//! merging of the two predictions each frame receives, and NMS.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use crate::bbox::{iou, BBox};
use crate::model::{CornerFieldSet, CornerKind, FrameSlot, OUTPUT_STRIDE};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub threshold: f64,
    pub topk: usize,
    pub emb_threshold: f64,
    pub iou_nms: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            threshold: 0.1,
            topk: 20,
            emb_threshold: 0.5,
            iou_nms: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    pub kind: CornerKind,
    pub category: usize,
    pub x: usize,
    pub y: usize,
    pub score: f64,
    pub embedding: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Descending score, then ascending `(y, x)`.
fn corner_order(a: &Corner, b: &Corner) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then((a.y, a.x).cmp(&(b.y, b.x)))
}

/// Local maxima of each category plane of `heatmap` (`[N, H, W]`).
///
/// A pixel is kept when its score reaches `threshold` and no 3x3 neighbour
/// beats it; among equal neighbours the one with the smallest `(y, x)` wins.
/// At most `topk` corners survive per category.
pub fn extract_corners<S: Real>(
    heatmap: &Tensor<S>,
    embedding: &Tensor<S>,
    kind: CornerKind,
    threshold: f64,
    topk: usize,
) -> Vec<Corner> {
    let shape = heatmap.shape();
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let emb = embedding.data();
    let mut out = Vec::new();
    for c in 0..n {
        let plane = &heatmap.data()[c * h * w..(c + 1) * h * w];
        let mut found = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if v.to_f64() < threshold {
                    continue;
                }
                let mut peak = true;
                'scan: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if (ny, nx) == (y, x) {
                            continue;
                        }
                        let u = plane[ny * w + nx];
                        if u > v || (u == v && (ny, nx) < (y, x)) {
                            peak = false;
                            break 'scan;
                        }
                    }
                }
                if peak {
                    found.push(Corner {
                        kind,
                        category: c,
                        x,
                        y,
                        score: v.to_f64(),
                        embedding: emb[y * w + x].to_f64(),
                    });
                }
            }
        }
        found.sort_by(corner_order);
        found.truncate(topk);
        out.extend(found);
    }
    out
}

/// A valid TL/BR pairing, before acceptance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub tl: usize,
    pub br: usize,
    pub score: f64,
}

/// Every geometrically and embedding-compatible pair, sorted by descending
/// score (ties by `(tl, br)` index).
pub fn candidate_pairs(tls: &[Corner], brs: &[Corner], emb_threshold: f64) -> Vec<Candidate> {
    let mut cands = Vec::new();
    for (i, a) in tls.iter().enumerate() {
        for (j, b) in brs.iter().enumerate() {
            if a.category == b.category
                && a.x < b.x
                && a.y < b.y
                && (a.embedding - b.embedding).abs() <= emb_threshold
            {
                cands.push(Candidate {
                    tl: i,
                    br: j,
                    score: (a.score + b.score) / 2.0,
                });
            }
        }
    }
    cands.sort_by(|p, q| {
        q.score
            .partial_cmp(&p.score)
            .unwrap_or(Ordering::Equal)
            .then((p.tl, p.br).cmp(&(q.tl, q.br)))
    });
    cands
}

/// Greedy one-to-one grouping; returns the accepted candidates.
pub fn group_pairs(tls: &[Corner], brs: &[Corner], emb_threshold: f64) -> Vec<Candidate> {
    let mut used_tl = alloc::vec![false; tls.len()];
    let mut used_br = alloc::vec![false; brs.len()];
    let mut accepted = Vec::new();
    for c in candidate_pairs(tls, brs, emb_threshold) {
        if !used_tl[c.tl] && !used_br[c.br] {
            used_tl[c.tl] = true;
            used_br[c.br] = true;
            accepted.push(c);
        }
    }
    accepted
}

/// Groups corners into boxes at working resolution.
pub fn group_corners(tls: &[Corner], brs: &[Corner], emb_threshold: f64) -> Vec<Detection> {
    group_pairs(tls, brs, emb_threshold)
        .into_iter()
        .map(|c| {
            let (a, b) = (&tls[c.tl], &brs[c.br]);
            Detection {
                bbox: BBox::new(a.x as f64, a.y as f64, b.x as f64, b.y as f64),
                category: a.category,
                score: c.score,
            }
        })
        .collect()
}

/// Greedy per-category NMS: a box is dropped when it overlaps an already
/// kept, higher-scored box of its category with IoU ≥ `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if keep
            .iter()
            .all(|k| k.category != d.category || iou(&k.bbox, &d.bbox) < iou_thresh)
        {
            keep.push(d);
        }
    }
    keep
}

/// Union of the two predictions a frame receives, then NMS.
pub fn merge_dual_predictions(as_last: &[Detection], as_first: &[Detection], iou_nms: f64) -> Vec<Detection> {
    let mut all = Vec::with_capacity(as_last.len() + as_first.len());
    all.extend_from_slice(as_last);
    all.extend_from_slice(as_first);
    nms(all, iou_nms)
}

/// Corner peaks of one frame slot, TL then BR, at working resolution.
pub fn slot_corners<S: Real>(fields: &CornerFieldSet<S>, slot: FrameSlot, cfg: &DecodeConfig) -> [Vec<Corner>; 2] {
    CornerKind::ALL.map(|kind| {
        extract_corners(
            fields.heatmap(slot, kind),
            fields.embedding(slot, kind),
            kind,
            cfg.threshold,
            cfg.topk,
        )
    })
}

/// Groups corners and applies NMS; boxes are returned at input resolution.
pub fn decode_corners(tls: &[Corner], brs: &[Corner], cfg: &DecodeConfig) -> Vec<Detection> {
    let stride = OUTPUT_STRIDE as f64;
    let dets = group_corners(tls, brs, cfg.emb_threshold)
        .into_iter()
        .map(|d| Detection {
            bbox: d.bbox.scaled(stride),
            ..d
        })
        .collect();
    nms(dets, cfg.iou_nms)
}

/// Decodes one frame slot into boxes at input resolution.
pub fn decode_slot<S: Real>(fields: &CornerFieldSet<S>, slot: FrameSlot, cfg: &DecodeConfig) -> Vec<Detection> {
    let [tls, brs] = slot_corners(fields, slot, cfg);
    decode_corners(&tls, &brs, cfg)
}
