//! Brute-force reference implementations checked against the production
//! decoder, losses and metrics on random instances.

#![allow(dead_code)]

use std::cmp::Ordering;

use gast_core::autodiff::Graph;
use gast_core::decoder::{group_pairs, nms, Corner, Detection};
use gast_core::eval::{evaluate, CornerPoint, FrameEval, GroundTruth};
use gast_core::losses::{pull_push_loss, ObjectCorners};
use gast_core::{BBox, CornerKind, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MIN_INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    pub max_abs_diff: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.instances >= MIN_INSTANCES && self.mismatches == 0 && self.max_abs_diff <= TOLERANCE
    }
}

fn report(name: &'static str, instances: usize, mut check: impl FnMut(&mut ChaCha8Rng) -> Result<Option<f64>>, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleReport {
        name,
        instances,
        mismatches: 0,
        max_abs_diff: 0.0,
    };
    for _ in 0..instances {
        match check(&mut rng)? {
            Some(d) => out.max_abs_diff = out.max_abs_diff.max(d),
            None => out.mismatches += 1,
        }
    }
    Ok(out)
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn grid_box(rng: &mut ChaCha8Rng, extent: i32) -> BBox {
    let x1 = rng.random_range(0..extent - 1);
    let y1 = rng.random_range(0..extent - 1);
    let x2 = rng.random_range(x1 + 1..=extent);
    let y2 = rng.random_range(y1 + 1..=extent);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Scores drawn from a coarse grid so ties occur.
fn coarse_score(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(1..=5) as f64 / 5.0
}

// ---- grouping -----------------------------------------------------------------

fn random_corner(rng: &mut ChaCha8Rng, kind: CornerKind) -> Corner {
    Corner {
        kind,
        category: rng.random_range(0..2),
        x: rng.random_range(0..6),
        y: rng.random_range(0..6),
        score: if rng.random_bool(0.5) {
            coarse_score(rng)
        } else {
            rng.random_range(0.1..1.0)
        },
        embedding: rng.random_range(0.0..1.5),
    }
}

/// Candidate key: higher score first, then lower `(tl, br)` index.
fn key_cmp(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap()
        .then((a.1, a.2).cmp(&(b.1, b.2)))
}

/// Lexicographic comparison of matchings by their sorted keys; "Less" is better.
fn matching_cmp(a: &[(f64, usize, usize)], b: &[(f64, usize, usize)]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match key_cmp(x, y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    b.len().cmp(&a.len())
}

fn enumerate_matchings(
    tl: usize,
    edges: &[Vec<(usize, f64)>],
    used_br: &mut Vec<bool>,
    current: &mut Vec<(f64, usize, usize)>,
    best: &mut Vec<(f64, usize, usize)>,
) {
    if tl == edges.len() {
        let mut sorted = current.clone();
        sorted.sort_by(key_cmp);
        if matching_cmp(&sorted, best) == Ordering::Less {
            *best = sorted;
        }
        return;
    }
    enumerate_matchings(tl + 1, edges, used_br, current, best);
    for &(br, score) in &edges[tl] {
        if !used_br[br] {
            used_br[br] = true;
            current.push((score, tl, br));
            enumerate_matchings(tl + 1, edges, used_br, current, best);
            current.pop();
            used_br[br] = false;
        }
    }
}

/// Lexicographically best one-to-one matching of compatible corner pairs.
pub fn grouping_oracle(tls: &[Corner], brs: &[Corner], emb_threshold: f64) -> Vec<(usize, usize, f64)> {
    let edges: Vec<Vec<(usize, f64)>> = tls
        .iter()
        .map(|a| {
            brs.iter()
                .enumerate()
                .filter(|(_, b)| {
                    a.category == b.category
                        && a.x < b.x
                        && a.y < b.y
                        && (a.embedding - b.embedding).abs() <= emb_threshold
                })
                .map(|(j, b)| (j, (a.score + b.score) / 2.0))
                .collect()
        })
        .collect();
    let mut best = Vec::new();
    enumerate_matchings(0, &edges, &mut vec![false; brs.len()], &mut Vec::new(), &mut best);
    let mut out: Vec<_> = best.into_iter().map(|(s, i, j)| (i, j, s)).collect();
    out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    out
}

pub fn grouping(instances: usize) -> Result<OracleReport> {
    report(
        "grouping",
        instances,
        |rng| {
            let tls: Vec<Corner> = (0..rng.random_range(0..=6)).map(|_| random_corner(rng, CornerKind::TopLeft)).collect();
            let brs: Vec<Corner> = (0..rng.random_range(0..=6))
                .map(|_| random_corner(rng, CornerKind::BottomRight))
                .collect();
            let thr = rng.random_range(0.2..1.0);
            let want = grouping_oracle(&tls, &brs, thr);
            let mut got: Vec<_> = group_pairs(&tls, &brs, thr).into_iter().map(|c| (c.tl, c.br, c.score)).collect();
            got.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            if got.len() != want.len() || got.iter().zip(&want).any(|(g, w)| (g.0, g.1) != (w.0, w.1)) {
                return Ok(None);
            }
            Ok(Some(got.iter().zip(&want).map(|(g, w)| (g.2 - w.2).abs()).fold(0.0, f64::max)))
        },
        101,
    )
}

// ---- NMS ----------------------------------------------------------------------

/// The unique subset `K` in which no member is suppressed by a higher-ranked
/// member and every non-member is suppressed by one; found by enumeration.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Option<Vec<usize>> {
    let n = dets.len();
    // rank: higher score first, input order on ties
    let before = |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
    let suppresses = |k: usize, d: usize| {
        k != d && before(k, d) && dets[k].category == dets[d].category && box_iou(&dets[k].bbox, &dets[d].bbox) >= thr
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let ok = (0..n).all(|d| {
            let suppressed = (0..n).any(|k| inside(k) && suppresses(k, d));
            inside(d) != suppressed
        });
        if ok {
            found.push((0..n).filter(|&i| inside(i)).collect::<Vec<_>>());
        }
    }
    (found.len() == 1).then(|| found.pop().unwrap())
}

fn random_detection(rng: &mut ChaCha8Rng, extent: i32) -> Detection {
    Detection {
        bbox: grid_box(rng, extent),
        category: rng.random_range(0..2),
        score: coarse_score(rng),
    }
}

fn det_key(d: &Detection) -> [f64; 6] {
    [d.score, d.category as f64, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2]
}

fn sorted_keys(dets: impl Iterator<Item = Detection>) -> Vec<[f64; 6]> {
    let mut v: Vec<_> = dets.map(|d| det_key(&d)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

pub fn non_maximum_suppression(instances: usize) -> Result<OracleReport> {
    report(
        "nms",
        instances,
        |rng| {
            let dets: Vec<Detection> = (0..rng.random_range(0..=8)).map(|_| random_detection(rng, 6)).collect();
            let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
            let Some(keep) = nms_oracle(&dets, thr) else {
                return Ok(None);
            };
            let want = sorted_keys(keep.iter().map(|&i| dets[i]));
            let got = sorted_keys(nms(dets.clone(), thr).into_iter());
            Ok((want == got).then_some(0.0))
        },
        102,
    )
}

// ---- losses -------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Penalty-reduced focal loss written out from probabilities.
pub fn focal_oracle(logits: &[f64], target: &[f64], alpha: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    let mut npos = 0usize;
    for (&x, &y) in logits.iter().zip(target) {
        let p = sigmoid(x);
        if y == 1.0 {
            npos += 1;
            total += (1.0 - p).powf(alpha) * p.ln();
        } else {
            total += (1.0 - y).powf(beta) * p.powf(alpha) * (1.0 - p).ln();
        }
    }
    -total / npos.max(1) as f64
}

pub fn focal(instances: usize) -> Result<OracleReport> {
    report(
        "focal_loss",
        instances,
        |rng| {
            let shape = [rng.random_range(1..=2), rng.random_range(1..=6), rng.random_range(1..=6)];
            let n: usize = shape.iter().product();
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
            let mut target: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            for _ in 0..rng.random_range(0..=3) {
                target[rng.random_range(0..n)] = 1.0;
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&shape, logits.clone())?);
            let l = g.focal_loss_logits(x, &Tensor::new(&shape, target.clone())?, 2.0, 4.0)?;
            let got = g.value(l).item();
            let want = focal_oracle(&logits, &target, 2.0, 4.0);
            Ok(Some((got - want).abs() / want.abs().max(1.0)))
        },
        103,
    )
}

/// Pull `(1/K) Σ (a−e)² + (b−e)²` and push `1/(K(K−1)) Σ_{j≠k} max(0, Δ − |e_k − e_j|)`.
pub fn pull_push_oracle(a: &[f64], b: &[f64], margin: f64) -> (f64, Option<f64>) {
    let k = a.len();
    let e: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let pull = (0..k).map(|i| (a[i] - e[i]).powi(2) + (b[i] - e[i]).powi(2)).sum::<f64>() / k as f64;
    let push = (k > 1).then(|| {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += (margin - (e[i] - e[j]).abs()).max(0.0);
                }
            }
        }
        s / (k * (k - 1)) as f64
    });
    (pull, push)
}

pub fn pull_push(instances: usize) -> Result<OracleReport> {
    report(
        "pull_push_loss",
        instances,
        |rng| {
            let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
            let k = rng.random_range(1..=6);
            let emb_tl: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.5..1.5)).collect();
            let emb_br: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.5..1.5)).collect();
            let objects: Vec<ObjectCorners> = (0..k)
                .map(|i| ObjectCorners {
                    category: 0,
                    object: i,
                    tl: (rng.random_range(0..w), rng.random_range(0..h)),
                    br: (rng.random_range(0..w), rng.random_range(0..h)),
                })
                .collect();
            let a: Vec<f64> = objects.iter().map(|o| emb_tl[o.tl.1 * w + o.tl.0]).collect();
            let b: Vec<f64> = objects.iter().map(|o| emb_br[o.br.1 * w + o.br.0]).collect();
            let (want_pull, want_push) = pull_push_oracle(&a, &b, 1.0);

            let mut g = Graph::new();
            let tl = g.constant(Tensor::new(&[1, h, w], emb_tl)?);
            let br = g.constant(Tensor::new(&[1, h, w], emb_br)?);
            let (pull, push) = pull_push_loss(&mut g, tl, br, &objects, 1.0)?;
            let got_pull = g.value(pull.expect("objects present")).item();
            let got_push = push.map(|p| g.value(p).item());
            match (got_push, want_push) {
                (Some(gp), Some(wp)) => Ok(Some((got_pull - want_pull).abs().max((gp - wp).abs()))),
                (None, None) => Ok(Some((got_pull - want_pull).abs())),
                _ => Ok(None),
            }
        },
        104,
    )
}

// ---- AP and PCK ---------------------------------------------------------------

/// Greedy matching from the IoU matrix: each detection in rank order claims
/// the unmatched same-category GT of highest IoU (lowest index on ties).
fn oracle_flags(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| box_iou(&d.bbox, &g.bbox)).collect())
        .collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let eligible: Vec<usize> = (0..gts.len())
            .filter(|&j| !taken[j] && gts[j].category == d.category && ious[i][j] >= thr)
            .collect();
        let best = eligible.iter().copied().fold(None, |acc: Option<usize>, j| match acc {
            Some(b) if ious[i][b] >= ious[i][j] => Some(b),
            _ => Some(j),
        });
        if let Some(j) = best {
            taken[j] = true;
        }
        flags.push(best.is_some());
    }
    flags
}

/// AP as the sum over true positives of the best precision at that rank or
/// any later one, divided by the GT count.
fn oracle_ap(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let precision: Vec<f64> = (0..flags.len())
        .map(|i| flags[..=i].iter().filter(|&&f| f).count() as f64 / (i + 1) as f64)
        .collect();
    let sum: f64 = (0..flags.len())
        .filter(|&i| flags[i])
        .map(|i| precision[i..].iter().copied().fold(0.0, f64::max))
        .sum();
    Some(sum / num_gt as f64)
}

/// `(mean AP50, mean AP75, mAP)` over categories that have GT.
pub fn map_oracle(frames: &[FrameEval], num_categories: usize) -> (f64, f64, f64) {
    let mean_at = |thr: f64| {
        let aps: Vec<f64> = (0..num_categories)
            .filter_map(|c| {
                let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
                let mut num_gt = 0;
                for (fi, f) in frames.iter().enumerate() {
                    let gts: Vec<GroundTruth> = f.ground_truth.iter().copied().filter(|g| g.category == c).collect();
                    num_gt += gts.len();
                    let mut order: Vec<usize> = (0..f.detections.len()).filter(|&i| f.detections[i].category == c).collect();
                    order.sort_by(|&a, &b| {
                        f.detections[b].score.partial_cmp(&f.detections[a].score).unwrap().then(a.cmp(&b))
                    });
                    let dets: Vec<Detection> = order.iter().map(|&i| f.detections[i]).collect();
                    for (rank, (d, t)) in dets.iter().zip(oracle_flags(&dets, &gts, thr)).enumerate() {
                        ranked.push((d.score, fi, rank, t));
                    }
                }
                ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
                let flags: Vec<bool> = ranked.iter().map(|e| e.3).collect();
                oracle_ap(&flags, num_gt)
            })
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    };
    let (a50, a75) = (mean_at(0.5), mean_at(0.75));
    (a50, a75, (a50 + a75) / 2.0)
}

fn random_frames(rng: &mut ChaCha8Rng, with_corners: bool) -> Vec<FrameEval> {
    (0..rng.random_range(1..=4))
        .map(|_| {
            let ground_truth: Vec<GroundTruth> = (0..rng.random_range(0..=4))
                .map(|_| GroundTruth {
                    category: rng.random_range(0..2),
                    bbox: grid_box(rng, 8),
                })
                .collect();
            let mut detections: Vec<Detection> = (0..rng.random_range(0..=6)).map(|_| random_detection(rng, 8)).collect();
            // near-copies of GT so matches actually occur
            for g in &ground_truth {
                if rng.random_bool(0.6) {
                    let j = |rng: &mut ChaCha8Rng| rng.random_range(-1..=1) as f64;
                    let b = BBox::new(g.bbox.x1 + j(rng), g.bbox.y1 + j(rng), g.bbox.x2 + j(rng), g.bbox.y2 + j(rng));
                    if b.is_valid() {
                        detections.push(Detection {
                            bbox: b,
                            category: g.category,
                            score: coarse_score(rng),
                        });
                    }
                }
            }
            let corners = (with_corners && rng.random_bool(0.8)).then(|| {
                (0..rng.random_range(0..=8))
                    .map(|_| CornerPoint {
                        kind: if rng.random_bool(0.5) {
                            CornerKind::TopLeft
                        } else {
                            CornerKind::BottomRight
                        },
                        category: rng.random_range(0..2),
                        x: rng.random_range(-1.0..9.0),
                        y: rng.random_range(-1.0..9.0),
                    })
                    .collect()
            });
            FrameEval {
                detections,
                ground_truth,
                corners,
            }
        })
        .collect()
}

pub fn average_precision(instances: usize) -> Result<OracleReport> {
    report(
        "ap_matching",
        instances,
        |rng| {
            let frames = random_frames(rng, false);
            let got = evaluate(&frames, 2, 4.0);
            let (a50, a75, map) = map_oracle(&frames, 2);
            Ok(Some(
                (got.mean_ap50 - a50)
                    .abs()
                    .max((got.mean_ap75 - a75).abs())
                    .max((got.map - map).abs()),
            ))
        },
        105,
    )
}

/// Pooled PCK per kind over frames that carry predicted corners.
pub fn pck_oracle(frames: &[FrameEval], radius: f64) -> [Option<f64>; 2] {
    CornerKind::ALL.map(|kind| {
        let (mut hit, mut total) = (0usize, 0usize);
        for f in frames {
            let Some(pred) = &f.corners else { continue };
            for g in &f.ground_truth {
                let (x, y) = match kind {
                    CornerKind::TopLeft => (g.bbox.x1, g.bbox.y1),
                    CornerKind::BottomRight => (g.bbox.x2, g.bbox.y2),
                };
                total += 1;
                if pred
                    .iter()
                    .any(|p| p.kind == kind && p.category == g.category && ((p.x - x).hypot(p.y - y)) <= radius)
                {
                    hit += 1;
                }
            }
        }
        (total > 0).then(|| hit as f64 / total as f64)
    })
}

pub fn pck(instances: usize) -> Result<OracleReport> {
    report(
        "pck",
        instances,
        |rng| {
            let frames = random_frames(rng, true);
            let radius = rng.random_range(0.5..4.0);
            let got = evaluate(&frames, 2, radius);
            let want = pck_oracle(&frames, radius);
            let mut diff = 0.0f64;
            for (g, w) in [got.pck_tl, got.pck_br].iter().zip(&want) {
                match (g, w) {
                    (Some(g), Some(w)) => diff = diff.max((g - w).abs()),
                    (None, None) => {}
                    _ => return Ok(None),
                }
            }
            Ok(Some(diff))
        },
        106,
    )
}

pub fn all(instances: usize) -> Result<Vec<OracleReport>> {
    Ok(vec![
        grouping(instances)?,
        non_maximum_suppression(instances)?,
        focal(instances)?,
        pull_push(instances)?,
        average_precision(instances)?,
        pck(instances)?,
    ])
}
