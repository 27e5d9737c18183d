//! Corner heatmap targets, the penalty-reduced focal loss and the
//! pull/push embedding loss, summed over the two supervised frames.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::{CornerKind, FrameSlot, HeadOutputs};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_focal: f64,
    pub w_pull: f64,
    pub w_push: f64,
    pub alpha: f64,
    pub beta: f64,
    pub push_margin: f64,
    /// IoU a displaced corner pair must keep for the Gaussian radius.
    pub gaussian_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_focal: 1.0,
            w_pull: 0.1,
            w_push: 0.1,
            alpha: 2.0,
            beta: 4.0,
            push_margin: 1.0,
            gaussian_iou: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.w_focal, self.w_pull, self.w_push].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if !(self.gaussian_iou > 0.0 && self.gaussian_iou < 1.0) {
            return Err(Error::contract("gaussian_iou must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Lowest IoU between a `w x h` box and any box whose four edges each moved by
/// at most `r` pixels.
///
/// IoU is monotone in each edge offset on `[-r, 0]` and on `[0, r]`, and the
/// outward side is never better than no move, so the minimum sits at one of
/// the 16 combinations of `±r`.
pub fn worst_case_iou(w: f64, h: f64, r: f64) -> f64 {
    let true_box = BBox::new(0.0, 0.0, w, h);
    let mut worst = 1.0f64;
    for mask in 0..16u32 {
        let s = |bit: u32| if mask & (1 << bit) != 0 { r } else { -r };
        let moved = BBox::new(s(0), s(1), w + s(2), h + s(3));
        let v = if moved.is_valid() {
            crate::bbox::iou(&true_box, &moved)
        } else {
            0.0
        };
        worst = worst.min(v);
    }
    worst
}

/// Largest integer radius whose worst-case IoU stays at or above `min_iou`,
/// never less than 1.
pub fn gaussian_radius(w: f64, h: f64, min_iou: f64) -> usize {
    let mut r = 0usize;
    while worst_case_iou(w, h, (r + 1) as f64) >= min_iou {
        r += 1;
    }
    r.max(1)
}

/// Splats `exp(-(dx² + dy²) / 2σ²)`, σ = r/3, within the `(2r+1)²` window,
/// keeping the element-wise maximum with existing values.
pub fn draw_gaussian<S: Real>(plane: &mut [S], width: usize, height: usize, cx: usize, cy: usize, radius: usize) {
    let sigma = radius as f64 / 3.0;
    let denom = 2.0 * sigma * sigma;
    let r = radius as isize;
    for dy in -r..=r {
        let y = cy as isize + dy;
        if y < 0 || y >= height as isize {
            continue;
        }
        for dx in -r..=r {
            let x = cx as isize + dx;
            if x < 0 || x >= width as isize {
                continue;
            }
            let v = if dx == 0 && dy == 0 {
                S::ONE
            } else {
                S::from_f64(libm::exp(-((dx * dx + dy * dy) as f64) / denom))
            };
            let slot = &mut plane[y as usize * width + x as usize];
            if v > *slot {
                *slot = v;
            }
        }
    }
}

/// Corner cells of one object at working resolution, `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCorners {
    pub category: usize,
    pub object: usize,
    pub tl: (usize, usize),
    pub br: (usize, usize),
}

/// Heatmap targets of one supervised frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTarget<S> {
    pub tl: Tensor<S>,
    pub br: Tensor<S>,
    pub objects: Vec<ObjectCorners>,
    /// Boxes dropped for zero width or height.
    pub skipped: usize,
}

impl<S: Real> HeatmapTarget<S> {
    pub fn heatmap(&self, kind: CornerKind) -> &Tensor<S> {
        match kind {
            CornerKind::TopLeft => &self.tl,
            CornerKind::BottomRight => &self.br,
        }
    }
}

fn corner_cell(v: f64, extent: usize) -> usize {
    (libm::round(v).max(0.0) as usize).min(extent - 1)
}

/// Builds Gaussian corner targets for boxes given at working resolution.
pub fn make_targets<S: Real>(
    boxes: &[(usize, BBox)],
    num_categories: usize,
    hw: (usize, usize),
    cfg: &LossConfig,
) -> Result<HeatmapTarget<S>> {
    let (h, w) = hw;
    let mut tl = Tensor::zeros(&[num_categories, h, w]);
    let mut br = Tensor::zeros(&[num_categories, h, w]);
    let mut objects = Vec::with_capacity(boxes.len());
    let mut skipped = 0;
    for (i, &(category, b)) in boxes.iter().enumerate() {
        if category >= num_categories {
            return Err(Error::contract(alloc::format!(
                "category {category} out of range for {num_categories} categories"
            )));
        }
        if !b.is_valid() {
            skipped += 1;
            continue;
        }
        let radius = gaussian_radius(b.width(), b.height(), cfg.gaussian_iou);
        let tl_cell = (corner_cell(b.x1, w), corner_cell(b.y1, h));
        let br_cell = (corner_cell(b.x2, w), corner_cell(b.y2, h));
        let plane = h * w;
        draw_gaussian(
            &mut tl.data_mut()[category * plane..(category + 1) * plane],
            w,
            h,
            tl_cell.0,
            tl_cell.1,
            radius,
        );
        draw_gaussian(
            &mut br.data_mut()[category * plane..(category + 1) * plane],
            w,
            h,
            br_cell.0,
            br_cell.1,
            radius,
        );
        objects.push(ObjectCorners {
            category,
            object: i,
            tl: tl_cell,
            br: br_cell,
        });
    }
    Ok(HeatmapTarget {
        tl,
        br,
        objects,
        skipped,
    })
}

/// Focal loss of heatmap logits against a Gaussian target.
pub fn focal_loss<S: Real>(graph: &mut Graph<S>, logits: Var, target: &Tensor<S>, cfg: &LossConfig) -> Result<Var> {
    graph.focal_loss_logits(logits, target, S::from_f64(cfg.alpha), S::from_f64(cfg.beta))
}

/// Pull and push terms for one frame. `None` when the frame has no objects
/// (pull) or fewer than two (push).
pub fn pull_push_loss<S: Real>(
    graph: &mut Graph<S>,
    emb_tl: Var,
    emb_br: Var,
    objects: &[ObjectCorners],
    margin: f64,
) -> Result<(Option<Var>, Option<Var>)> {
    if objects.is_empty() {
        return Ok((None, None));
    }
    let width = *graph.value(emb_tl).shape().last().expect("embedding map rank");
    let tl_idx: Vec<usize> = objects.iter().map(|o| o.tl.1 * width + o.tl.0).collect();
    let br_idx: Vec<usize> = objects.iter().map(|o| o.br.1 * width + o.br.0).collect();
    let a = graph.gather(emb_tl, &tl_idx)?;
    let b = graph.gather(emb_br, &br_idx)?;
    let k = objects.len();
    // (a - e)² + (b - e)² with e = (a + b)/2 equals (a - b)²/2
    let d = graph.sub(a, b)?;
    let sq = graph.mul(d, d)?;
    let s = graph.sum(sq);
    let pull = graph.scale(s, S::from_f64(0.5 / k as f64));
    let push = if k > 1 {
        Some(graph.push_loss(a, b, S::from_f64(margin))?)
    } else {
        None
    };
    Ok((Some(pull), push))
}

/// Scalar objective plus its unweighted components (summed over frames).
pub struct LossTerms {
    pub total: Var,
    pub focal: f64,
    pub pull: f64,
    pub push: f64,
}

pub fn total_loss<S: Real>(
    graph: &mut Graph<S>,
    heads: &HeadOutputs,
    targets: &[HeatmapTarget<S>; 2],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let mut terms: Vec<Var> = Vec::new();
    let (mut focal_sum, mut pull_sum, mut push_sum) = (0.0, 0.0, 0.0);
    for slot in FrameSlot::ALL {
        let target = &targets[slot.index()];
        for kind in CornerKind::ALL {
            let f = focal_loss(graph, heads.logits(slot, kind), target.heatmap(kind), cfg)?;
            focal_sum += graph.value(f).item().to_f64();
            terms.push(graph.scale(f, S::from_f64(cfg.w_focal)));
        }
        let (pull, push) = pull_push_loss(
            graph,
            heads.embedding(slot, CornerKind::TopLeft),
            heads.embedding(slot, CornerKind::BottomRight),
            &target.objects,
            cfg.push_margin,
        )?;
        if let Some(p) = pull {
            pull_sum += graph.value(p).item().to_f64();
            terms.push(graph.scale(p, S::from_f64(cfg.w_pull)));
        }
        if let Some(p) = push {
            push_sum += graph.value(p).item().to_f64();
            terms.push(graph.scale(p, S::from_f64(cfg.w_push)));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    Ok(LossTerms {
        total,
        focal: focal_sum,
        pull: pull_sum,
        push: push_sum,
    })
}
