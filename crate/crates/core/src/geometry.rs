//! Static-camera scene geometry: normalized coordinate maps, per-view and
//! per-category pseudo depth maps estimated from box annotations, and the
//! small convolutional encoder that turns them into attention and
//! prediction features.
//!
//! A pseudo depth map stores, for every image row, the expected pixel height
//! of an object whose bottom edge touches that row. Under a static camera the
//! height shrinks with distance, so the map is a coarse inverse-depth proxy.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::layers::{join, Conv, ConvBnRelu, Ctx};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Width of the encoded geometry features.
pub const GEOMETRY_CHANNELS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordMaps<S> {
    pub gx: Tensor<S>,
    pub gy: Tensor<S>,
}

/// `gx[r][c] = c / (width - 1)`, `gy[r][c] = r / (height - 1)`.
pub fn make_coord_maps<S: Real>(height: usize, width: usize) -> Result<CoordMaps<S>> {
    if height < 2 || width < 2 {
        return Err(Error::contract(alloc::format!(
            "coordinate maps need at least 2x2, got {height}x{width}"
        )));
    }
    let gx = Tensor::from_fn(&[height, width], |i| S::from_f64((i % width) as f64 / (width - 1) as f64));
    let gy = Tensor::from_fn(&[height, width], |i| S::from_f64((i / width) as f64 / (height - 1) as f64));
    Ok(CoordMaps { gx, gy })
}

/// One ground-truth box of a camera view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub view: u32,
    pub category: u32,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDepthMap {
    pub view: u32,
    pub category: u32,
    pub width: usize,
    rows: Vec<f64>,
    populated_rows: Vec<usize>,
}

impl PseudoDepthMap {
    /// Map with the given per-row values and no record of which rows were observed.
    pub fn from_rows(view: u32, category: u32, width: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.is_empty() || width == 0 {
            return Err(Error::contract("pseudo depth map needs at least one row and column"));
        }
        if let Some(r) = rows.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::contract(alloc::format!(
                "pseudo depth row {r} is not a positive finite height"
            )));
        }
        Ok(PseudoDepthMap {
            view,
            category,
            width,
            rows,
            populated_rows: Vec::new(),
        })
    }

    /// Constant map of value 1, used when a view has no boxes of a category.
    pub fn uniform(view: u32, category: u32, height: usize, width: usize) -> Self {
        PseudoDepthMap {
            view,
            category,
            width,
            rows: vec![1.0; height],
            populated_rows: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    /// Per-row values; the map is constant along each row.
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// Rows that received at least one box bottom edge, ascending.
    pub fn populated_rows(&self) -> &[usize] {
        &self.populated_rows
    }

    pub fn values<S: Real>(&self) -> Tensor<S> {
        Tensor::from_fn(&[self.rows.len(), self.width], |i| S::from_f64(self.rows[i / self.width]))
    }

    /// Resamples to a new resolution. Values are pixel heights, so they are
    /// multiplied by the vertical scale factor as well as interpolated.
    pub fn resampled(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("resampled pseudo depth map must be non-empty"));
        }
        let col = Tensor::<f64>::new(&[self.rows.len(), 1], self.rows.clone())?;
        let scale = height as f64 / self.rows.len() as f64;
        let rows = col
            .resize_bilinear(height, 1)?
            .into_data()
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Ok(PseudoDepthMap {
            view: self.view,
            category: self.category,
            width,
            rows,
            populated_rows: Vec::new(),
        })
    }
}

/// Estimates the pseudo depth map of one `(view, category)` pair.
///
/// Each box contributes its height to the row containing its bottom edge.
/// Observed rows take the mean of their largest and smallest height. Rows
/// between observed rows are linearly interpolated; rows beyond the first or
/// last observed row copy the nearest observed value.
pub fn estimate_pseudo_depth(
    annotations: &[Annotation],
    view: u32,
    category: u32,
    height: usize,
    width: usize,
) -> Result<PseudoDepthMap> {
    if height == 0 || width == 0 {
        return Err(Error::contract("pseudo depth map needs a non-empty resolution"));
    }
    let mut extremes: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for a in annotations.iter().filter(|a| a.view == view && a.category == category) {
        let h = a.bbox.height();
        if !(h > 0.0) {
            return Err(Error::contract(alloc::format!(
                "annotation with non-positive height {h} in view {view}"
            )));
        }
        let row = (libm::floor(a.bbox.y2).max(0.0) as usize).min(height - 1);
        let e = extremes.entry(row).or_insert((h, h));
        e.0 = e.0.max(h);
        e.1 = e.1.min(h);
    }
    if extremes.is_empty() {
        return Err(Error::PriorUnavailable { view, category });
    }

    let observed: Vec<(usize, f64)> = extremes.iter().map(|(&r, &(mx, mn))| (r, (mx + mn) / 2.0)).collect();
    let mut rows = vec![0.0; height];
    let (first_row, first_val) = observed[0];
    let (last_row, last_val) = observed[observed.len() - 1];
    rows[..=first_row].fill(first_val);
    rows[last_row..].fill(last_val);
    for pair in observed.windows(2) {
        let ((r0, v0), (r1, v1)) = (pair[0], pair[1]);
        let span = (r1 - r0) as f64;
        for (k, slot) in rows[r0..=r1].iter_mut().enumerate() {
            let t = k as f64 / span;
            *slot = if k == 0 {
                v0
            } else if r0 + k == r1 {
                v1
            } else {
                v0 + (v1 - v0) * t
            };
        }
    }

    Ok(PseudoDepthMap {
        view,
        category,
        width,
        rows,
        populated_rows: observed.iter().map(|&(r, _)| r).collect(),
    })
}

/// Coordinate maps plus one pseudo depth map per category for a camera view.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryPrior {
    pub view: u32,
    pub coords: CoordMaps<f64>,
    pub depth_maps: Vec<PseudoDepthMap>,
}

impl GeometryPrior {
    pub fn new(view: u32, depth_maps: Vec<PseudoDepthMap>) -> Result<Self> {
        let first = depth_maps
            .first()
            .ok_or_else(|| Error::contract("geometry prior needs at least one category"))?;
        let (h, w) = (first.height(), first.width);
        for (i, d) in depth_maps.iter().enumerate() {
            if d.height() != h || d.width != w {
                return Err(Error::contract(alloc::format!(
                    "depth map {i} is {}x{}, expected {h}x{w}",
                    d.height(),
                    d.width
                )));
            }
        }
        Ok(GeometryPrior {
            view,
            coords: make_coord_maps(h, w)?,
            depth_maps,
        })
    }

    /// Builds the prior of one view from annotations at working resolution.
    /// Categories without any box fall back to a uniform map; their ids are
    /// returned alongside.
    pub fn estimate(
        annotations: &[Annotation],
        view: u32,
        num_categories: usize,
        height: usize,
        width: usize,
    ) -> Result<(Self, Vec<u32>)> {
        let mut maps = Vec::with_capacity(num_categories);
        let mut fallbacks = Vec::new();
        for c in 0..num_categories as u32 {
            match estimate_pseudo_depth(annotations, view, c, height, width) {
                Ok(m) => maps.push(m),
                Err(Error::PriorUnavailable { .. }) => {
                    fallbacks.push(c);
                    maps.push(PseudoDepthMap::uniform(view, c, height, width));
                }
                Err(e) => return Err(e),
            }
        }
        Ok((GeometryPrior::new(view, maps)?, fallbacks))
    }

    /// Uniform prior for a view never seen in training.
    pub fn uniform(view: u32, num_categories: usize, height: usize, width: usize) -> Result<Self> {
        let maps = (0..num_categories as u32)
            .map(|c| PseudoDepthMap::uniform(view, c, height, width))
            .collect();
        GeometryPrior::new(view, maps)
    }

    pub fn height(&self) -> usize {
        self.depth_maps[0].height()
    }

    pub fn width(&self) -> usize {
        self.depth_maps[0].width
    }

    pub fn num_categories(&self) -> usize {
        self.depth_maps.len()
    }

    /// `[2 + N, H, W]` stack of `gx`, `gy` and the depth maps divided by the
    /// map height, so every channel is O(1).
    pub fn encoder_input<S: Real>(&self) -> Tensor<S> {
        let (h, w) = (self.height(), self.width());
        let n = self.depth_maps.len();
        let mut data = Vec::with_capacity((2 + n) * h * w);
        data.extend(self.coords.gx.data().iter().map(|&v| S::from_f64(v)));
        data.extend(self.coords.gy.data().iter().map(|&v| S::from_f64(v)));
        for d in &self.depth_maps {
            for &r in d.rows() {
                let v = S::from_f64(r / h as f64);
                data.extend(core::iter::repeat_n(v, w));
            }
        }
        Tensor::new(&[2 + n, h, w], data).expect("encoder input shape")
    }
}

/// Anything that can hand the network its geometry input. Lets callers
/// observe whether a forward pass consulted the prior at all.
pub trait GeometrySource<S: Real> {
    fn encoder_input(&self) -> &Tensor<S>;
}

impl<S: Real> GeometrySource<S> for Tensor<S> {
    fn encoder_input(&self) -> &Tensor<S> {
        self
    }
}

/// Two 3x3 Conv-BN-ReLU blocks over the geometry stack, a 1x1 attention
/// projection to one channel per feature scale, and a 1x1 projection that
/// feeds the prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryEncoder {
    pub block1: ConvBnRelu,
    pub block2: ConvBnRelu,
    pub attn_conv: Option<Conv>,
    pub pred_proj: Option<Conv>,
    pub in_channels: usize,
}

impl GeometryEncoder {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        prefix: &str,
        num_categories: usize,
        scales: Option<usize>,
        pred_channels: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_channels = 2 + num_categories;
        let c = GEOMETRY_CHANNELS;
        let block1 = ConvBnRelu::new2d(store, &join(prefix, "block1"), in_channels, c, 3, rng)?;
        let block2 = ConvBnRelu::new2d(store, &join(prefix, "block2"), c, c, 3, rng)?;
        let attn_conv = match scales {
            Some(s) if s < 2 => return Err(Error::contract("attention needs at least 2 scales")),
            Some(s) => Some(Conv::new2d(store, &join(prefix, "attn"), c, s, 1, true, rng)?),
            None => None,
        };
        let pred_proj = pred_channels
            .map(|p| Conv::new2d(store, &join(prefix, "pred_proj"), c, p, 1, true, rng))
            .transpose()?;
        Ok(GeometryEncoder {
            block1,
            block2,
            attn_conv,
            pred_proj,
            in_channels,
        })
    }

    /// Encoded geometry features `[16, H, W]`.
    pub fn encode<S: Real>(&self, ctx: &mut Ctx<'_, S>, input: Var) -> Result<Var> {
        let shape = ctx.graph.value(input).shape();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::contract(alloc::format!(
                "geometry input has shape {:?}, expected {} channels",
                shape,
                self.in_channels
            )));
        }
        let t = self.block1.forward(ctx, input)?;
        self.block2.forward(ctx, t)
    }

    /// Per-pixel softmax over scales, `[S, H, W]`.
    pub fn attention<S: Real>(&self, ctx: &mut Ctx<'_, S>, encoded: Var) -> Result<Var> {
        let conv = self
            .attn_conv
            .as_ref()
            .ok_or_else(|| Error::contract("encoder was built without an attention projection"))?;
        let logits = conv.forward(ctx, encoded)?;
        ctx.graph.softmax(logits, 0)
    }

    pub fn prediction_features<S: Real>(&self, ctx: &mut Ctx<'_, S>, encoded: Var) -> Result<Var> {
        let conv = self
            .pred_proj
            .as_ref()
            .ok_or_else(|| Error::contract("encoder was built without a prediction projection"))?;
        conv.forward(ctx, encoded)
    }
}
