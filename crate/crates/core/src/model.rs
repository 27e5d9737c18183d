//! Spatio-temporal corner network.
//!
//! ```text
//! clip [3,T,H,W] ─ stage1 ─ stage2 ─ stage3        (3x3x3 conv, BN, ReLU, 2x2 spatial pool)
//!                    │        │        │
//!                 resize to H/4 x W/4, 1x1 projection to C   → F_s, s = 1..S
//!                    └────────┴────────┘
//!                 fuse: Σ_s A_s ⊗ F_s  (A from geometry, or uniform 1/S)
//!                    │
//!          first-frame / last-frame projection (slice ⊕ temporal mean → 3x3 conv, BN, ReLU)
//!                    │
//!          4 heads: {first, last} x {TL, BR} → N heatmap logits + 1 embedding
//! ```

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{GeometryEncoder, GeometrySource};
use crate::layers::{apply_bn_updates, join, BnUpdate, Conv, ConvBnRelu, Ctx, Mode};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const OUTPUT_STRIDE: usize = 4;

/// Prior probability encoded in the initial heatmap bias.
const HEATMAP_PRIOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameSlot {
    First,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CornerKind {
    TopLeft,
    BottomRight,
}

impl FrameSlot {
    pub const ALL: [FrameSlot; 2] = [FrameSlot::First, FrameSlot::Last];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl CornerKind {
    pub const ALL: [CornerKind; 2] = [CornerKind::TopLeft, CornerKind::BottomRight];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub clip_len: usize,
    pub categories: usize,
    /// Network output grid `(H/4, W/4)`.
    pub working_hw: (usize, usize),
    pub scales: usize,
    pub base_channels: usize,
    pub fused_channels: usize,
    pub use_multi_frame: bool,
    pub use_geometry_prediction: bool,
    pub use_geometry_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            clip_len: 4,
            categories: 2,
            working_hw: (24, 36),
            scales: 3,
            base_channels: 16,
            fused_channels: 64,
            use_multi_frame: true,
            use_geometry_prediction: true,
            use_geometry_fusion: true,
        }
    }
}

impl ModelConfig {
    /// Configurations of the ablation ladder, from plain single-frame to the
    /// full geometry-guided model.
    pub fn ablation(multi_frame: bool, geometry_prediction: bool, geometry_fusion: bool) -> Self {
        ModelConfig {
            use_multi_frame: multi_frame,
            use_geometry_prediction: geometry_prediction,
            use_geometry_fusion: geometry_fusion,
            ..ModelConfig::default()
        }
    }

    /// Frames per input clip (1 for the single-frame variant).
    pub fn frames(&self) -> usize {
        if self.use_multi_frame {
            self.clip_len
        } else {
            1
        }
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.working_hw.0 * OUTPUT_STRIDE, self.working_hw.1 * OUTPUT_STRIDE)
    }

    pub fn uses_geometry(&self) -> bool {
        self.use_geometry_prediction || self.use_geometry_fusion
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_multi_frame && self.clip_len < 2 {
            return Err(Error::contract("multi-frame model needs clip_len >= 2"));
        }
        if self.clip_len == 0 || self.categories == 0 {
            return Err(Error::contract("clip_len and categories must be positive"));
        }
        if self.scales < 2 {
            return Err(Error::contract("at least two feature scales are required"));
        }
        if self.base_channels == 0 || self.fused_channels < 4 || self.fused_channels % 4 != 0 {
            return Err(Error::contract("channel widths must be positive; fused_channels a multiple of 4"));
        }
        let div = 1usize << (self.scales + 1);
        let (h, w) = self.input_hw();
        if h % div != 0 || w % div != 0 {
            return Err(Error::contract(alloc::format!(
                "input {h}x{w} must be divisible by {div} for {} scales",
                self.scales
            )));
        }
        Ok(())
    }
}

/// Heads of one forward pass, indexed `[slot][kind]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub logits: [[Var; 2]; 2],
    pub embeddings: [[Var; 2]; 2],
}

impl HeadOutputs {
    pub fn logits(&self, slot: FrameSlot, kind: CornerKind) -> Var {
        self.logits[slot.index()][kind.index()]
    }

    pub fn embedding(&self, slot: FrameSlot, kind: CornerKind) -> Var {
        self.embeddings[slot.index()][kind.index()]
    }

    /// Materializes sigmoid heatmaps and raw embeddings.
    pub fn fields<S: Real>(&self, graph: &Graph<S>) -> CornerFieldSet<S> {
        let heat = |slot: usize, kind: usize| graph.value(self.logits[slot][kind]).map(Real::sigmoid);
        let emb = |slot: usize, kind: usize| graph.value(self.embeddings[slot][kind]).clone();
        CornerFieldSet {
            heatmaps: [[heat(0, 0), heat(0, 1)], [heat(1, 0), heat(1, 1)]],
            embeddings: [[emb(0, 0), emb(0, 1)], [emb(1, 0), emb(1, 1)]],
        }
    }
}

/// Heatmaps `[N, H', W']` in (0, 1) and embeddings `[1, H', W']`, per frame
/// slot and corner kind.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerFieldSet<S> {
    pub heatmaps: [[Tensor<S>; 2]; 2],
    pub embeddings: [[Tensor<S>; 2]; 2],
}

impl<S> CornerFieldSet<S> {
    pub fn heatmap(&self, slot: FrameSlot, kind: CornerKind) -> &Tensor<S> {
        &self.heatmaps[slot.index()][kind.index()]
    }

    pub fn embedding(&self, slot: FrameSlot, kind: CornerKind) -> &Tensor<S> {
        &self.embeddings[slot.index()][kind.index()]
    }
}

pub struct ForwardOutput<S> {
    pub heads: HeadOutputs,
    pub bn_updates: Vec<BnUpdate<S>>,
}

#[derive(Clone, Debug, PartialEq)]
struct FrameProjection {
    block: ConvBnRelu,
    frame: FrameSlot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GastNet {
    config: ModelConfig,
    stages: Vec<ConvBnRelu>,
    scale_proj: Vec<Conv>,
    geometry: Option<GeometryEncoder>,
    projections: [FrameProjection; 2],
    heads: [[Conv; 2]; 2],
}

impl GastNet {
    /// Registers every parameter in `store` and returns the network layout.
    pub fn new<S: Real>(config: ModelConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.fused_channels;
        let n = config.categories;

        let mut stages = Vec::with_capacity(config.scales);
        let mut scale_proj = Vec::with_capacity(config.scales);
        let mut cin = 3;
        for s in 0..config.scales {
            let cout = config.base_channels << s;
            let name = alloc::format!("backbone.stage{}", s + 1);
            stages.push(ConvBnRelu::new3d(store, &name, cin, cout, [3, 3, 3], &mut rng)?);
            let name = alloc::format!("backbone.proj{}", s + 1);
            scale_proj.push(Conv::new3d(store, &name, cout, c, [1, 1, 1], true, &mut rng)?);
            cin = cout;
        }

        let geometry = if config.uses_geometry() {
            Some(GeometryEncoder::new(
                store,
                "geometry",
                n,
                config.use_geometry_fusion.then_some(config.scales),
                config.use_geometry_prediction.then_some(c / 4),
                &mut rng,
            )?)
        } else {
            None
        };

        let projections = [FrameSlot::First, FrameSlot::Last].map(|frame| {
            let name = match frame {
                FrameSlot::First => "project.first",
                FrameSlot::Last => "project.last",
            };
            ConvBnRelu::new2d(store, name, 2 * c, c, 3, &mut rng).map(|block| FrameProjection { block, frame })
        });
        let [p0, p1] = projections;
        let projections = [p0?, p1?];

        let head_in = if config.use_geometry_prediction { c + c / 4 } else { c };
        let mut make_head = |slot: &str, kind: &str| -> Result<Conv> {
            let name = alloc::format!("heads.{slot}.{kind}");
            let conv = Conv::new2d(store, &name, head_in, n + 1, 3, true, &mut rng)?;
            // small output weights; heatmap bias encodes the background prior
            for w in store.value_mut(conv.weight).data_mut() {
                *w *= S::from_f64(0.1);
            }
            let bias = store.value_mut(conv.bias.expect("head bias")).data_mut();
            let logit = libm::log(HEATMAP_PRIOR / (1.0 - HEATMAP_PRIOR));
            bias[..n].fill(S::from_f64(logit));
            Ok(conv)
        };
        let heads = [
            [make_head("first", "tl")?, make_head("first", "br")?],
            [make_head("last", "tl")?, make_head("last", "br")?],
        ];

        Ok(GastNet {
            config,
            stages,
            scale_proj,
            geometry,
            projections,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry_encoder(&self) -> Option<&GeometryEncoder> {
        self.geometry.as_ref()
    }

    pub fn head_input_channels(&self) -> usize {
        let c = self.config.fused_channels;
        if self.config.use_geometry_prediction {
            c + c / 4
        } else {
            c
        }
    }

    /// Multi-scale features `[C, T, H/4, W/4]`, one per backbone stage.
    pub fn backbone_forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, clip: Var) -> Result<Vec<Var>> {
        let shape = ctx.graph.value(clip).shape().to_vec();
        if shape.len() != 4 || shape[0] != 3 {
            return Err(Error::contract(alloc::format!("clip must be [3, T, H, W], got {shape:?}")));
        }
        let div = 1usize << (self.config.scales + 1);
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::contract(alloc::format!(
                "clip spatial size {}x{} is not divisible by {div}",
                shape[2],
                shape[3]
            )));
        }
        let (wh, ww) = (shape[2] / OUTPUT_STRIDE, shape[3] / OUTPUT_STRIDE);
        let mut x = clip;
        let mut feats = Vec::with_capacity(self.stages.len());
        for (stage, proj) in self.stages.iter().zip(&self.scale_proj) {
            x = stage.forward(ctx, x)?;
            x = ctx.graph.maxpool3d(x, [1, 2, 2], [1, 2, 2])?;
            let resized = ctx.graph.resize_bilinear(x, wh, ww)?;
            feats.push(proj.forward(ctx, resized)?);
        }
        Ok(feats)
    }

    /// Per-frame projections `[C, H', W']` of the first and last clip frame.
    pub fn project_frames<S: Real>(&self, ctx: &mut Ctx<'_, S>, fused: Var) -> Result<[Var; 2]> {
        let shape = ctx.graph.value(fused).shape().to_vec();
        let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let context = ctx.graph.mean_axis(fused, 1)?;
        let mut out = [fused; 2];
        for (slot, p) in self.projections.iter().enumerate() {
            let frame = match p.frame {
                FrameSlot::First => 0,
                FrameSlot::Last => t - 1,
            };
            let slice = ctx.graph.narrow(fused, 1, frame, 1)?;
            let slice = ctx.graph.reshape(slice, &[c, h, w])?;
            let stacked = ctx.graph.concat(&[slice, context], 0)?;
            out[slot] = p.block.forward(ctx, stacked)?;
        }
        Ok(out)
    }

    pub fn predict_corners<S: Real>(
        &self,
        ctx: &mut Ctx<'_, S>,
        frames: [Var; 2],
        geometry_features: Option<Var>,
    ) -> Result<HeadOutputs> {
        let n = self.config.categories;
        let mut logits = [[frames[0]; 2]; 2];
        let mut embeddings = logits;
        for slot in 0..2 {
            let input = match geometry_features {
                Some(g) if self.config.use_geometry_prediction => ctx.graph.concat(&[frames[slot], g], 0)?,
                _ => frames[slot],
            };
            for kind in 0..2 {
                let out = self.heads[slot][kind].forward(ctx, input)?;
                logits[slot][kind] = ctx.graph.narrow(out, 0, 0, n)?;
                embeddings[slot][kind] = ctx.graph.narrow(out, 0, n, 1)?;
            }
        }
        Ok(HeadOutputs { logits, embeddings })
    }

    /// Full forward pass on one clip `[3, T, H, W]`.
    ///
    /// `geometry` is consulted only when one of the geometry toggles is on.
    pub fn forward<S: Real>(
        &self,
        graph: &mut Graph<S>,
        store: &ParamStore<S>,
        clip: &Tensor<S>,
        geometry: Option<&dyn GeometrySource<S>>,
        mode: Mode,
    ) -> Result<ForwardOutput<S>> {
        if clip.rank() != 4 || clip.shape()[1] != self.config.frames() {
            return Err(Error::contract(alloc::format!(
                "clip shape {:?} does not carry {} frames",
                clip.shape(),
                self.config.frames()
            )));
        }
        let mut ctx = Ctx::new(graph, store, mode);
        let input = ctx.graph.constant(clip.clone());
        let feats = self.backbone_forward(&mut ctx, input)?;

        let encoded = match &self.geometry {
            Some(enc) => {
                let src = geometry.ok_or_else(|| Error::contract("model uses geometry but none was supplied"))?;
                let g = src.encoder_input();
                let (h, w) = self.config.working_hw;
                let gs = g.shape();
                if gs.len() != 3 || gs[1] != h || gs[2] != w {
                    return Err(Error::contract(alloc::format!(
                        "geometry input {gs:?} does not match working resolution {h}x{w}"
                    )));
                }
                let gv = ctx.graph.constant(g.clone());
                Some((enc, enc.encode(&mut ctx, gv)?))
            }
            None => None,
        };

        let attention = match encoded {
            Some((enc, t)) if self.config.use_geometry_fusion => Some(enc.attention(&mut ctx, t)?),
            _ => None,
        };
        let fused = fuse_scales(ctx.graph, &feats, attention)?;
        let frames = self.project_frames(&mut ctx, fused)?;
        let pred_geo = match encoded {
            Some((enc, t)) if self.config.use_geometry_prediction => Some(enc.prediction_features(&mut ctx, t)?),
            _ => None,
        };
        let heads = self.predict_corners(&mut ctx, frames, pred_geo)?;
        Ok(ForwardOutput {
            heads,
            bn_updates: ctx.bn_updates,
        })
    }

    /// Inference helper: eval-mode forward returning materialized fields.
    pub fn infer<S: Real>(
        &self,
        store: &ParamStore<S>,
        clip: &Tensor<S>,
        geometry: Option<&dyn GeometrySource<S>>,
    ) -> Result<CornerFieldSet<S>> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, store, clip, geometry, Mode::Eval)?;
        Ok(out.heads.fields(&graph))
    }

    pub fn apply_bn_updates<S: Real>(store: &mut ParamStore<S>, updates: &[BnUpdate<S>]) {
        apply_bn_updates(store, updates)
    }

    /// Names of every parameter belonging to head `(slot, kind)`.
    pub fn head_param_names(&self, slot: FrameSlot, kind: CornerKind) -> Vec<alloc::string::String> {
        let slot = match slot {
            FrameSlot::First => "first",
            FrameSlot::Last => "last",
        };
        let kind = match kind {
            CornerKind::TopLeft => "tl",
            CornerKind::BottomRight => "br",
        };
        let base = alloc::format!("heads.{slot}.{kind}");
        alloc::vec![join(&base, "weight"), join(&base, "bias")]
    }
}

/// Geometry-weighted sum of scale features.
///
/// `attention` is `[S, H', W']` and broadcasts over channels and time. Without
/// it every scale weighs `1/S`.
pub fn fuse_scales<S: Real>(graph: &mut Graph<S>, feats: &[Var], attention: Option<Var>) -> Result<Var> {
    let first = *feats.first().ok_or_else(|| Error::contract("no scale features to fuse"))?;
    let fshape = graph.value(first).shape().to_vec();
    if fshape.len() != 4 {
        return Err(Error::Rank {
            op: "fuse_scales",
            expected: 4,
            found: fshape.len(),
        });
    }
    match attention {
        None => {
            let mut acc = first;
            for &f in &feats[1..] {
                acc = graph.add(acc, f)?;
            }
            Ok(graph.scale(acc, S::ONE / S::from_usize(feats.len())))
        }
        Some(a) => {
            let ashape = graph.value(a).shape().to_vec();
            if ashape.len() != 3 || ashape[0] != feats.len() {
                return Err(Error::contract(alloc::format!(
                    "attention has {:?} channels for {} scales",
                    ashape.first(),
                    feats.len()
                )));
            }
            let mut acc: Option<Var> = None;
            for (s, &f) in feats.iter().enumerate() {
                let w = graph.narrow(a, 0, s, 1)?;
                let w = graph.reshape(w, &[1, 1, ashape[1], ashape[2]])?;
                let term = graph.mul(w, f)?;
                acc = Some(match acc {
                    Some(prev) => graph.add(prev, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("at least one scale"))
        }
    }
}
