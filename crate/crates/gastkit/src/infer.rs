//! Inference over a dataset split. Every clip predicts its first and last
//! frame, so interior frames are predicted twice and merged with NMS.

use std::path::Path;
use std::sync::Arc;

use gast_core::decoder::{decode_corners, merge_dual_predictions, nms, slot_corners, Corner, Detection};
use gast_core::eval::CornerPoint;
use gast_core::geometry::GeometrySource;
use gast_core::model::OUTPUT_STRIDE;
use gast_core::synth::{clip_tensor, sample_clips, Split};
use gast_core::{FrameSlot, GastNet, ParamStore, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::FileAudit;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::io;
use crate::trainer::{build_model, check_compat, load_geometry, view_slot};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const CORNERS_FILE: &str = "corners.jsonl";
pub const META_FILE: &str = "inference.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video: String,
    pub frame: usize,
    pub category: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerRecord {
    pub video: String,
    pub frame: usize,
    #[serde(flatten)]
    pub corner: CornerPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub video: String,
    pub frame: usize,
    /// Predictions merged into this frame's output (2 for interior frames).
    pub predictions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferMeta {
    pub split: Split,
    pub clip_len: usize,
    pub clip_stride: usize,
    pub dual_prediction_frames: usize,
    pub single_prediction_frames: usize,
    pub frames: Vec<FrameMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub detections: Vec<DetectionRecord>,
    pub corners: Vec<CornerRecord>,
    pub meta: InferMeta,
}

/// Raw predictions of one frame before merging.
#[derive(Clone, Debug, Default)]
pub struct FramePredictions {
    pub as_first: Option<(Vec<Detection>, [Vec<Corner>; 2])>,
    pub as_last: Option<(Vec<Detection>, [Vec<Corner>; 2])>,
}

impl FramePredictions {
    pub fn count(&self) -> usize {
        self.as_first.is_some() as usize + self.as_last.is_some() as usize
    }

    /// Merged detections: NMS over the union of both predictions.
    pub fn merged(&self, iou_nms: f64) -> Vec<Detection> {
        match (&self.as_last, &self.as_first) {
            (Some(l), Some(f)) => merge_dual_predictions(&l.0, &f.0, iou_nms),
            (Some(p), None) | (None, Some(p)) => nms(p.0.clone(), iou_nms),
            (None, None) => Vec::new(),
        }
    }

    pub fn corners(&self) -> Vec<CornerPoint> {
        let s = OUTPUT_STRIDE as f64;
        [&self.as_last, &self.as_first]
            .into_iter()
            .flatten()
            .flat_map(|(_, cs)| cs.iter().flatten())
            .map(|c| CornerPoint {
                kind: c.kind,
                category: c.category,
                x: c.x as f64 * s,
                y: c.y as f64 * s,
            })
            .collect()
    }
}

/// Runs the model over every clip of a video and collects per-frame predictions.
pub fn predict_video(
    cfg: &RunConfig,
    net: &GastNet,
    store: &ParamStore<f32>,
    video: &gast_core::synth::Video,
    geometry: Option<&Tensor<f32>>,
) -> Result<Vec<FramePredictions>> {
    let clips = sample_clips(video.frames.len(), cfg.model.frames(), cfg.clip_stride);
    let decoded = clips
        .par_iter()
        .map(|clip| {
            let input = clip_tensor::<f32>(video, clip)?;
            let fields = net.infer(store, &input, geometry.map(|g| g as &dyn GeometrySource<f32>))?;
            let out = FrameSlot::ALL.map(|slot| {
                let corners = slot_corners(&fields, slot, &cfg.decode);
                (decode_corners(&corners[0], &corners[1], &cfg.decode), corners)
            });
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frames = vec![FramePredictions::default(); video.frames.len()];
    for (clip, [first, last]) in clips.iter().zip(decoded) {
        frames[clip.first()].as_first = Some(first);
        frames[clip.last()].as_last = Some(last);
    }
    Ok(frames)
}

pub fn video_name(view: u32, index: usize) -> String {
    format!("v{view}_{index:03}")
}

/// Loads a checkpoint and predicts every frame of `split`.
pub fn infer(cfg: &RunConfig, ckpt: &Path, split: Split, audit: Arc<FileAudit>) -> Result<InferOutput> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset, audit)?;
    check_compat(cfg, &ds)?;
    let geometry = load_geometry(cfg, &ds)?;
    let (net, mut store) = build_model(cfg)?;
    checkpoint::load(ckpt, &mut store, None)?;

    let mut detections = Vec::new();
    let mut corners = Vec::new();
    let mut frames_meta = Vec::new();
    for entry in ds.videos(split) {
        // frames only: annotations of the split are never needed here
        let video = gast_core::synth::Video {
            view: entry.view,
            index: entry.index,
            frames: (0..entry.frames)
                .map(|f| {
                    Ok(gast_core::synth::AnnotatedFrame {
                        view: entry.view,
                        frame: f,
                        image: ds.frame(entry, f)?,
                        boxes: Vec::new(),
                        objects: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let name = video_name(entry.view, entry.index);
        let preds = predict_video(cfg, &net, &store, &video, geometry.get(view_slot(&ds, entry.view)))?;
        for (f, p) in preds.iter().enumerate() {
            frames_meta.push(FrameMeta {
                video: name.clone(),
                frame: f,
                predictions: p.count(),
            });
            detections.extend(p.merged(cfg.decode.iou_nms).into_iter().map(|d| DetectionRecord {
                video: name.clone(),
                frame: f,
                category: d.category,
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
                score: d.score,
            }));
            corners.extend(p.corners().into_iter().map(|c| CornerRecord {
                video: name.clone(),
                frame: f,
                corner: c,
            }));
        }
    }
    let dual = frames_meta.iter().filter(|m| m.predictions == 2).count();
    Ok(InferOutput {
        detections,
        corners,
        meta: InferMeta {
            split,
            clip_len: cfg.model.frames(),
            clip_stride: cfg.clip_stride,
            dual_prediction_frames: dual,
            single_prediction_frames: frames_meta.len() - dual,
            frames: frames_meta,
        },
    })
}

pub fn write(out: &Path, result: &InferOutput) -> Result<()> {
    io::create_dir(out)?;
    io::write_jsonl(&out.join(DETECTIONS_FILE), &result.detections)?;
    io::write_jsonl(&out.join(CORNERS_FILE), &result.corners)?;
    io::write_json(&out.join(META_FILE), &result.meta)
}
