//! Scores detection files against a dataset split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use gast_core::bbox::BBox;
use gast_core::decoder::Detection;
use gast_core::eval::{evaluate, EvalReport, FrameEval, GroundTruth, PrPoint};
use gast_core::synth::Split;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::infer::{video_name, CornerRecord, DetectionRecord};
use crate::io;

pub const REPORT_FILE: &str = "report.json";

/// Builds per-frame inputs for every frame of `split` and evaluates them.
///
/// Frames absent from `detections` count as frames with no detections.
/// Corner PCK is computed only when `corners` is given.
pub fn evaluate_split(
    ds: &Dataset,
    split: Split,
    detections: &[DetectionRecord],
    corners: Option<&[CornerRecord]>,
    pck_radius: f64,
) -> Result<EvalReport> {
    let mut index: HashMap<(String, usize), usize> = HashMap::new();
    let mut frames = Vec::new();
    for entry in ds.videos(split) {
        let name = video_name(entry.view, entry.index);
        for (f, boxes) in ds.annotations(entry)?.into_iter().enumerate() {
            index.insert((name.clone(), f), frames.len());
            frames.push(FrameEval {
                detections: Vec::new(),
                ground_truth: boxes
                    .into_iter()
                    .map(|b| GroundTruth {
                        category: b.category,
                        bbox: b.bbox,
                    })
                    .collect(),
                corners: corners.map(|_| Vec::new()),
            });
        }
    }
    let slot = |video: &str, frame: usize| {
        index
            .get(&(video.to_string(), frame))
            .copied()
            .ok_or_else(|| Error::Data(format!("prediction for unknown frame {video}/{frame}")))
    };
    for d in detections {
        if d.category >= ds.num_categories() {
            return Err(Error::Data(format!("detection with unknown category {}", d.category)));
        }
        frames[slot(&d.video, d.frame)?].detections.push(Detection {
            bbox: BBox::new(d.x1, d.y1, d.x2, d.y2),
            category: d.category,
            score: d.score,
        });
    }
    for c in corners.unwrap_or_default() {
        let i = slot(&c.video, c.frame)?;
        frames[i].corners.get_or_insert_with(Vec::new).push(c.corner);
    }
    Ok(evaluate(&frames, ds.num_categories(), pck_radius))
}

fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    s
}

/// Writes `report.json` and one `pr_c<category>_iou<50|75>.csv` per curve.
pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    io::create_dir(out)?;
    io::write_json(&out.join(REPORT_FILE), report)?;
    for c in &report.categories {
        for (tag, pts) in [("50", &c.pr50), ("75", &c.pr75)] {
            let path = out.join(format!("pr_c{}_iou{tag}.csv", c.category));
            io::write_atomic(&path, pr_csv(pts).as_bytes())?;
        }
    }
    Ok(())
}
