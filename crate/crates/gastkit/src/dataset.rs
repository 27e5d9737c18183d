//! Dataset layout on disk.
//!
//! ```text
//! <root>/manifest.json
//! <root>/videos/v<view>_<index>/annotations.jsonl   one {frame, category, x1, y1, x2, y2} per line
//! <root>/videos/v<view>_<index>/frames/<frame>.png  8-bit RGB
//! <root>/videos/v<view>_<index>/frames/<frame>.bin  planar float frame, see below
//! ```
//!
//! A `.bin` frame is the 8-byte magic `GASTFRM1`, then channels, height and
//! width as little-endian `u32`, then `channels * height * width`
//! little-endian `f32` values in channel-major order.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use gast_core::bbox::BBox;
use gast_core::synth::{self, AnnotatedFrame, BoxAnnotation, DatasetSpec, Split, Video};
use gast_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::FileAudit;
use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const FRAME_MAGIC: &[u8; 8] = b"GASTFRM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    F32,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::F32 => "bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub view: u32,
    pub index: usize,
    pub split: Split,
    pub frames: usize,
    /// Directory relative to the dataset root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub image_format: ImageFormat,
    pub image_height: usize,
    pub image_width: usize,
    pub categories: Vec<CategoryEntry>,
    pub views: Vec<u32>,
    pub videos: Vec<VideoEntry>,
    pub spec: DatasetSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame: usize,
    pub category: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl AnnotationRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }
}

fn video_dir(view: u32, index: usize) -> String {
    format!("videos/v{view}_{index:03}")
}

fn frame_name(frame: usize, format: ImageFormat) -> String {
    format!("frames/{frame:04}.{}", format.extension())
}

pub fn encode_frame(image: &Tensor<f32>, format: ImageFormat) -> Result<Vec<u8>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    match format {
        ImageFormat::F32 => {
            let mut out = Vec::with_capacity(20 + image.len() * 4);
            out.extend_from_slice(FRAME_MAGIC);
            for d in [c, h, w] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
        ImageFormat::Png => {
            if c != 3 {
                return Err(Error::Contract(format!("PNG frames need 3 channels, got {c}")));
            }
            let mut rgb = vec![0u8; h * w * 3];
            let d = image.data();
            for p in 0..h * w {
                for ch in 0..3 {
                    rgb[p * 3 + ch] = (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            let mut out = Vec::new();
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Data(format!("png encode: {e}")))?;
            writer
                .write_image_data(&rgb)
                .map_err(|e| Error::Data(format!("png encode: {e}")))?;
            writer.finish().map_err(|e| Error::Data(format!("png encode: {e}")))?;
            Ok(out)
        }
    }
}

pub fn decode_frame(path: &Path, bytes: &[u8], format: ImageFormat) -> Result<Tensor<f32>> {
    let bad = |message: &str| Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    match format {
        ImageFormat::F32 => {
            if bytes.len() < 20 || &bytes[..8] != FRAME_MAGIC {
                return Err(bad("missing frame header"));
            }
            let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
            let shape = [dim(0), dim(1), dim(2)];
            let n: usize = shape.iter().product();
            if bytes.len() != 20 + 4 * n {
                return Err(bad("frame payload does not match its header"));
            }
            let data = bytes[20..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Tensor::new(&shape, data)?)
        }
        ImageFormat::Png => {
            let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
            let mut reader = decoder.read_info().map_err(|e| bad(&e.to_string()))?;
            let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large"))?];
            let info = reader.next_frame(&mut buf).map_err(|e| bad(&e.to_string()))?;
            if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
                return Err(bad("expected 8-bit RGB"));
            }
            let (h, w) = (info.height as usize, info.width as usize);
            let mut data = vec![0f32; 3 * h * w];
            for p in 0..h * w {
                for ch in 0..3 {
                    data[ch * h * w + p] = buf[p * 3 + ch] as f32 / 255.0;
                }
            }
            Ok(Tensor::new(&[3, h, w], data)?)
        }
    }
}

fn write_video(root: &Path, video: &Video, format: ImageFormat) -> Result<()> {
    let dir = root.join(video_dir(video.view, video.index));
    io::create_dir(&dir.join("frames"))?;
    let records = video.frames.iter().flat_map(|f| {
        f.boxes.iter().map(move |b| AnnotationRecord {
            frame: f.frame,
            category: b.category,
            x1: b.bbox.x1,
            y1: b.bbox.y1,
            x2: b.bbox.x2,
            y2: b.bbox.y2,
        })
    });
    io::write_jsonl(&dir.join("annotations.jsonl"), records)?;
    for f in &video.frames {
        io::write_bytes(&dir.join(frame_name(f.frame, format)), &encode_frame(&f.image, format)?)?;
    }
    Ok(())
}

/// Generates the dataset into `root`. Videos are produced in parallel; the
/// output does not depend on the thread count.
pub fn generate(spec: &DatasetSpec, seed: u64, root: &Path, format: ImageFormat) -> Result<Manifest> {
    spec.validate()?;
    let cam = spec.views[0].camera;
    if spec.views.iter().any(|v| v.camera.image_h != cam.image_h || v.camera.image_w != cam.image_w) {
        return Err(Error::Contract("all views must share the image size".into()));
    }
    io::create_dir(root)?;
    let keys = spec.video_keys();
    let videos = keys
        .par_iter()
        .map(|&(v, k)| {
            let view = &spec.views[v];
            let video = synth::generate_video(view, seed, k)?;
            write_video(root, &video, format)?;
            Ok(VideoEntry {
                view: view.view,
                index: k,
                split: spec.split_of(view, k),
                frames: video.frames.len(),
                dir: video_dir(view.view, k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        image_format: format,
        image_height: cam.image_h,
        image_width: cam.image_w,
        categories: spec.views[0]
            .categories
            .iter()
            .map(|c| CategoryEntry {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
        views: spec.views.iter().map(|v| v.view).collect(),
        videos,
        spec: spec.clone(),
    };
    io::write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A video read back from disk, in the generator's in-memory shape.
pub type LoadedVideo = Video;

/// Read access to a dataset; every file read is logged in the audit.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    audit: Arc<FileAudit>,
}

impl Dataset {
    pub fn open(root: &Path, audit: Arc<FileAudit>) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = audit.read_to_string(&path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            audit,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn audit(&self) -> &Arc<FileAudit> {
        &self.audit
    }

    pub fn num_categories(&self) -> usize {
        self.manifest.categories.len()
    }

    pub fn videos(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.manifest.videos.iter().filter(move |v| v.split == split)
    }

    pub fn annotation_path(&self, video: &VideoEntry) -> PathBuf {
        self.root.join(&video.dir).join("annotations.jsonl")
    }

    /// Boxes of every frame of `video`.
    pub fn annotations(&self, video: &VideoEntry) -> Result<Vec<Vec<BoxAnnotation>>> {
        let path = self.annotation_path(video);
        let text = self.audit.read_to_string(&path)?;
        let records: Vec<AnnotationRecord> = io::parse_jsonl(&path, &text)?;
        let mut frames = vec![Vec::new(); video.frames];
        for r in records {
            let slot = frames
                .get_mut(r.frame)
                .ok_or_else(|| Error::Data(format!("{}: frame {} out of range", path.display(), r.frame)))?;
            if r.category >= self.num_categories() {
                return Err(Error::Data(format!("{}: unknown category {}", path.display(), r.category)));
            }
            slot.push(BoxAnnotation {
                category: r.category,
                bbox: r.bbox(),
            });
        }
        Ok(frames)
    }

    pub fn frame(&self, video: &VideoEntry, frame: usize) -> Result<Tensor<f32>> {
        let path = self
            .root
            .join(&video.dir)
            .join(frame_name(frame, self.manifest.image_format));
        let bytes = self.audit.read(&path)?;
        let img = decode_frame(&path, &bytes, self.manifest.image_format)?;
        let expect = [3, self.manifest.image_height, self.manifest.image_width];
        if img.shape() != expect {
            return Err(Error::Data(format!(
                "{}: shape {:?}, expected {expect:?}",
                path.display(),
                img.shape()
            )));
        }
        Ok(img)
    }

    /// Frames plus annotations of one video.
    pub fn load_video(&self, video: &VideoEntry) -> Result<LoadedVideo> {
        let boxes = self.annotations(video)?;
        let frames = boxes
            .into_iter()
            .enumerate()
            .map(|(f, boxes)| {
                Ok(AnnotatedFrame {
                    view: video.view,
                    frame: f,
                    image: self.frame(video, f)?,
                    boxes,
                    objects: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Video {
            view: video.view,
            index: video.index,
            frames,
        })
    }
}
