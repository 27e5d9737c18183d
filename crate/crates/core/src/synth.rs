//! Synthetic static-camera videos.
//!
//! Objects are vertical rectangles standing on a ground plane, moving with
//! constant velocity and seen through a pitched pinhole camera. Frames are
//! rendered as depth-ordered filled boxes over a gradient background, and the
//! annotations come straight from the projected world state.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Pinhole camera at `(0, height, 0)` looking along +Z, pitched down by
/// `pitch` radians. World Y points up; image v points down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub height: f64,
    pub pitch: f64,
    pub image_h: usize,
    pub image_w: usize,
}

impl Camera {
    pub fn center(&self) -> (f64, f64) {
        (self.image_w as f64 / 2.0, self.image_h as f64 / 2.0)
    }

    /// World point to camera coordinates `(x, y, z)`, z being depth.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (libm::sin(self.pitch), libm::cos(self.pitch));
        let dy = p[1] - self.height;
        [p[0], -dy * c - p[2] * s, -dy * s + p[2] * c]
    }

    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        let [x, y, z] = self.to_camera(p);
        if !(z > 0.0) {
            return Err(Error::BehindCamera(z));
        }
        let (cx, cy) = self.center();
        Ok((cx + self.focal * x / z, cy + self.focal * y / z))
    }

    /// Image row of the ground plane's vanishing line.
    pub fn horizon_row(&self) -> f64 {
        self.center().1 - self.focal * libm::tan(self.pitch)
    }

    /// Ground depth Z whose contact point projects to image row `v`.
    pub fn ground_depth_at_row(&self, v: f64) -> Option<f64> {
        let t = (v - self.center().1) / self.focal;
        let (s, c) = (libm::sin(self.pitch), libm::cos(self.pitch));
        // t = (h c - Z s) / (h s + Z c)
        let denom = t * c + s;
        if denom <= 0.0 {
            return None;
        }
        Some(self.height * (c - t * s) / denom)
    }

    /// Bounding box of a vertical rectangle of size `w x h` metres centred
    /// at ground position `(x, z)` and facing the camera.
    pub fn project_object(&self, x: f64, z: f64, w: f64, h: f64) -> Result<BBox> {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for dx in [-w / 2.0, w / 2.0] {
            for y in [0.0, h] {
                let (u, v) = self.project([x + dx, y, z])?;
                b.x1 = b.x1.min(u);
                b.y1 = b.y1.min(v);
                b.x2 = b.x2.max(u);
                b.y2 = b.y2.max(v);
            }
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    pub name: String,
    pub height_mean: f64,
    pub height_std: f64,
    /// Width over height of the physical rectangle.
    pub aspect: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub view: u32,
    pub camera: Camera,
    pub categories: Vec<CategorySpec>,
    /// Inclusive range of simultaneous objects.
    pub objects: (usize, usize),
    /// Ground speed range in m/s.
    pub speed: (f64, f64),
    /// Ground depth range in metres where objects live.
    pub depth: (f64, f64),
    pub fps: f64,
    pub videos: usize,
    pub frames_per_video: usize,
    pub background: [[f64; 3]; 2],
    pub noise_std: f64,
}

pub const MIN_VISIBLE_FRACTION: f64 = 0.25;

pub fn default_categories() -> Vec<CategorySpec> {
    alloc::vec![
        CategorySpec {
            id: 0,
            name: "pedestrian".into(),
            height_mean: 1.7,
            height_std: 0.1,
            aspect: 0.45,
            color: [0.85, 0.25, 0.2],
        },
        CategorySpec {
            id: 1,
            name: "vehicle".into(),
            height_mean: 1.5,
            height_std: 0.1,
            aspect: 1.8,
            color: [0.2, 0.35, 0.85],
        },
    ]
}

impl SceneSpec {
    /// Desk-scale view `view` of the default dataset.
    pub fn default_view(view: u32) -> Self {
        let v = view as f64;
        SceneSpec {
            view,
            camera: Camera {
                focal: 200.0,
                height: 4.0 + 0.5 * (v % 3.0),
                pitch: 0.15 + 0.02 * (v % 3.0),
                image_h: 96,
                image_w: 144,
            },
            categories: default_categories(),
            objects: (2, 4),
            speed: (0.6, 1.6),
            depth: (11.5, 22.0),
            fps: 5.0,
            videos: 20,
            frames_per_video: 40,
            background: [
                [0.55 + 0.1 * (v % 2.0), 0.7, 0.8 - 0.1 * (v % 3.0)],
                [0.35, 0.4 + 0.05 * (v % 3.0), 0.3],
            ],
            noise_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.camera;
        if !(c.height > 0.0) {
            return Err(Error::contract("camera must be above the ground"));
        }
        if !(c.focal > 0.0) || c.image_h == 0 || c.image_w == 0 {
            return Err(Error::contract("focal length and image size must be positive"));
        }
        if !(c.pitch.abs() < core::f64::consts::FRAC_PI_2) {
            return Err(Error::contract("pitch must lie within (-pi/2, pi/2)"));
        }
        if self.categories.is_empty() {
            return Err(Error::contract("at least one category is required"));
        }
        for (i, k) in self.categories.iter().enumerate() {
            if k.id != i {
                return Err(Error::contract("category ids must be 0..N in order"));
            }
            if !(k.height_mean > 0.0 && k.height_std >= 0.0 && k.height_mean - 2.0 * k.height_std > 0.0 && k.aspect > 0.0)
            {
                return Err(Error::contract(alloc::format!("category {} has non-positive size", k.name)));
            }
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::contract("object count range is empty"));
        }
        if !(self.speed.0 >= 0.0 && self.speed.1 >= self.speed.0) {
            return Err(Error::contract("invalid speed range"));
        }
        if !(self.depth.0 > 0.0 && self.depth.1 > self.depth.0) {
            return Err(Error::contract("invalid depth range"));
        }
        if !(c.to_camera([0.0, 0.0, self.depth.0])[2] > 0.0) {
            return Err(Error::contract("depth range reaches behind the camera"));
        }
        if !(self.fps > 0.0) || self.frames_per_video == 0 {
            return Err(Error::contract("fps and frames per video must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::contract("noise std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub views: Vec<SceneSpec>,
    /// Fraction of each view's videos held out as test split (the last ones).
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            views: (0..3).map(SceneSpec::default_view).collect(),
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::contract("dataset needs at least one view"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::contract("test fraction must lie in [0, 1)"));
        }
        let n = self.views[0].categories.len();
        for (i, v) in self.views.iter().enumerate() {
            v.validate()?;
            if v.categories.len() != n {
                return Err(Error::contract("all views must share the category set"));
            }
            if self.views[..i].iter().any(|o| o.view == v.view) {
                return Err(Error::contract("duplicate view id"));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, view: &SceneSpec, video: usize) -> Split {
        let test = libm::round(view.videos as f64 * self.test_fraction) as usize;
        if video + test >= view.videos {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// `(view index, video index)` pairs in generation order.
    pub fn video_keys(&self) -> Vec<(usize, usize)> {
        self.views
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.videos).map(move |k| (vi, k)))
            .collect()
    }
}

/// World state of one object in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub instance: usize,
    pub category: usize,
    pub x: f64,
    pub z: f64,
    pub width: f64,
    pub height: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub category: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub view: u32,
    pub frame: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub boxes: Vec<BoxAnnotation>,
    /// World state of every object (visible or not), for oracles.
    pub objects: Vec<ObjectState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub view: u32,
    pub index: usize,
    pub frames: Vec<AnnotatedFrame>,
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    state: ObjectState,
    vx: f64,
    vz: f64,
}

fn truncated_normal(rng: &mut impl Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    let n = Normal::new(mean, std).expect("std is positive");
    loop {
        let v = n.sample(rng);
        if (v - mean).abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Horizontal extent of the ground strip visible at depth `z`.
fn visible_half_width(cam: &Camera, z: f64) -> f64 {
    let zc = cam.to_camera([0.0, 0.0, z])[2];
    zc * (cam.image_w as f64 / 2.0) / cam.focal
}

fn spawn(spec: &SceneSpec, rng: &mut impl Rng, instance: usize, entering: bool) -> Mover {
    let cat = &spec.categories[rng.random_range(0..spec.categories.len())];
    let height = truncated_normal(rng, cat.height_mean, cat.height_std);
    let width = height * cat.aspect;
    let z = rng.random_range(spec.depth.0..=spec.depth.1);
    let half = visible_half_width(&spec.camera, z);
    let speed = rng.random_range(spec.speed.0..=spec.speed.1);
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let x = if entering {
        -dir * (half + width / 2.0) * 0.95
    } else {
        rng.random_range(-half * 0.8..=half * 0.8)
    };
    let vz = speed * 0.2 * rng.random_range(-1.0..=1.0);
    let mut color = [0.0; 3];
    for (c, base) in color.iter_mut().zip(cat.color) {
        *c = (base + rng.random_range(-0.08..=0.08)).clamp(0.0, 1.0);
    }
    Mover {
        state: ObjectState {
            instance,
            category: cat.id,
            x,
            z,
            width,
            height,
            color,
        },
        vx: dir * speed,
        vz,
    }
}

fn has_left(spec: &SceneSpec, m: &Mover) -> bool {
    let s = &m.state;
    if s.z < spec.depth.0 || s.z > spec.depth.1 {
        return true;
    }
    let half = visible_half_width(&spec.camera, s.z) + s.width / 2.0;
    (s.x > half && m.vx > 0.0) || (s.x < -half && m.vx < 0.0)
}

/// Pixels whose centre lies inside `b`, as half-open index ranges.
fn raster_span(b: &BBox, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let lo = |a: f64, n: usize| (libm::ceil(a - 0.5).max(0.0) as usize).min(n);
    (lo(b.x1, w), lo(b.x2, w), lo(b.y1, h), lo(b.y2, h))
}

/// Renders the objects and returns the image plus the annotation list.
pub fn render_frame(spec: &SceneSpec, objects: &[ObjectState], rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<BoxAnnotation>)> {
    let cam = &spec.camera;
    let (h, w) = (cam.image_h, cam.image_w);
    let mut img = alloc::vec![0f32; 3 * h * w];
    for y in 0..h {
        let t = y as f64 / (h.max(2) - 1) as f64;
        for c in 0..3 {
            let v = spec.background[0][c] * (1.0 - t) + spec.background[1][c] * t;
            img[c * h * w + y * w..c * h * w + (y + 1) * w].fill(v as f32);
        }
    }

    let mut order: Vec<usize> = (0..objects.len()).collect();
    // far to near; ties by instance for determinism
    order.sort_by(|&a, &b| {
        objects[b]
            .z
            .partial_cmp(&objects[a].z)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(objects[a].instance.cmp(&objects[b].instance))
    });
    let mut owner = alloc::vec![usize::MAX; h * w];
    let projected = objects
        .iter()
        .map(|o| cam.project_object(o.x, o.z, o.width, o.height))
        .collect::<Result<Vec<_>>>()?;
    for &i in &order {
        let (x0, x1, y0, y1) = raster_span(&projected[i], w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                owner[y * w + x] = i;
                for c in 0..3 {
                    img[c * h * w + y * w + x] = objects[i].color[c] as f32;
                }
            }
        }
    }

    let mut visible = alloc::vec![0usize; objects.len()];
    for &o in &owner {
        if o != usize::MAX {
            visible[o] += 1;
        }
    }
    let mut boxes = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        let b = projected[i];
        if b.area() <= 0.0 || (visible[i] as f64) < MIN_VISIBLE_FRACTION * b.area() {
            continue;
        }
        let clipped = b.clipped(w as f64, h as f64);
        if clipped.is_valid() {
            boxes.push(BoxAnnotation {
                category: o.category,
                bbox: clipped,
            });
        }
    }

    if spec.noise_std > 0.0 {
        let n = Normal::new(0.0, spec.noise_std).expect("std is positive");
        for v in img.iter_mut() {
            *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((Tensor::new(&[3, h, w], img)?, boxes))
}

/// Generator for video `index` of a view; `seed` and `index` fully determine it.
pub fn video_rng(seed: u64, view: u32, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((view as u64) << 32) | index as u64);
    rng
}

/// Simulates and renders one video.
pub fn generate_video(spec: &SceneSpec, seed: u64, index: usize) -> Result<Video> {
    spec.validate()?;
    let mut rng = video_rng(seed, spec.view, index);
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut next_instance = 0;
    let mut movers: Vec<Mover> = (0..count)
        .map(|_| {
            next_instance += 1;
            spawn(spec, &mut rng, next_instance - 1, false)
        })
        .collect();
    let dt = 1.0 / spec.fps;
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    for f in 0..spec.frames_per_video {
        if f > 0 {
            for m in movers.iter_mut() {
                m.state.x += m.vx * dt;
                m.state.z += m.vz * dt;
                if has_left(spec, m) {
                    next_instance += 1;
                    *m = spawn(spec, &mut rng, next_instance - 1, true);
                }
            }
        }
        let objects: Vec<ObjectState> = movers.iter().map(|m| m.state).collect();
        let (image, boxes) = render_frame(spec, &objects, &mut rng)?;
        frames.push(AnnotatedFrame {
            view: spec.view,
            frame: f,
            image,
            boxes,
            objects,
        });
    }
    Ok(Video {
        view: spec.view,
        index,
        frames,
    })
}

/// Every video of the dataset, sequentially.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Vec<Video>> {
    spec.validate()?;
    spec.video_keys()
        .into_iter()
        .map(|(v, k)| generate_video(&spec.views[v], seed, k))
        .collect()
}

/// Window of frame indices fed to the network as one clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    pub frames: Vec<usize>,
}

impl Clip {
    pub fn first(&self) -> usize {
        self.frames[0]
    }

    pub fn last(&self) -> usize {
        *self.frames.last().expect("clips are non-empty")
    }
}

/// All windows of `t` frames spaced `stride` apart, one per start frame.
///
/// Returns an empty list when the video is shorter than one window.
pub fn sample_clips(len: usize, t: usize, stride: usize) -> Vec<Clip> {
    let span = (t.max(1) - 1) * stride.max(1);
    if t == 0 || len <= span {
        return Vec::new();
    }
    (0..len - span)
        .map(|s| Clip {
            frames: (0..t).map(|i| s + i * stride.max(1)).collect(),
        })
        .collect()
}

/// Stacks the frames of `clip` into the network input `[3, T, H, W]`.
pub fn clip_tensor<S: Real>(video: &Video, clip: &Clip) -> Result<Tensor<S>> {
    let first = &video.frames[clip.first()].image;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let t = clip.frames.len();
    let mut data = alloc::vec![S::ZERO; 3 * t * h * w];
    for (i, &f) in clip.frames.iter().enumerate() {
        let img = video
            .frames
            .get(f)
            .ok_or_else(|| Error::contract(alloc::format!("clip frame {f} outside video")))?;
        for c in 0..3 {
            let src = &img.image.data()[c * h * w..(c + 1) * h * w];
            let dst = &mut data[(c * t + i) * h * w..(c * t + i + 1) * h * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = S::from_f64(*s as f64);
            }
        }
    }
    Tensor::new(&[3, t, h, w], data)
}
