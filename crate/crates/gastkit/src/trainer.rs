//! Training loop: clip sampling, ordered gradient accumulation, per-epoch
//! checkpoints and a CSV loss log.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use gast_core::geometry::GeometrySource;
use gast_core::optim::Adam;
use gast_core::synth::{clip_tensor, sample_clips, Clip, Split, Video};
use gast_core::train::{frame_targets, train_step, StepLoss, TrainSample};
use gast_core::{GastNet, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::FileAudit;
use crate::checkpoint::{self, TrainState, FINAL_CHECKPOINT};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::{io, prior};

pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const AUDIT_FILE: &str = "file_access.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub focal: f64,
    pub pull: f64,
    pub push: f64,
    pub total: f64,
}

impl LossRow {
    fn new(step: usize, l: &StepLoss) -> Self {
        LossRow {
            step,
            focal: l.focal,
            pull: l.pull,
            push: l.push,
            total: l.total,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub losses: Vec<LossRow>,
}

/// Model input for each training video: frames, priors and clip list.
pub struct TrainData {
    pub videos: Vec<Video>,
    /// Index into `geometry` per video (unused without geometry).
    pub view_slot: Vec<usize>,
    /// Encoder input per view, empty when the model ignores geometry.
    pub geometry: Vec<Tensor<f32>>,
    pub clips: Vec<(usize, Clip)>,
}

/// Opens the dataset, builds the model and checks the two agree.
pub fn check_compat(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let hw = prior::working_hw(ds)?;
    if cfg.model.working_hw != hw {
        return Err(Error::Contract(format!(
            "model working resolution {:?} does not match dataset {:?}",
            cfg.model.working_hw, hw
        )));
    }
    if cfg.model.categories != ds.num_categories() {
        return Err(Error::Contract(format!(
            "model has {} categories, dataset {}",
            cfg.model.categories,
            ds.num_categories()
        )));
    }
    Ok(())
}

/// Priors for `views`, read only when the model consumes geometry.
pub fn load_geometry(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Tensor<f32>>> {
    if !cfg.model.uses_geometry() {
        return Ok(Vec::new());
    }
    let priors = prior::load(
        &cfg.priors_dir(),
        &ds.manifest().views,
        ds.num_categories(),
        cfg.model.working_hw,
        ds.audit(),
    )?;
    Ok(priors.iter().map(|p| p.encoder_input::<f32>()).collect())
}

pub fn view_slot(ds: &Dataset, view: u32) -> usize {
    ds.manifest()
        .views
        .iter()
        .position(|&v| v == view)
        .expect("manifest lists every view")
}

pub fn load_train_data(cfg: &RunConfig, ds: &Dataset) -> Result<TrainData> {
    let geometry = load_geometry(cfg, ds)?;
    let t = cfg.model.frames();
    let mut videos = Vec::new();
    let mut slots = Vec::new();
    let mut clips = Vec::new();
    for entry in ds.videos(Split::Train) {
        let video = ds.load_video(entry)?;
        let cs = sample_clips(video.frames.len(), t, cfg.clip_stride);
        if cs.is_empty() {
            log::warn!("{}: too short for {t}-frame clips, skipped", entry.dir);
            continue;
        }
        clips.extend(cs.into_iter().map(|c| (videos.len(), c)));
        slots.push(view_slot(ds, entry.view));
        videos.push(video);
    }
    if clips.is_empty() {
        return Err(Error::Data("training split yields no clips".into()));
    }
    Ok(TrainData {
        videos,
        view_slot: slots,
        geometry,
        clips,
    })
}

impl TrainData {
    pub fn sample(&self, cfg: &RunConfig, index: usize) -> Result<TrainSample<'_, f32>> {
        let (v, clip) = &self.clips[index];
        let video = &self.videos[*v];
        let targets = |f: usize| {
            let boxes: Vec<_> = video.frames[f].boxes.iter().map(|b| (b.category, b.bbox)).collect();
            frame_targets(&boxes, cfg.model.categories, cfg.model.working_hw, &cfg.loss)
        };
        Ok(TrainSample {
            clip: clip_tensor(video, clip)?,
            targets: [targets(clip.first())?, targets(clip.last())?],
            geometry: self
                .geometry
                .get(self.view_slot[*v])
                .map(|g| g as &dyn GeometrySource<f32>),
        })
    }
}

/// Clip order of one epoch; depends only on the seed and the epoch number.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,focal,pull,push,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.focal, r.pull, r.push, r.total);
    }
    s
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}: bad row {l:?}", path.display())))
            };
            Ok(LossRow {
                step: num(0)? as usize,
                focal: num(1)?,
                pull: num(2)?,
                push: num(3)?,
                total: num(4)?,
            })
        })
        .collect()
}

/// Builds the model and parameter store for `cfg`.
pub fn build_model(cfg: &RunConfig) -> Result<(GastNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = GastNet::new(cfg.model.clone(), &mut store, cfg.seed)?;
    Ok((net, store))
}

/// Runs (or resumes) training as configured. Every epoch ends with a
/// checkpoint; the last one is also written as `final.ckpt`.
pub fn train(cfg: &RunConfig, audit: Arc<FileAudit>, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset, audit.clone())?;
    check_compat(cfg, &ds)?;
    let data = load_train_data(cfg, &ds)?;
    let (net, mut store) = build_model(cfg)?;
    let mut adam = Adam::new(cfg.optimizer);
    let out = &cfg.out;
    let ckpt_dir = checkpoint::checkpoint_dir(out);
    io::create_dir(&ckpt_dir)?;
    cfg.save(&out.join(CONFIG_FILE))?;

    let mut state = TrainState::default();
    let mut losses = Vec::new();
    if resume {
        state = checkpoint::read_state(out)?;
        if let Some(name) = &state.checkpoint {
            checkpoint::load(&ckpt_dir.join(name), &mut store, Some(&mut adam))?;
        }
        let log = out.join(LOSS_LOG);
        if log.exists() {
            losses = read_loss_log(&log)?;
            losses.retain(|r| r.step <= state.step);
        }
        state.aborted = None;
        log::info!("resuming after epoch {} (step {})", state.epoch, state.step);
    }

    let n = data.clips.len();
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(n.div_ceil(cfg.batch_size));
    for epoch in state.epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, n);
        for s in 0..steps_per_epoch {
            let batch = (0..cfg.batch_size)
                .map(|i| data.sample(cfg, order[(s * cfg.batch_size + i) % n]))
                .collect::<Result<Vec<_>>>()?;
            match train_step(&net, &mut store, &mut adam, &batch, &cfg.loss) {
                Ok(l) => {
                    state.step += 1;
                    losses.push(LossRow::new(state.step, &l));
                    if state.step % 25 == 0 {
                        log::info!("epoch {} step {} loss {:.4}", epoch + 1, state.step, l.total);
                    }
                }
                Err(gast_core::Error::NonFiniteGradient(what)) => {
                    state.aborted = Some(format!("non-finite value at step {}: {what}", state.step + 1));
                    checkpoint::write_state(out, &state)?;
                    io::write_atomic(&out.join(LOSS_LOG), loss_csv(&losses).as_bytes())?;
                    return Err(Error::Data(format!(
                        "training aborted: {}; last good checkpoint kept",
                        state.aborted.as_deref().unwrap_or_default()
                    )));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let name = checkpoint::epoch_name(epoch + 1);
        checkpoint::save(&ckpt_dir.join(&name), &store, &adam)?;
        state.epoch = epoch + 1;
        state.checkpoint = Some(name);
        checkpoint::write_state(out, &state)?;
        io::write_atomic(&out.join(LOSS_LOG), loss_csv(&losses).as_bytes())?;
    }
    checkpoint::save(&ckpt_dir.join(FINAL_CHECKPOINT), &store, &adam)?;
    state.checkpoint = Some(FINAL_CHECKPOINT.into());
    state.is_final = true;
    checkpoint::write_state(out, &state)?;
    io::write_atomic(&out.join(LOSS_LOG), loss_csv(&losses).as_bytes())?;
    audit.save(&out.join(AUDIT_FILE))?;
    Ok(TrainOutcome { state, losses })
}
