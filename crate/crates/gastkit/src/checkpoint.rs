//! Checkpoints: model parameters, batch-norm buffers and optimizer moments
//! in one tensor archive, plus a small JSON state file per run.

use std::path::{Path, PathBuf};

use gast_core::optim::Adam;
use gast_core::params::{decode_archive, encode_archive};
use gast_core::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const STATE_FILE: &str = "state.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    /// Latest good checkpoint, relative to the checkpoint directory.
    pub checkpoint: Option<String>,
    #[serde(rename = "final")]
    pub is_final: bool,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn epoch_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

pub fn save(path: &Path, store: &ParamStore<f32>, adam: &Adam<f32>) -> Result<()> {
    let mut entries = store.to_entries();
    entries.extend(adam.to_entries(store));
    io::write_atomic(path, &encode_archive(&entries))
}

/// Restores parameters and buffers, and the optimizer when given.
pub fn load(path: &Path, store: &mut ParamStore<f32>, adam: Option<&mut Adam<f32>>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_archive::<f32>(&bytes)?;
    store.load_entries(&entries)?;
    if let Some(adam) = adam {
        adam.load_entries(store, &entries)?;
    }
    Ok(())
}

pub fn read_state(out: &Path) -> Result<TrainState> {
    io::read_json(&checkpoint_dir(out).join(STATE_FILE))
}

pub fn write_state(out: &Path, state: &TrainState) -> Result<()> {
    io::write_json(&checkpoint_dir(out).join(STATE_FILE), state)
}
