//! One optimisation step over a batch of clips.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::geometry::GeometrySource;
use crate::layers::{apply_bn_updates, BnUpdate, Mode};
use crate::losses::{make_targets, total_loss, HeatmapTarget, LossConfig};
use crate::model::{GastNet, OUTPUT_STRIDE};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Loss components of one step, averaged over the clips of the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub focal: f64,
    pub pull: f64,
    pub push: f64,
    pub total: f64,
}

impl StepLoss {
    pub fn is_finite(&self) -> bool {
        self.focal.is_finite() && self.pull.is_finite() && self.push.is_finite() && self.total.is_finite()
    }
}

/// A clip with the corner targets of its first and last frame.
pub struct TrainSample<'a, S: Real> {
    pub clip: Tensor<S>,
    pub targets: [HeatmapTarget<S>; 2],
    pub geometry: Option<&'a dyn GeometrySource<S>>,
}

/// Targets for boxes given in input pixels `(category, box)`.
pub fn frame_targets<S: Real>(
    boxes: &[(usize, BBox)],
    num_categories: usize,
    working_hw: (usize, usize),
    cfg: &LossConfig,
) -> Result<HeatmapTarget<S>> {
    let scaled: Vec<(usize, BBox)> = boxes
        .iter()
        .map(|&(c, b)| (c, b.scaled(1.0 / OUTPUT_STRIDE as f64)))
        .collect();
    make_targets(&scaled, num_categories, working_hw, cfg)
}

/// Forward and backward on one clip; gradients scaled by `weight` are added
/// to the store.
pub fn accumulate_clip<S: Real>(
    net: &GastNet,
    store: &mut ParamStore<S>,
    sample: &TrainSample<'_, S>,
    cfg: &LossConfig,
    weight: f64,
) -> Result<(StepLoss, Vec<BnUpdate<S>>)> {
    let mut graph = Graph::new();
    let out = net.forward(&mut graph, store, &sample.clip, sample.geometry, Mode::Train)?;
    let terms = total_loss(&mut graph, &out.heads, &sample.targets, cfg)?;
    let total = graph.value(terms.total).item().to_f64();
    let loss = StepLoss {
        focal: terms.focal,
        pull: terms.pull,
        push: terms.push,
        total,
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient(alloc::format!("loss {total}")));
    }
    graph.backward(terms.total)?;
    let w = S::from_f64(weight);
    let grads: Vec<_> = graph
        .param_grads()
        .map(|(id, g)| (id, g.iter().map(|&v| v * w).collect::<Vec<S>>()))
        .collect();
    for (id, g) in grads {
        store.accumulate_grad(id, &g);
    }
    Ok((loss, out.bn_updates))
}

/// Averages gradients over `batch` in order, takes one Adam step and folds
/// the batch-norm statistics into the running estimates.
///
/// On a non-finite loss or gradient nothing is modified.
pub fn train_step<S: Real>(
    net: &GastNet,
    store: &mut ParamStore<S>,
    adam: &mut Adam<S>,
    batch: &[TrainSample<'_, S>],
    cfg: &LossConfig,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    store.zero_grads();
    let weight = 1.0 / batch.len() as f64;
    let mut mean = StepLoss::default();
    let mut updates = Vec::new();
    for sample in batch {
        let (l, u) = accumulate_clip(net, store, sample, cfg, weight)?;
        mean.focal += l.focal * weight;
        mean.pull += l.pull * weight;
        mean.push += l.push * weight;
        mean.total += l.total * weight;
        updates.extend(u);
    }
    adam.step(store)?;
    apply_bn_updates(store, &updates);
    Ok(mean)
}
