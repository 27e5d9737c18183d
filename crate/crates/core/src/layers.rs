//! Parameter bundles for the layers the network is built from, and the
//! forward context that threads graph, parameters and batch-norm mode.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::Result;
use crate::params::{kaiming_normal, BufferId, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running estimates are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate<S> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub stats: BatchStats<S>,
}

/// Blends observed batch statistics into the running estimates.
pub fn apply_bn_updates<S: Real>(store: &mut ParamStore<S>, updates: &[BnUpdate<S>]) {
    let mom = S::from_f64(BN_MOMENTUM);
    for u in updates {
        for (r, &m) in store.buffer_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (S::ONE - mom) * *r + mom * m;
        }
        for (r, &v) in store.buffer_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (S::ONE - mom) * *r + mom * v;
        }
    }
}

pub struct Ctx<'a, S: Real> {
    pub graph: &'a mut Graph<S>,
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<S>>,
}

impl<'a, S: Real> Ctx<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, store: &'a ParamStore<S>, mode: Mode) -> Self {
        Ctx {
            graph,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Planar,
    Volumetric,
}

/// Convolution weights plus optional bias. Padding keeps spatial size
/// ("same") for odd kernels at stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    kind: ConvKind,
    pad: [usize; 3],
}

impl Conv {
    pub fn new2d<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(alloc::format!("{name}.weight"), kaiming_normal(&[cout, cin, k, k], rng))?;
        let bias = if bias {
            Some(store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            kind: ConvKind::Planar,
            pad: [0, k / 2, k / 2],
        })
    }

    pub fn new3d<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            kaiming_normal(&[cout, cin, k[0], k[1], k[2]], rng),
        )?;
        let bias = if bias {
            Some(store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            kind: ConvKind::Volumetric,
            pad: [k[0] / 2, k[1] / 2, k[2] / 2],
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        match self.kind {
            ConvKind::Planar => ctx.graph.conv2d(x, w, b, 1, self.pad[1]),
            ConvKind::Volumetric => ctx.graph.conv3d(x, w, b, [1, 1, 1], self.pad),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(alloc::format!("{name}.gamma"), Tensor::full(&[channels], S::ONE))?,
            beta: store.add(alloc::format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(alloc::format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(alloc::format!("{name}.running_var"), Tensor::full(&[channels], S::ONE))?,
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = S::from_f64(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, eps)?;
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.buffer(self.running_mean).data().to_vec();
                let var = ctx.store.buffer(self.running_var).data().to_vec();
                ctx.graph.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new2d<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv::new2d(store, &alloc::format!("{name}.conv"), cin, cout, k, false, rng)?,
            bn: BatchNorm::new(store, &alloc::format!("{name}.bn"), cout)?,
        })
    }

    pub fn new3d<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv::new3d(store, &alloc::format!("{name}.conv"), cin, cout, k, false, rng)?,
            bn: BatchNorm::new(store, &alloc::format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.relu(y))
    }
}

/// Dotted parameter path helper: `join("backbone", "stage1")`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        alloc::format!("{prefix}.{name}")
    }
}
