//! Central finite-difference checks of every differentiable graph operation,
//! the composite layers and the full network, in double precision.

#![allow(dead_code)]

use gast_core::autodiff::{Graph, Var};
use gast_core::bbox::BBox;
use gast_core::geometry::{GeometryPrior, GeometrySource, PseudoDepthMap};
use gast_core::layers::{Ctx, Mode};
use gast_core::losses::{make_targets, total_loss, LossConfig};
use gast_core::model::fuse_scales;
use gast_core::{GastNet, ModelConfig, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const MIN_INSTANCES: usize = 20;
/// Gradients smaller than this are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Sampled coordinates rejected because a kink lay inside the step.
    pub kinks: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.instances >= MIN_INSTANCES && self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random problem: leaf inputs plus the function of them under test.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares the gradient of `Σ R ⊙ f(inputs)` (fixed random `R`) with central
/// differences at every input coordinate. Returns `(max error, coordinates)`.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (inst.f)(&mut g, &vars)?;
    let weights = uniform(rng, g.value(out).shape(), -1.0, 1.0);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    g.backward(loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inst.inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (inst.f)(&mut g, &vars)?;
        Ok(dot(g.value(out), &weights))
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut inputs = inst.inputs.clone();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            inputs[i].data_mut()[k] = x0 + STEP;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[k] = x0 - STEP;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[i].data()[k], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn run(name: &'static str, instances: usize, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Instance) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..instances {
        let inst = make(&mut rng);
        let (e, n) = check_instance(&inst, &mut rng)?;
        worst = worst.max(e);
        coordinates += n;
    }
    Ok(GradReport {
        name,
        instances,
        coordinates,
        max_rel_err: worst,
        kinks: 0,
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn shape(rng: &mut ChaCha8Rng, rank: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| dim(rng, 1, hi)).collect()
}

/// Values bounded away from zero with random sign, for kink-free ReLU checks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Instance {
    let rank = dim(rng, 1, 4);
    let full = shape(rng, rank, 4);
    // broadcast one operand over a random subset of axes
    let mut small = full.clone();
    if rng.random_bool(0.5) {
        for d in small.iter_mut() {
            if rng.random_bool(0.5) {
                *d = 1;
            }
        }
    }
    let (a, b) = if rng.random_bool(0.5) { (full, small) } else { (small, full) };
    Instance {
        inputs: vec![uniform(rng, &a, -1.0, 1.0), uniform(rng, &b, -1.0, 1.0)],
        f: Box::new(move |g, v| op(g, v[0], v[1])),
    }
}

/// Every primitive operation of the tape.
pub fn primitive_ops(instances: usize) -> Result<Vec<GradReport>> {
    let mut reports = vec![
        run("add", instances, 1, |r| binary(r, |g, a, b| g.add(a, b)))?,
        run("sub", instances, 2, |r| binary(r, |g, a, b| g.sub(a, b)))?,
        run("mul", instances, 3, |r| binary(r, |g, a, b| g.mul(a, b)))?,
        run("scale", instances, 4, |r| {
            let s = r.random_range(-2.0..2.0);
            let sh = shape(r, 3, 4);
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(move |g, v| Ok(g.scale(v[0], s))),
            }
        })?,
        run("add_scalar", instances, 5, |r| {
            let s = r.random_range(-2.0..2.0);
            let sh = shape(r, 3, 4);
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(move |g, v| Ok(g.add_scalar(v[0], s))),
            }
        })?,
        run("sum", instances, 6, |r| {
            let sh = shape(r, 3, 4);
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(|g, v| Ok(g.sum(v[0]))),
            }
        })?,
        run("mean", instances, 7, |r| {
            let sh = shape(r, 3, 4);
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(|g, v| Ok(g.mean(v[0]))),
            }
        })?,
        run("mean_axis", instances, 8, |r| {
            let rank = dim(r, 1, 4);
            let sh = shape(r, rank, 4);
            let axis = r.random_range(0..rank);
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(move |g, v| g.mean_axis(v[0], axis)),
            }
        })?,
        run("relu", instances, 9, |r| {
            let sh = shape(r, 3, 5);
            Instance {
                inputs: vec![off_zero(r, &sh)],
                f: Box::new(|g, v| Ok(g.relu(v[0]))),
            }
        })?,
        run("sigmoid", instances, 10, |r| {
            let sh = shape(r, 3, 5);
            Instance {
                inputs: vec![uniform(r, &sh, -4.0, 4.0)],
                f: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
            }
        })?,
        run("softmax", instances, 11, |r| {
            let rank = dim(r, 1, 3);
            let sh = shape(r, rank, 4);
            let axis = r.random_range(0..rank);
            Instance {
                inputs: vec![uniform(r, &sh, -3.0, 3.0)],
                f: Box::new(move |g, v| g.softmax(v[0], axis)),
            }
        })?,
        run("concat", instances, 12, |r| {
            let rank = dim(r, 1, 3);
            let axis = r.random_range(0..rank);
            let parts = dim(r, 1, 3);
            let base = shape(r, rank, 3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = dim(r, 1, 3);
                    uniform(r, &s, -1.0, 1.0)
                })
                .collect();
            Instance {
                inputs,
                f: Box::new(move |g, v| g.concat(v, axis)),
            }
        })?,
        run("narrow", instances, 13, |r| {
            let rank = dim(r, 1, 3);
            let sh: Vec<usize> = (0..rank).map(|_| dim(r, 2, 5)).collect();
            let axis = r.random_range(0..rank);
            let start = r.random_range(0..sh[axis]);
            let len = r.random_range(1..=sh[axis] - start);
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(move |g, v| g.narrow(v[0], axis, start, len)),
            }
        })?,
        run("reshape", instances, 14, |r| {
            let sh = shape(r, 3, 4);
            let n: usize = sh.iter().product();
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(move |g, v| g.reshape(v[0], &[n])),
            }
        })?,
        run("gather", instances, 15, |r| {
            let sh = shape(r, 2, 5);
            let n: usize = sh.iter().product();
            let k = dim(r, 1, 6);
            // repeated indices accumulate
            let idx: Vec<usize> = (0..k).map(|_| r.random_range(0..n)).collect();
            Instance {
                inputs: vec![uniform(r, &sh, -1.0, 1.0)],
                f: Box::new(move |g, v| g.gather(v[0], &idx)),
            }
        })?,
        run("resize_bilinear", instances, 16, |r| {
            let c = dim(r, 1, 2);
            let (h, w) = (dim(r, 1, 5), dim(r, 1, 5));
            let (oh, ow) = (dim(r, 1, 7), dim(r, 1, 7));
            Instance {
                inputs: vec![uniform(r, &[c, h, w], -1.0, 1.0)],
                f: Box::new(move |g, v| g.resize_bilinear(v[0], oh, ow)),
            }
        })?,
        run("upsample_bilinear", instances, 17, |r| {
            let (c, t) = (dim(r, 1, 2), dim(r, 1, 2));
            let (h, w) = (dim(r, 1, 4), dim(r, 1, 4));
            let factor = dim(r, 1, 3);
            Instance {
                inputs: vec![uniform(r, &[c, t, h, w], -1.0, 1.0)],
                f: Box::new(move |g, v| g.upsample_bilinear(v[0], factor)),
            }
        })?,
        run("maxpool2d", instances, 18, |r| {
            let c = dim(r, 1, 2);
            let (h, w) = (dim(r, 2, 6), dim(r, 2, 6));
            let k = dim(r, 1, 2);
            let s = dim(r, 1, 2);
            // distinct values keep the argmax unique under perturbation
            let n = c * h * w;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            shuffle(r, &mut vals);
            Instance {
                inputs: vec![Tensor::new(&[c, h, w], vals).unwrap()],
                f: Box::new(move |g, v| g.maxpool2d(v[0], k, s)),
            }
        })?,
        run("maxpool3d", instances, 19, |r| {
            let c = dim(r, 1, 2);
            let (t, h, w) = (dim(r, 1, 3), dim(r, 2, 5), dim(r, 2, 5));
            let kernel = [dim(r, 1, t.min(2)), dim(r, 1, 2), dim(r, 1, 2)];
            let stride = [dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2)];
            let n = c * t * h * w;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            shuffle(r, &mut vals);
            Instance {
                inputs: vec![Tensor::new(&[c, t, h, w], vals).unwrap()],
                f: Box::new(move |g, v| g.maxpool3d(v[0], kernel, stride)),
            }
        })?,
        run("conv2d", instances, 20, |r| {
            let (cin, cout) = (dim(r, 1, 3), dim(r, 1, 3));
            let k = [1, 3][r.random_range(0..2)];
            let (h, w) = (dim(r, k, 6), dim(r, k, 6));
            let stride = dim(r, 1, 2);
            let pad = if k == 3 { r.random_range(0..=1) } else { 0 };
            let bias = r.random_bool(0.5);
            let mut inputs = vec![uniform(r, &[cin, h, w], -1.0, 1.0), uniform(r, &[cout, cin, k, k], -1.0, 1.0)];
            if bias {
                inputs.push(uniform(r, &[cout], -1.0, 1.0));
            }
            Instance {
                inputs,
                f: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
            }
        })?,
        run("conv3d", instances, 21, |r| {
            let (cin, cout) = (dim(r, 1, 2), dim(r, 1, 3));
            let kt = [1, 3][r.random_range(0..2)];
            let k = [1, 3][r.random_range(0..2)];
            let t = dim(r, 1, 3);
            let (h, w) = (dim(r, k, 5), dim(r, k, 5));
            let pad = [kt / 2, if k == 3 { r.random_range(0..=1) } else { 0 }, k / 2];
            let stride = [1, dim(r, 1, 2), dim(r, 1, 2)];
            let bias = r.random_bool(0.5);
            let mut inputs = vec![
                uniform(r, &[cin, t, h, w], -1.0, 1.0),
                uniform(r, &[cout, cin, kt, k, k], -1.0, 1.0),
            ];
            if bias {
                inputs.push(uniform(r, &[cout], -1.0, 1.0));
            }
            Instance {
                inputs,
                f: Box::new(move |g, v| g.conv3d(v[0], v[1], v.get(2).copied(), stride, pad)),
            }
        })?,
        run("batch_norm_train", instances, 22, |r| {
            let c = dim(r, 1, 3);
            let sh = [c, dim(r, 1, 2), dim(r, 2, 4), dim(r, 2, 4)];
            Instance {
                inputs: vec![
                    uniform(r, &sh, -1.0, 1.0),
                    uniform(r, &[c], 0.5, 1.5),
                    uniform(r, &[c], -0.5, 0.5),
                ],
                f: Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
            }
        })?,
        run("batch_norm_eval", instances, 23, |r| {
            let c = dim(r, 1, 3);
            let sh = [c, dim(r, 2, 4), dim(r, 2, 4)];
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            Instance {
                inputs: vec![
                    uniform(r, &sh, -1.0, 1.0),
                    uniform(r, &[c], 0.5, 1.5),
                    uniform(r, &[c], -0.5, 0.5),
                ],
                f: Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
            }
        })?,
        run("focal_loss", instances, 24, |r| {
            let sh = [dim(r, 1, 2), dim(r, 2, 5), dim(r, 2, 5)];
            let mut target = uniform(r, &sh, 0.0, 0.95);
            let n = target.len();
            for _ in 0..dim(r, 0, 2) {
                target.data_mut()[r.random_range(0..n)] = 1.0;
            }
            Instance {
                inputs: vec![uniform(r, &sh, -3.0, 3.0)],
                f: Box::new(move |g, v| g.focal_loss_logits(v[0], &target, 2.0, 4.0)),
            }
        })?,
        run("push_loss", instances, 25, |r| {
            let k = dim(r, 1, 6);
            Instance {
                inputs: vec![uniform(r, &[k], -1.0, 1.0), uniform(r, &[k], -1.0, 1.0)],
                f: Box::new(|g, v| g.push_loss(v[0], v[1], 1.0)),
            }
        })?,
    ];
    reports.push(run("fuse_scales", instances, 26, |r| {
        let s = dim(r, 1, 3);
        let (c, t, h, w) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
        let mut inputs: Vec<Tensor<f64>> = (0..s).map(|_| uniform(r, &[c, t, h, w], -1.0, 1.0)).collect();
        inputs.push(uniform(r, &[s, h, w], -2.0, 2.0));
        Instance {
            inputs,
            f: Box::new(move |g, v| {
                let a = g.softmax(v[s], 0)?;
                fuse_scales(g, &v[..s], Some(a))
            }),
        }
    })?);
    Ok(reports)
}

fn shuffle(rng: &mut ChaCha8Rng, v: &mut [f64]) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Largest share of sampled coordinates the kink screen may reject.
pub const MAX_KINK_FRACTION: f64 = 0.1;

/// Outcome of a parameter spot check.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose finite difference was not stable between `STEP`
    /// and `STEP / 2`: a ReLU or max-pool boundary lies inside the step.
    pub kinks: usize,
}

/// Spot-checks parameter gradients of a scalar objective built from `store`.
///
/// Deep ReLU networks put some activation within `STEP` of zero for a few
/// coordinates, where the central difference stops being a valid oracle.
/// Those are detected from the numeric side alone (the two step sizes
/// disagree) and replaced by fresh samples.
fn check_params(
    store: &mut ParamStore<f64>,
    coords: usize,
    rng: &mut ChaCha8Rng,
    objective: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<ParamCheck> {
    let mut g = Graph::new();
    let loss = objective(&mut g, store)?;
    g.backward(loss)?;
    let grads: Vec<(gast_core::params::ParamId, Vec<f64>)> =
        g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect();
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = objective(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let central = |store: &mut ParamStore<f64>, id, k: usize, h: f64| -> Result<f64> {
        let x0 = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = x0 + h;
        let up = value(store)?;
        store.value_mut(id).data_mut()[k] = x0 - h;
        let down = value(store)?;
        store.value_mut(id).data_mut()[k] = x0;
        Ok((up - down) / (2.0 * h))
    };
    let mut out = ParamCheck::default();
    while out.checked < coords {
        let (id, grad) = &grads[rng.random_range(0..grads.len())];
        let k = rng.random_range(0..grad.len());
        let numeric = central(store, *id, k, STEP)?;
        let half = central(store, *id, k, STEP / 2.0)?;
        if rel_err(numeric, half) > 0.1 * TOLERANCE {
            out.kinks += 1;
            if out.kinks as f64 > MAX_KINK_FRACTION * coords as f64 {
                out.max_rel_err = f64::INFINITY;
                return Ok(out);
            }
            continue;
        }
        out.max_rel_err = out.max_rel_err.max(rel_err(grad[k], numeric));
        out.checked += 1;
    }
    Ok(out)
}

/// Random positive prior at `(h, w)` for `n` categories.
pub fn random_geometry(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let maps = (0..n)
        .map(|c| {
            let rows = (0..h).map(|_| rng.random_range(0.5..(h as f64))).collect();
            PseudoDepthMap::from_rows(0, c as u32, w, rows).unwrap()
        })
        .collect();
    GeometryPrior::new(0, maps).unwrap().encoder_input()
}

pub const MODEL_COORDS: usize = 30;

/// Full training objective of the network (all three toggles on) on random
/// `3x2x16x16` clips with two categories.
pub fn full_model(instances: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut total = ParamCheck::default();
    let cfg = ModelConfig {
        clip_len: 2,
        categories: 2,
        working_hw: (4, 4),
        ..ModelConfig::default()
    };
    let loss_cfg = LossConfig::default();
    for i in 0..instances {
        let mut store = ParamStore::new();
        let net = GastNet::new(cfg.clone(), &mut store, i as u64)?;
        let clip = uniform(&mut rng, &[3, 2, 16, 16], 0.0, 1.0);
        let geometry = random_geometry(&mut rng, 2, 4, 4);
        let boxes = [
            (0, BBox::new(0.3, 0.2, 2.6, 3.1)),
            (1, BBox::new(1.2, 0.9, 3.4, 2.8)),
        ];
        let targets = [
            make_targets::<f64>(&boxes, 2, (4, 4), &loss_cfg)?,
            make_targets::<f64>(&boxes[..1], 2, (4, 4), &loss_cfg)?,
        ];
        let objective = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> Result<Var> {
            let out = net.forward(g, store, &clip, Some(&geometry as &dyn GeometrySource<f64>), Mode::Train)?;
            Ok(total_loss(g, &out.heads, &targets, &loss_cfg)?.total)
        };
        let c = check_params(&mut store, MODEL_COORDS, &mut rng, &objective)?;
        total.max_rel_err = total.max_rel_err.max(c.max_rel_err);
        total.checked += c.checked;
        total.kinks += c.kinks;
    }
    Ok(GradReport {
        name: "full_model",
        instances,
        coordinates: total.checked,
        max_rel_err: total.max_rel_err,
        kinks: total.kinks,
    })
}

/// Geometry encoder plus frame projection with batch statistics, all
/// parameters checked.
pub fn encoder_and_projection(instances: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = ParamCheck::default();
    let cfg = ModelConfig {
        clip_len: 3,
        categories: 1,
        working_hw: (4, 4),
        base_channels: 4,
        fused_channels: 8,
        ..ModelConfig::default()
    };
    for i in 0..instances {
        let mut store = ParamStore::new();
        let net = GastNet::new(cfg.clone(), &mut store, 1000 + i as u64)?;
        let fused = uniform(&mut rng, &[8, 3, 4, 4], -1.0, 1.0);
        let geometry = random_geometry(&mut rng, 1, 4, 4);
        let wf = uniform(&mut rng, &[2, 8, 4, 4], -1.0, 1.0);
        let wa = uniform(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let objective = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> Result<Var> {
            let mut ctx = Ctx::new(g, store, Mode::Train);
            let x = ctx.graph.constant(fused.clone());
            let frames = net.project_frames(&mut ctx, x)?;
            let enc = net.geometry_encoder().expect("geometry encoder");
            let gi = ctx.graph.constant(geometry.clone());
            let t = enc.encode(&mut ctx, gi)?;
            let a = enc.attention(&mut ctx, t)?;
            let both = ctx.graph.concat(&frames, 0)?;
            let wf = ctx.graph.constant(wf.clone().reshape(&[16, 4, 4])?);
            let wa = ctx.graph.constant(wa.clone());
            let p = ctx.graph.mul(both, wf)?;
            let q = ctx.graph.mul(a, wa)?;
            let (p, q) = (ctx.graph.sum(p), ctx.graph.sum(q));
            ctx.graph.add(p, q)
        };
        let c = check_params(&mut store, 60, &mut rng, &objective)?;
        total.max_rel_err = total.max_rel_err.max(c.max_rel_err);
        total.checked += c.checked;
        total.kinks += c.kinks;
    }
    Ok(GradReport {
        name: "encoder_and_projection",
        instances,
        coordinates: total.checked,
        max_rel_err: total.max_rel_err,
        kinks: total.kinks,
    })
}

pub fn all(instances: usize) -> Result<Vec<GradReport>> {
    let mut reports = primitive_ops(instances)?;
    reports.push(encoder_and_projection(instances)?);
    reports.push(full_model(instances)?);
    Ok(reports)
}
