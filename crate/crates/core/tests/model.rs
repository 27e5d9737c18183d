use std::cell::Cell;
use std::collections::BTreeSet;

use gast_core::autodiff::Graph;
use gast_core::bbox::BBox;
use gast_core::geometry::{GeometryPrior, GeometrySource};
use gast_core::layers::{Ctx, Mode};
use gast_core::losses::{focal_loss, LossConfig};
use gast_core::model::HeadOutputs;
use gast_core::optim::{Adam, AdamConfig};
use gast_core::train::{frame_targets, train_step, TrainSample};
use gast_core::{CornerKind, Error, FrameSlot, GastNet, ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Geometry source that counts how often the network asks for it.
struct Counting {
    tensor: Tensor<f32>,
    reads: Cell<usize>,
}

impl GeometrySource<f32> for Counting {
    fn encoder_input(&self) -> &Tensor<f32> {
        self.reads.set(self.reads.get() + 1);
        &self.tensor
    }
}

fn small_config(mf: bool, gp: bool, gf: bool) -> ModelConfig {
    ModelConfig {
        working_hw: (8, 12),
        ..ModelConfig::ablation(mf, gp, gf)
    }
}

fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[3, t, h, w], |_| rng.random::<f32>())
}

fn geometry(n: usize, h: usize, w: usize) -> Tensor<f32> {
    GeometryPrior::uniform(0, n, h, w).unwrap().encoder_input()
}

#[test]
fn toggles_off_never_touch_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (mf, gp, gf, expect_reads) in [
        (false, false, false, false),
        (true, false, false, false),
        (true, true, false, true),
        (true, true, true, true),
    ] {
        let cfg = small_config(mf, gp, gf);
        let mut store = ParamStore::<f32>::new();
        let net = GastNet::new(cfg.clone(), &mut store, 1).unwrap();
        let src = Counting {
            tensor: geometry(2, 8, 12),
            reads: Cell::new(0),
        };
        let clip = random_clip(&mut rng, cfg.frames(), 32, 48);
        net.infer(&store, &clip, Some(&src)).unwrap();
        assert_eq!(src.reads.get() > 0, expect_reads, "toggles {mf} {gp} {gf}");
        assert_eq!(store.params().iter().any(|p| p.name.starts_with("geometry")), expect_reads);
    }
}

#[test]
fn geometry_model_requires_a_prior() {
    let cfg = small_config(true, true, true);
    let mut store = ParamStore::<f32>::new();
    let net = GastNet::new(cfg, &mut store, 0).unwrap();
    let clip = Tensor::zeros(&[3, 4, 32, 48]);
    assert!(matches!(net.infer(&store, &clip, None), Err(Error::Contract(_))));
    let wrong = geometry(2, 4, 4);
    assert!(matches!(net.infer(&store, &clip, Some(&wrong)), Err(Error::Contract(_))));
}

#[test]
fn forward_is_finite_for_1000_seeds() {
    let cfg = ModelConfig {
        working_hw: (4, 4),
        ..ModelConfig::default()
    };
    let g = geometry(2, 4, 4);
    let mut store = ParamStore::<f32>::new();
    let mut net = GastNet::new(cfg.clone(), &mut store, 0).unwrap();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if seed % 50 == 0 {
            store = ParamStore::new();
            net = GastNet::new(cfg.clone(), &mut store, seed).unwrap();
        }
        let clip = random_clip(&mut rng, 4, 16, 16);
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
        let mut graph = Graph::new();
        let out = net.forward(&mut graph, &store, &clip, Some(&g), mode).unwrap();
        let fields = out.heads.fields(&graph);
        for slot in FrameSlot::ALL {
            for kind in CornerKind::ALL {
                let h = fields.heatmap(slot, kind);
                assert!(h.all_finite() && fields.embedding(slot, kind).all_finite(), "seed {seed}");
                assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0), "seed {seed}");
            }
        }
    }
}

#[test]
fn backbone_shapes_and_divisibility() {
    let cfg = small_config(true, false, false);
    let mut store = ParamStore::<f32>::new();
    let net = GastNet::new(cfg, &mut store, 0).unwrap();
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &store, Mode::Eval);
    let x = ctx.graph.constant(Tensor::zeros(&[3, 4, 32, 48]));
    let feats = net.backbone_forward(&mut ctx, x).unwrap();
    assert_eq!(feats.len(), 3);
    for f in &feats {
        assert_eq!(ctx.graph.value(*f).shape(), &[64, 4, 8, 12]);
    }
    let bad = ctx.graph.constant(Tensor::zeros(&[3, 4, 30, 48]));
    assert!(matches!(net.backbone_forward(&mut ctx, bad), Err(Error::Contract(_))));
}

#[test]
fn head_width_follows_geometry_toggle() {
    let mut store = ParamStore::<f32>::new();
    assert_eq!(GastNet::new(small_config(true, false, false), &mut store, 0).unwrap().head_input_channels(), 64);
    let mut store = ParamStore::<f32>::new();
    assert_eq!(GastNet::new(small_config(true, true, false), &mut store, 0).unwrap().head_input_channels(), 80);
}

#[test]
fn single_frame_projections_see_the_same_slice() {
    let cfg = small_config(false, false, false);
    let mut store = ParamStore::<f32>::new();
    let net = GastNet::new(cfg, &mut store, 3).unwrap();
    // copy the first-frame projection into the last-frame one
    let names: Vec<String> = store
        .params()
        .iter()
        .filter(|p| p.name.starts_with("project.first."))
        .map(|p| p.name.clone())
        .collect();
    assert!(!names.is_empty());
    for name in names {
        let v = store.value(store.find(&name).unwrap()).clone();
        let dst = store.find(&name.replace("project.first.", "project.last.")).unwrap();
        *store.value_mut(dst) = v;
    }
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &store, Mode::Eval);
    let x = ctx.graph.constant(Tensor::from_fn(&[64, 1, 8, 12], |i| (i % 7) as f32 * 0.1));
    let [a, b] = net.project_frames(&mut ctx, x).unwrap();
    assert_eq!(ctx.graph.value(a).shape(), &[64, 8, 12]);
    assert_eq!(ctx.graph.value(a), ctx.graph.value(b));
}

#[test]
fn zero_heads_give_one_half() {
    let cfg = small_config(true, false, false);
    let mut store = ParamStore::<f32>::new();
    let net = GastNet::new(cfg, &mut store, 0).unwrap();
    for slot in FrameSlot::ALL {
        for kind in CornerKind::ALL {
            for name in net.head_param_names(slot, kind) {
                let id = store.find(&name).unwrap();
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
    }
    let fields = net.infer(&store, &Tensor::full(&[3, 4, 32, 48], 0.3), None).unwrap();
    for slot in FrameSlot::ALL {
        for kind in CornerKind::ALL {
            assert!(fields.heatmap(slot, kind).data().iter().all(|&v| v == 0.5));
        }
    }
}

#[test]
fn heads_are_parameter_disjoint() {
    let cfg = small_config(true, true, true);
    let mut store = ParamStore::<f32>::new();
    let net = GastNet::new(cfg, &mut store, 0).unwrap();
    let mut seen = BTreeSet::new();
    let g = geometry(2, 8, 12);
    let clip = Tensor::full(&[3, 4, 32, 48], 0.5);
    let target = frame_targets::<f32>(&[(0, BBox::new(8.0, 8.0, 24.0, 30.0))], 2, (8, 12), &LossConfig::default()).unwrap();
    for slot in FrameSlot::ALL {
        for kind in CornerKind::ALL {
            let names = net.head_param_names(slot, kind);
            for n in &names {
                assert!(store.find(n).is_some(), "{n}");
                assert!(seen.insert(n.clone()), "{n} shared");
            }
            // a loss on one head reaches its own parameters and no other head's
            let mut graph = Graph::new();
            let out = net.forward(&mut graph, &store, &clip, Some(&g), Mode::Train).unwrap();
            let heads: &HeadOutputs = &out.heads;
            let l = focal_loss(&mut graph, heads.logits(slot, kind), target.heatmap(kind), &LossConfig::default()).unwrap();
            graph.backward(l).unwrap();
            for (id, _) in graph.param_grads() {
                let name = store.name(id);
                if name.starts_with("heads.") {
                    assert!(names.iter().any(|n| n == name), "{name} reached from {slot:?}/{kind:?}");
                }
            }
        }
    }
    assert_eq!(seen.len(), 8);
}

fn run_steps(seed: u64, steps: usize) -> ParamStore<f32> {
    let cfg = small_config(true, true, true);
    let mut store = ParamStore::<f32>::new();
    let net = GastNet::new(cfg, &mut store, seed).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let g = geometry(2, 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lc = LossConfig::default();
    for _ in 0..steps {
        let batch: Vec<TrainSample<'_, f32>> = (0..2)
            .map(|_| {
                let t = frame_targets(&[(1, BBox::new(4.0, 6.0, 20.0, 28.0))], 2, (8, 12), &lc).unwrap();
                TrainSample {
                    clip: random_clip(&mut rng, 4, 32, 48),
                    targets: [t.clone(), t],
                    geometry: Some(&g as &dyn GeometrySource<f32>),
                }
            })
            .collect();
        train_step(&net, &mut store, &mut adam, &batch, &lc).unwrap();
    }
    store
}

#[test]
fn training_is_bit_reproducible() {
    let a = run_steps(5, 3);
    let b = run_steps(5, 3);
    assert_eq!(a.to_entries(), b.to_entries());
    let c = run_steps(6, 3);
    assert_ne!(a.to_entries(), c.to_entries());
}
