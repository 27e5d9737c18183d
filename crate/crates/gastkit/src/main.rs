use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gast_core::synth::{DatasetSpec, Split};
use gast_core::ModelConfig;
use gastkit::audit::FileAudit;
use gastkit::config::RunConfig;
use gastkit::dataset::{self, Dataset, ImageFormat};
use gastkit::error::{Error, Result};
use gastkit::infer::{self, CornerRecord, DetectionRecord};
use gastkit::{checkpoint, evaluate, io, plot, prior, trainer};

#[derive(Parser)]
#[command(name = "gastkit", version, about = "Geometry-aware corner detection for static-camera video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON config file (dataset spec for gen-data, run config otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (output file for plot-pr).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Png,
    F32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    /// Single-frame corner network.
    Single,
    /// Multi-frame, no geometry.
    Multi,
    /// Multi-frame with geometry in the prediction heads.
    GeoPred,
    /// Multi-frame with geometry in prediction and scale fusion.
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "png")]
        format: Format,
    },
    /// Estimate per-view geometry priors from the training split.
    EstimateGeometry {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Predict boxes for every frame of a split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the final checkpoint of the configured run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score detections against a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Detections JSONL; a `corners.jsonl` next to it enables corner PCK.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = gast_core::eval::DEFAULT_PCK_RADIUS)]
        pck_radius: f64,
    },
    /// Draw precision-recall curves of an evaluation report as SVG.
    PlotPr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(d) = &o.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(p) = &o.priors {
        cfg.priors = Some(p.clone());
    }
    if let Some(a) = o.ablation {
        let (mf, gp, gf) = match a {
            Ablation::Single => (false, false, false),
            Ablation::Multi => (true, false, false),
            Ablation::GeoPred => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        cfg.model = ModelConfig {
            use_multi_frame: mf,
            use_geometry_prediction: gp,
            use_geometry_fusion: gf,
            ..cfg.model.clone()
        };
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = o.steps_per_epoch {
        cfg.steps_per_epoch = Some(s);
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.optimizer.lr = lr;
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Contract("--out is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    gastkit::init_threads()?;
    match cli.command {
        Command::GenData { common, format } => {
            let spec: DatasetSpec = match &common.config {
                Some(p) => io::read_json(p)?,
                None => DatasetSpec::default(),
            };
            let out = require_out(&common)?;
            let format = match format {
                Format::Png => ImageFormat::Png,
                Format::F32 => ImageFormat::F32,
            };
            let m = dataset::generate(&spec, common.seed.unwrap_or(0), out, format)?;
            log::info!("wrote {} videos to {}", m.videos.len(), out.display());
        }
        Command::EstimateGeometry { common, dataset } => {
            let mut cfg = run_config(&common)?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let audit = Arc::new(FileAudit::new());
            let ds = Dataset::open(&cfg.dataset, audit.clone())?;
            let priors = prior::estimate(&ds)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.priors_dir());
            prior::save(&out, &priors)?;
            audit.save(&out.join(trainer::AUDIT_FILE))?;
            log::info!("wrote {} priors to {}", priors.len(), out.display());
        }
        Command::Train {
            common,
            overrides,
            resume,
        } => {
            let mut cfg = run_config(&common)?;
            apply_overrides(&mut cfg, &overrides);
            let outcome = trainer::train(&cfg, Arc::new(FileAudit::new()), resume)?;
            log::info!(
                "finished after {} epochs, {} steps; final loss {:.4}",
                outcome.state.epoch,
                outcome.state.step,
                outcome.losses.last().map_or(f64::NAN, |r| r.total)
            );
        }
        Command::Infer {
            common,
            dataset,
            checkpoint: ckpt,
            split,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let ckpt = ckpt.unwrap_or_else(|| checkpoint::checkpoint_dir(&cfg.out).join(checkpoint::FINAL_CHECKPOINT));
            let out = require_out(&common)?.to_path_buf();
            let result = infer::infer(&cfg, &ckpt, split.into(), Arc::new(FileAudit::new()))?;
            infer::write(&out, &result)?;
            log::info!(
                "{} detections over {} frames ({} predicted twice)",
                result.detections.len(),
                result.meta.frames.len(),
                result.meta.dual_prediction_frames
            );
        }
        Command::Eval {
            common,
            dataset,
            detections,
            split,
            pck_radius,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let out = require_out(&common)?;
            let dets: Vec<DetectionRecord> = io::read_jsonl(&detections)?;
            let corner_path = detections.with_file_name(infer::CORNERS_FILE);
            let corners: Option<Vec<CornerRecord>> = if corner_path.exists() {
                Some(io::read_jsonl(&corner_path)?)
            } else {
                None
            };
            let ds = Dataset::open(&cfg.dataset, Arc::new(FileAudit::new()))?;
            let report = evaluate::evaluate_split(&ds, split.into(), &dets, corners.as_deref(), pck_radius)?;
            evaluate::write_report(out, &report)?;
            println!(
                "AP50 {:.4}  AP75 {:.4}  mAP {:.4}",
                report.mean_ap50, report.mean_ap75, report.map
            );
        }
        Command::PlotPr { common, report } => {
            let r: gast_core::eval::EvalReport = io::read_json(&report)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| report.with_file_name("pr_curves.svg"));
            let names = match &common.config {
                Some(p) => {
                    let cfg = RunConfig::load(p)?;
                    Dataset::open(&cfg.dataset, Arc::new(FileAudit::new()))?
                        .manifest()
                        .categories
                        .iter()
                        .map(|c| c.name.clone())
                        .collect()
                }
                None => Vec::new(),
            };
            io::write_atomic(&out, plot::pr_svg(&r, &names).as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
