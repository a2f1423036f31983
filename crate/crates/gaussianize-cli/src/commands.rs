//! The seven subcommands: train, eval, sample, rbig, gradcheck,
//! report, toygen.
//!
//! Exit-code policy: 1 for configuration problems, 2 for dataset
//! problems, 3 for numerical failures (including a failed gradient
//! check), 4 for anything wrong with a checkpoint. Errors raised while
//! a model is running are classified by their library variant.

use clap::Args;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gaussianize::data::{Dataset, StretchKind, ToyName};
use gaussianize::error::Error;
use gaussianize::eval::GaussianityReport;
use gaussianize::flow::{
    FlowConfig, GaussianizationFlow, RotationKind, CHECKPOINT_VERSION,
};
use gaussianize::rbig::{RbigModel, RbigRotation, RBIG_CHECKPOINT_VERSION};
use gaussianize::train::{self, preset_names, TrainConfig, Units};

use crate::config::{ConfigArgs, RunConfig};
use crate::CliError;

/// Map a library error raised during a running computation.
fn stage_run(e: Error) -> CliError {
    let code = match &e {
        Error::Contract(_) => 1,
        Error::Parse { .. } | Error::Io(_) => 2,
        Error::Domain(_) | Error::Numerical(_) => 3,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } => 4,
        _ => 1,
    };
    CliError::new(code, e.to_string())
}

/// Map a library error raised while assembling the dataset.
fn stage_data(e: Error) -> CliError {
    CliError::new(2, e.to_string())
}

/// Map a library error raised while reading or writing a checkpoint.
fn stage_checkpoint(e: Error) -> CliError {
    CliError::new(4, e.to_string())
}

/// Build the dataset a config describes. Toy generation, dequantization,
/// stretching, and normalization all draw from the data RNG stream.
fn build_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let seed = cfg.seed();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ds = match (&cfg.toy, &cfg.data) {
        (Some(name), None) => {
            let toy: ToyName = name
                .parse()
                .map_err(|e: Error| CliError::config(e.to_string()))?;
            Dataset::gen_toy(toy, cfg.n_samples, &mut rng)
                .map_err(stage_data)?
                .with_seed(seed)
        }
        (None, Some(path)) => Dataset::load_csv(path).map_err(stage_data)?.with_seed(seed),
        _ => {
            return Err(CliError::config(
                "a dataset is required: give --toy <name> or --data <file.csv>",
            ));
        }
    };
    if let Some(levels) = cfg.dequantize {
        ds = ds.dequantize_uniform(levels, &mut rng).map_err(stage_data)?;
    }
    if let Some(kind) = &cfg.stretch {
        let kind = match kind.as_str() {
            "cubic" => StretchKind::Cubic,
            "affine" => StretchKind::AFFINE_DEFAULT,
            other => {
                return Err(CliError::config(format!(
                    "unknown stretch {other:?}; expected cubic or affine"
                )));
            }
        };
        ds = ds.stretch(kind).map_err(stage_data)?;
    }
    if cfg.normalize {
        ds = ds.normalize().map_err(stage_data)?;
    }
    Ok(ds)
}

/// Resolve architecture and optimizer settings against the data
/// dimension: preset values first (when named), explicit fields on
/// top, library defaults underneath.
fn build_recipe(
    cfg: &RunConfig,
    dim: usize,
) -> Result<(FlowConfig, TrainConfig, Option<String>), CliError> {
    let preset_name = match &cfg.preset {
        Some(name) => Some(name.clone()),
        // Bare toy runs default to the desk-scale 2D recipe.
        None if cfg.toy.is_some() && cfg.layers.is_none() => Some("toy2d".to_string()),
        None => None,
    };

    let (mut flow_cfg, mut train_cfg) = match &preset_name {
        Some(name) => {
            let preset = train::preset(name).ok_or_else(|| {
                CliError::config(format!(
                    "unknown preset {name:?}; available: {}",
                    preset_names().join(", ")
                ))
            })?;
            if preset.flow.dim != dim {
                return Err(CliError::config(format!(
                    "preset {name:?} is for {}-dimensional data, dataset has {dim}",
                    preset.flow.dim
                )));
            }
            (preset.flow, preset.train)
        }
        None => {
            let (Some(layers), Some(anchors)) = (cfg.layers, cfg.anchors) else {
                return Err(CliError::config(
                    "no preset given: --layers and --anchors are required",
                ));
            };
            let flow_cfg = FlowConfig {
                dim,
                layers,
                anchors,
                rotation: RotationKind::Householder { reflections: dim },
            };
            (flow_cfg, TrainConfig::default())
        }
    };

    if let Some(l) = cfg.layers {
        flow_cfg.layers = l;
    }
    if let Some(k) = cfg.anchors {
        flow_cfg.anchors = k;
    }
    flow_cfg.rotation = match (cfg.patch, cfg.reflections) {
        (Some(p), refl) => {
            let side = (dim as f64).sqrt().round() as usize;
            if side * side != dim {
                return Err(CliError::config(format!(
                    "--patch needs square-image data; {dim} is not a perfect square"
                )));
            }
            RotationKind::Patch {
                image_side: side,
                patch_side: p,
                reflections: refl.unwrap_or(p * p),
            }
        }
        (None, Some(m)) => RotationKind::Householder { reflections: m },
        (None, None) => flow_cfg.rotation,
    };

    if let Some(lr) = cfg.learning_rate {
        train_cfg.learning_rate = lr;
    }
    if let Some(e) = cfg.epochs {
        train_cfg.epochs = e;
    }
    if let Some(b) = cfg.batch_size {
        train_cfg.batch_size = b;
    }
    if let Some(v) = cfg.val_fraction {
        train_cfg.val_fraction = v;
    }
    if let Some(w) = cfg.workers {
        train_cfg.workers = w;
    }
    train_cfg.seed = cfg.seed();
    train_cfg.log_every = 1;
    Ok((flow_cfg, train_cfg, preset_name))
}

/// Create `{parent}/{kind}-{nanos}`; nanosecond timestamps keep rapid
/// successive runs from colliding.
fn create_run_dir(parent: &Path, kind: &str) -> Result<PathBuf, CliError> {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock before 1970")
        .as_nanos();
    let dir = parent.join(format!("{kind}-{nanos}"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::config(format!("cannot create run directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::new(2, format!("cannot write {}: {e}", path.display())))
}

/// Write a matrix as headerless CSV with shortest-round-trip floats.
fn write_csv(path: &Path, m: &Array2<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::new(2, format!("cannot write {}: {e}", path.display())))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| CliError::new(2, e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::new(2, e.to_string()))
}

/// A checkpoint file holding either model kind, dispatched on its
/// version tag.
enum Model {
    Flow(GaussianizationFlow),
    Rbig(RbigModel),
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(4, format!("cannot read checkpoint {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::new(4, format!("checkpoint is not JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(v) if v == CHECKPOINT_VERSION => GaussianizationFlow::from_json(&text)
            .map(Model::Flow)
            .map_err(stage_checkpoint),
        Some(v) if v == RBIG_CHECKPOINT_VERSION => {
            RbigModel::from_json(&text).map(Model::Rbig).map_err(stage_checkpoint)
        }
        Some(other) => Err(CliError::new(
            4,
            format!(
                "unsupported checkpoint version {other:?}; expected {CHECKPOINT_VERSION:?} or {RBIG_CHECKPOINT_VERSION:?}"
            ),
        )),
        None => Err(CliError::new(4, "checkpoint has no version field")),
    }
}

fn load_flow(path: &Path) -> Result<GaussianizationFlow, CliError> {
    match load_model(path)? {
        Model::Flow(f) => Ok(f),
        Model::Rbig(_) => Err(CliError::config(
            "this command needs a trainable flow checkpoint, got a frozen iterative model",
        )),
    }
}

// --- train ---

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let ds = build_dataset(&cfg)?;
    let (flow_cfg, train_cfg, preset_name) = build_recipe(&cfg, ds.dim())?;

    let run_dir = create_run_dir(&cfg.out, "train")?;
    write_file(&run_dir.join("config.json"), &cfg.to_json())?;
    write_file(&run_dir.join("data_manifest.json"), &ds.manifest_json())?;
    println!("run directory: {}", run_dir.display());

    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed().wrapping_add(1));
    let mut flow =
        GaussianizationFlow::init_data_dependent(&ds.matrix().view(), &flow_cfg, &mut init_rng)
            .map_err(stage_run)?;
    flow.meta_mut().seed = Some(cfg.seed());
    flow.meta_mut().preset = preset_name;

    let metrics_path = run_dir.join("metrics.log");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::new(2, format!("cannot create metrics log: {e}")))?;
    let mut timings = std::fs::File::create(run_dir.join("timings.log"))
        .map_err(|e| CliError::new(2, format!("cannot create timings log: {e}")))?;

    let result = train::train_with_progress(
        flow,
        &ds.matrix().view(),
        None,
        &train_cfg,
        |stats| {
            // metrics.log holds only seed-determined quantities; wall
            // time goes to the timing sidecar and stdout.
            let _ = writeln!(
                metrics,
                "{}\t{}\t{}",
                stats.epoch, stats.train_nll, stats.val_nll
            );
            let _ = writeln!(timings, "{}\t{:.3}", stats.epoch, stats.wall_secs);
            println!(
                "epoch {:>4}  train {:.6}  val {:.6}  ({:.2}s)",
                stats.epoch, stats.train_nll, stats.val_nll, stats.wall_secs
            );
        },
    )
    .map_err(stage_run)?;

    let ckpt = run_dir.join("checkpoint.json");
    result.flow.save(&ckpt).map_err(stage_run)?;
    println!(
        "best val NLL {:.6} nats at epoch {}",
        result.best_val_nll, result.best_epoch
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// --- eval ---

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score (flow or frozen iterative model).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let model = load_model(&args.checkpoint)?;
    let ds = build_dataset(&cfg)?;

    let nats = match &model {
        Model::Flow(flow) => {
            train::evaluate(flow, &ds.matrix().view(), Units::Nats).map_err(stage_run)?
        }
        Model::Rbig(rbig) => {
            let ll = rbig.log_likelihood(&ds.matrix().view()).map_err(stage_run)?;
            -ll.mean().unwrap_or(f64::NAN)
        }
    };
    println!("nll_nats {nats}");

    if let (Model::Flow(flow), Some(dq)) = (&model, ds.dequant()) {
        let bpd = train::evaluate(
            flow,
            &ds.matrix().view(),
            Units::BitsPerDim {
                dim: ds.dim(),
                offset_nats: dq.offset_nats,
            },
        )
        .map_err(stage_run)?;
        println!("bits_per_dim {bpd}");
    }
    Ok(())
}

// --- sample ---

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Flow checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Rows to draw.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Output CSV path.
    #[arg(long, default_value = "samples.csv")]
    pub output: PathBuf,
    /// Sampling seed (falls back to $GF_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    let flow = load_flow(&args.checkpoint)?;
    let seed = match args.seed {
        Some(s) => s,
        None => match std::env::var("GF_SEED") {
            Ok(text) => text
                .parse()
                .map_err(|_| CliError::config(format!("GF_SEED is not a u64: {text:?}")))?,
            Err(_) => 0,
        },
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let samples = flow.sample(args.n, &mut rng).map_err(stage_run)?;
    write_csv(&args.output, &samples)?;
    println!("wrote {} rows to {}", args.n, args.output.display());
    Ok(())
}

// --- rbig ---

#[derive(Debug, Args)]
pub struct RbigArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Gaussianization iterations.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Rotation rule: pca or random.
    #[arg(long, default_value = "pca")]
    pub rotation: String,
    /// KDE points per iteration (capped at the row count).
    #[arg(long, default_value_t = 10_000)]
    pub kde_points: usize,
}

pub fn cmd_rbig(args: &RbigArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let rotation = match args.rotation.as_str() {
        "pca" => RbigRotation::Pca,
        "random" => RbigRotation::Random,
        other => {
            return Err(CliError::config(format!(
                "unknown rotation {other:?}; expected pca or random"
            )));
        }
    };
    let ds = build_dataset(&cfg)?;
    let kde_points = args.kde_points.min(ds.len());

    let run_dir = create_run_dir(&cfg.out, "rbig")?;
    write_file(&run_dir.join("config.json"), &cfg.to_json())?;
    write_file(&run_dir.join("data_manifest.json"), &ds.manifest_json())?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed().wrapping_add(1));
    let model = RbigModel::fit(&ds.matrix().view(), args.iters, rotation, kde_points, &mut rng)
        .map_err(stage_run)?;
    if !model.random_fallbacks().is_empty() {
        println!(
            "note: PCA fell back to random rotations at iterations {:?}",
            model.random_fallbacks()
        );
    }

    let ll = model
        .log_likelihood(&ds.matrix().view())
        .map_err(stage_run)?;
    println!("nll_nats {}", -ll.mean().unwrap_or(f64::NAN));

    let path = run_dir.join("rbig_model.json");
    model.save(&path).map_err(stage_run)?;
    println!("model: {}", path.display());
    Ok(())
}

// --- gradcheck ---

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Flow checkpoint to check; a fresh random flow when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 5)]
    pub anchors: usize,
    /// Parameter coordinates to probe (deterministic subsample).
    #[arg(long, default_value_t = 150)]
    pub coords: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let flow = match &args.checkpoint {
        Some(path) => load_flow(path)?,
        None => {
            let data = Array2::from_shape_fn((64, args.dim), |_| {
                rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
            });
            let config = FlowConfig {
                dim: args.dim,
                layers: args.layers,
                anchors: args.anchors,
                rotation: RotationKind::Householder {
                    reflections: args.dim,
                },
            };
            GaussianizationFlow::init_data_dependent(&data.view(), &config, &mut rng)
                .map_err(stage_run)?
        }
    };

    let batch = Array2::from_shape_fn((16, flow.dim()), |_| {
        rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
    });
    let (_, grads) = train::nll_loss(&flow, &batch.view()).map_err(stage_run)?;
    let analytic = grads.flatten();

    let theta = flow.flatten_params();
    let n = theta.len();
    let probes: Vec<usize> = if args.coords >= n {
        (0..n).collect()
    } else {
        // Deterministic spread over the parameter vector.
        rand::seq::index::sample(&mut rng, n, args.coords).into_vec()
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_coord = 0;
    let mut probe_flow = flow.clone();
    for &i in &probes {
        let mut bumped = theta.clone();
        bumped[i] = theta[i] + h;
        probe_flow
            .set_params_from_flat(&bumped)
            .map_err(stage_run)?;
        let up = probe_flow.mean_nll(&batch.view()).map_err(stage_run)?;
        bumped[i] = theta[i] - h;
        probe_flow
            .set_params_from_flat(&bumped)
            .map_err(stage_run)?;
        let down = probe_flow.mean_nll(&batch.view()).map_err(stage_run)?;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_coord = i;
        }
    }

    println!(
        "checked {} of {} coordinates: max relative error {worst:.3e} (coordinate {worst_coord})",
        probes.len(),
        n
    );
    if worst > args.tolerance {
        return Err(CliError::new(
            3,
            format!(
                "gradient check failed: relative error {worst:.3e} exceeds {:.1e}",
                args.tolerance
            ),
        ));
    }
    println!("gradients agree with finite differences");
    Ok(())
}

// --- report ---

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Checkpoint whose transformed output is diagnosed.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Histogram bins per dimension.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Report JSON destination.
    #[arg(long, default_value = "report.json")]
    pub output: PathBuf,
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let model = load_model(&args.checkpoint)?;
    let ds = build_dataset(&cfg)?;

    let z = match &model {
        Model::Flow(flow) => flow.forward(&ds.matrix().view()).map_err(stage_run)?.z,
        Model::Rbig(rbig) => rbig.transform(&ds.matrix().view()).map_err(stage_run)?.0,
    };
    let report = GaussianityReport::measure(&z.view(), args.bins).map_err(stage_run)?;
    write_file(&args.output, &report.to_json())?;
    println!("j_marginal {}", report.j_marginal);
    if let Some(j) = report.total_kl {
        println!("total_kl {j}");
    }
    println!("report: {}", args.output.display());
    Ok(())
}

// --- toygen ---

#[derive(Debug, Args)]
pub struct ToygenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output CSV path.
    #[arg(long, default_value = "toy.csv")]
    pub output: PathBuf,
}

pub fn cmd_toygen(args: &ToygenArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    if cfg.toy.is_none() {
        return Err(CliError::config("toygen needs --toy <name>"));
    }
    let ds = build_dataset(&cfg)?;
    write_csv(&args.output, ds.matrix())?;
    let manifest_path = args.output.with_extension("manifest.json");
    ds.write_manifest(&manifest_path).map_err(stage_run)?;
    println!(
        "wrote {} rows to {} (manifest {})",
        ds.len(),
        args.output.display(),
        manifest_path.display()
    );
    Ok(())
}
