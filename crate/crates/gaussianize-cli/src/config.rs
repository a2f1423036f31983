//! Run configuration: JSON config file merged with flag overrides.
//!
//! Every training knob lives in [`RunConfig`]. A `--config file.json`
//! supplies base values, individual `--key value` flags override them,
//! and whatever neither provides falls back to defaults (with `GF_SEED`
//! as a default-seed fallback). The fully resolved config is echoed to
//! the run directory before any work starts, so a run can always be
//! replayed from its own artifacts.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::CliError;

/// Architecture, data, and optimizer settings for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Toy distribution to sample (two_gaussians, ring, checkerboard,
    /// spiral). Mutually exclusive with `data`.
    pub toy: Option<String>,
    /// CSV dataset path. Mutually exclusive with `toy`.
    pub data: Option<PathBuf>,
    /// Sample count for toy generation.
    pub n_samples: usize,
    /// Element-wise stretch applied after loading: "cubic" or "affine".
    pub stretch: Option<String>,
    /// Normalize by the train split's mean/std after loading.
    pub normalize: bool,
    /// Dequantize integer data with this many levels.
    pub dequantize: Option<u32>,

    /// Named architecture + recipe; explicit fields below override its
    /// values. When neither a preset nor explicit architecture flags
    /// are given, toy datasets fall back to the `toy2d` preset.
    pub preset: Option<String>,
    pub layers: Option<usize>,
    pub anchors: Option<usize>,
    /// Householder reflections per rotation (defaults to the data
    /// dimension).
    pub reflections: Option<usize>,
    /// Patch side p for image-shaped data; switches the rotation to
    /// shifted per-patch blocks.
    pub patch: Option<usize>,

    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub val_fraction: Option<f64>,
    /// Batch-shard worker cap.
    pub workers: Option<usize>,

    /// Master seed; `GF_SEED` supplies it when absent, 0 otherwise.
    pub seed: Option<u64>,
    /// Parent directory for timestamped run directories.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            toy: None,
            data: None,
            n_samples: 10_000,
            stretch: None,
            normalize: false,
            dequantize: None,
            preset: None,
            layers: None,
            anchors: None,
            reflections: None,
            patch: None,
            learning_rate: None,
            epochs: None,
            batch_size: None,
            val_fraction: None,
            workers: None,
            seed: None,
            out: PathBuf::from("runs"),
        }
    }
}

/// Flags shared by every command that builds a [`RunConfig`].
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Toy distribution: two_gaussians, ring, checkerboard, spiral.
    #[arg(long)]
    pub toy: Option<String>,
    /// CSV dataset path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Toy sample count.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Stretch the data element-wise: cubic or affine.
    #[arg(long)]
    pub stretch: Option<String>,
    /// Normalize by the train split's statistics.
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Dequantize integer data with this many levels.
    #[arg(long)]
    pub dequantize: Option<u32>,
    /// Preset name (toy2d, POWER, GAS, ...).
    #[arg(long)]
    pub preset: Option<String>,
    /// Rotation/kernel pairs L.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Mixture components per coordinate K.
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Householder reflections per rotation.
    #[arg(long)]
    pub reflections: Option<usize>,
    /// Patch side for image-shaped data.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Batch-shard worker cap (1 = fully serial).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Master seed (falls back to $GF_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for run outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    /// File values, overridden by flags, with the seed fallback chain
    /// applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            None => RunConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::config(format!("invalid config {}: {e}", path.display()))
                })?
            }
        };

        macro_rules! override_with {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = Some(v.clone());
                })*
            };
        }
        override_with!(
            toy,
            data,
            stretch,
            dequantize,
            preset,
            layers,
            anchors,
            reflections,
            patch,
            learning_rate,
            epochs,
            batch_size,
            val_fraction,
            workers,
            seed
        );
        if let Some(n) = self.n_samples {
            cfg.n_samples = n;
        }
        if let Some(b) = self.normalize {
            cfg.normalize = b;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }

        if cfg.seed.is_none() {
            if let Ok(text) = std::env::var("GF_SEED") {
                let parsed = text
                    .parse::<u64>()
                    .map_err(|_| CliError::config(format!("GF_SEED is not a u64: {text:?}")))?;
                cfg.seed = Some(parsed);
            }
        }

        if cfg.toy.is_some() && cfg.data.is_some() {
            return Err(CliError::config("give either --toy or --data, not both"));
        }
        if cfg.n_samples == 0 {
            return Err(CliError::config("n_samples must be >= 1"));
        }
        Ok(cfg)
    }
}

impl RunConfig {
    /// The master seed after fallbacks.
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Pretty JSON of the resolved configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}
