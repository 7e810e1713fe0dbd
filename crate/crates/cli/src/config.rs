//! Run configuration: one JSON document covering every command.
//!
//! Precedence is CLI flag > config file > built-in default.  Each command
//! writes the fully resolved configuration next to its outputs, so a run
//! is reconstructible from that file alone (`--config` it back in).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use visl_core::data::SyntheticConfig;
use visl_core::train::{MaskPolicy, TrainConfig};
use visl_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // reproducibility
    pub seed: u64,
    pub out_dir: PathBuf,

    // model hyperparameters
    pub latent_dim: usize,
    pub t_steps: usize,
    pub sigma_z: f64,
    /// Decoder output variance for continuous variables.
    pub sigma_x_squared: f64,
    /// Prior edge probability of the graph posterior.
    pub prior_prob: f64,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_dag: f64,
    pub tau: f64,
    pub stage_split: f64,
    pub warmup_frac: f64,
    pub masking: MaskPolicy,
    pub mc_samples_train: usize,
    pub grad_clip: Option<f64>,

    // synthetic generator
    pub num_vars: usize,
    pub edge_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_var: f64,
    /// Fraction of test cells hidden so imputation can be scored.
    pub drop_fraction: f64,

    // inference
    pub mc_samples: usize,
    pub threshold: f64,
    /// Threshold applied after averaging several archives.
    pub multi_threshold: f64,
    /// Impute through one thresholded graph instead of posterior samples.
    pub hard_graph: bool,

    // file inputs; commands ignore the ones they do not use
    pub data: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub archives: Vec<PathBuf>,
    pub pred_edges: Option<PathBuf>,
    pub truth_edges: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub imputed: Option<PathBuf>,
    pub missing_data: Option<PathBuf>,
    pub truth_data: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub baselines: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            latent_dim: 256,
            t_steps: 3,
            sigma_z: 1.0,
            sigma_x_squared: 0.02,
            prior_prob: 0.05,
            epochs: 300,
            batch_size: 100,
            learning_rate: 1e-3,
            lambda_dag: 10.0,
            tau: 0.5,
            stage_split: 0.5,
            warmup_frac: 0.1,
            masking: MaskPolicy::UniformFraction,
            mc_samples_train: 1,
            grad_clip: Some(100.0),
            num_vars: 5,
            edge_prob: 0.5,
            n_train: 5000,
            n_test: 1000,
            noise_var: 0.01,
            drop_fraction: 0.3,
            mc_samples: 100,
            threshold: 0.5,
            multi_threshold: 0.35,
            hard_graph: false,
            data: None,
            groups: None,
            archive: None,
            archives: Vec::new(),
            pred_edges: None,
            truth_edges: None,
            hierarchy: None,
            imputed: None,
            missing_data: None,
            truth_data: None,
            train_data: None,
            baselines: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("configuration not serializable: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Decoder output noise as a standard deviation.
    pub fn sigma_x(&self) -> f64 {
        self.sigma_x_squared.sqrt()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda_dag: self.lambda_dag,
            tau: self.tau,
            stage_split: self.stage_split,
            warmup_frac: self.warmup_frac,
            masking: self.masking,
            mc_samples_train: self.mc_samples_train,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_vars: self.num_vars,
            edge_prob: self.edge_prob,
            n_train: self.n_train,
            n_test: self.n_test,
            noise_var: self.noise_var,
            seed: self.seed,
        }
    }

    /// Checks shared across commands; training/generator internals are
    /// re-validated by the core before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.t_steps == 0 {
            return Err(Error::Contract(format!(
                "latent_dim ({}) and t_steps ({}) must be positive",
                self.latent_dim, self.t_steps
            )));
        }
        if !(self.sigma_z > 0.0) || !(self.sigma_x_squared > 0.0) {
            return Err(Error::Contract(format!(
                "sigma_z ({}) and sigma_x_squared ({}) must be positive",
                self.sigma_z, self.sigma_x_squared
            )));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Contract(format!(
                "prior_prob must lie in (0, 1), got {}",
                self.prior_prob
            )));
        }
        for (name, t) in [("threshold", self.threshold), ("multi_threshold", self.multi_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Contract(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Contract(format!("tau must be positive, got {}", self.tau)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Contract("mc_samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Contract(format!(
                "drop_fraction must lie in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        Ok(())
    }
}

/// Flags shared by every command.
#[derive(clap::Args, Debug)]
pub struct CommonArgs {
    /// JSON run-configuration file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for outputs and the effective-config copy
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

impl CommonArgs {
    /// File-or-default configuration with the shared flags applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

/// Create the output directory and persist the effective config beside the
/// command's outputs.  Returns the directory for convenience.
pub fn persist_effective(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join(format!("{command}_config.json")))?;
    Ok(cfg.out_dir.clone())
}
