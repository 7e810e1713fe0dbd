//! `visl train`: fit the model and persist archive, trace and config.

use crate::archive::{save_model, Provenance};
use crate::config::{persist_effective, CommonArgs};
use std::path::PathBuf;
use visl_core::data::load_csv;
use visl_core::graph::{default_init_prob, GraphPosterior};
use visl_core::model::ModelParams;
use visl_core::tensor::streams;
use visl_core::train::fit;
use visl_core::{Error, Result, Rng};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training data CSV (header = variable names, empty cells = missing)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Optional `variable,group` mapping CSV; default is one group per variable
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub t_steps: Option<usize>,
    #[arg(long)]
    pub lambda_dag: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub stage_split: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// Per-batch input masking: uniform_fraction or none
    #[arg(long)]
    pub masking: Option<visl_core::train::MaskPolicy>,
    #[arg(long)]
    pub mc_samples_train: Option<usize>,
    #[arg(long)]
    pub prior_prob: Option<f64>,
    #[arg(long)]
    pub sigma_x_squared: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if args.data.is_some() {
        cfg.data = args.data;
    }
    if args.groups.is_some() {
        cfg.groups = args.groups;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = args.t_steps {
        cfg.t_steps = v;
    }
    if let Some(v) = args.lambda_dag {
        cfg.lambda_dag = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.stage_split {
        cfg.stage_split = v;
    }
    if let Some(v) = args.warmup_frac {
        cfg.warmup_frac = v;
    }
    if let Some(v) = args.masking {
        cfg.masking = v;
    }
    if let Some(v) = args.mc_samples_train {
        cfg.mc_samples_train = v;
    }
    if let Some(v) = args.prior_prob {
        cfg.prior_prob = v;
    }
    if let Some(v) = args.sigma_x_squared {
        cfg.sigma_x_squared = v;
    }
    if let Some(v) = args.grad_clip {
        cfg.grad_clip = Some(v);
    }
    cfg.validate()?;
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Contract("train needs --data (or `data` in the config)".into()))?;
    let out = persist_effective(&cfg, "train")?;

    let ds = load_csv(&data_path, cfg.groups.as_deref())?;
    let spec = ds.spec().clone();
    log::info!(
        "{} rows, {} variables in {} groups, {:.1}% missing",
        ds.n_rows(),
        ds.n_vars(),
        spec.num_groups(),
        100.0 * ds.missing_fraction()
    );

    let mut init_rng = Rng::new(cfg.seed, streams::INIT);
    let mut params = ModelParams::new(
        &spec,
        cfg.latent_dim,
        cfg.t_steps,
        cfg.sigma_z,
        cfg.sigma_x(),
        &mut init_rng,
    )?;
    let m = spec.num_groups();
    let graph = GraphPosterior::new(m, default_init_prob(m), cfg.prior_prob)?;

    let trace = fit(
        ds.values_flat(),
        ds.observed_flat(),
        ds.n_rows(),
        &spec,
        &mut params,
        &graph,
        &cfg.train_config(),
    )?;
    trace.write_csv(&out.join("trace.csv"))?;
    save_model(
        &out.join("model.visl"),
        &params,
        &graph,
        &spec,
        ds.variable_names(),
        Provenance {
            data_path: data_path.display().to_string(),
            n_rows: ds.n_rows(),
            seed: cfg.seed,
            epochs: cfg.epochs,
        },
    )?;

    let last = trace.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final -ELBO {:.4}, acyclicity penalty {:.6}) -> {}",
        trace.epochs.len(),
        last.neg_elbo,
        last.dag_penalty,
        out.display()
    );
    Ok(())
}
