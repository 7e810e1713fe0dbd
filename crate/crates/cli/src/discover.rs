//! `visl discover`: threshold stored edge posteriors into an edge list.
//!
//! With several archives the per-edge probabilities are averaged before
//! thresholding, which favors edges found consistently across runs; the
//! default threshold drops from 0.5 to 0.35 in that mode.

use crate::archive::load_model;
use crate::config::{persist_effective, CommonArgs};
use std::path::PathBuf;
use visl_core::graph::{dag_penalty, is_dag, HardGraph};
use visl_core::{Error, Result};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model archives; probabilities are averaged when several are given
    #[arg(value_name = "ARCHIVE")]
    pub archives: Vec<PathBuf>,
    /// Edge-probability threshold (default 0.5, or 0.35 when averaging)
    #[arg(long)]
    pub threshold: Option<f64>,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if !args.archives.is_empty() {
        cfg.archives = args.archives;
    }
    if cfg.archives.is_empty() {
        if let Some(single) = cfg.archive.take() {
            cfg.archives.push(single);
        }
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
        cfg.multi_threshold = t;
    }
    cfg.validate()?;
    if cfg.archives.is_empty() {
        return Err(Error::Contract("discover needs at least one model archive".into()));
    }
    let out = persist_effective(&cfg, "discover")?;

    let mut labels: Vec<String> = Vec::new();
    let mut sum: Vec<f64> = Vec::new();
    for (i, path) in cfg.archives.iter().enumerate() {
        let model = load_model(path)?;
        log::debug!(
            "{}: trained on '{}' ({} rows, seed {}, {} epochs)",
            path.display(),
            model.provenance.data_path,
            model.provenance.n_rows,
            model.provenance.seed,
            model.provenance.epochs
        );
        let probs = model.graph.probabilities();
        if i == 0 {
            labels = model.spec.group_names().to_vec();
            sum = probs;
        } else {
            if model.spec.group_names() != labels.as_slice() {
                return Err(Error::Contract(format!(
                    "{}: group names differ from the first archive",
                    path.display()
                )));
            }
            for (acc, p) in sum.iter_mut().zip(probs) {
                *acc += p;
            }
        }
    }
    let n = cfg.archives.len();
    for p in &mut sum {
        *p /= n as f64;
    }
    let threshold = if n > 1 { cfg.multi_threshold } else { cfg.threshold };

    let hard = HardGraph::from_probabilities(&sum, threshold, &labels)?;
    hard.write_edge_csv(&out.join("edges.csv"))?;

    let acyclic = is_dag(&hard);
    let residual = dag_penalty(&hard.adjacency_tensor())?.item()?;
    println!(
        "{} edges over {} nodes at threshold {threshold} ({} archives); DAG: {acyclic}, residual acyclicity penalty {residual:.6}",
        hard.edges().len(),
        hard.num_nodes(),
        n
    );
    Ok(())
}
