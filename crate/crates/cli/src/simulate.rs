//! `visl simulate`: synthetic SEM data with a known ground-truth graph.

use crate::config::{persist_effective, CommonArgs};
use visl_core::data::{drop_mcar, generate_dag, save_csv, simulate_sem};
use visl_core::graph::is_dag;
use visl_core::tensor::streams;
use visl_core::{Result, Rng};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of variables (one singleton group each)
    #[arg(long)]
    pub num_vars: Option<usize>,
    /// Probability of each orderable pair becoming an edge
    #[arg(long)]
    pub edge_prob: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Structural-equation noise variance
    #[arg(long)]
    pub noise_var: Option<f64>,
    /// Fraction of test cells hidden in `test_missing.csv` (0 skips the file)
    #[arg(long)]
    pub drop_fraction: Option<f64>,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.num_vars {
        cfg.num_vars = v;
    }
    if let Some(v) = args.edge_prob {
        cfg.edge_prob = v;
    }
    if let Some(v) = args.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = args.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = args.noise_var {
        cfg.noise_var = v;
    }
    if let Some(v) = args.drop_fraction {
        cfg.drop_fraction = v;
    }
    cfg.validate()?;
    let out = persist_effective(&cfg, "simulate")?;

    let syn = cfg.synthetic_config();
    let mut rng = Rng::new(cfg.seed, streams::DATA);
    let graph = generate_dag(&syn, &mut rng)?;
    let full = simulate_sem(&graph, &syn, &mut rng)?;
    let (train, test) = full.head_tail_split(syn.n_train)?;

    save_csv(&train, &out.join("train.csv"))?;
    save_csv(&test, &out.join("test.csv"))?;
    if cfg.drop_fraction > 0.0 {
        let mut drop_rng = Rng::new(cfg.seed, streams::DROP);
        let missing = drop_mcar(&test, cfg.drop_fraction, &mut drop_rng)?;
        save_csv(&missing, &out.join("test_missing.csv"))?;
    }
    graph.write_edge_csv(&out.join("truth_edges.csv"))?;

    debug_assert!(is_dag(&graph), "the generator promises acyclic graphs");
    println!(
        "simulated {} train / {} test rows over {} variables; {} true edges -> {}",
        train.n_rows(),
        test.n_rows(),
        syn.num_vars,
        graph.edges().len(),
        out.display()
    );
    Ok(())
}
