//! `visl evaluate`: score structure recovery and/or imputation quality,
//! writing a flat key/value CSV plus a human-readable text report.

use crate::archive::load_model;
use crate::config::{persist_effective, CommonArgs, RunConfig};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use visl_core::data::load_csv;
use visl_core::graph::{harden, HardGraph};
use visl_core::impute::{predictive_scores, Imputation};
use visl_core::metrics::{
    baseline_impute, group_rollup, imputation_metrics, structure_metrics, write_kv_csv,
    BaselineMethod, GroupRollup,
};
use visl_core::{Error, Result};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Predicted edge-list CSV (alternative to --archive)
    #[arg(long)]
    pub pred_edges: Option<PathBuf>,
    /// Model archive whose posterior is hardened at --threshold
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Ground-truth edge-list CSV
    #[arg(long)]
    pub truth_edges: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `node,parent` CSV rolling predicted edges up a hierarchy
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Imputed data CSV (output of `visl impute`)
    #[arg(long)]
    pub imputed: Option<PathBuf>,
    /// The pre-imputation file whose missing cells define the evaluation set
    #[arg(long)]
    pub missing_data: Option<PathBuf>,
    /// Fully observed ground-truth data CSV
    #[arg(long)]
    pub truth_data: Option<PathBuf>,
    /// Also score mean/majority baselines (needs --train-data)
    #[arg(long)]
    pub baselines: bool,
    /// Training data CSV supplying baseline column statistics
    #[arg(long)]
    pub train_data: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if args.pred_edges.is_some() {
        cfg.pred_edges = args.pred_edges;
    }
    if args.archive.is_some() {
        cfg.archive = args.archive;
    }
    if args.truth_edges.is_some() {
        cfg.truth_edges = args.truth_edges;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    if args.hierarchy.is_some() {
        cfg.hierarchy = args.hierarchy;
    }
    if args.imputed.is_some() {
        cfg.imputed = args.imputed;
    }
    if args.missing_data.is_some() {
        cfg.missing_data = args.missing_data;
    }
    if args.truth_data.is_some() {
        cfg.truth_data = args.truth_data;
    }
    if args.baselines {
        cfg.baselines = true;
    }
    if args.train_data.is_some() {
        cfg.train_data = args.train_data;
    }
    cfg.validate()?;
    let out = persist_effective(&cfg, "evaluate")?;

    let mut kv: Vec<(String, f64)> = Vec::new();
    let mut report = String::new();

    let wants_structure =
        cfg.truth_edges.is_some() || cfg.pred_edges.is_some() || cfg.archive.is_some();
    if wants_structure {
        evaluate_structure(&cfg, &out, &mut kv, &mut report)?;
    }
    let wants_imputation =
        cfg.imputed.is_some() || cfg.missing_data.is_some() || cfg.truth_data.is_some();
    if wants_imputation {
        evaluate_imputation(&cfg, &mut kv, &mut report)?;
    }
    if kv.is_empty() {
        return Err(Error::Contract(
            "nothing to evaluate: pass structure inputs (--pred-edges/--archive with \
             --truth-edges) and/or imputation inputs (--imputed --missing-data --truth-data)"
                .into(),
        ));
    }

    let borrowed: Vec<(&str, f64)> = kv.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    write_kv_csv(&out.join("metrics.csv"), &borrowed)?;
    std::fs::write(out.join("metrics.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn evaluate_structure(
    cfg: &RunConfig,
    out: &Path,
    kv: &mut Vec<(String, f64)>,
    report: &mut String,
) -> Result<()> {
    let truth_path = cfg.truth_edges.as_ref().ok_or_else(|| {
        Error::Contract("structure evaluation needs --truth-edges".into())
    })?;
    let pred = match (&cfg.pred_edges, &cfg.archive) {
        (Some(path), _) => HardGraph::read_edge_csv(path, None)?,
        (None, Some(path)) => {
            let model = load_model(path)?;
            harden(&model.graph, cfg.threshold, model.spec.group_names())?
        }
        (None, None) => {
            return Err(Error::Contract(
                "structure evaluation needs --pred-edges or --archive".into(),
            ))
        }
    };
    let truth = HardGraph::read_edge_csv(truth_path, None)?;
    // edge lists omit isolated nodes, so align both graphs on the union of
    // their label sets before scoring
    let mut labels = pred.labels().to_vec();
    for l in truth.labels() {
        if !labels.contains(l) {
            labels.push(l.clone());
        }
    }
    let align = |g: &HardGraph| -> Result<HardGraph> {
        let at = |i: usize| labels.iter().position(|l| l == &g.labels()[i]).expect("union label");
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j)| (at(i), at(j))).collect();
        HardGraph::from_edges(&labels, &edges)
    };
    let (pred, truth) = (align(&pred)?, align(&truth)?);
    let scores = structure_metrics(&pred, &truth)?;
    kv.extend(scores.kv().into_iter().map(|(k, v)| (k.to_string(), v)));
    writeln!(report, "structure\n{scores}\n").expect("string write");

    if let Some(hier_path) = &cfg.hierarchy {
        let hierarchy = read_hierarchy(hier_path)?;
        let rollup = group_rollup(&pred, &hierarchy)?;
        kv.push(("rollup_inside_fraction".into(), rollup.inside_fraction));
        write_rollup_csv(&out.join("rollup.csv"), &rollup)?;
        writeln!(report, "{}", render_rollup(&rollup)).expect("string write");
    }
    Ok(())
}

fn evaluate_imputation(
    cfg: &RunConfig,
    kv: &mut Vec<(String, f64)>,
    report: &mut String,
) -> Result<()> {
    let (imputed_path, missing_path, truth_path) =
        match (&cfg.imputed, &cfg.missing_data, &cfg.truth_data) {
            (Some(i), Some(m), Some(t)) => (i, m, t),
            _ => {
                return Err(Error::Contract(
                    "imputation evaluation needs --imputed, --missing-data and --truth-data"
                        .into(),
                ))
            }
        };
    let truth = load_csv(truth_path, None)?;
    let missing = load_csv(missing_path, None)?;
    let imputed = load_csv(imputed_path, None)?;
    for (name, ds) in [("missing-data", &missing), ("imputed", &imputed)] {
        if ds.variable_names() != truth.variable_names() || ds.n_rows() != truth.n_rows() {
            return Err(Error::Contract(format!(
                "{name} file does not line up with the truth data ({} x {} vs {} x {})",
                ds.n_rows(),
                ds.n_vars(),
                truth.n_rows(),
                truth.n_vars()
            )));
        }
    }

    // held-out set: hidden before imputation, known in the truth file
    let eval_mask: Vec<bool> = missing
        .observed_flat()
        .iter()
        .zip(truth.observed_flat())
        .map(|(&was_observed, &in_truth)| !was_observed && in_truth)
        .collect();
    let n_eval = eval_mask.iter().filter(|&&e| e).count();
    log::info!("scoring {n_eval} held-out cells");

    let filled_mask: Vec<bool> = missing.observed_flat().iter().map(|&o| !o).collect();
    let model_imp = Imputation {
        values: imputed.values_flat().to_vec(),
        filled_mask,
        rows: truth.n_rows(),
        cols: truth.n_vars(),
    };
    // variable kinds as inferred from the fully observed truth file
    let kinds = truth.spec().kinds();
    let scores = predictive_scores(&model_imp, truth.values_flat(), &eval_mask, kinds)?;
    let model_report = imputation_metrics(&scores);
    kv.extend(model_report.kv().into_iter().map(|(k, v)| (format!("model_{k}"), v)));
    writeln!(report, "imputation\nmodel: {model_report}").expect("string write");

    if cfg.baselines {
        let train_path = cfg.train_data.as_ref().ok_or_else(|| {
            Error::Contract("--baselines needs --train-data for column statistics".into())
        })?;
        let train = load_csv(train_path, None)?;
        for (label, method) in
            [("mean", BaselineMethod::Mean), ("majority", BaselineMethod::Majority)]
        {
            let base = baseline_impute(
                &train,
                missing.values_flat(),
                missing.observed_flat(),
                missing.n_rows(),
                method,
            )?;
            let base_scores = predictive_scores(&base, truth.values_flat(), &eval_mask, kinds)?;
            let base_report = imputation_metrics(&base_scores);
            kv.extend(
                base_report
                    .kv()
                    .into_iter()
                    .map(|(k, v)| (format!("baseline_{label}_{k}"), v)),
            );
            writeln!(report, "baseline {label}: {base_report}").expect("string write");
        }
    }
    writeln!(report).expect("string write");
    Ok(())
}

/// Read a `node,parent` mapping CSV.
fn read_hierarchy(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "node,parent" => {}
        other => {
            return Err(Error::Data(format!(
                "{}: expected a `node,parent` header, found {:?}",
                path.display(),
                other.unwrap_or_default()
            )))
        }
    }
    let mut map = HashMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (node, parent) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}: row {}: expected `node,parent`", path.display(), i + 2))
        })?;
        if map.insert(node.trim().to_string(), parent.trim().to_string()).is_some() {
            return Err(Error::Data(format!(
                "{}: row {}: node '{}' mapped twice",
                path.display(),
                i + 2,
                node.trim()
            )));
        }
    }
    Ok(map)
}

fn write_rollup_csv(path: &Path, rollup: &GroupRollup) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "parent,{}", rollup.parents.join(","))?;
    for (a, parent) in rollup.parents.iter().enumerate() {
        write!(file, "{parent}")?;
        for b in 0..rollup.parents.len() {
            write!(file, ",{}", rollup.count(a, b))?;
        }
        writeln!(file)?;
    }
    Ok(())
}

fn render_rollup(rollup: &GroupRollup) -> String {
    let mut s = String::from("edge counts by parent (rows = source)\n");
    let width = rollup.parents.iter().map(|p| p.len()).max().unwrap_or(0).max(5);
    let _ = write!(s, "{:>width$}", "");
    for p in &rollup.parents {
        let _ = write!(s, " {p:>width$}");
    }
    s.push('\n');
    for (a, p) in rollup.parents.iter().enumerate() {
        let _ = write!(s, "{p:>width$}");
        for b in 0..rollup.parents.len() {
            let _ = write!(s, " {:>width$}", rollup.count(a, b));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "within-parent fraction: {:.3}", rollup.inside_fraction);
    s
}
