//! Posterior-predictive imputation of missing entries.
//!
//! For a test batch the missing-entry predictive is estimated by Monte
//! Carlo: each draw samples a soft adjacency from the edge posterior and a
//! latent from the encoder posterior, decodes, and the per-entry
//! likelihood means (continuous) or probabilities (binary) are averaged
//! over draws.  Observed entries pass through untouched.

use crate::error::{Error, Result};
use crate::graph::{sample_soft, GraphPosterior, HardGraph};
use crate::model::{decode, encode, GroupSpec, ModelParams, VarKind};
use crate::tensor::Rng;

/// Monte-Carlo draws used when no explicit count is requested.
pub const DEFAULT_MC_SAMPLES: usize = 100;

/// How the adjacency is produced for each Monte-Carlo draw: a fresh soft
/// sample per draw (keeps test-time behavior consistent with training),
/// or one fixed thresholded graph across draws.
pub enum GraphDraw<'a> {
    Soft { posterior: &'a GraphPosterior, tau: f64 },
    Hard(&'a HardGraph),
}

/// Completed batch: observed entries verbatim, missing entries replaced by
/// their predictive mean / probability.
pub struct Imputation {
    /// Row-major `rows x cols` values.
    pub values: Vec<f64>,
    /// True exactly where a value was imputed.
    pub filled_mask: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

/// Impute the missing entries of `batch` rows.  `values`/`observed` are
/// row-major `batch x D`; unobserved `values` entries are ignored.
pub fn impute(
    values: &[f64],
    observed: &[bool],
    batch: usize,
    spec: &GroupSpec,
    params: &ModelParams,
    graph: GraphDraw,
    mc_samples: usize,
    rng: &mut Rng,
) -> Result<Imputation> {
    let d = spec.num_vars();
    let m = spec.num_groups();
    if values.len() != batch * d || observed.len() != batch * d {
        return Err(Error::Dimension(format!(
            "{} values / {} mask entries for {batch} x {d} data",
            values.len(),
            observed.len()
        )));
    }
    if mc_samples == 0 {
        return Err(Error::Contract("mc_samples must be at least 1".into()));
    }
    let hard_adjacency = match &graph {
        GraphDraw::Soft { posterior, tau } => {
            if posterior.num_nodes() != m {
                return Err(Error::Contract(format!(
                    "graph posterior over {} nodes for {m} groups",
                    posterior.num_nodes()
                )));
            }
            if !(*tau > 0.0) {
                return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
            }
            None
        }
        GraphDraw::Hard(h) => {
            if h.num_nodes() != m {
                return Err(Error::Contract(format!(
                    "hard graph over {} nodes for {m} groups",
                    h.num_nodes()
                )));
            }
            Some(h.adjacency_tensor())
        }
    };

    let mut sum = vec![0.0; batch * d];
    for _ in 0..mc_samples {
        let g = match &graph {
            GraphDraw::Soft { posterior, tau } => sample_soft(posterior, *tau, rng)?,
            GraphDraw::Hard(_) => hard_adjacency.as_ref().expect("built above").clone(),
        };
        let state = encode(values, observed, batch, spec, params, rng)?;
        let means = decode(&state, &g, spec, params)?;
        for (acc, v) in sum.iter_mut().zip(means.data().iter()) {
            *acc += v;
        }
    }
    let scale = 1.0 / mc_samples as f64;
    let mut out = Vec::with_capacity(batch * d);
    let mut filled = Vec::with_capacity(batch * d);
    for idx in 0..batch * d {
        if observed[idx] {
            out.push(values[idx]);
            filled.push(false);
        } else {
            out.push(sum[idx] * scale);
            filled.push(true);
        }
    }
    Ok(Imputation { values: out, filled_mask: filled, rows: batch, cols: d })
}

/// Aligned (prediction, truth) pairs for one variable, ready for metric
/// computation.
pub struct VariableScores {
    pub kind: VarKind,
    pub predictions: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Extract per-variable prediction/truth pairs at the held-out entries in
/// `eval_mask`.  Every evaluated entry must be one the imputation actually
/// filled; scoring an observed (passed-through) entry is a contract error.
pub fn predictive_scores(
    imp: &Imputation,
    truth: &[f64],
    eval_mask: &[bool],
    kinds: &[VarKind],
) -> Result<Vec<VariableScores>> {
    let (rows, cols) = (imp.rows, imp.cols);
    if truth.len() != rows * cols || eval_mask.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{} truth / {} eval entries for {rows} x {cols} imputation",
            truth.len(),
            eval_mask.len()
        )));
    }
    if kinds.len() != cols {
        return Err(Error::Dimension(format!(
            "{} kinds for {cols} variables",
            kinds.len()
        )));
    }
    let mut out: Vec<VariableScores> = kinds
        .iter()
        .map(|&kind| VariableScores { kind, predictions: Vec::new(), truth: Vec::new() })
        .collect();
    for r in 0..rows {
        for v in 0..cols {
            let idx = r * cols + v;
            if !eval_mask[idx] {
                continue;
            }
            if !imp.filled_mask[idx] {
                return Err(Error::Contract(format!(
                    "eval_mask selects row {r}, variable {v}, which was observed, not imputed"
                )));
            }
            out[v].predictions.push(imp.values[idx]);
            out[v].truth.push(truth[idx]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::streams;

    fn mixed_spec() -> GroupSpec {
        GroupSpec::singletons(
            &["c0".to_string(), "b1".to_string(), "c2".to_string()],
            vec![VarKind::Continuous, VarKind::Binary, VarKind::Continuous],
        )
        .unwrap()
    }

    fn small_model(spec: &GroupSpec, seed: u64) -> (ModelParams, GraphPosterior) {
        let mut rng = Rng::new(seed, streams::INIT);
        let params = ModelParams::new(spec, 4, 2, 1.0, 0.1, &mut rng).unwrap();
        let graph = GraphPosterior::new(spec.num_groups(), 0.4, 0.3).unwrap();
        (params, graph)
    }

    #[test]
    fn fully_observed_rows_pass_through_exactly() {
        let spec = mixed_spec();
        let (params, graph) = small_model(&spec, 1);
        let values = vec![0.25, 1.0, -3.5, 0.125, 0.0, 7.0];
        let observed = vec![true; 6];
        let mut rng = Rng::new(2, streams::IMPUTE);
        let imp = impute(
            &values,
            &observed,
            2,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &graph, tau: 0.5 },
            3,
            &mut rng,
        )
        .unwrap();
        assert_eq!(imp.values, values);
        assert!(imp.filled_mask.iter().all(|&f| !f));
    }

    #[test]
    fn only_missing_entries_are_filled_and_binary_stays_in_range() {
        let spec = mixed_spec();
        let (params, graph) = small_model(&spec, 3);
        let values = vec![0.5, f64::NAN, f64::NAN, -1.0, 1.0, 2.0];
        let observed = vec![true, false, false, true, true, true];
        let mut rng = Rng::new(4, streams::IMPUTE);
        let imp = impute(
            &values,
            &observed,
            2,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &graph, tau: 0.5 },
            5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(imp.filled_mask, vec![false, true, true, false, false, false]);
        assert_eq!(imp.values[0], 0.5);
        assert_eq!(&imp.values[3..], &[-1.0, 1.0, 2.0]);
        assert!(imp.values[1] > 0.0 && imp.values[1] < 1.0, "binary predictive {} out of range", imp.values[1]);
        assert!(imp.values[2].is_finite());
    }

    #[test]
    fn same_seed_reproduces_bitwise_different_seed_does_not() {
        let spec = mixed_spec();
        let (params, graph) = small_model(&spec, 5);
        let values = vec![0.5, f64::NAN, 0.25];
        let observed = vec![true, false, true];
        let run = |seed: u64| {
            let mut rng = Rng::new(seed, streams::IMPUTE);
            impute(
                &values,
                &observed,
                1,
                &spec,
                &params,
                GraphDraw::Soft { posterior: &graph, tau: 0.5 },
                7,
                &mut rng,
            )
            .unwrap()
            .values
        };
        assert_eq!(run(10), run(10));
        assert_ne!(run(10), run(11));
    }

    #[test]
    fn monte_carlo_estimate_converges_to_the_many_sample_mean() {
        let spec = mixed_spec();
        let (params, graph) = small_model(&spec, 6);
        let values = vec![0.8, f64::NAN, f64::NAN];
        let observed = vec![true, false, false];
        let one = |seed: u64| {
            let mut rng = Rng::new(seed, streams::IMPUTE);
            impute(
                &values,
                &observed,
                1,
                &spec,
                &params,
                GraphDraw::Soft { posterior: &graph, tau: 0.5 },
                1,
                &mut rng,
            )
            .unwrap()
            .values[2]
        };
        let mut rng = Rng::new(1000, streams::IMPUTE);
        let big = impute(
            &values,
            &observed,
            1,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &graph, tau: 0.5 },
            10_000,
            &mut rng,
        )
        .unwrap()
        .values[2];

        // per-draw spread from independent single-sample runs
        let singles: Vec<f64> = (0..40).map(|s| one(s as u64)).collect();
        let mean = singles.iter().sum::<f64>() / 40.0;
        let var = singles.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 39.0;
        let sd = var.sqrt();
        assert!(sd > 0.0, "draws should vary");
        // the big estimate agrees with the singles' mean within Monte-Carlo
        // error of the 40-sample mean (its own error is 100x smaller)
        assert!(
            (mean - big).abs() < 3.0 * sd / (40.0_f64).sqrt(),
            "singles mean {mean} vs 10^4-draw estimate {big} (sd {sd})"
        );
        // and any one single-sample imputation deviates by a few sd at most
        assert!((singles[0] - big).abs() < 4.0 * sd);
    }

    #[test]
    fn saturated_soft_posterior_matches_the_hard_graph() {
        // logits at +-100 make every soft sample exactly 0/1, and a pinned
        // log-std makes the latent draw deterministic, so soft and hard
        // imputation coincide up to the residual exp(-30) sampler noise
        let spec = mixed_spec();
        let mut rng = Rng::new(7, streams::INIT);
        let mut params = ModelParams::new(&spec, 4, 2, 1.0, 0.1, &mut rng).unwrap();
        params.set_log_std_bounds(-30.0, -30.0);
        let logits = vec![
            0.0, 100.0, -100.0, //
            -100.0, 0.0, 100.0, //
            -100.0, -100.0, 0.0,
        ];
        let posterior = GraphPosterior::from_logits(3, logits, 0.3).unwrap();
        let labels: Vec<String> = spec.group_names().to_vec();
        let hard = crate::graph::harden(&posterior, 0.5, &labels).unwrap();
        assert_eq!(hard.edges(), vec![(0, 1), (1, 2)]);

        let values = vec![0.9, f64::NAN, f64::NAN];
        let observed = vec![true, false, false];
        let mut r1 = Rng::new(8, streams::IMPUTE);
        let soft = impute(
            &values,
            &observed,
            1,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &posterior, tau: 0.5 },
            1,
            &mut r1,
        )
        .unwrap();
        let mut r2 = Rng::new(9, streams::IMPUTE);
        let hard = impute(&values, &observed, 1, &spec, &params, GraphDraw::Hard(&hard), 1, &mut r2).unwrap();
        for (a, b) in soft.values.iter().zip(hard.values.iter()) {
            assert!((a - b).abs() < 1e-9, "soft {a} vs hard {b}");
        }
    }

    #[test]
    fn reimputing_a_completed_batch_changes_nothing() {
        let spec = mixed_spec();
        let (params, graph) = small_model(&spec, 11);
        let values = vec![0.5, f64::NAN, 0.25, f64::NAN, 1.0, -0.75];
        let observed = vec![true, false, true, false, true, true];
        let mut rng = Rng::new(12, streams::IMPUTE);
        let first = impute(
            &values,
            &observed,
            2,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &graph, tau: 0.5 },
            4,
            &mut rng,
        )
        .unwrap();
        // the completed batch is fully observed; a second pass is identity
        let all = vec![true; 6];
        let mut rng = Rng::new(13, streams::IMPUTE);
        let second = impute(
            &first.values,
            &all,
            2,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &graph, tau: 0.5 },
            4,
            &mut rng,
        )
        .unwrap();
        assert_eq!(second.values, first.values);
        assert!(second.filled_mask.iter().all(|&f| !f));
    }

    #[test]
    fn predictive_scores_extract_the_held_out_pairs() {
        let imp = Imputation {
            values: vec![0.1, 0.9, 0.3, 0.4, 0.7, 0.6],
            filled_mask: vec![false, true, true, true, false, true],
            rows: 2,
            cols: 3,
        };
        let truth = vec![0.1, 1.0, 0.35, 0.38, 0.7, 0.65];
        let kinds = vec![VarKind::Continuous, VarKind::Binary, VarKind::Continuous];

        // empty mask -> empty arrays
        let none = predictive_scores(&imp, &truth, &[false; 6], &kinds).unwrap();
        assert!(none.iter().all(|s| s.predictions.is_empty()));

        let eval = vec![false, true, false, true, false, true];
        let scores = predictive_scores(&imp, &truth, &eval, &kinds).unwrap();
        let total: usize = scores.iter().map(|s| s.predictions.len()).sum();
        assert_eq!(total, eval.iter().filter(|&&e| e).count());
        assert_eq!(scores[0].predictions, vec![0.4]);
        assert_eq!(scores[0].truth, vec![0.38]);
        assert_eq!(scores[1].predictions, vec![0.9]);
        assert_eq!(scores[2].predictions, vec![0.6]);
        assert_eq!(scores[1].kind, VarKind::Binary);

        // selecting an observed entry is a contract violation
        let bad = vec![true, false, false, false, false, false];
        assert!(matches!(
            predictive_scores(&imp, &truth, &bad, &kinds),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn argument_validation() {
        let spec = mixed_spec();
        let (params, graph) = small_model(&spec, 20);
        let values = vec![0.0; 3];
        let observed = vec![true; 3];
        let mut rng = Rng::new(1, streams::IMPUTE);
        // zero draws
        assert!(impute(
            &values,
            &observed,
            1,
            &spec,
            &params,
            GraphDraw::Soft { posterior: &graph, tau: 0.5 },
            0,
            &mut rng
        )
        .is_err());
        // wrong posterior size
        let wrong = GraphPosterior::new(4, 0.4, 0.3).unwrap();
        assert!(matches!(
            impute(
                &values,
                &observed,
                1,
                &spec,
                &params,
                GraphDraw::Soft { posterior: &wrong, tau: 0.5 },
                1,
                &mut rng
            ),
            Err(Error::Contract(_))
        ));
    }
}
