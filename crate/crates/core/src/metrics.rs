//! Evaluation metrics: structure recovery, imputation quality, reference
//! baselines and group-hierarchy rollups.
//!
//! Degenerate cases follow fixed conventions so aggregate tables never
//! hold undefined cells: with no predicted edges precision is 0, with no
//! true edges recall is 1 (vacuously), and two empty graphs agree
//! perfectly.  Binary classification metrics go absent (`None`) instead
//! of NaN when the evaluated truth is single-class.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::HardGraph;
use crate::impute::{Imputation, VariableScores};
use crate::model::VarKind;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

// ---------------------------------------------------------------------------
// Structure metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(matches: usize, n_pred: usize, n_truth: usize) -> PrfScores {
    if n_pred == 0 && n_truth == 0 {
        return PrfScores { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let precision = if n_pred == 0 { 0.0 } else { matches as f64 / n_pred as f64 };
    let recall = if n_truth == 0 { 1.0 } else { matches as f64 / n_truth as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrfScores { precision, recall, f1 }
}

/// Structure-recovery scores of a predicted graph against ground truth:
/// skeleton (undirected) and orientation (directed) precision/recall/F1,
/// plus ancestral-pair causal accuracy.
#[derive(Clone, Debug)]
pub struct StructureReport {
    pub adjacency: PrfScores,
    pub orientation: PrfScores,
    pub causal_accuracy: f64,
    pub true_edges: usize,
    pub predicted_edges: usize,
    pub orientation_matches: usize,
}

impl StructureReport {
    /// Flat key/value view for CSV serialization.
    pub fn kv(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("adjacency_precision", self.adjacency.precision),
            ("adjacency_recall", self.adjacency.recall),
            ("adjacency_f1", self.adjacency.f1),
            ("orientation_precision", self.orientation.precision),
            ("orientation_recall", self.orientation.recall),
            ("orientation_f1", self.orientation.f1),
            ("causal_accuracy", self.causal_accuracy),
            ("true_edges", self.true_edges as f64),
            ("predicted_edges", self.predicted_edges as f64),
            ("orientation_matches", self.orientation_matches as f64),
        ]
    }
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "                 precision  recall      f1")?;
        writeln!(
            f,
            "adjacency         {:>8.3} {:>7.3} {:>7.3}",
            self.adjacency.precision, self.adjacency.recall, self.adjacency.f1
        )?;
        writeln!(
            f,
            "orientation       {:>8.3} {:>7.3} {:>7.3}",
            self.orientation.precision, self.orientation.recall, self.orientation.f1
        )?;
        writeln!(f, "causal accuracy   {:>8.3}", self.causal_accuracy)?;
        write!(
            f,
            "edges: {} true, {} predicted, {} oriented matches",
            self.true_edges, self.predicted_edges, self.orientation_matches
        )
    }
}

fn check_same_nodes(pred: &HardGraph, truth: &HardGraph) -> Result<()> {
    if pred.labels() != truth.labels() {
        return Err(Error::Contract(format!(
            "graphs cover different node sets ({} vs {} nodes)",
            pred.num_nodes(),
            truth.num_nodes()
        )));
    }
    Ok(())
}

fn skeleton(g: &HardGraph) -> HashSet<(usize, usize)> {
    g.edges()
        .into_iter()
        .map(|(i, j)| if i < j { (i, j) } else { (j, i) })
        .collect()
}

/// Skeleton and orientation precision/recall/F1 plus causal accuracy.
pub fn structure_metrics(pred: &HardGraph, truth: &HardGraph) -> Result<StructureReport> {
    check_same_nodes(pred, truth)?;
    let pred_dir: HashSet<(usize, usize)> = pred.edges().into_iter().collect();
    let truth_dir: HashSet<(usize, usize)> = truth.edges().into_iter().collect();
    let pred_skel = skeleton(pred);
    let truth_skel = skeleton(truth);

    let skel_matches = pred_skel.intersection(&truth_skel).count();
    let dir_matches = pred_dir.intersection(&truth_dir).count();
    Ok(StructureReport {
        adjacency: prf(skel_matches, pred_skel.len(), truth_skel.len()),
        orientation: prf(dir_matches, pred_dir.len(), truth_dir.len()),
        causal_accuracy: causal_accuracy(pred, truth)?,
        true_edges: truth_dir.len(),
        predicted_edges: pred_dir.len(),
        orientation_matches: dir_matches,
    })
}

fn ancestral_pairs(g: &HardGraph) -> HashSet<(usize, usize)> {
    let m = g.num_nodes();
    let mut reach = vec![false; m * m];
    for (i, j) in g.edges() {
        reach[i * m + j] = true;
    }
    // Floyd–Warshall transitive closure
    for k in 0..m {
        for i in 0..m {
            if reach[i * m + k] {
                for j in 0..m {
                    if reach[k * m + j] {
                        reach[i * m + j] = true;
                    }
                }
            }
        }
    }
    let mut out = HashSet::new();
    for i in 0..m {
        for j in 0..m {
            if i != j && reach[i * m + j] {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Fraction of the truth's ancestral pairs (ordered `(i, j)` with a
/// directed path `i` to `j`) that the prediction also realizes; 1 when
/// the truth has no edges.
pub fn causal_accuracy(pred: &HardGraph, truth: &HardGraph) -> Result<f64> {
    check_same_nodes(pred, truth)?;
    let truth_anc = ancestral_pairs(truth);
    if truth_anc.is_empty() {
        return Ok(1.0);
    }
    let pred_anc = ancestral_pairs(pred);
    Ok(pred_anc.intersection(&truth_anc).count() as f64 / truth_anc.len() as f64)
}

// ---------------------------------------------------------------------------
// Imputation metrics
// ---------------------------------------------------------------------------

/// Pooled imputation quality over held-out entries.  Continuous fields are
/// absent when no continuous pairs were evaluated, binary fields when no
/// binary pairs were; AUROC/AUPR are additionally absent for single-class
/// truth.
#[derive(Clone, Debug)]
pub struct ImputationReport {
    pub rmse: Option<f64>,
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_evaluated: usize,
}

impl ImputationReport {
    pub fn kv(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("n_evaluated", self.n_evaluated as f64)];
        if let Some(x) = self.rmse {
            out.push(("rmse", x));
        }
        if let Some(x) = self.accuracy {
            out.push(("accuracy", x));
        }
        if let Some(x) = self.auroc {
            out.push(("auroc", x));
        }
        if let Some(x) = self.aupr {
            out.push(("aupr", x));
        }
        out
    }
}

impl fmt::Display for ImputationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} entries evaluated", self.n_evaluated)?;
        if let Some(x) = self.rmse {
            write!(f, ", rmse {x:.4}")?;
        }
        if let Some(x) = self.accuracy {
            write!(f, ", accuracy {x:.4}")?;
        }
        if let Some(x) = self.auroc {
            write!(f, ", auroc {x:.4}")?;
        }
        if let Some(x) = self.aupr {
            write!(f, ", aupr {x:.4}")?;
        }
        Ok(())
    }
}

/// Mann–Whitney AUROC with midrank tie handling (ties score half credit);
/// `None` when either class is empty.
pub fn auroc(predictions: &[f64], truth: &[f64]) -> Option<f64> {
    let n = predictions.len();
    let n_pos = truth.iter().filter(|&&t| t == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predictions[a].partial_cmp(&predictions[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && predictions[order[j]] == predictions[order[i]] {
            j += 1;
        }
        // midrank of the tie group occupying ranks i+1..=j (1-based)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if truth[idx] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve with step (not trapezoidal)
/// interpolation, tie groups moved across the threshold atomically;
/// `None` when either class is empty.
pub fn aupr(predictions: &[f64], truth: &[f64]) -> Option<f64> {
    let n = predictions.len();
    let n_pos = truth.iter().filter(|&&t| t == 1.0).count();
    if n_pos == 0 || n_pos == n {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predictions[b].partial_cmp(&predictions[a]).expect("finite scores"));
    let mut area = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && predictions[order[j]] == predictions[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if truth[idx] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(area)
}

/// Pooled report over per-variable score arrays (as produced by
/// `predictive_scores`): RMSE across all continuous pairs, accuracy at
/// threshold 0.5 plus AUROC/AUPR across all binary pairs.
pub fn imputation_metrics(scores: &[VariableScores]) -> ImputationReport {
    let mut sq_sum = 0.0;
    let mut n_cont = 0usize;
    let mut bin_pred: Vec<f64> = Vec::new();
    let mut bin_truth: Vec<f64> = Vec::new();
    for s in scores {
        match s.kind {
            VarKind::Continuous => {
                for (p, t) in s.predictions.iter().zip(s.truth.iter()) {
                    sq_sum += (p - t) * (p - t);
                    n_cont += 1;
                }
            }
            VarKind::Binary => {
                bin_pred.extend_from_slice(&s.predictions);
                bin_truth.extend_from_slice(&s.truth);
            }
        }
    }
    let rmse = (n_cont > 0).then(|| (sq_sum / n_cont as f64).sqrt());
    let accuracy = (!bin_truth.is_empty()).then(|| {
        let correct = bin_pred
            .iter()
            .zip(bin_truth.iter())
            .filter(|&(&p, &t)| (if p >= 0.5 { 1.0 } else { 0.0 }) == t)
            .count();
        correct as f64 / bin_truth.len() as f64
    });
    ImputationReport {
        rmse,
        accuracy,
        auroc: auroc(&bin_pred, &bin_truth),
        aupr: aupr(&bin_pred, &bin_truth),
        n_evaluated: n_cont + bin_truth.len(),
    }
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Fill every missing entry with the training column mean.
    Mean,
    /// Fill binary columns with the more frequent training class (ties
    /// favor 1); continuous columns fall back to the mean.
    Majority,
}

/// Column-statistic imputation of a test batch from training-set
/// statistics.  Columns with zero observed training cells fall back to
/// the kind's neutral fill (0 continuous, 0.5 binary) with a warning.
pub fn baseline_impute(
    train: &Dataset,
    values: &[f64],
    observed: &[bool],
    batch: usize,
    method: BaselineMethod,
) -> Result<Imputation> {
    let d = train.n_vars();
    if values.len() != batch * d || observed.len() != batch * d {
        return Err(Error::Dimension(format!(
            "{} values / {} mask entries for {batch} x {d} data",
            values.len(),
            observed.len()
        )));
    }
    let mut fills = Vec::with_capacity(d);
    for v in 0..d {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut ones = 0usize;
        for r in 0..train.n_rows() {
            if let Some(x) = train.value(r, v) {
                sum += x;
                count += 1;
                if x == 1.0 {
                    ones += 1;
                }
            }
        }
        let kind = train.spec().kind(v);
        let fill = if count == 0 {
            log::warn!(
                "variable '{}' has no observed training cells; using the neutral fill",
                train.variable_names()[v]
            );
            match kind {
                VarKind::Continuous => 0.0,
                VarKind::Binary => 0.5,
            }
        } else {
            match (method, kind) {
                (BaselineMethod::Majority, VarKind::Binary) => {
                    // ties go to 1
                    if 2 * ones >= count { 1.0 } else { 0.0 }
                }
                _ => sum / count as f64,
            }
        };
        fills.push(fill);
    }
    let mut out = Vec::with_capacity(batch * d);
    let mut filled = Vec::with_capacity(batch * d);
    for idx in 0..batch * d {
        if observed[idx] {
            out.push(values[idx]);
            filled.push(false);
        } else {
            out.push(fills[idx % d]);
            filled.push(true);
        }
    }
    Ok(Imputation { values: out, filled_mask: filled, rows: batch, cols: d })
}

// ---------------------------------------------------------------------------
// Rollup
// ---------------------------------------------------------------------------

/// Predicted edge counts rolled up to a coarser label level.
#[derive(Clone, Debug)]
pub struct GroupRollup {
    /// Sorted parent labels indexing the count matrix.
    pub parents: Vec<String>,
    /// Row-major `parents x parents` edge counts (source row, target column).
    pub counts: Vec<usize>,
    /// Fraction of edges whose endpoints share a parent; 0 with no edges.
    pub inside_fraction: f64,
}

impl GroupRollup {
    pub fn count(&self, src: usize, dst: usize) -> usize {
        self.counts[src * self.parents.len() + dst]
    }
}

/// Roll predicted edges up a hierarchy (`node label -> parent label`).
/// Every node with at least one incident edge must be mapped.
pub fn group_rollup(pred: &HardGraph, hierarchy: &HashMap<String, String>) -> Result<GroupRollup> {
    let mut parent_set: BTreeMap<&str, ()> = BTreeMap::new();
    for label in pred.labels() {
        if let Some(p) = hierarchy.get(label) {
            parent_set.insert(p, ());
        }
    }
    let parents: Vec<String> = parent_set.keys().map(|p| p.to_string()).collect();
    let index: HashMap<&str, usize> = parents.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let p = parents.len();
    let mut counts = vec![0usize; p * p];
    let mut total = 0usize;
    let mut inside = 0usize;
    for (i, j) in pred.edges() {
        let src = hierarchy.get(&pred.labels()[i]).ok_or_else(|| {
            Error::Data(format!("node '{}' is not mapped in the hierarchy", pred.labels()[i]))
        })?;
        let dst = hierarchy.get(&pred.labels()[j]).ok_or_else(|| {
            Error::Data(format!("node '{}' is not mapped in the hierarchy", pred.labels()[j]))
        })?;
        let (a, b) = (index[src.as_str()], index[dst.as_str()]);
        counts[a * p + b] += 1;
        total += 1;
        if a == b {
            inside += 1;
        }
    }
    let inside_fraction = if total == 0 { 0.0 } else { inside as f64 / total as f64 };
    Ok(GroupRollup { parents, counts, inside_fraction })
}

/// Write a flat key/value CSV (`metric,value` header).
pub fn write_kv_csv(path: &Path, entries: &[(&str, f64)]) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "metric,value")?;
    for (k, v) in entries {
        writeln!(file, "{k},{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{streams, Rng};

    fn labels(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("n{i}")).collect()
    }

    fn graph(m: usize, edges: &[(usize, usize)]) -> HardGraph {
        HardGraph::from_edges(&labels(m), edges).unwrap()
    }

    #[test]
    fn identical_graphs_score_one_everywhere() {
        let g = graph(4, &[(0, 1), (1, 2), (0, 3)]);
        let r = structure_metrics(&g, &g).unwrap();
        for s in [r.adjacency, r.orientation] {
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.causal_accuracy, 1.0);
        // two empty graphs also agree perfectly
        let e = graph(3, &[]);
        let r = structure_metrics(&e, &e).unwrap();
        assert_eq!(r.adjacency.f1, 1.0);
        assert_eq!(r.orientation.f1, 1.0);
    }

    #[test]
    fn degenerate_conventions() {
        let empty = graph(3, &[]);
        let truth = graph(3, &[(0, 1), (1, 2)]);
        let r = structure_metrics(&empty, &truth).unwrap();
        assert_eq!(r.adjacency, PrfScores { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(r.orientation.recall, 0.0);
        // predictions against an empty truth: vacuous recall, zero precision
        let r = structure_metrics(&truth, &empty).unwrap();
        assert_eq!(r.adjacency.recall, 1.0);
        assert_eq!(r.adjacency.precision, 0.0);
        assert_eq!(r.adjacency.f1, 0.0);
        assert_eq!(r.causal_accuracy, 1.0, "no ancestral pairs to recover");
    }

    #[test]
    fn orientation_distinguishes_reversed_edges() {
        let truth = graph(2, &[(0, 1)]);
        let rev = graph(2, &[(1, 0)]);
        let r = structure_metrics(&rev, &truth).unwrap();
        assert_eq!(r.adjacency.f1, 1.0, "skeleton ignores direction");
        assert_eq!(r.orientation.f1, 0.0);
        assert_eq!(r.causal_accuracy, 0.0);
    }

    #[test]
    fn causal_accuracy_counts_ancestral_pairs() {
        // chain truth 0 -> 1 -> 2, prediction keeps only the first edge:
        // truth pairs {01, 12, 02}, predicted pairs {01} -> 1/3
        let truth = graph(3, &[(0, 1), (1, 2)]);
        let pred = graph(3, &[(0, 1)]);
        let got = causal_accuracy(&pred, &truth).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn supersets_with_any_extras_keep_causal_accuracy_at_one() {
        // enumerate all 3-node graph pairs with pred including truth
        let m = 3;
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        for t_bits in 0u32..(1 << pairs.len()) {
            let t_edges: Vec<(usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|&(k, _)| t_bits >> k & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            let truth = graph(m, &t_edges);
            for extra_bits in 0u32..(1 << pairs.len()) {
                let p_bits = t_bits | extra_bits;
                let p_edges: Vec<(usize, usize)> = pairs
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| p_bits >> k & 1 == 1)
                    .map(|(_, &e)| e)
                    .collect();
                let pred = graph(m, &p_edges);
                assert_eq!(
                    causal_accuracy(&pred, &truth).unwrap(),
                    1.0,
                    "pred {p_edges:?} should cover truth {t_edges:?}"
                );
            }
        }
    }

    /// Brute-force reference: counts computed by scanning the full
    /// adjacency matrices cell by cell.
    fn oracle_scores(pred: &HardGraph, truth: &HardGraph) -> (PrfScores, PrfScores) {
        let m = pred.num_nodes();
        let (mut skel_p, mut skel_t, mut skel_m) = (0, 0, 0);
        let (mut dir_p, mut dir_t, mut dir_m) = (0, 0, 0);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    let p = pred.edge(i, j);
                    let t = truth.edge(i, j);
                    dir_p += p as usize;
                    dir_t += t as usize;
                    dir_m += (p && t) as usize;
                }
                if i < j {
                    let p = pred.edge(i, j) || pred.edge(j, i);
                    let t = truth.edge(i, j) || truth.edge(j, i);
                    skel_p += p as usize;
                    skel_t += t as usize;
                    skel_m += (p && t) as usize;
                }
            }
        }
        (prf(skel_m, skel_p, skel_t), prf(dir_m, dir_p, dir_t))
    }

    #[test]
    fn structure_scores_match_a_matrix_scan_oracle_on_random_pairs() {
        let mut rng = Rng::new(1, streams::DATA);
        for _ in 0..200 {
            let m = 4;
            let rand_graph = |rng: &mut Rng| {
                let mut edges = Vec::new();
                for i in 0..m {
                    for j in 0..m {
                        if i != j && rng.bernoulli(0.3) {
                            edges.push((i, j));
                        }
                    }
                }
                graph(m, &edges)
            };
            let pred = rand_graph(&mut rng);
            let truth = rand_graph(&mut rng);
            let got = structure_metrics(&pred, &truth).unwrap();
            let (skel, dir) = oracle_scores(&pred, &truth);
            assert_eq!(got.adjacency, skel);
            assert_eq!(got.orientation, dir);
        }
    }

    #[test]
    fn scores_are_invariant_under_node_relabeling() {
        let mut rng = Rng::new(2, streams::DATA);
        for _ in 0..20 {
            let m = 5;
            let mut edges_p = Vec::new();
            let mut edges_t = Vec::new();
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        if rng.bernoulli(0.25) {
                            edges_p.push((i, j));
                        }
                        if rng.bernoulli(0.25) {
                            edges_t.push((i, j));
                        }
                    }
                }
            }
            let mut perm: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut perm);
            let map = |edges: &[(usize, usize)]| -> Vec<(usize, usize)> {
                edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect()
            };
            let a = structure_metrics(&graph(m, &edges_p), &graph(m, &edges_t)).unwrap();
            let b = structure_metrics(&graph(m, &map(&edges_p)), &graph(m, &map(&edges_t))).unwrap();
            assert_eq!(a.adjacency, b.adjacency);
            assert_eq!(a.orientation, b.orientation);
            assert_eq!(a.causal_accuracy, b.causal_accuracy);
        }
    }

    #[test]
    fn node_set_mismatch_is_a_contract_error() {
        let a = graph(3, &[]);
        let b = HardGraph::from_edges(&["x".into(), "y".into(), "z".into()], &[]).unwrap();
        assert!(matches!(structure_metrics(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn auroc_hand_cases_and_tie_rule() {
        // positive outranks both negatives
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[1.0, 0.0, 0.0]), Some(1.0));
        // constant predictor on balanced truth -> 0.5 under midranks
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 1.0, 0.0]), Some(0.5));
        // single class -> absent
        assert_eq!(auroc(&[0.2, 0.6], &[1.0, 1.0]), None);
        // one inversion among 2x2: 3 of 4 pairs correct
        let got = auroc(&[0.9, 0.2, 0.6, 0.4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "{got}");
    }

    /// Trapezoidal ROC integration with tie groups collapsed into single
    /// curve points — the geometric definition the rank statistic must hit
    /// exactly.
    fn roc_trapezoid(predictions: &[f64], truth: &[f64]) -> f64 {
        let n_pos = truth.iter().filter(|&&t| t == 1.0).count();
        let n_neg = truth.len() - n_pos;
        let mut order: Vec<usize> = (0..truth.len()).collect();
        order.sort_by(|&a, &b| predictions[b].partial_cmp(&predictions[a]).unwrap());
        let (mut tp, mut fp) = (0usize, 0usize);
        let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
        let mut area = 0.0;
        let mut i = 0;
        while i < truth.len() {
            let mut j = i;
            while j < truth.len() && predictions[order[j]] == predictions[order[i]] {
                j += 1;
            }
            for &idx in &order[i..j] {
                if truth[idx] == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            let tpr = tp as f64 / n_pos as f64;
            let fpr = fp as f64 / n_neg as f64;
            area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
            prev_tpr = tpr;
            prev_fpr = fpr;
            i = j;
        }
        area
    }

    #[test]
    fn rank_auroc_equals_trapezoidal_roc_on_random_score_sets() {
        let mut rng = Rng::new(3, streams::DATA);
        for case in 0..100 {
            let n = 3 + (case % 20);
            // quantized scores force plenty of ties
            let predictions: Vec<f64> = (0..n).map(|_| (rng.uniform() * 5.0).floor() / 5.0).collect();
            let truth: Vec<f64> = (0..n).map(|_| f64::from(rng.bernoulli(0.4))).collect();
            let n_pos = truth.iter().filter(|&&t| t == 1.0).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let rank = auroc(&predictions, &truth).unwrap();
            let trap = roc_trapezoid(&predictions, &truth);
            assert!(
                (rank - trap).abs() < 1e-12,
                "case {case}: rank {rank} vs trapezoid {trap}"
            );
        }
    }

    #[test]
    fn aupr_hand_cases() {
        // perfect ranking
        assert_eq!(aupr(&[0.9, 0.8, 0.3], &[1.0, 0.0, 0.0]), Some(1.0));
        // positives ranked 2nd and 3rd: 0.5*0.5 + 0.5*(2/3)
        let got = aupr(&[0.9, 0.8, 0.3], &[0.0, 1.0, 1.0]).unwrap();
        assert!((got - (0.25 + 1.0 / 3.0)).abs() < 1e-12, "{got}");
        // one tie group containing one of each class
        assert_eq!(aupr(&[0.5, 0.5], &[1.0, 0.0]), Some(0.5));
        assert_eq!(aupr(&[0.1, 0.2], &[0.0, 0.0]), None);
    }

    #[test]
    fn imputation_report_pools_by_kind() {
        let scores = vec![
            VariableScores {
                kind: VarKind::Continuous,
                predictions: vec![1.0, 2.0],
                truth: vec![1.5, 2.0],
            },
            VariableScores {
                kind: VarKind::Binary,
                predictions: vec![0.9, 0.2, 0.6],
                truth: vec![1.0, 0.0, 0.0],
            },
            VariableScores { kind: VarKind::Continuous, predictions: vec![3.0], truth: vec![2.0] },
        ];
        let r = imputation_metrics(&scores);
        assert_eq!(r.n_evaluated, 6);
        let rmse = r.rmse.unwrap();
        assert!((rmse - ((0.25 + 0.0 + 1.0) / 3.0_f64).sqrt()).abs() < 1e-12);
        // threshold 0.5: predictions 1,0,1 vs truth 1,0,0
        assert!((r.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.auroc.unwrap(), 1.0, "the positive outranks both negatives");

        // continuous-only input leaves binary fields absent
        let r = imputation_metrics(&scores[..1]);
        assert!(r.rmse.is_some() && r.accuracy.is_none() && r.auroc.is_none() && r.aupr.is_none());
    }

    fn toy_train() -> Dataset {
        use crate::model::GroupSpec;
        use ndarray::Array2;
        let names = vec!["c".to_string(), "b".to_string()];
        let spec = GroupSpec::new(
            vec![vec![0], vec![1]],
            names.clone(),
            vec![VarKind::Continuous, VarKind::Binary],
        )
        .unwrap();
        let values = Array2::from_shape_vec(
            (5, 2),
            vec![1.0, 1.0, 3.0, 1.0, f64::NAN, 1.0, 2.0, 0.0, 2.0, f64::NAN],
        )
        .unwrap();
        let observed = Array2::from_shape_vec(
            (5, 2),
            vec![true, true, true, true, false, true, true, true, true, false],
        )
        .unwrap();
        Dataset::new(values, observed, spec, names, "toy".into()).unwrap()
    }

    #[test]
    fn baselines_fill_with_train_statistics() {
        let train = toy_train();
        let values = vec![9.0, f64::NAN, f64::NAN, 1.0];
        let observed = vec![true, false, false, true];
        // column c: observed train values {1,3,2,2} -> mean 2
        // column b: observed train values {1,1,1,0} -> mean 0.75, majority 1
        let mean = baseline_impute(&train, &values, &observed, 2, BaselineMethod::Mean).unwrap();
        assert_eq!(mean.values, vec![9.0, 0.75, 2.0, 1.0]);
        assert_eq!(mean.filled_mask, vec![false, true, true, false]);
        let maj = baseline_impute(&train, &values, &observed, 2, BaselineMethod::Majority).unwrap();
        assert_eq!(maj.values, vec![9.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn majority_ties_go_to_one_and_empty_columns_use_neutral_fills() {
        use crate::model::GroupSpec;
        use ndarray::Array2;
        let names = vec!["b".to_string(), "c".to_string()];
        let spec = GroupSpec::new(
            vec![vec![0], vec![1]],
            names.clone(),
            vec![VarKind::Binary, VarKind::Continuous],
        )
        .unwrap();
        // binary column balanced 1/0 -> tie; continuous column never observed
        let values = Array2::from_shape_vec((2, 2), vec![1.0, f64::NAN, 0.0, f64::NAN]).unwrap();
        let observed = Array2::from_shape_vec((2, 2), vec![true, false, true, false]).unwrap();
        let train = Dataset::new(values, observed, spec, names, String::new()).unwrap();
        let out = baseline_impute(
            &train,
            &[f64::NAN, f64::NAN],
            &[false, false],
            1,
            BaselineMethod::Majority,
        )
        .unwrap();
        assert_eq!(out.values[0], 1.0, "tie must resolve to 1");
        assert_eq!(out.values[1], 0.0, "unobserved continuous column fills 0");
    }

    #[test]
    fn rollup_reproduces_the_published_topic_concentration() {
        // parents A (6 nodes), B (3), C (3); counts [[30,4,3],[2,6,0],[0,0,5]]
        let mut node_labels: Vec<String> = Vec::new();
        let mut hierarchy = HashMap::new();
        for i in 0..6 {
            node_labels.push(format!("a{i}"));
            hierarchy.insert(format!("a{i}"), "A".to_string());
        }
        for i in 0..3 {
            node_labels.push(format!("b{i}"));
            hierarchy.insert(format!("b{i}"), "B".to_string());
        }
        for i in 0..3 {
            node_labels.push(format!("c{i}"));
            hierarchy.insert(format!("c{i}"), "C".to_string());
        }
        let idx = |l: &str| node_labels.iter().position(|x| x == l).unwrap();
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    edges.push((i, j)); // 30 inside A
                }
            }
        }
        for i in 6..9 {
            for j in 6..9 {
                if i != j {
                    edges.push((i, j)); // 6 inside B
                }
            }
        }
        edges.extend([(9, 10), (9, 11), (10, 9), (10, 11), (11, 9)]); // 5 inside C
        edges.extend([(idx("a0"), idx("b0")), (idx("a0"), idx("b1")), (idx("a1"), idx("b0")), (idx("a1"), idx("b1"))]);
        edges.extend([(idx("a0"), idx("c0")), (idx("a0"), idx("c1")), (idx("a1"), idx("c0"))]);
        edges.extend([(idx("b0"), idx("a0")), (idx("b0"), idx("a1"))]);
        let g = HardGraph::from_edges(&node_labels, &edges).unwrap();
        let r = group_rollup(&g, &hierarchy).unwrap();
        assert_eq!(r.parents, vec!["A", "B", "C"]);
        let expect = [[30, 4, 3], [2, 6, 0], [0, 0, 5]];
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(r.count(a, b), expect[a][b], "cell ({a}, {b})");
            }
        }
        assert!((r.inside_fraction - 0.82).abs() < 1e-12, "inside {}", r.inside_fraction);
    }

    #[test]
    fn rollup_edge_cases() {
        let g = graph(3, &[]);
        let h: HashMap<String, String> =
            labels(3).into_iter().map(|l| (l, "P".to_string())).collect();
        let r = group_rollup(&g, &h).unwrap();
        assert_eq!(r.inside_fraction, 0.0);
        assert!(r.counts.iter().all(|&c| c == 0));

        let g = graph(2, &[(0, 1)]);
        let partial: HashMap<String, String> = [("n0".to_string(), "P".to_string())].into();
        assert!(matches!(group_rollup(&g, &partial), Err(Error::Data(_))));
    }

    #[test]
    fn kv_csv_is_flat_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_kv_csv(&path, &[("rmse", 0.25), ("auroc", 0.5)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "metric,value\nrmse,0.25\nauroc,0.5\n");
    }
}
