//! Dataset container, CSV ingestion, MCAR corruption and the synthetic
//! structural-equation generator.
//!
//! A [`Dataset`] couples an `N x D` value matrix with an observation mask
//! and the variable grouping.  Unobserved cells hold a quiet NaN sentinel
//! internally and are never read as values; every constructor enforces
//! that, so downstream code can rely on `observed` alone.

use crate::error::{Error, Result};
use crate::graph::{is_dag, HardGraph};
use crate::model::{GroupSpec, VarKind};
use crate::tensor::Rng;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

pub struct Dataset {
    values: Array2<f64>,
    observed: Array2<bool>,
    spec: GroupSpec,
    variable_names: Vec<String>,
    provenance: String,
}

impl Dataset {
    /// Validated dataset; rewrites every unobserved cell to the NaN
    /// sentinel.  Requires `N >= 1`, `D >= 2`, unique variable names and a
    /// spec covering exactly the `D` variables.
    pub fn new(
        mut values: Array2<f64>,
        observed: Array2<bool>,
        spec: GroupSpec,
        variable_names: Vec<String>,
        provenance: String,
    ) -> Result<Dataset> {
        let (n, d) = values.dim();
        if n == 0 {
            return Err(Error::Data("dataset needs at least one row".into()));
        }
        if d < 2 {
            return Err(Error::Data(format!("dataset needs at least 2 variables, got {d}")));
        }
        if observed.dim() != (n, d) {
            return Err(Error::Dimension(format!(
                "observed mask {:?} does not match values {:?}",
                observed.dim(),
                values.dim()
            )));
        }
        if spec.num_vars() != d {
            return Err(Error::Contract(format!(
                "group spec covers {} variables, data has {d}",
                spec.num_vars()
            )));
        }
        if variable_names.len() != d {
            return Err(Error::Contract(format!(
                "{} variable names for {d} variables",
                variable_names.len()
            )));
        }
        let mut uniq = variable_names.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != d {
            return Err(Error::Data("variable names must be unique".into()));
        }
        for ((r, v), x) in values.indexed_iter_mut() {
            if observed[(r, v)] {
                if !x.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite value {x} at row {r}, variable '{}' marked observed",
                        variable_names[v]
                    )));
                }
            } else {
                *x = f64::NAN;
            }
        }
        Ok(Dataset { values, observed, spec, variable_names, provenance })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn observed(&self) -> &Array2<bool> {
        &self.observed
    }

    /// Row-major value slice (the layout every model entry point takes).
    pub fn values_flat(&self) -> &[f64] {
        self.values.as_slice().expect("row-major layout")
    }

    pub fn observed_flat(&self) -> &[bool] {
        self.observed.as_slice().expect("row-major layout")
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Observed value at `(row, var)`, `None` when missing.
    pub fn value(&self, row: usize, var: usize) -> Option<f64> {
        self.observed[(row, var)].then(|| self.values[(row, var)])
    }

    pub fn missing_fraction(&self) -> f64 {
        let total = self.observed.len();
        let missing = self.observed.iter().filter(|&&o| !o).count();
        missing as f64 / total as f64
    }

    /// New dataset holding the given rows (in the given order).
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let d = self.n_vars();
        let mut values = Vec::with_capacity(rows.len() * d);
        let mut observed = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= self.n_rows() {
                return Err(Error::Contract(format!(
                    "row {r} out of range for {} rows",
                    self.n_rows()
                )));
            }
            for v in 0..d {
                values.push(self.values[(r, v)]);
                observed.push(self.observed[(r, v)]);
            }
        }
        Dataset::new(
            Array2::from_shape_vec((rows.len(), d), values).expect("shape is consistent"),
            Array2::from_shape_vec((rows.len(), d), observed).expect("shape is consistent"),
            self.spec.clone(),
            self.variable_names.clone(),
            self.provenance.clone(),
        )
    }

    /// Deterministic head/tail split after `n_first` rows (rows are i.i.d.
    /// for generated data, so no shuffle is needed).
    pub fn head_tail_split(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.n_rows() {
            return Err(Error::Contract(format!(
                "cannot split {} rows at {n_first}",
                self.n_rows()
            )));
        }
        let head: Vec<usize> = (0..n_first).collect();
        let tail: Vec<usize> = (n_first..self.n_rows()).collect();
        Ok((self.subset_rows(&head)?, self.subset_rows(&tail)?))
    }

    /// Per-variable `(min, max)` over observed cells, for mapping
    /// continuous data onto `[0, 1]` before training (the regime the
    /// default output-noise setting is calibrated for).  Binary variables
    /// and columns without a usable range report `(0, 1)`, which makes
    /// [`Dataset::scaled_with`] the identity on them.
    pub fn min_max_stats(&self) -> Vec<(f64, f64)> {
        (0..self.n_vars())
            .map(|v| {
                if self.spec.kind(v) == VarKind::Binary {
                    return (0.0, 1.0);
                }
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 0..self.n_rows() {
                    if let Some(x) = self.value(r, v) {
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                if hi > lo { (lo, hi) } else { (0.0, 1.0) }
            })
            .collect()
    }

    /// Affinely rescale each variable by `(x - min) / (max - min)` using
    /// the given per-variable stats (typically from the training split, so
    /// train and test share one map).  Masks, grouping and names are
    /// unchanged.
    pub fn scaled_with(&self, stats: &[(f64, f64)]) -> Result<Dataset> {
        if stats.len() != self.n_vars() {
            return Err(Error::Dimension(format!(
                "{} column stats for {} variables",
                stats.len(),
                self.n_vars()
            )));
        }
        for (v, &(lo, hi)) in stats.iter().enumerate() {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Contract(format!(
                    "degenerate range [{lo}, {hi}] for variable '{}'",
                    self.variable_names[v]
                )));
            }
        }
        let mut values = self.values.clone();
        for ((_, v), x) in values.indexed_iter_mut() {
            if x.is_finite() {
                let (lo, hi) = stats[v];
                *x = (*x - lo) / (hi - lo);
            } else {
                *x = 0.0; // unobserved; the constructor restores the sentinel
            }
        }
        Dataset::new(
            values,
            self.observed.clone(),
            self.spec.clone(),
            self.variable_names.clone(),
            self.provenance.clone(),
        )
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Knobs for the synthetic benchmark: a random DAG over `num_vars`
/// variables and a non-linear structural-equation model on top of it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_vars: usize,
    pub edge_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> SyntheticConfig {
        SyntheticConfig {
            num_vars: 5,
            edge_prob: 0.5,
            n_train: 5000,
            n_test: 1000,
            noise_var: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_vars < 2 {
            return Err(Error::Contract(format!(
                "synthetic data needs at least 2 variables, got {}",
                self.num_vars
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::Contract(format!(
                "edge_prob must lie in [0, 1], got {}",
                self.edge_prob
            )));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Contract(format!(
                "noise_var must be positive, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }

    pub fn variable_names(&self) -> Vec<String> {
        (0..self.num_vars).map(|v| format!("x{v}")).collect()
    }
}

/// Random ground-truth DAG: nodes get a random order, then each pair that
/// is ascending in that order receives an edge with `edge_prob`.  The
/// result is acyclic by construction, and the random order keeps node
/// indices uninformative about edge direction.
pub fn generate_dag(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<HardGraph> {
    cfg.validate()?;
    let d = cfg.num_vars;
    let mut order: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut order);
    let mut edges = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            if rng.bernoulli(cfg.edge_prob) {
                edges.push((order[i], order[j]));
            }
        }
    }
    HardGraph::from_edges(&cfg.variable_names(), &edges)
}

/// Draw `n_train + n_test` fully observed rows from the non-linear SEM:
/// in topological order, roots are standard normal and every other
/// variable is `sum_{parents p} sin(3 * v_p)` plus `N(0, noise_var)`
/// noise.
pub fn simulate_sem(graph: &HardGraph, cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    if graph.num_nodes() != cfg.num_vars {
        return Err(Error::Contract(format!(
            "graph over {} nodes for {} variables",
            graph.num_nodes(),
            cfg.num_vars
        )));
    }
    if !is_dag(graph) {
        return Err(Error::Contract("structural-equation sampling needs a DAG".into()));
    }
    let n = cfg.n_train + cfg.n_test;
    if n == 0 {
        return Err(Error::Contract("n_train + n_test must be positive".into()));
    }
    let d = cfg.num_vars;
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); d];
    for (from, to) in graph.edges() {
        parents[to].push(from);
    }
    // Kahn order
    let mut indegree: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut topo: Vec<usize> = (0..d).filter(|&v| indegree[v] == 0).collect();
    let mut cursor = 0;
    while cursor < topo.len() {
        let v = topo[cursor];
        cursor += 1;
        for (_, to) in graph.edges().iter().filter(|&&(f, _)| f == v) {
            indegree[*to] -= 1;
            if indegree[*to] == 0 {
                topo.push(*to);
            }
        }
    }
    let noise_std = cfg.noise_var.sqrt();
    let mut values = vec![0.0; n * d];
    for r in 0..n {
        let row = &mut values[r * d..(r + 1) * d];
        for &v in &topo {
            row[v] = if parents[v].is_empty() {
                rng.normal()
            } else {
                parents[v].iter().map(|&p| (3.0 * row[p]).sin()).sum::<f64>() + noise_std * rng.normal()
            };
        }
    }
    let names = cfg.variable_names();
    let spec = GroupSpec::singletons(&names, vec![VarKind::Continuous; d])?;
    Dataset::new(
        Array2::from_shape_vec((n, d), values).expect("shape is consistent"),
        Array2::from_elem((n, d), true),
        spec,
        names,
        format!("synthetic SEM over {d} variables, noise_var {}", cfg.noise_var),
    )
}

/// Copy of `ds` where each observed cell has been independently dropped
/// with probability `fraction`.  The input is untouched and keeps serving
/// as evaluation ground truth.
pub fn drop_mcar(ds: &Dataset, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Contract(format!(
            "drop fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut observed = ds.observed.clone();
    for cell in observed.iter_mut() {
        // one draw per cell keeps the stream aligned with the shape
        let drop = rng.uniform() < fraction;
        if *cell && drop {
            *cell = false;
        }
    }
    Dataset::new(
        ds.values.clone(),
        observed,
        ds.spec.clone(),
        ds.variable_names.clone(),
        format!("{} (MCAR {fraction})", ds.provenance),
    )
}

/// Threshold every variable at its observed median: strictly above becomes
/// 1, the rest 0; the missingness pattern is preserved and all kinds turn
/// binary.
pub fn binarize_at_median(ds: &Dataset) -> Result<Dataset> {
    let (n, d) = ds.values.dim();
    let mut values = ds.values.clone();
    for v in 0..d {
        let mut col: Vec<f64> = (0..n).filter(|&r| ds.observed[(r, v)]).map(|r| ds.values[(r, v)]).collect();
        if col.is_empty() {
            continue;
        }
        col.sort_by(|a, b| a.partial_cmp(b).expect("observed values are finite"));
        let mid = col.len() / 2;
        let median = if col.len() % 2 == 1 { col[mid] } else { 0.5 * (col[mid - 1] + col[mid]) };
        for r in 0..n {
            if ds.observed[(r, v)] {
                values[(r, v)] = if ds.values[(r, v)] > median { 1.0 } else { 0.0 };
            }
        }
    }
    let spec = GroupSpec::new(
        (0..ds.spec.num_groups()).map(|g| ds.spec.group(g).to_vec()).collect(),
        ds.spec.group_names().to_vec(),
        vec![VarKind::Binary; d],
    )?;
    Dataset::new(
        values,
        ds.observed.clone(),
        spec,
        ds.variable_names.clone(),
        format!("{} (binarized at median)", ds.provenance),
    )
}

/// Disjoint random row split into train/validation/test with the given
/// fractions (test takes the remainder).
pub fn split(ds: &Dataset, train_frac: f64, val_frac: f64, rng: &mut Rng) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train_frac > 0.0) || val_frac < 0.0 || train_frac + val_frac > 1.0 {
        return Err(Error::Contract(format!(
            "degenerate split fractions {train_frac}/{val_frac}"
        )));
    }
    let n = ds.n_rows();
    let mut rows: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut rows);
    let n_train = (n as f64 * train_frac).floor() as usize;
    let n_val = (n as f64 * val_frac).floor() as usize;
    if n_train == 0 || n_train + n_val >= n {
        return Err(Error::Contract(format!(
            "split {train_frac}/{val_frac} leaves an empty part on {n} rows"
        )));
    }
    Ok((
        ds.subset_rows(&rows[..n_train])?,
        ds.subset_rows(&rows[n_train..n_train + n_val])?,
        ds.subset_rows(&rows[n_train + n_val..])?,
    ))
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn is_missing_cell(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan")
}

/// Load a dataset from a data CSV (header of variable names, empty cell or
/// `NaN` = missing) plus an optional `variable,group` mapping.  Variables
/// absent from the mapping become singleton groups.  A variable whose
/// observed values are all 0/1 is inferred binary, everything else
/// continuous.
pub fn load_csv(data_path: &Path, groups_path: Option<&Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(data_path)
        .map_err(|e| Error::Data(format!("{}: {e}", data_path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", data_path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let d = names.len();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Data(format!("{} row {}: {e}", data_path.display(), rec_no + 2))
        })?;
        if record.len() != d {
            return Err(Error::Data(format!(
                "{} row {}: {} cells for {d} columns",
                data_path.display(),
                rec_no + 2,
                record.len()
            )));
        }
        for (v, cell) in record.iter().enumerate() {
            if is_missing_cell(cell) {
                values.push(f64::NAN);
                observed.push(false);
            } else {
                let x: f64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "{} row {}, column '{}': cannot parse '{}' as a number",
                        data_path.display(),
                        rec_no + 2,
                        names[v],
                        cell
                    ))
                })?;
                if x.is_nan() {
                    values.push(f64::NAN);
                    observed.push(false);
                } else {
                    values.push(x);
                    observed.push(true);
                }
            }
        }
    }
    let n = values.len() / d.max(1);
    if n == 0 {
        return Err(Error::Data(format!("{}: no data rows", data_path.display())));
    }

    // infer kinds: binary iff at least one observed value and all in {0, 1}
    let kinds: Vec<VarKind> = (0..d)
        .map(|v| {
            let mut saw_any = false;
            let mut all_01 = true;
            for r in 0..n {
                if observed[r * d + v] {
                    saw_any = true;
                    let x = values[r * d + v];
                    if x != 0.0 && x != 1.0 {
                        all_01 = false;
                        break;
                    }
                }
            }
            if saw_any && all_01 { VarKind::Binary } else { VarKind::Continuous }
        })
        .collect();

    let spec = match groups_path {
        None => GroupSpec::singletons(&names, kinds)?,
        Some(gp) => read_group_spec(gp, &names, kinds)?,
    };
    Dataset::new(
        Array2::from_shape_vec((n, d), values).expect("shape is consistent"),
        Array2::from_shape_vec((n, d), observed).expect("shape is consistent"),
        spec,
        names,
        data_path.display().to_string(),
    )
}

fn read_group_spec(path: &Path, names: &[String], kinds: Vec<VarKind>) -> Result<GroupSpec> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() != 2
        || headers.get(0).map(str::trim) != Some("variable")
        || headers.get(1).map(str::trim) != Some("group")
    {
        return Err(Error::Data(format!(
            "{}: expected header 'variable,group'",
            path.display()
        )));
    }
    let mut group_order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    let mut assigned = vec![false; names.len()];
    for (rec_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), rec_no + 2)))?;
        let var = record.get(0).unwrap_or("").trim();
        let group = record.get(1).unwrap_or("").trim();
        let &v = index.get(var).ok_or_else(|| {
            Error::Data(format!(
                "{} row {}: unknown variable '{var}'",
                path.display(),
                rec_no + 2
            ))
        })?;
        if std::mem::replace(&mut assigned[v], true) {
            return Err(Error::Data(format!(
                "{} row {}: variable '{var}' mapped twice",
                path.display(),
                rec_no + 2
            )));
        }
        if !members.contains_key(group) {
            group_order.push(group.to_string());
        }
        members.entry(group.to_string()).or_default().push(v);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_names: Vec<String> = Vec::new();
    for g in group_order {
        groups.push(members.remove(&g).expect("collected above"));
        group_names.push(g);
    }
    // unmapped variables become singleton groups named after themselves
    for (v, name) in names.iter().enumerate() {
        if !assigned[v] {
            groups.push(vec![v]);
            group_names.push(name.clone());
        }
    }
    GroupSpec::new(groups, group_names, kinds)
}

/// Write the data CSV (shortest round-trip float formatting, missing cells
/// empty).
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_record(ds.variable_names())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (n, d) = ds.values.dim();
    for r in 0..n {
        let row: Vec<String> = (0..d)
            .map(|v| {
                if ds.observed[(r, v)] {
                    ds.values[(r, v)].to_string()
                } else {
                    String::new()
                }
            })
            .collect();
        writer
            .write_record(&row)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer.flush()?;
    Ok(())
}

/// Write the `variable,group` mapping for a dataset's spec.
pub fn write_groups_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["variable", "group"])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = ds.spec();
    for g in 0..spec.num_groups() {
        for &v in spec.group(g) {
            writer
                .write_record([ds.variable_names()[v].as_str(), spec.group_names()[g].as_str()])
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
    }
    writer.flush()?;
    Ok(())
}
