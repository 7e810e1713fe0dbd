//! Learned edge posterior over the group graph.
//!
//! Each ordered pair of groups `(i, j)`, `i != j`, carries an independent
//! Bernoulli edge variable with a learnable logit.  Training draws soft
//! (binary-concrete) samples so gradients flow into the logits, pulls the
//! posterior towards a sparse Bernoulli prior through a closed-form KL, and
//! discourages cycles with a differentiable acyclicity penalty based on the
//! trace of a matrix exponential.  After training the posterior is hardened
//! by thresholding the edge probabilities.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Posterior over directed edges between `num_nodes` groups.
///
/// `logits[i * num_nodes + j]` parameterizes the probability of the edge
/// `i -> j`.  Diagonal entries exist for storage convenience but never
/// participate: samples force them to zero, the KL and the hardened graph
/// skip them, and no gradient ever reaches them.
pub struct GraphPosterior {
    logits: Tensor,
    num_nodes: usize,
    prior_prob: f64,
}

/// Initial edge probability: agnostic (0.5) for small graphs, sparser (0.2)
/// for large ones where a dense initialization would swamp early training.
pub fn default_init_prob(num_nodes: usize) -> f64 {
    if num_nodes <= 64 {
        0.5
    } else {
        0.2
    }
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Numeric(format!(
            "{what} must lie strictly inside (0, 1), got {p}"
        )));
    }
    Ok(())
}

impl GraphPosterior {
    /// Fresh posterior with every off-diagonal edge probability `init_prob`
    /// and Bernoulli prior `prior_prob`.
    pub fn new(num_nodes: usize, init_prob: f64, prior_prob: f64) -> Result<GraphPosterior> {
        if num_nodes < 2 {
            return Err(Error::Contract(format!(
                "a graph posterior needs at least 2 nodes, got {num_nodes}"
            )));
        }
        check_prob(init_prob, "init_prob")?;
        check_prob(prior_prob, "prior_prob")?;
        let logit = (init_prob / (1.0 - init_prob)).ln();
        let mut data = vec![logit; num_nodes * num_nodes];
        for i in 0..num_nodes {
            data[i * num_nodes + i] = 0.0;
        }
        Ok(GraphPosterior {
            logits: Tensor::parameter(vec![num_nodes, num_nodes], data)?,
            num_nodes,
            prior_prob,
        })
    }

    /// Posterior from previously trained logits (archive load path).
    pub fn from_logits(num_nodes: usize, logits: Vec<f64>, prior_prob: f64) -> Result<GraphPosterior> {
        if num_nodes < 2 {
            return Err(Error::Contract(format!(
                "a graph posterior needs at least 2 nodes, got {num_nodes}"
            )));
        }
        check_prob(prior_prob, "prior_prob")?;
        Ok(GraphPosterior {
            logits: Tensor::parameter(vec![num_nodes, num_nodes], logits)?,
            num_nodes,
            prior_prob,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn prior_prob(&self) -> f64 {
        self.prior_prob
    }

    /// The trainable logit tensor.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Edge probabilities `sigmoid(logit)`, diagonal forced to zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let m = self.num_nodes;
        let mut p = self.logits.sigmoid().to_vec();
        for i in 0..m {
            p[i * m + i] = 0.0;
        }
        p
    }

    /// Constant `m x m` tensor with zeros on the diagonal, ones elsewhere.
    fn off_diagonal_mask(&self) -> Tensor {
        let m = self.num_nodes;
        let mut mask = vec![1.0; m * m];
        for i in 0..m {
            mask[i * m + i] = 0.0;
        }
        Tensor::constant(vec![m, m], mask).expect("mask shape is consistent")
    }
}

/// Differentiable soft adjacency sample.
///
/// Each off-diagonal entry is `sigmoid((logit + L) / tau)` with `L` drawn
/// from the standard logistic distribution, i.e. a binary-concrete
/// relaxation of the Bernoulli edge; the diagonal is exactly zero.  As
/// `tau` shrinks, samples approach 0/1 draws with `P(1) = sigmoid(logit)`.
pub fn sample_soft(q: &GraphPosterior, tau: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let m = q.num_nodes;
    let noise: Vec<f64> = (0..m * m).map(|_| rng.logistic()).collect();
    let noise = Tensor::constant(vec![m, m], noise)?;
    let scaled = q.logits.add(&noise)?.mul_scalar(1.0 / tau);
    scaled.sigmoid().mul(&q.off_diagonal_mask())
}

/// Acyclicity penalty `trace(exp(G .* G)) - m` for an `m x m` adjacency.
///
/// On binary adjacencies the value is zero exactly when the graph is a
/// DAG, and otherwise grows with the number and weight of cycles; on soft
/// samples it stays non-negative and differentiable, which is what lets the
/// edge logits be steered away from cyclic configurations.
pub fn dag_penalty(g: &Tensor) -> Result<Tensor> {
    let shape = g.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dimension(format!(
            "dag_penalty needs a square adjacency, got shape {:?}",
            shape
        )));
    }
    let m = shape[0] as f64;
    Ok(g.square().matrix_exp()?.trace()?.add_scalar(-m))
}

/// Closed-form `KL(q(G) || p(G))` summed over off-diagonal edges.
///
/// Written in terms of logits as `q*l - softplus(l) - q*ln(p) -
/// (1-q)*ln(1-p)` per edge, which is algebraically the Bernoulli KL
/// `q ln(q/p) + (1-q) ln((1-q)/(1-p))` but stays finite for extreme
/// logits.
pub fn kl_bernoulli(q: &GraphPosterior) -> Result<Tensor> {
    check_prob(q.prior_prob, "prior_prob")?;
    let l = &q.logits;
    let prob = l.sigmoid();
    let ln_p = q.prior_prob.ln();
    let ln_1mp = (1.0 - q.prior_prob).ln();
    // q*l - softplus(l) - q*ln p - (1 - q)*ln(1-p)
    let entropy_part = prob.mul(l)?.sub(&l.softplus())?;
    let cross_part = prob.mul_scalar(-(ln_p - ln_1mp)).add_scalar(-ln_1mp);
    entropy_part
        .add(&cross_part)?
        .mul(&q.off_diagonal_mask())
        .map(|t| t.sum())
}

/// Thresholded graph: edge `i -> j` is kept when its posterior probability
/// is strictly above `threshold`.
pub fn harden(q: &GraphPosterior, threshold: f64, labels: &[String]) -> Result<HardGraph> {
    HardGraph::from_probabilities(&q.probabilities(), threshold, labels)
}

/// A concrete directed graph over labelled nodes, with the probabilities
/// that produced it (1.0 for ground-truth graphs).
#[derive(Clone, Debug, PartialEq)]
pub struct HardGraph {
    num_nodes: usize,
    adjacency: Vec<bool>,
    probabilities: Vec<f64>,
    labels: Vec<String>,
}

impl HardGraph {
    /// Threshold a dense probability matrix (row-major, `prob[i*m+j]` for
    /// edge `i -> j`).  Diagonal entries are ignored.
    pub fn from_probabilities(prob: &[f64], threshold: f64, labels: &[String]) -> Result<HardGraph> {
        let m = labels.len();
        if prob.len() != m * m {
            return Err(Error::Dimension(format!(
                "probability matrix has {} entries for {m} labels",
                prob.len()
            )));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Contract(format!("threshold {threshold} outside [0, 1]")));
        }
        let mut adjacency = vec![false; m * m];
        let mut probabilities = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                probabilities[i * m + j] = prob[i * m + j];
                adjacency[i * m + j] = prob[i * m + j] > threshold;
            }
        }
        Ok(HardGraph {
            num_nodes: m,
            adjacency,
            probabilities,
            labels: labels.to_vec(),
        })
    }

    /// Graph from an explicit edge list over the given labels (probability
    /// 1.0 on every edge), e.g. a ground-truth graph.
    pub fn from_edges(labels: &[String], edges: &[(usize, usize)]) -> Result<HardGraph> {
        let m = labels.len();
        let mut adjacency = vec![false; m * m];
        let mut probabilities = vec![0.0; m * m];
        for &(i, j) in edges {
            if i >= m || j >= m {
                return Err(Error::Contract(format!("edge ({i}, {j}) outside 0..{m}")));
            }
            if i == j {
                return Err(Error::Contract(format!("self-loop on node {i}")));
            }
            adjacency[i * m + j] = true;
            probabilities[i * m + j] = 1.0;
        }
        Ok(HardGraph {
            num_nodes: m,
            adjacency,
            probabilities,
            labels: labels.to_vec(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Does the edge `i -> j` exist?
    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.num_nodes + j]
    }

    /// Posterior probability recorded for `i -> j`.
    pub fn probability(&self, i: usize, j: usize) -> f64 {
        self.probabilities[i * self.num_nodes + j]
    }

    /// All edges as `(from, to)` index pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.num_nodes {
            for j in 0..self.num_nodes {
                if self.adjacency[i * self.num_nodes + j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Adjacency as a constant 0/1 tensor (for penalty evaluation).
    pub fn adjacency_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.adjacency.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::constant(vec![self.num_nodes, self.num_nodes], data).expect("square adjacency")
    }

    /// Write the edge list as CSV (`from,to,probability`), sorted by
    /// descending probability, ties broken by node order.
    pub fn write_edge_csv(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(usize, usize)> = self.edges();
        rows.sort_by(|&(ai, aj), &(bi, bj)| {
            let pa = self.probability(ai, aj);
            let pb = self.probability(bi, bj);
            pb.partial_cmp(&pa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ai.cmp(&bi))
                .then(aj.cmp(&bj))
        });
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "from,to,probability")?;
        for (i, j) in rows {
            writeln!(file, "{},{},{}", self.labels[i], self.labels[j], self.probability(i, j))?;
        }
        Ok(())
    }

    /// Read an edge-list CSV.  When `labels` is given, every `from`/`to`
    /// must be one of them (isolated nodes then survive the round trip);
    /// otherwise the node set is inferred from the file in order of first
    /// appearance.
    pub fn read_edge_csv(path: &Path, labels: Option<&[String]>) -> Result<HardGraph> {
        let file = BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty edge file", path.display())))??;
        if header.trim() != "from,to,probability" {
            return Err(Error::Format(format!(
                "{}: expected header 'from,to,probability', got '{header}'",
                path.display()
            )));
        }
        let mut raw: Vec<(String, String, f64)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 3 fields, got {}",
                    path.display(),
                    lineno + 2,
                    parts.len()
                )));
            }
            let p: f64 = parts[2].trim().parse().map_err(|_| {
                Error::Format(format!(
                    "{}:{}: bad probability '{}'",
                    path.display(),
                    lineno + 2,
                    parts[2]
                ))
            })?;
            raw.push((parts[0].trim().to_string(), parts[1].trim().to_string(), p));
        }
        let labels: Vec<String> = match labels {
            Some(l) => l.to_vec(),
            None => {
                let mut seen = Vec::new();
                for (f, t, _) in &raw {
                    if !seen.contains(f) {
                        seen.push(f.clone());
                    }
                    if !seen.contains(t) {
                        seen.push(t.clone());
                    }
                }
                seen
            }
        };
        let index = |name: &str| -> Result<usize> {
            labels.iter().position(|l| l == name).ok_or_else(|| {
                Error::Data(format!("{}: unknown node '{name}' in edge file", path.display()))
            })
        };
        let m = labels.len();
        let mut adjacency = vec![false; m * m];
        let mut probabilities = vec![0.0; m * m];
        for (f, t, p) in raw {
            let (i, j) = (index(&f)?, index(&t)?);
            if i == j {
                return Err(Error::Data(format!("self-loop on '{f}' in edge file")));
            }
            adjacency[i * m + j] = true;
            probabilities[i * m + j] = p;
        }
        Ok(HardGraph {
            num_nodes: m,
            adjacency,
            probabilities,
            labels,
        })
    }
}

/// Kahn's algorithm: true when the graph has no directed cycle.
pub fn is_dag(g: &HardGraph) -> bool {
    let m = g.num_nodes;
    let mut indegree = vec![0usize; m];
    for i in 0..m {
        for j in 0..m {
            if g.edge(i, j) {
                indegree[j] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..m).filter(|&j| indegree[j] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop() {
        seen += 1;
        for j in 0..m {
            if g.edge(i, j) {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push(j);
                }
            }
        }
    }
    seen == m
}
