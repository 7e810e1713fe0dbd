//! Structured-latent model: per-group encoders, message-passing decoder,
//! per-group readouts.
//!
//! Every variable group owns one latent subspace of width `latent_dim`.
//! The encoder maps a group's (fill-imputed) observations to the mean and
//! log-std of its latent posterior.  The decoder runs `t_steps` rounds of
//! message passing over the soft adjacency: node-to-edge MLPs turn pairs of
//! latents into edge messages, and an edge-to-node MLP rebuilds each
//! latent from the weighted sum of incoming messages.  The rebuilt message
//! *replaces* the receiver's latent, so everything a node carries — its own
//! previous state included (each incoming message reads the receiver's
//! latent as its second argument) — must pass through edges the graph
//! posterior keeps alive.  A node with no live in-edges collapses to a
//! constant; this is what couples reconstruction quality to graph
//! structure, and why imputation of parentless groups needs the
//! stage-two backward channel.
//!
//! In the second training stage a separate backward MLP adds, for each
//! edge `i -> j`, a message flowing from `j` back to `i`, so that at
//! imputation time evidence propagates against edge direction as well.
//!
//! Latents are stored group-major: row `g * batch + r` of a
//! `(groups * batch) x latent_dim` tensor is the latent of sample `r` in
//! group `g`.

use crate::error::{Error, Result};
use crate::tensor::{edge_aggregate, Rng, Tensor};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Group specification
// ---------------------------------------------------------------------------

/// Statistical kind of one observed variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    Continuous,
    Binary,
}

/// Fill constant used for unobserved entries before encoding.
pub fn fill_value(kind: VarKind) -> f64 {
    match kind {
        VarKind::Continuous => 0.0,
        VarKind::Binary => 0.5,
    }
}

/// Partition of the `D` observed variables into `M` named groups, with a
/// kind per variable.  Groups are the causal units: edges are learned
/// between groups, not between individual variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    groups: Vec<Vec<usize>>,
    names: Vec<String>,
    kinds: Vec<VarKind>,
}

impl GroupSpec {
    /// Validated spec.  `groups` must be non-empty, pairwise disjoint and
    /// jointly cover `0..kinds.len()`; at least two groups are required
    /// (a single group admits no graph).
    pub fn new(groups: Vec<Vec<usize>>, names: Vec<String>, kinds: Vec<VarKind>) -> Result<GroupSpec> {
        let d = kinds.len();
        let m = groups.len();
        if m < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 groups to learn a graph, got {m}"
            )));
        }
        if names.len() != m {
            return Err(Error::Contract(format!(
                "{} group names for {m} groups",
                names.len()
            )));
        }
        let mut sorted_names = names.clone();
        sorted_names.sort();
        sorted_names.dedup();
        if sorted_names.len() != m {
            return Err(Error::Contract("group names must be unique".into()));
        }
        let mut seen = vec![false; d];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Contract(format!("group {g} ('{}') is empty", names[g])));
            }
            for &v in members {
                if v >= d {
                    return Err(Error::Contract(format!(
                        "group '{}' references variable {v}, but only {d} exist",
                        names[g]
                    )));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Error::Contract(format!(
                        "variable {v} appears in more than one group"
                    )));
                }
            }
        }
        if let Some(v) = seen.iter().position(|&s| !s) {
            return Err(Error::Contract(format!("variable {v} belongs to no group")));
        }
        Ok(GroupSpec { groups, names, kinds })
    }

    /// One singleton group per variable (variable-level discovery); group
    /// names equal the given variable names.
    pub fn singletons(var_names: &[String], kinds: Vec<VarKind>) -> Result<GroupSpec> {
        let groups = (0..kinds.len()).map(|v| vec![v]).collect();
        GroupSpec::new(groups, var_names.to_vec(), kinds)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_vars(&self) -> usize {
        self.kinds.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, v: usize) -> VarKind {
        self.kinds[v]
    }

    pub fn kinds(&self) -> &[VarKind] {
        &self.kinds
    }

    /// True when every group holds exactly one variable; the model then
    /// shares one encoder and one readout across all groups.
    pub fn all_singletons(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// Variables in group-concatenated order.
    pub fn flat_order(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Column permutation taking group-concatenated outputs back to
    /// variable order: `perm[v]` is the position of variable `v` in
    /// [`GroupSpec::flat_order`].
    pub fn variable_perm(&self) -> Vec<usize> {
        let flat = self.flat_order();
        let mut perm = vec![0usize; flat.len()];
        for (pos, &v) in flat.iter().enumerate() {
            perm[v] = pos;
        }
        perm
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Two linear layers with a ReLU between them.
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Mlp {
        Mlp {
            w1: glorot(input, hidden, rng),
            b1: bias_init(hidden, input, rng),
            w2: glorot(hidden, output, rng),
            b2: bias_init(output, hidden, rng),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w1)?.add_row_broadcast(&self.b1)?.relu();
        h.matmul(&self.w2)?.add_row_broadcast(&self.b2)
    }
}

/// Shared hidden layer with mean and log-std output heads.
pub struct EncoderHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_ls: Tensor,
    pub b_ls: Tensor,
}

impl EncoderHead {
    fn init(input: usize, hidden: usize, latent: usize, rng: &mut Rng) -> EncoderHead {
        EncoderHead {
            w1: glorot(input, hidden, rng),
            b1: bias_init(hidden, input, rng),
            w_mu: glorot(hidden, latent, rng),
            b_mu: bias_init(latent, hidden, rng),
            w_ls: glorot(hidden, latent, rng),
            b_ls: bias_init(latent, hidden, rng),
        }
    }
}

/// Edge MLP over a pair of latents.  The first layer of `MLP([src, dst])`
/// is stored as two blocks (`w1_src`, `w1_dst`) so the per-pair input
/// concatenation never has to be materialized: `src @ w1_src` and
/// `dst @ w1_dst` are computed once per node and summed per pair inside
/// the fused aggregation.
pub struct PairMlp {
    pub w1_src: Tensor,
    pub w1_dst: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PairMlp {
    fn init(latent: usize, hidden: usize, rng: &mut Rng) -> PairMlp {
        // the conceptual first layer acts on the concatenated [src, dst]
        // input, so both blocks share its 2*latent fan-in
        PairMlp {
            w1_src: glorot_with_fans(latent, hidden, 2 * latent, hidden, rng),
            w1_dst: glorot_with_fans(latent, hidden, 2 * latent, hidden, rng),
            b1: bias_init(hidden, 2 * latent, rng),
            w2: glorot(hidden, latent, rng),
            b2: bias_init(latent, hidden, rng),
        }
    }
}

/// Glorot-uniform weight matrix, `U(+-sqrt(6 / (fan_in + fan_out)))`.
fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    glorot_with_fans(rows, cols, rows, cols, rng)
}

fn glorot_with_fans(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect();
    Tensor::parameter(vec![rows, cols], data).expect("shape is consistent")
}

/// Bias row drawn from `U(+-1/sqrt(fan_in))`.  Nonzero biases spread the
/// ReLU kinks so no hidden unit starts permanently dead on one-sided
/// inputs (an all-zero bias row does exactly that).
fn bias_init(cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..cols).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect();
    Tensor::parameter(vec![1, cols], data).expect("shape is consistent")
}

/// Default clamp range for the encoder's log-std head.
pub const LOG_STD_BOUNDS: (f64, f64) = (-7.0, 2.0);

/// All trainable weights of the model plus its structural hyperparameters.
pub struct ModelParams {
    latent_dim: usize,
    t_steps: usize,
    sigma_z: f64,
    sigma_x: f64,
    log_std_bounds: (f64, f64),
    backward_enabled: bool,
    shared_heads: bool,
    encoders: Vec<EncoderHead>,
    pub mlp_forward: PairMlp,
    pub mlp_backward: Option<PairMlp>,
    pub mlp_node: Mlp,
    readouts: Vec<Mlp>,
}

impl ModelParams {
    /// Freshly initialized model for `spec`.  The hidden width of every
    /// MLP equals `latent_dim`.  When all groups are singletons, one
    /// encoder and one readout are shared across groups.
    pub fn new(
        spec: &GroupSpec,
        latent_dim: usize,
        t_steps: usize,
        sigma_z: f64,
        sigma_x: f64,
        rng: &mut Rng,
    ) -> Result<ModelParams> {
        if latent_dim == 0 || t_steps == 0 {
            return Err(Error::Contract(format!(
                "latent_dim ({latent_dim}) and t_steps ({t_steps}) must be positive"
            )));
        }
        if !(sigma_z > 0.0) || !(sigma_x > 0.0) {
            return Err(Error::Numeric(format!(
                "noise scales must be positive (sigma_z {sigma_z}, sigma_x {sigma_x})"
            )));
        }
        let hidden = latent_dim;
        let shared_heads = spec.all_singletons();
        let encoders = if shared_heads {
            vec![EncoderHead::init(1, hidden, latent_dim, rng)]
        } else {
            (0..spec.num_groups())
                .map(|g| EncoderHead::init(spec.group(g).len(), hidden, latent_dim, rng))
                .collect()
        };
        let mlp_forward = PairMlp::init(latent_dim, hidden, rng);
        let mlp_node = Mlp::init(latent_dim, hidden, latent_dim, rng);
        let readouts = if shared_heads {
            vec![Mlp::init(latent_dim, hidden, 1, rng)]
        } else {
            (0..spec.num_groups())
                .map(|g| Mlp::init(latent_dim, hidden, spec.group(g).len(), rng))
                .collect()
        };
        Ok(ModelParams {
            latent_dim,
            t_steps,
            sigma_z,
            sigma_x,
            log_std_bounds: LOG_STD_BOUNDS,
            backward_enabled: false,
            shared_heads,
            encoders,
            mlp_forward,
            mlp_backward: None,
            mlp_node,
            readouts,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn sigma_z(&self) -> f64 {
        self.sigma_z
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn backward_enabled(&self) -> bool {
        self.backward_enabled
    }

    pub fn shared_heads(&self) -> bool {
        self.shared_heads
    }

    pub fn log_std_bounds(&self) -> (f64, f64) {
        self.log_std_bounds
    }

    /// Override the log-std clamp range (testing hook; e.g. a very
    /// negative upper bound makes the encoder effectively deterministic).
    pub fn set_log_std_bounds(&mut self, lo: f64, hi: f64) {
        self.log_std_bounds = (lo, hi);
    }

    /// Turn on backward messages with a freshly initialized backward MLP.
    /// Existing weights are untouched; this is the entry point into the
    /// second training stage.
    pub fn enable_backward(&mut self, rng: &mut Rng) {
        self.mlp_backward = Some(PairMlp::init(self.latent_dim, self.latent_dim, rng));
        self.backward_enabled = true;
    }

    /// Every trainable tensor with a stable name (archive order).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (i, e) in self.encoders.iter().enumerate() {
            let p = if self.shared_heads { "encoder.shared".to_string() } else { format!("encoder.{i}") };
            out.push((format!("{p}.w1"), e.w1.clone()));
            out.push((format!("{p}.b1"), e.b1.clone()));
            out.push((format!("{p}.w_mu"), e.w_mu.clone()));
            out.push((format!("{p}.b_mu"), e.b_mu.clone()));
            out.push((format!("{p}.w_ls"), e.w_ls.clone()));
            out.push((format!("{p}.b_ls"), e.b_ls.clone()));
        }
        for (name, pair) in [("pair_forward", Some(&self.mlp_forward)), ("pair_backward", self.mlp_backward.as_ref())] {
            if let Some(p) = pair {
                out.push((format!("{name}.w1_src"), p.w1_src.clone()));
                out.push((format!("{name}.w1_dst"), p.w1_dst.clone()));
                out.push((format!("{name}.b1"), p.b1.clone()));
                out.push((format!("{name}.w2"), p.w2.clone()));
                out.push((format!("{name}.b2"), p.b2.clone()));
            }
        }
        out.push(("node.w1".to_string(), self.mlp_node.w1.clone()));
        out.push(("node.b1".to_string(), self.mlp_node.b1.clone()));
        out.push(("node.w2".to_string(), self.mlp_node.w2.clone()));
        out.push(("node.b2".to_string(), self.mlp_node.b2.clone()));
        for (i, r) in self.readouts.iter().enumerate() {
            let p = if self.shared_heads { "readout.shared".to_string() } else { format!("readout.{i}") };
            out.push((format!("{p}.w1"), r.w1.clone()));
            out.push((format!("{p}.b1"), r.b1.clone()));
            out.push((format!("{p}.w2"), r.w2.clone()));
            out.push((format!("{p}.b2"), r.b2.clone()));
        }
        out
    }

    /// Overwrite parameter values from `(name, values)` pairs, e.g. when
    /// loading an archive.  Every parameter of this model must be present
    /// with matching length.
    pub fn load_parameter_values(&mut self, values: &std::collections::HashMap<String, Vec<f64>>) -> Result<()> {
        for (name, tensor) in self.parameters() {
            let stored = values
                .get(&name)
                .ok_or_else(|| Error::Format(format!("archive is missing tensor '{name}'")))?;
            tensor.set_data(stored).map_err(|_| {
                Error::Format(format!(
                    "tensor '{name}' has {} values, expected {}",
                    stored.len(),
                    tensor.numel()
                ))
            })?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Latent state
// ---------------------------------------------------------------------------

/// Variational posterior sample for one batch, kept group-major.
pub struct LatentState {
    /// Reparametrized sample, `(groups * batch) x latent_dim`.
    pub z: Tensor,
    /// Posterior means (same layout).
    pub mu: Tensor,
    /// Clamped posterior log-stds (same layout).
    pub log_std: Tensor,
    pub groups: usize,
    pub batch: usize,
    pub latent: usize,
}

impl LatentState {
    /// Latent block of one group, `batch x latent_dim`.
    pub fn z_group(&self, g: usize) -> Result<Tensor> {
        self.z.slice_rows(g * self.batch, self.batch)
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Encode a batch (row-major `batch x D` values plus observation mask)
/// into per-group latent posteriors and one reparametrized sample.
/// Unobserved entries are replaced by the kind's fill constant before
/// encoding; observed entries must be finite.
pub fn encode(
    values: &[f64],
    observed: &[bool],
    batch: usize,
    spec: &GroupSpec,
    params: &ModelParams,
    rng: &mut Rng,
) -> Result<LatentState> {
    let d = spec.num_vars();
    let m = spec.num_groups();
    if values.len() != batch * d || observed.len() != batch * d {
        return Err(Error::Dimension(format!(
            "encode: {} values / {} mask entries for batch {batch} x {d} variables",
            values.len(),
            observed.len()
        )));
    }
    if !params.shared_heads && params.encoders.len() != m {
        return Err(Error::Contract(format!(
            "model has {} encoders for {m} groups",
            params.encoders.len()
        )));
    }
    let mut filled = vec![0.0; batch * d];
    for r in 0..batch {
        for v in 0..d {
            let idx = r * d + v;
            if observed[idx] {
                if !values[idx].is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite value {} at row {r}, variable {v} marked observed",
                        values[idx]
                    )));
                }
                filled[idx] = values[idx];
            } else {
                filled[idx] = fill_value(spec.kind(v));
            }
        }
    }

    let (lo, hi) = params.log_std_bounds;
    let (mu_all, ls_all) = if params.shared_heads {
        // Stack the per-group (single-variable) columns group-major and run
        // the shared encoder once over (m * batch) rows.
        let mut stacked = Vec::with_capacity(m * batch);
        for g in 0..m {
            let v = spec.group(g)[0];
            for r in 0..batch {
                stacked.push(filled[r * d + v]);
            }
        }
        let x = Tensor::constant(vec![m * batch, 1], stacked)?;
        let e = &params.encoders[0];
        let h = x.matmul(&e.w1)?.add_row_broadcast(&e.b1)?.relu();
        let mu = h.matmul(&e.w_mu)?.add_row_broadcast(&e.b_mu)?;
        let ls = h.matmul(&e.w_ls)?.add_row_broadcast(&e.b_ls)?.clamp(lo, hi)?;
        (mu, ls)
    } else {
        let mut mus = Vec::with_capacity(m);
        let mut lss = Vec::with_capacity(m);
        for g in 0..m {
            let members = spec.group(g);
            let mut x = Vec::with_capacity(batch * members.len());
            for r in 0..batch {
                for &v in members {
                    x.push(filled[r * d + v]);
                }
            }
            let x = Tensor::constant(vec![batch, members.len()], x)?;
            let e = &params.encoders[g];
            let h = x.matmul(&e.w1)?.add_row_broadcast(&e.b1)?.relu();
            mus.push(h.matmul(&e.w_mu)?.add_row_broadcast(&e.b_mu)?);
            lss.push(h.matmul(&e.w_ls)?.add_row_broadcast(&e.b_ls)?.clamp(lo, hi)?);
        }
        (Tensor::concat_rows(&mus)?, Tensor::concat_rows(&lss)?)
    };

    let eps = Tensor::constant(vec![m * batch, params.latent_dim], rng.normals(m * batch * params.latent_dim))?;
    let z = mu_all.add(&ls_all.exp().mul(&eps)?)?;
    Ok(LatentState {
        z,
        mu: mu_all,
        log_std: ls_all,
        groups: m,
        batch,
        latent: params.latent_dim,
    })
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

fn off_diagonal_mask(m: usize) -> Tensor {
    let mut mask = vec![1.0; m * m];
    for i in 0..m {
        mask[i * m + i] = 0.0;
    }
    Tensor::constant(vec![m, m], mask).expect("square mask")
}

/// One full message-passing pass: `t_steps` rounds of edge construction
/// and node update over the (soft or hard) adjacency `g`.  Entry `g[k, i]`
/// weights the edge `k -> i`.  Each round rebuilds every latent from its
/// gated incoming sum, `z_i = MLP_e2n(sum_k g[k,i] * MLP_f([z_k, z_i]))`:
/// the receiver's own state survives only through its in-edges (every
/// incoming message reads `z_i` as its second argument), which is the
/// `z_i^t = F(parents, z_i^{t-1})` form that makes the decoder a
/// structural equation model on hard DAGs — and leaves a node with no
/// in-edges at the constant `MLP_e2n(0)`.  With backward messages enabled,
/// edge `i -> k` additionally delivers a message from `k` to `i` through
/// the backward MLP.
pub fn message_pass(state: &LatentState, g: &Tensor, params: &ModelParams) -> Result<LatentState> {
    let m = state.groups;
    let b = state.batch;
    if g.shape() != [m, m] {
        return Err(Error::Dimension(format!(
            "adjacency shape {:?} for {m} groups",
            g.shape()
        )));
    }
    if state.z.shape() != [m * b, params.latent_dim] {
        return Err(Error::Dimension(format!(
            "latent shape {:?}, expected {}x{}",
            state.z.shape(),
            m * b,
            params.latent_dim
        )));
    }
    // Defensively zero the diagonal so self-messages cannot arise even for
    // caller-provided hard adjacencies.
    let g = g.mul(&off_diagonal_mask(m))?;
    let ones_row = Tensor::ones(vec![1, m])?;

    let mut z = state.z.clone();
    for _ in 0..params.t_steps {
        // forward messages, summed over incoming edges k -> i
        let f = &params.mlp_forward;
        let src = z.matmul(&f.w1_src)?.add_row_broadcast(&f.b1)?;
        let dst = z.matmul(&f.w1_dst)?;
        let agg = edge_aggregate(&src, &dst, &g, m, b)?;
        // second layer commutes with the weighted sum; the bias picks up
        // one copy per incoming edge weight
        let in_weight = ones_row.matmul(&g)?.transpose()?.repeat_rows(b)?;
        let mut msg = agg.matmul(&f.w2)?.add(&in_weight.matmul(&f.b2)?)?;

        if params.backward_enabled {
            let bk = params
                .mlp_backward
                .as_ref()
                .ok_or_else(|| Error::Contract("backward enabled without a backward MLP".into()))?;
            // backward messages: edge i -> k delivers MLP_b([z_i, z_k]) to i,
            // i.e. aggregation over outgoing edges = incoming edges of G^T
            let gt = g.transpose()?;
            let recv = z.matmul(&bk.w1_src)?.add_row_broadcast(&bk.b1)?;
            let send = z.matmul(&bk.w1_dst)?;
            let agg_b = edge_aggregate(&send, &recv, &gt, m, b)?;
            let out_weight = ones_row.matmul(&gt)?.transpose()?.repeat_rows(b)?;
            let msg_b = agg_b.matmul(&bk.w2)?.add(&out_weight.matmul(&bk.b2)?)?;
            msg = msg.add(&msg_b)?;
        }

        z = params.mlp_node.apply(&msg)?;
    }
    Ok(LatentState {
        z,
        mu: state.mu.clone(),
        log_std: state.log_std.clone(),
        groups: m,
        batch: b,
        latent: state.latent,
    })
}

/// Raw readout in variable order (`batch x D`).  Binary variables come out
/// as logits; [`readout`] converts them to probabilities.
pub fn readout_logits(state: &LatentState, spec: &GroupSpec, params: &ModelParams) -> Result<Tensor> {
    let m = state.groups;
    if m != spec.num_groups() {
        return Err(Error::Dimension(format!(
            "latent state has {m} groups, spec has {}",
            spec.num_groups()
        )));
    }
    let concatenated = if params.shared_heads {
        // one shared readout over all (m * batch) rows, then per-group slices
        let y = params.readouts[0].apply(&state.z)?;
        let parts: Vec<Tensor> = (0..m)
            .map(|g| y.slice_rows(g * state.batch, state.batch))
            .collect::<Result<_>>()?;
        Tensor::concat_cols(&parts)?
    } else {
        if params.readouts.len() != m {
            return Err(Error::Contract(format!(
                "model has {} readouts for {m} groups",
                params.readouts.len()
            )));
        }
        let parts: Vec<Tensor> = (0..m)
            .map(|g| params.readouts[g].apply(&state.z_group(g)?))
            .collect::<Result<_>>()?;
        Tensor::concat_cols(&parts)?
    };
    concatenated.permute_cols(&spec.variable_perm())
}

/// Likelihood means in variable order: the Gaussian mean for continuous
/// variables, the Bernoulli probability (sigmoid of the logit) for binary
/// ones.
pub fn readout(state: &LatentState, spec: &GroupSpec, params: &ModelParams) -> Result<Tensor> {
    let y = readout_logits(state, spec, params)?;
    apply_binary_sigmoid(&y, spec)
}

fn apply_binary_sigmoid(y: &Tensor, spec: &GroupSpec) -> Result<Tensor> {
    let d = spec.num_vars();
    if !spec.kinds().iter().any(|&k| k == VarKind::Binary) {
        return Ok(y.clone());
    }
    let rows = y.numel() / d;
    let mut bin = vec![0.0; d];
    let mut cont = vec![0.0; d];
    for v in 0..d {
        match spec.kind(v) {
            VarKind::Binary => bin[v] = 1.0,
            VarKind::Continuous => cont[v] = 1.0,
        }
    }
    let bin = Tensor::constant(vec![1, d], bin)?.repeat_rows(rows)?;
    let cont = Tensor::constant(vec![1, d], cont)?.repeat_rows(rows)?;
    y.sigmoid().mul(&bin)?.add(&y.mul(&cont)?)
}

/// Full decoder: message passing followed by the likelihood-mean readout.
pub fn decode(state: &LatentState, g: &Tensor, spec: &GroupSpec, params: &ModelParams) -> Result<Tensor> {
    let propagated = message_pass(state, g, params)?;
    readout(&propagated, spec, params)
}

/// Full decoder returning raw logits for binary variables (training path).
pub fn decode_logits(state: &LatentState, g: &Tensor, spec: &GroupSpec, params: &ModelParams) -> Result<Tensor> {
    let propagated = message_pass(state, g, params)?;
    readout_logits(&propagated, spec, params)
}
