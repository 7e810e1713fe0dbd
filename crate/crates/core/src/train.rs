//! Two-stage variational training loop.
//!
//! Each optimization step draws one soft adjacency and one latent sample,
//! reconstructs the (additionally masked) batch, and descends on
//!
//! ```text
//! KL_Z - log-likelihood + KL_G / num_batches + lambda * dag_penalty
//! ```
//!
//! i.e. the negative evidence lower bound with the graph KL amortized over
//! the epoch's batches, plus an acyclicity penalty on the sampled soft
//! adjacency whose weight ramps from zero after a short warmup.
//!
//! Stage one trains encoders, decoder and edge logits with forward
//! messages only, so reconstruction can only use parent-to-child paths and
//! the logits carry the structure signal.  Stage two freezes the logits,
//! adds a freshly initialized backward-message MLP, and keeps training the
//! rest so imputation can also exploit child-to-parent evidence.

use crate::error::{Error, Result};
use crate::graph::{dag_penalty, kl_bernoulli, sample_soft, GraphPosterior};
use crate::model::{decode_logits, encode, GroupSpec, LatentState, ModelParams, VarKind};
use crate::tensor::{backward, streams, Rng, Tensor};
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Per-batch input-masking policy.  `UniformFraction` hides a random
/// subset of the observed entries, each row drawing its own drop fraction
/// from `U(0, 1)` so the model trains against every missingness level;
/// `None` feeds all observed entries through untouched.  Either way the
/// reconstruction targets are the originally observed entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    UniformFraction,
    None,
}

impl std::str::FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<MaskPolicy> {
        match s {
            "uniform_fraction" => Ok(MaskPolicy::UniformFraction),
            "none" => Ok(MaskPolicy::None),
            other => Err(Error::Contract(format!(
                "unknown masking policy {other:?} (expected uniform_fraction or none)"
            ))),
        }
    }
}

/// Training hyperparameters.  `stage_split` is the fraction of epochs
/// spent in stage one (forward messages only, logits trainable);
/// `warmup_frac` is the fraction of stage-one epochs with the acyclicity
/// penalty switched off.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_dag: f64,
    pub tau: f64,
    pub stage_split: f64,
    pub warmup_frac: f64,
    pub masking: MaskPolicy,
    /// Latent samples averaged per step for the reconstruction term.
    pub mc_samples_train: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
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
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples_train == 0 {
            return Err(Error::Contract(format!(
                "epochs ({}), batch_size ({}) and mc_samples_train ({}) must be positive",
                self.epochs, self.batch_size, self.mc_samples_train
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Numeric(format!(
                "learning_rate ({}) and tau ({}) must be positive",
                self.learning_rate, self.tau
            )));
        }
        if !(self.stage_split > 0.0 && self.stage_split <= 1.0) {
            return Err(Error::Contract(format!(
                "stage_split must lie in (0, 1], got {}",
                self.stage_split
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Contract(format!(
                "warmup_frac must lie in [0, 1], got {}",
                self.warmup_frac
            )));
        }
        if self.lambda_dag < 0.0 {
            return Err(Error::Contract(format!(
                "lambda_dag must be non-negative, got {}",
                self.lambda_dag
            )));
        }
        Ok(())
    }

    /// Number of stage-one epochs (at least one, at most all).
    pub fn stage_one_epochs(&self) -> usize {
        ((self.epochs as f64 * self.stage_split).ceil() as usize).clamp(1, self.epochs)
    }

    /// Acyclicity-penalty weight in force during `epoch` (0-based):
    /// zero through the warmup prefix of stage one, `lambda_dag` after.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        let warmup = (self.stage_one_epochs() as f64 * self.warmup_frac).floor() as usize;
        if epoch < warmup {
            0.0
        } else {
            self.lambda_dag
        }
    }
}

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

/// `KL(N(mu, diag(exp(log_std)^2)) || N(0, sigma_z^2 I))` summed over all
/// entries of the group-major posterior blocks.
pub fn gaussian_kl(mu: &Tensor, log_std: &Tensor, sigma_z: f64) -> Result<Tensor> {
    if !(sigma_z > 0.0) {
        return Err(Error::Numeric(format!("sigma_z must be positive, got {sigma_z}")));
    }
    let var = log_std.mul_scalar(2.0).exp();
    let scaled = mu.square().add(&var)?.mul_scalar(1.0 / (sigma_z * sigma_z));
    let inner = scaled
        .sub(&log_std.mul_scalar(2.0))?
        .add_scalar(2.0 * sigma_z.ln() - 1.0);
    Ok(inner.sum().mul_scalar(0.5))
}

/// Masked log-likelihood of a batch under the decoder output.
///
/// `x_hat` carries the Gaussian mean for continuous variables and the raw
/// logit for binary ones (see [`decode_logits`]); entries where `mask` is
/// false contribute nothing.  Continuous entries score
/// `-0.5*ln(2*pi*sigma_x^2) - (x - x_hat)^2 / (2*sigma_x^2)`, binary ones
/// `x*x_hat - softplus(x_hat)`.
pub fn log_likelihood(
    x_hat: &Tensor,
    values: &[f64],
    mask: &[bool],
    spec: &GroupSpec,
    sigma_x: f64,
) -> Result<Tensor> {
    if !(sigma_x > 0.0) {
        return Err(Error::Numeric(format!("sigma_x must be positive, got {sigma_x}")));
    }
    let d = spec.num_vars();
    let shape = x_hat.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Dimension(format!(
            "x_hat shape {shape:?} does not match {d} variables"
        )));
    }
    let b = shape[0];
    if values.len() != b * d || mask.len() != b * d {
        return Err(Error::Dimension(format!(
            "{} values / {} mask entries for a {b} x {d} batch",
            values.len(),
            mask.len()
        )));
    }
    let mut x_cont = vec![0.0; b * d];
    let mut m_cont = vec![0.0; b * d];
    let mut x_bin = vec![0.0; b * d];
    let mut m_bin = vec![0.0; b * d];
    let mut n_cont = 0usize;
    let (mut any_cont, mut any_bin) = (false, false);
    for r in 0..b {
        for v in 0..d {
            let idx = r * d + v;
            if !mask[idx] {
                continue;
            }
            match spec.kind(v) {
                VarKind::Continuous => {
                    x_cont[idx] = values[idx];
                    m_cont[idx] = 1.0;
                    n_cont += 1;
                    any_cont = true;
                }
                VarKind::Binary => {
                    x_bin[idx] = values[idx];
                    m_bin[idx] = 1.0;
                    any_bin = true;
                }
            }
        }
    }
    let mut total: Option<Tensor> = None;
    if any_cont {
        let target = Tensor::constant(vec![b, d], x_cont)?;
        let m = Tensor::constant(vec![b, d], m_cont)?;
        let diff = x_hat.sub(&target)?.mul(&m)?;
        let norm_const = -0.5 * (2.0 * std::f64::consts::PI * sigma_x * sigma_x).ln();
        let term = diff
            .square()
            .sum()
            .mul_scalar(-1.0 / (2.0 * sigma_x * sigma_x))
            .add_scalar(n_cont as f64 * norm_const);
        total = Some(term);
    }
    if any_bin {
        let target = Tensor::constant(vec![b, d], x_bin)?;
        let m = Tensor::constant(vec![b, d], m_bin)?;
        let term = x_hat
            .mul(&target)?
            .sub(&x_hat.softplus().mul(&m)?)?
            .sum();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Training-time input mask.  Under `UniformFraction` every sample draws an
/// independent drop fraction `p ~ U(0, 1)`, then each entry is dropped with
/// probability `p`; the result is `observed AND NOT dropped`, so unobserved
/// entries stay unobserved and the model sees reconstruction targets it was
/// not shown.  Under `None` the observed mask passes through and the rng is
/// untouched.
pub fn apply_mask(
    observed: &[bool],
    batch: usize,
    vars: usize,
    rng: &mut Rng,
    policy: MaskPolicy,
) -> Result<Vec<bool>> {
    if observed.len() != batch * vars {
        return Err(Error::Dimension(format!(
            "{} mask entries for a {batch} x {vars} batch",
            observed.len()
        )));
    }
    if policy == MaskPolicy::None {
        return Ok(observed.to_vec());
    }
    let mut out = vec![false; batch * vars];
    for r in 0..batch {
        let p = rng.uniform();
        for v in 0..vars {
            let idx = r * vars + v;
            // always consume one draw per entry so the stream stays aligned
            // regardless of the missingness pattern
            let u = rng.uniform();
            out[idx] = observed[idx] && u >= p;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Scale `grads` down to `max_norm` if their joint Euclidean norm exceeds
/// it; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

struct AdamSlot {
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8) and
/// optional global-norm gradient clipping across all managed tensors.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Adam {
        let slots = params
            .into_iter()
            .map(|p| {
                let n = p.numel();
                AdamSlot { param: p, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, slots }
    }

    /// Apply one update from the gradients currently stored on the managed
    /// tensors (missing gradients count as zero), then clear them.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, grad_clip: Option<f64>) -> Result<f64> {
        let mut grads: Vec<Vec<f64>> = self
            .slots
            .iter()
            .map(|s| s.param.grad().unwrap_or_else(|| vec![0.0; s.param.numel()]))
            .collect();
        let norm = match grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt(),
        };
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (slot, g) in self.slots.iter_mut().zip(grads.iter()) {
            let mut data = slot.param.to_vec();
            for i in 0..data.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            slot.param.set_data(&data)?;
            slot.param.zero_grad();
        }
        Ok(norm)
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Per-epoch diagnostics.  `recon` and `kl_z` are summed over the epoch's
/// batches, `kl_g` and `dag_penalty` are per-step means (each step sees
/// the full graph terms), and `neg_elbo = kl_z + kl_g - recon`.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub neg_elbo: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_g: f64,
    pub dag_penalty: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "epoch,neg_elbo,recon,kl_z,kl_g,dag_penalty,seconds")?;
        for s in &self.epochs {
            writeln!(
                file,
                "{},{},{},{},{},{},{}",
                s.epoch, s.neg_elbo, s.recon, s.kl_z, s.kl_g, s.dag_penalty, s.seconds
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

fn trainable(params: &ModelParams, graph: Option<&GraphPosterior>) -> Vec<Tensor> {
    let mut list: Vec<Tensor> = params.parameters().into_iter().map(|(_, t)| t).collect();
    if let Some(g) = graph {
        list.push(g.logits().clone());
    }
    list
}

/// Train model and graph posterior on `n` rows of `values`/`observed`
/// (row-major `n x D`).  Mutates the parameter tensors and the graph
/// logits in place and returns the per-epoch trace.
pub fn fit(
    values: &[f64],
    observed: &[bool],
    n: usize,
    spec: &GroupSpec,
    params: &mut ModelParams,
    graph: &GraphPosterior,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let d = spec.num_vars();
    if n == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if values.len() != n * d || observed.len() != n * d {
        return Err(Error::Dimension(format!(
            "{} values / {} mask entries for {n} x {d} data",
            values.len(),
            observed.len()
        )));
    }
    if graph.num_nodes() != spec.num_groups() {
        return Err(Error::Contract(format!(
            "graph has {} nodes for {} groups",
            graph.num_nodes(),
            spec.num_groups()
        )));
    }

    let stage_one = cfg.stage_one_epochs();
    let num_batches = n.div_ceil(cfg.batch_size);
    let kl_g_scale = 1.0 / num_batches as f64;
    let mut rng = Rng::new(cfg.seed, streams::TRAIN);
    let mut adam = Adam::new(trainable(params, Some(graph)), cfg.learning_rate);
    let mut trace = TrainTrace::default();
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        if epoch == stage_one && epoch < cfg.epochs {
            // stage two: freeze edge logits, add backward messages, restart
            // the optimizer state for the remaining parameters
            params.enable_backward(&mut rng);
            adam = Adam::new(trainable(params, None), cfg.learning_rate);
            log::info!("entering stage two at epoch {epoch}: logits frozen, backward messages on");
        }
        let started = Instant::now();
        rng.shuffle(&mut indices);
        let lambda = cfg.lambda_at(epoch);
        let (mut recon_sum, mut kl_z_sum, mut kl_g_sum, mut dag_sum) = (0.0, 0.0, 0.0, 0.0);

        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut vals = Vec::with_capacity(b * d);
            let mut obs = Vec::with_capacity(b * d);
            for &row in chunk {
                vals.extend_from_slice(&values[row * d..(row + 1) * d]);
                obs.extend_from_slice(&observed[row * d..(row + 1) * d]);
            }
            let input_mask = apply_mask(&obs, b, d, &mut rng, cfg.masking)?;
            let g_soft = sample_soft(graph, cfg.tau, &mut rng)?;

            let mut ll = Tensor::scalar(0.0);
            let mut kl_z = Tensor::scalar(0.0);
            for s in 0..cfg.mc_samples_train {
                let state: LatentState = encode(&vals, &input_mask, b, spec, params, &mut rng)?;
                let x_hat = decode_logits(&state, &g_soft, spec, params)?;
                ll = ll.add(&log_likelihood(&x_hat, &vals, &obs, spec, params.sigma_x())?)?;
                if s == 0 {
                    kl_z = gaussian_kl(&state.mu, &state.log_std, params.sigma_z())?;
                }
            }
            if cfg.mc_samples_train > 1 {
                ll = ll.mul_scalar(1.0 / cfg.mc_samples_train as f64);
            }
            let kl_g = kl_bernoulli(graph)?;
            let penalty = dag_penalty(&g_soft)?;

            let mut loss = kl_z.sub(&ll)?.add(&kl_g.mul_scalar(kl_g_scale))?;
            if lambda > 0.0 {
                loss = loss.add(&penalty.mul_scalar(lambda))?;
            }
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} at epoch {epoch}, batch {batch_no} \
                     (recon {}, kl_z {}, kl_g {}, dag {})",
                    ll.item()?,
                    kl_z.item()?,
                    kl_g.item()?,
                    penalty.item()?
                )));
            }
            backward(&loss)?;
            adam.step(cfg.grad_clip)?;
            // in stage two the logits still accumulate gradients but sit in
            // no optimizer; drop them so they cannot pile up
            graph.logits().zero_grad();

            recon_sum += ll.item()?;
            kl_z_sum += kl_z.item()?;
            kl_g_sum += kl_g.item()?;
            dag_sum += penalty.item()?;
        }

        let steps = num_batches as f64;
        let stats = EpochStats {
            epoch,
            neg_elbo: kl_z_sum + kl_g_sum / steps - recon_sum,
            recon: recon_sum,
            kl_z: kl_z_sum,
            kl_g: kl_g_sum / steps,
            dag_penalty: dag_sum / steps,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {}: neg_elbo {:.4}, recon {:.4}, kl_z {:.4}, kl_g {:.4}, dag {:.6}",
            stats.epoch, stats.neg_elbo, stats.recon, stats.kl_z, stats.kl_g, stats.dag_penalty
        );
        trace.epochs.push(stats);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fill_value;

    fn spec2() -> GroupSpec {
        GroupSpec::singletons(
            &["x0".to_string(), "x1".to_string()],
            vec![VarKind::Continuous; 2],
        )
        .unwrap()
    }

    #[test]
    fn lambda_schedule_warms_up_inside_stage_one() {
        let cfg = TrainConfig { epochs: 40, stage_split: 0.5, warmup_frac: 0.1, lambda_dag: 10.0, ..TrainConfig::default() };
        assert_eq!(cfg.stage_one_epochs(), 20);
        assert_eq!(cfg.lambda_at(0), 0.0);
        assert_eq!(cfg.lambda_at(1), 0.0);
        assert_eq!(cfg.lambda_at(2), 10.0);
        assert_eq!(cfg.lambda_at(39), 10.0);
        let no_warmup = TrainConfig { warmup_frac: 0.0, ..cfg };
        assert_eq!(no_warmup.lambda_at(0), 10.0);
    }

    #[test]
    fn gaussian_kl_is_zero_at_the_prior_and_matches_monte_carlo() {
        // posterior == prior => exactly zero
        let mu = Tensor::constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let ls = Tensor::constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(gaussian_kl(&mu, &ls, 1.0).unwrap().item().unwrap(), 0.0);

        // single coordinate vs. a Monte-Carlo estimate of E_q[ln q - ln p]
        let (m, s, sz) = (0.5_f64, 0.3_f64.exp(), 1.3_f64);
        let mu = Tensor::constant(vec![1, 1], vec![m]).unwrap();
        let ls = Tensor::constant(vec![1, 1], vec![0.3]).unwrap();
        let analytic = gaussian_kl(&mu, &ls, sz).unwrap().item().unwrap();
        let n = 200_000;
        let mut rng = Rng::new(42, streams::TRAIN);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = m + s * rng.normal();
            let ln_q = -((z - m) * (z - m)) / (2.0 * s * s) - s.ln();
            let ln_p = -(z * z) / (2.0 * sz * sz) - sz.ln();
            let x = ln_q - ln_p;
            sum += x;
            sum_sq += x * x;
        }
        let mc = sum / n as f64;
        let se = ((sum_sq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (analytic - mc).abs() < 3.0 * se,
            "analytic {analytic} vs MC {mc} +- {se}"
        );
    }

    #[test]
    fn log_likelihood_matches_a_scalar_reference() {
        // mixed-kind batch scored entry by entry with plain f64 arithmetic
        let spec = GroupSpec::new(
            vec![vec![0], vec![1, 2]],
            vec!["a".into(), "b".into()],
            vec![VarKind::Continuous, VarKind::Binary, VarKind::Continuous],
        )
        .unwrap();
        let sigma_x = 0.02_f64.sqrt();
        let values = vec![1.2, 1.0, -0.3, 0.4, 0.0, 99.0];
        let mask = vec![true, true, true, true, true, false]; // last entry ignored
        let x_hat_v = vec![0.9, 0.7, -0.3, 0.4, -1.1, 5.0];
        let x_hat = Tensor::constant(vec![2, 3], x_hat_v.clone()).unwrap();
        let got = log_likelihood(&x_hat, &values, &mask, &spec, sigma_x)
            .unwrap()
            .item()
            .unwrap();
        let mut want = 0.0;
        for (idx, (&x, &y)) in values.iter().zip(x_hat_v.iter()).enumerate() {
            if !mask[idx] {
                continue;
            }
            if idx % 3 == 1 {
                want += x * y - (1.0 + y.exp()).ln();
            } else {
                want += -0.5 * (2.0 * std::f64::consts::PI * sigma_x * sigma_x).ln()
                    - (x - y) * (x - y) / (2.0 * sigma_x * sigma_x);
            }
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        // the per-entry constant for a perfectly reconstructed continuous
        // value at this noise level (single live entry via the mask)
        let spec2v = GroupSpec::singletons(&["a".into(), "b".into()], vec![VarKind::Continuous; 2]).unwrap();
        let xh = Tensor::constant(vec![1, 2], vec![0.9, 123.0]).unwrap();
        let v = log_likelihood(&xh, &[0.9, 0.0], &[true, false], &spec2v, sigma_x)
            .unwrap()
            .item()
            .unwrap();
        assert!((v - 1.0370729695094003).abs() < 1e-12, "constant term {v}");
    }

    #[test]
    fn masking_drops_half_on_average_and_respects_observed() {
        let (batch, vars) = (10_000, 4);
        let mut observed = vec![true; batch * vars];
        // mark one column partially unobserved
        for r in 0..batch {
            if r % 3 == 0 {
                observed[r * vars + 2] = false;
            }
        }
        let mut rng = Rng::new(5, streams::TRAIN);
        let kept = apply_mask(&observed, batch, vars, &mut rng, MaskPolicy::UniformFraction).unwrap();
        assert!(kept.iter().zip(observed.iter()).all(|(&k, &o)| !k || o), "mask must stay inside observed");
        let observed_total = observed.iter().filter(|&&o| o).count();
        let kept_total = kept.iter().filter(|&&k| k).count();
        let frac = kept_total as f64 / observed_total as f64;
        // E[kept] = E_p[1 - p] = 0.5; row-level correlation dominates the
        // variance, sigma ~ sqrt((1/12 + 1/16) / batch) ~ 0.0037
        assert!((frac - 0.5).abs() < 0.012, "kept fraction {frac}");
    }

    #[test]
    fn disabled_masking_passes_the_observed_mask_through() {
        let observed = vec![true, false, true, true, false, false];
        let mut rng = Rng::new(5, streams::TRAIN);
        let before = rng.uniform();
        let mut rng = Rng::new(5, streams::TRAIN);
        let kept = apply_mask(&observed, 2, 3, &mut rng, MaskPolicy::None).unwrap();
        assert_eq!(kept, observed);
        assert_eq!(rng.uniform(), before, "policy none must not consume randomness");
        // round-trip of the serialized names used by run configurations
        assert_eq!(serde_json::to_string(&MaskPolicy::UniformFraction).unwrap(), "\"uniform_fraction\"");
        assert_eq!("none".parse::<MaskPolicy>().unwrap(), MaskPolicy::None);
        assert!("sometimes".parse::<MaskPolicy>().is_err());
    }

    #[test]
    fn adam_first_step_is_a_signed_learning_rate_move() {
        let p = Tensor::parameter(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::constant(vec![1, 3], vec![0.5, -2.0, 0.0]).unwrap();
        let loss = p.mul(&c).unwrap().sum();
        backward(&loss).unwrap();
        let mut adam = Adam::new(vec![p.clone()], 0.01);
        adam.step(None).unwrap();
        let v = p.to_vec();
        // bias-corrected first step is -lr * g / (|g| + ~eps)
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6, "{}", v[0]);
        assert!((v[1] - (2.0 + 0.01)).abs() < 1e-6, "{}", v[1]);
        assert_eq!(v[2], 3.0, "zero gradient must not move");
        assert!(p.grad().is_none(), "step clears gradients");
    }

    #[test]
    fn global_norm_clipping_rescales_exactly() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_global_norm(&mut grads, 2.5);
        assert_eq!(norm, 5.0);
        assert!((grads[0][0] - 1.5).abs() < 1e-12);
        assert!((grads[1][0] - 2.0).abs() < 1e-12);
        // under the ceiling: untouched
        let mut grads = vec![vec![0.3, 0.4]];
        let norm = clip_global_norm(&mut grads, 2.5);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(grads[0], vec![0.3, 0.4]);
    }

    /// Full training loss (one step's computation with frozen noise) as a
    /// plain function of the current parameter values.
    fn loss_with_frozen_noise(
        spec: &GroupSpec,
        params: &ModelParams,
        graph: &GraphPosterior,
        values: &[f64],
        observed: &[bool],
        b: usize,
        lambda: f64,
    ) -> Tensor {
        let mut rng = Rng::new(7, streams::TRAIN);
        let g_soft = sample_soft(graph, 0.5, &mut rng).unwrap();
        let state = encode(values, observed, b, spec, params, &mut rng).unwrap();
        let x_hat = decode_logits(&state, &g_soft, spec, params).unwrap();
        let ll = log_likelihood(&x_hat, values, observed, spec, params.sigma_x()).unwrap();
        let kl_z = gaussian_kl(&state.mu, &state.log_std, params.sigma_z()).unwrap();
        let kl_g = kl_bernoulli(graph).unwrap();
        let penalty = dag_penalty(&g_soft).unwrap();
        kl_z.sub(&ll)
            .unwrap()
            .add(&kl_g)
            .unwrap()
            .add(&penalty.mul_scalar(lambda))
            .unwrap()
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        let spec = spec2();
        let mut init = Rng::new(11, streams::INIT);
        let mut params = ModelParams::new(&spec, 3, 2, 1.0, 0.5, &mut init).unwrap();
        params.enable_backward(&mut init);
        let graph = GraphPosterior::new(2, 0.4, 0.3).unwrap();
        let values = vec![0.8, -0.2, 1.1, 0.4, -0.7, 0.9];
        let observed = vec![true, true, true, false, true, true];
        let lambda = 3.0;

        let loss = loss_with_frozen_noise(&spec, &params, &graph, &values, &observed, 3, lambda);
        backward(&loss).unwrap();

        let mut targets: Vec<(&'static str, Tensor)> = vec![("logits", graph.logits().clone())];
        for (name, t) in params.parameters() {
            for pick in ["encoder.shared.w1", "pair_forward.w1_src", "pair_backward.w2", "node.w2", "readout.shared.w1"] {
                if name == pick {
                    targets.push((pick, t.clone()));
                }
            }
        }
        assert_eq!(targets.len(), 6);
        let h = 1e-5;
        for (name, t) in targets {
            let analytic = t.grad().expect("gradient reaches every parameter");
            let base = t.to_vec();
            for idx in 0..base.len().min(4) {
                let mut plus = base.clone();
                plus[idx] += h;
                t.set_data(&plus).unwrap();
                let fp = loss_with_frozen_noise(&spec, &params, &graph, &values, &observed, 3, lambda)
                    .item()
                    .unwrap();
                let mut minus = base.clone();
                minus[idx] -= h;
                t.set_data(&minus).unwrap();
                let fm = loss_with_frozen_noise(&spec, &params, &graph, &values, &observed, 3, lambda)
                    .item()
                    .unwrap();
                t.set_data(&base).unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let rel = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
                assert!(
                    rel < 1e-4,
                    "{name}[{idx}]: analytic {} vs numeric {numeric}",
                    analytic[idx]
                );
            }
            t.zero_grad();
        }
    }

    fn toy_sem(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        // x1 ~ N(0,1), x2 = sin(3 x1) + noise
        let mut rng = Rng::new(seed, streams::DATA);
        let mut values = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let x1 = rng.normal();
            let x2 = (3.0 * x1).sin() + 0.1 * rng.normal();
            values.push(x1);
            values.push(x2);
        }
        (values, vec![true; n * 2])
    }

    #[test]
    fn fit_reduces_the_negative_elbo_on_a_toy_sem() {
        let spec = spec2();
        let (values, observed) = toy_sem(200, 3);
        let mut init = Rng::new(1, streams::INIT);
        let mut params = ModelParams::new(&spec, 8, 3, 1.0, 0.5, &mut init).unwrap();
        let graph = GraphPosterior::new(2, 0.5, 0.3).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 50,
            lambda_dag: 1.0,
            seed: 9,
            ..TrainConfig::default()
        };
        let trace = fit(&values, &observed, 200, &spec, &mut params, &graph, &cfg).unwrap();
        assert_eq!(trace.epochs.len(), 40);
        let first = trace.epochs[0].neg_elbo;
        let last: f64 = trace.epochs[35..].iter().map(|e| e.neg_elbo).sum::<f64>() / 5.0;
        assert!(
            last < first,
            "training did not improve the bound: first {first}, late mean {last}"
        );
        assert!(params.backward_enabled(), "stage two must have started");
        assert!(trace.epochs.iter().all(|e| e.seconds >= 0.0));
    }

    #[test]
    fn stage_two_leaves_the_edge_logits_untouched() {
        let spec = spec2();
        let (values, observed) = toy_sem(60, 4);
        let base_cfg = TrainConfig {
            batch_size: 30,
            lambda_dag: 2.0,
            warmup_frac: 0.0,
            seed: 21,
            ..TrainConfig::default()
        };

        // run A: three stage-one epochs only
        let mut init = Rng::new(2, streams::INIT);
        let mut pa = ModelParams::new(&spec, 4, 2, 1.0, 0.5, &mut init).unwrap();
        let ga = GraphPosterior::new(2, 0.5, 0.3).unwrap();
        let cfg_a = TrainConfig { epochs: 3, stage_split: 1.0, ..base_cfg.clone() };
        fit(&values, &observed, 60, &spec, &mut pa, &ga, &cfg_a).unwrap();

        // run B: the same three stage-one epochs, then three stage-two epochs
        let mut init = Rng::new(2, streams::INIT);
        let mut pb = ModelParams::new(&spec, 4, 2, 1.0, 0.5, &mut init).unwrap();
        let gb = GraphPosterior::new(2, 0.5, 0.3).unwrap();
        let cfg_b = TrainConfig { epochs: 6, stage_split: 0.5, ..base_cfg };
        fit(&values, &observed, 60, &spec, &mut pb, &gb, &cfg_b).unwrap();

        assert_eq!(
            ga.logits().to_vec(),
            gb.logits().to_vec(),
            "stage two moved the logits"
        );
        assert!(pb.backward_enabled() && !pa.backward_enabled());
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let spec = spec2();
        let values = vec![1e200, 0.0, 0.5, -0.5];
        let observed = vec![true; 4];
        let mut init = Rng::new(3, streams::INIT);
        let mut params = ModelParams::new(&spec, 4, 2, 1.0, 0.5, &mut init).unwrap();
        let graph = GraphPosterior::new(2, 0.5, 0.3).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, seed: 1, ..TrainConfig::default() };
        match fit(&values, &observed, 2, &spec, &mut params, &graph, &cfg) {
            Err(Error::Numeric(msg)) => {
                assert!(msg.contains("epoch 0"), "diagnostic missing location: {msg}");
            }
            other => panic!("expected a numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_the_expected_columns() {
        let trace = TrainTrace {
            epochs: vec![EpochStats {
                epoch: 0,
                neg_elbo: 12.5,
                recon: -10.0,
                kl_z: 2.0,
                kl_g: 0.5,
                dag_penalty: 0.01,
                seconds: 0.25,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,neg_elbo,recon,kl_z,kl_g,dag_penalty,seconds"
        );
        assert_eq!(lines.next().unwrap(), "0,12.5,-10,2,0.5,0.01,0.25");
        assert!(lines.next().is_none());
    }

    #[test]
    fn fill_constants_by_kind() {
        assert_eq!(fill_value(VarKind::Continuous), 0.0);
        assert_eq!(fill_value(VarKind::Binary), 0.5);
    }
}
