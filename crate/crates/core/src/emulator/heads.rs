//! Mixture-density and Poisson output heads and their likelihoods.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorError, Var};

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

/// Per-cell two-component Gaussian mixture plus one Poisson rate per frame.
///
/// `logits`, `pi`, `mu` and `sigma` are `[T, M, P, k]`; `rate` is `[T]`.
#[derive(Debug, Clone, Copy)]
pub struct MixtureParams {
    pub logits: Var,
    pub pi: Var,
    pub mu: Var,
    pub sigma: Var,
    pub rate: Var,
}

impl MixtureParams {
    /// Mixture mean `sum_j pi_j mu_j`, shape `[T, M, P]`.
    pub fn mean(&self, g: &mut Graph) -> Result<Var> {
        let weighted = g.mul(self.pi, self.mu)?;
        let last = g.shape(weighted).len() - 1;
        Ok(g.sum(weighted, &[last])?)
    }
}

/// Mean over cells of `-log sum_j pi_j N(y; mu_j, sigma_j)`.
///
/// `y` is `[T, M, P]` (or any shape matching the leading axes of the
/// mixture tensors). The mixing weights enter through their logits, so the
/// sum is evaluated as a difference of two log-sum-exps.
pub fn mdn_nll(g: &mut Graph, params: &MixtureParams, y: Var) -> Result<Var> {
    let shape = g.shape(params.mu).to_vec();
    let k = *shape.last().ok_or_else(|| Error::Shape("empty mixture".into()))?;
    if g.shape(y) != &shape[..shape.len() - 1] {
        return Err(Error::Shape(format!(
            "target shape {:?} does not match mixture shape {:?}",
            g.shape(y),
            shape
        )));
    }
    if let Some(&bad) = g.value(params.sigma).iter().find(|&&s| s <= 0.0) {
        return Err(TensorError::Domain {
            op: "mdn_nll sigma",
            value: bad,
        }
        .into());
    }
    let y_rep: Vec<f64> = g
        .value(y)
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, k))
        .collect();
    let y_rep = g.constant(&shape, y_rep)?;
    let diff = g.sub(y_rep, params.mu)?;
    let z = g.div(diff, params.sigma)?;
    let z2 = g.square(z);
    let half_z2 = g.scale(z2, -0.5);
    let log_sigma = g.log(params.sigma)?;
    let log_norm = g.sub(half_z2, log_sigma)?;
    let log_norm = g.add_const(log_norm, -HALF_LN_TAU);
    let joint = g.add(params.logits, log_norm)?;
    let lse_joint = g.logsumexp_last(joint)?;
    let lse_logits = g.logsumexp_last(params.logits)?;
    let log_lik = g.sub(lse_joint, lse_logits)?;
    let mean = g.mean_all(log_lik);
    Ok(g.neg(mean))
}

/// `ln(n!)`, summed directly; exact enough for grid-sized counts.
pub fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Closed-form `KL(Pois(q) || Pois(p))`.
pub fn poisson_kl(q: f64, p: f64) -> f64 {
    p - q + q * (q / p).ln()
}

/// `-log Pois(count; rate)`.
pub fn poisson_nll(count: u64, rate: f64) -> f64 {
    rate - count as f64 * rate.ln() + ln_factorial(count)
}

/// Number of cells per frame below `threshold`.
pub fn burned_counts(y: &[f64], frame_len: usize, threshold: f64) -> Vec<u64> {
    y.chunks_exact(frame_len)
        .map(|f| f.iter().filter(|&&v| v < threshold).count() as u64)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PoissonOutcome {
    pub loss: Var,
    pub counts: Vec<u64>,
    /// Draws from `Pois(rate_t)`; diagnostic only.
    pub samples: Vec<u64>,
}

/// Variational free-energy loss on the per-frame burned-cell count:
/// `mean_t [ KL(Pois(rate_t) || Pois(prior)) - log Pois(c_t; rate_t) ]`.
pub fn poisson_head(
    g: &mut Graph,
    rate: Var,
    y_obs: &[f64],
    frame_len: usize,
    burned_threshold: f64,
    prior_rate: f64,
    rng: &mut impl Rng,
) -> Result<PoissonOutcome> {
    if !(prior_rate > 0.0 && prior_rate.is_finite()) {
        return Err(Error::Config(format!(
            "Poisson prior rate must be positive, got {prior_rate}"
        )));
    }
    let frames = g.value(rate).len();
    if frame_len == 0 || y_obs.len() != frames * frame_len {
        return Err(Error::Shape(format!(
            "{} observed values do not form {frames} frames of {frame_len}",
            y_obs.len()
        )));
    }
    if let Some(&bad) = g.value(rate).iter().find(|&&r| r <= 0.0) {
        return Err(TensorError::Domain {
            op: "poisson rate",
            value: bad,
        }
        .into());
    }
    let counts = burned_counts(y_obs, frame_len, burned_threshold);
    let shape = g.shape(rate).to_vec();

    // KL = prior - rate + rate * ln(rate / prior)
    let log_rate = g.log(rate)?;
    let kl_log = g.add_const(log_rate, -prior_rate.ln());
    let kl_prod = g.mul(rate, kl_log)?;
    let neg_rate = g.neg(rate);
    let kl = g.add(neg_rate, kl_prod)?;
    let kl = g.add_const(kl, prior_rate);

    // NLL = rate - c * ln(rate) + ln(c!)
    let c = g.constant(&shape, counts.iter().map(|&c| c as f64).collect())?;
    let c_log = g.mul(c, log_rate)?;
    let nll = g.sub(rate, c_log)?;
    let lnfact = g.constant(&shape, counts.iter().map(|&c| ln_factorial(c)).collect())?;
    let nll = g.add(nll, lnfact)?;

    let total = g.add(kl, nll)?;
    let loss = g.mean_all(total);

    let samples = g
        .value(rate)
        .iter()
        .map(|&r| Poisson::new(r).map(|d| d.sample(rng) as u64).unwrap_or(0))
        .collect();
    Ok(PoissonOutcome {
        loss,
        counts,
        samples,
    })
}
