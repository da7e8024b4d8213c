//! Computable generalization-bound diagnostics.
//!
//! These are the closed-form ingredients of the method's convergence-rate
//! analysis: the variational estimation error `r_n`, the statistical
//! estimation error `eps_n`, the prior-width recipe `sigma_star_sq`, the
//! closed-form optimal aggregated prior with its average-KL objective, and
//! a squared-Hellinger estimator for regression predictions under
//! Gaussian observation noise. All are deterministic pure functions used
//! for reporting; none feed back into training. Logs are natural.

use crate::error::{BpfedError, Result};
use crate::gaussian::{self, GaussianParamSet, SIGMA_FLOOR};

/// Inputs of the bound calculators.
///
/// `t1`/`t2` are the personalized and shared parameter counts; one may be
/// zero (a mode without that factor) but not both. `b_sup` bounds the
/// parameter sup-norm, `alpha` and `delta` are the free constants of the
/// statistical term (`delta > 1`), and `sigma_eps` is the observation
/// noise of the regression likelihood the analysis assumes.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub hidden_layers: usize,
    pub width: usize,
    pub input_dim: usize,
    pub t1: usize,
    pub t2: usize,
    pub n_samples: usize,
    pub n_clients: usize,
    pub b_sup: f64,
    pub alpha: f64,
    pub delta: f64,
    pub sigma_eps: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0
            || self.width == 0
            || self.input_dim == 0
            || self.n_samples == 0
            || self.n_clients == 0
        {
            return Err(BpfedError::InvalidArgument(
                "bound inputs need nonzero layers, width, input dim, samples, and clients".into(),
            ));
        }
        if self.t1 + self.t2 == 0 {
            return Err(BpfedError::InvalidArgument(
                "at least one factor must have parameters".into(),
            ));
        }
        if !(self.b_sup.is_finite() && self.b_sup > 0.0) {
            return Err(BpfedError::InvalidArgument(format!(
                "parameter bound must be positive, got {}",
                self.b_sup
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(BpfedError::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.delta.is_finite() && self.delta > 1.0) {
            return Err(BpfedError::InvalidArgument(format!(
                "delta must exceed 1, got {}",
                self.delta
            )));
        }
        if !(self.sigma_eps.is_finite() && self.sigma_eps > 0.0) {
            return Err(BpfedError::InvalidArgument(format!(
                "noise std must be positive, got {}",
                self.sigma_eps
            )));
        }
        Ok(())
    }

    fn t_total(&self) -> f64 {
        (self.t1 + self.t2) as f64
    }
}

/// Variational estimation error:
/// `((L+1)·T/n)·ln N + (T/n)·ln(e0·sqrt(n/T))` with `T = t1 + t2`.
pub fn r_n(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let l = inp.hidden_layers as f64;
    let t = inp.t_total();
    let n = inp.n_samples as f64;
    let first = (l + 1.0) * t / n * (inp.n_clients as f64).ln();
    let second = t / n * (inp.input_dim as f64 * (n / t).sqrt()).ln();
    Ok(first + second)
}

/// Statistical estimation error:
/// `alpha·n^{-1/2}·(ln n)^delta·sqrt(T·((L+1)·ln K + ln(e0·sqrt(n/T))))`.
///
/// The radicand can go negative for narrow networks on tiny inputs (e.g.
/// width 1, so `ln K = 0`, with `e0·sqrt(n/T) < 1`): that is outside the
/// bound's regime and reported as a domain error.
pub fn eps_n(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    if inp.n_samples < 2 {
        return Err(BpfedError::InvalidArgument(format!(
            "statistical term needs n >= 2, got {}",
            inp.n_samples
        )));
    }
    let l = inp.hidden_layers as f64;
    let t = inp.t_total();
    let n = inp.n_samples as f64;
    let radicand =
        t * ((l + 1.0) * (inp.width as f64).ln() + (inp.input_dim as f64 * (n / t).sqrt()).ln());
    if radicand < 0.0 {
        return Err(BpfedError::Domain(format!(
            "statistical term undefined: radicand {radicand:.6e} is negative"
        )));
    }
    Ok(inp.alpha / n.sqrt() * n.ln().powf(inp.delta) * radicand.sqrt())
}

/// Prior-width recipe:
/// `T/(8n) · ln(3·e0·K)^{-1} · (2BK)^{-2(L+1)} ·
///  { (e0 + BK/(BK-1))^2 + ((2BK)^2-1)^{-1} + 2·(2BK-1)^{-2} }^{-1}`.
///
/// Requires `B·K > 1`. The sample count enters through one final division
/// so that doubling `n` halves the value exactly.
pub fn sigma_star_sq(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let bk = inp.b_sup * inp.width as f64;
    if bk <= 1.0 {
        return Err(BpfedError::Domain(format!(
            "prior width needs B*K > 1, got {bk}"
        )));
    }
    let l = inp.hidden_layers as f64;
    let e0 = inp.input_dim as f64;
    let brace = {
        let a = e0 + bk / (bk - 1.0);
        a * a + 1.0 / ((2.0 * bk) * (2.0 * bk) - 1.0) + 2.0 / ((2.0 * bk - 1.0) * (2.0 * bk - 1.0))
    };
    let n_free = inp.t_total()
        / 8.0
        / (3.0 * e0 * inp.width as f64).ln()
        / (2.0 * bk).powf(2.0 * (l + 1.0))
        / brace;
    Ok(n_free / inp.n_samples as f64)
}

/// Closed-form minimizer of the average KL from a set of diagonal
/// Gaussian posteriors: per coordinate, `mu* = mean(mu_i)` and
/// `sigma*^2 = mean(sigma_i^2 + mu_i^2) - mu*^2`. The returned scale is
/// floored at the global minimum to stay representable.
pub fn optimal_prior(posteriors: &[GaussianParamSet]) -> Result<GaussianParamSet> {
    let first = posteriors.first().ok_or_else(|| {
        BpfedError::InvalidArgument("optimal prior needs at least one posterior".into())
    })?;
    let dim = first.len();
    for p in posteriors {
        if p.len() != dim {
            return Err(BpfedError::LengthMismatch {
                expected: dim,
                got: p.len(),
            });
        }
    }
    let n = posteriors.len() as f64;
    let mut mu = vec![0.0; dim];
    let mut second_moment = vec![0.0; dim];
    for p in posteriors {
        let sigma = p.sigma();
        for k in 0..dim {
            mu[k] += p.mu[k] / n;
            second_moment[k] += (sigma[k] * sigma[k] + p.mu[k] * p.mu[k]) / n;
        }
    }
    let rho = (0..dim)
        .map(|k| {
            let var = (second_moment[k] - mu[k] * mu[k]).max(SIGMA_FLOOR * SIGMA_FLOOR);
            gaussian::inv_softplus(var.sqrt())
        })
        .collect();
    GaussianParamSet::new(mu, rho)
}

/// Mean KL divergence from each posterior to one prior.
pub fn avg_kl_to_prior(posteriors: &[GaussianParamSet], prior: &GaussianParamSet) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(BpfedError::InvalidArgument(
            "average KL needs at least one posterior".into(),
        ));
    }
    let mut total = 0.0;
    for p in posteriors {
        total += gaussian::kl_diag_gaussian(p, prior)?;
    }
    Ok(total / posteriors.len() as f64)
}

/// Monte Carlo squared-Hellinger estimate between two regression
/// predictors under Gaussian observation noise `sigma_eps`:
/// `mean over points of (1 - exp(-(f_pred - f_true)^2 / (8 sigma_eps^2)))`.
///
/// Always in `[0, 1)`: the exact value is strictly below 1, and once gaps
/// are so large that the exponential underflows the result is pinned to
/// the largest double below 1 rather than saturating to 1.
pub fn hellinger_sq_estimate(f_pred: &[f64], f_true: &[f64], sigma_eps: f64) -> Result<f64> {
    if f_pred.len() != f_true.len() {
        return Err(BpfedError::LengthMismatch {
            expected: f_pred.len(),
            got: f_true.len(),
        });
    }
    if f_pred.is_empty() {
        return Err(BpfedError::EmptyData(
            "hellinger estimate needs at least one prediction".into(),
        ));
    }
    if !(sigma_eps.is_finite() && sigma_eps > 0.0) {
        return Err(BpfedError::InvalidArgument(format!(
            "noise std must be positive, got {sigma_eps}"
        )));
    }
    let denom = 8.0 * sigma_eps * sigma_eps;
    let total: f64 = f_pred
        .iter()
        .zip(f_true.iter())
        .map(|(&a, &b)| -(-(a - b) * (a - b) / denom).exp_m1())
        .sum();
    let below_one = f64::from_bits(1.0f64.to_bits() - 1);
    Ok((total / f_pred.len() as f64).min(below_one))
}
