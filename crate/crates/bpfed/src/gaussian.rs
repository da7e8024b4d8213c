//! Mean-field Gaussian parameter sets.
//!
//! A parameter set holds one mean `mu` and one pre-activation scale `rho`
//! per weight. The standard deviation is `sigma = softplus(rho)` clamped to
//! a small positive floor, which keeps the KL divergence finite and lets the
//! same machinery express point-mass (Dirac) parameters by driving `rho` far
//! negative. Sampling uses the reparameterization `w = mu + sigma * eps`
//! with externally supplied standard-normal noise, so gradients flow through
//! `mu` and `rho` analytically.

use crate::error::{BpfedError, Result};

/// Smallest representable standard deviation. Clamping here prevents
/// `log(0)` and division by zero in the KL terms and realizes the
/// sigma -> 0+ point-mass limit at a finite value.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// A `rho` value far enough below the softplus floor that the clamp is
/// always active; parameter sets built with this scale behave as point
/// masses (up to `SIGMA_FLOOR` jitter under sampling).
pub const RHO_POINT_MASS: f64 = -50.0;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `s > 0`: returns `rho` with
/// `softplus(rho) == s`. Stable across the full range via
/// `rho = s + ln(1 - e^(-s))` with the inner term computed by `expm1`.
pub fn inv_softplus(s: f64) -> f64 {
    s + (-(-s).exp_m1()).ln()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard deviation for one `rho` value: softplus clamped to the floor.
pub fn sigma_from_rho(rho: f64) -> f64 {
    softplus(rho).max(SIGMA_FLOOR)
}

/// Derivative of [`sigma_from_rho`] with respect to `rho`; zero while the
/// floor clamp is active, so point-mass scales receive no scale gradient.
pub fn dsigma_drho(rho: f64) -> f64 {
    if softplus(rho) > SIGMA_FLOOR {
        sigmoid(rho)
    } else {
        0.0
    }
}

/// Standard-normal noise for one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn new(eps: Vec<f64>) -> NoiseDraw {
        NoiseDraw { eps }
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }
}

/// Variational parameters of a diagonal Gaussian over a weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParamSet {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl GaussianParamSet {
    /// Validate and wrap `(mu, rho)` buffers.
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<GaussianParamSet> {
        if mu.len() != rho.len() {
            return Err(BpfedError::LengthMismatch {
                expected: mu.len(),
                got: rho.len(),
            });
        }
        if mu.iter().chain(rho.iter()).any(|v| !v.is_finite()) {
            return Err(BpfedError::InvalidArgument(
                "gaussian parameters must be finite".into(),
            ));
        }
        Ok(GaussianParamSet { mu, rho })
    }

    /// Constant set: every coordinate has mean `mu0` and std `sigma0`.
    pub fn constant(len: usize, mu0: f64, sigma0: f64) -> Result<GaussianParamSet> {
        if sigma0 <= 0.0 || !sigma0.is_finite() || !mu0.is_finite() {
            return Err(BpfedError::InvalidArgument(format!(
                "constant gaussian set needs finite mu and sigma > 0, got mu={mu0}, sigma={sigma0}"
            )));
        }
        Ok(GaussianParamSet {
            mu: vec![mu0; len],
            rho: vec![inv_softplus(sigma0); len],
        })
    }

    /// Point-mass set at the given means (std clamped to the floor).
    pub fn point_mass(mu: Vec<f64>) -> GaussianParamSet {
        let rho = vec![RHO_POINT_MASS; mu.len()];
        GaussianParamSet { mu, rho }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Per-coordinate standard deviations (softplus of `rho`, floored).
    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| sigma_from_rho(r)).collect()
    }

    /// Concatenate two sets (self first).
    pub fn concat(&self, other: &GaussianParamSet) -> GaussianParamSet {
        let mut mu = self.mu.clone();
        mu.extend_from_slice(&other.mu);
        let mut rho = self.rho.clone();
        rho.extend_from_slice(&other.rho);
        GaussianParamSet { mu, rho }
    }

    /// Bit patterns of all parameters, for byte-exact comparisons in tests
    /// and instrumentation.
    pub fn bit_pattern(&self) -> Vec<u64> {
        self.mu
            .iter()
            .chain(self.rho.iter())
            .map(|v| v.to_bits())
            .collect()
    }
}

/// Reparameterized draw `w = mu + sigma * eps`.
pub fn sample(params: &GaussianParamSet, noise: &NoiseDraw) -> Result<Vec<f64>> {
    if noise.len() != params.len() {
        return Err(BpfedError::LengthMismatch {
            expected: params.len(),
            got: noise.len(),
        });
    }
    Ok(params
        .mu
        .iter()
        .zip(params.rho.iter())
        .zip(noise.eps.iter())
        .map(|((&m, &r), &e)| m + sigma_from_rho(r) * e)
        .collect())
}

/// Closed-form KL divergence between diagonal Gaussians,
/// `KL(q || p) = sum_k [ ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2 ]`.
pub fn kl_diag_gaussian(q: &GaussianParamSet, p: &GaussianParamSet) -> Result<f64> {
    if q.len() != p.len() {
        return Err(BpfedError::LengthMismatch {
            expected: q.len(),
            got: p.len(),
        });
    }
    let mut total = 0.0;
    for k in 0..q.len() {
        let sq = sigma_from_rho(q.rho[k]);
        let sp = sigma_from_rho(p.rho[k]);
        let dm = q.mu[k] - p.mu[k];
        total += (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total)
}

/// Analytic gradient of [`kl_diag_gaussian`] with respect to the *first*
/// (variational) argument. Returns `(d/dmu_q, d/drho_q)`; the `rho`
/// component chains through the softplus and is exactly zero wherever the
/// scale clamp is active.
pub fn kl_grad(q: &GaussianParamSet, p: &GaussianParamSet) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.len() != p.len() {
        return Err(BpfedError::LengthMismatch {
            expected: q.len(),
            got: p.len(),
        });
    }
    let mut dmu = vec![0.0; q.len()];
    let mut drho = vec![0.0; q.len()];
    for k in 0..q.len() {
        let sq = sigma_from_rho(q.rho[k]);
        let sp = sigma_from_rho(p.rho[k]);
        dmu[k] = (q.mu[k] - p.mu[k]) / (sp * sp);
        let dsigma = sq / (sp * sp) - 1.0 / sq;
        drho[k] = dsigma * dsigma_drho(q.rho[k]);
    }
    Ok((dmu, drho))
}

/// Analytic gradient of [`kl_diag_gaussian`] with respect to the *second*
/// (prior-slot) argument. Returns `(d/dmu_p, d/drho_p)`. This drives the
/// pre-aggregation shadow set, which chases the working posterior by
/// descending `KL(working || shadow)` in the shadow's own parameters, and
/// doubles as the optimality check for closed-form aggregated priors.
pub fn kl_grad_prior(q: &GaussianParamSet, p: &GaussianParamSet) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.len() != p.len() {
        return Err(BpfedError::LengthMismatch {
            expected: q.len(),
            got: p.len(),
        });
    }
    let mut dmu = vec![0.0; q.len()];
    let mut drho = vec![0.0; q.len()];
    for k in 0..q.len() {
        let sq = sigma_from_rho(q.rho[k]);
        let sp = sigma_from_rho(p.rho[k]);
        let dm = q.mu[k] - p.mu[k];
        dmu[k] = -dm / (sp * sp);
        let dsigma = 1.0 / sp - (sq * sq + dm * dm) / (sp * sp * sp);
        drho[k] = dsigma * dsigma_drho(p.rho[k]);
    }
    Ok((dmu, drho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softplus_reference_points() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        // Large positive input passes through unchanged.
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        // Far-negative rho clamps to the floor.
        assert_eq!(sigma_from_rho(-50.0), SIGMA_FLOOR);
    }

    #[test]
    fn inv_softplus_round_trips() {
        for s in [1e-8, 1e-4, 0.05, 0.1, 1.0, 7.5, 40.0, 800.0] {
            let rho = inv_softplus(s);
            assert!(
                (softplus(rho) - s).abs() <= 1e-12 * s.max(1.0),
                "round trip failed at s={s}"
            );
        }
    }

    #[test]
    fn constant_set_has_requested_scale() {
        let set = GaussianParamSet::constant(3, 0.0, 0.1).unwrap();
        for s in set.sigma() {
            assert!((s - 0.1).abs() < 1e-12);
        }
        assert!(GaussianParamSet::constant(3, 0.0, 0.0).is_err());
        assert!(GaussianParamSet::constant(3, f64::NAN, 0.1).is_err());
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(GaussianParamSet::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(GaussianParamSet::new(vec![f64::INFINITY], vec![0.0]).is_err());
    }

    #[test]
    fn sample_reference_points() {
        // mu=0, rho=0 => sigma = ln 2.
        let p = GaussianParamSet::new(vec![0.0], vec![0.0]).unwrap();
        let w = sample(&p, &NoiseDraw::new(vec![1.0])).unwrap();
        assert!((w[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Zero noise returns the mean exactly.
        let p = GaussianParamSet::new(vec![1.5, -2.0], vec![0.3, -1.0]).unwrap();
        let w = sample(&p, &NoiseDraw::new(vec![0.0, 0.0])).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);

        // Clamped scale leaves only floor-level jitter.
        let p = GaussianParamSet::new(vec![2.0], vec![-50.0]).unwrap();
        let w = sample(&p, &NoiseDraw::new(vec![0.3])).unwrap();
        assert!((w[0] - 2.000000003).abs() < 1e-12);
    }

    #[test]
    fn sample_length_mismatch() {
        let p = GaussianParamSet::new(vec![0.0], vec![0.0]).unwrap();
        assert!(sample(&p, &NoiseDraw::new(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn kl_reference_points() {
        let std_normal = GaussianParamSet::constant(1, 0.0, 1.0).unwrap();
        // KL(N(0,1) || N(0,1)) = 0.
        assert!(kl_diag_gaussian(&std_normal, &std_normal).unwrap().abs() < 1e-12);
        // KL(N(1,1) || N(0,1)) = 0.5.
        let q = GaussianParamSet::constant(1, 1.0, 1.0).unwrap();
        assert!((kl_diag_gaussian(&q, &std_normal).unwrap() - 0.5).abs() < 1e-9);
        // KL(N(0, var 4) || N(0,1)) = (4 - 1)/2 - ln 2.
        let q = GaussianParamSet::constant(1, 0.0, 2.0).unwrap();
        assert!((kl_diag_gaussian(&q, &std_normal).unwrap() - 0.8068528).abs() < 1e-7);
    }

    #[test]
    fn kl_mismatch_is_error() {
        let a = GaussianParamSet::constant(2, 0.0, 1.0).unwrap();
        let b = GaussianParamSet::constant(3, 0.0, 1.0).unwrap();
        assert!(kl_diag_gaussian(&a, &b).is_err());
        assert!(kl_grad(&a, &b).is_err());
        assert!(kl_grad_prior(&a, &b).is_err());
    }

    #[test]
    fn kl_grad_reference_points() {
        let q = GaussianParamSet::constant(1, 1.0, 1.0).unwrap();
        let p = GaussianParamSet::constant(1, 0.0, 1.0).unwrap();
        let (dmu, _) = kl_grad(&q, &p).unwrap();
        assert!((dmu[0] - 1.0).abs() < 1e-9);

        // At q == p the mean gradient vanishes.
        let (dmu, drho) = kl_grad(&p, &p).unwrap();
        assert!(dmu[0].abs() < 1e-12);
        // sigma-gradient also vanishes at q == p: sq/sp^2 - 1/sq = 0.
        assert!(drho[0].abs() < 1e-12);
    }

    #[test]
    fn kl_grad_finite_at_scale_floor() {
        let q = GaussianParamSet::new(vec![0.5], vec![-50.0]).unwrap();
        let p = GaussianParamSet::constant(1, 0.0, 1.0).unwrap();
        let (dmu, drho) = kl_grad(&q, &p).unwrap();
        assert!(dmu[0].is_finite());
        assert!(drho[0].is_finite());
        // The clamp freezes the scale: no gradient leaks through rho.
        assert_eq!(drho[0], 0.0);
    }

    #[test]
    fn concat_and_bit_pattern() {
        let a = GaussianParamSet::constant(2, 1.0, 0.5).unwrap();
        let b = GaussianParamSet::constant(1, -1.0, 0.25).unwrap();
        let c = a.concat(&b);
        assert_eq!(c.len(), 3);
        assert_eq!(c.mu, vec![1.0, 1.0, -1.0]);
        assert_eq!(c.bit_pattern(), a.concat(&b).bit_pattern());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu_q in proptest::collection::vec(-3.0f64..3.0, 1..6),
            rho_q in proptest::collection::vec(-3.0f64..2.0, 1..6),
            mu_p in proptest::collection::vec(-3.0f64..3.0, 1..6),
            rho_p in proptest::collection::vec(-3.0f64..2.0, 1..6),
        ) {
            let n = mu_q.len().min(rho_q.len()).min(mu_p.len()).min(rho_p.len());
            let q = GaussianParamSet::new(mu_q[..n].to_vec(), rho_q[..n].to_vec()).unwrap();
            let p = GaussianParamSet::new(mu_p[..n].to_vec(), rho_p[..n].to_vec()).unwrap();
            let kl = kl_diag_gaussian(&q, &p).unwrap();
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn sigma_strictly_positive(rho in -200.0f64..60.0) {
            prop_assert!(sigma_from_rho(rho) >= SIGMA_FLOOR);
        }

        #[test]
        fn sample_is_affine_in_noise(
            mu in -3.0f64..3.0,
            rho in -3.0f64..2.0,
            e1 in -3.0f64..3.0,
            e2 in -3.0f64..3.0,
            a in -2.0f64..2.0,
        ) {
            // w(a*e1 + (1-a)*e2) == a*w(e1) + (1-a)*w(e2): sampling is affine
            // in the noise, so convex noise combinations commute with it.
            let p = GaussianParamSet::new(vec![mu], vec![rho]).unwrap();
            let b = 1.0 - a;
            let mixed = sample(&p, &NoiseDraw::new(vec![a * e1 + b * e2])).unwrap()[0];
            let w1 = sample(&p, &NoiseDraw::new(vec![e1])).unwrap()[0];
            let w2 = sample(&p, &NoiseDraw::new(vec![e2])).unwrap()[0];
            prop_assert!((mixed - (a * w1 + b * w2)).abs() < 1e-10);
        }
    }
}
