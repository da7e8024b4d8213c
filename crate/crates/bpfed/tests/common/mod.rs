//! Shared oracle machinery for the integration suites: numerical
//! quadrature, finite-difference gradients, and small fixture builders.
//! Everything here is deliberately independent of the library's own
//! closed-form code paths so the comparisons mean something.

use bpfed::gaussian::GaussianParamSet;
use bpfed::mlp::{BayesMLP, PriorSnapshot};
use bpfed::Mat;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Composite Simpson's rule over `[a, b]` with `panels` panels (any
/// positive count is rounded up to even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = if panels.is_multiple_of(2) {
        panels
    } else {
        panels + 1
    };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// KL(q ‖ p) between two univariate Gaussians by direct quadrature of
/// `q(x) ln(q(x)/p(x))`, no closed form involved. The integrand carries
/// all its mass where `q` does, so `±14σ_q` around `μ_q` captures it to
/// far below the comparison tolerance; the panel count is sized for the
/// worst case of a wide `q` against a narrow, far-away `p`.
pub fn kl_univariate_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let ln_norm_q = -(sq * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let ln_norm_p = -(sp * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let integrand = |x: f64| {
        let zq = (x - mq) / sq;
        let zp = (x - mp) / sp;
        let ln_q = ln_norm_q - 0.5 * zq * zq;
        let ln_p = ln_norm_p - 0.5 * zp * zp;
        ln_q.exp() * (ln_q - ln_p)
    };
    simpson(integrand, mq - 14.0 * sq, mq + 14.0 * sq, 100_000)
}

/// Relative error with the denominator floored at 1, so tiny gradients
/// are judged on an absolute scale instead of blowing up on roundoff.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// A random diagonal-Gaussian parameter set with means in `[-3, 3]` and
/// standard deviations in `[0.05, 2.5]`.
pub fn random_param_set(dim: usize, rng: &mut ChaCha8Rng) -> GaussianParamSet {
    let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let rho: Vec<f64> = (0..dim)
        .map(|_| bpfed::gaussian::inv_softplus(rng.random_range(0.05..2.5)))
        .collect();
    GaussianParamSet::new(mu, rho).expect("random parameters are finite")
}

/// A random classification batch: standard-normal features, uniform
/// labels.
pub fn random_batch(
    rows: usize,
    dim: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> (Mat, Vec<usize>) {
    let feats: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let x = Mat::from_rows(&feats).expect("rows are rectangular");
    let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

/// Central finite difference of the frozen-noise training objective with
/// respect to every variational parameter, in the gradient's own
/// `[p_mu | p_rho | s_mu | s_rho]` layout.
#[allow(clippy::too_many_arguments)]
pub fn fd_objective_gradient(
    model: &BayesMLP,
    prior: &PriorSnapshot,
    x: &Mat,
    y: &[usize],
    n: usize,
    draws: &[bpfed::gaussian::NoiseDraw],
    kl_weight: f64,
    h: f64,
) -> Vec<f64> {
    let pair = model.params();
    let t1 = pair.personalized.len();
    let t2 = pair.shared.len();
    let bump = |slot: usize, delta: f64| -> bpfed::mlp::FactorPair {
        let mut p = pair.clone();
        if slot < t1 {
            p.personalized.mu[slot] += delta;
        } else if slot < 2 * t1 {
            p.personalized.rho[slot - t1] += delta;
        } else if slot < 2 * t1 + t2 {
            p.shared.mu[slot - 2 * t1] += delta;
        } else {
            p.shared.rho[slot - 2 * t1 - t2] += delta;
        }
        p
    };
    let eval = |pair: bpfed::mlp::FactorPair| -> f64 {
        let m = BayesMLP::from_parts(&model.layout, pair.personalized, pair.shared)
            .expect("perturbed parameters keep the layout");
        m.objective_q_with_draws(prior, x, y, n, draws, kl_weight)
            .expect("objective is defined at the perturbed point")
    };
    (0..2 * (t1 + t2))
        .map(|slot| (eval(bump(slot, h)) - eval(bump(slot, -h))) / (2.0 * h))
        .collect()
}
