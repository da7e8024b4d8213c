//! Bayesian multi-layer perceptron with a shared/personalized factor split.
//!
//! Every scalar weight carries a mean-field Gaussian `(mu, rho)` pair from
//! [`crate::gaussian`]. Layers are tagged either *shared* (aggregated across
//! clients) or *personalized* (kept local), and the concatenation of all
//! layer parameters in layer order — weights before biases, weight rows
//! major in the output neuron — forms the model's canonical parameter
//! vector. The canonical order is the contract between sampling, the
//! forward pass, and the reverse-mode gradients below.
//!
//! The training objective for a batch of `b` samples from a client with `n`
//! training points is
//!
//! ```text
//! Q = (n / b) * (1/M) * sum_m sum_j -log softmax(f(x_j; w_m))[y_j]
//!     + KL(q(personalized, shared) || prior)
//! ```
//!
//! with `w_m = mu + sigma * eps_m` (reparameterized Monte Carlo draws), and
//! the companion objective `Qbar` is the KL term alone. Gradients are exact
//! pathwise derivatives: the data term backpropagates through the network
//! into `d/dmu` directly and into `d/drho` through `eps * softplus'(rho)`;
//! the KL term uses the closed-form Gaussian gradients.

use crate::error::{BpfedError, Result};
use crate::gaussian::{self, dsigma_drho, sigma_from_rho, GaussianParamSet, NoiseDraw};
use crate::mat::Mat;
use crate::rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Initialization scale for variational means.
pub const INIT_MU_STD: f64 = 0.1;
/// Initialization value for variational standard deviations.
pub const INIT_SIGMA: f64 = 0.05;

/// Which factor a layer's parameters belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorTag {
    Shared,
    Personalized,
}

/// One dense layer's place in the canonical parameter vector.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub tag: FactorTag,
    /// Start of this layer's block in the canonical (full) vector.
    pub canonical_offset: usize,
    /// Start of this layer's block within its own factor's vector.
    pub factor_offset: usize,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Assignment of network layers to the shared and personalized factors.
#[derive(Debug, Clone)]
pub struct FactorLayout {
    sizes: Vec<usize>,
    layers: Vec<LayerSpec>,
    t_personalized: usize,
    t_shared: usize,
}

impl FactorLayout {
    /// Build a layout from layer sizes (input, hidden..., output) and one
    /// tag per layer. At least one layer must be shared — otherwise there
    /// is nothing for a server to aggregate.
    pub fn new(sizes: &[usize], tags: &[FactorTag]) -> Result<FactorLayout> {
        if sizes.len() < 2 {
            return Err(BpfedError::InvalidArgument(
                "layout needs at least input and output sizes".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(BpfedError::InvalidArgument(
                "layer sizes must be nonzero".into(),
            ));
        }
        if tags.len() != sizes.len() - 1 {
            return Err(BpfedError::LengthMismatch {
                expected: sizes.len() - 1,
                got: tags.len(),
            });
        }
        if !tags.contains(&FactorTag::Shared) {
            return Err(BpfedError::InvalidArgument(
                "at least one layer must be shared".into(),
            ));
        }
        let mut layers = Vec::with_capacity(tags.len());
        let mut canonical = 0;
        let mut t1 = 0;
        let mut t2 = 0;
        for (l, &tag) in tags.iter().enumerate() {
            let input = sizes[l];
            let output = sizes[l + 1];
            let count = input * output + output;
            let factor_offset = match tag {
                FactorTag::Personalized => {
                    let o = t1;
                    t1 += count;
                    o
                }
                FactorTag::Shared => {
                    let o = t2;
                    t2 += count;
                    o
                }
            };
            layers.push(LayerSpec {
                input,
                output,
                tag,
                canonical_offset: canonical,
                factor_offset,
            });
            canonical += count;
        }
        Ok(FactorLayout {
            sizes: sizes.to_vec(),
            layers,
            t_personalized: t1,
            t_shared: t2,
        })
    }

    /// Default split: final layer personalized, everything else shared.
    pub fn last_layer_personalized(sizes: &[usize]) -> Result<FactorLayout> {
        if sizes.len() < 3 {
            return Err(BpfedError::InvalidArgument(
                "personalized-head layout needs at least one hidden layer".into(),
            ));
        }
        let mut tags = vec![FactorTag::Shared; sizes.len() - 1];
        *tags.last_mut().unwrap() = FactorTag::Personalized;
        FactorLayout::new(sizes, &tags)
    }

    /// Every layer shared (plain federated averaging).
    pub fn all_shared(sizes: &[usize]) -> Result<FactorLayout> {
        let tags = vec![FactorTag::Shared; sizes.len() - 1];
        FactorLayout::new(sizes, &tags)
    }

    /// Inverted split: body personalized, final layer shared.
    pub fn body_personalized(sizes: &[usize]) -> Result<FactorLayout> {
        if sizes.len() < 3 {
            return Err(BpfedError::InvalidArgument(
                "personalized-body layout needs at least one hidden layer".into(),
            ));
        }
        let mut tags = vec![FactorTag::Personalized; sizes.len() - 1];
        *tags.last_mut().unwrap() = FactorTag::Shared;
        FactorLayout::new(sizes, &tags)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Number of hidden layers.
    pub fn hidden_layer_count(&self) -> usize {
        self.sizes.len() - 2
    }

    /// Widest hidden layer, or the output width when there is none.
    pub fn width(&self) -> usize {
        self.sizes[1..self.sizes.len() - 1]
            .iter()
            .copied()
            .max()
            .unwrap_or(self.output_dim())
    }

    /// Personalized parameter count (t1).
    pub fn t_personalized(&self) -> usize {
        self.t_personalized
    }

    /// Shared parameter count (t2).
    pub fn t_shared(&self) -> usize {
        self.t_shared
    }

    pub fn total_params(&self) -> usize {
        self.t_personalized + self.t_shared
    }

    pub fn has_personalized(&self) -> bool {
        self.t_personalized > 0
    }

    /// Scatter per-factor buffers into one canonical vector.
    pub fn assemble(&self, personalized: &[f64], shared: &[f64]) -> Result<Vec<f64>> {
        if personalized.len() != self.t_personalized {
            return Err(BpfedError::LengthMismatch {
                expected: self.t_personalized,
                got: personalized.len(),
            });
        }
        if shared.len() != self.t_shared {
            return Err(BpfedError::LengthMismatch {
                expected: self.t_shared,
                got: shared.len(),
            });
        }
        let mut full = vec![0.0; self.total_params()];
        for layer in &self.layers {
            let count = layer.param_count();
            let src = match layer.tag {
                FactorTag::Personalized => {
                    &personalized[layer.factor_offset..layer.factor_offset + count]
                }
                FactorTag::Shared => &shared[layer.factor_offset..layer.factor_offset + count],
            };
            full[layer.canonical_offset..layer.canonical_offset + count].copy_from_slice(src);
        }
        Ok(full)
    }

    /// Gather a canonical vector back into `(personalized, shared)` buffers.
    pub fn split(&self, full: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if full.len() != self.total_params() {
            return Err(BpfedError::LengthMismatch {
                expected: self.total_params(),
                got: full.len(),
            });
        }
        let mut personalized = vec![0.0; self.t_personalized];
        let mut shared = vec![0.0; self.t_shared];
        for layer in &self.layers {
            let count = layer.param_count();
            let src = &full[layer.canonical_offset..layer.canonical_offset + count];
            match layer.tag {
                FactorTag::Personalized => personalized
                    [layer.factor_offset..layer.factor_offset + count]
                    .copy_from_slice(src),
                FactorTag::Shared => {
                    shared[layer.factor_offset..layer.factor_offset + count].copy_from_slice(src)
                }
            }
        }
        Ok((personalized, shared))
    }
}

/// A (personalized, shared) pair of Gaussian parameter sets. Snapshotted
/// pairs serve as the frozen prior of a round; live pairs are the working
/// and shadow posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub personalized: GaussianParamSet,
    pub shared: GaussianParamSet,
}

/// The per-round frozen prior: the client's previous personalized posterior
/// and the current aggregated shared posterior.
pub type PriorSnapshot = FactorPair;

impl FactorPair {
    pub fn new(personalized: GaussianParamSet, shared: GaussianParamSet) -> FactorPair {
        FactorPair {
            personalized,
            shared,
        }
    }

    /// Concatenation in (personalized, shared) order.
    pub fn concat(&self) -> GaussianParamSet {
        self.personalized.concat(&self.shared)
    }

    /// Check factor lengths against a layout.
    pub fn matches(&self, layout: &FactorLayout) -> bool {
        self.personalized.len() == layout.t_personalized() && self.shared.len() == layout.t_shared()
    }
}

/// Bayesian MLP: a factor layout plus live variational parameters.
#[derive(Debug, Clone)]
pub struct BayesMLP {
    pub layout: FactorLayout,
    pub personalized: GaussianParamSet,
    pub shared: GaussianParamSet,
}

impl BayesMLP {
    /// Initialize a model: means drawn from N(0, 0.1^2), scales set to
    /// 0.05. The same seed always yields the bitwise-identical model;
    /// shared means are drawn before personalized means.
    pub fn build(layout: &FactorLayout, init_seed: u64) -> BayesMLP {
        let mut stream = rng::stream(init_seed, "model-init", 0, 0);
        let shared = init_param_set(layout.t_shared(), &mut stream);
        let personalized = init_param_set(layout.t_personalized(), &mut stream);
        BayesMLP {
            layout: layout.clone(),
            personalized,
            shared,
        }
    }

    /// Assemble a model from existing factor sets.
    pub fn from_parts(
        layout: &FactorLayout,
        personalized: GaussianParamSet,
        shared: GaussianParamSet,
    ) -> Result<BayesMLP> {
        if personalized.len() != layout.t_personalized() {
            return Err(BpfedError::LengthMismatch {
                expected: layout.t_personalized(),
                got: personalized.len(),
            });
        }
        if shared.len() != layout.t_shared() {
            return Err(BpfedError::LengthMismatch {
                expected: layout.t_shared(),
                got: shared.len(),
            });
        }
        Ok(BayesMLP {
            layout: layout.clone(),
            personalized,
            shared,
        })
    }

    /// The live parameters as a pair.
    pub fn params(&self) -> FactorPair {
        FactorPair::new(self.personalized.clone(), self.shared.clone())
    }

    /// Canonical-order means and rhos.
    pub fn canonical_mu_rho(&self) -> (Vec<f64>, Vec<f64>) {
        let mu = self
            .layout
            .assemble(&self.personalized.mu, &self.shared.mu)
            .expect("factor sets match layout");
        let rho = self
            .layout
            .assemble(&self.personalized.rho, &self.shared.rho)
            .expect("factor sets match layout");
        (mu, rho)
    }

    /// Draw canonical-length standard-normal noise.
    pub fn draw_noise(&self, rng: &mut ChaCha8Rng) -> NoiseDraw {
        let n = self.layout.total_params();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        NoiseDraw::new(eps)
    }

    /// Reparameterized canonical weight draw `mu + sigma * eps`.
    pub fn sample_canonical(&self, noise: &NoiseDraw) -> Result<Vec<f64>> {
        let (mu, rho) = self.canonical_mu_rho();
        if noise.len() != mu.len() {
            return Err(BpfedError::LengthMismatch {
                expected: mu.len(),
                got: noise.len(),
            });
        }
        Ok(mu
            .iter()
            .zip(rho.iter())
            .zip(noise.eps.iter())
            .map(|((&m, &r), &e)| m + sigma_from_rho(r) * e)
            .collect())
    }

    /// Deterministic forward pass on explicit canonical weights. Hidden
    /// layers use ReLU; the final layer emits raw logits.
    pub fn forward(&self, weights: &[f64], x: &Mat) -> Result<Mat> {
        forward_canonical(&self.layout, weights, x)
    }

    /// Monte Carlo negative log-likelihood per sample:
    /// `(1/(M b)) * sum_m sum_j -log softmax(f(x_j; w_m))[y_j]`.
    pub fn mc_nll(&self, x: &Mat, y: &[usize], m: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let draws = self.draw_many(m, rng)?;
        self.mc_nll_with_draws(x, y, &draws)
    }

    /// [`Self::mc_nll`] with caller-supplied noise, for oracle comparisons.
    pub fn mc_nll_with_draws(&self, x: &Mat, y: &[usize], draws: &[NoiseDraw]) -> Result<f64> {
        check_batch(&self.layout, x, y)?;
        if draws.is_empty() {
            return Err(BpfedError::InvalidArgument(
                "at least one Monte Carlo draw is required".into(),
            ));
        }
        let mut total = 0.0;
        for noise in draws {
            let w = self.sample_canonical(noise)?;
            let logits = self.forward(&w, x)?;
            total += ce_sum(&logits, y);
        }
        Ok(total / (draws.len() as f64 * x.rows() as f64))
    }

    /// Training objective: scaled Monte Carlo data term plus KL to the
    /// frozen prior. `n` is the client's training-set size and must be at
    /// least the batch size.
    pub fn objective_q(
        &self,
        prior: &PriorSnapshot,
        x: &Mat,
        y: &[usize],
        n: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let draws = self.draw_many(m, rng)?;
        self.objective_q_with_draws(prior, x, y, n, &draws, 1.0)
    }

    /// [`Self::objective_q`] with caller-supplied noise and an explicit KL
    /// weight (1 = the plain objective, 0 = data term only).
    pub fn objective_q_with_draws(
        &self,
        prior: &PriorSnapshot,
        x: &Mat,
        y: &[usize],
        n: usize,
        draws: &[NoiseDraw],
        kl_weight: f64,
    ) -> Result<f64> {
        check_batch(&self.layout, x, y)?;
        check_scale(n, x.rows())?;
        if draws.is_empty() {
            return Err(BpfedError::InvalidArgument(
                "at least one Monte Carlo draw is required".into(),
            ));
        }
        let mut data_term = 0.0;
        for noise in draws {
            let w = self.sample_canonical(noise)?;
            let logits = self.forward(&w, x)?;
            data_term += ce_sum(&logits, y);
        }
        data_term *= n as f64 / x.rows() as f64 / draws.len() as f64;
        let kl = objective_qbar(self, prior)?;
        Ok(data_term + kl_weight * kl)
    }

    /// Pathwise gradient of the objective with respect to all variational
    /// parameters, using fresh noise from `rng`.
    pub fn grad_objective(
        &self,
        prior: &PriorSnapshot,
        x: &Mat,
        y: &[usize],
        n: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelGrad> {
        let draws = self.draw_many(m, rng)?;
        self.grad_objective_with_draws(prior, x, y, n, &draws, 1.0)
    }

    /// [`Self::grad_objective`] with caller-supplied noise and KL weight.
    /// The returned gradient matches central finite differences of
    /// [`Self::objective_q_with_draws`] evaluated on the same draws.
    pub fn grad_objective_with_draws(
        &self,
        prior: &PriorSnapshot,
        x: &Mat,
        y: &[usize],
        n: usize,
        draws: &[NoiseDraw],
        kl_weight: f64,
    ) -> Result<ModelGrad> {
        check_batch(&self.layout, x, y)?;
        check_scale(n, x.rows())?;
        if draws.is_empty() {
            return Err(BpfedError::InvalidArgument(
                "at least one Monte Carlo draw is required".into(),
            ));
        }
        let total = self.layout.total_params();
        let (mu, rho) = self.canonical_mu_rho();
        let mut dmu = vec![0.0; total];
        let mut drho = vec![0.0; total];
        let scale = n as f64 / x.rows() as f64 / draws.len() as f64;
        let mut value = 0.0;
        for noise in draws {
            if noise.len() != total {
                return Err(BpfedError::LengthMismatch {
                    expected: total,
                    got: noise.len(),
                });
            }
            let w: Vec<f64> = mu
                .iter()
                .zip(rho.iter())
                .zip(noise.eps.iter())
                .map(|((&m_k, &r_k), &e_k)| m_k + sigma_from_rho(r_k) * e_k)
                .collect();
            let (ce, gw) = nll_grad_canonical(&self.layout, &w, x, y)?;
            value += ce;
            for k in 0..total {
                dmu[k] += scale * gw[k];
                drho[k] += scale * gw[k] * noise.eps[k] * dsigma_drho(rho[k]);
            }
        }
        value *= scale;

        let (mut dmu_p, mut dmu_s) = self.layout.split(&dmu)?;
        let (mut drho_p, mut drho_s) = self.layout.split(&drho)?;

        if kl_weight != 0.0 {
            value += kl_weight * objective_qbar(self, prior)?;
            let (kp_mu, kp_rho) = gaussian::kl_grad(&self.personalized, &prior.personalized)?;
            let (ks_mu, ks_rho) = gaussian::kl_grad(&self.shared, &prior.shared)?;
            for k in 0..dmu_p.len() {
                dmu_p[k] += kl_weight * kp_mu[k];
                drho_p[k] += kl_weight * kp_rho[k];
            }
            for k in 0..dmu_s.len() {
                dmu_s[k] += kl_weight * ks_mu[k];
                drho_s[k] += kl_weight * ks_rho[k];
            }
        }

        Ok(ModelGrad {
            value,
            personalized_mu: dmu_p,
            personalized_rho: drho_p,
            shared_mu: dmu_s,
            shared_rho: drho_s,
        })
    }

    /// Bayesian model average over `m_test` weight draws: mean softmax
    /// probabilities, one row per input.
    pub fn predict(&self, x: &Mat, m_test: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
        if m_test == 0 {
            return Err(BpfedError::InvalidArgument(
                "predict needs at least one draw".into(),
            ));
        }
        if x.cols() != self.layout.input_dim() {
            return Err(BpfedError::LengthMismatch {
                expected: self.layout.input_dim(),
                got: x.cols(),
            });
        }
        let classes = self.layout.output_dim();
        let mut probs = Mat::zeros(x.rows(), classes);
        for _ in 0..m_test {
            let noise = self.draw_noise(rng);
            let w = self.sample_canonical(&noise)?;
            let logits = self.forward(&w, x)?;
            for r in 0..x.rows() {
                let p = softmax_row(logits.row(r));
                let out = probs.row_mut(r);
                for c in 0..classes {
                    out[c] += p[c];
                }
            }
        }
        let inv = 1.0 / m_test as f64;
        for r in 0..probs.rows() {
            for v in probs.row_mut(r) {
                *v *= inv;
            }
        }
        Ok(probs)
    }

    fn draw_many(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<NoiseDraw>> {
        if m == 0 {
            return Err(BpfedError::InvalidArgument(
                "at least one Monte Carlo draw is required".into(),
            ));
        }
        Ok((0..m).map(|_| self.draw_noise(rng)).collect())
    }
}

/// Gradient of the training objective with respect to both factor sets.
#[derive(Debug, Clone)]
pub struct ModelGrad {
    /// Objective value at the evaluation point.
    pub value: f64,
    pub personalized_mu: Vec<f64>,
    pub personalized_rho: Vec<f64>,
    pub shared_mu: Vec<f64>,
    pub shared_rho: Vec<f64>,
}

impl ModelGrad {
    /// Largest absolute gradient entry, for divergence guards.
    pub fn max_abs(&self) -> f64 {
        self.personalized_mu
            .iter()
            .chain(self.personalized_rho.iter())
            .chain(self.shared_mu.iter())
            .chain(self.shared_rho.iter())
            .fold(0.0, |acc, &g| acc.max(g.abs()))
    }

    /// True if any entry is NaN or infinite.
    pub fn any_non_finite(&self) -> bool {
        self.personalized_mu
            .iter()
            .chain(self.personalized_rho.iter())
            .chain(self.shared_mu.iter())
            .chain(self.shared_rho.iter())
            .any(|g| !g.is_finite())
    }
}

/// KL-only companion objective: divergence of the model's live parameters
/// from the frozen prior, concatenated in (personalized, shared) order.
pub fn objective_qbar(model: &BayesMLP, prior: &PriorSnapshot) -> Result<f64> {
    gaussian::kl_diag_gaussian(&model.params().concat(), &prior.concat())
}

/// Deterministic forward pass through a layout on explicit weights.
pub fn forward_canonical(layout: &FactorLayout, weights: &[f64], x: &Mat) -> Result<Mat> {
    if weights.len() != layout.total_params() {
        return Err(BpfedError::LengthMismatch {
            expected: layout.total_params(),
            got: weights.len(),
        });
    }
    if x.cols() != layout.input_dim() {
        return Err(BpfedError::LengthMismatch {
            expected: layout.input_dim(),
            got: x.cols(),
        });
    }
    let acts = forward_cached(layout, weights, x);
    Ok(acts.into_iter().next_back().unwrap())
}

/// Forward pass keeping every layer's post-activation output;
/// `acts[0]` is the input batch and `acts.last()` the raw logits.
fn forward_cached(layout: &FactorLayout, weights: &[f64], x: &Mat) -> Vec<Mat> {
    let mut acts = Vec::with_capacity(layout.layers().len() + 1);
    acts.push(x.clone());
    let last = layout.layers().len() - 1;
    for (l, layer) in layout.layers().iter().enumerate() {
        let (input, output) = (layer.input, layer.output);
        let w = &weights[layer.canonical_offset..layer.canonical_offset + input * output];
        let b = &weights
            [layer.canonical_offset + input * output..layer.canonical_offset + layer.param_count()];
        let prev = acts.last().unwrap();
        let mut z = Mat::zeros(prev.rows(), output);
        for r in 0..prev.rows() {
            let ar = prev.row(r);
            let zr = z.row_mut(r);
            for (j, zj) in zr.iter_mut().enumerate() {
                let wrow = &w[j * input..(j + 1) * input];
                let mut s = b[j];
                for i in 0..input {
                    s += wrow[i] * ar[i];
                }
                *zj = s;
            }
            if l != last {
                for v in z.row_mut(r) {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        acts.push(z);
    }
    acts
}

/// Batch-summed cross-entropy and its canonical weight gradient at a fixed
/// weight vector. This is the reverse-mode core used by both the
/// variational path (through reparameterized draws) and the point-mass
/// baselines.
pub fn nll_grad_canonical(
    layout: &FactorLayout,
    weights: &[f64],
    x: &Mat,
    y: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_batch(layout, x, y)?;
    if weights.len() != layout.total_params() {
        return Err(BpfedError::LengthMismatch {
            expected: layout.total_params(),
            got: weights.len(),
        });
    }
    let acts = forward_cached(layout, weights, x);
    let logits = acts.last().unwrap();
    let classes = layout.output_dim();

    // d(sum_j CE_j)/dlogits = softmax - onehot, row-wise.
    let mut ce = 0.0;
    let mut dcur = Mat::zeros(x.rows(), classes);
    for r in 0..x.rows() {
        let row = logits.row(r);
        let p = softmax_row(row);
        ce += lse_row(row) - row[y[r]];
        let d = dcur.row_mut(r);
        d.copy_from_slice(&p);
        d[y[r]] -= 1.0;
    }

    let mut grad = vec![0.0; layout.total_params()];
    for (l, layer) in layout.layers().iter().enumerate().rev() {
        let (input, output) = (layer.input, layer.output);
        let w = &weights[layer.canonical_offset..layer.canonical_offset + input * output];
        let prev = &acts[l];
        {
            let (gw, gb) = grad
                [layer.canonical_offset..layer.canonical_offset + layer.param_count()]
                .split_at_mut(input * output);
            for r in 0..prev.rows() {
                let ar = prev.row(r);
                let dr = dcur.row(r);
                for j in 0..output {
                    let g = dr[j];
                    if g != 0.0 {
                        let grow = &mut gw[j * input..(j + 1) * input];
                        for i in 0..input {
                            grow[i] += g * ar[i];
                        }
                        gb[j] += g;
                    }
                }
            }
        }
        if l > 0 {
            let mut dprev = Mat::zeros(prev.rows(), input);
            for r in 0..prev.rows() {
                let dr = dcur.row(r);
                let out = dprev.row_mut(r);
                for j in 0..output {
                    let g = dr[j];
                    if g != 0.0 {
                        let wrow = &w[j * input..(j + 1) * input];
                        for i in 0..input {
                            out[i] += g * wrow[i];
                        }
                    }
                }
                // ReLU subgradient: zero wherever the activation was zero.
                let ar = prev.row(r);
                for i in 0..input {
                    if ar[i] <= 0.0 {
                        out[i] = 0.0;
                    }
                }
            }
            dcur = dprev;
        }
    }
    Ok((ce, grad))
}

/// Softmax of one logit row, max-shifted for stability.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Batch-summed cross-entropy of a logit matrix against integer labels.
fn ce_sum(logits: &Mat, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        total += lse_row(row) - row[y[r]];
    }
    total
}

/// Log-sum-exp of one logit row.
fn lse_row(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
}

/// Fresh variational parameters: means drawn from `N(0, INIT_MU_STD^2)`,
/// scales set to [`INIT_SIGMA`].
pub fn init_param_set(len: usize, rng: &mut ChaCha8Rng) -> GaussianParamSet {
    let rho0 = gaussian::inv_softplus(INIT_SIGMA);
    let mu: Vec<f64> = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            INIT_MU_STD * z
        })
        .collect();
    GaussianParamSet {
        mu,
        rho: vec![rho0; len],
    }
}

fn check_batch(layout: &FactorLayout, x: &Mat, y: &[usize]) -> Result<()> {
    if x.rows() == 0 {
        return Err(BpfedError::EmptyData("batch has no rows".into()));
    }
    if x.cols() != layout.input_dim() {
        return Err(BpfedError::LengthMismatch {
            expected: layout.input_dim(),
            got: x.cols(),
        });
    }
    if y.len() != x.rows() {
        return Err(BpfedError::LengthMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= layout.output_dim()) {
        return Err(BpfedError::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            layout.output_dim()
        )));
    }
    Ok(())
}

fn check_scale(n: usize, b: usize) -> Result<()> {
    if n < b {
        return Err(BpfedError::InvalidArgument(format!(
            "training-set size n={n} smaller than batch size b={b}"
        )));
    }
    Ok(())
}
