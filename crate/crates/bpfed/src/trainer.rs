//! Per-client local optimization.
//!
//! One client-round runs `local_epochs` passes over the client's training
//! shard in shuffled mini-batches. Two training paths share the loop:
//!
//! - **Variational** (`bpfed` mode): every mini-batch takes one Adam step on
//!   the working posterior (data term + KL to the round's frozen prior) and
//!   one Adam step on a *shadow* posterior. The shadow starts where the
//!   working set starts the round (the frozen prior, from round 1 on) and
//!   never sees data: it descends `KL(working || shadow)` in its own
//!   parameters, trailing the working set in divergence. Its shared factor
//!   is what the client uploads, so the server only ever sees a
//!   KL-smoothed view of the locally fitted shared factor. Both gradients
//!   of a step are evaluated before either set moves, so the very first
//!   shadow step (working == shadow == prior) is exactly a no-op.
//! - **Point-mass** (`fedavg` / `fedper` / `fedrep` / `lgfedavg` modes):
//!   deterministic training of plain weights — no sampling, no KL — with
//!   the same batch schedule, mini-batch scaling, and Adam settings. With
//!   scales clamped to the floor, one Monte Carlo draw, and zero KL weight,
//!   the variational path reproduces these trajectories to floating-point
//!   noise, which is the equivalence the baselines rely on.
//!
//! Mini-batch order comes from a stream keyed by `(seed, client, round)`
//! that is separate from the noise stream, so variational and point-mass
//! runs of the same seed see identical batch sequences.

use crate::data::ClientShard;
use crate::error::{BpfedError, Result};
use crate::gaussian::{self, GaussianParamSet};
use crate::mat::Mat;
use crate::mlp::{
    nll_grad_canonical, BayesMLP, FactorLayout, FactorPair, ModelGrad, PriorSnapshot,
};
use crate::rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Training mode: the full variational method or one of its point-mass
/// (Dirac-limit) baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Variational training of both factors; shadow-set upload.
    Bpfed,
    /// Every layer shared, deterministic training (federated averaging).
    FedAvg,
    /// Personalized head, shared body, simultaneous deterministic updates.
    FedPer,
    /// Like `FedPer` but alternating: head-only epochs, then body-only.
    FedRep,
    /// Inverted split: personalized body, shared head.
    LgFedAvg,
}

impl Mode {
    /// True for the variational path; false for all point-mass baselines.
    pub fn is_variational(self) -> bool {
        matches!(self, Mode::Bpfed)
    }

    /// The factor layout this mode imposes on a stack of layer sizes.
    pub fn layout(self, sizes: &[usize]) -> Result<FactorLayout> {
        match self {
            Mode::Bpfed | Mode::FedPer | Mode::FedRep => {
                FactorLayout::last_layer_personalized(sizes)
            }
            Mode::FedAvg => FactorLayout::all_shared(sizes),
            Mode::LgFedAvg => FactorLayout::body_personalized(sizes),
        }
    }

    pub fn all() -> [Mode; 5] {
        [
            Mode::Bpfed,
            Mode::FedAvg,
            Mode::FedPer,
            Mode::FedRep,
            Mode::LgFedAvg,
        ]
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Bpfed => "bpfed",
            Mode::FedAvg => "fedavg",
            Mode::FedPer => "fedper",
            Mode::FedRep => "fedrep",
            Mode::LgFedAvg => "lgfedavg",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = BpfedError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "bpfed" => Ok(Mode::Bpfed),
            "fedavg" => Ok(Mode::FedAvg),
            "fedper" => Ok(Mode::FedPer),
            "fedrep" => Ok(Mode::FedRep),
            "lgfedavg" => Ok(Mode::LgFedAvg),
            other => Err(BpfedError::Config(format!(
                "unknown mode '{other}' (expected bpfed, fedavg, fedper, fedrep, or lgfedavg)"
            ))),
        }
    }
}

/// Hyperparameters of one client-round.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Local epochs per round (R). `fedrep` runs R head epochs followed by
    /// R body epochs.
    pub local_epochs: usize,
    /// Mini-batch size (b).
    pub batch: usize,
    /// Monte Carlo draws per objective evaluation (M).
    pub mc_samples: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Weight on the KL term of the working objective; 1 is the plain
    /// objective, 0 drops regularization (used by the point-mass limit).
    pub kl_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Divergence guard: any gradient entry beyond this aborts the round.
    pub grad_guard: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            mode: Mode::Bpfed,
            local_epochs: 10,
            batch: 50,
            mc_samples: 1,
            lr: 1e-3,
            kl_weight: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_guard: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(BpfedError::Config("batch size must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(BpfedError::Config(
                "at least one Monte Carlo sample is required".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(BpfedError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(BpfedError::Config(format!(
                "kl weight must be finite and nonnegative, got {}",
                self.kl_weight
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(BpfedError::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.grad_guard.is_finite() && self.grad_guard > 0.0) {
            return Err(BpfedError::Config("gradient guard must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update in place:
    /// `p -= lr * mhat / (sqrt(vhat) + eps)` with bias-corrected moments.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(BpfedError::LengthMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Persistent per-client record held by the server: identity, the stored
/// personalized posterior, and the local data shard.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    /// Personalized posterior from the client's last participating round
    /// (initialization draw if it never participated).
    pub eta: GaussianParamSet,
    pub shard: ClientShard,
}

/// What a client sends back: its id and the shared factor of the shadow
/// set. Personalized parameters never leave the client.
#[derive(Debug, Clone)]
pub struct UploadPacket {
    pub client_id: usize,
    pub zeta_bar: GaussianParamSet,
}

/// Flatten both factor sets into `[p_mu | p_rho | s_mu | s_rho]` for the
/// optimizer, and back.
fn pack_pair(pair: &FactorPair) -> Vec<f64> {
    let mut flat = Vec::with_capacity(2 * (pair.personalized.len() + pair.shared.len()));
    flat.extend_from_slice(&pair.personalized.mu);
    flat.extend_from_slice(&pair.personalized.rho);
    flat.extend_from_slice(&pair.shared.mu);
    flat.extend_from_slice(&pair.shared.rho);
    flat
}

fn unpack_pair(flat: &[f64], t1: usize, t2: usize) -> FactorPair {
    let (p_mu, rest) = flat.split_at(t1);
    let (p_rho, rest) = rest.split_at(t1);
    let (s_mu, s_rho) = rest.split_at(t2);
    FactorPair::new(
        GaussianParamSet {
            mu: p_mu.to_vec(),
            rho: p_rho.to_vec(),
        },
        GaussianParamSet {
            mu: s_mu.to_vec(),
            rho: s_rho.to_vec(),
        },
    )
}

/// Mini-batch stepper for the variational path. Holds the working model,
/// the shadow set, the frozen prior, and one Adam state for each.
pub struct BayesStepper<'a> {
    model: BayesMLP,
    shadow: FactorPair,
    prior: PriorSnapshot,
    cfg: &'a TrainConfig,
    adam_main: AdamState,
    adam_shadow: AdamState,
    noise: ChaCha8Rng,
    client_id: usize,
    round: usize,
    steps: u64,
}

impl<'a> BayesStepper<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &FactorLayout,
        eta: GaussianParamSet,
        zeta: GaussianParamSet,
        prior: PriorSnapshot,
        cfg: &'a TrainConfig,
        noise: ChaCha8Rng,
        client_id: usize,
        round: usize,
    ) -> Result<BayesStepper<'a>> {
        cfg.validate()?;
        let model = BayesMLP::from_parts(layout, eta, zeta)?;
        if !prior.matches(layout) {
            return Err(BpfedError::InvalidArgument(
                "prior does not match the factor layout".into(),
            ));
        }
        // The shadow set starts the round at the working set's own start
        // (which from round 1 on is exactly the prior), so its first KL
        // gradient is zero wherever the prior sits.
        let shadow = model.params();
        let len = 2 * layout.total_params();
        Ok(BayesStepper {
            model,
            shadow,
            prior,
            cfg,
            adam_main: AdamState::new(len),
            adam_shadow: AdamState::new(len),
            noise,
            client_id,
            round,
            steps: 0,
        })
    }

    /// One mini-batch: evaluate both gradients at the current state, then
    /// move the working set (data + KL) and the shadow set (KL chase).
    pub fn step(&mut self, x: &Mat, y: &[usize], n: usize) -> Result<f64> {
        let grad = self.main_grad(x, y, n)?;

        // Shadow gradient against the working set *before* it moves.
        let q = self.model.params().concat();
        let p = self.shadow.concat();
        let (sh_dmu, sh_drho) = gaussian::kl_grad_prior(&q, &p)?;

        let t1 = self.model.layout.t_personalized();
        self.apply_main(&grad, false)?;

        let mut shadow_theta = pack_pair(&self.shadow);
        let mut sg = Vec::with_capacity(shadow_theta.len());
        sg.extend_from_slice(&sh_dmu[..t1]);
        sg.extend_from_slice(&sh_drho[..t1]);
        sg.extend_from_slice(&sh_dmu[t1..]);
        sg.extend_from_slice(&sh_drho[t1..]);
        self.adam_shadow.step(
            &mut shadow_theta,
            &sg,
            self.cfg.lr,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
        )?;
        self.shadow = unpack_pair(&shadow_theta, t1, self.model.layout.t_shared());

        self.steps += 1;
        Ok(grad.value)
    }

    /// One mini-batch that updates only the personalized factor. The
    /// shared factor receives an all-zero gradient (its Adam moments stay
    /// zero, so it is bit-identical afterwards) and the shadow set is not
    /// advanced — nothing gets uploaded from this path. Used to
    /// personalize against a frozen global model.
    pub fn step_personalized_only(&mut self, x: &Mat, y: &[usize], n: usize) -> Result<f64> {
        let grad = self.main_grad(x, y, n)?;
        self.apply_main(&grad, true)?;
        self.steps += 1;
        Ok(grad.value)
    }

    fn main_grad(&mut self, x: &Mat, y: &[usize], n: usize) -> Result<ModelGrad> {
        let draws: Vec<_> = (0..self.cfg.mc_samples)
            .map(|_| self.model.draw_noise(&mut self.noise))
            .collect();
        let grad = self.model.grad_objective_with_draws(
            &self.prior,
            x,
            y,
            n,
            &draws,
            self.cfg.kl_weight,
        )?;
        if grad.any_non_finite() || grad.max_abs() > self.cfg.grad_guard {
            return Err(BpfedError::Diverged {
                client_id: self.client_id,
                round: self.round,
                detail: format!(
                    "step {}: |grad| reached {:.3e} (guard {:.1e})",
                    self.steps,
                    grad.max_abs(),
                    self.cfg.grad_guard
                ),
            });
        }
        Ok(grad)
    }

    fn apply_main(&mut self, grad: &ModelGrad, freeze_shared: bool) -> Result<()> {
        let t1 = self.model.layout.t_personalized();
        let t2 = self.model.layout.t_shared();
        let mut theta = pack_pair(&self.model.params());
        let mut g = Vec::with_capacity(theta.len());
        g.extend_from_slice(&grad.personalized_mu);
        g.extend_from_slice(&grad.personalized_rho);
        g.extend_from_slice(&grad.shared_mu);
        g.extend_from_slice(&grad.shared_rho);
        if freeze_shared {
            g[2 * t1..].iter_mut().for_each(|v| *v = 0.0);
        }
        self.adam_main.step(
            &mut theta,
            &g,
            self.cfg.lr,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
        )?;
        let pair = unpack_pair(&theta, t1, t2);
        self.model.personalized = pair.personalized;
        self.model.shared = pair.shared;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Current working posterior.
    pub fn working(&self) -> FactorPair {
        self.model.params()
    }

    /// Current shadow posterior.
    pub fn shadow(&self) -> &FactorPair {
        &self.shadow
    }

    fn into_parts(self) -> (FactorPair, FactorPair) {
        (self.model.params(), self.shadow)
    }
}

/// Mini-batch stepper for the point-mass baselines: plain deterministic
/// cross-entropy descent with the same `n/b` scaling and Adam settings.
/// Frozen segments receive an all-zero gradient, which leaves their Adam
/// moments at zero and the parameters bit-identical.
pub struct PointStepper<'a> {
    layout: &'a FactorLayout,
    personal: Vec<f64>,
    shared: Vec<f64>,
    adam: AdamState,
    update_personal: bool,
    update_shared: bool,
    cfg: &'a TrainConfig,
    client_id: usize,
    round: usize,
    steps: u64,
}

impl<'a> PointStepper<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &'a FactorLayout,
        personal: Vec<f64>,
        shared: Vec<f64>,
        update_personal: bool,
        update_shared: bool,
        cfg: &'a TrainConfig,
        client_id: usize,
        round: usize,
    ) -> Result<PointStepper<'a>> {
        cfg.validate()?;
        if personal.len() != layout.t_personalized() {
            return Err(BpfedError::LengthMismatch {
                expected: layout.t_personalized(),
                got: personal.len(),
            });
        }
        if shared.len() != layout.t_shared() {
            return Err(BpfedError::LengthMismatch {
                expected: layout.t_shared(),
                got: shared.len(),
            });
        }
        let len = personal.len() + shared.len();
        Ok(PointStepper {
            layout,
            personal,
            shared,
            adam: AdamState::new(len),
            update_personal,
            update_shared,
            cfg,
            client_id,
            round,
            steps: 0,
        })
    }

    pub fn step(&mut self, x: &Mat, y: &[usize], n: usize) -> Result<f64> {
        let w = self.layout.assemble(&self.personal, &self.shared)?;
        let (ce, gw) = nll_grad_canonical(self.layout, &w, x, y)?;
        let scale = n as f64 / x.rows() as f64;
        let (mut gp, mut gs) = self.layout.split(&gw)?;
        for g in gp.iter_mut().chain(gs.iter_mut()) {
            *g *= scale;
        }
        if !self.update_personal {
            gp.iter_mut().for_each(|g| *g = 0.0);
        }
        if !self.update_shared {
            gs.iter_mut().for_each(|g| *g = 0.0);
        }
        let max_abs = gp
            .iter()
            .chain(gs.iter())
            .fold(0.0f64, |acc, &g| acc.max(g.abs()));
        if !max_abs.is_finite() || max_abs > self.cfg.grad_guard {
            return Err(BpfedError::Diverged {
                client_id: self.client_id,
                round: self.round,
                detail: format!(
                    "step {}: |grad| reached {max_abs:.3e} (guard {:.1e})",
                    self.steps, self.cfg.grad_guard
                ),
            });
        }

        let mut theta = self.personal.clone();
        theta.extend_from_slice(&self.shared);
        let mut g = gp;
        g.extend_from_slice(&gs);
        self.adam.step(
            &mut theta,
            &g,
            self.cfg.lr,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
        )?;
        let (p, s) = theta.split_at(self.personal.len());
        self.personal.copy_from_slice(p);
        self.shared.copy_from_slice(s);
        self.steps += 1;
        Ok(ce * scale)
    }

    pub fn personal(&self) -> &[f64] {
        &self.personal
    }

    pub fn shared(&self) -> &[f64] {
        &self.shared
    }
}

/// Iterate the shard in shuffled mini-batches, calling `f` on each batch.
pub fn for_each_shard_batch<F>(
    shard: &ClientShard,
    epochs: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
    mut f: F,
) -> Result<()>
where
    F: FnMut(&Mat, &[usize], usize) -> Result<()>,
{
    let n = shard.train.len();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let (x, y) = shard.train.gather(chunk);
            f(&x, &y, n)?;
        }
    }
    Ok(())
}

/// One variational client-round: fit the working posterior against the
/// frozen prior `(eta_prev, zeta_global)`, trail it with the shadow set,
/// and return the new personalized posterior plus the upload packet
/// carrying the shadow's shared factor.
pub fn client_update(
    state: &ClientState,
    eta_prev: &GaussianParamSet,
    zeta_global: &GaussianParamSet,
    layout: &FactorLayout,
    cfg: &TrainConfig,
    run_seed: u64,
    round: usize,
) -> Result<(GaussianParamSet, UploadPacket)> {
    if state.shard.train.is_empty() {
        return Err(BpfedError::EmptyData(format!(
            "client {} has no training samples",
            state.client_id
        )));
    }
    let prior = PriorSnapshot::new(eta_prev.clone(), zeta_global.clone());
    let noise = rng::client_noise(run_seed, state.client_id, round);
    let mut stepper = BayesStepper::new(
        layout,
        eta_prev.clone(),
        zeta_global.clone(),
        prior,
        cfg,
        noise,
        state.client_id,
        round,
    )?;
    let mut batches = rng::client_batches(run_seed, state.client_id, round);
    for_each_shard_batch(
        &state.shard,
        cfg.local_epochs,
        cfg.batch,
        &mut batches,
        |x, y, n| stepper.step(x, y, n).map(|_| ()),
    )?;
    let (working, shadow) = stepper.into_parts();
    Ok((
        working.personalized,
        UploadPacket {
            client_id: state.client_id,
            zeta_bar: shadow.shared,
        },
    ))
}

/// One point-mass client-round for the baseline modes. Returns the trained
/// `(personal, shared)` weights; the shared part is what gets uploaded.
pub fn client_update_dirac(
    state: &ClientState,
    w_prev_personal: &[f64],
    w_global_shared: &[f64],
    layout: &FactorLayout,
    cfg: &TrainConfig,
    run_seed: u64,
    round: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.mode.is_variational() {
        return Err(BpfedError::InvalidArgument(
            "the variational mode has no point-mass update".into(),
        ));
    }
    if state.shard.train.is_empty() {
        return Err(BpfedError::EmptyData(format!(
            "client {} has no training samples",
            state.client_id
        )));
    }
    let mut batches = rng::client_batches(run_seed, state.client_id, round);
    match cfg.mode {
        Mode::FedRep => {
            // Phase 1: personalized only; phase 2: shared only, with fresh
            // Adam moments so the unfrozen segment starts cold.
            let mut head = PointStepper::new(
                layout,
                w_prev_personal.to_vec(),
                w_global_shared.to_vec(),
                true,
                false,
                cfg,
                state.client_id,
                round,
            )?;
            for_each_shard_batch(
                &state.shard,
                cfg.local_epochs,
                cfg.batch,
                &mut batches,
                |x, y, n| head.step(x, y, n).map(|_| ()),
            )?;
            let personal = head.personal().to_vec();
            debug_assert_eq!(head.shared(), w_global_shared);
            let mut body = PointStepper::new(
                layout,
                personal,
                w_global_shared.to_vec(),
                false,
                true,
                cfg,
                state.client_id,
                round,
            )?;
            for_each_shard_batch(
                &state.shard,
                cfg.local_epochs,
                cfg.batch,
                &mut batches,
                |x, y, n| body.step(x, y, n).map(|_| ()),
            )?;
            Ok((body.personal().to_vec(), body.shared().to_vec()))
        }
        _ => {
            let mut stepper = PointStepper::new(
                layout,
                w_prev_personal.to_vec(),
                w_global_shared.to_vec(),
                true,
                true,
                cfg,
                state.client_id,
                round,
            )?;
            for_each_shard_batch(
                &state.shard,
                cfg.local_epochs,
                cfg.batch,
                &mut batches,
                |x, y, n| stepper.step(x, y, n).map(|_| ()),
            )?;
            Ok((stepper.personal().to_vec(), stepper.shared().to_vec()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::mlp::FactorTag;

    fn toy_shard(n: usize, seed: u64) -> ClientShard {
        // Two linearly separated 2-d blobs.
        let mut rng = rng::stream(seed, "toy-shard", 0, 0);
        use rand_distr::{Distribution, StandardNormal};
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let center = if c == 0 { -1.5 } else { 1.5 };
            rows.push(vec![center + 0.3 * z0, -center + 0.3 * z1]);
            labels.push(c);
        }
        let x = Mat::from_rows(&rows).unwrap();
        let train = Dataset::new(x, labels, 2).unwrap();
        let test = train.clone();
        ClientShard {
            client_id: 0,
            label_set: vec![0, 1],
            train,
            test,
        }
    }

    fn toy_layout() -> FactorLayout {
        FactorLayout::last_layer_personalized(&[2, 3, 2]).unwrap()
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for mode in Mode::all() {
            assert_eq!(mode.to_string().parse::<Mode>().unwrap(), mode);
        }
        assert!("banana".parse::<Mode>().is_err());
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut adam = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0, 0.0, 0.0], 1e-3, 0.9, 0.999, 1e-8)
            .unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let lr = 1e-3;
        let mut adam = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[0.7, -1.3], lr, 0.9, 0.999, 1e-8)
            .unwrap();
        assert!((p[0] + lr).abs() <= 1e-6 * lr);
        assert!((p[1] - lr).abs() <= 1e-6 * lr);
    }

    #[test]
    fn adam_two_step_hand_unroll() {
        // Constant gradient g=2, lr=0.1: both steps move by almost exactly
        // -lr because bias-corrected mhat/sqrt(vhat) = 1 for constant g.
        let mut adam = AdamState::new(1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[2.0], 0.1, 0.9, 0.999, 1e-8).unwrap();
        adam.step(&mut p, &[2.0], 0.1, 0.9, 0.999, 1e-8).unwrap();
        // Hand unroll: t=1: mhat=2, vhat=4, step = .1*2/(2+1e-8).
        // t=2: m=0.38/0.19=2, v=0.007996/0.001999=4 -> same step.
        let expected = -0.1 * 2.0 / (2.0 + 1e-8) * 2.0;
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_length_mismatch() {
        let mut adam = AdamState::new(2);
        let mut p = vec![0.0];
        assert!(adam.step(&mut p, &[1.0], 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn zero_epochs_returns_inputs_unchanged() {
        let layout = toy_layout();
        let shard = toy_shard(8, 1);
        let model = BayesMLP::build(&layout, 7);
        let state = ClientState {
            client_id: 0,
            eta: model.personalized.clone(),
            shard,
        };
        let cfg = TrainConfig {
            local_epochs: 0,
            batch: 4,
            ..TrainConfig::default()
        };
        let (eta_new, packet) = client_update(
            &state,
            &model.personalized,
            &model.shared,
            &layout,
            &cfg,
            3,
            0,
        )
        .unwrap();
        assert_eq!(eta_new.bit_pattern(), model.personalized.bit_pattern());
        // With no steps the shadow still sits at the round's entry state,
        // so the upload is the global shared factor itself.
        assert_eq!(packet.zeta_bar.bit_pattern(), model.shared.bit_pattern());
    }

    #[test]
    fn first_shadow_step_is_a_noop() {
        let layout = toy_layout();
        let shard = toy_shard(4, 2);
        let model = BayesMLP::build(&layout, 11);
        let prior = model.params();
        let cfg = TrainConfig {
            batch: 4,
            ..TrainConfig::default()
        };
        let mut stepper = BayesStepper::new(
            &layout,
            model.personalized.clone(),
            model.shared.clone(),
            prior.clone(),
            &cfg,
            rng::client_noise(5, 0, 0),
            0,
            0,
        )
        .unwrap();
        let (x, y) = shard.train.gather(&[0, 1, 2, 3]);
        stepper.step(&x, &y, 4).unwrap();
        // The shadow evaluated its KL gradient at working == shadow ==
        // prior, which is exactly zero, so it must not have moved...
        assert_eq!(
            stepper.shadow().concat().bit_pattern(),
            prior.concat().bit_pattern()
        );
        // ...while the working set did.
        assert_ne!(
            stepper.working().concat().bit_pattern(),
            prior.concat().bit_pattern()
        );

        // From the second step on the shadow chases the working set.
        stepper.step(&x, &y, 4).unwrap();
        assert_ne!(
            stepper.shadow().concat().bit_pattern(),
            prior.concat().bit_pattern()
        );
    }

    #[test]
    fn shadow_starts_at_the_working_set_even_under_a_foreign_prior() {
        // Round 0: the configured prior need not equal the entry state.
        // The shadow still begins at the entry state, so step one remains
        // a no-op for it.
        let layout = toy_layout();
        let shard = toy_shard(4, 9);
        let model = BayesMLP::build(&layout, 37);
        let start = model.params();
        let prior = PriorSnapshot::new(
            GaussianParamSet::constant(layout.t_personalized(), 0.0, 0.1).unwrap(),
            GaussianParamSet::constant(layout.t_shared(), 0.0, 0.1).unwrap(),
        );
        let cfg = TrainConfig {
            batch: 4,
            ..TrainConfig::default()
        };
        let mut stepper = BayesStepper::new(
            &layout,
            model.personalized.clone(),
            model.shared.clone(),
            prior,
            &cfg,
            rng::client_noise(6, 0, 0),
            0,
            0,
        )
        .unwrap();
        assert_eq!(
            stepper.shadow().concat().bit_pattern(),
            start.concat().bit_pattern()
        );
        let (x, y) = shard.train.gather(&[0, 1, 2, 3]);
        stepper.step(&x, &y, 4).unwrap();
        assert_eq!(
            stepper.shadow().concat().bit_pattern(),
            start.concat().bit_pattern()
        );
    }

    #[test]
    fn client_update_is_deterministic() {
        let layout = toy_layout();
        let shard = toy_shard(12, 3);
        let model = BayesMLP::build(&layout, 13);
        let state = ClientState {
            client_id: 4,
            eta: model.personalized.clone(),
            shard,
        };
        let cfg = TrainConfig {
            local_epochs: 2,
            batch: 4,
            ..TrainConfig::default()
        };
        let run = |seed: u64, round: usize| {
            client_update(
                &state,
                &model.personalized,
                &model.shared,
                &layout,
                &cfg,
                seed,
                round,
            )
            .unwrap()
        };
        let (eta_a, packet_a) = run(9, 1);
        let (eta_b, packet_b) = run(9, 1);
        assert_eq!(eta_a.bit_pattern(), eta_b.bit_pattern());
        assert_eq!(
            packet_a.zeta_bar.bit_pattern(),
            packet_b.zeta_bar.bit_pattern()
        );
        // Different round => different stream => different trajectory.
        let (eta_c, _) = run(9, 2);
        assert_ne!(eta_a.bit_pattern(), eta_c.bit_pattern());
    }

    #[test]
    fn inputs_are_not_mutated_and_shadow_never_reads_data() {
        let layout = toy_layout();
        let shard = toy_shard(12, 4);
        let model = BayesMLP::build(&layout, 17);
        let state = ClientState {
            client_id: 0,
            eta: model.personalized.clone(),
            shard,
        };
        let cfg = TrainConfig {
            local_epochs: 3,
            batch: 5,
            ..TrainConfig::default()
        };
        let eta_bits = model.personalized.bit_pattern();
        let zeta_bits = model.shared.bit_pattern();
        let before = state.shard.train.read_count();
        client_update(
            &state,
            &model.personalized,
            &model.shared,
            &layout,
            &cfg,
            1,
            0,
        )
        .unwrap();
        // The frozen prior inputs are untouched.
        assert_eq!(model.personalized.bit_pattern(), eta_bits);
        assert_eq!(model.shared.bit_pattern(), zeta_bits);
        // Every shard read is accounted for by the working path: 3 epochs
        // over 12 samples. A shadow-side data read would exceed this.
        assert_eq!(state.shard.train.read_count() - before, 3 * 12);
    }

    #[test]
    fn divergence_guard_names_the_round() {
        let layout = toy_layout();
        let shard = toy_shard(8, 5);
        let model = BayesMLP::build(&layout, 19);
        let state = ClientState {
            client_id: 3,
            eta: model.personalized.clone(),
            shard,
        };
        // A colossal n/b ratio scales gradients past any sane guard.
        let cfg = TrainConfig {
            local_epochs: 1,
            batch: 8,
            grad_guard: 1e-12,
            ..TrainConfig::default()
        };
        let err = client_update(
            &state,
            &model.personalized,
            &model.shared,
            &layout,
            &cfg,
            2,
            6,
        )
        .unwrap_err();
        match err {
            BpfedError::Diverged {
                client_id, round, ..
            } => {
                assert_eq!(client_id, 3);
                assert_eq!(round, 6);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_shard_is_an_error() {
        let layout = toy_layout();
        let x = Mat::zeros(0, 2);
        let empty = Dataset::new(x, vec![], 2).unwrap();
        let shard = ClientShard {
            client_id: 0,
            label_set: vec![0, 1],
            train: empty.clone(),
            test: empty,
        };
        let model = BayesMLP::build(&layout, 23);
        let state = ClientState {
            client_id: 0,
            eta: model.personalized.clone(),
            shard,
        };
        let cfg = TrainConfig::default();
        assert!(matches!(
            client_update(
                &state,
                &model.personalized,
                &model.shared,
                &layout,
                &cfg,
                0,
                0
            ),
            Err(BpfedError::EmptyData(_))
        ));
    }

    #[test]
    fn fedrep_freezes_shared_factor_bit_identically_in_phase_one() {
        let layout = toy_layout();
        let shard = toy_shard(10, 6);
        let cfg = TrainConfig {
            mode: Mode::FedRep,
            local_epochs: 2,
            batch: 5,
            ..TrainConfig::default()
        };
        let personal = vec![0.1; layout.t_personalized()];
        // Positive shared weights keep the hidden ReLUs active so the head
        // weights receive nonzero gradients.
        let shared = vec![0.2; layout.t_shared()];
        let mut head = PointStepper::new(
            &layout,
            personal.clone(),
            shared.clone(),
            true,
            false,
            &cfg,
            0,
            0,
        )
        .unwrap();
        let (x, y) = shard.train.gather(&[0, 1, 2, 3, 4]);
        for _ in 0..6 {
            head.step(&x, &y, 10).unwrap();
        }
        let frozen: Vec<u64> = head.shared().iter().map(|v| v.to_bits()).collect();
        let expect: Vec<u64> = shared.iter().map(|v| v.to_bits()).collect();
        assert_eq!(frozen, expect);
        assert_ne!(head.personal(), personal.as_slice());
    }

    #[test]
    fn fedavg_mode_trains_with_empty_personalized_factor() {
        let layout = FactorLayout::all_shared(&[2, 3, 2]).unwrap();
        let shard = toy_shard(10, 7);
        let model = BayesMLP::build(&layout, 29);
        let state = ClientState {
            client_id: 0,
            eta: model.personalized.clone(),
            shard,
        };
        let cfg = TrainConfig {
            mode: Mode::FedAvg,
            local_epochs: 2,
            batch: 5,
            ..TrainConfig::default()
        };
        let (personal, shared) = client_update_dirac(
            &state,
            &model.personalized.mu,
            &model.shared.mu,
            &layout,
            &cfg,
            3,
            0,
        )
        .unwrap();
        assert!(personal.is_empty());
        assert_eq!(shared.len(), layout.t_shared());
        assert_ne!(shared, model.shared.mu);
    }

    #[test]
    fn dirac_update_rejects_variational_mode() {
        let layout = toy_layout();
        let shard = toy_shard(4, 8);
        let model = BayesMLP::build(&layout, 31);
        let state = ClientState {
            client_id: 0,
            eta: model.personalized.clone(),
            shard,
        };
        let cfg = TrainConfig::default();
        assert!(client_update_dirac(
            &state,
            &model.personalized.mu,
            &model.shared.mu,
            &layout,
            &cfg,
            0,
            0
        )
        .is_err());
    }

    #[test]
    fn layout_for_modes() {
        let sizes = [4, 3, 2];
        assert_eq!(Mode::FedAvg.layout(&sizes).unwrap().t_personalized(), 0);
        let per = Mode::FedPer.layout(&sizes).unwrap();
        assert_eq!(per.t_personalized(), 3 * 2 + 2);
        let lg = Mode::LgFedAvg.layout(&sizes).unwrap();
        assert_eq!(lg.t_shared(), 3 * 2 + 2);
        assert_eq!(lg.layers().first().unwrap().tag, FactorTag::Personalized);
    }
}
