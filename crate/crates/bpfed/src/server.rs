//! The federated server loop.
//!
//! Each communication round samples `S` of the `N` registered clients
//! without replacement, dispatches their local updates in parallel, and
//! averages the uploaded shared factors elementwise in `(mu, sigma)`
//! space (scales are mapped back through the inverse softplus). The
//! reduction runs serially in ascending client id, so results are
//! bit-identical regardless of dispatch scheduling.
//!
//! Prior bookkeeping is continual: the prior handed to client `i` at
//! round `t` pairs that client's stored personalized posterior from its
//! last participating round (the configured initial prior if it never
//! participated) with the current global shared posterior (the initial
//! prior at round 0). Non-participants are untouched.
//!
//! Point-mass modes run the same loop with the deterministic client
//! update; their parameters ride in [`GaussianParamSet`]s whose scales
//! are pinned to the point-mass floor, and evaluation uses a single
//! deterministic forward pass instead of Monte Carlo draws.

use crate::data::ClientShard;
use crate::error::{BpfedError, Result};
use crate::gaussian::{self, GaussianParamSet};
use crate::mat::Mat;
use crate::metrics::{self, Calibration};
use crate::mlp::{self, BayesMLP, FactorLayout, PriorSnapshot};
use crate::rng;
use crate::trainer::{self, ClientState, Mode, TrainConfig, UploadPacket};
use rayon::prelude::*;

/// Standard deviation of the configured initial prior (zero mean).
pub const INITIAL_PRIOR_SIGMA: f64 = 0.1;

/// Everything the orchestrator needs beyond the shards themselves.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Participants per round (S); must not exceed the client count.
    pub participants: usize,
    /// Communication rounds (T).
    pub rounds: usize,
    /// Evaluate every this many rounds (and always after the last).
    pub eval_interval: usize,
    /// Monte Carlo draws per prediction at evaluation time.
    pub m_test: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if n_clients == 0 {
            return Err(BpfedError::InvalidArgument(
                "experiment needs at least one client".into(),
            ));
        }
        if self.participants == 0 || self.participants > n_clients {
            return Err(BpfedError::InvalidArgument(format!(
                "participants per round must be in 1..={n_clients}, got {}",
                self.participants
            )));
        }
        if self.rounds == 0 {
            return Err(BpfedError::InvalidArgument(
                "at least one communication round is required".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(BpfedError::InvalidArgument(
                "evaluation interval must be at least 1".into(),
            ));
        }
        if self.m_test == 0 {
            return Err(BpfedError::InvalidArgument(
                "at least one prediction draw is required".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(BpfedError::InvalidArgument(
                "hidden layer widths must be nonzero and nonempty".into(),
            ));
        }
        self.train.validate()
    }
}

/// One evaluation pass over every client's local test shard.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    /// Communication rounds completed when this evaluation ran.
    pub round: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Mean over clients of the per-client mean negative log-likelihood.
    pub mean_nll: f64,
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
    pub per_client_acc: Vec<f64>,
    /// Reliability table pooled over all clients' predictions.
    pub calibration: Calibration,
}

/// Server-side experiment state.
pub struct ServerState {
    layout: FactorLayout,
    mode: Mode,
    /// Global shared posterior (point modes: means with floored scales).
    zeta: GaussianParamSet,
    round: usize,
    clients: Vec<ClientState>,
    participated: Vec<bool>,
    seed: u64,
}

impl ServerState {
    /// Register the shards and initialize every parameter set from its
    /// own named stream: the global shared factor from the shared-init
    /// stream, each client's personalized factor from a per-client one.
    pub fn init(shards: Vec<ClientShard>, cfg: &ExperimentConfig) -> Result<ServerState> {
        cfg.validate(shards.len())?;
        let input_dim = shards[0].train.features();
        let class_count = shards[0].train.class_count();
        for s in &shards {
            if s.train.features() != input_dim
                || s.test.features() != input_dim
                || s.train.class_count() != class_count
            {
                return Err(BpfedError::InvalidArgument(format!(
                    "client {} shard shape disagrees with client {}",
                    s.client_id, shards[0].client_id
                )));
            }
        }
        let mut sizes = Vec::with_capacity(cfg.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(class_count);
        let mode = cfg.train.mode;
        let layout = mode.layout(&sizes)?;

        let variational = mode.is_variational();
        let mut shared_rng = rng::init_shared(cfg.seed);
        let zeta = {
            let set = mlp::init_param_set(layout.t_shared(), &mut shared_rng);
            if variational {
                set
            } else {
                GaussianParamSet::point_mass(set.mu)
            }
        };
        let clients = shards
            .into_iter()
            .map(|shard| {
                let mut rng = rng::init_personal(cfg.seed, shard.client_id);
                let set = mlp::init_param_set(layout.t_personalized(), &mut rng);
                let eta = if variational {
                    set
                } else {
                    GaussianParamSet::point_mass(set.mu)
                };
                ClientState {
                    client_id: shard.client_id,
                    eta,
                    shard,
                }
            })
            .collect::<Vec<_>>();
        let n = clients.len();
        Ok(ServerState {
            layout,
            mode,
            zeta,
            round: 0,
            clients,
            participated: vec![false; n],
            seed: cfg.seed,
        })
    }

    pub fn layout(&self) -> &FactorLayout {
        &self.layout
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn zeta(&self) -> &GaussianParamSet {
        &self.zeta
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// The configured zero-mean initial prior for a factor of `len`
    /// parameters.
    pub fn initial_prior(len: usize) -> GaussianParamSet {
        GaussianParamSet::constant(len, 0.0, INITIAL_PRIOR_SIGMA)
            .expect("constant prior parameters are valid")
    }

    /// The frozen prior for one client this round: its stored posterior
    /// from the last round it participated in (initial prior before first
    /// participation) paired with the current global shared posterior
    /// (initial prior at round 0).
    pub fn prior_for_client(&self, idx: usize) -> PriorSnapshot {
        let personalized = if self.participated[idx] {
            self.clients[idx].eta.clone()
        } else {
            Self::initial_prior(self.layout.t_personalized())
        };
        let shared = if self.round == 0 {
            Self::initial_prior(self.layout.t_shared())
        } else {
            self.zeta.clone()
        };
        PriorSnapshot::new(personalized, shared)
    }

    /// One communication round. Returns the ascending ids of the sampled
    /// participants.
    pub fn run_round(&mut self, cfg: &ExperimentConfig) -> Result<Vec<usize>> {
        cfg.validate(self.clients.len())?;
        let mut round_rng = rng::server_round(self.seed, self.round);
        let mut sampled =
            rand::seq::index::sample(&mut round_rng, self.clients.len(), cfg.participants)
                .into_vec();
        sampled.sort_unstable();

        let variational = self.mode.is_variational();
        let seed = self.seed;
        let round = self.round;
        let layout = &self.layout;
        let train_cfg = &cfg.train;
        let mut results: Vec<(usize, Result<(GaussianParamSet, UploadPacket)>)> = sampled
            .par_iter()
            .map(|&idx| {
                let state = &self.clients[idx];
                let outcome = if variational {
                    let prior = self.prior_for_client(idx);
                    trainer::client_update(
                        state,
                        &prior.personalized,
                        &prior.shared,
                        layout,
                        train_cfg,
                        seed,
                        round,
                    )
                } else {
                    trainer::client_update_dirac(
                        state,
                        &state.eta.mu,
                        &self.zeta.mu,
                        layout,
                        train_cfg,
                        seed,
                        round,
                    )
                    .map(|(personal, shared)| {
                        (
                            GaussianParamSet::point_mass(personal),
                            UploadPacket {
                                client_id: state.client_id,
                                zeta_bar: GaussianParamSet::point_mass(shared),
                            },
                        )
                    })
                };
                (idx, outcome)
            })
            .collect();

        // Fail fast and deterministically: surface the error of the
        // lowest-id failing client.
        results.sort_by_key(|(idx, _)| *idx);
        let mut packets = Vec::with_capacity(results.len());
        let mut etas = Vec::with_capacity(results.len());
        for (idx, outcome) in results {
            let (eta_new, packet) = outcome?;
            etas.push((idx, eta_new));
            packets.push(packet);
        }
        for (idx, eta_new) in etas {
            self.clients[idx].eta = eta_new;
            self.participated[idx] = true;
        }
        self.zeta = aggregate_packets(&packets, variational)?;
        self.round += 1;
        Ok(sampled)
    }

    /// Class-probability predictions of one client's current model on a
    /// batch: Monte Carlo predictive mean for the variational mode, a
    /// single deterministic softmax for point-mass modes.
    pub fn predict_client(
        &self,
        idx: usize,
        x: &Mat,
        m_test: usize,
        eval_round: usize,
    ) -> Result<Mat> {
        let state = &self.clients[idx];
        let model = BayesMLP::from_parts(&self.layout, state.eta.clone(), self.zeta.clone())?;
        if self.mode.is_variational() {
            let mut rng = rng::eval(self.seed, state.client_id, eval_round);
            model.predict(x, m_test, &mut rng)
        } else {
            let w = self.layout.assemble(&state.eta.mu, &self.zeta.mu)?;
            let logits = mlp::forward_canonical(&self.layout, &w, x)?;
            let mut probs = Mat::zeros(logits.rows(), logits.cols());
            for r in 0..logits.rows() {
                probs
                    .row_mut(r)
                    .copy_from_slice(&mlp::softmax_row(logits.row(r)));
            }
            Ok(probs)
        }
    }

    /// Evaluate every client on its local test shard; calibration pools
    /// all clients' predictions.
    pub fn evaluate(&self, cfg: &ExperimentConfig, n_bins: usize) -> Result<EvalRecord> {
        let mut per_client_acc = Vec::with_capacity(self.clients.len());
        let mut per_client_nll = Vec::with_capacity(self.clients.len());
        let mut pooled_rows: Vec<Vec<f64>> = Vec::new();
        let mut pooled_y: Vec<usize> = Vec::new();
        for idx in 0..self.clients.len() {
            let (x, y) = self.clients[idx].shard.test.gather_all();
            let probs = self.predict_client(idx, &x, cfg.m_test, self.round)?;
            per_client_acc.push(metrics::accuracy(&probs, &y)?);
            per_client_nll.push(metrics::mean_nll(&probs, &y)?);
            for r in 0..probs.rows() {
                pooled_rows.push(probs.row(r).to_vec());
            }
            pooled_y.extend_from_slice(&y);
        }
        let pooled = Mat::from_rows(&pooled_rows)?;
        let calibration = metrics::calibration(&pooled, &pooled_y, n_bins)?;
        let brier = metrics::brier(&pooled, &pooled_y)?;
        let (mean_acc, std_acc) = metrics::mean_std(&per_client_acc);
        let (mean_nll, _) = metrics::mean_std(&per_client_nll);
        Ok(EvalRecord {
            round: self.round,
            mean_acc,
            std_acc,
            mean_nll,
            ece: calibration.ece,
            mce: calibration.mce,
            brier,
            per_client_acc,
            calibration,
        })
    }
}

/// Elementwise mean of the uploaded shared factors in `(mu, sigma)`
/// space. Packets are reduced in ascending client id; the mean is
/// anchored on the first packet (mean = first + mean of deviations), so
/// identical packets aggregate to that packet exactly. Point-mass packets
/// keep their scales pinned instead of round-tripping through softplus.
pub fn aggregate_packets(packets: &[UploadPacket], variational: bool) -> Result<GaussianParamSet> {
    let first = packets
        .first()
        .ok_or_else(|| BpfedError::EmptyData("aggregation needs at least one packet".into()))?;
    let dim = first.zeta_bar.len();
    let mut sorted: Vec<&UploadPacket> = packets.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    for p in &sorted {
        if p.zeta_bar.len() != dim {
            return Err(BpfedError::LengthMismatch {
                expected: dim,
                got: p.zeta_bar.len(),
            });
        }
    }
    let anchor = &sorted[0].zeta_bar;
    if sorted
        .iter()
        .all(|p| p.zeta_bar.bit_pattern() == anchor.bit_pattern())
    {
        return Ok(anchor.clone());
    }
    let s = sorted.len() as f64;
    let anchor_sigma = anchor.sigma();
    let mut mu_dev = vec![0.0; dim];
    let mut sigma_dev = vec![0.0; dim];
    for p in &sorted {
        let sigma = p.zeta_bar.sigma();
        for k in 0..dim {
            mu_dev[k] += p.zeta_bar.mu[k] - anchor.mu[k];
            sigma_dev[k] += sigma[k] - anchor_sigma[k];
        }
    }
    let mu: Vec<f64> = (0..dim).map(|k| anchor.mu[k] + mu_dev[k] / s).collect();
    let rho: Vec<f64> = if variational {
        (0..dim)
            .map(|k| gaussian::inv_softplus(anchor_sigma[k] + sigma_dev[k] / s))
            .collect()
    } else {
        vec![gaussian::RHO_POINT_MASS; dim]
    };
    GaussianParamSet::new(mu, rho)
}

/// Result of a full experiment: evaluation history plus the final state.
pub struct ExperimentResult {
    pub history: Vec<EvalRecord>,
    pub state: ServerState,
}

/// Run `T` rounds over the given shards, evaluating every
/// `eval_interval` rounds and always after the final round.
pub fn run_experiment(
    shards: Vec<ClientShard>,
    cfg: &ExperimentConfig,
    n_bins: usize,
) -> Result<ExperimentResult> {
    let mut state = ServerState::init(shards, cfg)?;
    let mut history = Vec::new();
    for _ in 0..cfg.rounds {
        state.run_round(cfg)?;
        if state.round % cfg.eval_interval == 0 && state.round != cfg.rounds {
            history.push(state.evaluate(cfg, n_bins)?);
        }
    }
    history.push(state.evaluate(cfg, n_bins)?);
    Ok(ExperimentResult { history, state })
}

/// Outcome of novel-client personalization: the accuracy of the frozen
/// global model with a freshly initialized personalized factor, and the
/// accuracy after locally training only that factor.
#[derive(Debug, Clone)]
pub struct NovelClientOutcome {
    pub zero_shot_acc: f64,
    pub personalized_acc: f64,
    pub eta: GaussianParamSet,
}

/// Personalize a novel client against a frozen trained shared factor:
/// initialize a fresh personalized factor from the novel stream, train
/// only it (the shared factor receives no gradient), and report accuracy
/// on the novel client's test split before and after.
pub fn personalize_novel_client(
    layout: &FactorLayout,
    zeta_frozen: &GaussianParamSet,
    shard: &ClientShard,
    cfg: &ExperimentConfig,
    n_rounds: usize,
) -> Result<NovelClientOutcome> {
    if shard.train.is_empty() || shard.test.is_empty() {
        return Err(BpfedError::EmptyData(format!(
            "novel client {} has an empty shard",
            shard.client_id
        )));
    }
    if !layout.has_personalized() {
        return Err(BpfedError::InvalidArgument(
            "novel-client personalization needs a personalized factor".into(),
        ));
    }
    let variational = cfg.train.mode.is_variational();
    let mut init_rng = rng::novel(cfg.seed);
    let eta0 = {
        let set = mlp::init_param_set(layout.t_personalized(), &mut init_rng);
        if variational {
            set
        } else {
            GaussianParamSet::point_mass(set.mu)
        }
    };
    let zeta_bits = zeta_frozen.bit_pattern();

    let state = ClientState {
        client_id: shard.client_id,
        eta: eta0.clone(),
        shard: shard.clone(),
    };
    let predict = |eta: &GaussianParamSet, eval_round: usize| -> Result<f64> {
        let (x, y) = shard.test.gather_all();
        let probs = if variational {
            let model = BayesMLP::from_parts(layout, eta.clone(), zeta_frozen.clone())?;
            let mut rng = rng::eval(cfg.seed, shard.client_id, eval_round);
            model.predict(&x, cfg.m_test, &mut rng)?
        } else {
            let w = layout.assemble(&eta.mu, &zeta_frozen.mu)?;
            let logits = mlp::forward_canonical(layout, &w, &x)?;
            let mut p = Mat::zeros(logits.rows(), logits.cols());
            for r in 0..logits.rows() {
                p.row_mut(r)
                    .copy_from_slice(&mlp::softmax_row(logits.row(r)));
            }
            p
        };
        metrics::accuracy(&probs, &y)
    };

    // Both accuracies use the evaluation stream keyed by the number of
    // personalization rounds, so zero rounds reproduces the zero-shot
    // prediction exactly.
    let zero_shot_acc = predict(&eta0, 0)?;

    let mut eta = eta0;
    if variational {
        // Freeze the shared factor by keeping only the personalized
        // gradient: body-frozen training reuses the head-only phase of
        // the update loop below via zero KL pressure on zeta.
        for round in 0..n_rounds {
            let prior = PriorSnapshot::new(
                ServerState::initial_prior(layout.t_personalized()),
                zeta_frozen.clone(),
            );
            let noise = rng::client_noise(cfg.seed, state.client_id, round);
            let mut stepper = trainer::BayesStepper::new(
                layout,
                eta.clone(),
                zeta_frozen.clone(),
                prior,
                &cfg.train,
                noise,
                state.client_id,
                round,
            )?;
            let mut batches = rng::client_batches(cfg.seed, state.client_id, round);
            trainer::for_each_shard_batch(
                &state.shard,
                cfg.train.local_epochs,
                cfg.train.batch,
                &mut batches,
                |x, y, n| stepper.step_personalized_only(x, y, n).map(|_| ()),
            )?;
            eta = stepper.working().personalized;
        }
    } else {
        let head_cfg = TrainConfig {
            mode: Mode::FedRep,
            ..cfg.train.clone()
        };
        for round in 0..n_rounds {
            let mut batches = rng::client_batches(cfg.seed, state.client_id, round);
            let mut head = trainer::PointStepper::new(
                layout,
                eta.mu.clone(),
                zeta_frozen.mu.clone(),
                true,
                false,
                &head_cfg,
                state.client_id,
                round,
            )?;
            trainer::for_each_shard_batch(
                &state.shard,
                head_cfg.local_epochs,
                head_cfg.batch,
                &mut batches,
                |x, y, n| head.step(x, y, n).map(|_| ()),
            )?;
            eta = GaussianParamSet::point_mass(head.personal().to_vec());
        }
    }
    debug_assert_eq!(zeta_frozen.bit_pattern(), zeta_bits);

    let personalized_acc = predict(&eta, n_rounds)?;
    Ok(NovelClientOutcome {
        zero_shot_acc,
        personalized_acc,
        eta,
    })
}
