//! The federated round loop.
//!
//! Each round every client starts from the server iterate, runs `T` local
//! zeroth-order steps, and uploads its final iterate (plus algorithm-specific
//! extras). The server averages in client-index order and broadcasts. All
//! queries and transmitted scalars are counted exactly.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{cosine_similarity, gradient_disparity, optimal_gamma, DisparityRecord};
use crate::error::{check_dim, FedZooError, Result};
use crate::estimators::{
    control_variate_estimate, fd_gradient, fedprox_estimate, fzoos_estimate, FdParams, GammaSchedule, StepRule,
    Stepper, UnifiedEstimate,
};
use crate::kernel::{KernelParams, RffBasis};
use crate::linalg::ordered_mean;
use crate::objectives::Objective;
use crate::rng::{self, Role, Stream};
use crate::surrogate::{
    aggregate_weight_vectors, compute_weight_vector, TrajectoryDataset, TrajectoryPosterior, WeightVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedzo")]
    FedZo,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "scaffold1")]
    Scaffold1,
    #[serde(rename = "scaffold2")]
    Scaffold2,
    #[serde(rename = "fzoos")]
    Fzoos,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::FedZo,
        Algorithm::FedProx,
        Algorithm::Scaffold1,
        Algorithm::Scaffold2,
        Algorithm::Fzoos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedZo => "fedzo",
            Algorithm::FedProx => "fedprox",
            Algorithm::Scaffold1 => "scaffold1",
            Algorithm::Scaffold2 => "scaffold2",
            Algorithm::Fzoos => "fzoos",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FedZooError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| {
                FedZooError::config(
                    "algorithms",
                    format!("unknown algorithm `{s}` (expected fedzo, fedprox, scaffold1, scaffold2 or fzoos)"),
                )
            })
    }
}

/// Uncertainty-driven extra queries for the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveQueryConfig {
    pub candidates: usize,
    pub radius: f64,
    pub select: usize,
    /// Extra queries around the current iterate at every local iteration.
    pub per_iteration: bool,
    /// Extra queries around the new server iterate after each aggregation.
    pub post_aggregation: bool,
}

impl Default for ActiveQueryConfig {
    fn default() -> Self {
        ActiveQueryConfig {
            candidates: 100,
            radius: 0.01,
            select: 5,
            per_iteration: true,
            post_aggregation: true,
        }
    }
}

impl ActiveQueryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.select == 0 {
            return Err(FedZooError::config("active_select", "must be at least 1"));
        }
        if self.candidates < self.select {
            return Err(FedZooError::config(
                "active_candidates",
                format!("must be >= active_select ({}), got {}", self.select, self.candidates),
            ));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(FedZooError::config("active_radius", format!("must be positive, got {}", self.radius)));
        }
        Ok(())
    }

    fn per_iteration_count(&self) -> usize {
        if self.per_iteration {
            self.select
        } else {
            0
        }
    }

    fn post_aggregation_count(&self) -> usize {
        if self.post_aggregation {
            self.select
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_iterations: usize,
    pub learning_rate: f64,
    pub step_rule: StepRule,
    /// Correction length schedule for FZooS.
    pub gamma: GammaSchedule,
    /// Proximal weight for FedProx.
    pub prox_gamma: f64,
    pub fd: FdParams,
    pub active: ActiveQueryConfig,
    pub features: usize,
    pub kernel: KernelParams,
    pub gp_noise_variance: f64,
    /// Only the most recent points condition each client's GP; `None` keeps all.
    pub trajectory_window: Option<usize>,
    pub master_seed: u64,
    /// Worker threads for client updates; `0` uses every available core.
    pub workers: usize,
    /// Give every client the same random streams (used to test homogeneous collapse).
    pub shared_client_seeds: bool,
    /// Keep per-iteration disparity records in the trace.
    pub record_iterations: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            algorithm: Algorithm::Fzoos,
            rounds: 50,
            local_iterations: 10,
            learning_rate: 0.01,
            step_rule: StepRule::Gd,
            gamma: GammaSchedule::InverseIteration,
            prox_gamma: 0.1,
            fd: FdParams {
                smoothing: 0.02,
                directions: 20,
            },
            active: ActiveQueryConfig::default(),
            features: 10_000,
            kernel: KernelParams::default(),
            gp_noise_variance: 1e-4,
            trajectory_window: Some(DEFAULT_TRAJECTORY_WINDOW),
            master_seed: 0,
            workers: 0,
            shared_client_seeds: false,
            record_iterations: false,
        }
    }
}

/// Default number of most recent observations conditioning each client GP.
pub const DEFAULT_TRAJECTORY_WINDOW: usize = 60;

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(FedZooError::config("rounds", "must be at least 1"));
        }
        if self.local_iterations == 0 {
            return Err(FedZooError::config("local_iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FedZooError::config(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        self.gamma.validate()?;
        if !(self.prox_gamma >= 0.0 && self.prox_gamma.is_finite()) {
            return Err(FedZooError::config("prox_gamma", format!("must be >= 0, got {}", self.prox_gamma)));
        }
        if !(self.fd.smoothing > 0.0 && self.fd.smoothing.is_finite()) {
            return Err(FedZooError::config(
                "fd_smoothing",
                format!("must be positive, got {}", self.fd.smoothing),
            ));
        }
        if self.fd.directions == 0 {
            return Err(FedZooError::config("fd_directions", "must be at least 1"));
        }
        self.active.validate()?;
        if self.features == 0 {
            return Err(FedZooError::config("features", "must be at least 1"));
        }
        if !(self.kernel.lengthscale > 0.0 && self.kernel.lengthscale.is_finite()) {
            return Err(FedZooError::config(
                "lengthscale",
                format!("must be positive, got {}", self.kernel.lengthscale),
            ));
        }
        if !(self.gp_noise_variance > 0.0 && self.gp_noise_variance.is_finite()) {
            return Err(FedZooError::config(
                "gp_noise_variance",
                format!("must be positive, got {}", self.gp_noise_variance),
            ));
        }
        if self.trajectory_window == Some(0) {
            return Err(FedZooError::config("trajectory_window", "must be at least 1 (or 0 only via `None`)"));
        }
        Ok(())
    }

    /// Queries one client spends in one round.
    pub fn queries_per_client_round(&self) -> u64 {
        let t = self.local_iterations as u64;
        let fd = self.fd.queries_per_estimate() as u64;
        match self.algorithm {
            Algorithm::FedZo | Algorithm::FedProx | Algorithm::Scaffold2 => t * fd,
            Algorithm::Scaffold1 => (t + 1) * fd,
            Algorithm::Fzoos => {
                t * (1 + self.active.per_iteration_count() as u64) + self.active.post_aggregation_count() as u64
            }
        }
    }

    /// Scalars one client exchanges with the server in one round (up + down).
    pub fn scalars_per_client_round(&self, dim: usize) -> u64 {
        let d = dim as u64;
        let extra = match self.algorithm {
            Algorithm::FedZo | Algorithm::FedProx => 0,
            Algorithm::Scaffold1 | Algorithm::Scaffold2 => 2 * d,
            Algorithm::Fzoos => 2 * self.features as u64,
        };
        2 * d + extra
    }
}

/// Client-side state that persists across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    trajectory: TrajectoryDataset,
    stepper: Stepper,
    noise_rng: Stream,
    direction_rng: Stream,
    active_rng: Stream,
    /// FZooS: own weight vector from the end of the previous round.
    weights_prev: Option<WeightVector>,
    /// SCAFFOLD-I: own FD estimate at the current server iterate.
    anchor_gradient: Option<DVector<f64>>,
    /// SCAFFOLD-II: own mean FD estimate over the previous round.
    mean_gradient_prev: Option<DVector<f64>>,
    queries: u64,
}

impl ClientState {
    pub fn new(id: usize, dim: usize, cfg: &FederationConfig) -> Result<Self> {
        let stream_index = if cfg.shared_client_seeds { 0 } else { id as u64 };
        Ok(ClientState {
            id,
            trajectory: TrajectoryDataset::new(cfg.gp_noise_variance)?.with_window(cfg.trajectory_window)?,
            stepper: Stepper::new(cfg.step_rule, dim),
            noise_rng: rng::stream(cfg.master_seed, Role::Noise, stream_index),
            direction_rng: rng::stream(cfg.master_seed, Role::Directions, stream_index),
            active_rng: rng::stream(cfg.master_seed, Role::ActiveQueries, stream_index),
            weights_prev: None,
            anchor_gradient: None,
            mean_gradient_prev: None,
            queries: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn trajectory(&self) -> &TrajectoryDataset {
        &self.trajectory
    }

    pub fn weights_prev(&self) -> Option<&WeightVector> {
        self.weights_prev.as_ref()
    }

    /// Queries this client has issued so far.
    pub fn queries(&self) -> u64 {
        self.queries
    }

    fn query(&mut self, objective: &dyn Objective, z: &DVector<f64>) -> Result<f64> {
        let y = objective.evaluate(self.id, z, &mut self.noise_rng)?;
        self.queries += 1;
        Ok(y)
    }

    /// FD estimate at `x`; probes leaving the unit box are clamped onto it.
    fn fd_estimate(&mut self, objective: &dyn Objective, x: &DVector<f64>, fd: &FdParams) -> Result<DVector<f64>> {
        let mut dir_rng = self.direction_rng.clone();
        let result = fd_gradient(|p| self.query(objective, &clamp_unit(p)), x, fd, &mut dir_rng);
        self.direction_rng = dir_rng;
        Ok(result?.0)
    }

    fn observe(&mut self, objective: &dyn Objective, z: &DVector<f64>) -> Result<()> {
        let y = self.query(objective, z)?;
        self.trajectory.push(z.clone(), y)
    }
}

fn clamp_unit(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Server broadcast consumed by every client in a round.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub round: usize,
    pub x_start: DVector<f64>,
    /// FZooS: `w_{r-1}`.
    pub weights_global: Option<WeightVector>,
    /// SCAFFOLD-I: mean anchor estimate at `x_{r-1}`; SCAFFOLD-II: mean of all
    /// estimates of the previous round.
    pub control_global: Option<DVector<f64>>,
}

/// Everything a client reports back after its local iterations.
#[derive(Debug, Clone)]
pub struct ClientRoundOutput {
    pub x_final: DVector<f64>,
    pub records: Vec<DisparityRecord>,
    pub gamma_sum: f64,
    /// Sum of the raw FD estimates (SCAFFOLD-II uploads their mean).
    delta_sum: Option<DVector<f64>>,
}

/// Shared, read-only pieces of a run.
pub struct RunContext<'a> {
    pub cfg: &'a FederationConfig,
    pub objective: &'a dyn Objective,
    pub basis: Option<&'a RffBasis>,
}

/// Samples `candidates` points uniformly in the box of half-width `radius`
/// around `center` (clamped to the unit box) and keeps the `select` with the
/// largest gradient uncertainty. Ties keep candidate order.
pub fn active_query_selection<R: Rng + ?Sized>(
    trajectory: &TrajectoryDataset,
    kernel: &KernelParams,
    center: &DVector<f64>,
    cfg: &ActiveQueryConfig,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    let posterior = TrajectoryPosterior::fit(trajectory, kernel, center.len())?;
    let candidates: Vec<DVector<f64>> = (0..cfg.candidates)
        .map(|_| center.map(|c| (c + rng.random_range(-cfg.radius..=cfg.radius)).clamp(0.0, 1.0)))
        .collect();
    let scores = posterior.uncertainty_norms(&candidates)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order.into_iter().take(cfg.select).map(|i| candidates[i].clone()).collect())
}

fn active_queries(
    state: &mut ClientState,
    objective: &dyn Objective,
    center: &DVector<f64>,
    cfg: &FederationConfig,
) -> Result<()> {
    let mut active_rng = state.active_rng.clone();
    let picks = active_query_selection(&state.trajectory, &cfg.kernel, center, &cfg.active, &mut active_rng)?;
    state.active_rng = active_rng;
    for p in &picks {
        state.observe(objective, p)?;
    }
    Ok(())
}

/// `T` local iterations of the configured algorithm from `ctx.x_start`.
pub fn client_local_round(
    state: &mut ClientState,
    ctx: &RoundContext,
    run: &RunContext<'_>,
) -> Result<ClientRoundOutput> {
    let cfg = run.cfg;
    let objective = run.objective;
    let dim = ctx.x_start.len();
    let mut x = ctx.x_start.clone();
    let mut records = Vec::with_capacity(cfg.local_iterations);
    let mut gamma_sum = 0.0;
    let mut delta_sum = matches!(cfg.algorithm, Algorithm::Scaffold2).then(|| DVector::zeros(dim));

    for t in 1..=cfg.local_iterations {
        let estimate = match cfg.algorithm {
            Algorithm::Fzoos => {
                let basis = run
                    .basis
                    .ok_or_else(|| FedZooError::invalid("basis", "FZooS needs an RFF basis"))?;
                state.observe(objective, &x)?;
                if cfg.active.per_iteration {
                    active_queries(state, objective, &x, cfg)?;
                }
                let posterior = TrajectoryPosterior::fit(&state.trajectory, &cfg.kernel, dim)?;
                let local = posterior.mean_gradient(&x)?;
                let gamma = if ctx.weights_global.is_some() && state.weights_prev.is_some() {
                    cfg.gamma.gamma_value(ctx.round, t)?
                } else {
                    0.0
                };
                fzoos_estimate(
                    &local,
                    basis,
                    ctx.weights_global.as_ref(),
                    state.weights_prev.as_ref(),
                    &x,
                    gamma,
                )?
            }
            Algorithm::FedZo => UnifiedEstimate::uncorrected(state.fd_estimate(objective, &x, &cfg.fd)?),
            Algorithm::FedProx => {
                let delta = state.fd_estimate(objective, &x, &cfg.fd)?;
                fedprox_estimate(&delta, &x, &ctx.x_start, cfg.prox_gamma)?
            }
            Algorithm::Scaffold1 => {
                let delta = state.fd_estimate(objective, &x, &cfg.fd)?;
                let global = ctx
                    .control_global
                    .as_ref()
                    .ok_or_else(|| FedZooError::invalid("control_global", "SCAFFOLD-I needs anchor estimates"))?;
                let own = state
                    .anchor_gradient
                    .as_ref()
                    .ok_or_else(|| FedZooError::invalid("anchor_gradient", "missing own anchor estimate"))?;
                control_variate_estimate(&delta, global, own)?
            }
            Algorithm::Scaffold2 => {
                let delta = state.fd_estimate(objective, &x, &cfg.fd)?;
                if let Some(sum) = delta_sum.as_mut() {
                    *sum += &delta;
                }
                match (&ctx.control_global, &state.mean_gradient_prev) {
                    (Some(global), Some(own)) => control_variate_estimate(&delta, global, own)?,
                    _ => UnifiedEstimate::uncorrected(delta),
                }
            }
        };

        let g_hat = estimate.combine();
        gamma_sum += estimate.gamma;
        if let Some(grad_f) = objective.global_gradient(&x) {
            records.push(DisparityRecord {
                round: ctx.round,
                iteration: t,
                client: state.id,
                xi: gradient_disparity(&g_hat, &grad_f)?,
                cosine: cosine_similarity(&g_hat, &grad_f).ok(),
                gamma_used: estimate.gamma,
                gamma_star: optimal_gamma(&grad_f, &estimate.base, &estimate.correction).ok(),
            });
        }
        state.stepper.step(&mut x, &g_hat, cfg.learning_rate);
        x.apply(|v| *v = v.clamp(0.0, 1.0));
    }

    Ok(ClientRoundOutput {
        x_final: x,
        records,
        gamma_sum,
        delta_sum,
    })
}

/// Arithmetic means of the client iterates and, when present, weight vectors,
/// accumulated in client-index order.
pub fn server_aggregate(
    iterates: &[DVector<f64>],
    weights: Option<&[WeightVector]>,
) -> Result<(DVector<f64>, Option<WeightVector>)> {
    let first = iterates
        .first()
        .ok_or_else(|| FedZooError::invalid("clients", "need at least one iterate"))?;
    for x in iterates {
        check_dim("client iterate", first.len(), x.len())?;
    }
    let refs: Vec<&DVector<f64>> = iterates.iter().collect();
    let x = ordered_mean(&refs);
    let w = match weights {
        Some(ws) => {
            check_dim("client weight vectors", iterates.len(), ws.len())?;
            Some(aggregate_weight_vectors(ws)?)
        }
        None => None,
    };
    Ok((x, w))
}

/// One row of a trace: the state after round `round` (row 0 is the start).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub x: DVector<f64>,
    pub f_value: f64,
    pub conv_error: Option<f64>,
    pub cum_queries: u64,
    pub cum_scalars_tx: u64,
    pub mean_disparity: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    /// Per-iteration records, kept when `record_iterations` is set.
    pub iterations: Vec<DisparityRecord>,
    /// Total queries issued by each client.
    pub client_queries: Vec<u64>,
}

impl OptimizationTrace {
    pub fn final_record(&self) -> &RoundRecord {
        self.rounds.last().expect("trace always holds the round-0 row")
    }

    /// First round whose convergence error is at or below `threshold`.
    pub fn rounds_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.rounds
            .iter()
            .find(|r| r.conv_error.is_some_and(|e| e <= threshold))
            .map(|r| r.round)
    }
}

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;

#[cfg(not(feature = "parallel"))]
type Pool = ();

#[cfg(feature = "parallel")]
fn build_pool(workers: usize) -> Result<Option<Pool>> {
    if workers == 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| FedZooError::config("workers", e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn build_pool(_workers: usize) -> Result<Option<Pool>> {
    Ok(None)
}

/// Runs `f` on every client, in parallel when a pool is available. Results
/// come back in client order and errors carry the round and client.
fn for_each_client<T, F>(pool: Option<&Pool>, states: &mut [ClientState], round: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync + Send,
{
    let wrapped = |s: &mut ClientState| {
        let id = s.id;
        f(s).map_err(|e| e.in_client(round, id))
    };
    #[cfg(feature = "parallel")]
    if let Some(pool) = pool {
        use rayon::prelude::*;
        return pool.install(|| states.par_iter_mut().map(wrapped).collect());
    }
    #[cfg(not(feature = "parallel"))]
    let _ = pool;
    states.iter_mut().map(wrapped).collect()
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs `R` rounds from `x0` and returns the full trace.
pub fn run_federated_optimization(
    cfg: &FederationConfig,
    objective: &dyn Objective,
    x0: &DVector<f64>,
) -> Result<OptimizationTrace> {
    cfg.validate()?;
    let dim = objective.dim();
    let n = objective.client_count();
    check_dim("initial point", dim, x0.len())?;
    if let Some((i, v)) = x0.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(FedZooError::OutOfDomain { index: i, value: *v });
    }

    let basis = match cfg.algorithm {
        Algorithm::Fzoos => Some(RffBasis::sample(cfg.features, dim, &cfg.kernel, cfg.master_seed)?),
        _ => None,
    };
    let run = RunContext {
        cfg,
        objective,
        basis: basis.as_ref(),
    };
    let pool = build_pool(cfg.workers)?;
    let mut states = (0..n)
        .map(|i| ClientState::new(i, dim, cfg))
        .collect::<Result<Vec<_>>>()?;

    let optimum = objective.optimum_value();
    let report = |round: usize, x: &DVector<f64>, cum_q: u64, cum_tx: u64, rec: &[DisparityRecord], gamma: Option<f64>| {
        let f_value = objective.global_value(x)?;
        let xis: Vec<f64> = rec.iter().map(|r| r.xi).collect();
        let cosines: Vec<f64> = rec.iter().filter_map(|r| r.cosine).collect();
        Ok::<_, FedZooError>(RoundRecord {
            round,
            x: x.clone(),
            f_value,
            conv_error: optimum.map(|o| f_value - o),
            cum_queries: cum_q,
            cum_scalars_tx: cum_tx,
            mean_disparity: mean_of(&xis),
            mean_cosine: mean_of(&cosines),
            gamma,
        })
    };

    let mut x = x0.clone();
    let mut rounds = vec![report(0, &x, 0, 0, &[], None)?];
    let mut iterations = Vec::new();
    let mut weights_global: Option<WeightVector> = None;
    let mut control_global: Option<DVector<f64>> = None;
    let tx_per_round = cfg.scalars_per_client_round(dim) * n as u64;
    let mut cum_tx = 0;

    for r in 1..=cfg.rounds {
        if cfg.algorithm == Algorithm::Scaffold1 {
            let anchors = for_each_client(pool.as_ref(), &mut states, r, |s| {
                let a = s.fd_estimate(objective, &x, &cfg.fd)?;
                s.anchor_gradient = Some(a.clone());
                Ok(a)
            })?;
            let refs: Vec<&DVector<f64>> = anchors.iter().collect();
            control_global = Some(ordered_mean(&refs));
        }

        let ctx = RoundContext {
            round: r,
            x_start: x.clone(),
            weights_global: weights_global.clone(),
            control_global: control_global.clone(),
        };
        let outputs = for_each_client(pool.as_ref(), &mut states, r, |s| client_local_round(s, &ctx, &run))?;

        let finals: Vec<DVector<f64>> = outputs.iter().map(|o| o.x_final.clone()).collect();
        let (x_new, _) = server_aggregate(&finals, None)?;
        x = x_new;

        match cfg.algorithm {
            Algorithm::Fzoos => {
                let basis = basis.as_ref().expect("basis sampled for FZooS");
                let local = for_each_client(pool.as_ref(), &mut states, r, |s| {
                    if cfg.active.post_aggregation {
                        active_queries(s, objective, &x, cfg)?;
                    }
                    let w = compute_weight_vector(&s.trajectory, basis)?;
                    s.weights_prev = Some(w.clone());
                    Ok(w)
                })?;
                weights_global = Some(aggregate_weight_vectors(&local)?);
            }
            Algorithm::Scaffold2 => {
                let t = cfg.local_iterations as f64;
                let means: Vec<DVector<f64>> = outputs
                    .iter()
                    .map(|o| o.delta_sum.as_ref().expect("SCAFFOLD-II accumulates estimates") / t)
                    .collect();
                for (s, m) in states.iter_mut().zip(&means) {
                    s.mean_gradient_prev = Some(m.clone());
                }
                let refs: Vec<&DVector<f64>> = means.iter().collect();
                control_global = Some(ordered_mean(&refs));
            }
            _ => {}
        }

        cum_tx += tx_per_round;
        let cum_q: u64 = states.iter().map(|s| s.queries).sum();
        let recs: Vec<DisparityRecord> = outputs.iter().flat_map(|o| o.records.iter().copied()).collect();
        let gamma_total: f64 = outputs.iter().map(|o| o.gamma_sum).sum();
        let gamma = Some(gamma_total / (n * cfg.local_iterations) as f64);
        rounds.push(report(r, &x, cum_q, cum_tx, &recs, gamma)?);
        if cfg.record_iterations {
            iterations.extend(recs);
        }
    }

    Ok(OptimizationTrace {
        algorithm: cfg.algorithm,
        seed: cfg.master_seed,
        rounds,
        iterations,
        client_queries: states.iter().map(|s| s.queries).collect(),
    })
}
