//! Per-iteration gradient estimates.
//!
//! Every estimator has the form `ĝ = g + γ · c`, where `g` estimates the
//! local gradient and `c` is a correction vector meant to steer the local
//! update towards the global gradient. [`UnifiedEstimate`] keeps the three
//! parts separate so diagnostics can reason about them.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FedZooError, Result};
use crate::kernel::RffBasis;
use crate::surrogate::{surrogate_gradients_from_weights, WeightVector};

/// Forward-difference parameters: smoothing `λ` and direction count `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdParams {
    pub smoothing: f64,
    pub directions: usize,
}

impl FdParams {
    pub fn new(smoothing: f64, directions: usize) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(FedZooError::invalid("fd_smoothing", format!("must be positive, got {smoothing}")));
        }
        if directions == 0 {
            return Err(FedZooError::invalid("fd_directions", "must be at least 1"));
        }
        Ok(FdParams { smoothing, directions })
    }

    /// Evaluations consumed by one estimate: `Q` probes plus the base point.
    pub fn queries_per_estimate(&self) -> usize {
        self.directions + 1
    }
}

pub fn sample_directions<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(rng)))
        .collect()
}

/// `Δ(x) = (1/Q) Σ_q (y(x + λu_q) - y(x)) / λ · u_q` with `u_q ~ N(0, I)`.
///
/// `y(x)` is queried once and shared by all directions, so the estimate
/// costs `Q + 1` evaluations.
pub fn fd_gradient<F, R>(eval: F, x: &DVector<f64>, params: &FdParams, rng: &mut R) -> Result<(DVector<f64>, usize)>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
    R: Rng + ?Sized,
{
    let dirs = sample_directions(x.len(), params.directions, rng);
    fd_gradient_with_directions(eval, x, params.smoothing, &dirs)
}

pub fn fd_gradient_with_directions<F>(
    mut eval: F,
    x: &DVector<f64>,
    smoothing: f64,
    directions: &[DVector<f64>],
) -> Result<(DVector<f64>, usize)>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    if directions.is_empty() {
        return Err(FedZooError::invalid("fd_directions", "must be at least 1"));
    }
    let base = eval(x)?;
    let mut acc = DVector::zeros(x.len());
    for u in directions {
        check_dim("fd direction", x.len(), u.len())?;
        let probe = x + u * smoothing;
        let diff = (eval(&probe)? - base) / smoothing;
        acc.axpy(diff, u, 1.0);
    }
    Ok((acc / directions.len() as f64, directions.len() + 1))
}

/// The three parts of `ĝ = g + γ · c`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedEstimate {
    pub base: DVector<f64>,
    pub correction: DVector<f64>,
    pub gamma: f64,
}

impl UnifiedEstimate {
    pub fn uncorrected(base: DVector<f64>) -> Self {
        let correction = DVector::zeros(base.len());
        UnifiedEstimate {
            base,
            correction,
            gamma: 0.0,
        }
    }

    pub fn combine(&self) -> DVector<f64> {
        &self.base + &self.correction * self.gamma
    }
}

/// FedZO uses the raw forward-difference estimate.
pub fn fedzo_gradient(delta: &DVector<f64>) -> DVector<f64> {
    delta.clone()
}

/// FedProx: `Δ + γ (x - x_anchor)`, the anchor being the round-start iterate.
pub fn fedprox_gradient(
    delta: &DVector<f64>,
    x: &DVector<f64>,
    anchor: &DVector<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    Ok(fedprox_estimate(delta, x, anchor, gamma)?.combine())
}

pub fn fedprox_estimate(
    delta: &DVector<f64>,
    x: &DVector<f64>,
    anchor: &DVector<f64>,
    gamma: f64,
) -> Result<UnifiedEstimate> {
    check_dim("fedprox iterate", delta.len(), x.len())?;
    check_dim("fedprox anchor", delta.len(), anchor.len())?;
    Ok(UnifiedEstimate {
        base: delta.clone(),
        correction: x - anchor,
        gamma,
    })
}

/// SCAFFOLD with anchor-point control variates:
/// `Δ + (mean_j Δ_j(x_{r-1}) - Δ_i(x_{r-1}))`.
pub fn scaffold1_gradient(
    delta: &DVector<f64>,
    global_anchor: &DVector<f64>,
    local_anchor: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(control_variate_estimate(delta, global_anchor, local_anchor)?.combine())
}

/// SCAFFOLD with trajectory-mean control variates from the previous round:
/// `Δ + (mean over all clients and iterations - own mean)`.
pub fn scaffold2_gradient(
    delta: &DVector<f64>,
    mean_prev_round_all: &DVector<f64>,
    mean_prev_round_self: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(control_variate_estimate(delta, mean_prev_round_all, mean_prev_round_self)?.combine())
}

pub fn control_variate_estimate(
    delta: &DVector<f64>,
    global: &DVector<f64>,
    local: &DVector<f64>,
) -> Result<UnifiedEstimate> {
    check_dim("control variate", delta.len(), global.len())?;
    check_dim("control variate", delta.len(), local.len())?;
    Ok(UnifiedEstimate {
        base: delta.clone(),
        correction: global - local,
        gamma: 1.0,
    })
}

/// FZooS: `∇μ(x) + γ (∇μ̂_{r-1}(x) - ∇μ̂^{(i)}_{r-1,T}(x))`.
///
/// Without previous-round weight vectors (round 1) the correction is skipped
/// and `γ` is reported as zero.
pub fn fzoos_gradient(
    local_exact_grad: &DVector<f64>,
    basis: &RffBasis,
    w_global_prev: Option<&WeightVector>,
    w_self_prev: Option<&WeightVector>,
    x: &DVector<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    Ok(fzoos_estimate(local_exact_grad, basis, w_global_prev, w_self_prev, x, gamma)?.combine())
}

pub fn fzoos_estimate(
    local_exact_grad: &DVector<f64>,
    basis: &RffBasis,
    w_global_prev: Option<&WeightVector>,
    w_self_prev: Option<&WeightVector>,
    x: &DVector<f64>,
    gamma: f64,
) -> Result<UnifiedEstimate> {
    check_dim("fzoos local gradient", x.len(), local_exact_grad.len())?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(FedZooError::invalid("gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    match (w_global_prev, w_self_prev) {
        (Some(global), Some(own)) => {
            if global.basis_seed != own.basis_seed {
                return Err(FedZooError::BasisMismatch {
                    left: global.basis_seed,
                    right: own.basis_seed,
                });
            }
            let mut grads = surrogate_gradients_from_weights(basis, &[global, own], x)?;
            let own_grad = grads.pop().expect("two gradients");
            let correction = grads.pop().expect("two gradients") - own_grad;
            Ok(UnifiedEstimate {
                base: local_exact_grad.clone(),
                correction,
                gamma,
            })
        }
        _ => Ok(UnifiedEstimate::uncorrected(local_exact_grad.clone())),
    }
}

/// Parameters of the bound-minimizing correction length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Heterogeneity bound `G`.
    pub heterogeneity: f64,
    pub omega: f64,
    pub kappa: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub clients: usize,
    pub local_iterations: usize,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(FedZooError::config(name, reason));
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return bad("theory_g", format!("must be >= 0, got {}", self.heterogeneity));
        }
        if !(self.omega > 0.0) {
            return bad("theory_omega", format!("must be > 0, got {}", self.omega));
        }
        if !(self.kappa > 0.0) {
            return bad("theory_kappa", format!("must be > 0, got {}", self.kappa));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("theory_rho", format!("must lie in (0, 1], got {}", self.rho));
        }
        if !(self.epsilon >= 0.0) {
            return bad("theory_epsilon", format!("must be >= 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// How the correction length `γ_{r,t-1}` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSchedule {
    Constant(f64),
    /// `γ = 1/t`, decaying within each round.
    InverseIteration,
    /// `γ = G / (G + 2ωκρ^{(r-1)T} + 2Nε)`.
    Theoretical(TheoryParams),
}

impl GammaSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            GammaSchedule::Constant(c) if !(0.0..=1.0).contains(c) => Err(FedZooError::config(
                "gamma_constant",
                format!("must lie in [0, 1], got {c}"),
            )),
            GammaSchedule::Theoretical(p) => p.validate(),
            _ => Ok(()),
        }
    }

    /// `γ` for round `r ≥ 1` and local iteration `t ≥ 1`, clamped to `[0, 1]`.
    pub fn gamma_value(&self, round: usize, iteration: usize) -> Result<f64> {
        if round == 0 || iteration == 0 {
            return Err(FedZooError::invalid("gamma", "round and iteration are 1-based"));
        }
        self.validate()?;
        let g = match *self {
            GammaSchedule::Constant(c) => c,
            GammaSchedule::InverseIteration => 1.0 / iteration as f64,
            GammaSchedule::Theoretical(p) => {
                let exponent = ((round - 1) * p.local_iterations) as f64;
                let denom = p.heterogeneity
                    + 2.0 * p.omega * p.kappa * p.rho.powf(exponent)
                    + 2.0 * p.clients as f64 * p.epsilon;
                if p.heterogeneity == 0.0 {
                    0.0
                } else {
                    p.heterogeneity / denom
                }
            }
        };
        Ok(g.clamp(0.0, 1.0))
    }
}

pub fn gamma_value(schedule: &GammaSchedule, round: usize, iteration: usize) -> Result<f64> {
    schedule.gamma_value(round, iteration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    #[default]
    Gd,
    Adam,
}

/// Per-client optimizer state. Adam moments persist across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Stepper {
    rule: StepRule,
    m: DVector<f64>,
    v: DVector<f64>,
    steps: i32,
}

impl Stepper {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(rule: StepRule, dim: usize) -> Self {
        Stepper {
            rule,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            steps: 0,
        }
    }

    /// One descent step `x ← x - η · direction(ĝ)`.
    pub fn step(&mut self, x: &mut DVector<f64>, grad: &DVector<f64>, learning_rate: f64) {
        match self.rule {
            StepRule::Gd => x.axpy(-learning_rate, grad, 1.0),
            StepRule::Adam => {
                self.steps += 1;
                let b1 = Self::BETA1;
                let b2 = Self::BETA2;
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                for i in 0..x.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    x[i] -= learning_rate * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelParams;
    use crate::surrogate::{aggregate_weight_vectors, posterior_gradient, surrogate_gradient_from_weights, TrajectoryDataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn fd_params_validation() {
        assert!(FdParams::new(0.0, 3).is_err());
        assert!(FdParams::new(0.1, 0).is_err());
        assert_eq!(FdParams::new(0.1, 20).unwrap().queries_per_estimate(), 21);
    }

    #[test]
    fn fd_of_constant_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in [1, 7, 50] {
            let p = FdParams::new(0.3, q).unwrap();
            let (g, used) = fd_gradient(|_| Ok(4.2), &v(&[0.1, 0.5, 0.9]), &p, &mut rng).unwrap();
            assert_eq!(g, DVector::zeros(3));
            assert_eq!(used, q + 1);
        }
    }

    #[test]
    fn fd_forward_difference_on_square() {
        let (g, used) =
            fd_gradient_with_directions(|x| Ok(x[0] * x[0]), &v(&[1.0]), 0.01, &[v(&[1.0])]).unwrap();
        assert!((g[0] - 2.01).abs() < 1e-12);
        assert_eq!(used, 2);
    }

    #[test]
    fn fd_recovers_linear_gradient() {
        let a = v(&[1.0, -2.0, 0.5, 3.0, -1.0]);
        let p = FdParams::new(0.01, 2000).unwrap();
        let mut errs: Vec<f64> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (g, _) = fd_gradient(|x| Ok(a.dot(x)), &v(&[0.2; 5]), &p, &mut rng).unwrap();
                (g - &a).norm()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = (errs[9] + errs[10]) / 2.0;
        assert!(median < 0.1 * a.norm(), "{median}");
    }

    #[test]
    fn fd_propagates_evaluator_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FdParams::new(0.1, 3).unwrap();
        let res = fd_gradient(|_| Err(FedZooError::Objective("boom".into())), &v(&[0.0]), &p, &mut rng);
        assert!(matches!(res, Err(FedZooError::Objective(_))));
    }

    #[test]
    fn fedzo_is_identity_and_replays_fd() {
        assert_eq!(fedzo_gradient(&v(&[1.0, -3.0])), v(&[1.0, -3.0]));
        assert_eq!(fedzo_gradient(&DVector::zeros(2)), DVector::zeros(2));
        let p = FdParams::new(0.05, 10).unwrap();
        let f = |x: &DVector<f64>| Ok(x.norm_squared() + x[0]);
        let x = v(&[0.3, 0.7]);
        let (a, _) = fd_gradient(f, &x, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (b, _) = fd_gradient(f, &x, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(fedzo_gradient(&a), b);
    }

    #[test]
    fn fedprox_cases() {
        let d = v(&[1.0, 0.0]);
        assert_eq!(fedprox_gradient(&d, &v(&[0.4, 0.4]), &v(&[0.4, 0.4]), 0.7).unwrap(), d);
        assert_eq!(fedprox_gradient(&d, &v(&[0.9, 0.1]), &v(&[0.4, 0.4]), 0.0).unwrap(), fedzo_gradient(&d));
        assert_eq!(fedprox_gradient(&d, &v(&[1.0, 1.0]), &v(&[0.0, 1.0]), 0.5).unwrap(), v(&[1.5, 0.0]));
        assert!(fedprox_gradient(&d, &v(&[1.0]), &v(&[0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn scaffold_cases() {
        let d = v(&[1.0, 1.0]);
        assert_eq!(scaffold1_gradient(&d, &v(&[0.0, 2.0]), &v(&[1.0, 0.0])).unwrap(), v(&[0.0, 3.0]));
        let anchor = v(&[0.3, -0.8]);
        assert_eq!(scaffold1_gradient(&d, &anchor, &anchor).unwrap(), d);
        assert_eq!(scaffold2_gradient(&v(&[2.0, 0.0]), &v(&[1.0, 1.0]), &v(&[0.0, 1.0])).unwrap(), v(&[3.0, 0.0]));
        let zero = DVector::zeros(2);
        assert_eq!(scaffold2_gradient(&d, &zero, &zero).unwrap(), d);
        assert!(scaffold2_gradient(&d, &v(&[1.0]), &zero).is_err());
    }

    fn fitted_setup() -> (RffBasis, WeightVector, WeightVector, DVector<f64>) {
        let kernel = KernelParams::default();
        let basis = RffBasis::sample(300, 2, &kernel, 3).unwrap();
        let mut a = TrajectoryDataset::new(0.01).unwrap();
        let mut b = TrajectoryDataset::new(0.01).unwrap();
        for i in 0..6 {
            let x = v(&[i as f64 / 5.0, 0.5]);
            a.push(x.clone(), x[0] * x[0]).unwrap();
            b.push(x.clone(), -x[0]).unwrap();
        }
        let wa = crate::surrogate::compute_weight_vector(&a, &basis).unwrap();
        let wb = crate::surrogate::compute_weight_vector(&b, &basis).unwrap();
        let global = aggregate_weight_vectors(&[wa.clone(), wb]).unwrap();
        let local = posterior_gradient(&a, &kernel, &v(&[0.4, 0.5])).unwrap().mean;
        (basis, global, wa, local)
    }

    #[test]
    fn fzoos_cases() {
        let (basis, global, own, local) = fitted_setup();
        let x = v(&[0.4, 0.5]);
        assert_eq!(fzoos_gradient(&local, &basis, Some(&global), Some(&own), &x, 0.0).unwrap(), local);
        assert_eq!(fzoos_gradient(&local, &basis, Some(&own), Some(&own), &x, 0.8).unwrap(), local);
        assert_eq!(fzoos_gradient(&local, &basis, None, None, &x, 1.0).unwrap(), local);
        let corrected = fzoos_gradient(&local, &basis, Some(&global), Some(&own), &x, 1.0).unwrap();
        assert_ne!(corrected, local);
        let foreign = WeightVector {
            basis_seed: 99,
            ..own.clone()
        };
        assert!(fzoos_gradient(&local, &basis, Some(&global), Some(&foreign), &x, 0.5).is_err());
        assert!(fzoos_gradient(&local, &basis, Some(&global), Some(&own), &x, 1.5).is_err());
    }

    #[test]
    fn unified_form_reproduces_each_estimator_bitwise() {
        let delta = v(&[0.3, -1.7]);
        let x = v(&[0.61, 0.22]);
        let anchor = v(&[0.5, 0.5]);
        let e = fedprox_estimate(&delta, &x, &anchor, 0.37).unwrap();
        assert_eq!(e.combine(), fedprox_gradient(&delta, &x, &anchor, 0.37).unwrap());
        assert_eq!(e.combine(), &delta + (&x - &anchor) * 0.37);

        let g = v(&[0.11, 0.9]);
        let l = v(&[-0.4, 0.05]);
        let e = control_variate_estimate(&delta, &g, &l).unwrap();
        assert_eq!(e.combine(), scaffold1_gradient(&delta, &g, &l).unwrap());
        assert_eq!(e.combine(), scaffold2_gradient(&delta, &g, &l).unwrap());
        assert_eq!(e.gamma, 1.0);

        assert_eq!(UnifiedEstimate::uncorrected(delta.clone()).combine(), fedzo_gradient(&delta));

        let (basis, global, own, local) = fitted_setup();
        let e = fzoos_estimate(&local, &basis, Some(&global), Some(&own), &x, 0.25).unwrap();
        let direct = &local
            + (surrogate_gradient_from_weights(&basis, &global, &x).unwrap()
                - surrogate_gradient_from_weights(&basis, &own, &x).unwrap())
                * 0.25;
        assert_eq!(e.combine(), direct);
        assert_eq!(e.combine(), fzoos_gradient(&local, &basis, Some(&global), Some(&own), &x, 0.25).unwrap());
    }

    fn theory(g: f64) -> TheoryParams {
        TheoryParams {
            heterogeneity: g,
            omega: 1.0,
            kappa: 1.0,
            rho: 0.5,
            epsilon: 0.0,
            clients: 2,
            local_iterations: 2,
        }
    }

    #[test]
    fn gamma_schedules() {
        let inv = GammaSchedule::InverseIteration;
        assert_eq!(inv.gamma_value(3, 1).unwrap(), 1.0);
        assert_eq!(inv.gamma_value(3, 4).unwrap(), 0.25);
        assert_eq!(GammaSchedule::Constant(0.3).gamma_value(1, 9).unwrap(), 0.3);
        let zero = GammaSchedule::Theoretical(theory(0.0));
        assert_eq!(zero.gamma_value(4, 2).unwrap(), 0.0);
        let th = GammaSchedule::Theoretical(theory(1.0));
        assert!((th.gamma_value(2, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(inv.gamma_value(0, 1).is_err());
        assert!(inv.gamma_value(1, 0).is_err());
    }

    #[test]
    fn theory_params_are_validated() {
        let mut p = theory(1.0);
        p.rho = 0.0;
        assert!(GammaSchedule::Theoretical(p).gamma_value(1, 1).is_err());
        p.rho = 1.2;
        assert!(GammaSchedule::Theoretical(p).gamma_value(1, 1).is_err());
        let mut p = theory(-1.0);
        assert!(GammaSchedule::Theoretical(p).gamma_value(1, 1).is_err());
        p.heterogeneity = 1.0;
        p.omega = 0.0;
        assert!(GammaSchedule::Theoretical(p).validate().is_err());
        assert!(GammaSchedule::Constant(1.5).validate().is_err());
    }

    #[test]
    fn gamma_stays_in_unit_interval_on_grid() {
        let schedules = [
            GammaSchedule::InverseIteration,
            GammaSchedule::Constant(1.0),
            GammaSchedule::Theoretical(theory(0.7)),
            GammaSchedule::Theoretical(TheoryParams {
                rho: 1.0,
                epsilon: 0.3,
                ..theory(5.0)
            }),
        ];
        for s in &schedules {
            for r in 1..=100 {
                for t in 1..=100 {
                    let g = s.gamma_value(r, t).unwrap();
                    assert!((0.0..=1.0).contains(&g));
                }
            }
        }
    }

    #[test]
    fn gd_step() {
        let mut s = Stepper::new(StepRule::Gd, 2);
        let mut x = v(&[0.5, 0.5]);
        s.step(&mut x, &v(&[20.0, -10.0]), 0.01);
        assert!((x - v(&[0.3, 0.6])).norm() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = Stepper::new(StepRule::Adam, 2);
        let mut x = v(&[0.5, 0.5]);
        s.step(&mut x, &v(&[3.0, -0.001]), 0.01);
        assert!((x[0] - 0.49).abs() < 1e-9);
        assert!((x[1] - 0.51).abs() < 1e-6);
    }
}
