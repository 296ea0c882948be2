//! Objectives seen by the federation: noisy per-client evaluators over the
//! normalized box `[0,1]^d`, plus noiseless oracles used only for reporting.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{check_dim, FedZooError, Result};
use crate::rng::{self, Role, Stream};

/// Inputs farther than this outside the unit box are rejected.
pub const DOMAIN_TOLERANCE: f64 = 1e-9;

/// Affine map between a raw box and the normalized unit box.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMap {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl DomainMap {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("domain bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(FedZooError::invalid("dim", "must be at least 1"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(FedZooError::invalid("domain", "every upper bound must exceed its lower bound"));
        }
        Ok(DomainMap { lower, upper })
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lower), DVector::from_element(dim, upper))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Per-coordinate width `upper - lower`; the chain-rule factor for gradients.
    pub fn scale(&self) -> DVector<f64> {
        &self.upper - &self.lower
    }

    pub fn to_raw(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.lower + self.scale().component_mul(z)
    }

    pub fn to_normalized(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.lower).component_div(&self.scale())
    }

    /// Converts a raw-coordinate gradient into normalized coordinates.
    pub fn gradient_to_normalized(&self, g_raw: &DVector<f64>) -> DVector<f64> {
        g_raw.component_mul(&self.scale())
    }
}

/// Validates `z` against the unit box, clamping tiny excursions.
pub fn check_normalized(z: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = z.clone();
    for (i, v) in out.iter_mut().enumerate() {
        if !v.is_finite() || *v < -DOMAIN_TOLERANCE || *v > 1.0 + DOMAIN_TOLERANCE {
            return Err(FedZooError::OutOfDomain { index: i, value: *v });
        }
        if !(0.0..=1.0).contains(v) {
            log::warn!("clamping coordinate {i} = {v} into [0, 1]");
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Per-client query counters shared by concurrent workers.
#[derive(Debug)]
pub struct QueryLedger {
    counts: Vec<AtomicU64>,
}

impl QueryLedger {
    pub fn new(clients: usize) -> Self {
        QueryLedger {
            counts: (0..clients).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn record(&self, client: usize) {
        self.counts[client].fetch_add(1, Ordering::Relaxed);
    }

    pub fn client(&self, client: usize) -> u64 {
        self.counts[client].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// A federated black-box objective on `[0,1]^d`.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn client_count(&self) -> usize;

    /// Noisy observation `y_i(z) = f_i(z) + ζ`; counts as one query.
    fn evaluate(&self, client: usize, z: &DVector<f64>, rng: &mut Stream) -> Result<f64>;

    /// Noiseless global value `F(z)` for reporting. Not counted as a query.
    fn global_value(&self, z: &DVector<f64>) -> Result<f64>;

    /// Analytic `∇F(z)` in normalized coordinates, when known.
    fn global_gradient(&self, _z: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    /// `min F`, when known.
    fn optimum_value(&self) -> Option<f64> {
        None
    }

    fn queries(&self) -> &QueryLedger;
}

/// Synthetic quadratic clients with Dirichlet-controlled heterogeneity.
///
/// Over raw inputs `x ∈ [-10, 10]^d`,
/// `f_i(x) = (Σ_j [(1 + C(a_ij - 1/N)) x_j² + (1 + C(b_ij - 1/N)) x_j] + 1) / (10d)`
/// where every column `(a_1j, ..., a_Nj)` is drawn from `Dir(1/N, ..., 1/N)`.
/// The client average is `F(x) = (Σ_j [x_j² + x_j] + 1) / (10d)` for any `C`.
#[derive(Debug)]
pub struct QuadraticSuite {
    dim: usize,
    clients: usize,
    heterogeneity: f64,
    noise_std: f64,
    seed: u64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    domain: DomainMap,
    ledger: QueryLedger,
}

pub const QUADRATIC_RAW_BOUND: f64 = 10.0;

fn dirichlet_column<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(1.0 / n as f64, 1.0)
        .map_err(|e| FedZooError::invalid("clients", e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

impl QuadraticSuite {
    pub fn new(dim: usize, clients: usize, heterogeneity: f64, noise_std: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(FedZooError::config("dim", "must be at least 1"));
        }
        if clients == 0 {
            return Err(FedZooError::config("clients", "must be at least 1"));
        }
        if !(heterogeneity >= 0.0 && heterogeneity.is_finite()) {
            return Err(FedZooError::config("heterogeneity", format!("must be >= 0, got {heterogeneity}")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(FedZooError::config("noise_std", format!("must be >= 0, got {noise_std}")));
        }
        let mut rng = rng::stream(seed, Role::Suite, 0);
        let mut a = DMatrix::zeros(clients, dim);
        let mut b = DMatrix::zeros(clients, dim);
        for j in 0..dim {
            for (i, v) in dirichlet_column(clients, &mut rng)?.into_iter().enumerate() {
                a[(i, j)] = v;
            }
            for (i, v) in dirichlet_column(clients, &mut rng)?.into_iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        Ok(QuadraticSuite {
            dim,
            clients,
            heterogeneity,
            noise_std,
            seed,
            a,
            b,
            domain: DomainMap::uniform(dim, -QUADRATIC_RAW_BOUND, QUADRATIC_RAW_BOUND)?,
            ledger: QueryLedger::new(clients),
        })
    }

    pub fn heterogeneity(&self) -> f64 {
        self.heterogeneity
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn domain(&self) -> &DomainMap {
        &self.domain
    }

    /// Dirichlet weights on the quadratic terms, one row per client.
    pub fn quadratic_weights(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Dirichlet weights on the linear terms, one row per client.
    pub fn linear_weights(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn coefficients(&self, client: usize, j: usize) -> (f64, f64) {
        let inv_n = 1.0 / self.clients as f64;
        let c = self.heterogeneity;
        (1.0 + c * (self.a[(client, j)] - inv_n), 1.0 + c * (self.b[(client, j)] - inv_n))
    }

    fn check_client(&self, client: usize) -> Result<()> {
        if client >= self.clients {
            return Err(FedZooError::invalid(
                "client",
                format!("index {client} out of range for {} clients", self.clients),
            ));
        }
        Ok(())
    }

    /// Noiseless `f_i` at a raw input.
    pub fn local_value_raw(&self, client: usize, x: &DVector<f64>) -> Result<f64> {
        self.check_client(client)?;
        check_dim("quadratic input", self.dim, x.len())?;
        let mut s = 1.0;
        for j in 0..self.dim {
            let (p, q) = self.coefficients(client, j);
            s += p * x[j] * x[j] + q * x[j];
        }
        Ok(s / (10.0 * self.dim as f64))
    }

    /// Closed-form `F` at a raw input.
    pub fn global_value_raw(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("quadratic input", self.dim, x.len())?;
        let s: f64 = x.iter().map(|v| v * v + v).sum::<f64>() + 1.0;
        Ok(s / (10.0 * self.dim as f64))
    }

    /// Noiseless `f_i` at a normalized input, without touching the ledger.
    pub fn local_value(&self, client: usize, z: &DVector<f64>) -> Result<f64> {
        let z = check_normalized(z)?;
        self.local_value_raw(client, &self.domain.to_raw(&z))
    }

    /// `∇f_i` in normalized coordinates.
    pub fn local_gradient(&self, client: usize, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_client(client)?;
        check_dim("quadratic input", self.dim, z.len())?;
        let x = self.domain.to_raw(z);
        let denom = 10.0 * self.dim as f64;
        let raw = DVector::from_fn(self.dim, |j, _| {
            let (p, q) = self.coefficients(client, j);
            (2.0 * p * x[j] + q) / denom
        });
        Ok(self.domain.gradient_to_normalized(&raw))
    }

    /// `∇F` in normalized coordinates.
    pub fn true_global_gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("quadratic input", self.dim, z.len())?;
        let x = self.domain.to_raw(z);
        let denom = 10.0 * self.dim as f64;
        let raw = x.map(|v| (2.0 * v + 1.0) / denom);
        Ok(self.domain.gradient_to_normalized(&raw))
    }

    /// Normalized image of the raw minimizer `x_j = -1/2`.
    pub fn minimizer(&self) -> DVector<f64> {
        self.domain.to_normalized(&DVector::from_element(self.dim, -0.5))
    }

    /// `F* = (1 - d/4) / (10d)`.
    pub fn minimum(&self) -> f64 {
        let d = self.dim as f64;
        (1.0 - 0.25 * d) / (10.0 * d)
    }

    /// Empirical heterogeneity `max_z (1/N) Σ_i ‖∇f_i(z) - ∇F(z)‖²` over
    /// `samples` uniform points of the unit box.
    pub fn heterogeneity_g<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Result<f64> {
        if samples == 0 {
            return Err(FedZooError::invalid("sample_count", "must be at least 1"));
        }
        let mut best = 0.0_f64;
        for _ in 0..samples {
            let z = DVector::from_fn(self.dim, |_, _| rng.random::<f64>());
            let global = self.true_global_gradient(&z)?;
            let mut acc = 0.0;
            for i in 0..self.clients {
                acc += (self.local_gradient(i, &z)? - &global).norm_squared();
            }
            best = best.max(acc / self.clients as f64);
        }
        Ok(best)
    }

    /// Writes the coefficient matrices as `client,dim,a,b` rows.
    pub fn write_coefficients_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["client", "dim", "a", "b"])?;
        for i in 0..self.clients {
            for j in 0..self.dim {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    self.a[(i, j)].to_string(),
                    self.b[(i, j)].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn gaussian_noise(std: f64, rng: &mut Stream) -> Result<f64> {
    if std == 0.0 {
        return Ok(0.0);
    }
    let n = Normal::new(0.0, std).map_err(|e| FedZooError::invalid("noise_std", e.to_string()))?;
    Ok(n.sample(rng))
}

impl Objective for QuadraticSuite {
    fn dim(&self) -> usize {
        self.dim
    }

    fn client_count(&self) -> usize {
        self.clients
    }

    fn evaluate(&self, client: usize, z: &DVector<f64>, rng: &mut Stream) -> Result<f64> {
        check_dim("objective input", self.dim, z.len())?;
        let value = self.local_value(client, z)?;
        self.ledger.record(client);
        Ok(value + gaussian_noise(self.noise_std, rng)?)
    }

    fn global_value(&self, z: &DVector<f64>) -> Result<f64> {
        check_dim("objective input", self.dim, z.len())?;
        let z = check_normalized(z)?;
        self.global_value_raw(&self.domain.to_raw(&z))
    }

    fn global_gradient(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        self.true_global_gradient(z).ok()
    }

    fn optimum_value(&self) -> Option<f64> {
        Some(self.minimum())
    }

    fn queries(&self) -> &QueryLedger {
        &self.ledger
    }
}

/// Raw-coordinate evaluator for a single client.
pub type LocalFn = Arc<dyn Fn(&DVector<f64>) -> Result<f64> + Send + Sync>;

/// User-supplied per-client functions on a declared raw box.
///
/// `F` is reported as the mean of the noiseless client functions; no gradient
/// oracle is available, so disparity diagnostics are skipped.
pub struct BlackBoxObjective {
    domain: DomainMap,
    locals: Vec<LocalFn>,
    noise_std: f64,
    optimum: Option<f64>,
    ledger: QueryLedger,
}

impl BlackBoxObjective {
    pub fn new(domain: DomainMap, locals: Vec<LocalFn>, noise_std: f64) -> Result<Self> {
        if locals.is_empty() {
            return Err(FedZooError::config("clients", "must be at least 1"));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(FedZooError::config("noise_std", format!("must be >= 0, got {noise_std}")));
        }
        let ledger = QueryLedger::new(locals.len());
        Ok(BlackBoxObjective {
            domain,
            locals,
            noise_std,
            optimum: None,
            ledger,
        })
    }

    pub fn with_optimum(mut self, value: f64) -> Self {
        self.optimum = Some(value);
        self
    }
}

impl std::fmt::Debug for BlackBoxObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxObjective")
            .field("domain", &self.domain)
            .field("clients", &self.locals.len())
            .field("noise_std", &self.noise_std)
            .finish()
    }
}

impl Objective for BlackBoxObjective {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn client_count(&self) -> usize {
        self.locals.len()
    }

    fn evaluate(&self, client: usize, z: &DVector<f64>, rng: &mut Stream) -> Result<f64> {
        check_dim("objective input", self.dim(), z.len())?;
        let f = self.locals.get(client).ok_or_else(|| {
            FedZooError::invalid("client", format!("index {client} out of range"))
        })?;
        let z = check_normalized(z)?;
        let value = f(&self.domain.to_raw(&z))?;
        self.ledger.record(client);
        Ok(value + gaussian_noise(self.noise_std, rng)?)
    }

    fn global_value(&self, z: &DVector<f64>) -> Result<f64> {
        check_dim("objective input", self.dim(), z.len())?;
        let x = self.domain.to_raw(&check_normalized(z)?);
        let mut total = 0.0;
        for f in &self.locals {
            total += f(&x)?;
        }
        Ok(total / self.locals.len() as f64)
    }

    fn optimum_value(&self) -> Option<f64> {
        self.optimum
    }

    fn queries(&self) -> &QueryLedger {
        &self.ledger
    }
}
