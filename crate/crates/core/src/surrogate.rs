//! Trajectory-conditioned gradient surrogates.
//!
//! A client's optimization trajectory (every point it has queried together
//! with the noisy value it observed) conditions a zero-mean GP prior on its
//! local function. The gradient of that GP is again a GP whose mean serves as
//! a query-free gradient estimate and whose covariance measures how much the
//! estimate can be trusted. Random Fourier features compress the mean into an
//! `M`-vector that can be shipped to the server and averaged.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, FedZooError, Result};
use crate::kernel::{Kernel, RffBasis};
use crate::linalg::{cholesky_with_jitter, ordered_mean, symmetric_spectral_norm};

/// Append-only history of `(input, noisy value)` pairs for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    inputs: Vec<DVector<f64>>,
    values: Vec<f64>,
    noise_variance: f64,
    /// Only the most recent `window` points condition the surrogate.
    window: Option<usize>,
}

impl TrajectoryDataset {
    pub fn new(noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(FedZooError::invalid(
                "gp_noise_variance",
                format!("must be positive, got {noise_variance}"),
            ));
        }
        Ok(TrajectoryDataset {
            inputs: Vec::new(),
            values: Vec::new(),
            noise_variance,
            window: None,
        })
    }

    pub fn with_window(mut self, window: Option<usize>) -> Result<Self> {
        if window == Some(0) {
            return Err(FedZooError::invalid("trajectory_window", "window must hold at least one point"));
        }
        self.window = window;
        Ok(self)
    }

    pub fn push(&mut self, x: DVector<f64>, y: f64) -> Result<()> {
        if let Some(first) = self.inputs.first() {
            check_dim("trajectory input", first.len(), x.len())?;
        }
        self.inputs.push(x);
        self.values.push(y);
        Ok(())
    }

    /// Total number of recorded observations.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    fn active_start(&self) -> usize {
        match self.window {
            Some(w) if self.inputs.len() > w => self.inputs.len() - w,
            _ => 0,
        }
    }

    /// Inputs that condition the surrogate (the trailing window).
    pub fn active_inputs(&self) -> &[DVector<f64>] {
        &self.inputs[self.active_start()..]
    }

    pub fn active_values(&self) -> &[f64] {
        &self.values[self.active_start()..]
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Active inputs as a `d × n` matrix.
    pub fn input_matrix(&self, dim: usize) -> DMatrix<f64> {
        let active = self.active_inputs();
        DMatrix::from_fn(dim, active.len(), |r, c| active[c][r])
    }
}

/// Posterior of `∇f` at a single query point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub query_point: DVector<f64>,
}

/// Spectral norm of the gradient covariance.
pub fn uncertainty_norm(posterior: &GradientPosterior) -> f64 {
    symmetric_spectral_norm(&posterior.covariance)
}

/// A fitted exact GP posterior over one trajectory; the Gram matrix is
/// factorized once and reused for any number of query points.
pub struct TrajectoryPosterior<'a, K: Kernel> {
    kernel: &'a K,
    points: &'a [DVector<f64>],
    dim: usize,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl<'a, K: Kernel> TrajectoryPosterior<'a, K> {
    pub fn fit(traj: &'a TrajectoryDataset, kernel: &'a K, dim: usize) -> Result<Self> {
        let points = traj.active_inputs();
        if let Some(p) = points.first() {
            check_dim("trajectory input", dim, p.len())?;
        }
        let n = points.len();
        if n == 0 {
            return Ok(TrajectoryPosterior {
                kernel,
                points,
                dim,
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = kernel.value(points[i].as_slice(), points[j].as_slice());
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
            gram[(i, i)] += traj.noise_variance();
        }
        let chol = cholesky_with_jitter(gram, "trajectory Gram matrix")?;
        let y = DVector::from_row_slice(traj.active_values());
        let alpha = chol.solve(&y);
        Ok(TrajectoryPosterior {
            kernel,
            points,
            dim,
            chol: Some(chol),
            alpha,
        })
    }

    pub fn observation_count(&self) -> usize {
        self.points.len()
    }

    /// `∂_x k(x)`: `n × d`, row `τ` is `∂_x k(x, x_τ)ᵀ`.
    fn kernel_gradients(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.points.len();
        let mut g = DMatrix::zeros(n, self.dim);
        let mut row = vec![0.0; self.dim];
        for (tau, p) in self.points.iter().enumerate() {
            self.kernel.grad_first_into(x.as_slice(), p.as_slice(), &mut row);
            for (j, v) in row.iter().enumerate() {
                g[(tau, j)] = *v;
            }
        }
        g
    }

    /// Posterior mean of `f`, `k(x)ᵀ (K + σ²I)⁻¹ y`.
    pub fn mean_value(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("query point", self.dim, x.len())?;
        Ok(self
            .points
            .iter()
            .zip(self.alpha.iter())
            .map(|(p, a)| self.kernel.value(x.as_slice(), p.as_slice()) * a)
            .sum())
    }

    /// `∇μ(x) = ∂_x k(x)ᵀ (K + σ²I)⁻¹ y`.
    pub fn mean_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("query point", self.dim, x.len())?;
        if self.points.is_empty() {
            return Ok(DVector::zeros(self.dim));
        }
        Ok(self.kernel_gradients(x).tr_mul(&self.alpha))
    }

    /// `∂σ²(x) = ∂∂k(x, x) - ∂_x k(x)ᵀ (K + σ²I)⁻¹ ∂_x k(x)`.
    pub fn gradient_covariance(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("query point", self.dim, x.len())?;
        let prior = self.kernel.prior_gradient_covariance(self.dim);
        let Some(chol) = &self.chol else {
            return Ok(prior);
        };
        let g = self.kernel_gradients(x);
        let mut half = g.clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut half);
        let reduction = half.tr_mul(&half);
        let cov = prior - reduction;
        Ok((&cov + cov.transpose()) * 0.5)
    }

    pub fn posterior(&self, x: &DVector<f64>) -> Result<GradientPosterior> {
        Ok(GradientPosterior {
            mean: self.mean_gradient(x)?,
            covariance: self.gradient_covariance(x)?,
            query_point: x.clone(),
        })
    }

    /// Uncertainty norms at many candidates, sharing one triangular inverse
    /// and one matrix product across the whole batch.
    pub fn uncertainty_norms(&self, candidates: &[DVector<f64>]) -> Result<Vec<f64>> {
        for c in candidates {
            check_dim("candidate point", self.dim, c.len())?;
        }
        let prior = self.kernel.prior_gradient_covariance(self.dim);
        let Some(chol) = &self.chol else {
            let norm = symmetric_spectral_norm(&prior);
            return Ok(vec![norm; candidates.len()]);
        };
        let n = self.points.len();
        let d = self.dim;
        let mut linv = DMatrix::identity(n, n);
        chol.l_dirty().solve_lower_triangular_mut(&mut linv);
        for i in 0..n {
            for j in (i + 1)..n {
                linv[(i, j)] = 0.0;
            }
        }

        let mut stacked = DMatrix::zeros(n, d * candidates.len());
        for (c, x) in candidates.iter().enumerate() {
            let g = self.kernel_gradients(x);
            stacked.columns_mut(c * d, d).copy_from(&g);
        }
        let projected = linv * stacked;
        Ok((0..candidates.len())
            .map(|c| {
                let block = projected.columns(c * d, d);
                let cov = &prior - block.transpose() * block;
                symmetric_spectral_norm(&((&cov + cov.transpose()) * 0.5))
            })
            .collect())
    }
}

/// Exact derived-GP gradient posterior at `x`.
pub fn posterior_gradient<K: Kernel>(
    traj: &TrajectoryDataset,
    kernel: &K,
    x: &DVector<f64>,
) -> Result<GradientPosterior> {
    TrajectoryPosterior::fit(traj, kernel, x.len())?.posterior(x)
}

/// The compressed RFF representation of a client's gradient surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: DVector<f64>,
    pub basis_seed: u64,
    pub observation_count: usize,
}

impl WeightVector {
    pub fn zeros(basis: &RffBasis) -> Self {
        WeightVector {
            weights: DVector::zeros(basis.feature_count()),
            basis_seed: basis.seed(),
            observation_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `seed: u64 LE | M: u32 LE | weights: M × f64 LE`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.len());
        out.extend_from_slice(&self.basis_seed.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for w in self.weights.iter() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(FedZooError::Payload(format!("header needs 12 bytes, got {}", bytes.len())));
        }
        let seed = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
        let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() != 8 * m {
            return Err(FedZooError::Payload(format!(
                "expected {} weight bytes, got {}",
                8 * m,
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>();
        Ok(WeightVector {
            weights: DVector::from_vec(weights),
            basis_seed: seed,
            observation_count: 0,
        })
    }
}

/// `w = Φ (K̂ + σ²I)⁻¹ y` with `K̂ = ΦᵀΦ`. Only the `n × n` system is solved.
pub fn compute_weight_vector(traj: &TrajectoryDataset, basis: &RffBasis) -> Result<WeightVector> {
    if traj.is_empty() {
        return Err(FedZooError::invalid("trajectory", "weight vector needs at least one observation"));
    }
    let points = traj.input_matrix(basis.dim());
    check_dim("trajectory input", basis.dim(), traj.active_inputs()[0].len())?;
    let phi = basis.features_matrix(&points)?;
    weight_vector_from_features(&phi, traj.active_values(), traj.noise_variance(), basis.seed())
}

/// Same as [`compute_weight_vector`] for precomputed `M × n` features.
pub fn weight_vector_from_features(
    phi: &DMatrix<f64>,
    values: &[f64],
    noise_variance: f64,
    basis_seed: u64,
) -> Result<WeightVector> {
    check_dim("feature columns", values.len(), phi.ncols())?;
    let n = values.len();
    let mut gram = phi.transpose() * phi;
    for i in 0..n {
        gram[(i, i)] += noise_variance;
    }
    let chol = cholesky_with_jitter(gram, "RFF Gram matrix")?;
    let alpha = chol.solve(&DVector::from_row_slice(values));
    Ok(WeightVector {
        weights: phi * alpha,
        basis_seed,
        observation_count: n,
    })
}

/// `∇μ̂(x) = ∇φ(x)ᵀ w`, valid at any point of the domain.
pub fn surrogate_gradient_from_weights(
    basis: &RffBasis,
    w: &WeightVector,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("weight vector length", basis.feature_count(), w.len())?;
    if w.basis_seed != basis.seed() {
        return Err(FedZooError::BasisMismatch {
            left: basis.seed(),
            right: w.basis_seed,
        });
    }
    basis.jacobian_transpose_mul(x, &w.weights)
}

/// `∇φ(x)ᵀ w` for several weight vectors over the same basis.
pub fn surrogate_gradients_from_weights(
    basis: &RffBasis,
    ws: &[&WeightVector],
    x: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    for w in ws {
        check_dim("weight vector length", basis.feature_count(), w.len())?;
        if w.basis_seed != basis.seed() {
            return Err(FedZooError::BasisMismatch {
                left: basis.seed(),
                right: w.basis_seed,
            });
        }
    }
    let raw: Vec<&DVector<f64>> = ws.iter().map(|w| &w.weights).collect();
    basis.jacobian_transpose_mul_many(x, &raw)
}

/// Server-side global surrogate: elementwise mean in client-index order.
pub fn aggregate_weight_vectors(locals: &[WeightVector]) -> Result<WeightVector> {
    let first = locals
        .first()
        .ok_or_else(|| FedZooError::invalid("weight vectors", "need at least one client"))?;
    for w in &locals[1..] {
        if w.basis_seed != first.basis_seed {
            return Err(FedZooError::BasisMismatch {
                left: first.basis_seed,
                right: w.basis_seed,
            });
        }
        check_dim("weight vector length", first.len(), w.len())?;
    }
    let refs: Vec<&DVector<f64>> = locals.iter().map(|w| &w.weights).collect();
    Ok(WeightVector {
        weights: ordered_mean(&refs),
        basis_seed: first.basis_seed,
        observation_count: locals.iter().map(|w| w.observation_count).sum(),
    })
}
