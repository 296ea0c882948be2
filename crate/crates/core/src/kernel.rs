//! Shift-invariant kernels and the random Fourier feature basis shared by
//! every client and the server.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, FedZooError, Result};
use crate::rng::{self, Role};

/// A stationary kernel with unit variance, `k(x, x) = 1`.
pub trait Kernel: Send + Sync {
    /// `k(x, y)`; callers guarantee equal lengths.
    fn value(&self, x: &[f64], y: &[f64]) -> f64;

    /// Writes the gradient of `k(x, y)` with respect to `x` into `out`.
    fn grad_first_into(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `∂_z ∂_z' k(z, z')` evaluated at `z = z'`, a `d × d` matrix.
    fn prior_gradient_covariance(&self, dim: usize) -> DMatrix<f64>;

    /// Inverse squared lengthscale along each input direction; scales
    /// `x - y` inside the SE gradient.
    fn inverse_sq_lengthscale(&self) -> f64;
}

/// Squared exponential kernel `exp(-|x - y|^2 / (2 l^2))`.
///
/// For this kernel the cross-Hessian bound is `κ = 1 / l²`; the gradient bound
/// `L = e^{-1/2} / l` is attained at distance `l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub lengthscale: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams { lengthscale: 1.0 }
    }
}

impl KernelParams {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(FedZooError::invalid(
                "lengthscale",
                format!("must be positive and finite, got {lengthscale}"),
            ));
        }
        Ok(KernelParams { lengthscale })
    }

    /// `κ`, the spectral norm of the prior gradient covariance.
    pub fn kappa(&self) -> f64 {
        1.0 / (self.lengthscale * self.lengthscale)
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_dim("kernel_eval", x.len(), y.len())?;
        Ok(self.value(x.as_slice(), y.as_slice()))
    }

    pub fn grad_first(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("kernel_grad_first", x.len(), y.len())?;
        let mut out = DVector::zeros(x.len());
        self.grad_first_into(x.as_slice(), y.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Analytic `∂_x ∂_y k(x, y)` at an arbitrary pair.
    pub fn cross_hessian(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("cross_hessian", x.len(), y.len())?;
        let inv = self.inverse_sq_lengthscale();
        let k = self.value(x.as_slice(), y.as_slice());
        let diff = x - y;
        let mut h = DMatrix::identity(x.len(), x.len()) * (inv * k);
        h -= &diff * diff.transpose() * (inv * inv * k);
        Ok(h)
    }
}

impl Kernel for KernelParams {
    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * sq * self.inverse_sq_lengthscale()).exp()
    }

    fn grad_first_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let inv = self.inverse_sq_lengthscale();
        let k = self.value(x, y);
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = -(a - b) * inv * k;
        }
    }

    fn prior_gradient_covariance(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::identity(dim, dim) * self.kappa()
    }

    fn inverse_sq_lengthscale(&self) -> f64 {
        self.kappa()
    }
}

/// Random Fourier feature basis `φ_j(x) = sqrt(2/M) cos(v_jᵀx + b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffBasis {
    /// `M × d`, row `j` is `v_j`.
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
    seed: u64,
}

impl RffBasis {
    /// Samples `v_j ~ N(0, I / l²)` and `b_j ~ U[0, 2π)` from two independent
    /// streams derived from `seed`. A basis of size `M` is a prefix of any
    /// larger basis drawn with the same seed.
    pub fn sample(features: usize, dim: usize, kernel: &KernelParams, seed: u64) -> Result<Self> {
        if features == 0 {
            return Err(FedZooError::invalid("features", "M must be at least 1"));
        }
        if dim == 0 {
            return Err(FedZooError::invalid("dimension", "d must be at least 1"));
        }
        let scale = 1.0 / kernel.lengthscale;
        let mut freq_rng = rng::stream(seed, Role::BasisFrequencies, 0);
        let mut phase_rng = rng::stream(seed, Role::BasisPhases, 0);

        // Row-major draw so prefixes are stable under a change of M.
        let mut data = Vec::with_capacity(features * dim);
        for _ in 0..features * dim {
            let z: f64 = StandardNormal.sample(&mut freq_rng);
            data.push(z * scale);
        }
        let frequencies = DMatrix::from_row_slice(features, dim, &data);
        let phases = DVector::from_fn(features, |_, _| {
            phase_rng.random::<f64>() * std::f64::consts::TAU
        });
        Ok(RffBasis {
            frequencies,
            phases,
            seed,
        })
    }

    /// Builds a basis from explicit parameters.
    pub fn from_parts(frequencies: DMatrix<f64>, phases: DVector<f64>, seed: u64) -> Result<Self> {
        check_dim("rff phases", frequencies.nrows(), phases.len())?;
        if frequencies.nrows() == 0 || frequencies.ncols() == 0 {
            return Err(FedZooError::invalid("features", "basis must be non-empty"));
        }
        Ok(RffBasis {
            frequencies,
            phases,
            seed,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    pub fn phases(&self) -> &DVector<f64> {
        &self.phases
    }

    fn amplitude(&self) -> f64 {
        (2.0 / self.feature_count() as f64).sqrt()
    }

    fn arguments(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.frequencies * x + &self.phases
    }

    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("rff_features", self.dim(), x.len())?;
        let amp = self.amplitude();
        Ok(self.arguments(x).map(|a| amp * a.cos()))
    }

    /// Features of every column of `points` (`d × n`), returned as `M × n`.
    pub fn features_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("rff_features", self.dim(), points.nrows())?;
        let amp = self.amplitude();
        let mut args = &self.frequencies * points;
        for mut col in args.column_iter_mut() {
            for (a, b) in col.iter_mut().zip(self.phases.iter()) {
                *a = amp * (*a + b).cos();
            }
        }
        Ok(args)
    }

    /// `∇φ(x)`, an `M × d` matrix with row `j = -sqrt(2/M) sin(v_jᵀx + b_j) v_jᵀ`.
    pub fn feature_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("rff_feature_jacobian", self.dim(), x.len())?;
        let amp = self.amplitude();
        let s = self.arguments(x).map(|a| -amp * a.sin());
        let mut jac = self.frequencies.clone();
        for (mut row, sj) in jac.row_iter_mut().zip(s.iter()) {
            row *= *sj;
        }
        Ok(jac)
    }

    /// `∇φ(x)ᵀ w` without materializing the Jacobian.
    pub fn jacobian_transpose_mul(&self, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.jacobian_transpose_mul_many(x, &[w])?.remove(0))
    }

    /// `∇φ(x)ᵀ w` for several `w` at one point, sharing the sine evaluations.
    pub fn jacobian_transpose_mul_many(&self, x: &DVector<f64>, ws: &[&DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        check_dim("rff_feature_jacobian", self.dim(), x.len())?;
        for w in ws {
            check_dim("weight vector length", self.feature_count(), w.len())?;
        }
        let amp = self.amplitude();
        let slopes = self.arguments(x).map(|a| -amp * a.sin());
        Ok(ws
            .iter()
            .map(|w| self.frequencies.tr_mul(&slopes.component_mul(w)))
            .collect())
    }
}
