//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function has a plain-Rust twin returning `fedzoo::Result` so
//! the numerics can be tested natively; the `#[wasm_bindgen]` wrappers only
//! convert errors.

use nalgebra::DVector;
use rand::Rng;
use wasm_bindgen::prelude::*;

use fedzoo::error::Result;
use fedzoo::federation::Algorithm;
use fedzoo::harness::{self, ExperimentConfig};
use fedzoo::kernel::{KernelParams, RffBasis};
use fedzoo::rng::{stream, Role};
use fedzoo::surrogate::{uncertainty_norm, TrajectoryDataset, TrajectoryPosterior};

fn js(e: fedzoo::error::FedZooError) -> JsError {
    JsError::new(&e.to_string())
}

/// Exact SE kernel and its RFF approximation along one axis, as flat
/// `[r, exact, approx]` triples for `r` from 0 to `3l`.
pub fn kernel_curve(features: usize, lengthscale: f64, dim: usize, seed: u64, points: usize) -> Result<Vec<f64>> {
    let kernel = KernelParams::new(lengthscale)?;
    let basis = RffBasis::sample(features, dim.max(1), &kernel, seed)?;
    let origin = DVector::zeros(dim.max(1));
    let phi0 = basis.features(&origin)?;
    let steps = points.max(2);
    let mut out = Vec::with_capacity(3 * steps);
    for s in 0..steps {
        let r = 3.0 * lengthscale * s as f64 / (steps - 1) as f64;
        let mut x = origin.clone();
        x[0] = r;
        out.extend([r, kernel.eval(&x, &origin)?, basis.features(&x)?.dot(&phi0)]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn rff_kernel_curve(features: usize, lengthscale: f64, dim: usize, seed: u32, points: usize) -> std::result::Result<Vec<f64>, JsError> {
    kernel_curve(features, lengthscale, dim, seed as u64, points).map_err(js)
}

/// A 1-D GP fit to noisy samples of `sin(2πx)` on `[0, 1]`.
#[wasm_bindgen]
pub struct GpCurve {
    observations: Vec<f64>,
    grid: Vec<f64>,
}

#[wasm_bindgen]
impl GpCurve {
    /// Flat `[x, y]` pairs.
    pub fn observations(&self) -> Vec<f64> {
        self.observations.clone()
    }

    /// Flat `[x, f, μ, f', ∇μ, sd]` rows, where `sd` is the square root of the
    /// gradient posterior variance.
    pub fn grid(&self) -> Vec<f64> {
        self.grid.clone()
    }
}

pub fn gp_curve(observations: usize, noise_std: f64, lengthscale: f64, seed: u64, grid: usize) -> Result<GpCurve> {
    let kernel = KernelParams::new(lengthscale)?;
    let mut traj = TrajectoryDataset::new((noise_std * noise_std).max(1e-10))?;
    let mut r = stream(seed, Role::Noise, 0);
    let f = |x: f64| (2.0 * std::f64::consts::PI * x).sin();
    let df = |x: f64| 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).cos();
    let mut obs = Vec::with_capacity(2 * observations);
    for _ in 0..observations {
        let x: f64 = r.random();
        let u1: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = r.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let y = f(x) + noise_std * z;
        traj.push(DVector::from_element(1, x), y)?;
        obs.extend([x, y]);
    }
    let post = TrajectoryPosterior::fit(&traj, &kernel, 1)?;
    let steps = grid.max(2);
    let mut rows = Vec::with_capacity(6 * steps);
    for s in 0..steps {
        let x = s as f64 / (steps - 1) as f64;
        let p = DVector::from_element(1, x);
        let g = post.posterior(&p)?;
        rows.extend([x, f(x), post.mean_value(&p)?, df(x), g.mean[0], uncertainty_norm(&g).sqrt()]);
    }
    Ok(GpCurve {
        observations: obs,
        grid: rows,
    })
}

#[wasm_bindgen]
pub fn gp_gradient_1d(observations: usize, noise_std: f64, lengthscale: f64, seed: u32, grid: usize) -> std::result::Result<GpCurve, JsError> {
    gp_curve(observations, noise_std, lengthscale, seed as u64, grid).map_err(js)
}

/// Convergence error per round (round 0 first) on a small quadratic suite.
#[allow(clippy::too_many_arguments)]
pub fn convergence(
    algorithm: &str,
    dim: usize,
    clients: usize,
    heterogeneity: f64,
    rounds: usize,
    local_iterations: usize,
    features: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = ExperimentConfig {
        dim,
        clients,
        heterogeneity,
        rounds,
        local_iterations,
        features,
        workers: 1,
        seeds: vec![seed],
        ..ExperimentConfig::default()
    };
    cfg.validate_fields()?;
    let trace = harness::run_trace(&cfg, algorithm.parse::<Algorithm>()?, seed)?;
    Ok(trace.rounds.iter().map(|r| r.conv_error.unwrap_or(f64::NAN)).collect())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn federated_run(
    algorithm: &str,
    dim: usize,
    clients: usize,
    heterogeneity: f64,
    rounds: usize,
    local_iterations: usize,
    features: usize,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    convergence(algorithm, dim, clients, heterogeneity, rounds, local_iterations, features, seed as u64).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_curve_starts_at_one_and_tracks_the_kernel() {
        let c = kernel_curve(4000, 1.0, 3, 1, 31).unwrap();
        assert_eq!(c.len(), 93);
        assert_eq!(c[0], 0.0);
        assert!((c[1] - 1.0).abs() < 1e-15);
        for row in c.chunks(3) {
            assert!((row[1] - row[2]).abs() < 0.1, "{row:?}");
        }
    }

    #[test]
    fn gp_curve_has_expected_shape() {
        let g = gp_curve(30, 1e-3, 0.2, 2, 11).unwrap();
        assert_eq!(g.observations().len(), 60);
        let grid = g.grid();
        assert_eq!(grid.len(), 66);
        let mid = &grid[30..36];
        assert!((mid[2] - mid[1]).abs() < 0.05, "{mid:?}");
        assert!(mid[5] >= 0.0);
    }

    #[test]
    fn convergence_reports_every_round() {
        let e = convergence("fedzo", 3, 2, 0.5, 4, 3, 50, 1).unwrap();
        assert_eq!(e.len(), 5);
        assert!(e.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(convergence("newton", 3, 2, 0.5, 4, 3, 50, 1).is_err());
        assert!(convergence("fedzo", 0, 2, 0.5, 4, 3, 50, 1).is_err());
    }
}
