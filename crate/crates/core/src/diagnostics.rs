//! Read-only measurements of estimator quality.

use nalgebra::DVector;

use crate::error::{check_dim, FedZooError, Result};

/// One per-iteration measurement for one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparityRecord {
    pub round: usize,
    pub iteration: usize,
    pub client: usize,
    /// `‖ĝ - ∇F‖²`.
    pub xi: f64,
    /// `cos(ĝ, ∇F)`; `None` when either vector vanishes.
    pub cosine: Option<f64>,
    pub gamma_used: f64,
    /// Disparity-minimizing `γ`; `None` when the correction vanishes.
    pub gamma_star: Option<f64>,
}

/// `Ξ = ‖ĝ - ∇F‖²`.
pub fn gradient_disparity(estimate: &DVector<f64>, grad_f: &DVector<f64>) -> Result<f64> {
    check_dim("gradient disparity", grad_f.len(), estimate.len())?;
    Ok((estimate - grad_f).norm_squared())
}

/// Closed-form minimizer of `γ ↦ ‖g + γc - ∇F‖²`, i.e.
/// `γ* = (∇F - g)ᵀc / ‖c‖²`. Not clamped.
pub fn optimal_gamma(grad_f: &DVector<f64>, base: &DVector<f64>, correction: &DVector<f64>) -> Result<f64> {
    check_dim("optimal gamma", grad_f.len(), base.len())?;
    check_dim("optimal gamma", grad_f.len(), correction.len())?;
    let denom = correction.norm_squared();
    if denom == 0.0 {
        return Err(FedZooError::Undefined("optimal gamma"));
    }
    Ok((grad_f - base).dot(correction) / denom)
}

pub fn cosine_similarity(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    check_dim("cosine similarity", u.len(), v.len())?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(FedZooError::Undefined("cosine similarity"));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Largest ratio of consecutive entries in a sequence of uncertainty norms.
pub fn rho_estimate(uncertainties: &[f64]) -> Result<f64> {
    if uncertainties.len() < 2 {
        return Err(FedZooError::invalid("uncertainty_sequence", "needs at least two entries"));
    }
    if let Some(bad) = uncertainties.iter().find(|s| !(**s > 0.0)) {
        return Err(FedZooError::invalid("uncertainty_sequence", format!("entries must be positive, got {bad}")));
    }
    Ok(uncertainties
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Lower end of the contraction-ratio bracket `[1/(1 + 1/σ²), 1]`.
pub fn rho_lower_bound(noise_variance: f64) -> f64 {
    1.0 / (1.0 + 1.0 / noise_variance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn disparity_examples() {
        let a = v(&[0.3, -2.0]);
        assert_eq!(gradient_disparity(&a, &a).unwrap(), 0.0);
        assert_eq!(gradient_disparity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 2.0);
        let b = v(&[1.5, 0.25]);
        let base = gradient_disparity(&a, &b).unwrap();
        assert!((gradient_disparity(&(&a * 3.0), &(&b * 3.0)).unwrap() - 9.0 * base).abs() < 1e-12);
        assert!(gradient_disparity(&a, &v(&[1.0])).is_err());
    }

    #[test]
    fn optimal_gamma_examples() {
        let zero = v(&[0.0, 0.0]);
        assert_eq!(optimal_gamma(&v(&[1.0, 0.0]), &zero, &v(&[1.0, 1.0])).unwrap(), 0.5);
        let g = v(&[0.25, 0.5]);
        let f = v(&[1.25, -0.375]);
        let c = &f - &g;
        assert_eq!(optimal_gamma(&f, &g, &c).unwrap(), 1.0);
        assert_eq!(gradient_disparity(&(&g + &c), &f).unwrap(), 0.0);
        assert_eq!(optimal_gamma(&v(&[1.0, 0.0]), &zero, &v(&[0.0, 3.0])).unwrap(), 0.0);
        assert!(matches!(optimal_gamma(&f, &g, &zero), Err(FedZooError::Undefined(_))));
    }

    #[test]
    fn cosine_examples() {
        let u = v(&[0.4, -1.0, 2.0]);
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&u, &(-&u)).unwrap() + 1.0).abs() < 1e-15);
        let c = cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&u, &v(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho_estimate(&[2.0, 2.0, 2.0]).unwrap(), 1.0);
        let geo: Vec<f64> = (0..6).map(|k| 0.9_f64.powi(k)).collect();
        assert!((rho_estimate(&geo).unwrap() - 0.9).abs() < 1e-12);
        assert!(rho_estimate(&[1.0]).is_err());
        assert!(rho_estimate(&[1.0, 0.0]).is_err());
        assert!((rho_lower_bound(1.0) - 0.5).abs() < 1e-15);
    }
}
