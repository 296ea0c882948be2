//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FedZooError, Result};

/// Relative jitter added to the diagonal when the first factorization fails.
pub const JITTER_SCALE: f64 = 1e-8;

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// On failure the diagonal is shifted by `1e-8 * trace / n` and the
/// factorization is retried once. A second failure is reported together with
/// an eigenvalue-based condition estimate.
pub fn cholesky_with_jitter(
    matrix: DMatrix<f64>,
    context: &'static str,
) -> Result<Cholesky<f64, Dyn>> {
    let n = matrix.nrows();
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok(chol);
    }
    let jitter = JITTER_SCALE * matrix.trace() / n.max(1) as f64;
    let mut shifted = matrix.clone();
    for i in 0..n {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).ok_or_else(|| FedZooError::Numerical {
        context,
        condition: condition_estimate(&matrix),
    })
}

fn condition_estimate(matrix: &DMatrix<f64>) -> f64 {
    let eig = matrix.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Spectral norm (largest absolute eigenvalue) of a symmetric matrix.
///
/// The matrix is reduced to tridiagonal form and the two extreme eigenvalues
/// are located by Sturm-sequence bisection, which is several times cheaper
/// than a full eigen-decomposition for the small matrices used here.
pub fn symmetric_spectral_norm(matrix: &DMatrix<f64>) -> f64 {
    let n = matrix.nrows();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return matrix[(0, 0)].abs();
    }
    if (0..n).all(|j| (0..n).all(|i| i == j || matrix[(i, j)] == 0.0)) {
        return matrix.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    }
    let (diag, off) = tridiagonalize(matrix);
    let (lo, hi) = extreme_eigenvalues(&diag, &off);
    lo.abs().max(hi.abs())
}

/// Householder reduction of a symmetric matrix to tridiagonal form,
/// returning only the diagonal and sub-diagonal. Only the lower triangle is
/// read and updated.
fn tridiagonalize(matrix: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = matrix.nrows();
    let mut a: Vec<f64> = matrix.as_slice().to_vec();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n - 1];
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for k in 0..n - 1 {
        diag[k] = a[k * n + k];
        let start = k + 1;
        let m = n - start;
        let x = &a[k * n + start..(k + 1) * n];
        if m == 1 {
            off[k] = x[0];
            break;
        }
        let norm = x.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        off[k] = alpha;
        let v = &mut v[..m];
        v.copy_from_slice(x);
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vnorm);

        // p = S v from the lower triangle of the trailing block S.
        let p = &mut p[..m];
        p.iter_mut().for_each(|t| *t = 0.0);
        for j in 0..m {
            let col = &a[(start + j) * n + start + j..(start + j + 1) * n];
            let vj = v[j];
            let mut acc = col[0] * vj;
            for ((s_ij, vi), pi) in col[1..].iter().zip(&v[j + 1..]).zip(p[j + 1..].iter_mut()) {
                acc += s_ij * vi;
                *pi += s_ij * vj;
            }
            p[j] += acc;
        }
        let vp: f64 = v.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        for (pi, vi) in p.iter_mut().zip(v.iter()) {
            *pi -= vp * vi;
        }
        // S ← S - 2(v qᵀ + q vᵀ) on the lower triangle.
        for j in 0..m {
            let (vj, pj) = (2.0 * v[j], 2.0 * p[j]);
            let col = &mut a[(start + j) * n + start + j..(start + j + 1) * n];
            for ((s_ij, vi), pi) in col.iter_mut().zip(&v[j..]).zip(&p[j..]) {
                *s_ij -= vi * pj + pi * vj;
            }
        }
    }
    diag[n - 1] = a[n * n - 1];
    (diag, off)
}

/// Number of eigenvalues of the tridiagonal matrix strictly below each `t`.
fn sturm_counts(diag: &[f64], off: &[f64], t: [f64; 4]) -> [usize; 4] {
    let mut count = [0; 4];
    let mut q = [1.0; 4];
    for i in 0..diag.len() {
        let e2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        for s in 0..4 {
            let mut next = diag[i] - t[s] - e2 / q[s];
            if next == 0.0 {
                next = -f64::EPSILON * (t[s].abs() + f64::MIN_POSITIVE);
            }
            if next < 0.0 {
                count[s] += 1;
            }
            q[s] = next;
        }
    }
    count
}

fn extreme_eigenvalues(diag: &[f64], off: &[f64]) -> (f64, f64) {
    let n = diag.len();
    let mut lower = f64::INFINITY;
    let mut upper = f64::NEG_INFINITY;
    for i in 0..n {
        let left = if i == 0 { 0.0 } else { off[i - 1].abs() };
        let right = if i + 1 == n { 0.0 } else { off[i].abs() };
        lower = lower.min(diag[i] - left - right);
        upper = upper.max(diag[i] + left + right);
    }
    let scale = lower.abs().max(upper.abs());
    if scale == 0.0 {
        return (0.0, 0.0);
    }
    let tol = 2.0 * f64::EPSILON * scale;
    // Any diagonal entry is a Rayleigh quotient, so it brackets both extremes.
    let max_diag = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_diag = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let largest = multisect(max_diag - tol, upper + tol, tol, |t| sturm_counts(diag, off, t).map(|c| c >= n));
    if lower >= -largest.abs() {
        return (lower.max(-largest.abs()), largest);
    }
    let smallest = multisect(lower - tol, min_diag + tol, tol, |t| sturm_counts(diag, off, t).map(|c| c >= 1));
    (smallest, largest)
}

/// Boundary of a predicate that is false at `lo` and true at `hi`, found by
/// probing four interior points per pass so the probes run independently.
fn multisect(mut lo: f64, mut hi: f64, tol: f64, above: impl Fn([f64; 4]) -> [bool; 4]) -> f64 {
    while hi - lo > tol {
        let step = (hi - lo) / 5.0;
        let probes = [lo + step, lo + 2.0 * step, lo + 3.0 * step, lo + 4.0 * step];
        if probes[0] <= lo || probes[3] >= hi {
            break;
        }
        let flags = above(probes);
        match flags.iter().position(|f| *f) {
            Some(0) => hi = probes[0],
            Some(i) => {
                lo = probes[i - 1];
                hi = probes[i];
            }
            None => lo = probes[3],
        }
    }
    0.5 * (lo + hi)
}

/// Arithmetic mean of equally sized vectors, accumulated in index order.
///
/// The mean is formed as `first + sum(v_i - first) / n`, which returns
/// `first` bit-for-bit when all inputs are identical.
pub fn ordered_mean(vectors: &[&DVector<f64>]) -> DVector<f64> {
    let first = vectors[0];
    let mut acc = DVector::zeros(first.len());
    for v in &vectors[1..] {
        acc += *v - first;
    }
    first + acc / vectors.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorizes_spd_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let chol = cholesky_with_jitter(m.clone(), "test").unwrap();
        let l = chol.l();
        assert!((&l * l.transpose() - m).norm() < 1e-12);
    }

    #[test]
    fn jitter_rescues_rank_deficient_psd_matrix() {
        // Rank one, PSD: fails without jitter.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(cholesky_with_jitter(m, "test").is_ok());
    }

    #[test]
    fn indefinite_matrix_is_a_hard_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match cholesky_with_jitter(m, "test") {
            Err(FedZooError::Numerical { condition, .. }) => assert!((condition - 1.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mean_of_identical_vectors_is_exact() {
        let v = DVector::from_vec(vec![0.1, 0.7, 1.0 / 3.0]);
        let vs = vec![&v; 5];
        assert_eq!(ordered_mean(&vs), v);
    }

    #[test]
    fn spectral_norm_matches_full_eigendecomposition() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3, 7, 30] {
            for _ in 0..20 {
                let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
                let m = &a + a.transpose();
                let reference = m.clone().symmetric_eigenvalues().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
                let got = symmetric_spectral_norm(&m);
                assert!((got - reference).abs() <= 1e-12 * reference.max(1.0), "{got} vs {reference}");
            }
        }
        let psd = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 1.0, 1.0]));
        assert!((symmetric_spectral_norm(&psd) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_picks_largest_magnitude() {
        let m = DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, 2.0]);
        assert!((symmetric_spectral_norm(&m) - 3.0).abs() < 1e-12);
    }
}
