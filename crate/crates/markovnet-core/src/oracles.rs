//! Independent numeric oracles used by the test suites and `oracle-check`:
//! central finite differences for gradient verification and a
//! subspace-iteration PCA baseline for linear autoencoders.
//!
//! Nothing here shares code with the implementation paths it checks.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise mismatch `|a - n| / max(1, |n|)` between an analytic
/// gradient and its finite-difference estimate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Optimal rank-`k` linear reconstruction error (mean squared error per
/// sample) on `rows` of dimension `dim`, from the eigendecomposition of the
/// sample covariance: `trace(S) - Σ top-k eigenvalues`.
///
/// The top eigenvalues come from subspace iteration with Gram-Schmidt
/// re-orthonormalization, so the oracle is self-contained.
pub fn pca_reconstruction_error(rows: &[f64], dim: usize, k: usize) -> f64 {
    assert!(dim > 0 && rows.len() % dim == 0, "rows must be a multiple of dim");
    let n = rows.len() / dim;
    assert!(n > 1 && k < dim);

    // Sample mean and covariance (biased, 1/n).
    let mut mean = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for i in 0..dim {
            centered[i] = r[i] - mean[i];
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * dim..(i + 1) * dim];
            for j in 0..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n as f64;
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();

    let top = top_eigenvalues(&cov, dim, k);
    (trace - top.iter().sum::<f64>()).max(0.0)
}

/// Top-`k` eigenvalues of a symmetric positive semidefinite matrix by block
/// subspace iteration.
pub fn top_eigenvalues(sym: &[f64], dim: usize, k: usize) -> Vec<f64> {
    assert_eq!(sym.len(), dim * dim);
    let mut basis: Vec<f64> = (0..k * dim)
        .map(|i| {
            // Deterministic pseudo-random start, decorrelated across vectors.
            let x = (i as f64 + 1.0) * 0.754877666246693;
            (x - x.floor()) - 0.5
        })
        .collect();
    orthonormalize(&mut basis, k, dim);

    let mut eigs = vec![0.0; k];
    let mut next = vec![0.0; k * dim];
    for _iter in 0..300 {
        // next = S · basisᵀ per vector
        for v in 0..k {
            let src = &basis[v * dim..(v + 1) * dim];
            let dst = &mut next[v * dim..(v + 1) * dim];
            for i in 0..dim {
                let mut acc = 0.0;
                let row = &sym[i * dim..(i + 1) * dim];
                for j in 0..dim {
                    acc += row[j] * src[j];
                }
                dst[i] = acc;
            }
        }
        let new_eigs: Vec<f64> = (0..k)
            .map(|v| {
                let src = &basis[v * dim..(v + 1) * dim];
                let dst = &next[v * dim..(v + 1) * dim];
                src.iter().zip(dst).map(|(a, b)| a * b).sum()
            })
            .collect();
        basis.copy_from_slice(&next);
        orthonormalize(&mut basis, k, dim);

        let moved = eigs
            .iter()
            .zip(&new_eigs)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
            .fold(0.0, f64::max);
        eigs = new_eigs;
        if moved < 1e-12 {
            break;
        }
    }
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs
}

fn orthonormalize(basis: &mut [f64], k: usize, dim: usize) {
    for v in 0..k {
        for prev in 0..v {
            let dot: f64 = (0..dim).map(|i| basis[v * dim + i] * basis[prev * dim + i]).sum();
            for i in 0..dim {
                basis[v * dim + i] -= dot * basis[prev * dim + i];
            }
        }
        let norm: f64 = (0..dim).map(|i| basis[v * dim + i].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for i in 0..dim {
                basis[v * dim + i] /= norm;
            }
        }
    }
}
