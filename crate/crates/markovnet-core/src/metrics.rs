//! Reconstruction accuracy: mean of per-sample normalized squared Frobenius
//! errors, ‖H − Ĥ‖²/‖H‖², reported linear and in dB.

use crate::scalar::Real;
use crate::transform::CsiMatrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nmse {
    pub linear: f64,
    /// 10·log10(linear); −∞ is the sentinel for an exact reconstruction.
    pub db: f64,
    /// Zero-norm truth samples excluded from the average.
    pub excluded: usize,
}

pub fn to_db(linear: f64) -> f64 {
    if linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    }
}

/// Average per-sample NMSE over matched truth/reconstruction pairs.
pub fn nmse<R: Real>(truth: &[CsiMatrix<R>], recon: &[CsiMatrix<R>]) -> Result<Nmse> {
    if truth.len() != recon.len() || truth.is_empty() {
        return Err(Error::contract(format!(
            "nmse needs matched non-empty sample lists, got {} vs {}",
            truth.len(),
            recon.len()
        )));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (t, r) in truth.iter().zip(recon) {
        if t.rows() != r.rows() || t.cols() != r.cols() {
            return Err(Error::contract("nmse shape mismatch".to_string()));
        }
        let denom = t.frobenius_sq().as_f64();
        if denom == 0.0 {
            excluded += 1;
            continue;
        }
        let err: f64 = t
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| {
                let dre = a.re.as_f64() - b.re.as_f64();
                let dim = a.im.as_f64() - b.im.as_f64();
                dre * dre + dim * dim
            })
            .sum();
        acc += err / denom;
        used += 1;
    }
    if used == 0 {
        return Err(Error::contract("all truth samples had zero norm".to_string()));
    }
    let linear = acc / used as f64;
    Ok(Nmse { linear, db: to_db(linear), excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;

    fn mat(vals: &[(f64, f64)]) -> CsiMatrix<f64> {
        CsiMatrix::from_vec(1, vals.len(), vals.iter().map(|&(r, i)| Complex::new(r, i)).collect())
            .unwrap()
    }

    #[test]
    fn exact_reconstruction_hits_the_sentinel() {
        let t = mat(&[(1.0, 2.0), (0.5, -0.5)]);
        let out = nmse(&[t.clone()], &[t]).unwrap();
        assert_eq!(out.linear, 0.0);
        assert_eq!(out.db, f64::NEG_INFINITY);
    }

    #[test]
    fn zero_reconstruction_is_zero_db() {
        let t = mat(&[(1.0, 2.0), (0.5, -0.5)]);
        let z = mat(&[(0.0, 0.0), (0.0, 0.0)]);
        let out = nmse(&[t], &[z]).unwrap();
        assert!((out.linear - 1.0).abs() < 1e-15);
        assert!(out.db.abs() < 1e-12);
    }

    #[test]
    fn ten_percent_scale_error_is_minus_twenty_db() {
        let t = mat(&[(1.0, -1.0), (2.0, 0.5)]);
        let r = mat(&[(1.1, -1.1), (2.2, 0.55)]);
        let out = nmse(&[t], &[r]).unwrap();
        assert!((out.linear - 0.01).abs() < 1e-12);
        assert!((out.db + 20.0).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_truth_is_excluded_and_counted() {
        let z = mat(&[(0.0, 0.0)]);
        let t = mat(&[(1.0, 0.0)]);
        let out = nmse(&[z.clone(), t.clone()], &[z.clone(), t]).unwrap();
        assert_eq!(out.excluded, 1);
        assert!(matches!(nmse(&[z.clone()], &[z]), Err(Error::Contract(_))));
    }
}
