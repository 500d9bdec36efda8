//! Spherical normalization: each CSI tensor splits into its Frobenius
//! magnitude and a unit-norm direction, fed back separately. Directions are
//! scale-free, so UEs at very different path losses contribute equally to
//! training, and per-sample MSE on directions equals per-sample NMSE.

use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A unit-Frobenius direction tensor plus its positive magnitude.
#[derive(Clone, Debug)]
pub struct SphericalCsi<R> {
    pub direction: Tensor<R>,
    pub magnitude: R,
}

/// `direction = csi/‖csi‖`, `magnitude = ‖csi‖`.
///
/// A zero matrix has no direction; feeding one in is a caller bug that
/// would otherwise poison training with NaNs.
pub fn split<R: Real>(csi: &Tensor<R>) -> Result<SphericalCsi<R>> {
    let norm = csi.sum_squares().sqrt();
    if norm == R::zero() {
        return Err(Error::ZeroChannel);
    }
    let data = csi.data().iter().map(|&v| v / norm).collect();
    Ok(SphericalCsi {
        direction: Tensor::from_vec(csi.shape(), data).expect("shape unchanged"),
        magnitude: norm,
    })
}

/// `magnitude · direction`; rejects directions that are not unit-norm.
pub fn merge<R: Real>(s: &SphericalCsi<R>) -> Result<Tensor<R>> {
    let norm = s.direction.sum_squares().sqrt();
    if (norm - R::one()).abs() > R::of(1e-6) {
        return Err(Error::contract(format!(
            "merge requires a unit-norm direction, got ‖d‖ = {norm}"
        )));
    }
    if s.magnitude <= R::zero() {
        return Err(Error::contract(format!("magnitude must be positive, got {}", s.magnitude)));
    }
    let data = s.direction.data().iter().map(|&v| v * s.magnitude).collect();
    Ok(Tensor::from_vec(s.direction.shape(), data).expect("shape unchanged"))
}

/// Project an arbitrary tensor onto the unit sphere and rescale: the
/// reconstruction path for decoder outputs, whose norm is only
/// approximately 1.
pub fn renormalize_merge<R: Real>(direction_estimate: &Tensor<R>, magnitude: R) -> Result<Tensor<R>> {
    let norm = direction_estimate.sum_squares().sqrt();
    if norm == R::zero() {
        return Err(Error::ZeroChannel);
    }
    let scale = magnitude / norm;
    let data = direction_estimate.data().iter().map(|&v| v * scale).collect();
    Ok(Tensor::from_vec(direction_estimate.shape(), data).expect("shape unchanged"))
}

/// Uniform mid-rise quantizer for `20·log10(p)` over a fixed dB range.
///
/// The magnitude is fed back directly beside the codeword; at the default
/// 16 bits over [−60, 60] dB its cost is negligible against the codeword
/// budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeQuantizer {
    pub bits: u32,
    pub min_db: f64,
    pub max_db: f64,
}

impl Default for MagnitudeQuantizer {
    fn default() -> Self {
        MagnitudeQuantizer { bits: 16, min_db: -60.0, max_db: 60.0 }
    }
}

impl MagnitudeQuantizer {
    pub fn new(bits: u32, min_db: f64, max_db: f64) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(Error::config(format!("magnitude bits must be in 1..=24, got {bits}")));
        }
        if !(max_db > min_db) {
            return Err(Error::config("magnitude range must be non-empty".to_string()));
        }
        Ok(MagnitudeQuantizer { bits, min_db, max_db })
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    fn step(&self) -> f64 {
        (self.max_db - self.min_db) / self.levels() as f64
    }

    /// Quantize a positive magnitude; out-of-range values saturate and are
    /// flagged rather than rejected.
    pub fn encode_magnitude<R: Real>(&self, p: R) -> (u32, bool) {
        let db = 20.0 * p.as_f64().max(f64::MIN_POSITIVE).log10();
        let cell = ((db - self.min_db) / self.step()).floor();
        let max_code = (self.levels() - 1) as f64;
        let saturated = !(0.0..=max_code).contains(&cell) || !p.as_f64().is_finite() || p <= R::zero();
        (cell.clamp(0.0, max_code) as u32, saturated)
    }

    /// Reconstruction level at the cell center.
    pub fn decode_magnitude<R: Real>(&self, code: u32) -> R {
        let code = code.min(self.levels() - 1);
        let db = self.min_db + (code as f64 + 0.5) * self.step();
        R::of(10f64.powf(db / 20.0))
    }

    /// Worst-case log-domain error: half a cell.
    pub fn worst_case_db_error(&self) -> f64 {
        self.step() / 2.0
    }
}
