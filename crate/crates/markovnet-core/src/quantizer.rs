//! μ-law companded uniform quantization of feedback codewords, plus the
//! plain uniform quantizer used for raw CSI elements.
//!
//! Compression: f(x) = sgn(x)·ln(1+μ|x|)/ln(1+μ) on [−1, 1].
//! Quantization: ŷ = Δ·round(y/Δ) with fixed step Δ = 2^(1−b) for b bits
//! (2^(b−1) levels per unit interval), round-half-to-even.
//! Expansion: F(ŷ) = sgn(ŷ)·((1+μ)^|ŷ| − 1)/μ, the exact inverse of f.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerMode {
    MuLaw,
    Uniform,
}

/// Bit width, companding constant, and step policy for codeword feedback.
///
/// `bits >= 32` is the passthrough mode: codewords are forwarded untouched
/// and accounted at 32 bits per value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub mu: f64,
    pub mode: QuantizerMode,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec { bits: 32, mu: 255.0, mode: QuantizerMode::MuLaw }
    }
}

impl QuantizerSpec {
    pub fn new(bits: u32, mu: f64, mode: QuantizerMode) -> Result<Self> {
        let spec = QuantizerSpec { bits, mu, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) && self.bits < 32 {
            return Err(Error::config(format!(
                "quantizer bits must be 1..=16 (or >=32 for passthrough), got {}",
                self.bits
            )));
        }
        if self.mu <= 0.0 {
            return Err(Error::config(format!("mu must be positive, got {}", self.mu)));
        }
        Ok(())
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= 32
    }

    /// Fixed step over the [−1, 1] domain: Δ·2^(b−1) = 1.
    pub fn step(&self) -> f64 {
        2f64.powi(1 - self.bits as i32)
    }
}

/// μ-law compression of one value; inputs beyond [−1, 1] saturate to ±1 and
/// are reported through the returned flag.
pub fn compand<R: Real>(x: R, mu: f64) -> (R, bool) {
    let xf = x.as_f64();
    let clipped = xf.abs() > 1.0;
    let xf = xf.clamp(-1.0, 1.0);
    let y = xf.signum() * (1.0 + mu * xf.abs()).ln() / (1.0 + mu).ln();
    (R::of(y), clipped)
}

/// Uniform quantization with round-half-to-even.
pub fn quantize<R: Real>(y: R, step: f64) -> R {
    R::of((y.as_f64() / step).round_ties_even() * step)
}

/// Exact inverse of [`compand`] on unquantized values.
pub fn expand<R: Real>(y: R, mu: f64) -> R {
    let yf = y.as_f64();
    let x = yf.signum() * ((1.0 + mu).powf(yf.abs()) - 1.0) / mu;
    R::of(x)
}

/// Result of quantizing one codeword at inference time.
#[derive(Clone, Debug)]
pub struct QuantizedCodeword<R> {
    pub values: Vec<R>,
    /// Transport cost of the codeword itself (excludes magnitude bits).
    pub bit_count: u64,
    /// Entries that fell outside the stored codeword scale.
    pub clipped: u64,
}

/// Quantize a codeword through scale → compand → uniform grid → expand →
/// rescale. `scale` is the stored training-set codeword scale; networks are
/// not retrained around the quantizer.
pub fn quantize_codeword<R: Real>(
    codeword: &[R],
    spec: &QuantizerSpec,
    scale: R,
) -> Result<QuantizedCodeword<R>> {
    spec.validate()?;
    if !(scale > R::zero()) || !scale.is_finite() {
        return Err(Error::contract(format!(
            "codeword scale must be a stored positive value, got {scale}"
        )));
    }
    if spec.is_passthrough() {
        return Ok(QuantizedCodeword {
            values: codeword.to_vec(),
            bit_count: codeword.len() as u64 * 32,
            clipped: 0,
        });
    }
    let step = spec.step();
    let mut clipped = 0u64;
    let values = codeword
        .iter()
        .map(|&c| {
            let x = c / scale;
            let (y, clip) = match spec.mode {
                QuantizerMode::MuLaw => compand(x, spec.mu),
                QuantizerMode::Uniform => {
                    let over = x.abs() > R::one();
                    (x.max(-R::one()).min(R::one()), over)
                }
            };
            if clip {
                clipped += 1;
            }
            let q = quantize(y, step);
            let x_hat = match spec.mode {
                QuantizerMode::MuLaw => expand(q, spec.mu),
                QuantizerMode::Uniform => q,
            };
            x_hat * scale
        })
        .collect();
    Ok(QuantizedCodeword { values, bit_count: codeword.len() as u64 * spec.bits as u64, clipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compand_endpoints_and_oddness() {
        let (zero, _) = compand(0.0f64, 255.0);
        assert_eq!(zero, 0.0);
        let (one, _) = compand(1.0f64, 255.0);
        assert!((one - 1.0).abs() < 1e-15);
        let (neg, _) = compand(-1.0f64, 255.0);
        assert!((neg + 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let (fp, _) = compand(x, 255.0);
            let (fm, _) = compand(-x, 255.0);
            assert!((fp + fm).abs() < 1e-15, "compand not odd at {x}");
        }
    }

    #[test]
    fn compand_half_at_mu_255() {
        // ln(1 + 255·0.5)/ln(256) = ln(128.5)/ln(256)
        let (y, _) = compand(0.5f64, 255.0);
        let expect = 128.5f64.ln() / 256f64.ln();
        assert!((y - expect).abs() < 1e-15);
        assert!((y - 0.8757).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_saturates_with_flag() {
        let (y, clipped) = compand(1.5f64, 255.0);
        assert!(clipped);
        assert!((y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantize_grid_points_and_worst_case() {
        let step = QuantizerSpec::new(6, 255.0, QuantizerMode::Uniform).unwrap().step();
        assert_eq!(step * 2f64.powi(5), 1.0);
        // On-grid value is exact.
        let y = 7.0 * step;
        assert_eq!(quantize(y, step), y);
        // Midpoint error is exactly Δ/2 (ties-to-even picks the even side).
        let mid = 3.5 * step;
        assert!((quantize(mid, step) - mid).abs() <= step / 2.0 + 1e-18);
        assert_eq!(quantize(mid, step), 4.0 * step);
        // Half-to-even on the other side.
        assert_eq!(quantize(2.5 * step, step), 2.0 * step);
    }

    #[test]
    fn uniform_quantization_nmse_matches_step_formula() {
        // Uniform data on [−1, 1]: quantization MSE ≈ Δ²/12, signal power
        // 1/3, so NMSE ≈ Δ²/4 → −66.2 dB at b=11 and −84.3 dB at b=14.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (bits, expect_db) in [(11u32, -66.2f64), (14, -84.3)] {
            let step = QuantizerSpec::new(bits, 255.0, QuantizerMode::Uniform).unwrap().step();
            let mut err = 0.0;
            let mut pow = 0.0;
            for &x in &xs {
                let q = quantize(x, step);
                err += (q - x) * (q - x);
                pow += x * x;
            }
            let db = 10.0 * (err / pow).log10();
            assert!((db - expect_db).abs() < 0.5, "b={bits}: {db} dB vs {expect_db} dB");
        }
    }

    #[test]
    fn expand_inverts_compand_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(expand(0.0f64, 255.0), 0.0);
        for _ in 0..500 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let (y, _) = compand(x, 255.0);
            let back = expand(y, 255.0);
            assert!((back - x).abs() < 1e-12, "round trip {x} -> {back}");
        }
    }

    #[test]
    fn mu_law_beats_uniform_on_peaked_data() {
        // Laplacian-like samples concentrate near zero where μ-law spends
        // its resolution.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 200_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(-0.5..0.5);
                // Inverse-CDF Laplace with scale 0.08, clamped to [−1, 1].
                (-0.08 * u.signum() * (1.0 - 2.0 * u.abs()).ln()).clamp(-1.0, 1.0)
            })
            .collect();
        let bits = 6;
        let step = QuantizerSpec::new(bits, 255.0, QuantizerMode::Uniform).unwrap().step();
        let (mut err_mu, mut err_uni) = (0.0, 0.0);
        for &x in &xs {
            let (y, _) = compand(x, 255.0);
            let mu_hat = expand(quantize(y, step), 255.0);
            err_mu += (mu_hat - x) * (mu_hat - x);
            let uni_hat = quantize(x, step);
            err_uni += (uni_hat - x) * (uni_hat - x);
        }
        assert!(err_mu < err_uni, "mu-law {err_mu} vs uniform {err_uni}");
    }

    #[test]
    fn cell_error_bound_from_expand_slope() {
        // |x − F(Q(f(x)))| ≤ (Δ/2)·max|dF/dy| over the cell, checked
        // numerically per cell at b = 5.
        let mu = 255.0;
        let spec = QuantizerSpec::new(5, mu, QuantizerMode::MuLaw).unwrap();
        let step = spec.step();
        let dexpand = |y: f64| (1.0 + mu).powf(y.abs()) * (1.0 + mu).ln() / mu;
        let cells = 2i32.pow(4);
        for cell in -cells..=cells {
            let y_lo = (cell as f64 - 0.5) * step;
            let y_hi = (cell as f64 + 0.5) * step;
            let slope = dexpand(y_lo.abs().max(y_hi.abs()));
            let bound = step / 2.0 * slope;
            for i in 0..50 {
                let y = y_lo + (y_hi - y_lo) * (i as f64 + 0.5) / 50.0;
                if y.abs() > 1.0 {
                    continue;
                }
                let x = expand(y, mu);
                let x_hat = expand(quantize(y, step), mu);
                assert!((x - x_hat).abs() <= bound + 1e-12, "cell {cell}: err {} > {bound}", (x - x_hat).abs());
            }
        }
    }

    #[test]
    fn codeword_passthrough_and_bit_count() {
        let cw: Vec<f64> = vec![0.3, -0.7, 0.001, 0.9];
        let spec = QuantizerSpec::default();
        let out = quantize_codeword(&cw, &spec, 1.0).unwrap();
        assert_eq!(out.values, cw);
        assert_eq!(out.bit_count, 4 * 32);

        let spec6 = QuantizerSpec::new(6, 255.0, QuantizerMode::MuLaw).unwrap();
        let out6 = quantize_codeword(&vec![0.1f64; 128], &spec6, 1.0).unwrap();
        assert_eq!(out6.bit_count, 128 * 6);
    }

    #[test]
    fn codeword_scale_must_be_positive() {
        let spec = QuantizerSpec::new(6, 255.0, QuantizerMode::MuLaw).unwrap();
        assert!(matches!(
            quantize_codeword(&[0.5f64], &spec, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn finer_codeword_quantization_has_smaller_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cw: Vec<f64> = (0..256).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let mut last = f64::INFINITY;
        for bits in [4u32, 6, 8] {
            let spec = QuantizerSpec::new(bits, 255.0, QuantizerMode::MuLaw).unwrap();
            let out = quantize_codeword(&cw, &spec, 1.0).unwrap();
            let err: f64 = out.values.iter().zip(&cw).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(err < last, "error should shrink with bits");
            last = err;
        }
    }
}
