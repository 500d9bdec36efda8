//! Spatial-frequency ↔ truncated angular-delay conversion and the
//! complex ↔ real-tensor bridge the networks consume.
//!
//! The 2D DFT uses precomputed unitary matrices and plain matrix products;
//! at Nf = 1024 the transform runs once per sample at generation time, and
//! exact unitarity is easier to audit than an FFT.

use num_complex::Complex;

use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Complex angular-delay CSI snapshot (Rd×Nb, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct CsiMatrix<R> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<R>>,
}

impl<R: Real> CsiMatrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsiMatrix { rows, cols, data: vec![Complex::new(R::zero(), R::zero()); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<R>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(CsiMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex<R>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<R>] {
        &mut self.data
    }

    pub fn frobenius_sq(&self) -> R {
        self.data.iter().map(|c| c.re * c.re + c.im * c.im).sum()
    }

    /// `self − γ·other`, the linear-prediction residual.
    pub fn sub_scaled(&self, gamma: R, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::contract("matrix dimension mismatch".to_string()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| Complex::new(a.re - gamma * b.re, a.im - gamma * b.im))
            .collect();
        Ok(CsiMatrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self + γ·other`, the reconstruction update.
    pub fn add_scaled(&self, gamma: R, other: &Self) -> Result<Self> {
        self.sub_scaled(-gamma, other)
    }
}

/// Unitary DFT matrix pair for the delay (Nf) and angle (Nb) axes, stored as
/// separate real/imaginary planes so products run on the real GEMM kernels.
pub struct DftPair<R> {
    nf: usize,
    nb: usize,
    fd_re: Vec<R>,
    fd_im: Vec<R>,
    fa_re: Vec<R>,
    fa_im: Vec<R>,
}

fn dft_matrix<R: Real>(n: usize) -> (Vec<R>, Vec<R>) {
    let mut re = vec![R::zero(); n * n];
    let mut im = vec![R::zero(); n * n];
    let scale = 1.0 / (n as f64).sqrt();
    for j in 0..n {
        for k in 0..n {
            // exp(-2πi·jk/n)/√n; reduce jk mod n first to keep the angle small.
            let phase = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
            re[j * n + k] = R::of(phase.cos() * scale);
            im[j * n + k] = R::of(phase.sin() * scale);
        }
    }
    (re, im)
}

/// `out = op_a(A)·op_b(B)` for complex matrices held as split re/im planes,
/// via four real GEMMs. `conj_*` conjugates, `trans_*` transposes.
#[allow(clippy::too_many_arguments)]
fn complex_gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a_re: &[R],
    a_im: &[R],
    trans_a: bool,
    conj_a: bool,
    b_re: &[R],
    b_im: &[R],
    trans_b: bool,
    conj_b: bool,
    out_re: &mut [R],
    out_im: &mut [R],
) {
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let sa = if conj_a { -R::one() } else { R::one() };
    let sb = if conj_b { -R::one() } else { R::one() };
    // re = Ar·Br − (±Ai)·(±Bi); im = Ar·(±Bi) + (±Ai)·Br
    R::gemm_strided(m, k, n, R::one(), a_re, rsa, csa, b_re, rsb, csb, R::zero(), out_re);
    R::gemm_strided(m, k, n, -(sa * sb), a_im, rsa, csa, b_im, rsb, csb, R::one(), out_re);
    R::gemm_strided(m, k, n, sb, a_re, rsa, csa, b_im, rsb, csb, R::zero(), out_im);
    R::gemm_strided(m, k, n, sa, a_im, rsa, csa, b_re, rsb, csb, R::one(), out_im);
}

fn split_planes<R: Real>(m: &[Complex<R>]) -> (Vec<R>, Vec<R>) {
    (m.iter().map(|c| c.re).collect(), m.iter().map(|c| c.im).collect())
}

impl<R: Real> DftPair<R> {
    pub fn new(nf: usize, nb: usize) -> Self {
        let (fd_re, fd_im) = dft_matrix(nf);
        let (fa_re, fa_im) = dft_matrix(nb);
        DftPair { nf, nb, fd_re, fd_im, fa_re, fa_im }
    }

    /// `H_d = F_dᴴ·H_f·F_a`, then keep the first `rd` delay rows.
    pub fn forward_dft(&self, hf: &CsiMatrix<R>, rd: usize) -> Result<CsiMatrix<R>> {
        if hf.rows() != self.nf || hf.cols() != self.nb {
            return Err(Error::contract(format!(
                "spatial-frequency CSI must be {}x{}, got {}x{}",
                self.nf,
                self.nb,
                hf.rows(),
                hf.cols()
            )));
        }
        if rd > self.nf {
            return Err(Error::contract(format!("rd {rd} exceeds nf {}", self.nf)));
        }
        let (h_re, h_im) = split_planes(hf.data());
        // t = F_dᴴ·H_f (nf×nb)
        let mut t_re = vec![R::zero(); self.nf * self.nb];
        let mut t_im = vec![R::zero(); self.nf * self.nb];
        complex_gemm(
            self.nf, self.nf, self.nb,
            &self.fd_re, &self.fd_im, true, true,
            &h_re, &h_im, false, false,
            &mut t_re, &mut t_im,
        );
        // full = t·F_a (nf×nb), truncated to rd rows
        let mut o_re = vec![R::zero(); self.nf * self.nb];
        let mut o_im = vec![R::zero(); self.nf * self.nb];
        complex_gemm(
            self.nf, self.nb, self.nb,
            &t_re, &t_im, false, false,
            &self.fa_re, &self.fa_im, false, false,
            &mut o_re, &mut o_im,
        );
        let data = (0..rd * self.nb).map(|i| Complex::new(o_re[i], o_im[i])).collect();
        CsiMatrix::from_vec(rd, self.nb, data)
    }

    /// Zero-pad the delay rows back to Nf and apply `H_f = F_d·H_d·F_aᴴ`.
    pub fn to_spatial_frequency(&self, hd: &CsiMatrix<R>) -> Result<CsiMatrix<R>> {
        if hd.cols() != self.nb {
            return Err(Error::contract(format!(
                "angular-delay CSI must have {} columns, got {}",
                self.nb,
                hd.cols()
            )));
        }
        if hd.rows() > self.nf {
            return Err(Error::contract(format!("rd {} exceeds nf {}", hd.rows(), self.nf)));
        }
        let mut h_re = vec![R::zero(); self.nf * self.nb];
        let mut h_im = vec![R::zero(); self.nf * self.nb];
        for (i, c) in hd.data().iter().enumerate() {
            h_re[i] = c.re;
            h_im[i] = c.im;
        }
        let mut t_re = vec![R::zero(); self.nf * self.nb];
        let mut t_im = vec![R::zero(); self.nf * self.nb];
        complex_gemm(
            self.nf, self.nf, self.nb,
            &self.fd_re, &self.fd_im, false, false,
            &h_re, &h_im, false, false,
            &mut t_re, &mut t_im,
        );
        let mut o_re = vec![R::zero(); self.nf * self.nb];
        let mut o_im = vec![R::zero(); self.nf * self.nb];
        // t·F_aᴴ = t·conj(F_a)ᵀ
        complex_gemm(
            self.nf, self.nb, self.nb,
            &t_re, &t_im, false, false,
            &self.fa_re, &self.fa_im, true, true,
            &mut o_re, &mut o_im,
        );
        let data = (0..self.nf * self.nb).map(|i| Complex::new(o_re[i], o_im[i])).collect();
        CsiMatrix::from_vec(self.nf, self.nb, data)
    }
}

/// Split a complex snapshot into the `[2, Rd, Nb]` real tensor the networks
/// consume (channel 0 real, channel 1 imaginary).
pub fn complex_to_real<R: Real>(csi: &CsiMatrix<R>) -> Tensor<R> {
    let n = csi.rows() * csi.cols();
    let mut data = vec![R::zero(); 2 * n];
    for (i, c) in csi.data().iter().enumerate() {
        data[i] = c.re;
        data[n + i] = c.im;
    }
    Tensor::from_vec(&[2, csi.rows(), csi.cols()], data).expect("shape consistent")
}

/// Inverse of [`complex_to_real`].
pub fn real_to_complex<R: Real>(t: &Tensor<R>) -> Result<CsiMatrix<R>> {
    let [c, rd, nb]: [usize; 3] = t
        .shape()
        .try_into()
        .map_err(|_| Error::contract(format!("expected [2, rd, nb] tensor, got {:?}", t.shape())))?;
    if c != 2 {
        return Err(Error::contract(format!("expected 2 channels, got {c}")));
    }
    let n = rd * nb;
    let data = (0..n).map(|i| Complex::new(t.data()[i], t.data()[n + i])).collect();
    CsiMatrix::from_vec(rd, nb, data)
}

/// Global range normalization into [−1, 1] by one training-set scale.
///
/// Out-of-range values on held-out data are counted, never silently
/// clipped: the decoder must see the same scale the encoder saw.
#[derive(Debug)]
pub struct RangeNormalizer<R> {
    scale: R,
    clip_count: std::sync::atomic::AtomicU64,
}

impl<R: Real> Clone for RangeNormalizer<R> {
    fn clone(&self) -> Self {
        RangeNormalizer {
            scale: self.scale,
            clip_count: std::sync::atomic::AtomicU64::new(self.clip_count()),
        }
    }
}

impl<R: Real> RangeNormalizer<R> {
    pub fn new(scale: R) -> Result<Self> {
        if scale <= R::zero() || !scale.is_finite() {
            return Err(Error::contract(format!("range scale must be positive, got {scale}")));
        }
        Ok(RangeNormalizer { scale, clip_count: std::sync::atomic::AtomicU64::new(0) })
    }

    /// Scale = max |component| over the training set.
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a Tensor<R>>) -> Result<Self> {
        let mut scale = R::zero();
        for t in tensors {
            for &v in t.data() {
                scale = scale.max(v.abs());
            }
        }
        Self::new(scale)
    }

    pub fn scale(&self) -> R {
        self.scale
    }

    pub fn clip_count(&self) -> u64 {
        self.clip_count.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn normalize(&self, t: &Tensor<R>) -> Tensor<R> {
        let mut clipped = 0u64;
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let y = v / self.scale;
                if y.abs() > R::one() {
                    clipped += 1;
                }
                y
            })
            .collect();
        if clipped > 0 {
            self.clip_count.fetch_add(clipped, std::sync::atomic::Ordering::Relaxed);
        }
        Tensor::from_vec(t.shape(), data).expect("shape unchanged")
    }

    pub fn denormalize(&self, t: &Tensor<R>) -> Tensor<R> {
        let data = t.data().iter().map(|&v| v * self.scale).collect();
        Tensor::from_vec(t.shape(), data).expect("shape unchanged")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate, ChannelConfig};

    fn small_dft() -> DftPair<f64> {
        DftPair::new(64, 8)
    }

    #[test]
    fn zero_maps_to_zero() {
        let dft = small_dft();
        let z = CsiMatrix::<f64>::zeros(64, 8);
        let hd = dft.forward_dft(&z, 16).unwrap();
        assert!(hd.frobenius_sq() == 0.0);
    }

    #[test]
    fn dft_is_unitary_and_invertible() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let dft = small_dft();
        let hf = CsiMatrix::from_vec(
            64,
            8,
            (0..64 * 8)
                .map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        // Full (untruncated) transform preserves the Frobenius norm.
        let hd = dft.forward_dft(&hf, 64).unwrap();
        assert!((hd.frobenius_sq() - hf.frobenius_sq()).abs() < 1e-10);
        // And inverts exactly.
        let back = dft.to_spatial_frequency(&hd).unwrap();
        let err: f64 = back
            .data()
            .iter()
            .zip(hf.data())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        assert!(err.sqrt() < 1e-10, "round-trip error {err}");
    }

    #[test]
    fn impulse_inside_truncation_is_lossless() {
        let dft = small_dft();
        // Build H_f from a single delay-domain impulse at (r, a) = (5, 3).
        let mut hd0 = CsiMatrix::<f64>::zeros(16, 8);
        hd0.data_mut()[5 * 8 + 3] = Complex::new(1.0, -0.5);
        let hf = dft.to_spatial_frequency(&hd0).unwrap();
        let hd = dft.forward_dft(&hf, 16).unwrap();
        let err: f64 = hd
            .data()
            .iter()
            .zip(hd0.data())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        assert!(err.sqrt() < 1e-10);
        // Energy fully retained inside the first Rd rows.
        assert!((hd.frobenius_sq() - hf.frobenius_sq()).abs() < 1e-10);
    }

    #[test]
    fn generated_channels_survive_truncation() {
        // Support lives inside the retained rows by construction, so the
        // round trip through the full-size grid keeps ≥ 99.9% energy.
        let cfg = ChannelConfig { nf: 64, nb: 8, rd: 16, slots: 1, num_paths: 12, seed: 4, ..Default::default() };
        let seq = generate::<f64>(&cfg, 3).unwrap();
        let dft = small_dft();
        for k in 0..3 {
            let hd0 = seq.slot_matrix(k, 0);
            let hf = dft.to_spatial_frequency(&hd0).unwrap();
            let hd = dft.forward_dft(&hf, 16).unwrap();
            let kept = hd.frobenius_sq();
            let total = hf.frobenius_sq();
            assert!(kept / total >= 0.999, "energy ratio {}", kept / total);
            let err: f64 = hd
                .data()
                .iter()
                .zip(hd0.data())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-10, "round trip error {err}");
        }
    }

    #[test]
    fn complex_real_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = CsiMatrix::from_vec(
            4,
            3,
            (0..12)
                .map(|_| Complex::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect(),
        )
        .unwrap();
        let t = complex_to_real(&m);
        assert_eq!(t.shape(), &[2, 4, 3]);
        let back = real_to_complex(&t).unwrap();
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn purely_real_input_has_zero_imaginary_channel() {
        let m = CsiMatrix::from_vec(2, 2, vec![Complex::new(1.0, 0.0); 4]).unwrap();
        let t = complex_to_real(&m);
        assert!(t.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizer_counts_clips_instead_of_clipping() {
        let train = Tensor::from_vec(&[1, 2, 2], vec![0.5f64, -1.0, 0.25, 0.75]).unwrap();
        let norm = RangeNormalizer::fit([&train]).unwrap();
        assert_eq!(norm.scale(), 1.0);
        // Held-out sample at twice the training max.
        let test = Tensor::from_vec(&[1, 2, 2], vec![2.0f64, 0.0, 0.0, -0.5]).unwrap();
        let out = norm.normalize(&test);
        assert_eq!(out.data()[0], 2.0);
        assert_eq!(norm.clip_count(), 1);
    }

    #[test]
    fn zero_scale_is_rejected() {
        assert!(RangeNormalizer::<f64>::new(0.0).is_err());
        let zero = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(RangeNormalizer::fit([&zero]).is_err());
    }
}
