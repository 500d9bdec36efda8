//! 2D cross-correlation kernels (stride 1).
//!
//! Channel counts in this crate are small (2..16), which makes im2col+GEMM
//! memory-bound; instead each sample is convolved directly against padded
//! input planes, which fit in cache. The row accumulator is const-generic in
//! the output width so the 32-wide case (every network here) stays in
//! registers across all kernel taps.
//!
//! Batch samples are processed in fixed-size chunks under rayon; kernel and
//! bias gradients are accumulated per chunk and then reduced in chunk order,
//! so results are bit-identical for any worker count.

use rayon::prelude::*;

use crate::scalar::Real;
use crate::{Error, Result};

/// Zero same-padding (output spatial size equals input) or no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Samples per parallel work unit. Fixed so that gradient reduction order
/// does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        bias_shape: &[usize],
        padding: Padding,
    ) -> Result<ConvDims> {
        let [n, cin, h, w]: [usize; 4] = input_shape
            .try_into()
            .map_err(|_| Error::contract(format!("conv2d input must be 4-D, got {input_shape:?}")))?;
        let [cout, kcin, kh, kw]: [usize; 4] = kernel_shape
            .try_into()
            .map_err(|_| Error::contract(format!("conv2d kernels must be 4-D, got {kernel_shape:?}")))?;
        if kcin != cin {
            return Err(Error::contract(format!(
                "conv2d channel mismatch: input has {cin} channels, kernels expect {kcin}"
            )));
        }
        if bias_shape != [cout] {
            return Err(Error::contract(format!(
                "conv2d bias shape {bias_shape:?} does not match {cout} output channels"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        let (ph, pw) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::contract(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let oh = h + 2 * ph - kh + 1;
        let ow = w + 2 * pw - kw + 1;
        Ok(ConvDims { n, cin, h, w, cout, kh, kw, ph, pw, oh, ow })
    }

    fn in_stride(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_stride(&self) -> usize {
        self.cout * self.oh * self.ow
    }
}

/// Copy `src` (`c` planes of h×w) into `dst` with a zero border of (ph, pw).
fn pad_planes<R: Real>(src: &[R], c: usize, h: usize, w: usize, ph: usize, pw: usize, dst: &mut [R]) {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    dst.fill(R::zero());
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let out = &mut dst[ci * hp * wp..(ci + 1) * hp * wp];
        for y in 0..h {
            out[(y + ph) * wp + pw..(y + ph) * wp + pw + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
    }
}

/// `out_plane += kernel(kh×kw) ⋆ ip`, one input plane against one output
/// plane, output rows of compile-time width held in registers.
fn taps_fixed<R: Real, const OW: usize>(
    out_plane: &mut [R],
    ip: &[R],
    wp: usize,
    kvals: &[R],
    kh: usize,
    kw: usize,
    oh: usize,
) {
    for y in 0..oh {
        let mut acc = [R::zero(); OW];
        acc.copy_from_slice(&out_plane[y * OW..(y + 1) * OW]);
        for ky in 0..kh {
            let irow = &ip[(y + ky) * wp..(y + ky) * wp + kw - 1 + OW];
            for kx in 0..kw {
                let wgt = kvals[ky * kw + kx];
                let win = &irow[kx..kx + OW];
                for i in 0..OW {
                    acc[i] = acc[i] + wgt * win[i];
                }
            }
        }
        out_plane[y * OW..(y + 1) * OW].copy_from_slice(&acc);
    }
}

fn taps_dyn<R: Real>(out_plane: &mut [R], ip: &[R], wp: usize, kvals: &[R], kh: usize, kw: usize, oh: usize, ow: usize) {
    for y in 0..oh {
        let orow = &mut out_plane[y * ow..(y + 1) * ow];
        for ky in 0..kh {
            for kx in 0..kw {
                let wgt = kvals[ky * kw + kx];
                let win = &ip[(y + ky) * wp + kx..(y + ky) * wp + kx + ow];
                for (o, &v) in orow.iter_mut().zip(win) {
                    *o += wgt * v;
                }
            }
        }
    }
}

#[inline]
fn taps<R: Real>(out_plane: &mut [R], ip: &[R], wp: usize, kvals: &[R], kh: usize, kw: usize, oh: usize, ow: usize) {
    match ow {
        32 => taps_fixed::<R, 32>(out_plane, ip, wp, kvals, kh, kw, oh),
        64 => taps_fixed::<R, 64>(out_plane, ip, wp, kvals, kh, kw, oh),
        _ => taps_dyn(out_plane, ip, wp, kvals, kh, kw, oh, ow),
    }
}

/// `dk[ky,kx] += Σ_y go_row(y) · ip window`, one accumulator per output
/// column so the FMA chains stay independent.
fn dk_taps<R: Real, const OW: usize>(
    go: &[R],
    ip: &[R],
    wp: usize,
    dk: &mut [R],
    kh: usize,
    kw: usize,
    oh: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let mut acc = [R::zero(); OW];
            for y in 0..oh {
                let grow = &go[y * OW..(y + 1) * OW];
                let win = &ip[(y + ky) * wp + kx..(y + ky) * wp + kx + OW];
                for i in 0..OW {
                    acc[i] = acc[i] + grow[i] * win[i];
                }
            }
            let mut s = R::zero();
            for &a in acc.iter() {
                s += a;
            }
            dk[ky * kw + kx] += s;
        }
    }
}

fn dk_taps_dyn<R: Real>(go: &[R], ip: &[R], wp: usize, dk: &mut [R], kh: usize, kw: usize, oh: usize, ow: usize) {
    for ky in 0..kh {
        for kx in 0..kw {
            let mut acc = R::zero();
            for y in 0..oh {
                let grow = &go[y * ow..(y + 1) * ow];
                let win = &ip[(y + ky) * wp + kx..(y + ky) * wp + kx + ow];
                for (&g, &v) in grow.iter().zip(win) {
                    acc += g * v;
                }
            }
            dk[ky * kw + kx] += acc;
        }
    }
}

/// Batched forward pass.
pub(crate) fn forward<R: Real>(x: &[R], kernels: &[R], bias: &[R], d: &ConvDims) -> Vec<R> {
    let mut out = vec![R::zero(); d.n * d.out_stride()];
    let (hp, wp) = (d.h + 2 * d.ph, d.w + 2 * d.pw);
    let kk = d.kh * d.kw;
    x.par_chunks(CHUNK * d.in_stride())
        .zip(out.par_chunks_mut(CHUNK * d.out_stride()))
        .for_each(|(xs, os)| {
            let mut padded = vec![R::zero(); d.cin * hp * wp];
            for (xi, oi) in xs.chunks(d.in_stride()).zip(os.chunks_mut(d.out_stride())) {
                pad_planes(xi, d.cin, d.h, d.w, d.ph, d.pw, &mut padded);
                for co in 0..d.cout {
                    let out_plane = &mut oi[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
                    out_plane.fill(bias[co]);
                    for ci in 0..d.cin {
                        let ip = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                        let kvals = &kernels[(co * d.cin + ci) * kk..(co * d.cin + ci + 1) * kk];
                        taps(out_plane, ip, wp, kvals, d.kh, d.kw, d.oh, d.ow);
                    }
                }
            }
        });
    out
}

/// Batched backward pass; returns (d_input, d_kernels, d_bias).
pub(crate) fn backward<R: Real>(
    x: &[R],
    kernels: &[R],
    dout: &[R],
    d: &ConvDims,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let (hp, wp) = (d.h + 2 * d.ph, d.w + 2 * d.pw);
    // d_input is a correlation of d_out with the flipped kernels; for odd
    // kernels the required zero padding is (kh-1-ph, kw-1-pw).
    let (gph, gpw) = (d.kh - 1 - d.ph, d.kw - 1 - d.pw);
    let (ghp, gwp) = (d.oh + 2 * gph, d.ow + 2 * gpw);
    let kk = d.kh * d.kw;
    let mut dx = vec![R::zero(); x.len()];

    // Per-chunk partial kernel/bias gradients, reduced in chunk order below.
    let partials: Vec<(Vec<R>, Vec<R>)> = x
        .par_chunks(CHUNK * d.in_stride())
        .zip(dout.par_chunks(CHUNK * d.out_stride()))
        .zip(dx.par_chunks_mut(CHUNK * d.in_stride()))
        .map(|((xs, dos), dxs)| {
            let mut ip = vec![R::zero(); d.cin * hp * wp];
            let mut gp = vec![R::zero(); d.cout * ghp * gwp];
            let mut kflip = vec![R::zero(); kk];
            let mut dk = vec![R::zero(); d.cout * d.cin * kk];
            let mut db = vec![R::zero(); d.cout];
            for ((xi, doi), dxi) in xs
                .chunks(d.in_stride())
                .zip(dos.chunks(d.out_stride()))
                .zip(dxs.chunks_mut(d.in_stride()))
            {
                pad_planes(xi, d.cin, d.h, d.w, d.ph, d.pw, &mut ip);
                pad_planes(doi, d.cout, d.oh, d.ow, gph, gpw, &mut gp);

                for co in 0..d.cout {
                    let go = &doi[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
                    let gplane = &gp[co * ghp * gwp..(co + 1) * ghp * gwp];
                    let mut bsum = R::zero();
                    for &g in go {
                        bsum += g;
                    }
                    db[co] += bsum;

                    for ci in 0..d.cin {
                        let iplane = &ip[ci * hp * wp..(ci + 1) * hp * wp];
                        let kbase = (co * d.cin + ci) * kk;
                        let dplane = &mut dxi[ci * d.h * d.w..(ci + 1) * d.h * d.w];

                        match d.ow {
                            32 => dk_taps::<R, 32>(go, iplane, wp, &mut dk[kbase..kbase + kk], d.kh, d.kw, d.oh),
                            64 => dk_taps::<R, 64>(go, iplane, wp, &mut dk[kbase..kbase + kk], d.kh, d.kw, d.oh),
                            _ => dk_taps_dyn(go, iplane, wp, &mut dk[kbase..kbase + kk], d.kh, d.kw, d.oh, d.ow),
                        }

                        for ky in 0..d.kh {
                            for kx in 0..d.kw {
                                kflip[ky * d.kw + kx] = kernels[kbase + (d.kh - 1 - ky) * d.kw + (d.kw - 1 - kx)];
                            }
                        }
                        taps(dplane, gplane, gwp, &kflip, d.kh, d.kw, d.h, d.w);
                    }
                }
            }
            (dk, db)
        })
        .collect();

    let mut dk = vec![R::zero(); d.cout * d.cin * kk];
    let mut db = vec![R::zero(); d.cout];
    for (pk, pb) in partials {
        for (a, b) in dk.iter_mut().zip(pk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dx, dk, db)
}
