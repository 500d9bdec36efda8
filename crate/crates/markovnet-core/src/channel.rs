//! Synthetic time-correlated, delay-domain-sparse CSI sequences.
//!
//! Each user draws a sparse support of (delay, angle) cells — cell
//! probability and mean power both decay exponentially across the delay
//! axis, mirroring the short delay spreads that make truncation work —
//! then evolves the coefficients on that support as a stationary
//! first-order autoregressive process:
//!
//!   H_t = γ·H_{t−1} + V_t,    V_t ~ CN(0, (1−γ²)·cell power)
//!
//! so sequence power is time-invariant. A per-user log-uniform power factor
//! spreads samples over many orders of magnitude of path loss.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::transform::CsiMatrix;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelConfig {
    /// Transmit antennas (angle axis).
    pub nb: usize,
    /// OFDM subcarriers (full delay axis before truncation).
    pub nf: usize,
    /// Retained delay rows.
    pub rd: usize,
    /// AR(1) coefficient in [0, 1).
    pub gamma_true: f64,
    /// Active (delay, angle) cells per user.
    pub num_paths: usize,
    /// Exponential mean-power decay rate per delay row.
    pub path_decay: f64,
    /// Per-user log-uniform path-loss spread in dB.
    pub power_spread_db: f64,
    /// Sequence length T.
    pub slots: usize,
    pub seed: u64,
    /// Preset name recorded in dataset headers ("custom" when hand-built).
    pub preset: String,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            nb: 32,
            nf: 1024,
            rd: 32,
            gamma_true: 0.9,
            num_paths: 48,
            path_decay: 0.45,
            power_spread_db: 40.0,
            slots: 10,
            seed: 0,
            preset: "custom".to_string(),
        }
    }
}

impl ChannelConfig {
    /// Low-mobility preset: γ = 0.99. A synthetic stand-in, not a measured
    /// indoor channel.
    pub fn slow() -> Self {
        ChannelConfig { gamma_true: 0.99, preset: "slow".into(), ..Default::default() }
    }

    /// Higher-mobility preset: γ = 0.9.
    pub fn fast() -> Self {
        ChannelConfig { gamma_true: 0.9, preset: "fast".into(), ..Default::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "slow" => Ok(Self::slow()),
            "fast" => Ok(Self::fast()),
            other => Err(Error::config(format!("unknown channel preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nb == 0 || self.rd == 0 || self.nf == 0 || self.slots == 0 {
            return Err(Error::config("channel extents must be positive".to_string()));
        }
        if self.rd > self.nf {
            return Err(Error::config(format!("rd {} exceeds nf {}", self.rd, self.nf)));
        }
        if !(0.0..1.0).contains(&self.gamma_true) {
            return Err(Error::config(format!(
                "gamma_true must lie in [0, 1), got {}",
                self.gamma_true
            )));
        }
        if self.num_paths == 0 || self.num_paths > self.rd * self.nb {
            return Err(Error::config(format!(
                "num_paths {} outside 1..={}",
                self.num_paths,
                self.rd * self.nb
            )));
        }
        if self.power_spread_db < 0.0 {
            return Err(Error::config("power_spread_db must be non-negative".to_string()));
        }
        if self.path_decay < 0.0 {
            return Err(Error::config("path_decay must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// A batch of K length-T sequences of Rd×Nb angular-delay CSI matrices.
#[derive(Clone, Debug)]
pub struct CsiSequence<R> {
    pub config: ChannelConfig,
    pub k: usize,
    data: Vec<Complex<R>>,
    /// Per-sample UE power factor (amplitude scale).
    pub power_scales: Vec<R>,
    /// Per-sample derived RNG seeds.
    pub sample_seeds: Vec<u64>,
}

impl<R: Real> CsiSequence<R> {
    pub fn slots(&self) -> usize {
        self.config.slots
    }

    pub fn rd(&self) -> usize {
        self.config.rd
    }

    pub fn nb(&self) -> usize {
        self.config.nb
    }

    fn slot_len(&self) -> usize {
        self.config.rd * self.config.nb
    }

    pub fn slot(&self, sample: usize, t: usize) -> &[Complex<R>] {
        let len = self.slot_len();
        let base = (sample * self.config.slots + t) * len;
        &self.data[base..base + len]
    }

    /// Copy one snapshot out as a matrix.
    pub fn slot_matrix(&self, sample: usize, t: usize) -> CsiMatrix<R> {
        CsiMatrix::from_vec(self.config.rd, self.config.nb, self.slot(sample, t).to_vec())
            .expect("stored slots are consistent")
    }

    pub(crate) fn from_raw(
        config: ChannelConfig,
        k: usize,
        data: Vec<Complex<R>>,
        power_scales: Vec<R>,
        sample_seeds: Vec<u64>,
    ) -> Self {
        assert_eq!(data.len(), k * config.slots * config.rd * config.nb);
        CsiSequence { config, k, data, power_scales, sample_seeds }
    }

    pub(crate) fn raw(&self) -> &[Complex<R>] {
        &self.data
    }

    /// Borrow two datasets' worth of views: the first `k` samples and the rest.
    pub fn split_at(&self, k: usize) -> (CsiSequence<R>, CsiSequence<R>) {
        assert!(k <= self.k);
        let cut = k * self.slots() * self.slot_len();
        let a = CsiSequence {
            config: self.config.clone(),
            k,
            data: self.data[..cut].to_vec(),
            power_scales: self.power_scales[..k].to_vec(),
            sample_seeds: self.sample_seeds[..k].to_vec(),
        };
        let b = CsiSequence {
            config: self.config.clone(),
            k: self.k - k,
            data: self.data[cut..].to_vec(),
            power_scales: self.power_scales[k..].to_vec(),
            sample_seeds: self.sample_seeds[k..].to_vec(),
        };
        (a, b)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for sample `k`, independent of generation order.
pub(crate) fn derived_seed(seed: u64, k: usize) -> u64 {
    splitmix64(seed ^ splitmix64(k as u64 + 1))
}

/// Generate `k` independent users. Sample generation is parallel with
/// per-sample derived seeds, so results do not depend on the worker count.
pub fn generate<R: Real>(config: &ChannelConfig, k: usize) -> Result<CsiSequence<R>> {
    config.validate()?;
    if k == 0 {
        return Err(Error::config("sample count must be at least 1".to_string()));
    }
    let cells = config.rd * config.nb;
    let per_sample = config.slots * cells;
    let mut data = vec![Complex::new(R::zero(), R::zero()); k * per_sample];
    let mut power_scales = vec![R::zero(); k];
    let seeds: Vec<u64> = (0..k).map(|i| derived_seed(config.seed, i)).collect();

    data.par_chunks_mut(per_sample)
        .zip(power_scales.par_iter_mut())
        .zip(seeds.par_iter())
        .for_each(|((chunk, scale), &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            // Distinct support cells, drawn with probability proportional
            // to the delay row's mean power.
            let row_weight: Vec<f64> = (0..config.rd)
                .map(|r| (-config.path_decay * r as f64).exp())
                .collect();
            let weights: Vec<f64> = (0..cells).map(|c| row_weight[c / config.nb]).collect();
            let dist = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
            let mut support: Vec<usize> = Vec::with_capacity(config.num_paths);
            let mut taken = vec![false; cells];
            if config.num_paths * 2 >= cells {
                // Dense request: weighted rejection would thrash.
                support = rand::seq::index::sample(&mut rng, cells, config.num_paths).into_vec();
            } else {
                while support.len() < config.num_paths {
                    let cell = rng.sample(&dist);
                    if !taken[cell] {
                        taken[cell] = true;
                        support.push(cell);
                    }
                }
            }
            let powers: Vec<f64> = support
                .iter()
                .map(|&cell| row_weight[cell / config.nb])
                .collect();

            let ue_db = if config.power_spread_db > 0.0 {
                rng.gen_range(-config.power_spread_db / 2.0..config.power_spread_db / 2.0)
            } else {
                0.0
            };
            let ue_scale = 10f64.powf(ue_db / 20.0);
            *scale = R::of(ue_scale);

            let gamma = config.gamma_true;
            let innovation = (1.0 - gamma * gamma).sqrt();
            let mut state: Vec<Complex<f64>> = support
                .iter()
                .zip(&powers)
                .map(|(_, &p)| {
                    let amp = (p / 2.0).sqrt();
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex::new(re * amp, im * amp)
                })
                .collect();

            for t in 0..config.slots {
                if t > 0 {
                    for (s, &p) in state.iter_mut().zip(&powers) {
                        let amp = innovation * (p / 2.0).sqrt();
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        *s = *s * gamma + Complex::new(re * amp, im * amp);
                    }
                }
                let slot = &mut chunk[t * cells..(t + 1) * cells];
                for (&cell, s) in support.iter().zip(&state) {
                    slot[cell] = Complex::new(R::of(s.re * ue_scale), R::of(s.im * ue_scale));
                }
            }
        });

    Ok(CsiSequence::from_raw(config.clone(), k, data, power_scales, seeds))
}

/// Average lag-1 normalized correlation Re Tr E{H_t·H_{t−1}ᴴ} / E‖H‖².
///
/// Shared by the channel tests and the γ estimator's own diagnostics.
pub fn lag1_correlation<R: Real>(seq: &CsiSequence<R>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..seq.k {
        for t in 1..seq.slots() {
            let cur = seq.slot(k, t);
            let prev = seq.slot(k, t - 1);
            for (a, b) in cur.iter().zip(prev) {
                num += a.re.as_f64() * b.re.as_f64() + a.im.as_f64() * b.im.as_f64();
                den += b.re.as_f64() * b.re.as_f64() + b.im.as_f64() * b.im.as_f64();
            }
        }
    }
    num / den
}
