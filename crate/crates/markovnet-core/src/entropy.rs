//! Plugin (maximum-likelihood) entropy and conditional entropy of quantized
//! CSI elements across feedback intervals δ.
//!
//! Joint histograms are sparse hash tables: a 14-bit alphabet squared is far
//! too large to materialize, while the occupied bins at 10⁴–10⁵ samples are
//! few. No bias correction is applied; occupied-bin counts are reported so
//! the reader can judge undersampling.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::channel::CsiSequence;
use crate::scalar::Real;
use crate::{Error, Result};

/// Sparse joint/marginal histogram over uniformly quantized value pairs.
#[derive(Clone, Debug)]
pub struct HistogramEstimator {
    bits: u32,
    lo: f64,
    hi: f64,
    joint: HashMap<u64, u64>,
    marginal_prev: HashMap<u32, u64>,
    marginal_cur: HashMap<u32, u64>,
    sample_count: u64,
}

impl HistogramEstimator {
    /// `lo..hi` is the quantizer range (global dataset min/max).
    pub fn new(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(Error::config(format!("histogram bits must be 1..=24, got {bits}")));
        }
        if !(hi > lo) {
            return Err(Error::config(format!("empty quantizer range [{lo}, {hi}]")));
        }
        Ok(HistogramEstimator {
            bits,
            lo,
            hi,
            joint: HashMap::new(),
            marginal_prev: HashMap::new(),
            marginal_cur: HashMap::new(),
            sample_count: 0,
        })
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    fn code(&self, x: f64) -> u32 {
        let levels = self.levels() as f64;
        let cell = ((x - self.lo) / (self.hi - self.lo) * levels).floor();
        cell.clamp(0.0, levels - 1.0) as u32
    }

    pub fn add_pair(&mut self, prev: f64, cur: f64) {
        let (cp, cc) = (self.code(prev), self.code(cur));
        *self.joint.entry(((cp as u64) << 32) | cc as u64).or_insert(0) += 1;
        *self.marginal_prev.entry(cp).or_insert(0) += 1;
        *self.marginal_cur.entry(cc).or_insert(0) += 1;
        self.sample_count += 1;
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn occupied_joint_bins(&self) -> usize {
        self.joint.len()
    }

    pub fn occupied_marginal_bins(&self) -> usize {
        self.marginal_cur.len()
    }

    /// H(X_{t−δ}, X_t) in bits.
    pub fn joint_entropy(&self) -> f64 {
        plugin_entropy(self.joint.values(), self.sample_count)
    }

    /// H(X_{t−δ}) in bits.
    pub fn prev_entropy(&self) -> f64 {
        plugin_entropy(self.marginal_prev.values(), self.sample_count)
    }

    /// H(X_t) in bits.
    pub fn cur_entropy(&self) -> f64 {
        plugin_entropy(self.marginal_cur.values(), self.sample_count)
    }

    /// H(X_t | X_{t−δ}) = H(joint) − H(X_{t−δ}), the exact plugin identity.
    pub fn conditional_entropy(&self) -> f64 {
        self.joint_entropy() - self.prev_entropy()
    }
}

/// −Σ p·log₂p over occupied bins, summed in sorted-count order so the
/// result does not depend on hash iteration order.
fn plugin_entropy<'a>(counts: impl Iterator<Item = &'a u64>, total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut sorted: Vec<u64> = counts.copied().collect();
    sorted.sort_unstable();
    let n = total as f64;
    let mut h = 0.0;
    for c in sorted {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

fn data_range<R: Real>(values: impl Iterator<Item = R>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let x = v.as_f64();
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::contract("empty input".to_string()));
    }
    if hi == lo {
        // Constant data occupies a single bin regardless of range width.
        hi = lo + 1.0;
    }
    Ok((lo, hi))
}

/// Plugin entropy (bits/element) of one scalar stream under a `bits`-wide
/// uniform quantizer spanning the data range.
pub fn element_entropy<R: Real>(samples: &[R], bits: u32) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::contract(format!(
            "element_entropy needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (lo, hi) = data_range(samples.iter().copied())?;
    let mut est = HistogramEstimator::new(bits, lo, hi)?;
    for &s in samples {
        est.add_pair(s.as_f64(), s.as_f64());
    }
    Ok(est.cur_entropy())
}

/// Plugin conditional entropy H(X_t | X_{t−δ}) of scalar pairs.
pub fn conditional_entropy<R: Real>(pairs: &[(R, R)], bits: u32) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::contract(format!(
            "conditional_entropy needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let (lo, hi) = data_range(pairs.iter().flat_map(|&(a, b)| [a, b]))?;
    let mut est = HistogramEstimator::new(bits, lo, hi)?;
    for &(p, c) in pairs {
        est.add_pair(p.as_f64(), c.as_f64());
    }
    Ok(est.conditional_entropy())
}

/// One row of the feedback-interval sweep. `delta: None` is the δ = ∞ row:
/// unconditional entropy, i.e. feedback with no prior.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub delta: Option<usize>,
    pub bits: u32,
    pub avg_bits_per_element: f64,
    pub avg_occupied_bins: f64,
    pub samples: u64,
}

/// Average per-element conditional entropy over all 2·Rd·Nb real CSI
/// components (real and imaginary parts treated individually), for each
/// feedback interval, plus the δ = ∞ row. The element quantizer range is
/// the global dataset min/max.
pub fn entropy_sweep<R: Real>(
    dataset: &CsiSequence<R>,
    deltas: &[usize],
    bits: u32,
) -> Result<Vec<SweepRow>> {
    let slots = dataset.slots();
    for &d in deltas {
        if d == 0 || d >= slots {
            return Err(Error::contract(format!(
                "feedback interval {d} outside 1..{slots}"
            )));
        }
    }
    let (lo, hi) = data_range(
        dataset
            .raw()
            .iter()
            .flat_map(|c| [c.re, c.im]),
    )?;

    let rd = dataset.rd();
    let nb = dataset.nb();
    let elements = 2 * rd * nb;
    let k = dataset.k;

    // element index e: component (re/im) + cell; each element owns its table.
    let per_element = |e: usize, delta: Option<usize>| -> (f64, f64, u64) {
        let comp = e / (rd * nb);
        let cell = e % (rd * nb);
        let value = |sample: usize, t: usize| -> f64 {
            let c = dataset.slot(sample, t)[cell];
            if comp == 0 {
                c.re.as_f64()
            } else {
                c.im.as_f64()
            }
        };
        let mut est = HistogramEstimator::new(bits, lo, hi).expect("validated range");
        match delta {
            Some(d) => {
                for s in 0..k {
                    for t in d..slots {
                        est.add_pair(value(s, t - d), value(s, t));
                    }
                }
                (est.conditional_entropy(), est.occupied_joint_bins() as f64, est.sample_count())
            }
            None => {
                for s in 0..k {
                    for t in 0..slots {
                        let v = value(s, t);
                        est.add_pair(v, v);
                    }
                }
                (est.cur_entropy(), est.occupied_marginal_bins() as f64, est.sample_count())
            }
        }
    };

    let mut rows = Vec::new();
    let mut all: Vec<Option<usize>> = deltas.iter().map(|&d| Some(d)).collect();
    all.push(None);
    for delta in all {
        let stats: Vec<(f64, f64, u64)> =
            (0..elements).into_par_iter().map(|e| per_element(e, delta)).collect();
        let avg_h = stats.iter().map(|s| s.0).sum::<f64>() / elements as f64;
        let avg_bins = stats.iter().map(|s| s.1).sum::<f64>() / elements as f64;
        rows.push(SweepRow {
            delta,
            bits,
            avg_bits_per_element: avg_h,
            avg_occupied_bins: avg_bins,
            samples: stats[0].2,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_data_has_zero_entropy() {
        let h = element_entropy(&[0.7f64; 100], 8).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn four_equal_codes_give_two_bits() {
        // Data uniform over exactly 4 distinct codes with equal counts.
        let mut xs = Vec::new();
        for _ in 0..25 {
            xs.extend_from_slice(&[0.0f64, 1.0, 2.0, 3.0]);
        }
        let h = element_entropy(&xs, 2).unwrap();
        assert!((h - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_data_approaches_bit_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs: Vec<f64> = (0..1_000_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = element_entropy(&xs, 4).unwrap();
        assert!((h - 4.0).abs() < 0.01, "H = {h}");
    }

    #[test]
    fn deterministic_dependence_has_zero_conditional_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pairs: Vec<(f64, f64)> = (0..5000)
            .map(|_| {
                let x = rng.gen_range(-1.0..1.0);
                (x, x)
            })
            .collect();
        let h = conditional_entropy(&pairs, 6).unwrap();
        assert!(h.abs() < 1e-12, "H = {h}");
    }

    #[test]
    fn independent_pairs_leave_entropy_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let pairs: Vec<(f64, f64)> =
            (0..100_000).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let cond = conditional_entropy(&pairs, 4).unwrap();
        let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let marg = element_entropy(&xs, 4).unwrap();
        // Plugin bias pulls the conditional slightly down; they agree to a
        // few hundredths of a bit at this sample count.
        assert!((cond - marg).abs() < 0.05, "cond {cond} vs marg {marg}");
        assert!(cond <= marg + 1e-12);
    }

    #[test]
    fn ar1_pairs_lose_at_least_half_a_bit() {
        // Scalar AR(1) with γ = 0.95: conditioning on the previous value
        // removes well over half a bit at 4-bit quantization.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let gamma: f64 = 0.95;
        let innov = (1.0 - gamma * gamma).sqrt();
        let mut pairs = Vec::with_capacity(100_000);
        let mut gauss = || {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut x = gauss();
        for _ in 0..100_000 {
            let next = gamma * x + innov * gauss();
            pairs.push((x, next));
            x = next;
        }
        let cond = conditional_entropy(&pairs, 4).unwrap();
        let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let marg = element_entropy(&xs, 4).unwrap();
        assert!(marg - cond >= 0.5, "marginal {marg}, conditional {cond}");
    }

    #[test]
    fn plugin_sum_rule_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut est = HistogramEstimator::new(5, -1.0, 1.0).unwrap();
        for _ in 0..10_000 {
            est.add_pair(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let lhs = est.joint_entropy();
        let rhs = est.prev_entropy() + est.conditional_entropy();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(element_entropy::<f64>(&[], 4).is_err());
        assert!(element_entropy(&[1.0f64], 4).is_err());
        assert!(conditional_entropy::<f64>(&[], 4).is_err());
    }

    #[test]
    fn sweep_rejects_out_of_range_delta() {
        let cfg = crate::channel::ChannelConfig { slots: 4, nf: 64, nb: 4, rd: 4, num_paths: 4, seed: 1, ..Default::default() };
        let seq = crate::channel::generate::<f64>(&cfg, 3).unwrap();
        assert!(entropy_sweep(&seq, &[4], 4).is_err());
        assert!(entropy_sweep(&seq, &[0], 4).is_err());
    }

    #[test]
    fn sweep_infinite_row_is_the_averaged_marginal_entropy() {
        // The delta = infinity row must equal per-element marginal entropy
        // under the same global quantizer range, averaged over elements.
        let cfg = crate::channel::ChannelConfig {
            slots: 3,
            nf: 64,
            nb: 4,
            rd: 4,
            num_paths: 6,
            seed: 21,
            ..Default::default()
        };
        let seq = crate::channel::generate::<f64>(&cfg, 200).unwrap();
        let rows = entropy_sweep(&seq, &[1], 5).unwrap();
        let inf_row = rows.iter().find(|r| r.delta.is_none()).unwrap();

        let (lo, hi) = data_range(seq.raw().iter().flat_map(|c| [c.re, c.im])).unwrap();
        let cells = 16;
        let mut total = 0.0;
        for e in 0..2 * cells {
            let mut est = HistogramEstimator::new(5, lo, hi).unwrap();
            for k in 0..seq.k {
                for t in 0..3 {
                    let c = seq.slot(k, t)[e % cells];
                    let v = if e < cells { c.re } else { c.im };
                    est.add_pair(v, v);
                }
            }
            total += est.cur_entropy();
        }
        let avg = total / (2.0 * cells as f64);
        assert!((avg - inf_row.avg_bits_per_element).abs() < 1e-12);
    }

    #[test]
    fn sweep_trends_on_ar_data() {
        let cfg = crate::channel::ChannelConfig {
            gamma_true: 0.95,
            slots: 6,
            nf: 64,
            nb: 8,
            rd: 8,
            num_paths: 16,
            power_spread_db: 0.0,
            seed: 11,
            ..Default::default()
        };
        let seq = crate::channel::generate::<f64>(&cfg, 2000).unwrap();
        let rows = entropy_sweep(&seq, &[1, 2, 4], 4).unwrap();
        assert_eq!(rows.len(), 4);
        let uncond = rows.last().unwrap().avg_bits_per_element;
        // δ = ∞ row equals the averaged element entropy by definition, and
        // conditioning can only help (up to estimator slack).
        for w in rows.windows(2) {
            if w[1].delta.is_some() {
                assert!(w[0].avg_bits_per_element <= w[1].avg_bits_per_element + 0.05);
            }
        }
        for row in &rows {
            assert!(row.avg_bits_per_element <= uncond + 0.05);
            assert!(row.avg_bits_per_element >= 0.0);
        }
    }
}
