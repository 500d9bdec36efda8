//! Seeded parameter initialization.

use rand::Rng;

use super::Tensor;
use crate::scalar::Real;

/// Glorot-uniform init: entries drawn from ±√(6/(fan_in + fan_out)).
///
/// Sampling always happens in f64 so that f32 and f64 models built from the
/// same seed agree to f32 precision.
pub fn glorot_uniform<R: Real>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<R> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<R> = (0..numel).map(|_| R::of(rng.gen_range(-bound..bound))).collect();
    let mut t = Tensor::from_vec(shape, data).expect("shape/data agree by construction");
    t.set_requires_grad(true);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_parameters() {
        let a: Tensor<f64> = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(9), &[4, 3], 3, 4);
        let b: Tensor<f64> = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(9), &[4, 3], 3, 4);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn respects_fan_bound() {
        let t: Tensor<f64> = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(1), &[100], 10, 10);
        let bound = (6.0 / 20.0f64).sqrt();
        assert!(t.data().iter().all(|x| x.abs() < bound));
    }
}
