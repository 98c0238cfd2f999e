use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Shape, Tensor4};
use crate::error::{invalid, Result};

/// Seeded generator used for every stochastic operation.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a path of
/// labels, using the splitmix64 finalizer to decorrelate neighbours.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    let mut s = parent;
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Zero-mean Gaussian samples with variance `2 / fan_in`.
pub fn he_initialize<T: Scalar>(shape: Shape, fan_in: usize, seed: u64) -> Result<Tensor4<T>> {
    if fan_in == 0 {
        return Err(invalid("He initialization needs fan_in > 0"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let data = (0..shape.len())
        .map(|_| T::of(normal.sample(&mut rng)))
        .collect();
    Tensor4::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let a = he_initialize::<f32>(Shape::new(3, 2, 3, 3), 18, 42).unwrap();
        let b = he_initialize::<f32>(Shape::new(3, 2, 3, 3), 18, 42).unwrap();
        let c = he_initialize::<f32>(Shape::new(3, 2, 3, 3), 18, 43).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn empirical_moments() {
        let t = he_initialize::<f64>(Shape::new(1, 1, 1, 100_000), 2, 5).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn zero_fan_in_rejected() {
        assert!(he_initialize::<f32>(Shape::new(1, 1, 1, 1), 0, 1).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, &[1]);
        let b = derive_seed(7, &[2]);
        let c = derive_seed(7, &[1, 0]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(7, &[1]));
    }
}
