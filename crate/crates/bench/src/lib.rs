//! Shared inputs for the benchmarks.

use adverseg_core::metrics::BinaryMask;
use adverseg_core::phantom::{generate_domain, DatasetConfig, DomainRole, Subject};
use adverseg_core::{Shape, Tensor4};

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn noise(shape: Shape, seed: u64) -> Tensor4<f32> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor4::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

/// Disc of radius `r` centred at `(cy, cx)` on a `size x size` grid.
pub fn disc(size: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (y - cy).powi(2) + (x - cx).powi(2) <= r * r
        })
        .collect();
    BinaryMask::new(size, size, 0.5, data).expect("valid mask")
}

/// Small reference and target domains at full image size.
pub fn domains(subjects: usize, slices: usize) -> (Vec<Subject>, Vec<Subject>) {
    let dc = DatasetConfig {
        slices_per_subject: slices,
        reference_subjects: subjects,
        target_subjects: subjects,
        ..DatasetConfig::default()
    };
    (
        generate_domain(&dc, DomainRole::Reference, 1).expect("reference domain"),
        generate_domain(&dc, DomainRole::Target, 1).expect("target domain"),
    )
}
