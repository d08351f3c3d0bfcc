//! Shared fixtures for the benchmarks.

use defreg_core::{DeformationField, ImageGrid, MaskGrid};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(size: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGrid::normalized(Array2::from_shape_fn((size, size), |_| rng.random_range(-1.0..1.0)), "bench").unwrap()
}

pub fn random_field(size: usize, amplitude: f64, seed: u64) -> DeformationField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DeformationField::new(Array3::from_shape_fn((2, size, size), |_| rng.random_range(-amplitude..amplitude))).unwrap()
}

/// Filled disc of label 1 centred in the image.
pub fn disc_mask(size: usize, radius: f64, offset: f64) -> MaskGrid {
    let c = size as f64 / 2.0;
    MaskGrid::new(Array2::from_shape_fn((size, size), |(r, col)| {
        let (dr, dc) = (r as f64 - c - offset, col as f64 - c);
        u16::from(dr * dr + dc * dc <= radius * radius)
    }))
    .unwrap()
}
