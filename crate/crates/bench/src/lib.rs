//! Shared fixtures for the benchmark suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bsq_core::morphology::BinaryMask;
use bsq_core::FeatureField;

/// A reproducible field of uniform noise in [-1, 1).
pub fn random_field(seed: u64, channels: usize, height: usize, width: usize) -> FeatureField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureField::from_fn(channels, height, width, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// A filled disc covering roughly a third of the grid.
pub fn disc_mask(grid: usize) -> BinaryMask {
    let c = grid as f64 / 2.0;
    let r = grid as f64 / 3.0;
    BinaryMask::from_fn(grid, grid, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - c, x as f64 + 0.5 - c);
        (dy * dy + dx * dx).sqrt() < r
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_field(3, 2, 4, 4).values(), random_field(3, 2, 4, 4).values());
        assert!(disc_mask(16).count_ones() > 0);
    }
}
