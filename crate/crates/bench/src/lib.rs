//! Fixtures shared by the kernel benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tesr_core::sits::{Frame, Raster, TimedSeries, Timestamp};

pub fn random_raster(c: usize, h: usize, w: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::unit(Array3::from_shape_fn((c, h, w), |_| rng.gen())).expect("finite")
}

/// `t` random frames five days apart, referenced to the middle one.
pub fn random_series(t: usize, size: usize, seed: u64) -> TimedSeries {
    let frames = (0..t)
        .map(|k| Frame {
            raster: random_raster(3, size, size, seed + k as u64),
            time: Timestamp(18_000 + 5 * k as i64),
        })
        .collect();
    TimedSeries::new(frames, Timestamp(18_000 + 5 * (t as i64 / 2))).expect("valid series")
}
