//! Deterministic inputs shared by the benchmarks.

use tokenhier_core::numkernel::{Mat, RngStream};
use tokenhier_core::raster::Raster;

/// `rows`×`cols` matrix of standard normal draws.
pub fn random_mat(rows: usize, cols: usize, stream: u64) -> Mat {
    let mut rng = RngStream::new(0xbe7c, stream);
    Mat::from_fn(rows, cols, |_, _| rng.standard_normal())
}

/// Pinkish tissue-like texture on a white background, left half tissue.
pub fn tissue_raster(size: usize) -> Raster {
    let mut rng = RngStream::new(0xbe7c, 0x7261);
    Raster::from_fn(size, size, |x, _| {
        if x < size / 2 {
            let j = (rng.uniform() * 40.0) as u8;
            [150 + j, 80 + j, 140 + j]
        } else {
            [245, 245, 245]
        }
    })
}
