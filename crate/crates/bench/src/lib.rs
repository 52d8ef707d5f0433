//! Shared fixtures for the criterion benches.

use gqsgd_core::verify::gaussian_shards;
use gqsgd_core::ExpToken;
use gqsgd_core::exp_arith::leaf_token;

/// Element counts benchmarked per worker.
pub const SIZES: [usize; 3] = [1 << 10, 1 << 14, 1 << 18];

pub fn shards(n: usize, d: usize) -> Vec<Vec<f64>> {
    gaussian_shards(n, d, 0x5eed)
}

/// Mixed-sign leaf tokens for `n` workers at `s` levels.
pub fn leaves(d: usize, s: u32, n: usize) -> Vec<ExpToken> {
    (0..d)
        .map(|j| leaf_token(if j % 3 == 0 { -1 } else { 1 }, 1 + (j as u32 % s), s, n))
        .collect()
}
