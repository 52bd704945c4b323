//! Reproducible Gaussian increments.
//!
//! Each (seed, salt, path) triple owns an independent ChaCha8 stream, so a
//! path's noise never depends on scheduling or on the number of paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Salt of the main simulation stream.
pub const MAIN: u64 = 0;
/// Salt of the inner resampling stream of the nested estimator.
pub const INNER: u64 = 0x6e65_7374_6564;

pub fn path_rng(seed: u64, salt: u64, path: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&salt.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path);
    rng
}

/// Brownian increments (dW1, dW2, dW3) for every step of one path.
pub fn increments(seed: u64, salt: u64, path: u64, n_steps: usize, h: f64) -> Vec<[f64; 3]> {
    let mut rng = path_rng(seed, salt, path);
    let sq = h.sqrt();
    (0..n_steps)
        .map(|_| {
            let mut d = [0.0; 3];
            for v in d.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * sq;
            }
            d
        })
        .collect()
}
