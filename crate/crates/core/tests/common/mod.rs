#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stacklq_core::linalg::Mat;
use stacklq_core::CidSpec;

pub fn m1(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

pub fn mat(r: usize, c: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(r, c, data)
}

/// Random valid scalar spec in a box around the generic spec.
pub fn random_cid(rng: &mut ChaCha8Rng) -> CidSpec {
    CidSpec {
        A0: rng.random_range(-0.3..0.3),
        A1: rng.random_range(-0.3..0.3),
        A2: rng.random_range(-0.3..0.3),
        A3: rng.random_range(-0.3..0.3),
        B0: rng.random_range(0.5..1.2),
        C0: rng.random_range(0.5..1.2),
        Q1: rng.random_range(0.5..1.5),
        N1: rng.random_range(0.8..1.5),
        G1: rng.random_range(0.5..1.5),
        Q2: rng.random_range(0.5..1.5),
        N2: rng.random_range(0.8..1.5),
        G2: rng.random_range(0.5..1.5),
        x0: rng.random_range(-2.0..2.0),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
