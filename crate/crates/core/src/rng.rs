//! Seeded, named random substreams.
//!
//! Every consumer draws from its own ChaCha stream keyed by `(seed, stream id)`,
//! so adding a new consumer never shifts the numbers seen by the others.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Well-known stream ids.
pub mod streams {
    pub const AOI: u64 = 1;
    pub const SURFACE: u64 = 2;
    pub const POI: u64 = 3;
    pub const POPULATION: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const INIT: u64 = 16;
    pub const TRAIN: u64 = 17;
    pub const SAMPLE: u64 = 18;
    pub const SPLIT: u64 = 19;
}

pub fn stream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream derived from a parent id and a per-item index (e.g. one per sample).
pub fn substream(seed: u64, id: u64, index: u64) -> Stream {
    stream(seed, id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_array<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || normal(rng))
}
