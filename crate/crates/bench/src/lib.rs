//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom_core::bra::{RegionTokens, TokenLayout};
use semcom_core::codec::{ModelConfig, ModelPair};
use semcom_core::Frame;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random frame in `[0, 1)`.
pub fn random_frame(height: usize, width: usize, channels: usize, seed: u64) -> Frame {
    let mut r = rng(seed);
    let px = (0..height * width * channels).map(|_| r.gen::<f32>()).collect();
    Frame::new(height, width, channels, 1, px).expect("valid frame shape")
}

/// Gaussian token matrix over a `grid`×`grid` layout with `regions`×`regions` regions.
pub fn random_tokens(grid: usize, regions: usize, dim: usize, seed: u64) -> RegionTokens {
    let layout = TokenLayout::new(grid, grid, regions, regions).expect("valid layout");
    let mut r = rng(seed);
    let data = (0..layout.n_tokens() * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    RegionTokens::new(layout, dim, data).expect("valid tokens")
}

pub fn models(config: ModelConfig, seed: u64) -> ModelPair {
    ModelPair::new(config, &mut rng(seed)).expect("valid model config")
}
