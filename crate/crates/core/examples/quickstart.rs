//! Trains the toy codec pair for a few epochs and transmits a synthetic
//! moving-square clip at 10 dB.
//!
//! `cargo run --release -p semcom-core --example quickstart`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semcom_core::config::SensingConfig;
use semcom_core::synth::{moving_square_video, toy_dataset, SquareVideoConfig};
use semcom_core::{
    compute_reduction, run_transmission, train, ChannelConfig, ModelConfig, ModelPair, PipelineConfig, Scheme,
    TrainConfig,
};

fn main() -> semcom_core::Result<()> {
    let config = ModelConfig::toy();
    let pair = ModelPair::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let data = toy_dataset(64, config.height, config.width, config.channels, 1);
    let trained = train(
        &data,
        pair,
        &TrainConfig {
            epochs: 5,
            tau: 8.0,
            ..TrainConfig::default()
        },
        None,
    )?;

    let video = moving_square_video(&SquareVideoConfig {
        frames: 40,
        height: config.height,
        width: config.width,
        square: 4,
        step: 1,
        ..SquareVideoConfig::default()
    })?;
    let cfg = PipelineConfig {
        channel: ChannelConfig {
            snr_db: 10.0,
            ..ChannelConfig::default()
        },
        sensing: SensingConfig::default(),
        zeta: 0.01,
    };
    let out = run_transmission(&video, &trained.pair, &cfg, Scheme::Sccvs, None)?;
    let s = &out.summary;
    println!(
        "frames {} (static {}), bits {}, delay {:.3} s",
        s.frames, s.static_frames, s.total_bits, s.total_delay_s
    );
    println!(
        "mean PSNR {}, mean MS-SSIM {:.4}, objective {:.5}",
        s.mean_psnr, s.mean_ms_ssim, s.objective
    );
    println!(
        "reduction vs all-long: {:.2}%",
        compute_reduction(&out.records, config.lengths.dynamic_low)?
    );
    Ok(())
}
