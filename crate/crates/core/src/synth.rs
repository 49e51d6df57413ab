//! Synthetic videos and toy datasets with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Frame, FrameLabel, VideoSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SquareVideoConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub square: usize,
    /// Pixels moved per axis on every dynamic frame.
    pub step: usize,
    /// Run lengths are drawn uniformly from this inclusive range.
    pub min_run: usize,
    pub max_run: usize,
    pub seed: u64,
}

impl Default for SquareVideoConfig {
    fn default() -> Self {
        SquareVideoConfig {
            frames: 100,
            height: 64,
            width: 64,
            channels: 3,
            square: 12,
            step: 3,
            min_run: 3,
            max_run: 8,
            seed: 0,
        }
    }
}

fn background(h: usize, w: usize, c: usize) -> Frame {
    let mut f = Frame::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = 0.15 + 0.1 * (y as f32 / h as f32) + 0.05 * (x as f32 / w as f32) + 0.02 * ch as f32;
                f.set(y, x, ch, v);
            }
        }
    }
    f
}

fn paint_rect(f: &mut Frame, x: usize, y: usize, w: usize, h: usize, color: &[f32]) {
    for yy in y..(y + h).min(f.height) {
        for xx in x..(x + w).min(f.width) {
            for (ch, &v) in color.iter().enumerate().take(f.channels) {
                f.set(yy, xx, ch, v);
            }
        }
    }
}

/// A bright square on a smooth background that alternates between moving and
/// resting runs. Frame 1 and every frame in which the square moved are
/// labelled dynamic; frames identical to their predecessor are static.
pub fn moving_square_video(cfg: &SquareVideoConfig) -> Result<VideoSequence> {
    if cfg.frames == 0 || cfg.square == 0 || cfg.step == 0 {
        return Err(Error::InvalidInput("frames, square and step must be positive".into()));
    }
    if cfg.square + cfg.step > cfg.height.min(cfg.width) {
        return Err(Error::InvalidInput("square does not fit".into()));
    }
    if cfg.min_run == 0 || cfg.min_run > cfg.max_run {
        return Err(Error::InvalidInput("run range must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bg = background(cfg.height, cfg.width, cfg.channels);
    let color: Vec<f32> = (0..cfg.channels).map(|c| 0.85 + 0.05 * c as f32).collect();
    let (max_x, max_y) = ((cfg.width - cfg.square) as i64, (cfg.height - cfg.square) as i64);
    let mut pos = (rng.gen_range(0..=max_x), rng.gen_range(0..=max_y));
    let mut dir = (1i64, 1i64);
    let step = cfg.step as i64;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut labels = Vec::with_capacity(cfg.frames);
    let mut moving = true;
    let mut remaining = 0;
    for i in 0..cfg.frames {
        if i > 0 {
            if remaining == 0 {
                moving = !moving;
                remaining = rng.gen_range(cfg.min_run..=cfg.max_run);
            }
            remaining -= 1;
            if moving {
                for (p, d, max) in [(&mut pos.0, &mut dir.0, max_x), (&mut pos.1, &mut dir.1, max_y)] {
                    if *p + *d * step < 0 || *p + *d * step > max {
                        *d = -*d;
                    }
                    // Near a wall the full step may not fit either way; the
                    // flipped direction always has some room.
                    *p = (*p + *d * step).clamp(0, max);
                }
            }
        } else {
            remaining = rng.gen_range(cfg.min_run..=cfg.max_run) - 1;
        }
        let mut f = bg.clone();
        paint_rect(&mut f, pos.0 as usize, pos.1 as usize, cfg.square, cfg.square, &color);
        f.index = i + 1;
        frames.push(f);
        labels.push(if i == 0 || moving {
            FrameLabel::Dynamic
        } else {
            FrameLabel::Static
        });
    }
    VideoSequence::new(frames, Some(1.0))?.with_labels(labels)
}

/// `n` copies of one flat frame.
pub fn constant_video(n: usize, height: usize, width: usize, channels: usize, value: f32) -> Result<VideoSequence> {
    let frames = (0..n).map(|_| Frame::filled(height, width, channels, value)).collect();
    VideoSequence::new(frames, Some(1.0))
}

/// Random scenes: a smooth gradient plus one to three colored rectangles.
pub fn toy_dataset(n: usize, height: usize, width: usize, channels: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (a, b, c0): (f32, f32, f32) = (
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.2..0.6),
            );
            let mut f = Frame::filled(height, width, channels, 0.0);
            for y in 0..height {
                for x in 0..width {
                    for ch in 0..channels {
                        let v = c0 + a * y as f32 / height as f32 + b * x as f32 / width as f32 + 0.05 * ch as f32;
                        f.set(y, x, ch, v.clamp(0.0, 1.0));
                    }
                }
            }
            for _ in 0..rng.gen_range(1..=3) {
                let w = rng.gen_range(2..=width / 2);
                let h = rng.gen_range(2..=height / 2);
                let x = rng.gen_range(0..=width - w);
                let y = rng.gen_range(0..=height - h);
                let color: Vec<f32> = (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect();
                paint_rect(&mut f, x, y, w, h, &color);
            }
            f.index = i + 1;
            f
        })
        .collect()
}
