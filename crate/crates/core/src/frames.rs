//! Frame storage, loading, resizing and frame-rate sampling.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One video frame, `height × width × channels` row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// 1-based ordinal within its sequence.
    pub index: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, index: usize, pixels: Vec<f32>) -> Result<Self> {
        let m = height * width * channels;
        if m == 0 {
            return Err(Error::InvalidInput("frame must have at least one pixel".into()));
        }
        if pixels.len() != m {
            return Err(Error::shape("frame pixels", m, pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Frame {
            height,
            width,
            channels,
            index,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Frame {
            height,
            width,
            channels,
            index: 1,
            pixels: vec![value; height * width * channels],
        }
    }

    /// Source bandwidth `m = H·W·C`.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Builds a frame from 64-bit values, clamping into `[0, 1]`.
    pub fn from_f64(height: usize, width: usize, channels: usize, index: usize, values: &[f64]) -> Result<Self> {
        Frame::new(
            height,
            width,
            channels,
            index,
            values.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        )
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, index: usize, bytes: &[u8]) -> Result<Self> {
        Frame::new(
            height,
            width,
            channels,
            index,
            bytes.iter().map(|&b| normalize_byte(b)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize(p)).collect()
    }

    /// Checks that `H` and `W` are multiples of `unit`.
    pub fn check_divisible(&self, unit: usize) -> Result<()> {
        if unit == 0 || !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            return Err(Error::InvalidInput(format!(
                "frame {}x{} not divisible by {unit}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn normalize_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

#[inline]
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameLabel {
    Static,
    Dynamic,
}

/// Ordered frames sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Frame>,
    pub fps_source: Option<f64>,
    pub labels: Option<Vec<FrameLabel>>,
}

impl VideoSequence {
    /// Validates shapes and renumbers frames from 1.
    pub fn new(mut frames: Vec<Frame>, fps_source: Option<f64>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let shape = first.shape();
            if let Some(bad) = frames.iter().find(|f| f.shape() != shape) {
                return Err(Error::InvalidInput(format!(
                    "inconsistent frame shapes: {:?} vs {:?}",
                    shape,
                    bad.shape()
                )));
            }
        }
        for (i, f) in frames.iter_mut().enumerate() {
            f.index = i + 1;
        }
        Ok(VideoSequence {
            frames,
            fps_source,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<FrameLabel>) -> Result<Self> {
        if labels.len() != self.frames.len() {
            return Err(Error::shape("frame labels", self.frames.len(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(Frame::shape)
    }
}

/// Area-averaging resize. Each output pixel is the coverage-weighted mean of
/// the source pixels its footprint overlaps.
pub fn resize_area(frame: &Frame, height: usize, width: usize) -> Frame {
    if frame.height == height && frame.width == width {
        return frame.clone();
    }
    let c = frame.channels;
    let wy = area_weights(frame.height, height);
    let wx = area_weights(frame.width, width);
    let mut pixels = vec![0.0f32; height * width * c];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for &(sy, wyv) in ys {
                    for &(sx, wxv) in xs {
                        acc += wyv * wxv * frame.at(sy, sx, ch) as f64;
                    }
                }
                pixels[(oy * width + ox) * c + ch] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Frame {
        height,
        width,
        channels: c,
        index: frame.index,
        pixels,
    }
}

/// For each output cell, the source cells it covers and their normalized weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * ratio;
            let end = (o + 1) as f64 * ratio;
            let mut cells = Vec::new();
            let mut s = start.floor() as usize;
            while (s as f64) < end && s < src {
                let overlap = (end.min((s + 1) as f64) - start.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((s, overlap / ratio));
                }
                s += 1;
            }
            cells
        })
        .collect()
}

const RAW_EXTENSIONS: [&str; 2] = ["bin", "raw"];

/// Loads a directory of lossless 8-bit images (sorted by file name) or a raw
/// tensor dump, resized to `target` = `(H, W)`.
pub fn load_frames(path: &Path, target: (usize, usize)) -> Result<VideoSequence> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "path does not exist"),
        ));
    }
    let frames = if path.is_dir() {
        load_image_dir(path)?
    } else {
        read_raw_dump(path)?
    };
    let frames = frames
        .into_iter()
        .map(|f| resize_area(&f, target.0, target.1))
        .collect();
    VideoSequence::new(frames, None)
}

fn load_image_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp" | "pnm" | "ppm" | "pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no images in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut channels = None;
    for (i, file) in files.iter().enumerate() {
        let img = image::open(file).map_err(|source| Error::Image {
            path: file.clone(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (c, bytes) = match img.color().channel_count() {
            1 => (1, img.into_luma8().into_raw()),
            2 => (2, img.into_luma_alpha8().into_raw()),
            3 => (3, img.into_rgb8().into_raw()),
            _ => (4, img.into_rgba8().into_raw()),
        };
        match channels {
            None => channels = Some(c),
            Some(prev) if prev != c => {
                return Err(Error::InvalidInput(format!(
                    "inconsistent channel counts: {prev} vs {c} in {}",
                    file.display()
                )))
            }
            _ => {}
        }
        frames.push(Frame::from_bytes(h, w, c, i + 1, &bytes)?);
    }
    Ok(frames)
}

/// Raw tensor dump: `H, W, C, V` as little-endian u32, then `V` frames of
/// `H·W·C` little-endian f32 values.
pub fn read_raw_dump(path: &Path) -> Result<Vec<Frame>> {
    let ext_ok = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| RAW_EXTENSIONS.contains(&e));
    if !ext_ok {
        return Err(Error::InvalidInput(format!(
            "unsupported container {}; expected an image directory or .bin/.raw dump",
            path.display()
        )));
    }
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::InvalidInput("raw dump shorter than its header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (h, w, c, v) = (word(0), word(1), word(2), word(3));
    let m = h * w * c;
    if bytes.len() != 16 + m * v * 4 {
        return Err(Error::InvalidInput(format!(
            "raw dump size {} does not match header {h}x{w}x{c}x{v}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    values
        .chunks(m.max(1))
        .take(v)
        .enumerate()
        .map(|(i, px)| Frame::new(h, w, c, i + 1, px.to_vec()))
        .collect()
}

pub fn write_raw_dump(video: &VideoSequence, path: &Path) -> Result<()> {
    let (h, w, c) = video
        .shape()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty video".into()))?;
    let mut out = Vec::with_capacity(16 + video.len() * h * w * c * 4);
    for v in [h, w, c, video.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in &video.frames {
        for p in &f.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes `frame_%06d.png` files (8-bit) into `dir`.
pub fn save_frames_png(video: &VideoSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in &video.frames {
        let path = dir.join(format!("frame_{:06}.png", f.index));
        save_frame_png(f, &path)?;
    }
    Ok(())
}

pub fn save_frame_png(f: &Frame, path: &Path) -> Result<()> {
    let color = match f.channels {
        1 => image::ExtendedColorType::L8,
        2 => image::ExtendedColorType::La8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::InvalidInput(format!("cannot encode {c}-channel PNG"))),
    };
    image::save_buffer(path, &f.to_bytes(), f.width as u32, f.height as u32, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Keeps every `⌊fps⌋`-th frame starting with the first, renumbering from 1.
pub fn sample_one_fps(video: &VideoSequence) -> Result<VideoSequence> {
    let fps = video
        .fps_source
        .ok_or_else(|| Error::InvalidInput("source frame rate unknown".into()))?;
    if !(fps >= 1.0) {
        return Err(Error::InvalidInput(format!("source frame rate {fps} below 1")));
    }
    let step = fps.floor() as usize;
    let frames: Vec<Frame> = video.frames.iter().step_by(step).cloned().collect();
    let labels = video
        .labels
        .as_ref()
        .map(|l| l.iter().step_by(step).copied().collect::<Vec<_>>());
    let mut out = VideoSequence::new(frames, Some(1.0))?;
    out.labels = labels;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(n: usize, fps: f64) -> VideoSequence {
        let frames = (0..n).map(|i| Frame::filled(2, 2, 1, (i % 10) as f32 / 10.0)).collect();
        VideoSequence::new(frames, Some(fps)).unwrap()
    }

    #[test]
    fn sampling_counts() {
        assert_eq!(sample_one_fps(&video(90, 30.0)).unwrap().len(), 3);
        let one = video(7, 1.0);
        assert_eq!(sample_one_fps(&one).unwrap().frames, one.frames);
        let s = sample_one_fps(&video(10, 24.0)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.frames[0].index, 1);
        assert_eq!(s.frames[0].pixels, vec![0.0; 4]);
    }

    #[test]
    fn sampling_keeps_every_nth_in_order() {
        let s = sample_one_fps(&video(10, 3.0)).unwrap();
        // kept source frames 1, 4, 7, 10
        let kept: Vec<f32> = s.frames.iter().map(|f| f.pixels[0]).collect();
        assert_eq!(kept, vec![0.0, 0.3, 0.6, 0.9]);
        assert_eq!(s.frames.iter().map(|f| f.index).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn sampling_needs_fps() {
        let mut v = video(3, 1.0);
        v.fps_source = None;
        assert!(sample_one_fps(&v).is_err());
    }

    #[test]
    fn byte_normalization_is_bijective() {
        for b in 0..=255u8 {
            assert_eq!(quantize(normalize_byte(b)), b);
        }
        assert_eq!(normalize_byte(255), 1.0);
        assert_eq!(normalize_byte(0), 0.0);
    }

    #[test]
    fn area_resize_averages_blocks() {
        let f = Frame::new(2, 2, 1, 1, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        let r = resize_area(&f, 1, 1);
        assert!((r.pixels[0] - 0.5).abs() < 1e-7);
        let f = Frame::new(1, 3, 1, 1, vec![0.0, 0.3, 0.9]).unwrap();
        let r = resize_area(&f, 1, 2);
        // cells cover [0,1.5) and [1.5,3)
        assert!((r.pixels[0] - (0.0 + 0.5 * 0.3) / 1.5).abs() < 1e-6);
        assert!((r.pixels[1] - (0.5 * 0.3 + 0.9) / 1.5).abs() < 1e-6);
    }

    #[test]
    fn frame_rejects_out_of_range() {
        assert!(Frame::new(1, 1, 1, 1, vec![1.5]).is_err());
        assert!(Frame::new(0, 1, 1, 1, vec![]).is_err());
    }
}
