//! Object sensing: detection, segmentation, mask differencing, CR classification.
//!
//! Detectors and segmenters are pluggable through [`Detector`] and
//! [`Segmenter`]. The shipped baseline is classical change detection against
//! a rolling-median background.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::kan::CrClass;

/// Default change threshold `ε` on the mask difference.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Axis-aligned box, `(x, y)` is the top-left corner in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub label: String,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            x,
            y,
            w,
            h,
            confidence: 1.0,
            label: MOVABLE.to_string(),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection over union; zero when either box is empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let iy = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Clips the box to an `height × width` frame.
    pub fn clip(&self, height: usize, width: usize) -> BoundingBox {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = (self.x + self.w).clamp(0.0, width as f64);
        let y1 = (self.y + self.h).clamp(0.0, height as f64);
        BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            ..self.clone()
        }
    }
}

/// Class label of every baseline detection.
pub const MOVABLE: &str = "movable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_index: usize,
    pub boxes: Vec<BoundingBox>,
}

impl DetectionSet {
    pub fn empty(frame_index: usize) -> Self {
        DetectionSet {
            frame_index,
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if !(b.w > 0.0 && b.h > 0.0) || !(0.0..=1.0).contains(&b.confidence) {
                return Err(Error::InvalidInput(format!("invalid detection box {b:?}")));
            }
        }
        Ok(())
    }
}

/// Regression offsets of one anchor: `(t_x, t_y, t_w, t_h)`.
pub type BoxOffsets = [f64; 4];

/// Box decoded from anchor offsets; `(x, y)` is the box center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `x = σ(t_x) + x_g`, `y = σ(t_y) + y_g`, `w = w_a·e^{t_w}`, `h = h_a·e^{t_h}`.
pub fn decode_boxes(offsets: &[BoxOffsets], anchors: &[(f64, f64)], corners: &[(f64, f64)]) -> Result<Vec<DecodedBox>> {
    if anchors.len() != offsets.len() || corners.len() != offsets.len() {
        return Err(Error::shape(
            "decode_boxes inputs",
            offsets.len(),
            anchors.len().min(corners.len()),
        ));
    }
    offsets
        .iter()
        .zip(anchors)
        .zip(corners)
        .map(|((t, &(wa, ha)), &(xg, yg))| {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("box offsets"));
            }
            if !(wa > 0.0 && ha > 0.0) {
                return Err(Error::InvalidInput(format!("anchor ({wa}, {ha}) must be positive")));
            }
            Ok(DecodedBox {
                x: sigmoid(t[0]) + xg,
                y: sigmoid(t[1]) + yg,
                w: wa * t[2].exp(),
                h: ha * t[3].exp(),
            })
        })
        .collect()
}

/// Binary `H × W` sensing mask with per-object scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    pub scores: Vec<f64>,
    pub labels: Vec<String>,
}

impl SensingMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        SensingMask {
            height,
            width,
            mask: vec![0; height * width],
            scores: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn ones_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Writes the mask as a black/white PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// What the sensing stage knew when it processed a frame.
#[derive(Debug, Clone, Default)]
pub struct SensingContext {
    /// Background estimate the frame was compared against.
    pub background: Option<Frame>,
}

pub trait Detector {
    fn name(&self) -> &str;
    /// Detects objects in the next frame of a sequence, in order.
    fn detect(&mut self, frame: &Frame) -> Result<DetectionSet>;
    /// Context of the most recent detection, shared with the segmenter.
    fn context(&self) -> SensingContext {
        SensingContext::default()
    }
    fn reset(&mut self) {}
}

pub trait Segmenter {
    fn name(&self) -> &str;
    fn segment(&self, frame: &Frame, boxes: &DetectionSet, ctx: &SensingContext) -> Result<SensingMask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Frames kept for the rolling median.
    pub window: usize,
    /// Per-pixel change threshold in `[0, 1]` units.
    pub threshold: f32,
    /// Smallest component reported as a detection, in pixels.
    pub min_area: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            window: 15,
            threshold: 0.1,
            min_area: 1,
        }
    }
}

/// Rolling-median background subtraction with connected components.
///
/// A frame joins the background history only if it differs from the last
/// frame that joined by more than the threshold somewhere, so a paused scene
/// does not gradually absorb a stopped object and shift the mask.
/// The current frame joins before detection, so a repeated frame sees
/// exactly the background its predecessor saw.
#[derive(Debug, Clone)]
pub struct BaselineDetector {
    pub config: BaselineConfig,
    history: VecDeque<Frame>,
    background: Option<Frame>,
}

impl BaselineDetector {
    pub fn new(config: BaselineConfig) -> Self {
        BaselineDetector {
            config,
            history: VecDeque::new(),
            background: None,
        }
    }

    fn median(&self) -> Option<Frame> {
        let first = self.history.front()?;
        let n = self.history.len();
        let mut buf = vec![0f32; n];
        let pixels = (0..first.len())
            .map(|i| {
                for (b, f) in buf.iter_mut().zip(&self.history) {
                    *b = f.pixels[i];
                }
                buf.sort_by(f32::total_cmp);
                if n % 2 == 1 {
                    buf[n / 2]
                } else {
                    0.5 * (buf[n / 2 - 1] + buf[n / 2])
                }
            })
            .collect();
        Some(Frame {
            pixels,
            ..first.clone()
        })
    }

    fn absorb(&mut self, frame: &Frame) {
        let novel = match self.history.back() {
            None => true,
            Some(last) => last.shape() != frame.shape() || exceeds(last, frame, self.config.threshold),
        };
        if novel {
            if self.history.back().is_some_and(|l| l.shape() != frame.shape()) {
                self.history.clear();
            }
            self.history.push_back(frame.clone());
            while self.history.len() > self.config.window.max(1) {
                self.history.pop_front();
            }
        }
    }
}

impl Default for BaselineDetector {
    fn default() -> Self {
        Self::new(BaselineConfig::default())
    }
}

fn exceeds(a: &Frame, b: &Frame, thr: f32) -> bool {
    a.pixels.iter().zip(&b.pixels).any(|(x, y)| (x - y).abs() > thr)
}

/// Per-pixel change map: max over channels of `|frame − background|` above `thr`.
pub fn change_map(frame: &Frame, background: &Frame, thr: f32) -> Result<Vec<bool>> {
    if frame.shape() != background.shape() {
        return Err(Error::shape(
            "background",
            format!("{:?}", frame.shape()),
            format!("{:?}", background.shape()),
        ));
    }
    let c = frame.channels;
    Ok(frame
        .pixels
        .chunks(c)
        .zip(background.pixels.chunks(c))
        .map(|(p, q)| p.iter().zip(q).any(|(a, b)| (a - b).abs() > thr))
        .collect())
}

/// 4-connected components of `map`, as bounding boxes with pixel counts.
pub fn connected_components(map: &[bool], height: usize, width: usize) -> Vec<(BoundingBox, usize)> {
    let mut seen = vec![false; map.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..map.len() {
        if !map[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1, mut area) = (width, height, 0, 0, 0);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / width, i % width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if map[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        let b = BoundingBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        out.push((b, area));
    }
    out
}

impl Detector for BaselineDetector {
    fn name(&self) -> &str {
        "baseline-median"
    }

    fn detect(&mut self, frame: &Frame) -> Result<DetectionSet> {
        self.absorb(frame);
        let background = self.median().filter(|b| b.shape() == frame.shape());
        let mut set = DetectionSet::empty(frame.index);
        if let Some(bg) = &background {
            let map = change_map(frame, bg, self.config.threshold)?;
            let total = (frame.height * frame.width) as f64;
            for (mut b, area) in connected_components(&map, frame.height, frame.width) {
                if area >= self.config.min_area {
                    b.confidence = area as f64 / total;
                    set.boxes.push(b);
                }
            }
        }
        self.background = Some(background.unwrap_or_else(|| frame.clone()));
        Ok(set)
    }

    fn context(&self) -> SensingContext {
        SensingContext {
            background: self.background.clone(),
        }
    }

    fn reset(&mut self) {
        self.history.clear();
        self.background = None;
    }
}

/// Marks changed pixels inside each box.
#[derive(Debug, Clone, Copy)]
pub struct BaselineSegmenter {
    pub threshold: f32,
}

impl Default for BaselineSegmenter {
    fn default() -> Self {
        BaselineSegmenter {
            threshold: BaselineConfig::default().threshold,
        }
    }
}

impl Segmenter for BaselineSegmenter {
    fn name(&self) -> &str {
        "baseline-threshold"
    }

    fn segment(&self, frame: &Frame, boxes: &DetectionSet, ctx: &SensingContext) -> Result<SensingMask> {
        boxes.validate()?;
        let (h, w) = (frame.height, frame.width);
        let mut out = SensingMask::zeros(h, w);
        if boxes.is_empty() {
            return Ok(out);
        }
        let bg = ctx
            .background
            .as_ref()
            .ok_or_else(|| Error::Missing("background for baseline segmenter".into()))?;
        let map = change_map(frame, bg, self.threshold)?;
        for b in &boxes.boxes {
            let c = b.clip(h, w);
            let (x0, y0) = (c.x.floor() as usize, c.y.floor() as usize);
            let (x1, y1) = (
                ((c.x + c.w).ceil() as usize).min(w),
                ((c.y + c.h).ceil() as usize).min(h),
            );
            let mut hits = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    if map[y * w + x] {
                        out.mask[y * w + x] = 1;
                        hits += 1;
                    }
                }
            }
            let area = ((x1 - x0) * (y1 - y0)).max(1) as f64;
            out.scores.push((hits as f64 / area).clamp(0.0, 1.0));
            out.labels.push(b.label.clone());
        }
        Ok(out)
    }
}

pub fn detect_objects(frame: &Frame, detector: Option<&mut dyn Detector>) -> Result<DetectionSet> {
    detector
        .ok_or_else(|| Error::Missing("no detector registered".into()))?
        .detect(frame)
}

pub fn segment_targets(
    frame: &Frame,
    boxes: &DetectionSet,
    segmenter: Option<&dyn Segmenter>,
    ctx: &SensingContext,
) -> Result<SensingMask> {
    segmenter
        .ok_or_else(|| Error::Missing("no segmenter registered".into()))?
        .segment(frame, boxes, ctx)
}

/// `η = (1/HW)·Σ|M_cur − M_prev|`.
pub fn mask_difference(prev: &SensingMask, cur: &SensingMask) -> Result<f64> {
    if (prev.height, prev.width) != (cur.height, cur.width) {
        return Err(Error::shape(
            "mask",
            format!("{}x{}", prev.height, prev.width),
            format!("{}x{}", cur.height, cur.width),
        ));
    }
    let diff = prev
        .mask
        .iter()
        .zip(&cur.mask)
        .filter(|(a, b)| (**a != 0) != (**b != 0))
        .count();
    Ok(diff as f64 / (cur.height * cur.width) as f64)
}

/// Static (`η < ε`) frames get the short encoding.
pub fn classify_frame(eta: f64, epsilon: f64) -> CrClass {
    if eta < epsilon {
        CrClass::StaticHighCr
    } else {
        CrClass::DynamicLowCr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingVerdict {
    pub eta: f64,
    pub cr: CrClass,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingResult {
    pub frame_index: usize,
    pub detections: DetectionSet,
    pub mask: SensingMask,
    pub verdict: SensingVerdict,
}

/// Sequential sensing over a frame stream.
pub struct Sensor {
    detector: Option<Box<dyn Detector>>,
    segmenter: Option<Box<dyn Segmenter>>,
    pub epsilon: f64,
    prev: Option<SensingMask>,
}

impl Sensor {
    pub fn new(detector: Box<dyn Detector>, segmenter: Box<dyn Segmenter>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon {epsilon} must be positive")));
        }
        Ok(Sensor {
            detector: Some(detector),
            segmenter: Some(segmenter),
            epsilon,
            prev: None,
        })
    }

    pub fn baseline(config: BaselineConfig, epsilon: f64) -> Result<Self> {
        Self::new(
            Box::new(BaselineDetector::new(config)),
            Box::new(BaselineSegmenter {
                threshold: config.threshold,
            }),
            epsilon,
        )
    }

    /// Sensor with nothing registered.
    pub fn unregistered(epsilon: f64) -> Self {
        Sensor {
            detector: None,
            segmenter: None,
            epsilon,
            prev: None,
        }
    }

    pub fn reset(&mut self) {
        if let Some(d) = self.detector.as_mut() {
            d.reset();
        }
        self.prev = None;
    }

    /// Senses the next frame. The first frame after construction or reset
    /// is always dynamic; its `η` is measured against an empty mask.
    pub fn sense(&mut self, frame: &Frame) -> Result<SensingResult> {
        let detector = self
            .detector
            .as_mut()
            .ok_or_else(|| Error::Missing("no detector registered".into()))?;
        let detections = detector.detect(frame)?;
        let ctx = detector.context();
        let mask = segment_targets(frame, &detections, self.segmenter.as_deref(), &ctx)?;
        let (eta, cr) = match &self.prev {
            None => (
                mask_difference(&SensingMask::zeros(mask.height, mask.width), &mask)?,
                CrClass::DynamicLowCr,
            ),
            Some(prev) => {
                let eta = mask_difference(prev, &mask)?;
                (eta, classify_frame(eta, self.epsilon))
            }
        };
        self.prev = Some(mask.clone());
        Ok(SensingResult {
            frame_index: frame.index,
            detections,
            mask,
            verdict: SensingVerdict {
                eta,
                cr,
                epsilon: self.epsilon,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_frame(h: usize, w: usize, squares: &[(usize, usize, usize)]) -> Frame {
        let mut f = Frame::filled(h, w, 3, 0.2);
        for &(x, y, s) in squares {
            for yy in y..y + s {
                for xx in x..x + s {
                    for c in 0..3 {
                        f.set(yy, xx, c, 0.9);
                    }
                }
            }
        }
        f
    }

    #[test]
    fn decode_examples() {
        let b = decode_boxes(&[[0.0; 4]], &[(2.0, 3.0)], &[(4.0, 5.0)]).unwrap()[0];
        assert_eq!((b.x, b.y, b.w, b.h), (4.5, 5.5, 2.0, 3.0));
        let b = decode_boxes(&[[-20.0, 0.0, 2f64.ln(), 0.0]], &[(2.0, 3.0)], &[(4.0, 5.0)]).unwrap()[0];
        assert!((b.x - 4.0).abs() < 1e-8);
        assert!((b.w - 4.0).abs() < 1e-12);
        assert!(decode_boxes(&[[f64::NAN, 0.0, 0.0, 0.0]], &[(1.0, 1.0)], &[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn square_detected_and_segmented() {
        let mut det = BaselineDetector::default();
        let bg = square_frame(32, 32, &[]);
        assert!(det.detect(&bg).unwrap().is_empty());
        assert!(det.detect(&bg).unwrap().is_empty());
        let f = square_frame(32, 32, &[(5, 7, 10)]);
        let set = det.detect(&f).unwrap();
        assert_eq!(set.len(), 1);
        let b = &set.boxes[0];
        assert_eq!((b.x, b.y, b.w, b.h), (5.0, 7.0, 10.0, 10.0));
        assert!((b.confidence - 100.0 / 1024.0).abs() < 1e-12);
        let mask = BaselineSegmenter::default().segment(&f, &set, &det.context()).unwrap();
        assert_eq!(mask.ones_count(), 100);
        assert_eq!(mask.scores, vec![1.0]);
        assert_eq!(mask.labels, vec![MOVABLE.to_string()]);
    }

    #[test]
    fn two_squares_two_boxes() {
        let mut det = BaselineDetector::default();
        det.detect(&square_frame(32, 32, &[])).unwrap();
        let set = det.detect(&square_frame(32, 32, &[(1, 1, 5), (20, 20, 6)])).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn empty_detections_give_empty_mask() {
        let f = square_frame(8, 6, &[]);
        let m = BaselineSegmenter::default()
            .segment(&f, &DetectionSet::empty(1), &SensingContext::default())
            .unwrap();
        assert_eq!((m.height, m.width), (8, 6));
        assert_eq!(m.ones_count(), 0);
    }

    #[test]
    fn mask_difference_examples() {
        let a = SensingMask::zeros(100, 100);
        let mut b = a.clone();
        assert_eq!(mask_difference(&a, &b).unwrap(), 0.0);
        b.mask[17] = 1;
        assert_eq!(mask_difference(&a, &b).unwrap(), 1e-4);
        let ones = SensingMask {
            mask: vec![1; 10_000],
            ..a.clone()
        };
        assert_eq!(mask_difference(&a, &ones).unwrap(), 1.0);
        assert!(mask_difference(&a, &SensingMask::zeros(10, 10)).is_err());
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_frame(0.0, 1e-4), CrClass::StaticHighCr);
        assert_eq!(classify_frame(1e-4, 1e-4), CrClass::DynamicLowCr);
        assert_eq!(classify_frame(0.5, 1e-4), CrClass::DynamicLowCr);
    }

    #[test]
    fn unregistered_sensor_errors() {
        let mut s = Sensor::unregistered(1e-4);
        assert!(matches!(s.sense(&Frame::filled(2, 2, 1, 0.0)), Err(Error::Missing(_))));
    }

    #[test]
    fn constant_video_is_static_after_first() {
        let mut s = Sensor::baseline(BaselineConfig::default(), DEFAULT_EPSILON).unwrap();
        let f = square_frame(16, 16, &[(2, 2, 4)]);
        let crs: Vec<CrClass> = (0..5).map(|_| s.sense(&f).unwrap().verdict.cr).collect();
        assert_eq!(crs[0], CrClass::DynamicLowCr);
        assert!(crs[1..].iter().all(|&c| c == CrClass::StaticHighCr));
    }
}
