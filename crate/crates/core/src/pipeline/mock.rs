//! Deterministic stand-in backends for tests, demos and throughput runs.

use std::collections::VecDeque;

use crate::geometry::BBox;
use crate::imaging::{self, ImageBuf};

use super::{BackendError, DetectorOutput, PlateDetector, VehicleClassifier};

/// Minimum luma spread for [`ContentGateClassifier`] to report a vehicle.
pub const GATE_MIN_SPREAD: u8 = 32;

/// Reports `car` with score 1 for any frame with visible structure (luma
/// spread above [`GATE_MIN_SPREAD`]) and all zeros for flat frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContentGateClassifier;

impl VehicleClassifier for ContentGateClassifier {
    fn classify(&self, image: &ImageBuf) -> Result<[f64; 4], BackendError> {
        let gray = luma(image)?;
        let (lo, hi) = gray.data().iter().fold((u8::MAX, u8::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(if hi.saturating_sub(lo) > GATE_MIN_SPREAD { [0.0, 1.0, 0.0, 0.0] } else { [0.0; 4] })
    }
}

/// Always returns the same scores.
#[derive(Debug, Clone, Copy)]
pub struct FixedClassifier(pub [f64; 4]);

impl VehicleClassifier for FixedClassifier {
    fn classify(&self, _image: &ImageBuf) -> Result<[f64; 4], BackendError> {
        Ok(self.0)
    }
}

/// Finds bright plate-like blobs: 4-connected regions with luma at least
/// `min_luma` and at least `min_area` pixels. Each region becomes a class-0
/// box whose score is the fraction of its bounding rectangle it fills.
#[derive(Debug, Clone, Copy)]
pub struct BrightRegionDetector {
    pub min_luma: u8,
    pub min_area: usize,
}

impl Default for BrightRegionDetector {
    fn default() -> Self {
        Self { min_luma: 200, min_area: 20 }
    }
}

impl PlateDetector for BrightRegionDetector {
    fn detect(&self, image: &ImageBuf) -> Result<DetectorOutput, BackendError> {
        let gray = luma(image)?;
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let px = gray.data();
        let mut seen = vec![false; w * h];
        let mut boxes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if seen[start] || px[start] < self.min_luma {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut x0, mut y0, mut x1, mut y1, mut area) = (w, h, 0, 0, 0usize);
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                area += 1;
                let mut visit = |j: usize| {
                    if !seen[j] && px[j] >= self.min_luma {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if area < self.min_area {
                continue;
            }
            let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
            let (fw, fh) = (w as f64, h as f64);
            boxes.push(BBox::clamped(
                (x0 as f64 + bw / 2.0) / fw,
                (y0 as f64 + bh / 2.0) / fh,
                bw / fw,
                bh / fh,
                0,
                area as f64 / (bw * bh),
            ));
        }
        Ok(DetectorOutput::Boxes(boxes))
    }
}

/// Returns the same boxes for every frame.
#[derive(Debug, Clone)]
pub struct FixedDetector(pub Vec<BBox>);

impl PlateDetector for FixedDetector {
    fn detect(&self, _image: &ImageBuf) -> Result<DetectorOutput, BackendError> {
        Ok(DetectorOutput::Boxes(self.0.clone()))
    }
}

/// Returns one recorded head tensor for every frame.
#[derive(Debug, Clone)]
pub struct HeadReplayDetector {
    values: Vec<f32>,
}

impl HeadReplayDetector {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }
}

impl PlateDetector for HeadReplayDetector {
    fn detect(&self, _image: &ImageBuf) -> Result<DetectorOutput, BackendError> {
        Ok(DetectorOutput::RawHead(self.values.clone()))
    }
}

fn luma(image: &ImageBuf) -> Result<ImageBuf, BackendError> {
    match image.channels() {
        1 => Ok(image.clone()),
        _ => imaging::grayscale(image).map_err(|e| BackendError(e.to_string())),
    }
}
