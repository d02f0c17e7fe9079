//! Box arithmetic, detector-head decoding and non-maximum suppression.
//!
//! Boxes are normalized `(cx, cy, w, h)` relative to the image they were
//! detected in. The detector head is a single YOLO-style output grid of
//! `S x S` cells, each carrying `A` anchors of `5 + CL` logits laid out as
//! `[tx, ty, tw, th, t_obj, t_class_0, ..]`.

use std::cmp::Ordering;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid detector head spec: {0}")]
    InvalidHeadSpec(String),
    #[error("tensor shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("malformed tensor file: {0}")]
    MalformedTensor(String),
}

/// Normalized detection box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    pub score: f64,
}

impl BBox {
    /// Builds a box, rejecting anything outside the normalized ranges.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: u32, score: f64) -> Result<Self, GeometryError> {
        let b = Self { cx, cy, w, h, class_id, score };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box, clamping every field into range instead of failing.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64, class_id: u32, score: f64) -> Self {
        Self {
            cx: clamp_unit(cx),
            cy: clamp_unit(cy),
            w: clamp_extent(w),
            h: clamp_extent(h),
            class_id,
            score: clamp_unit(score),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.cx) || !unit(self.cy) {
            return Err(GeometryError::InvalidBox(format!("center ({}, {}) outside [0,1]", self.cx, self.cy)));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(GeometryError::InvalidBox(format!("size ({}, {}) outside (0,1]", self.w, self.h)));
        }
        if !unit(self.score) {
            return Err(GeometryError::InvalidBox(format!("score {} outside [0,1]", self.score)));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

// Sizes stay strictly positive so a clamped box is always a valid box.
fn clamp_extent(v: f64) -> f64 {
    if v.is_nan() {
        f64::MIN_POSITIVE
    } else {
        v.clamp(f64::MIN_POSITIVE, 1.0)
    }
}

/// Integer rectangle with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn fits_within(&self, frame_width: u32, frame_height: u32) -> bool {
        self.width >= 1
            && self.height >= 1
            && u64::from(self.x) + u64::from(self.width) <= u64::from(frame_width)
            && u64::from(self.y) + u64::from(self.height) <= u64::from(frame_height)
    }
}

/// Shape of one detector output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHeadSpec {
    anchor_count: usize,
    class_count: usize,
    input_width: u32,
    input_height: u32,
    grid_size: usize,
    anchors: Vec<(f64, f64)>,
}

impl DetectorHeadSpec {
    pub fn new(
        class_count: usize,
        input_width: u32,
        input_height: u32,
        grid_size: usize,
        anchors: Vec<(f64, f64)>,
    ) -> Result<Self, GeometryError> {
        if anchors.is_empty() {
            return Err(GeometryError::InvalidHeadSpec("at least one anchor is required".into()));
        }
        if class_count == 0 {
            return Err(GeometryError::InvalidHeadSpec("class count must be >= 1".into()));
        }
        if grid_size == 0 {
            return Err(GeometryError::InvalidHeadSpec("grid size must be >= 1".into()));
        }
        if input_width == 0 || input_height == 0 {
            return Err(GeometryError::InvalidHeadSpec("input dimensions must be >= 1".into()));
        }
        if let Some((w, h)) = anchors.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(GeometryError::InvalidHeadSpec(format!("anchor ({w}, {h}) must have positive dims")));
        }
        Ok(Self {
            anchor_count: anchors.len(),
            class_count,
            input_width,
            input_height,
            grid_size,
            anchors,
        })
    }

    /// Single-class plate head: 5 anchors on a 13x13 grid over a 416x416 input.
    pub fn plate_default() -> Self {
        Self::new(1, 416, 416, 13, DEFAULT_ANCHORS.to_vec()).expect("default head spec is valid")
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_width(&self) -> u32 {
        self.input_width
    }

    pub fn input_height(&self) -> u32 {
        self.input_height
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    /// Logits per anchor: four box offsets, objectness, one per class.
    pub fn values_per_anchor(&self) -> usize {
        5 + self.class_count
    }

    /// Total tensor length `S * S * A * (5 + CL)`.
    pub fn tensor_len(&self) -> usize {
        self.grid_size * self.grid_size * self.anchor_count * self.values_per_anchor()
    }
}

/// Anchor sizes in input pixels at the 416x416 scale.
pub const DEFAULT_ANCHORS: [(f64, f64); 5] =
    [(34.56, 38.08), (109.44, 141.12), (212.16, 364.16), (301.44, 163.52), (531.84, 336.64)];

/// Convolution filter count for the layer feeding a detection head,
/// `(A + CL) * 3`.
pub fn filters_for(spec: &DetectorHeadSpec) -> usize {
    (spec.anchor_count + spec.class_count) * 3
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()) - a.left().max(b.left());
    let ih = a.bottom().min(b.bottom()) - a.top().max(b.top());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes one raw head tensor into scored boxes.
///
/// Each `(cell, anchor)` contributes at most one box, labeled with its best
/// class (lowest index on ties). Boxes scoring below `conf_threshold` are
/// dropped.
pub fn decode_head(raw: &[f32], spec: &DetectorHeadSpec, conf_threshold: f64) -> Result<Vec<BBox>, GeometryError> {
    let expected = spec.tensor_len();
    if raw.len() != expected {
        return Err(GeometryError::ShapeMismatch { expected, actual: raw.len() });
    }
    let s = spec.grid_size;
    let stride = spec.values_per_anchor();
    let grid = s as f64;
    let in_w = f64::from(spec.input_width);
    let in_h = f64::from(spec.input_height);

    let mut out = Vec::new();
    for (slot, logits) in raw.chunks_exact(stride).enumerate() {
        let anchor = slot % spec.anchor_count;
        let cell = slot / spec.anchor_count;
        let (row, col) = (cell / s, cell % s);

        let objectness = sigmoid(f64::from(logits[4]));
        let (class_id, class_logit) = logits[5..]
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let score = objectness * sigmoid(f64::from(class_logit));
        // Written so a NaN score is skipped too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(score >= conf_threshold) {
            continue;
        }

        let (anchor_w, anchor_h) = spec.anchors[anchor];
        let cx = (sigmoid(f64::from(logits[0])) + col as f64) / grid;
        let cy = (sigmoid(f64::from(logits[1])) + row as f64) / grid;
        let w = anchor_w * f64::from(logits[2]).exp() / in_w;
        let h = anchor_h * f64::from(logits[3]).exp() / in_h;
        out.push(BBox::clamped(cx, cy, w, h, class_id as u32, score));
    }
    Ok(out)
}

/// Class-wise greedy non-maximum suppression.
///
/// Survivors come back in descending score order; equal scores keep their
/// input order.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap_or(Ordering::Equal));

    let mut kept: Vec<BBox> = Vec::new();
    for idx in order {
        let candidate = &boxes[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == candidate.class_id && iou(k, candidate) > iou_threshold);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}

/// Projects a normalized box onto a frame, clamped inside it.
pub fn to_pixel(b: &BBox, frame_width: u32, frame_height: u32) -> PixelRect {
    let (x, width) = project_span(b.left(), b.right(), frame_width);
    let (y, height) = project_span(b.top(), b.bottom(), frame_height);
    PixelRect { x, y, width, height }
}

fn project_span(lo: f64, hi: f64, extent: u32) -> (u32, u32) {
    let max = f64::from(extent.max(1));
    let start = (lo * max).round().clamp(0.0, max - 1.0);
    let end = (hi * max).round().clamp(start + 1.0, max);
    (start as u32, (end - start) as u32)
}

/// Reads a raw head tensor: an ASCII `S A CL` header line followed by
/// little-endian `f32` values.
pub fn read_head_tensor(path: &Path) -> Result<(TensorHeader, Vec<f32>), GeometryError> {
    let file = std::fs::File::open(path).map_err(|e| GeometryError::MalformedTensor(format!("{}: {e}", path.display())))?;
    parse_head_tensor(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub grid_size: usize,
    pub anchor_count: usize,
    pub class_count: usize,
}

pub fn parse_head_tensor<R: BufRead>(mut reader: R) -> Result<(TensorHeader, Vec<f32>), GeometryError> {
    let mut header = Vec::new();
    reader
        .read_until(b'\n', &mut header)
        .map_err(|e| GeometryError::MalformedTensor(e.to_string()))?;
    if header.last() != Some(&b'\n') {
        return Err(GeometryError::MalformedTensor("missing header line".into()));
    }
    let header = std::str::from_utf8(&header).map_err(|_| GeometryError::MalformedTensor("header is not ASCII".into()))?;
    let fields: Vec<usize> = header
        .split_ascii_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| GeometryError::MalformedTensor(format!("bad header {:?}", header.trim_end())))?;
    let [grid_size, anchor_count, class_count] = fields[..] else {
        return Err(GeometryError::MalformedTensor(format!("header needs `S A CL`, got {:?}", header.trim_end())));
    };

    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| GeometryError::MalformedTensor(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(GeometryError::MalformedTensor(format!("payload of {} bytes is not a whole number of f32", bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((TensorHeader { grid_size, anchor_count, class_count }, values))
}

pub fn write_head_tensor(header: TensorHeader, values: &[f32]) -> Vec<u8> {
    let mut out = format!("{} {} {}\n", header.grid_size, header.anchor_count, header.class_count).into_bytes();
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

impl TensorHeader {
    pub fn matches(&self, spec: &DetectorHeadSpec) -> bool {
        self.grid_size == spec.grid_size && self.anchor_count == spec.anchor_count && self.class_count == spec.class_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h, 0, 1.0).unwrap()
    }

    fn spec(classes: usize, anchors: usize) -> DetectorHeadSpec {
        DetectorHeadSpec::new(classes, 416, 416, 13, vec![(104.0, 104.0); anchors]).unwrap()
    }

    #[test]
    fn filter_count() {
        assert_eq!(filters_for(&spec(1, 5)), 18);
        assert_eq!(filters_for(&spec(4, 5)), 27);
        assert_eq!(filters_for(&spec(1, 1)), 6);
    }

    #[test]
    fn head_spec_rejects_bad_input() {
        assert!(DetectorHeadSpec::new(0, 416, 416, 13, vec![(1.0, 1.0)]).is_err());
        assert!(DetectorHeadSpec::new(1, 416, 416, 0, vec![(1.0, 1.0)]).is_err());
        assert!(DetectorHeadSpec::new(1, 416, 416, 13, vec![]).is_err());
        assert!(DetectorHeadSpec::new(1, 416, 416, 13, vec![(0.0, 1.0)]).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.25, 0.25, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.8, 0.8, 0.2, 0.2)), 0.0);
        let b = bx(0.5, 0.25, 0.5, 0.5);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn decode_centered_box() {
        let sp = spec(1, 1);
        let mut raw = vec![0.0f32; sp.tensor_len()];
        for cell in 0..169 {
            raw[cell * 6 + 4] = f32::NEG_INFINITY;
        }
        let cell = 6 * 13 + 6;
        raw[cell * 6 + 4] = 100.0;
        raw[cell * 6 + 5] = 100.0;
        let boxes = decode_head(&raw, &sp, 0.5).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert!((b.cx - 0.5).abs() < 1e-12 && (b.cy - 0.5).abs() < 1e-12);
        assert!((b.w - 0.25).abs() < 1e-12 && (b.h - 0.25).abs() < 1e-12);
    }

    #[test]
    fn decode_all_suppressed() {
        let sp = spec(1, 5);
        let mut raw = vec![0.3f32; sp.tensor_len()];
        for slot in raw.chunks_exact_mut(6) {
            slot[4] = f32::NEG_INFINITY;
        }
        assert!(decode_head(&raw, &sp, 0.01).unwrap().is_empty());
    }

    #[test]
    fn decode_shape_mismatch() {
        let sp = spec(1, 5);
        let err = decode_head(&[0.0; 10], &sp, 0.5).unwrap_err();
        assert_eq!(err, GeometryError::ShapeMismatch { expected: 13 * 13 * 5 * 6, actual: 10 });
    }

    #[test]
    fn decode_picks_best_class() {
        let sp = DetectorHeadSpec::new(4, 416, 416, 1, vec![(10.0, 10.0)]).unwrap();
        let raw = [0.0, 0.0, 0.0, 0.0, 5.0, -1.0, 2.0, 2.0, 0.5];
        let boxes = decode_head(&raw, &sp, 0.0).unwrap();
        assert_eq!(boxes[0].class_id, 1);
    }

    #[test]
    fn nms_basic() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2, 0, 0.9).unwrap();
        assert_eq!(nms(&[b1], 0.45), vec![b1]);
        assert!(nms(&[], 0.45).is_empty());
    }

    #[test]
    fn nms_suppresses_overlap() {
        // Shifting a 0.2-wide box by 0.05 gives IoU 0.15/0.25 = 0.6.
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2, 0, 0.9).unwrap();
        let b2 = BBox::new(0.35, 0.3, 0.2, 0.2, 0, 0.8).unwrap();
        let b3 = BBox::new(0.8, 0.8, 0.1, 0.1, 0, 0.7).unwrap();
        assert!((iou(&b1, &b2) - 0.6).abs() < 1e-9);
        assert_eq!(nms(&[b2, b3, b1], 0.45), vec![b1, b3]);
    }

    #[test]
    fn nms_is_class_wise() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2, 0, 0.9).unwrap();
        let b2 = BBox { class_id: 1, score: 0.8, ..b1 };
        assert_eq!(nms(&[b1, b2], 0.45).len(), 2);
    }

    #[test]
    fn nms_tie_keeps_first() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2, 0, 0.5).unwrap();
        let b2 = BBox { cx: 0.31, ..b1 };
        assert_eq!(nms(&[b2, b1], 0.45), vec![b2]);
    }

    #[test]
    fn pixel_projection() {
        assert_eq!(to_pixel(&bx(0.5, 0.5, 0.5, 0.5), 100, 100), PixelRect::new(25, 25, 50, 50));
        assert_eq!(to_pixel(&bx(0.0, 0.0, 0.5, 0.5), 100, 100), PixelRect::new(0, 0, 25, 25));
        assert_eq!(to_pixel(&bx(0.5, 0.5, 1.0, 1.0), 1920, 1080), PixelRect::new(0, 0, 1920, 1080));
        // A sliver at the far edge still yields a 1-pixel rect inside the frame.
        assert_eq!(to_pixel(&bx(1.0, 1.0, 1e-6, 1e-6), 10, 10), PixelRect::new(9, 9, 1, 1));
    }

    #[test]
    fn tensor_file_round_trip() {
        let header = TensorHeader { grid_size: 2, anchor_count: 1, class_count: 1 };
        let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let bytes = write_head_tensor(header, &values);
        assert!(bytes.starts_with(b"2 1 1\n"));
        let (h, v) = parse_head_tensor(&bytes[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(v, values);
        assert!(parse_head_tensor(&b"2 1\n"[..]).is_err());
        assert!(parse_head_tensor(&b"1 1 1\n\x00\x00"[..]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.01..=1.0f64, 0.01..=1.0f64, 0u32..3, 0.0..=1.0f64)
            .prop_map(|(cx, cy, w, h, c, s)| BBox::new(cx, cy, w, h, c, s).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_survivors_are_separated(boxes in prop::collection::vec(arb_box(), 0..20), thr in 0.0..=1.0f64) {
            let kept = nms(&boxes, thr);
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(boxes.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || iou(a, b) <= thr);
                }
            }
        }

        #[test]
        fn to_pixel_stays_inside(b in arb_box(), fw in 1u32..4000, fh in 1u32..4000) {
            let r = to_pixel(&b, fw, fh);
            prop_assert!(r.fits_within(fw, fh));
        }
    }
}
