//! Frame-stream orchestration: vehicle gate, plate detection, OCR.
//!
//! [`process_frame`] is the pure per-frame path. [`run`] wraps it in a staged
//! worker layout: an ingest thread fills a bounded frame queue, a processing
//! thread drains it, and the caller's thread hands finished frames to the
//! sink in frame order.

pub mod mock;
pub mod source;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DropPolicy, PipelineConfig};
use crate::geometry::{self, BBox, DetectorHeadSpec, GeometryError, PixelRect};
use crate::imaging::{self, ImageBuf, ImagingError};
use crate::ocr::{self, OcrEngine, OcrError};
use crate::store::{Store, StoreError};

pub use source::{FrameSource, SourceError};

/// Side length of the square classifier input.
pub const GATE_INPUT_SIDE: u32 = 96;

/// How long the processing stage waits on an empty queue before
/// re-checking the stop flag.
const QUEUE_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Bus,
    Car,
    Motorbike,
    Truck,
}

impl VehicleClass {
    /// Classifier output order.
    pub const ALL: [VehicleClass; 4] = [VehicleClass::Bus, VehicleClass::Car, VehicleClass::Motorbike, VehicleClass::Truck];

    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Bus => "bus",
            VehicleClass::Car => "car",
            VehicleClass::Motorbike => "motorbike",
            VehicleClass::Truck => "truck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub class: VehicleClass,
    pub scores: [f64; 4],
}

impl GateDecision {
    pub fn score(&self) -> f64 {
        self.scores[self.class as usize]
    }
}

#[derive(Debug, Clone)]
pub struct FrameEnvelope {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub image: Arc<ImageBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcrStatus {
    Ok,
    TimedOut,
    EngineNotFound,
    EngineFailed,
    /// The crop was too small or had a single intensity.
    UnusableCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub vehicle_class: VehicleClass,
    pub vehicle_score: f64,
    pub plate_rect: PixelRect,
    pub detector_score: f64,
    pub raw_text: String,
    pub normalized_text: String,
    pub ocr_ms: f64,
    pub ocr_status: OcrStatus,
    /// Path of the persisted crop, relative to the store's directory. Empty
    /// until the event is stored.
    #[serde(default)]
    pub crop_ref: String,
}

/// An event together with the color crop it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub event: DetectionEvent,
    pub crop: ImageBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    /// `None` when the frame was gated out.
    pub gate: Option<GateDecision>,
    /// In descending detector score order.
    pub detections: Vec<Detection>,
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct BackendError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gate,
    Detect,
    Ocr,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Gate => "gate",
            Stage::Detect => "detect",
            Stage::Ocr => "ocr",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame_index}: {stage} backend failed: {message}")]
    BackendFailure { stage: Stage, frame_index: u64, message: String },
    #[error("unknown {kind} backend {name:?}")]
    UnknownBackend { kind: &'static str, name: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Ocr(#[from] OcrError),
    #[error("event sink failed: {0}")]
    Sink(String),
}

pub trait VehicleClassifier: Send + Sync {
    /// Scores for bus, car, motorbike and truck, each in `[0, 1]`.
    fn classify(&self, image: &ImageBuf) -> Result<[f64; 4], BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorOutput {
    /// Raw head logits, decoded with the configured head spec.
    RawHead(Vec<f32>),
    /// Already-decoded boxes, normalized to the detector input.
    Boxes(Vec<BBox>),
}

pub trait PlateDetector: Send + Sync {
    fn detect(&self, image: &ImageBuf) -> Result<DetectorOutput, BackendError>;
}

#[derive(Clone)]
pub struct Backends {
    pub classifier: Arc<dyn VehicleClassifier>,
    pub detector: Arc<dyn PlateDetector>,
    pub ocr: Arc<dyn OcrEngine>,
    pub head_spec: DetectorHeadSpec,
}

impl Backends {
    /// Builds the backends named in the config.
    ///
    /// Classifier: `mock`. Detector: `mock` or `replay:<tensor file>`.
    /// OCR: `mock` (answers from `ocr_mock_manifest`, if any) or `command`
    /// (runs `ocr_command`).
    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let head_spec = config.head_spec()?;
        let classifier: Arc<dyn VehicleClassifier> = match config.classifier_backend.as_str() {
            "mock" => Arc::new(mock::ContentGateClassifier),
            other => return Err(PipelineError::UnknownBackend { kind: "classifier", name: other.into() }),
        };
        let detector: Arc<dyn PlateDetector> = match config.detector_backend.as_str() {
            "mock" => Arc::new(mock::BrightRegionDetector::default()),
            other => match other.strip_prefix("replay:") {
                Some(path) => {
                    let (header, values) = geometry::read_head_tensor(std::path::Path::new(path))?;
                    if !header.matches(&head_spec) {
                        return Err(GeometryError::ShapeMismatch { expected: head_spec.tensor_len(), actual: values.len() }.into());
                    }
                    Arc::new(mock::HeadReplayDetector::new(values))
                }
                None => return Err(PipelineError::UnknownBackend { kind: "detector", name: other.into() }),
            },
        };
        let ocr: Arc<dyn OcrEngine> = match config.ocr_backend.as_str() {
            "mock" => Arc::new(match &config.ocr_mock_manifest {
                Some(path) => ocr::MockEngine::load_manifest(path)?,
                None => ocr::MockEngine::default(),
            }),
            "command" => Arc::new(ocr::CommandEngine::from_template(&config.ocr_command)?),
            other => return Err(PipelineError::UnknownBackend { kind: "ocr", name: other.into() }),
        };
        Ok(Self { classifier, detector, ocr, head_spec })
    }
}

/// Classifies the whole frame, downscaled to 96x96. Returns the best class
/// when its score reaches `threshold`; ties go to the lower class index.
pub fn gate_frame(
    frame: &FrameEnvelope,
    classifier: &dyn VehicleClassifier,
    threshold: f64,
) -> Result<Option<GateDecision>, PipelineError> {
    let failure = |message: String| PipelineError::BackendFailure { stage: Stage::Gate, frame_index: frame.frame_index, message };
    let small = imaging::resize(&frame.image, GATE_INPUT_SIDE, GATE_INPUT_SIDE)?;
    let scores = classifier.classify(&small).map_err(|e| failure(e.0))?;
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(failure(format!("score {bad} outside [0,1]")));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((scores[best] >= threshold).then(|| GateDecision { class: VehicleClass::ALL[best], scores }))
}

/// Where the source image sits inside a letterboxed canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LetterboxMapping {
    pub source_width: u32,
    pub source_height: u32,
    pub target_width: u32,
    pub target_height: u32,
    pub content_width: u32,
    pub content_height: u32,
    pub pad_left: u32,
    pub pad_top: u32,
}

impl LetterboxMapping {
    /// Maps a box normalized to the canvas back to one normalized to the
    /// source image. Parts over the padding are cut off; a box lying wholly
    /// in the padding yields `None`.
    pub fn to_source(&self, b: &BBox) -> Option<BBox> {
        let span = |lo: f64, hi: f64, target: u32, pad: u32, content: u32| {
            let map = |v: f64| ((v * f64::from(target) - f64::from(pad)) / f64::from(content)).clamp(0.0, 1.0);
            (map(lo), map(hi))
        };
        let (l, r) = span(b.left(), b.right(), self.target_width, self.pad_left, self.content_width);
        let (t, btm) = span(b.top(), b.bottom(), self.target_height, self.pad_top, self.content_height);
        if r <= l || btm <= t {
            return None;
        }
        Some(BBox::clamped((l + r) / 2.0, (t + btm) / 2.0, r - l, btm - t, b.class_id, b.score))
    }
}

/// Aspect-preserving resize onto a black `target_width x target_height`
/// canvas, centered (odd padding puts the extra row or column at the end).
pub fn letterbox(img: &ImageBuf, target_width: u32, target_height: u32) -> Result<(ImageBuf, LetterboxMapping), ImagingError> {
    if target_width == 0 || target_height == 0 {
        return Err(ImagingError::InvalidImage(format!("target dimensions {target_width}x{target_height} must be >= 1")));
    }
    let (w, h) = (u64::from(img.width()), u64::from(img.height()));
    let (tw, th) = (u64::from(target_width), u64::from(target_height));
    // Compare tw/w with th/h exactly; the limiting side fills the canvas.
    let (cw, ch) = if tw * h <= th * w {
        (tw, ((h * tw * 2 + w) / (2 * w)).clamp(1, th))
    } else {
        (((w * th * 2 + h) / (2 * h)).clamp(1, tw), th)
    };
    let (cw, ch) = (cw as u32, ch as u32);
    let mapping = LetterboxMapping {
        source_width: img.width(),
        source_height: img.height(),
        target_width,
        target_height,
        content_width: cw,
        content_height: ch,
        pad_left: (target_width - cw) / 2,
        pad_top: (target_height - ch) / 2,
    };
    let content = imaging::resize(img, cw, ch)?;
    if cw == target_width && ch == target_height {
        return Ok((content, mapping));
    }
    let c = usize::from(img.channels());
    let mut data = vec![0u8; target_width as usize * target_height as usize * c];
    let row = cw as usize * c;
    for (y, src) in content.data().chunks_exact(row).enumerate() {
        let start = ((y + mapping.pad_top as usize) * target_width as usize + mapping.pad_left as usize) * c;
        data[start..start + row].copy_from_slice(src);
    }
    Ok((ImageBuf::from_raw(target_width, target_height, img.channels(), data)?, mapping))
}

/// Gate, detect, decode, suppress, then read every surviving plate.
///
/// Gated-out frames never reach the detector or the OCR engine. OCR
/// problems do not abort the frame: the event carries empty text and an
/// [`OcrStatus`] describing what went wrong.
pub fn process_frame(frame: &FrameEnvelope, config: &PipelineConfig, backends: &Backends) -> Result<FrameOutcome, PipelineError> {
    let Some(gate) = gate_frame(frame, backends.classifier.as_ref(), config.gate_threshold)? else {
        return Ok(FrameOutcome { gate: None, detections: Vec::new() });
    };

    let spec = &backends.head_spec;
    let (canvas, mapping) = letterbox(&frame.image, spec.input_width(), spec.input_height())?;
    let output = backends.detector.detect(&canvas).map_err(|e| PipelineError::BackendFailure {
        stage: Stage::Detect,
        frame_index: frame.frame_index,
        message: e.0,
    })?;
    let candidates = match output {
        DetectorOutput::RawHead(raw) => geometry::decode_head(&raw, spec, config.detector_conf_threshold)?,
        DetectorOutput::Boxes(boxes) => boxes.into_iter().filter(|b| b.score >= config.detector_conf_threshold).collect(),
    };
    let (width, height) = (frame.image.width(), frame.image.height());
    let plates: Vec<(PixelRect, f64)> = geometry::nms(&candidates, config.nms_iou_threshold)
        .iter()
        .filter_map(|b| mapping.to_source(b))
        .map(|b| (geometry::to_pixel(&b, width, height), b.score))
        .collect();

    let mut crops = Vec::with_capacity(plates.len());
    for (rect, _) in &plates {
        crops.push(imaging::crop(&frame.image, *rect)?);
    }
    let readings = read_plates(&crops, config, backends.ocr.as_ref());

    let detections = plates
        .into_iter()
        .zip(crops)
        .zip(readings)
        .map(|(((plate_rect, detector_score), crop), reading)| Detection {
            event: DetectionEvent {
                frame_index: frame.frame_index,
                timestamp_ms: frame.timestamp_ms,
                vehicle_class: gate.class,
                vehicle_score: gate.score(),
                plate_rect,
                detector_score,
                normalized_text: ocr::normalize_text(&reading.raw_text),
                raw_text: reading.raw_text,
                ocr_ms: reading.ocr_ms,
                ocr_status: reading.status,
                crop_ref: String::new(),
            },
            crop,
        })
        .collect();
    Ok(FrameOutcome { gate: Some(gate), detections })
}

struct PlateReading {
    raw_text: String,
    ocr_ms: f64,
    status: OcrStatus,
}

fn read_plates(crops: &[ImageBuf], config: &PipelineConfig, engine: &dyn OcrEngine) -> Vec<PlateReading> {
    let workers = config.ocr_workers.clamp(1, crops.len().max(1));
    if workers == 1 {
        return crops.iter().map(|c| read_plate(c, config, engine)).collect();
    }
    let chunk = crops.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = crops
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|c| read_plate(c, config, engine)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("OCR worker panicked")).collect()
    })
}

fn read_plate(crop: &ImageBuf, config: &PipelineConfig, engine: &dyn OcrEngine) -> PlateReading {
    let failed = |status| PlateReading { raw_text: String::new(), ocr_ms: 0.0, status };
    let prepared = match ocr::preprocess_plate_with(crop, config.ocr_min_plate_height) {
        Ok(p) => p,
        Err(_) => return failed(OcrStatus::UnusableCrop),
    };
    let timeout = Duration::from_millis(config.ocr_timeout_ms);
    match ocr::recognize(&prepared, engine, &config.ocr_language, timeout) {
        Ok(r) if r.timed_out => PlateReading { raw_text: String::new(), ocr_ms: r.duration_ms, status: OcrStatus::TimedOut },
        Ok(r) => PlateReading { raw_text: r.raw_text, ocr_ms: r.duration_ms, status: OcrStatus::Ok },
        Err(OcrError::EngineNotFound(_)) => failed(OcrStatus::EngineNotFound),
        Err(OcrError::TimedOut(ms)) => PlateReading { raw_text: String::new(), ocr_ms: ms as f64, status: OcrStatus::TimedOut },
        Err(_) => failed(OcrStatus::EngineFailed),
    }
}

/// Receives every processed frame, in frame order, on the thread that
/// called [`run`].
pub trait FrameSink {
    fn frame_done(&mut self, frame: &FrameEnvelope, outcome: &FrameOutcome) -> Result<(), PipelineError>;
}

/// Appends every detection to a [`Store`].
pub struct StoreSink<'a> {
    store: &'a Store,
}

impl<'a> StoreSink<'a> {
    pub fn new(store: &'a Store) -> Self {
        Self { store }
    }
}

impl FrameSink for StoreSink<'_> {
    fn frame_done(&mut self, _frame: &FrameEnvelope, outcome: &FrameOutcome) -> Result<(), PipelineError> {
        for d in &outcome.detections {
            self.store.append(&d.event, Some(&d.crop)).map_err(|e: StoreError| PipelineError::Sink(e.to_string()))?;
        }
        Ok(())
    }
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct CollectSink {
    pub events: Vec<DetectionEvent>,
}

impl FrameSink for CollectSink {
    fn frame_done(&mut self, _frame: &FrameEnvelope, outcome: &FrameOutcome) -> Result<(), PipelineError> {
        self.events.extend(outcome.detections.iter().map(|d| d.event.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames_in: u64,
    pub frames_processed: u64,
    pub frames_gated_out: u64,
    pub frames_dropped: u64,
    pub events: u64,
    /// From the first ingested frame to the last processed one.
    pub elapsed_ms: f64,
    /// `frames_processed / elapsed seconds`; 0 when nothing was processed.
    pub fps: f64,
}

impl RunSummary {
    pub fn fps_for(frames_processed: u64, elapsed_ms: f64) -> f64 {
        if frames_processed == 0 || elapsed_ms <= 0.0 {
            0.0
        } else {
            frames_processed as f64 / (elapsed_ms / 1000.0)
        }
    }
}

/// Live counters of a run, readable from any thread.
#[derive(Debug, Default)]
pub struct RunCounters {
    frames_in: AtomicU64,
    frames_processed: AtomicU64,
    frames_gated_out: AtomicU64,
    frames_dropped: AtomicU64,
    events: AtomicU64,
    first_frame: Mutex<Option<Instant>>,
    /// Elapsed ms at the last processed frame, as `f64` bits.
    elapsed_bits: AtomicU64,
}

impl RunCounters {
    fn mark_ingest(&self) {
        let mut first = self.first_frame.lock().expect("counter lock");
        first.get_or_insert_with(Instant::now);
        self.frames_in.fetch_add(1, Ordering::SeqCst);
    }

    fn mark_processed(&self, gated_out: bool) {
        if gated_out {
            self.frames_gated_out.fetch_add(1, Ordering::SeqCst);
        }
        let elapsed = self.first_frame.lock().expect("counter lock").map_or(0.0, |t| t.elapsed().as_secs_f64() * 1000.0);
        self.elapsed_bits.store(elapsed.to_bits(), Ordering::SeqCst);
        self.frames_processed.fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> RunSummary {
        let frames_processed = self.frames_processed.load(Ordering::SeqCst);
        let elapsed_ms = f64::from_bits(self.elapsed_bits.load(Ordering::SeqCst));
        RunSummary {
            frames_in: self.frames_in.load(Ordering::SeqCst),
            frames_processed,
            frames_gated_out: self.frames_gated_out.load(Ordering::SeqCst),
            frames_dropped: self.frames_dropped.load(Ordering::SeqCst),
            events: self.events.load(Ordering::SeqCst),
            elapsed_ms,
            fps: RunSummary::fps_for(frames_processed, elapsed_ms),
        }
    }
}

/// Stop flag and live counters shared between a run and its observers.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    stop: Arc<AtomicBool>,
    counters: Arc<RunCounters>,
}

impl RunControl {
    pub fn new() -> Self {
        Self::default()
    }

    /// Asks the run to finish; takes effect before the next frame.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn counters(&self) -> &RunCounters {
        &self.counters
    }
}

#[derive(Debug, Error)]
#[error("run ended early: {cause}")]
pub struct RunError {
    pub summary: RunSummary,
    pub cause: PipelineError,
}

/// Bounded frame queue applying the configured overflow policy.
struct FrameQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
    capacity: usize,
    policy: DropPolicy,
}

struct QueueState {
    items: VecDeque<FrameEnvelope>,
    closed: bool,
}

enum Pop {
    Frame(FrameEnvelope),
    Empty,
    Closed,
}

impl FrameQueue {
    fn new(capacity: usize, policy: DropPolicy) -> Self {
        Self {
            state: Mutex::new(QueueState { items: VecDeque::with_capacity(capacity), closed: false }),
            changed: Condvar::new(),
            capacity: capacity.max(1),
            policy,
        }
    }

    /// Returns how many frames were discarded to make room (0 or 1), or
    /// `None` when a blocking push gave up because the run stopped.
    fn push(&self, frame: FrameEnvelope, stop: &AtomicBool) -> Option<u64> {
        let mut state = self.state.lock().expect("queue lock");
        let mut dropped = 0;
        while state.items.len() >= self.capacity {
            match self.policy {
                DropPolicy::DropOldest => {
                    state.items.pop_front();
                    dropped += 1;
                }
                DropPolicy::Block => {
                    if stop.load(Ordering::SeqCst) || state.closed {
                        return None;
                    }
                    state = self.changed.wait_timeout(state, QUEUE_POLL).expect("queue lock").0;
                }
            }
        }
        state.items.push_back(frame);
        self.changed.notify_all();
        Some(dropped)
    }

    fn pop(&self, wait: Duration) -> Pop {
        let mut state = self.state.lock().expect("queue lock");
        if state.items.is_empty() && !state.closed {
            state = self.changed.wait_timeout(state, wait).expect("queue lock").0;
        }
        match state.items.pop_front() {
            Some(f) => {
                self.changed.notify_all();
                Pop::Frame(f)
            }
            None if state.closed => Pop::Closed,
            None => Pop::Empty,
        }
    }

    fn close(&self) -> usize {
        let mut state = self.state.lock().expect("queue lock");
        state.closed = true;
        self.changed.notify_all();
        state.items.len()
    }

    fn drain(&self) -> usize {
        let mut state = self.state.lock().expect("queue lock");
        state.closed = true;
        let n = state.items.len();
        state.items.clear();
        self.changed.notify_all();
        n
    }
}

/// Runs the pipeline until the source ends or `control` is stopped.
///
/// Every processed frame reaches `sink` exactly once, in frame order.
/// Frames displaced from the full queue, or still queued when the run is
/// stopped, count as dropped, so `frames_in = frames_processed +
/// frames_dropped` always holds.
#[allow(clippy::result_large_err)]
pub fn run(
    source: &mut dyn FrameSource,
    sink: &mut dyn FrameSink,
    config: &PipelineConfig,
    backends: &Backends,
    control: &RunControl,
) -> Result<RunSummary, RunError> {
    let queue = FrameQueue::new(config.queue_capacity, config.drop_policy);
    let counters = control.counters();
    let stop = control.stop.as_ref();
    let (tx, rx) = mpsc::sync_channel::<(FrameEnvelope, FrameOutcome)>(config.queue_capacity.max(1));
    let failure: Mutex<Option<PipelineError>> = Mutex::new(None);
    let fail = |e: PipelineError| {
        failure.lock().expect("failure lock").get_or_insert(e);
    };

    std::thread::scope(|scope| {
        let ingest = scope.spawn(|| {
            while !stop.load(Ordering::SeqCst) {
                match source.next_frame() {
                    Ok(Some(frame)) => {
                        counters.mark_ingest();
                        match queue.push(frame, stop) {
                            Some(dropped) => counters.frames_dropped.fetch_add(dropped, Ordering::SeqCst),
                            None => counters.frames_dropped.fetch_add(1, Ordering::SeqCst),
                        };
                    }
                    Ok(None) => break,
                    Err(e) => {
                        fail(e.into());
                        break;
                    }
                }
            }
            queue.close();
        });

        let process = scope.spawn(|| {
            let tx = tx;
            loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let frame = match queue.pop(QUEUE_POLL) {
                    Pop::Frame(f) => f,
                    Pop::Empty => continue,
                    Pop::Closed => break,
                };
                match process_frame(&frame, config, backends) {
                    Ok(outcome) => {
                        counters.mark_processed(outcome.gate.is_none());
                        if tx.send((frame, outcome)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        // The failed frame was consumed without a result.
                        counters.frames_dropped.fetch_add(1, Ordering::SeqCst);
                        fail(e);
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            }
            let left = queue.drain();
            counters.frames_dropped.fetch_add(left as u64, Ordering::SeqCst);
        });

        let mut sink_failed = false;
        for (frame, outcome) in rx {
            if sink_failed {
                continue;
            }
            match sink.frame_done(&frame, &outcome) {
                Ok(()) => {
                    counters.events.fetch_add(outcome.detections.len() as u64, Ordering::SeqCst);
                }
                Err(e) => {
                    fail(e);
                    stop.store(true, Ordering::SeqCst);
                    sink_failed = true;
                }
            }
        }
        process.join().expect("processing stage panicked");
        ingest.join().expect("ingest stage panicked");
    });

    let summary = counters.snapshot();
    match failure.into_inner().expect("failure lock") {
        Some(cause) => Err(RunError { summary, cause }),
        None => Ok(summary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocr::{EngineOutput, MockEngine};
    use std::sync::atomic::AtomicUsize;

    struct Scores([f64; 4]);

    impl VehicleClassifier for Scores {
        fn classify(&self, image: &ImageBuf) -> Result<[f64; 4], BackendError> {
            assert_eq!((image.width(), image.height(), image.channels()), (96, 96, 3));
            Ok(self.0)
        }
    }

    struct Counting<T> {
        inner: T,
        calls: AtomicUsize,
    }

    impl<T> Counting<T> {
        fn new(inner: T) -> Arc<Self> {
            Arc::new(Self { inner, calls: AtomicUsize::new(0) })
        }
    }

    impl<T: PlateDetector> PlateDetector for Counting<T> {
        fn detect(&self, image: &ImageBuf) -> Result<DetectorOutput, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.detect(image)
        }
    }

    impl<T: OcrEngine> OcrEngine for Counting<T> {
        fn run(&self, image: &ImageBuf, language: &str, timeout: Duration) -> Result<EngineOutput, OcrError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.run(image, language, timeout)
        }
    }

    fn frame(w: u32, h: u32) -> FrameEnvelope {
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[(x * 7 % 251) as u8, (y * 3 % 241) as u8, ((x + y) % 200) as u8]);
            }
        }
        FrameEnvelope { frame_index: 4, timestamp_ms: 133, image: Arc::new(ImageBuf::from_raw(w, h, 3, data).unwrap()) }
    }

    fn gate(scores: [f64; 4], threshold: f64) -> Option<VehicleClass> {
        gate_frame(&frame(64, 48), &Scores(scores), threshold).unwrap().map(|d| d.class)
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate([0.9, 0.05, 0.03, 0.02], 0.5), Some(VehicleClass::Bus));
        assert_eq!(gate([0.2; 4], 0.5), None);
        assert_eq!(gate([0.5, 0.5, 0.0, 0.0], 0.5), Some(VehicleClass::Bus));
        assert_eq!(gate([0.1, 0.2, 0.7, 0.6], 0.5), Some(VehicleClass::Motorbike));
    }

    #[test]
    fn gate_rejects_out_of_range_scores() {
        let err = gate_frame(&frame(10, 10), &Scores([1.5, 0.0, 0.0, 0.0]), 0.5).unwrap_err();
        assert!(matches!(err, PipelineError::BackendFailure { stage: Stage::Gate, frame_index: 4, .. }));
    }

    #[test]
    fn letterbox_full_hd() {
        let (canvas, m) = letterbox(&ImageBuf::filled(1920, 1080, &[200, 200, 200]).unwrap(), 416, 416).unwrap();
        assert_eq!((m.content_width, m.content_height, m.pad_left, m.pad_top), (416, 234, 0, 91));
        assert_eq!(canvas.pixel(0, 90), &[0, 0, 0]);
        assert_eq!(canvas.pixel(0, 91), &[200, 200, 200]);
        assert_eq!(canvas.pixel(415, 324), &[200, 200, 200]);
        assert_eq!(canvas.pixel(415, 325), &[0, 0, 0]);
    }

    #[test]
    fn letterbox_square_is_plain_resize() {
        let img = frame(200, 200).image;
        let (canvas, m) = letterbox(&img, 416, 416).unwrap();
        assert_eq!((m.pad_left, m.pad_top), (0, 0));
        assert_eq!(canvas, imaging::resize(&img, 416, 416).unwrap());
    }

    #[test]
    fn letterbox_tall_pads_columns() {
        let (_, m) = letterbox(&ImageBuf::filled(100, 400, &[1, 2, 3]).unwrap(), 416, 416).unwrap();
        assert_eq!((m.content_width, m.content_height, m.pad_left, m.pad_top), (104, 416, 156, 0));
    }

    #[test]
    fn mapping_inverts_content_area() {
        let (_, m) = letterbox(&ImageBuf::filled(1920, 1080, &[0, 0, 0]).unwrap(), 416, 416).unwrap();
        // The content band spans rows 91..325 of the canvas.
        let whole = BBox::new(0.5, 208.0 / 416.0, 1.0, 234.0 / 416.0, 0, 0.9).unwrap();
        let back = m.to_source(&whole).unwrap();
        assert!((back.cx - 0.5).abs() < 1e-12 && (back.cy - 0.5).abs() < 1e-12);
        assert!((back.w - 1.0).abs() < 1e-12 && (back.h - 1.0).abs() < 1e-12);
        let in_padding = BBox::new(0.5, 40.0 / 416.0, 0.5, 20.0 / 416.0, 0, 0.9).unwrap();
        assert_eq!(m.to_source(&in_padding), None);
    }

    fn backends(scores: [f64; 4], boxes: Vec<BBox>, ocr: MockEngine) -> (Backends, Arc<Counting<mock::FixedDetector>>, Arc<Counting<MockEngine>>) {
        let detector = Counting::new(mock::FixedDetector(boxes));
        let engine = Counting::new(ocr);
        let b = Backends {
            classifier: Arc::new(Scores(scores)),
            detector: detector.clone(),
            ocr: engine.clone(),
            head_spec: DetectorHeadSpec::plate_default(),
        };
        (b, detector, engine)
    }

    #[test]
    fn gated_out_frame_skips_detector_and_ocr() {
        let boxes = vec![BBox::new(0.5, 0.5, 0.3, 0.3, 0, 0.9).unwrap()];
        let (b, detector, engine) = backends([0.1; 4], boxes, MockEngine::default());
        let out = process_frame(&frame(320, 240), &PipelineConfig::default(), &b).unwrap();
        assert_eq!(out, FrameOutcome { gate: None, detections: vec![] });
        assert_eq!(detector.calls.load(Ordering::SeqCst), 0);
        assert_eq!(engine.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn low_confidence_boxes_are_filtered() {
        let boxes = vec![BBox::new(0.5, 0.5, 0.3, 0.3, 0, 0.2).unwrap()];
        let (b, _, engine) = backends([0.0, 1.0, 0.0, 0.0], boxes, MockEngine::default());
        let out = process_frame(&frame(320, 240), &PipelineConfig::default(), &b).unwrap();
        assert_eq!(out.gate.unwrap().class, VehicleClass::Car);
        assert!(out.detections.is_empty());
        assert_eq!(engine.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn unusable_crop_is_flagged() {
        // A 416-wide canvas box of 4 px maps to a tiny crop.
        let boxes = vec![BBox::new(0.5, 0.5, 4.0 / 416.0, 4.0 / 416.0, 0, 0.9).unwrap()];
        let (b, _, engine) = backends([1.0, 0.0, 0.0, 0.0], boxes, MockEngine::default());
        let out = process_frame(&frame(416, 416), &PipelineConfig::default(), &b).unwrap();
        assert_eq!(out.detections.len(), 1);
        let e = &out.detections[0].event;
        assert_eq!((e.ocr_status, e.raw_text.as_str(), e.ocr_ms), (OcrStatus::UnusableCrop, "", 0.0));
        assert_eq!(engine.calls.load(Ordering::SeqCst), 0);
    }

    struct Missing;

    impl OcrEngine for Missing {
        fn run(&self, _: &ImageBuf, _: &str, _: Duration) -> Result<EngineOutput, OcrError> {
            Err(OcrError::EngineNotFound("tesseract".into()))
        }
    }

    #[test]
    fn missing_engine_yields_flagged_event() {
        let boxes = vec![BBox::new(0.5, 0.5, 0.4, 0.4, 0, 0.9).unwrap()];
        let b = Backends {
            classifier: Arc::new(Scores([1.0, 0.0, 0.0, 0.0])),
            detector: Arc::new(mock::FixedDetector(boxes)),
            ocr: Arc::new(Missing),
            head_spec: DetectorHeadSpec::plate_default(),
        };
        let out = process_frame(&frame(416, 416), &PipelineConfig::default(), &b).unwrap();
        let e = &out.detections[0].event;
        assert_eq!((e.ocr_status, e.raw_text.as_str()), (OcrStatus::EngineNotFound, ""));
    }

    #[test]
    fn queue_drops_oldest_when_full() {
        let q = FrameQueue::new(2, DropPolicy::DropOldest);
        let stop = AtomicBool::new(false);
        let mut f = frame(2, 2);
        for i in 0..5 {
            f.frame_index = i;
            let dropped = q.push(f.clone(), &stop).unwrap();
            assert_eq!(dropped, u64::from(i >= 2));
        }
        let mut seen = vec![];
        q.close();
        while let Pop::Frame(f) = q.pop(Duration::ZERO) {
            seen.push(f.frame_index);
        }
        assert_eq!(seen, vec![3, 4]);
    }

    #[test]
    fn fps_arithmetic() {
        assert!((RunSummary::fps_for(42, 3000.0) - 14.0).abs() < 1e-12);
        assert_eq!(RunSummary::fps_for(0, 0.0), 0.0);
    }
}
