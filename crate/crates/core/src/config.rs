//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must match a
//! [`PipelineConfig`] field name exactly; unknown keys are rejected. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{filters_for, DetectorHeadSpec, GeometryError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: invalid value {value:?} for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, line: usize, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config key `{0}` is given twice")]
    DuplicateKey(String),
    #[error(transparent)]
    Head(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ConfigError {
    /// The offending key, when the error is about one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. } | ConfigError::InvalidValue { key, .. } | ConfigError::DuplicateKey(key) => {
                Some(key)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    /// A full ingest queue discards its oldest frame to admit the newest.
    DropOldest,
    /// A full ingest queue makes the source wait.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePacing {
    /// Frames are read as fast as the source yields them.
    Fast,
    /// Frames are released at their capture timestamps.
    Realtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gate_threshold: f64,
    pub detector_conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub queue_capacity: usize,
    pub drop_policy: DropPolicy,
    pub source_pacing: SourcePacing,
    pub ocr_language: String,
    pub ocr_timeout_ms: u64,
    pub ocr_workers: usize,
    pub ocr_min_plate_height: u32,
    pub classifier_backend: String,
    pub detector_backend: String,
    pub ocr_backend: String,
    pub ocr_command: String,
    pub ocr_mock_manifest: Option<PathBuf>,
    pub detector_head_spec: Option<PathBuf>,
    pub source: Option<String>,
    pub decoder_command: Option<String>,
    pub store_path: PathBuf,
    pub warning_log: PathBuf,
    pub record_dir: PathBuf,
    pub bind_address: String,
    pub port: u16,
    pub webhook_url: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gate_threshold: 0.5,
            detector_conf_threshold: 0.25,
            nms_iou_threshold: 0.45,
            queue_capacity: 8,
            drop_policy: DropPolicy::DropOldest,
            source_pacing: SourcePacing::Fast,
            ocr_language: "ben".into(),
            ocr_timeout_ms: 5000,
            ocr_workers: 2,
            ocr_min_plate_height: crate::ocr::DEFAULT_MIN_PLATE_HEIGHT,
            classifier_backend: "mock".into(),
            detector_backend: "mock".into(),
            ocr_backend: "mock".into(),
            ocr_command: "tesseract {input} {output} -l {lang}".into(),
            ocr_mock_manifest: None,
            detector_head_spec: None,
            source: None,
            decoder_command: None,
            store_path: PathBuf::from("events.ndjson"),
            warning_log: PathBuf::from("warnings.ndjson"),
            record_dir: PathBuf::from("recordings"),
            bind_address: "127.0.0.1".into(),
            port: 8080,
            webhook_url: None,
        }
    }
}

/// Splits `key = value` lines, reporting 1-based line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if pairs.iter().any(|(_, k, _)| *k == key) {
            return Err(ConfigError::DuplicateKey(key));
        }
        pairs.push((i + 1, key, value.trim().to_string()));
    }
    Ok(pairs)
}

fn invalid(key: &str, value: &str, line: usize, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), line, reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| invalid(key, value, line, e.to_string()))
}

fn parse_fraction(key: &str, value: &str, line: usize) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(key, value, line)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(key, value, line, "must lie in [0, 1]"));
    }
    Ok(v)
}

fn optional(value: &str) -> Option<String> {
    if value.is_empty() || value.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(value.to_string())
    }
}

impl PipelineConfig {
    /// Parses config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let resolve = |p: &str| -> PathBuf {
            let path = PathBuf::from(p);
            match base_dir {
                Some(base) if path.is_relative() => base.join(path),
                _ => path,
            }
        };
        for (line, key, value) in parse_pairs(text)? {
            let v = value.as_str();
            match key.as_str() {
                "gate_threshold" => cfg.gate_threshold = parse_fraction(&key, v, line)?,
                "detector_conf_threshold" => cfg.detector_conf_threshold = parse_fraction(&key, v, line)?,
                "nms_iou_threshold" => cfg.nms_iou_threshold = parse_fraction(&key, v, line)?,
                "queue_capacity" => {
                    cfg.queue_capacity = parse_num(&key, v, line)?;
                    if cfg.queue_capacity == 0 {
                        return Err(invalid(&key, v, line, "must be >= 1"));
                    }
                }
                "drop_policy" => {
                    cfg.drop_policy = match v {
                        "drop_oldest" => DropPolicy::DropOldest,
                        "block" => DropPolicy::Block,
                        _ => return Err(invalid(&key, v, line, "expected drop_oldest or block")),
                    }
                }
                "source_pacing" => {
                    cfg.source_pacing = match v {
                        "fast" => SourcePacing::Fast,
                        "realtime" => SourcePacing::Realtime,
                        _ => return Err(invalid(&key, v, line, "expected fast or realtime")),
                    }
                }
                "ocr_language" => {
                    if v.is_empty() {
                        return Err(invalid(&key, v, line, "must not be empty"));
                    }
                    cfg.ocr_language = value.clone();
                }
                "ocr_timeout_ms" => cfg.ocr_timeout_ms = parse_num(&key, v, line)?,
                "ocr_workers" => {
                    cfg.ocr_workers = parse_num(&key, v, line)?;
                    if cfg.ocr_workers == 0 {
                        return Err(invalid(&key, v, line, "must be >= 1"));
                    }
                }
                "ocr_min_plate_height" => cfg.ocr_min_plate_height = parse_num(&key, v, line)?,
                "classifier_backend" => cfg.classifier_backend = value.clone(),
                "detector_backend" => cfg.detector_backend = value.clone(),
                "ocr_backend" => cfg.ocr_backend = value.clone(),
                "ocr_command" => cfg.ocr_command = value.clone(),
                "ocr_mock_manifest" => cfg.ocr_mock_manifest = optional(v).map(|p| resolve(&p)),
                "detector_head_spec" => cfg.detector_head_spec = optional(v).map(|p| resolve(&p)),
                "source" => {
                    cfg.source = optional(v).map(|s| if s == "-" { s } else { resolve(&s).to_string_lossy().into_owned() })
                }
                "decoder_command" => cfg.decoder_command = optional(v),
                "store_path" => cfg.store_path = resolve(v),
                "warning_log" => cfg.warning_log = resolve(v),
                "record_dir" => cfg.record_dir = resolve(v),
                "bind_address" => cfg.bind_address = value.clone(),
                "port" => cfg.port = parse_num(&key, v, line)?,
                "webhook_url" => cfg.webhook_url = optional(v),
                _ => return Err(ConfigError::UnknownKey { key, line }),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent())
    }

    /// Head spec from `detector_head_spec`, or the built-in plate head.
    pub fn head_spec(&self) -> Result<DetectorHeadSpec, ConfigError> {
        match &self.detector_head_spec {
            Some(path) => load_head_spec(path),
            None => Ok(DetectorHeadSpec::plate_default()),
        }
    }
}

/// Parses a head spec file with keys `class_count`, `input_width`,
/// `input_height`, `grid_size` and `anchors` (`w,h` pairs separated by
/// spaces). Missing keys take the plate-head defaults.
pub fn parse_head_spec(text: &str) -> Result<DetectorHeadSpec, ConfigError> {
    let base = DetectorHeadSpec::plate_default();
    let mut class_count = base.class_count();
    let mut input_width = base.input_width();
    let mut input_height = base.input_height();
    let mut grid_size = base.grid_size();
    let mut anchors = base.anchors().to_vec();
    for (line, key, value) in parse_pairs(text)? {
        let v = value.as_str();
        match key.as_str() {
            "class_count" => class_count = parse_num(&key, v, line)?,
            "input_width" => input_width = parse_num(&key, v, line)?,
            "input_height" => input_height = parse_num(&key, v, line)?,
            "grid_size" => grid_size = parse_num(&key, v, line)?,
            "anchors" => {
                anchors = v
                    .split_whitespace()
                    .map(|pair| {
                        let (w, h) = pair.split_once(',').ok_or_else(|| invalid(&key, v, line, "anchors are `w,h` pairs"))?;
                        Ok((parse_num::<f64>(&key, w, line)?, parse_num::<f64>(&key, h, line)?))
                    })
                    .collect::<Result<_, ConfigError>>()?;
            }
            _ => return Err(ConfigError::UnknownKey { key, line }),
        }
    }
    Ok(DetectorHeadSpec::new(class_count, input_width, input_height, grid_size, anchors)?)
}

pub fn load_head_spec(path: &Path) -> Result<DetectorHeadSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_head_spec(&text)
}

/// Training hyperparameters of one model, kept as inert metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    pub classes: usize,
    pub batch: u32,
    pub subdivision: Option<u32>,
    pub learning_rate: f64,
    /// Recorded as epochs for the classifier.
    pub max_batches: u32,
    /// Stored verbatim.
    pub steps: Vec<u32>,
    pub width: u32,
    pub height: u32,
    pub filters: usize,
}

impl ModelMetadata {
    pub fn vehicle_classifier() -> Self {
        Self {
            name: "vehicle-classifier".into(),
            classes: 4,
            batch: 32,
            subdivision: None,
            learning_rate: 0.0001,
            max_batches: 100,
            steps: vec![190, 90],
            width: 96,
            height: 96,
            filters: 32,
        }
    }

    pub fn plate_detector() -> Self {
        Self {
            name: "plate-detector".into(),
            classes: 1,
            batch: 64,
            subdivision: Some(16),
            learning_rate: 0.001,
            max_batches: 3500,
            steps: vec![4800, 5400],
            width: 416,
            height: 416,
            filters: filters_for(&DetectorHeadSpec::plate_default()),
        }
    }
}
