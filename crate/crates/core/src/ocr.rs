//! Plate preprocessing, OCR engine adapters and text metrics.
//!
//! Engines are one-shot: every recognition hands a binarized image to the
//! engine and waits for its text. [`CommandEngine`] drives an external
//! Tesseract-style executable; [`MockEngine`] answers from a manifest keyed
//! by image content hash.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

use crate::imaging::{self, ImageBuf, ImagingError};

/// How often a running engine process is checked for completion.
pub const ENGINE_POLL_INTERVAL: Duration = Duration::from_millis(10);

pub const DEFAULT_MIN_PLATE_HEIGHT: u32 = 64;
pub const MIN_CROP_SIDE: u32 = 8;

#[derive(Debug, Error)]
pub enum OcrError {
    #[error("crop {width}x{height} is smaller than {min}x{min}")]
    CropTooSmall { width: u32, height: u32, min: u32 },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("OCR engine not found: {0}")]
    EngineNotFound(String),
    #[error("OCR engine exited with {status}: {diagnostics}")]
    EngineCrashed { status: String, diagnostics: String },
    #[error("OCR engine timed out after {0} ms")]
    TimedOut(u64),
    #[error("ground truth text is empty")]
    EmptyGroundTruth,
    #[error("invalid OCR manifest line {line}: {reason}")]
    InvalidManifest { line: usize, reason: String },
    #[error("OCR I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Normal,
    Inverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    pub raw_text: String,
    pub duration_ms: f64,
    pub polarity_used: Polarity,
    pub timed_out: bool,
}

/// Binarized plate ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatePrepared {
    pub image: ImageBuf,
    pub threshold: u8,
    pub scale: f64,
}

/// Grayscale, upscale short crops to `min_height`, then Otsu-binarize.
pub fn preprocess_plate_with(crop: &ImageBuf, min_height: u32) -> Result<PlatePrepared, OcrError> {
    if crop.width() < MIN_CROP_SIDE || crop.height() < MIN_CROP_SIDE {
        return Err(OcrError::CropTooSmall { width: crop.width(), height: crop.height(), min: MIN_CROP_SIDE });
    }
    let gray = if crop.channels() == 3 { imaging::grayscale(crop)? } else { crop.clone() };
    let (gray, scale) = if gray.height() < min_height {
        let scale = f64::from(min_height) / f64::from(gray.height());
        let width = (f64::from(gray.width()) * scale).round().max(1.0) as u32;
        (imaging::resize(&gray, width, min_height)?, scale)
    } else {
        (gray, 1.0)
    };
    let threshold = imaging::otsu_threshold(&imaging::histogram(&gray)?)?;
    let image = imaging::binarize(&gray, threshold)?;
    Ok(PlatePrepared { image, threshold, scale })
}

pub fn preprocess_plate(crop: &ImageBuf) -> Result<PlatePrepared, OcrError> {
    preprocess_plate_with(crop, DEFAULT_MIN_PLATE_HEIGHT)
}

/// Text returned by one engine invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    pub text: String,
    pub duration_ms: f64,
}

pub trait OcrEngine: Send + Sync {
    fn run(&self, image: &ImageBuf, language: &str, timeout: Duration) -> Result<EngineOutput, OcrError>;
}

/// Runs the engine on both polarities and keeps the reading with more plate
/// characters; ties keep the normal polarity. The timeout budget is shared
/// by both attempts.
pub fn recognize(
    prepared: &PlatePrepared,
    engine: &dyn OcrEngine,
    language: &str,
    timeout: Duration,
) -> Result<OcrResult, OcrError> {
    let started = Instant::now();
    let timed_out = |elapsed: Duration| OcrResult {
        raw_text: String::new(),
        duration_ms: elapsed.as_secs_f64() * 1000.0,
        polarity_used: Polarity::Normal,
        timed_out: true,
    };

    let normal = match engine.run(&prepared.image, language, timeout) {
        Ok(out) => out,
        Err(OcrError::TimedOut(_)) => return Ok(timed_out(started.elapsed())),
        Err(e) => return Err(e),
    };
    let mut result = OcrResult {
        raw_text: normal.text,
        duration_ms: normal.duration_ms,
        polarity_used: Polarity::Normal,
        timed_out: false,
    };

    let remaining = timeout.saturating_sub(started.elapsed());
    if remaining.is_zero() {
        return Ok(result);
    }
    match engine.run(&imaging::invert(&prepared.image), language, remaining) {
        Ok(inverted) => {
            result.duration_ms += inverted.duration_ms;
            if plate_char_count(&inverted.text) > plate_char_count(&result.raw_text) {
                result.raw_text = inverted.text;
                result.polarity_used = Polarity::Inverted;
            }
        }
        // The normal reading already stands on its own.
        Err(OcrError::TimedOut(_)) => result.duration_ms = started.elapsed().as_secs_f64() * 1000.0,
        Err(e) => return Err(e),
    }
    Ok(result)
}

/// Number of plate characters (letters and digits, no separators) left
/// after normalization.
pub fn plate_char_count(raw: &str) -> usize {
    normalize_text(raw)
        .graphemes(true)
        .filter(|g| g.chars().any(|c| c != ' ' && c != '-'))
        .count()
}

fn is_plate_char(c: char) -> bool {
    matches!(c, '\u{0980}'..='\u{09FF}' | '0'..='9' | '-' | ' ')
}

/// NFC composition, then only Bangla script, ASCII digits, hyphens and single
/// spaces survive.
pub fn normalize_text(raw: &str) -> String {
    let composed: String = raw.nfc().collect();
    // Removing characters can bring a base and a combining mark together,
    // so compose once more after filtering.
    let kept: String = composed
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| is_plate_char(c))
        .nfc()
        .collect();
    kept.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ")
}

pub fn grapheme_count(text: &str) -> usize {
    text.graphemes(true).count()
}

/// Grapheme-level accuracy in percent.
///
/// The two strings are aligned with unit-cost edits. Among minimum-cost
/// alignments the one with the most exact matches is used, and the score is
/// `round(100 * matches / len(ground_truth))`.
pub fn char_accuracy(ground_truth: &str, predicted: &str) -> Result<u32, OcrError> {
    let truth: Vec<&str> = ground_truth.graphemes(true).collect();
    if truth.is_empty() {
        return Err(OcrError::EmptyGroundTruth);
    }
    let pred: Vec<&str> = predicted.graphemes(true).collect();
    let matched = aligned_matches(&truth, &pred);
    Ok(((200 * matched + truth.len()) / (2 * truth.len())) as u32)
}

/// Matches in the best minimum-edit alignment of two grapheme sequences.
pub fn aligned_matches(truth: &[&str], pred: &[&str]) -> usize {
    // dp[j] = (cost, -matches) for truth[..i] vs pred[..j]; smaller is better.
    let mut prev: Vec<(usize, isize)> = (0..=pred.len()).map(|j| (j, 0)).collect();
    let mut cur = vec![(0usize, 0isize); pred.len() + 1];
    for i in 1..=truth.len() {
        cur[0] = (i, 0);
        for j in 1..=pred.len() {
            let diag = if truth[i - 1] == pred[j - 1] {
                (prev[j - 1].0, prev[j - 1].1 - 1)
            } else {
                (prev[j - 1].0 + 1, prev[j - 1].1)
            };
            let del = (prev[j].0 + 1, prev[j].1);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1);
            cur[j] = diag.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (-prev[pred.len()].1) as usize
}

/// Invokes an external engine as `<program> <args..>` where the arguments may
/// use `{input}`, `{output}` and `{lang}` placeholders. The engine must write
/// its text to `<output>.txt`.
#[derive(Debug, Clone)]
pub struct CommandEngine {
    program: PathBuf,
    args: Vec<String>,
}

impl CommandEngine {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self { program: program.into(), args }
    }

    /// Tesseract argument shape: `<bin> {input} {output} -l {lang}`.
    pub fn tesseract(program: impl Into<PathBuf>) -> Self {
        Self::new(program, ["{input}", "{output}", "-l", "{lang}"].map(String::from).to_vec())
    }

    /// Parses a whitespace-separated command template such as
    /// `tesseract {input} {output} -l {lang}`.
    pub fn from_template(template: &str) -> Result<Self, OcrError> {
        let mut parts = template.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| OcrError::EngineNotFound("empty engine command".into()))?;
        Ok(Self::new(program, parts.map(String::from).collect()))
    }
}

impl OcrEngine for CommandEngine {
    fn run(&self, image: &ImageBuf, language: &str, timeout: Duration) -> Result<EngineOutput, OcrError> {
        let dir = tempfile::Builder::new().prefix("alpr-ocr").tempdir()?;
        let input = dir.path().join("plate.pgm");
        let output = dir.path().join("out");
        imaging::write_pnm(image, &input)?;
        let stderr_path = dir.path().join("stderr.log");

        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
                    .replace("{lang}", language)
            })
            .collect();

        let started = Instant::now();
        let mut child = Command::new(&self.program)
            .args(&args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(std::fs::File::create(&stderr_path)?)
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                    OcrError::EngineNotFound(format!("{}: {e}", self.program.display()))
                }
                _ => OcrError::Io(e),
            })?;

        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            let elapsed = started.elapsed();
            if elapsed >= timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(OcrError::TimedOut(elapsed.as_millis() as u64));
            }
            std::thread::sleep(ENGINE_POLL_INTERVAL.min(timeout - elapsed));
        };
        let duration_ms = started.elapsed().as_secs_f64() * 1000.0;

        if !status.success() {
            let diagnostics = std::fs::read_to_string(&stderr_path).unwrap_or_default();
            return Err(OcrError::EngineCrashed { status: status.to_string(), diagnostics: diagnostics.trim().to_string() });
        }
        let text_path = PathBuf::from(format!("{}.txt", output.display()));
        let text = std::fs::read_to_string(&text_path).map_err(|e| OcrError::EngineCrashed {
            status: status.to_string(),
            diagnostics: format!("no output at {}: {e}", text_path.display()),
        })?;
        Ok(EngineOutput { text, duration_ms })
    }
}

/// SHA-256 (hex) of the PGM/PPM encoding of an image.
pub fn content_hash(image: &ImageBuf) -> String {
    hex::encode(Sha256::digest(imaging::encode_pnm(image)))
}

/// Deterministic engine answering from a `hash<TAB>text` manifest.
/// Unknown images read as empty text. In the text, `\n`, `\t` and `\\`
/// stand for a newline, a tab and a backslash.
#[derive(Debug, Clone, Default)]
pub struct MockEngine {
    answers: HashMap<String, String>,
    duration_ms: f64,
}

impl MockEngine {
    pub fn new(answers: HashMap<String, String>) -> Self {
        Self { answers, duration_ms: 0.0 }
    }

    /// Reported engine time for every call.
    pub fn with_duration_ms(mut self, duration_ms: f64) -> Self {
        self.duration_ms = duration_ms;
        self
    }

    pub fn parse_manifest(text: &str) -> Result<Self, OcrError> {
        let mut answers = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (hash, answer) = line.split_once('\t').ok_or_else(|| OcrError::InvalidManifest {
                line: i + 1,
                reason: "expected `<sha256>\\t<text>`".into(),
            })?;
            let hash = hash.trim();
            if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(OcrError::InvalidManifest { line: i + 1, reason: format!("bad hash {hash:?}") });
            }
            answers.insert(hash.to_ascii_lowercase(), unescape(answer));
        }
        Ok(Self::new(answers))
    }

    pub fn load_manifest(path: &Path) -> Result<Self, OcrError> {
        Self::parse_manifest(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, image: &ImageBuf, text: impl Into<String>) {
        self.answers.insert(content_hash(image), text.into());
    }

    pub fn to_manifest(&self) -> String {
        let mut lines: Vec<_> = self.answers.iter().map(|(h, t)| format!("{h}\t{}\n", escape(t))).collect();
        lines.sort();
        lines.concat()
    }
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

impl OcrEngine for MockEngine {
    fn run(&self, image: &ImageBuf, _language: &str, _timeout: Duration) -> Result<EngineOutput, OcrError> {
        let text = self.answers.get(&content_hash(image)).cloned().unwrap_or_default();
        Ok(EngineOutput { text, duration_ms: self.duration_ms })
    }
}
