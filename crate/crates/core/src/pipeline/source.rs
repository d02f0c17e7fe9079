//! Frame sources.
//!
//! A frame directory holds numbered binary PPM files (`000001.ppm`, ...)
//! and optionally a `manifest.txt` with an `fps=<n>` line; frames are
//! played in numeric order. A raw stream starts with one ASCII line
//! `width height fps` followed by tightly packed RGB24 frames. Video files
//! are read through an external decoder that writes such a stream to its
//! standard output.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{PipelineConfig, SourcePacing};
use crate::imaging::{self, ImageBuf, ImagingError};

use super::FrameEnvelope;

pub const DEFAULT_FPS: f64 = 30.0;
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("no frame source configured")]
    NotConfigured,
    #[error("frame source {path} is unavailable: {reason}")]
    Unavailable { path: String, reason: String },
    #[error("frame {path}: {source}")]
    BadFrame { path: PathBuf, source: ImagingError },
    #[error("bad frame manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("bad stream header {0:?}: expected `width height fps`")]
    BadHeader(String),
    #[error("stream ended inside frame {index} ({got} of {expected} bytes)")]
    TruncatedFrame { index: u64, got: usize, expected: usize },
    #[error("decoder failed: {0}")]
    Decoder(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait FrameSource: Send {
    /// The next frame, or `None` at the end of the stream.
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError>;
}

fn timestamp(position: u64, fps: f64) -> u64 {
    (position as f64 * 1000.0 / fps).floor() as u64
}

/// Numbered PPM frames in a directory.
#[derive(Debug)]
pub struct DirectorySource {
    frames: Vec<(u64, PathBuf)>,
    fps: f64,
    position: usize,
}

impl DirectorySource {
    pub fn open(dir: &Path) -> Result<Self, SourceError> {
        let unavailable = |reason: String| SourceError::Unavailable { path: dir.display().to_string(), reason };
        if !dir.is_dir() {
            return Err(unavailable("not a directory".into()));
        }
        let mut frames = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
            if !is_ppm || !path.is_file() {
                continue;
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let number = stem
                .parse::<u64>()
                .map_err(|_| unavailable(format!("frame file {stem:?} is not numbered")))?;
            frames.push((number, path));
        }
        frames.sort();
        if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(unavailable(format!("frame number {} appears twice", w[0].0)));
        }
        let fps = read_manifest_fps(&dir.join(MANIFEST_NAME))?.unwrap_or(DEFAULT_FPS);
        Ok(Self { frames, fps, position: 0 })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }
}

fn read_manifest_fps(path: &Path) -> Result<Option<f64>, SourceError> {
    if !path.is_file() {
        return Ok(None);
    }
    let bad = |reason: String| SourceError::BadManifest { path: path.to_path_buf(), reason };
    let mut fps = None;
    for line in std::fs::read_to_string(path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        if key.trim() == "fps" {
            let v: f64 = value.trim().parse().map_err(|_| bad(format!("bad fps {:?}", value.trim())))?;
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("fps must be positive, got {v}")));
            }
            fps = Some(v);
        }
    }
    Ok(fps)
}

impl FrameSource for DirectorySource {
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError> {
        let Some((number, path)) = self.frames.get(self.position) else {
            return Ok(None);
        };
        let image = imaging::read_pnm(path).map_err(|source| SourceError::BadFrame { path: path.clone(), source })?;
        if image.channels() != 3 {
            return Err(SourceError::BadFrame {
                path: path.clone(),
                source: ImagingError::ChannelMismatch { expected: 3, actual: image.channels() },
            });
        }
        let frame = FrameEnvelope {
            frame_index: *number,
            timestamp_ms: timestamp(self.position as u64, self.fps),
            image: Arc::new(image),
        };
        self.position += 1;
        Ok(Some(frame))
    }
}

/// RGB24 frames behind a `width height fps` header line.
pub struct RawStreamSource<R> {
    reader: R,
    width: u32,
    height: u32,
    fps: f64,
    index: u64,
}

impl<R: BufRead + Send> RawStreamSource<R> {
    pub fn new(mut reader: R) -> Result<Self, SourceError> {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header = line.trim_end_matches(['\r', '\n']).to_string();
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = || SourceError::BadHeader(header.clone());
        if fields.len() != 3 {
            return Err(bad());
        }
        let width: u32 = fields[0].parse().map_err(|_| bad())?;
        let height: u32 = fields[1].parse().map_err(|_| bad())?;
        let fps: f64 = fields[2].parse().map_err(|_| bad())?;
        if width == 0 || height == 0 || !(fps.is_finite() && fps > 0.0) {
            return Err(bad());
        }
        Ok(Self { reader, width, height, fps, index: 0 })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

impl<R: BufRead + Send> FrameSource for RawStreamSource<R> {
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError> {
        let expected = self.width as usize * self.height as usize * 3;
        let mut data = vec![0u8; expected];
        let mut got = 0;
        while got < expected {
            match self.reader.read(&mut data[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        if got == 0 {
            return Ok(None);
        }
        if got < expected {
            return Err(SourceError::TruncatedFrame { index: self.index, got, expected });
        }
        let image = ImageBuf::from_raw(self.width, self.height, 3, data)
            .map_err(|source| SourceError::BadFrame { path: PathBuf::from("<stream>"), source })?;
        let frame = FrameEnvelope { frame_index: self.index, timestamp_ms: timestamp(self.index, self.fps), image: Arc::new(image) };
        self.index += 1;
        Ok(Some(frame))
    }
}

/// Raw stream produced by a decoder child process. The child is killed
/// when the source is dropped.
pub struct ChildProcessSource {
    child: Child,
    stream: RawStreamSource<BufReader<ChildStdout>>,
}

impl ChildProcessSource {
    /// `template` is split on whitespace; `{input}` is replaced by `input`.
    pub fn spawn(template: &str, input: &str) -> Result<Self, SourceError> {
        let mut parts = template.split_whitespace().map(|p| p.replace("{input}", input));
        let program = parts.next().ok_or_else(|| SourceError::Decoder("empty decoder command".into()))?;
        let mut child = Command::new(&program)
            .args(parts)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SourceError::Unavailable { path: program.clone(), reason: e.to_string() })?;
        let stdout = child.stdout.take().ok_or_else(|| SourceError::Decoder("no decoder stdout".into()))?;
        match RawStreamSource::new(BufReader::new(stdout)) {
            Ok(stream) => Ok(Self { child, stream }),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }
}

impl FrameSource for ChildProcessSource {
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError> {
        self.stream.next_frame()
    }
}

impl Drop for ChildProcessSource {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Releases frames no earlier than their timestamps, measured from the
/// first frame.
pub struct PacedSource<S> {
    inner: S,
    origin: Option<(Instant, u64)>,
}

impl<S: FrameSource> PacedSource<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, origin: None }
    }
}

impl<S: FrameSource> FrameSource for PacedSource<S> {
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError> {
        let Some(frame) = self.inner.next_frame()? else {
            return Ok(None);
        };
        let (start, first_ts) = *self.origin.get_or_insert((Instant::now(), frame.timestamp_ms));
        let due = start + Duration::from_millis(frame.timestamp_ms.saturating_sub(first_ts));
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        Ok(Some(frame))
    }
}

impl FrameSource for Box<dyn FrameSource> {
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError> {
        (**self).next_frame()
    }
}

/// In-memory frames, mostly for tests and benchmarks.
pub struct VecSource {
    frames: std::vec::IntoIter<FrameEnvelope>,
}

impl VecSource {
    pub fn new(frames: Vec<FrameEnvelope>) -> Self {
        Self { frames: frames.into_iter() }
    }
}

impl FrameSource for VecSource {
    fn next_frame(&mut self) -> Result<Option<FrameEnvelope>, SourceError> {
        Ok(self.frames.next())
    }
}

/// Opens the source named by `spec`: `-` for a raw stream on standard input,
/// a frame directory, or a video file handed to the configured decoder.
pub fn open_source(spec: &str, config: &PipelineConfig) -> Result<Box<dyn FrameSource>, SourceError> {
    let source: Box<dyn FrameSource> = if spec == "-" {
        Box::new(RawStreamSource::new(BufReader::new(std::io::stdin()))?)
    } else {
        let path = Path::new(spec);
        if path.is_dir() {
            Box::new(DirectorySource::open(path)?)
        } else if path.is_file() {
            let decoder = config.decoder_command.as_deref().ok_or_else(|| SourceError::Unavailable {
                path: spec.to_string(),
                reason: "not a frame directory and no decoder_command is configured".into(),
            })?;
            Box::new(ChildProcessSource::spawn(decoder, spec)?)
        } else {
            return Err(SourceError::Unavailable { path: spec.to_string(), reason: "no such file or directory".into() });
        }
    };
    Ok(match config.source_pacing {
        SourcePacing::Fast => source,
        SourcePacing::Realtime => Box::new(PacedSource::new(source)),
    })
}

/// Opens the source named in `config.source`.
pub fn open_configured(config: &PipelineConfig) -> Result<Box<dyn FrameSource>, SourceError> {
    let spec = config.source.as_deref().ok_or(SourceError::NotConfigured)?;
    open_source(spec, config)
}
