//! Pipeline ownership: start/stop/record transitions, the event sink that
//! feeds the store and the stream, and session recordings.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use tokio::sync::{broadcast, mpsc};

use alpr_core::config::PipelineConfig;
use alpr_core::imaging::{self, ImageBuf};
use alpr_core::pipeline::source::{self, SourceError};
use alpr_core::pipeline::{self, Backends, FrameEnvelope, FrameOutcome, FrameSink, PipelineError, RunControl, RunError, RunSummary};
use alpr_core::store::Store;

use crate::messages::{Phase, PipelineState, StreamMessage};

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Frames of one recording session: numbered PPMs plus `manifest.txt`.
pub struct Recorder {
    dir: PathBuf,
    frames: u64,
    first_ts: Option<u64>,
    last_ts: u64,
}

impl Recorder {
    /// Creates a fresh timestamped directory under `root`.
    pub fn create(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        let stamp = unix_ms();
        for attempt in 0u32.. {
            let name = if attempt == 0 { format!("session-{stamp}") } else { format!("session-{stamp}-{attempt}") };
            let dir = root.join(name);
            match std::fs::create_dir(&dir) {
                Ok(()) => return Ok(Self { dir, frames: 0, first_ts: None, last_ts: 0 }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!("session directory names are unbounded")
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, frame: &ImageBuf, timestamp_ms: u64) -> Result<(), imaging::ImagingError> {
        imaging::write_pnm(frame, &self.dir.join(format!("{:06}.ppm", self.frames)))?;
        self.first_ts.get_or_insert(timestamp_ms);
        self.last_ts = timestamp_ms;
        self.frames += 1;
        Ok(())
    }

    /// Frame rate implied by the recorded timestamps; the default source
    /// rate when there are too few frames to tell.
    fn fps(&self) -> f64 {
        match self.first_ts {
            Some(first) if self.frames > 1 && self.last_ts > first => {
                (self.frames - 1) as f64 * 1000.0 / (self.last_ts - first) as f64
            }
            _ => source::DEFAULT_FPS,
        }
    }

    /// Writes the manifest and returns the session directory.
    pub fn finish(self) -> std::io::Result<PathBuf> {
        let manifest = format!("fps={}\nframes={}\n", self.fps(), self.frames);
        std::fs::write(self.dir.join(source::MANIFEST_NAME), manifest)?;
        Ok(self.dir)
    }
}

/// State shared between the HTTP side and the pipeline thread.
pub struct Shared {
    pub store: Arc<Store>,
    pub hub: broadcast::Sender<StreamMessage>,
    pub recorder: Mutex<Option<Recorder>>,
    pub latest_frame: Mutex<Option<Arc<ImageBuf>>>,
}

/// Persists detections, publishes them, keeps the newest annotated frame
/// and feeds an active recording.
pub struct ServiceSink {
    shared: Arc<Shared>,
}

impl FrameSink for ServiceSink {
    fn frame_done(&mut self, frame: &FrameEnvelope, outcome: &FrameOutcome) -> Result<(), PipelineError> {
        let sink_err = |e: String| PipelineError::Sink(e);
        let mut records = Vec::with_capacity(outcome.detections.len());
        for d in &outcome.detections {
            records.push(self.shared.store.append(&d.event, Some(&d.crop)).map_err(|e| sink_err(e.to_string()))?);
        }
        let annotated = if records.is_empty() {
            frame.image.clone()
        } else {
            let mut img = (*frame.image).clone();
            for r in &records {
                let label = format!("#{} {} {:.2}", r.seq, r.event.vehicle_class.as_str(), r.event.detector_score);
                img = imaging::draw_box(&img, r.event.plate_rect, &label)?;
            }
            Arc::new(img)
        };
        if let Some(rec) = self.shared.recorder.lock().expect("recorder lock").as_mut() {
            rec.write(&annotated, frame.timestamp_ms)?;
        }
        *self.shared.latest_frame.lock().expect("frame lock") = Some(annotated);
        for r in records {
            // No subscribers is fine.
            let _ = self.shared.hub.send(StreamMessage::Detection(r));
        }
        Ok(())
    }
}

struct ActiveRun {
    generation: u64,
    control: RunControl,
    thread: JoinHandle<Result<RunSummary, RunError>>,
    started_at_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("source unavailable: {0}")]
    SourceUnavailable(#[from] SourceError),
    #[error("pipeline is not running")]
    NotRunning,
    #[error("cannot create recording: {0}")]
    Recording(std::io::Error),
}

/// The single owner of run state. Callers serialize access through an
/// async mutex, so transitions never interleave.
pub struct Controller {
    config: Arc<PipelineConfig>,
    backends: Backends,
    shared: Arc<Shared>,
    finished_tx: mpsc::UnboundedSender<u64>,
    generation: u64,
    run: Option<ActiveRun>,
    /// Control block of the current or most recent run, for metrics.
    last_control: RunControl,
    last_error: Option<String>,
    last_summary: Option<RunSummary>,
}

impl Controller {
    pub fn new(
        config: Arc<PipelineConfig>,
        backends: Backends,
        shared: Arc<Shared>,
        finished_tx: mpsc::UnboundedSender<u64>,
    ) -> Self {
        Self {
            config,
            backends,
            shared,
            finished_tx,
            generation: 0,
            run: None,
            last_control: RunControl::new(),
            last_error: None,
            last_summary: None,
        }
    }

    pub fn phase(&self) -> Phase {
        match &self.run {
            None => Phase::Idle,
            Some(_) if self.shared.recorder.lock().expect("recorder lock").is_some() => Phase::RecordingRunning,
            Some(_) => Phase::Running,
        }
    }

    pub fn live_summary(&self) -> RunSummary {
        self.last_control.counters().snapshot()
    }

    pub fn state(&self) -> PipelineState {
        let live = self.live_summary();
        PipelineState {
            state: self.phase(),
            started_at_ms: self.run.as_ref().map(|r| r.started_at_ms),
            fps: live.fps,
            frames_processed: live.frames_processed,
            frames_dropped: live.frames_dropped,
            last_error: self.last_error.clone(),
            summary: self.last_summary,
            recording_dir: self
                .shared
                .recorder
                .lock()
                .expect("recorder lock")
                .as_ref()
                .map(|r| r.dir().display().to_string()),
        }
    }

    fn publish_state(&self) -> PipelineState {
        let state = self.state();
        let _ = self.shared.hub.send(StreamMessage::State(state.clone()));
        state
    }

    /// Starts a run on the configured source; a no-op while running.
    #[allow(clippy::result_large_err)]
    pub fn start(&mut self) -> Result<PipelineState, ControlError> {
        if self.run.is_some() {
            return Ok(self.state());
        }
        let mut source = source::open_configured(&self.config)?;
        self.generation += 1;
        let generation = self.generation;
        let control = RunControl::new();
        let thread = {
            let (control, config, backends) = (control.clone(), self.config.clone(), self.backends.clone());
            let mut sink = ServiceSink { shared: self.shared.clone() };
            let finished = self.finished_tx.clone();
            std::thread::Builder::new()
                .name("alpr-pipeline".into())
                .spawn(move || {
                    let result = pipeline::run(&mut source, &mut sink, &config, &backends, &control);
                    drop(source);
                    let _ = finished.send(generation);
                    result
                })
                .expect("spawn pipeline thread")
        };
        self.last_control = control.clone();
        self.last_error = None;
        self.run = Some(ActiveRun { generation, control, thread, started_at_ms: unix_ms() });
        Ok(self.publish_state())
    }

    /// Stops the run (if any), waits for it and closes any recording.
    /// A recording is closed first, so observers see
    /// `recording+running -> running -> idle`.
    pub async fn stop(&mut self) -> PipelineState {
        self.stop_recording();
        if let Some(run) = self.run.take() {
            run.control.stop();
            self.reap(run).await;
        }
        self.publish_state()
    }

    /// Called when a run ended by itself.
    pub async fn finished(&mut self, generation: u64) {
        if self.run.as_ref().is_some_and(|r| r.generation == generation) {
            self.stop_recording();
            let run = self.run.take().expect("checked above");
            self.reap(run).await;
            self.publish_state();
        }
    }

    async fn reap(&mut self, run: ActiveRun) {
        let joined = tokio::task::spawn_blocking(move || run.thread.join()).await;
        match joined {
            Ok(Ok(Ok(summary))) => {
                log::info!(
                    "run finished: {} frames in, {} processed, {} dropped, {} events, {:.2} fps",
                    summary.frames_in,
                    summary.frames_processed,
                    summary.frames_dropped,
                    summary.events,
                    summary.fps
                );
                self.last_summary = Some(summary);
            }
            Ok(Ok(Err(e))) => {
                log::error!("run failed: {}", e.cause);
                self.last_summary = Some(e.summary);
                self.last_error = Some(e.cause.to_string());
            }
            Ok(Err(_)) | Err(_) => {
                self.last_summary = Some(self.live_summary());
                self.last_error = Some("pipeline thread panicked".into());
            }
        }
        self.finish_recording();
    }

    fn finish_recording(&mut self) {
        let recorder = self.shared.recorder.lock().expect("recorder lock").take();
        if let Some(rec) = recorder {
            match rec.finish() {
                Ok(dir) => log::info!("recording saved to {}", dir.display()),
                Err(e) => self.last_error = Some(format!("cannot finish recording: {e}")),
            }
        }
    }

    pub fn start_recording(&mut self) -> Result<PipelineState, ControlError> {
        if self.run.is_none() {
            return Err(ControlError::NotRunning);
        }
        {
            let mut slot = self.shared.recorder.lock().expect("recorder lock");
            if slot.is_none() {
                *slot = Some(Recorder::create(&self.config.record_dir).map_err(ControlError::Recording)?);
            }
        }
        Ok(self.publish_state())
    }

    pub fn stop_recording(&mut self) -> PipelineState {
        let was_recording = self.shared.recorder.lock().expect("recorder lock").is_some();
        if was_recording {
            self.finish_recording();
            self.publish_state()
        } else {
            self.state()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recorder_sessions_and_manifest() {
        let root = tempfile::tempdir().unwrap();
        let mut a = Recorder::create(root.path()).unwrap();
        let b = Recorder::create(root.path()).unwrap();
        assert_ne!(a.dir(), b.dir());
        let frame = ImageBuf::filled(4, 2, &[9, 8, 7]).unwrap();
        for ts in [0, 100, 200, 300, 400] {
            a.write(&frame, ts).unwrap();
        }
        let dir = a.finish().unwrap();
        assert_eq!(std::fs::read_to_string(dir.join("manifest.txt")).unwrap(), "fps=10\nframes=5\n");
        assert_eq!(imaging::read_pnm(&dir.join("000004.ppm")).unwrap(), frame);
        let empty = b.finish().unwrap();
        assert_eq!(std::fs::read_to_string(empty.join("manifest.txt")).unwrap(), "fps=30\nframes=0\n");
    }
}
