//! Wire types shared by the HTTP endpoints and the live stream.

use serde::{Deserialize, Serialize};

use alpr_core::pipeline::RunSummary;
use alpr_core::store::EventRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "idle")]
    Idle,
    #[serde(rename = "running")]
    Running,
    #[serde(rename = "recording+running")]
    RecordingRunning,
}

impl Phase {
    pub fn is_running(self) -> bool {
        self != Phase::Idle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub state: Phase,
    /// Unix milliseconds when the current run started.
    pub started_at_ms: Option<u64>,
    pub fps: f64,
    pub frames_processed: u64,
    pub frames_dropped: u64,
    pub last_error: Option<String>,
    /// Final summary of the most recent finished run.
    pub summary: Option<RunSummary>,
    /// Directory of the recording in progress.
    pub recording_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fps: f64,
    pub frames_in: u64,
    pub frames_processed: u64,
    pub frames_dropped: u64,
    /// Alias of `frames_dropped` for stream consumers.
    pub dropped: u64,
    pub events_total: u64,
    pub elapsed_ms: f64,
    pub state: Phase,
}

impl Metrics {
    pub fn new(summary: &RunSummary, state: Phase) -> Self {
        Self {
            fps: summary.fps,
            frames_in: summary.frames_in,
            frames_processed: summary.frames_processed,
            frames_dropped: summary.frames_dropped,
            dropped: summary.frames_dropped,
            events_total: summary.events,
            elapsed_ms: summary.elapsed_ms,
            state,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningRecord {
    /// Unix milliseconds; never decreases within one warning log.
    pub timestamp_ms: u64,
    pub event_seq: Option<u64>,
    pub reason: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct WarningRequest {
    pub reason: String,
    #[serde(default)]
    pub event_seq: Option<u64>,
}

/// One message on `GET /stream`.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamMessage {
    Detection(EventRecord),
    State(PipelineState),
    Metrics(Metrics),
    Warning(WarningRecord),
}

impl StreamMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            StreamMessage::Detection(_) => "detection",
            StreamMessage::State(_) => "state",
            StreamMessage::Metrics(_) => "metrics",
            StreamMessage::Warning(_) => "warning",
        }
    }

    /// `<type> <json>\n`
    pub fn to_line(&self) -> String {
        let json = match self {
            StreamMessage::Detection(r) => serde_json::to_string(r),
            StreamMessage::State(s) => serde_json::to_string(s),
            StreamMessage::Metrics(m) => serde_json::to_string(m),
            StreamMessage::Warning(w) => serde_json::to_string(w),
        }
        .expect("stream messages serialize");
        format!("{} {json}\n", self.kind())
    }

    /// Parses one stream line (without its newline).
    pub fn parse_line(line: &str) -> Result<Self, String> {
        let (kind, json) = line.split_once(' ').ok_or_else(|| format!("no type token in {line:?}"))?;
        let err = |e: serde_json::Error| e.to_string();
        Ok(match kind {
            "detection" => StreamMessage::Detection(serde_json::from_str(json).map_err(err)?),
            "state" => StreamMessage::State(serde_json::from_str(json).map_err(err)?),
            "metrics" => StreamMessage::Metrics(serde_json::from_str(json).map_err(err)?),
            "warning" => StreamMessage::Warning(serde_json::from_str(json).map_err(err)?),
            other => return Err(format!("unknown message type {other:?}")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_names() {
        assert_eq!(serde_json::to_string(&Phase::RecordingRunning).unwrap(), "\"recording+running\"");
        assert_eq!(serde_json::from_str::<Phase>("\"idle\"").unwrap(), Phase::Idle);
    }

    #[test]
    fn stream_line_round_trip() {
        let msg = StreamMessage::Warning(WarningRecord { timestamp_ms: 5, event_seq: None, reason: "stolen car".into() });
        let line = msg.to_line();
        assert_eq!(line, "warning {\"timestamp_ms\":5,\"event_seq\":null,\"reason\":\"stolen car\"}\n");
        assert_eq!(StreamMessage::parse_line(line.trim_end()).unwrap(), msg);
        assert!(StreamMessage::parse_line("bogus {}").is_err());
    }
}
