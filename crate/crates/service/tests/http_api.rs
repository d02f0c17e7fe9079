use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use futures::StreamExt;
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use unicode_normalization::UnicodeNormalization;

use alpr_core::config::PipelineConfig;
use alpr_core::imaging;
use alpr_core::pipeline::Backends;
use alpr_core::store::EventRecord;
use alpr_service::messages::{Metrics, Phase, PipelineState, StreamMessage, WarningRecord};
use alpr_service::Service;
use alpr_testkit::fixtures::{write_frame_dir, HandFixture, PLATE_A_TEXT};

struct Harness {
    base: String,
    client: reqwest::Client,
    service: Service,
    _dir: tempfile::TempDir,
}

/// A service over `frames` copies of the hand fixture cycle, paced at
/// `fps` when given, with the remaining config lines appended.
async fn harness(frames: usize, fps: Option<u32>, extra: &str) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let fixture = HandFixture::new();
    let seq: Vec<_> = fixture.frames.iter().cycle().take(frames).cloned().collect();
    write_frame_dir(&dir.path().join("frames"), &seq, fps.unwrap_or(fixture.fps)).unwrap();
    std::fs::write(dir.path().join("ocr.manifest"), fixture.ocr_manifest()).unwrap();
    let pacing = if fps.is_some() { "realtime" } else { "fast" };
    let text = format!(
        "source = frames\nocr_mock_manifest = ocr.manifest\nstore_path = events.ndjson\n\
         warning_log = warnings.ndjson\nrecord_dir = recordings\ndrop_policy = block\nsource_pacing = {pacing}\n{extra}"
    );
    let config = PipelineConfig::parse(&text, Some(dir.path())).unwrap();
    start_server(config, dir).await
}

async fn start_server(config: PipelineConfig, dir: tempfile::TempDir) -> Harness {
    let backends = Backends::from_config(&config).unwrap();
    let service = Service::new(config, backends).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(service.clone().serve_on(listener, std::future::pending()));
    Harness { base: format!("http://{addr}"), client: reqwest::Client::new(), service, _dir: dir }
}

impl Harness {
    fn path(&self, rel: &str) -> std::path::PathBuf {
        self._dir.path().join(rel)
    }

    async fn post(&self, path: &str, body: Option<&str>) -> (u16, String) {
        let mut req = self.client.post(format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.header("content-type", "application/json").body(b.to_string());
        }
        let resp = req.send().await.unwrap();
        (resp.status().as_u16(), resp.text().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Vec<u8>) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (resp.status().as_u16(), resp.bytes().await.unwrap().to_vec())
    }

    async fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> T {
        let (status, body) = self.get(path).await;
        assert_eq!(status, 200, "{path}: {}", String::from_utf8_lossy(&body));
        serde_json::from_slice(&body).unwrap()
    }

    async fn control(&self, path: &str) -> PipelineState {
        let (status, body) = self.post(path, None).await;
        assert_eq!(status, 200, "{path}: {body}");
        serde_json::from_str(&body).unwrap()
    }

    /// Subscribes to `/stream`; parsed messages arrive on the channel.
    async fn subscribe(&self) -> mpsc::UnboundedReceiver<StreamMessage> {
        let resp = self.client.get(format!("{}/stream", self.base)).send().await.unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let (tx, rx) = mpsc::unbounded_channel();
        let mut body = resp.bytes_stream();
        tokio::spawn(async move {
            let mut buf = Vec::new();
            while let Some(Ok(chunk)) = body.next().await {
                buf.extend_from_slice(&chunk);
                while let Some(pos) = buf.iter().position(|&b| b == b'\n') {
                    let line: Vec<u8> = buf.drain(..=pos).collect();
                    let text = std::str::from_utf8(&line[..line.len() - 1]).unwrap();
                    if tx.send(StreamMessage::parse_line(text).unwrap()).is_err() {
                        return;
                    }
                }
            }
        });
        rx
    }

    async fn wait_idle(&self) -> Metrics {
        for _ in 0..600 {
            let m: Metrics = self.get_json("/metrics").await;
            if m.state == Phase::Idle {
                return m;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("pipeline did not return to idle");
    }
}

/// Drains whatever has already arrived, waiting briefly for stragglers.
async fn drain(rx: &mut mpsc::UnboundedReceiver<StreamMessage>) -> Vec<StreamMessage> {
    let mut out = Vec::new();
    while let Ok(Some(m)) = tokio::time::timeout(Duration::from_millis(300), rx.recv()).await {
        out.push(m);
    }
    out
}

fn allowed(from: Phase, to: Phase) -> bool {
    use Phase::*;
    from == to || matches!((from, to), (Idle, Running) | (Running, Idle) | (Running, RecordingRunning) | (RecordingRunning, Running))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_session_keeps_state_machine_and_stream_consistent() {
    let h = harness(40, Some(20), "").await;
    let mut rx = h.subscribe().await;

    // Poll /metrics concurrently for the whole session.
    let poller = {
        let (client, base) = (h.client.clone(), h.base.clone());
        tokio::spawn(async move {
            let mut seen = Vec::new();
            for _ in 0..40 {
                let body = client.get(format!("{base}/metrics")).send().await.unwrap().bytes().await.unwrap();
                seen.push(serde_json::from_slice::<Metrics>(&body).unwrap().state);
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
            seen
        })
    };

    let mut responses = vec![h.control("/control/start").await];
    responses.push(h.control("/control/start").await);
    tokio::time::sleep(Duration::from_millis(300)).await;
    responses.push(h.control("/control/record/start").await);
    tokio::time::sleep(Duration::from_millis(300)).await;
    responses.push(h.control("/control/stop").await);

    let phases: Vec<Phase> = responses.iter().map(|s| s.state).collect();
    assert_eq!(phases, [Phase::Running, Phase::Running, Phase::RecordingRunning, Phase::Idle]);
    assert_eq!(responses[0].started_at_ms, responses[1].started_at_ms, "second start must not relaunch");
    let last = responses.last().unwrap();
    assert!(last.recording_dir.is_none());
    let summary = last.summary.expect("stop attaches the final summary");
    for s in &responses {
        assert!(s.fps >= 0.0);
        assert_eq!(s.state == Phase::RecordingRunning, s.recording_dir.is_some());
    }

    let messages = drain(&mut rx).await;
    let states: Vec<&PipelineState> =
        messages.iter().filter_map(|m| if let StreamMessage::State(s) = m { Some(s) } else { None }).collect();
    assert!(states.len() >= 4, "initial + start + record + stop, got {}", states.len());
    for s in &states {
        if s.state == Phase::Idle {
            assert!(s.recording_dir.is_none(), "recording observed while idle");
        }
    }
    for pair in states.windows(2) {
        assert!(allowed(pair[0].state, pair[1].state), "{:?} -> {:?}", pair[0].state, pair[1].state);
    }
    let polled = poller.await.unwrap();
    for pair in polled.windows(2) {
        assert!(allowed(pair[0], pair[1]), "{:?} -> {:?}", pair[0], pair[1]);
    }

    let streamed: Vec<EventRecord> =
        messages.into_iter().filter_map(|m| if let StreamMessage::Detection(r) = m { Some(r) } else { None }).collect();
    assert!(!streamed.is_empty());
    assert_eq!(streamed.len() as u64, summary.events);
    let stored: Vec<EventRecord> = h.get_json("/detections/latest?n=10000").await;
    let mut stored_oldest_first = stored.clone();
    stored_oldest_first.reverse();
    assert_eq!(streamed, stored_oldest_first, "every streamed detection is stored, in order");

    // The recording holds one annotated PPM per frame written while it was open.
    let sessions: Vec<_> = std::fs::read_dir(h.path("recordings")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(sessions.len(), 1);
    let manifest = std::fs::read_to_string(sessions[0].join("manifest.txt")).unwrap();
    let count: usize = manifest.lines().find_map(|l| l.strip_prefix("frames=")).unwrap().parse().unwrap();
    let ppms = std::fs::read_dir(&sessions[0]).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm")
    });
    assert!(count > 0);
    assert_eq!(ppms.count(), count);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_controls_are_no_ops() {
    let h = harness(3, None, "").await;
    let state = h.control("/control/stop").await;
    assert_eq!(state.state, Phase::Idle);
    assert!(state.summary.is_none());
    assert_eq!(h.control("/control/record/stop").await.state, Phase::Idle);
    let (status, body) = h.post("/control/record/start", None).await;
    assert_eq!(status, 409, "{body}");
    assert!(!h.path("recordings").exists());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn missing_source_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig::parse("source = nowhere\nstore_path = events.ndjson\n", Some(dir.path())).unwrap();
    let h = start_server(config, dir).await;
    let (status, body) = h.post("/control/start", None).await;
    assert_eq!(status, 409);
    assert!(body.contains("nowhere"), "{body}");
    let m: Metrics = h.get_json("/metrics").await;
    assert_eq!(m.state, Phase::Idle);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn finished_run_returns_to_idle_and_metrics_match_summary() {
    let h = harness(3, None, "").await;
    let idle: Metrics = h.get_json("/metrics").await;
    assert_eq!((idle.fps, idle.frames_in, idle.frames_dropped, idle.events_total), (0.0, 0, 0, 0));
    assert_eq!(h.get("/frame/latest").await.0, 404);

    h.control("/control/start").await;
    let m = h.wait_idle().await;
    let state = h.service.state().await;
    let summary = state.summary.expect("finished runs keep their summary");
    assert_eq!(state.last_error, None);
    assert_eq!((m.frames_in, m.frames_processed, m.frames_dropped, m.events_total), (3, 3, 0, 3));
    assert_eq!(m.frames_in, summary.frames_in);
    assert_eq!(m.events_total, summary.events);
    assert_eq!(m.fps, summary.fps);
    assert!((m.fps - m.frames_processed as f64 * 1000.0 / m.elapsed_ms).abs() < 1e-6);

    let log = std::fs::read_to_string(h.path("events.ndjson")).unwrap();
    assert_eq!(log, HandFixture::new().expected_log());

    // The newest frame is frame 2 with plate A boxed.
    let (status, body) = h.get("/frame/latest").await;
    assert_eq!(status, 200);
    let frame = imaging::decode_pnm(&body[..]).unwrap();
    let fixture = HandFixture::new();
    let expected = imaging::draw_box(&fixture.frames[2], alpr_core::geometry::PixelRect { x: 200, y: 200, width: 200, height: 80 }, "#3 car 0.90").unwrap();
    assert_eq!(frame, expected);

    // A second start after the source ran dry begins a new run.
    assert_eq!(h.control("/control/start").await.state, Phase::Running);
    let again = h.wait_idle().await;
    assert_eq!(again.events_total, 3);
    assert_eq!(h.service.store().len(), 6);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn latest_validates_n() {
    let h = harness(3, None, "").await;
    let empty: Vec<EventRecord> = h.get_json("/detections/latest").await;
    assert!(empty.is_empty());
    assert_eq!(h.get("/detections/latest?n=0").await.0, 400);
    assert_eq!(h.get("/detections/latest?n=-3").await.0, 400);
    assert_eq!(h.get("/detections/latest?n=ten").await.0, 400);

    h.control("/control/start").await;
    h.wait_idle().await;
    let newest: Vec<EventRecord> = h.get_json("/detections/latest?n=1").await;
    assert_eq!(newest.iter().map(|r| r.seq).collect::<Vec<_>>(), [3]);
    let default: Vec<EventRecord> = h.get_json("/detections/latest").await;
    assert_eq!(default.iter().map(|r| r.seq).collect::<Vec<_>>(), [3, 2, 1]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn vehicle_query_normalizes_the_plate() {
    let h = harness(3, None, "").await;
    h.control("/control/start").await;
    h.wait_idle().await;

    let composed = "ঢাকা মেট্রো গ ১২-৩৪৫৬";
    let decomposed: String = composed.nfd().collect();
    assert_ne!(composed, decomposed);
    let by_composed: Vec<EventRecord> = h.get_json(&format!("/vehicles/{}", encode(composed))).await;
    let by_decomposed: Vec<EventRecord> = h.get_json(&format!("/vehicles/{}", encode(&decomposed))).await;
    let by_raw: Vec<EventRecord> = h.get_json(&format!("/vehicles/{}", encode(PLATE_A_TEXT))).await;
    assert_eq!(by_composed.iter().map(|r| r.seq).collect::<Vec<_>>(), [1, 3]);
    assert_eq!(by_decomposed, by_composed);
    assert_eq!(by_raw, by_composed);
    let unknown: Vec<EventRecord> = h.get_json("/vehicles/XYZ").await;
    assert!(unknown.is_empty());
}

fn encode(s: &str) -> String {
    s.bytes()
        .map(|b| if b.is_ascii_alphanumeric() || b == b'-' { (b as char).to_string() } else { format!("%{b:02X}") })
        .collect()
}

async fn webhook_sink() -> (SocketAddr, mpsc::UnboundedReceiver<String>) {
    let (tx, rx) = mpsc::unbounded_channel();
    let app = axum::Router::new().route(
        "/hook",
        axum::routing::post(move |body: String| {
            let tx = tx.clone();
            async move {
                tx.send(body).unwrap();
                "ok"
            }
        }),
    );
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (addr, rx)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn warnings_are_logged_broadcast_and_forwarded() {
    let (hook, mut hook_rx) = webhook_sink().await;
    let h = harness(3, None, &format!("webhook_url = http://{hook}/hook\n")).await;
    h.control("/control/start").await;
    h.wait_idle().await;
    let mut first = h.subscribe().await;
    let mut second = h.subscribe().await;

    let (status, _) = h.post("/control/warning", Some(r#"{"reason":"   "}"#)).await;
    assert_eq!(status, 400);
    let (status, _) = h.post("/control/warning", Some("not json")).await;
    assert_eq!(status, 400);
    let (status, body) = h.post("/control/warning", Some(r#"{"reason":"stolen","event_seq":99}"#)).await;
    assert_eq!(status, 404, "{body}");

    let (status, body) = h.post("/control/warning", Some(r#"{"reason":"stolen","event_seq":2}"#)).await;
    assert_eq!(status, 200, "{body}");
    let linked: WarningRecord = serde_json::from_str(&body).unwrap();
    assert_eq!((linked.event_seq, linked.reason.as_str()), (Some(2), "stolen"));
    let (status, body) = h.post("/control/warning", Some(r#"{"reason":"check plate"}"#)).await;
    assert_eq!(status, 200);
    let unlinked: WarningRecord = serde_json::from_str(&body).unwrap();
    assert_eq!(unlinked.event_seq, None);
    assert!(unlinked.timestamp_ms >= linked.timestamp_ms);

    let log: Vec<WarningRecord> = std::fs::read_to_string(h.path("warnings.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log, [linked.clone(), unlinked.clone()]);

    for rx in [&mut first, &mut second] {
        let warnings: Vec<WarningRecord> = drain(rx)
            .await
            .into_iter()
            .filter_map(|m| if let StreamMessage::Warning(w) = m { Some(w) } else { None })
            .collect();
        assert_eq!(warnings, [linked.clone(), unlinked.clone()]);
    }

    let mut forwarded = Vec::new();
    for _ in 0..2 {
        let body = tokio::time::timeout(Duration::from_secs(5), hook_rx.recv()).await.unwrap().unwrap();
        forwarded.push(serde_json::from_str::<WarningRecord>(&body).unwrap());
    }
    forwarded.sort_by_key(|w| w.event_seq.is_none());
    assert_eq!(forwarded, [linked, unlinked]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_stream_sends_state_then_metrics() {
    let h = harness(3, None, "").await;
    let mut rx = h.subscribe().await;
    let first = tokio::time::timeout(Duration::from_secs(2), rx.recv()).await.unwrap().unwrap();
    assert!(matches!(first, StreamMessage::State(ref s) if s.state == Phase::Idle), "{first:?}");
    let second = tokio::time::timeout(Duration::from_secs(3), rx.recv()).await.unwrap().unwrap();
    match second {
        StreamMessage::Metrics(m) => assert_eq!((m.fps, m.dropped, m.state), (0.0, 0, Phase::Idle)),
        other => panic!("expected metrics, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn recording_sessions_get_fresh_directories() {
    let h = harness(60, Some(20), "").await;
    h.control("/control/start").await;
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let state = h.control("/control/record/start").await;
        assert_eq!(state.state, Phase::RecordingRunning);
        // Starting again while recording keeps the same session.
        assert_eq!(h.control("/control/record/start").await.recording_dir, state.recording_dir);
        tokio::time::sleep(Duration::from_millis(250)).await;
        assert_eq!(h.control("/control/record/stop").await.state, Phase::Running);
        dirs.push(state.recording_dir.unwrap());
    }
    h.control("/control/stop").await;
    assert_ne!(dirs[0], dirs[1]);
    for d in &dirs {
        let manifest = std::fs::read_to_string(Path::new(d).join("manifest.txt")).unwrap();
        assert!(manifest.starts_with("fps="), "{manifest}");
    }
}
