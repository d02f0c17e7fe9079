//! Append-only event log with a plate-text index.
//!
//! Records live in a UTF-8 NDJSON file, one per line. Plate crops are
//! written as binary PGM files into a sibling `<log stem>.crops/` directory,
//! named by sequence number. Opening a store replays the log; a final line
//! cut short by a crash is discarded and the file truncated back to the last
//! complete record.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImageBuf, ImagingError};
use crate::ocr;
use crate::pipeline::DetectionEvent;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt record at line {0}")]
    CorruptRecord(usize),
    #[error("line {line}: sequence number {seq} does not follow {previous}")]
    OutOfOrder { line: usize, seq: u64, previous: u64 },
    #[error("store I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot write crop: {0}")]
    Crop(#[from] ImagingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: DetectionEvent,
}

#[derive(Default)]
struct Index {
    records: Vec<EventRecord>,
    by_plate: HashMap<String, Vec<usize>>,
}

impl Index {
    fn push(&mut self, record: EventRecord) {
        if !record.event.normalized_text.is_empty() {
            self.by_plate.entry(record.event.normalized_text.clone()).or_default().push(self.records.len());
        }
        self.records.push(record);
    }
}

/// Single-writer, many-reader event store.
pub struct Store {
    path: PathBuf,
    crop_dir_name: String,
    writer: Mutex<BufWriter<File>>,
    index: RwLock<Index>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).field("len", &self.len()).finish()
    }
}

impl Store {
    /// Opens or creates the log at `path` and rebuilds the index.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io)?;
        let bytes = std::fs::read(path).map_err(io)?;

        let mut index = Index::default();
        let mut offset = 0usize;
        let mut line_no = 0usize;
        let mut keep_len = bytes.len();
        let mut needs_newline = false;
        while offset < bytes.len() {
            line_no += 1;
            let (line, next, terminated) = match bytes[offset..].iter().position(|&b| b == b'\n') {
                Some(n) => (&bytes[offset..offset + n], offset + n + 1, true),
                None => (&bytes[offset..], bytes.len(), false),
            };
            let parsed = std::str::from_utf8(line).ok().and_then(|s| serde_json::from_str::<EventRecord>(s).ok());
            match parsed {
                Some(record) => {
                    if let Some(prev) = index.records.last() {
                        if record.seq <= prev.seq {
                            return Err(StoreError::OutOfOrder { line: line_no, seq: record.seq, previous: prev.seq });
                        }
                    }
                    index.push(record);
                    needs_newline = !terminated;
                }
                None if !terminated => {
                    // Torn write: drop the partial record.
                    keep_len = offset;
                }
                None if line.iter().all(u8::is_ascii_whitespace) && next == bytes.len() => {}
                None => return Err(StoreError::CorruptRecord(line_no)),
            }
            offset = next;
        }
        if keep_len < bytes.len() {
            file.set_len(keep_len as u64).map_err(io)?;
        } else if needs_newline {
            file.write_all(b"\n").map_err(io)?;
        }
        file.sync_data().map_err(io)?;

        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "events".into());
        Ok(Self {
            path: path.to_path_buf(),
            crop_dir_name: format!("{stem}.crops"),
            writer: Mutex::new(BufWriter::new(file)),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new(""))
    }

    /// Resolves a record's `crop_ref` to a filesystem path.
    pub fn crop_path(&self, crop_ref: &str) -> PathBuf {
        self.base_dir().join(crop_ref)
    }

    /// Persists `event` (and its crop, stored as grayscale PGM) and returns
    /// the stored record. The log line is flushed before the index is
    /// updated, so readers never see a record that is not on disk.
    pub fn append(&self, event: &DetectionEvent, crop: Option<&ImageBuf>) -> Result<EventRecord, StoreError> {
        let mut writer = self.writer.lock().expect("store writer lock");
        let seq = self.index.read().expect("store index lock").records.last().map_or(1, |r| r.seq + 1);
        let mut event = event.clone();
        if let Some(crop) = crop {
            let crop_ref = format!("{}/{seq:06}.pgm", self.crop_dir_name);
            let target = self.crop_path(&crop_ref);
            if let Some(dir) = target.parent() {
                std::fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;
            }
            let gray = if crop.channels() == 3 { imaging::grayscale(crop)? } else { crop.clone() };
            imaging::write_pnm(&gray, &target)?;
            event.crop_ref = crop_ref;
        }
        let record = EventRecord { seq, event };
        let mut line = serde_json::to_string(&record).expect("records serialize");
        line.push('\n');
        let io = |source| StoreError::Io { path: self.path.clone(), source };
        writer.write_all(line.as_bytes()).map_err(io)?;
        writer.flush().map_err(io)?;
        self.index.write().expect("store index lock").push(record.clone());
        Ok(record)
    }

    /// Records whose plate text equals the normalized query, oldest first.
    pub fn query_by_plate(&self, plate: &str) -> Vec<EventRecord> {
        let key = ocr::normalize_text(plate);
        let index = self.index.read().expect("store index lock");
        index
            .by_plate
            .get(&key)
            .map(|ids| ids.iter().map(|&i| index.records[i].clone()).collect())
            .unwrap_or_default()
    }

    /// The `n` most recent records, newest first.
    pub fn latest(&self, n: usize) -> Vec<EventRecord> {
        let index = self.index.read().expect("store index lock");
        index.records.iter().rev().take(n).cloned().collect()
    }

    pub fn get(&self, seq: u64) -> Option<EventRecord> {
        let index = self.index.read().expect("store index lock");
        let pos = index.records.binary_search_by_key(&seq, |r| r.seq).ok()?;
        Some(index.records[pos].clone())
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("store index lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every record, oldest first.
    pub fn all(&self) -> Vec<EventRecord> {
        self.index.read().expect("store index lock").records.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelRect;
    use crate::pipeline::{OcrStatus, VehicleClass};

    fn event(frame: u64, text: &str) -> DetectionEvent {
        DetectionEvent {
            frame_index: frame,
            timestamp_ms: frame * 33,
            vehicle_class: VehicleClass::Car,
            vehicle_score: 0.75,
            plate_rect: PixelRect::new(10, 20, 30, 12),
            detector_score: 0.1 + 0.2,
            raw_text: text.to_string(),
            normalized_text: ocr::normalize_text(text),
            ocr_ms: 12.5,
            ocr_status: OcrStatus::Ok,
            crop_ref: String::new(),
        }
    }

    #[test]
    fn empty_file_is_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        std::fs::write(&path, "").unwrap();
        let store = Store::open(&path).unwrap();
        assert!(store.is_empty());
        assert!(store.latest(5).is_empty());
    }

    #[test]
    fn append_reopen_latest_query() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        {
            let store = Store::open(&path).unwrap();
            assert_eq!(store.append(&event(1, "ঢাকা ১২"), None).unwrap().seq, 1);
            store.append(&event(2, "খুলনা ৩"), None).unwrap();
            store.append(&event(3, "ঢাকা  ১২\n"), None).unwrap();
        }
        let store = Store::open(&path).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.latest(1)[0].event.frame_index, 3);
        assert_eq!(store.latest(10).iter().map(|r| r.seq).collect::<Vec<_>>(), vec![3, 2, 1]);
        let hits: Vec<u64> = store.query_by_plate(" ঢাকা ১২ ").iter().map(|r| r.seq).collect();
        assert_eq!(hits, vec![1, 3]);
        assert!(store.query_by_plate("রাজশাহী").is_empty());
        assert_eq!(store.all()[1].event, event(2, "খুলনা ৩"));
        assert_eq!(store.append(&event(4, ""), None).unwrap().seq, 4);
    }

    #[test]
    fn torn_final_line_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        {
            let store = Store::open(&path).unwrap();
            for i in 1..=3 {
                store.append(&event(i, "১২"), None).unwrap();
            }
        }
        let full = std::fs::read(&path).unwrap();
        let cut = full.len() - 25;
        std::fs::write(&path, &full[..cut]).unwrap();
        let store = Store::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.append(&event(9, "১২"), None).unwrap().seq, 3);
        drop(store);
        let store = Store::open(&path).unwrap();
        assert_eq!(store.all().iter().map(|r| r.event.frame_index).collect::<Vec<_>>(), vec![1, 2, 9]);
    }

    #[test]
    fn unterminated_complete_line_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        Store::open(&path).unwrap().append(&event(1, "১"), None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        let store = Store::open(&path).unwrap();
        store.append(&event(2, "২"), None).unwrap();
        drop(store);
        assert_eq!(Store::open(&path).unwrap().len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        {
            let store = Store::open(&path).unwrap();
            store.append(&event(1, "১"), None).unwrap();
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.insert_str(0, "{not json}\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::CorruptRecord(1))));
    }

    #[test]
    fn crops_are_written_as_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        let store = Store::open(&path).unwrap();
        let crop = ImageBuf::filled(12, 9, &[255, 0, 0]).unwrap();
        let record = store.append(&event(1, "১"), Some(&crop)).unwrap();
        assert_eq!(record.event.crop_ref, "log.crops/000001.pgm");
        let saved = imaging::read_pnm(&store.crop_path(&record.event.crop_ref)).unwrap();
        assert_eq!((saved.width(), saved.height(), saved.channels()), (12, 9, 1));
        assert_eq!(saved.pixel(0, 0), &[76]);
    }
}
