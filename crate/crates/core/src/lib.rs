//! Core engine for real-time license plate recognition.
//!
//! Frames flow through a vehicle gate, a plate detector, plate binarization
//! and an OCR engine; recognized plates are persisted as events. The same
//! crate carries the evaluation harness for detection and OCR metrics.

pub mod geometry;
pub mod imaging;
pub mod ocr;
pub mod eval;
pub mod config;
pub mod store;
pub mod pipeline;
