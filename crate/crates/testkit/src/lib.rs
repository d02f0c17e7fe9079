//! Reference implementations and fixtures for testing `alpr-core`.
//!
//! The oracles here are written from the textbook definitions, favouring
//! obviousness over speed, and share no code with the engine beyond its
//! plain data types.

pub mod fixtures;
pub mod oracles;
