//! Self-controlled text augmentation for low-resource text classification.
//!
//! The pipeline converts a small labeled dataset into prompt pairs, fine-tunes a
//! sequence-to-sequence backend on generation and classification jointly, samples
//! candidate texts per class, scores each candidate with the same model through a
//! classification prompt and keeps the most confident fraction.
//!
//! Modules map onto the stages:
//!
//! - [`corpus`]: labeled datasets, JSONL ingestion, k-shot sampling
//! - [`templates`]: the five prompt templates and dataset conversion
//! - [`gateway`]: backend and classifier traits, decoding filters, the mock
//!   backend and the external process adapter
//! - [`augment`]: candidate generation, self-checking and top-fraction selection
//! - [`eda`]: rule-based baseline augmenters
//! - [`eval`]: diversity, fidelity, downstream accuracy and reports
//! - [`runner`]: experiment configuration and the staged pipeline behind the CLI

pub mod augment;
pub mod corpus;
pub mod eda;
mod error;
pub mod eval;
pub mod gateway;
pub mod runner;
pub mod templates;
pub mod text;

pub use error::{Error, Result};
