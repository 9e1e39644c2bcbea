//! Engine for region-grounded reasoning chains over documents.
//!
//! - [`doc`]: document model (regions, tables, OCR lines).
//! - [`vsc`]: the chain language: parsing, canonical serialization, validation.
//! - [`exec`]: deterministic executor.
//! - [`reward`]: composite reward and rejection filter.
//! - [`supervision`]: OCR-derived grid maps and layout losses.
//! - [`tower`]: layout tower forward pass, gradients and training.
//! - [`grpo`]: group-relative policy optimization over enumerated programs.
//! - [`cli`]: the `vsc` command line.

pub mod cli;
pub mod codes;
pub mod doc;
pub mod exec;
pub mod fixtures;
pub mod grpo;
pub mod numeric;
pub mod reward;
pub mod supervision;
pub mod tower;
pub mod vsc;

pub use codes::Code;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
