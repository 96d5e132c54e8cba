//! Toolkit for first-frame subject mixing with image-to-video generators.
//!
//! The pipeline has three phases. Curation turns source videos into training
//! samples: element cut-outs and a clean background are composited into a
//! single first frame and captioned. Adaptation prep emits the trainer
//! configuration and carries the exact low-rank update kernel. Generation
//! drives a video model with the composite and a transition-prefixed prompt,
//! then cuts the leading transition frames. A small study service collects
//! and aggregates human rankings of the results.

pub mod canvas;
pub mod dataset;
pub mod exec;
pub mod frames;
pub mod generation;
pub mod lora;
pub mod study;
pub mod util;
pub mod vlm;

pub use exec::Exec;
