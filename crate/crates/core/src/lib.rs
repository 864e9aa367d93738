//! Two-stage piano-roll conditioned hand motion generation.
//!
//! Stage 1 predicts wrist trajectories from acoustic features, distilling a
//! MIDI-aware teacher into an audio-only student. Stage 2 samples finger
//! gestures with conditional flow matching, coupling the hands through a
//! gated cross-attention bridge. Long sequences are streamed chunk by chunk
//! with flow-continuation inpainting over chunk overlaps.

pub mod cli;
pub mod error;
pub mod flowgen;
pub mod harmonic;
pub mod metrics;
pub mod midi;
pub mod stage1;
pub mod streaming;
pub mod numcore;

pub use error::{Error, Result};
