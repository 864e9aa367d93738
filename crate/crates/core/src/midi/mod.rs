//! MIDI ingestion, piano rolls, and the synthetic roll-to-motion dataset.

pub mod clip;
pub mod roll;
pub mod smf;
pub mod synth;

pub use clip::{ClipFile, ClipHeader};
pub use roll::{events_from_roll, frame_count, roll_from_events, PianoRoll, FRAME_RATE, KEYS};
pub use smf::{parse_midi_file, Division, NoteEvent, ParsedMidi};
pub use synth::{make_toy_dataset, synth_motion_from_roll, Clip, MotionSequence, D_HAND};
