//! Frame-quantized 88-key piano rolls.

use super::smf::{NoteEvent, PITCH_MIN};
use crate::error::{arg_err, dim_err, Result};
use crate::numcore::Tensor;

pub const FRAME_RATE: f64 = 30.0;
pub const KEYS: usize = 88;

/// Binary `N×88` activation matrix; column `k` is MIDI pitch `21 + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoRoll {
    frames: Tensor,
}

impl PianoRoll {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != KEYS {
            return Err(dim_err!("piano roll must be N×88, got {:?}", frames.shape()));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(arg_err!("piano roll activations must lie in [0, 1]"));
        }
        Ok(Self { frames })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            frames: Tensor::zeros(&[n, KEYS]),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        self.frames.row(n)
    }

    pub fn is_active(&self, n: usize, key: usize) -> bool {
        self.frames.at(n, key) > 0.5
    }

    pub fn set(&mut self, n: usize, key: usize, on: bool) {
        self.frames.set(n, key, if on { 1.0 } else { 0.0 });
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.slice_rows(start, len)?,
        })
    }
}

/// Number of frames covering `duration_seconds`.
pub fn frame_count(duration_seconds: f64) -> usize {
    (duration_seconds * FRAME_RATE).ceil() as usize
}

/// Frame `n`, key `k` is on iff a note of pitch `21 + k` is sounding at the
/// frame start instant `n / 30`.
pub fn roll_from_events(events: &[NoteEvent], duration_seconds: f64) -> Result<PianoRoll> {
    if !(duration_seconds >= 0.0) {
        return Err(arg_err!("duration must be non-negative, got {duration_seconds}"));
    }
    let n = frame_count(duration_seconds);
    if n == 0 {
        return Err(arg_err!("duration {duration_seconds} s covers no frames"));
    }
    let mut roll = PianoRoll::zeros(n);
    for e in events {
        let Some(key) = e.pitch.checked_sub(PITCH_MIN).map(usize::from).filter(|&k| k < KEYS) else {
            continue;
        };
        let first = (e.onset_seconds * FRAME_RATE).floor().max(0.0) as usize;
        for f in first.saturating_sub(1)..n {
            let t = f as f64 / FRAME_RATE;
            if t >= e.offset_seconds {
                break;
            }
            if e.onset_seconds <= t {
                roll.set(f, key, true);
            }
        }
    }
    Ok(roll)
}

/// Contiguous active runs as note events at frame resolution, velocity 64.
pub fn events_from_roll(roll: &PianoRoll) -> Vec<NoteEvent> {
    let mut events = Vec::new();
    for key in 0..KEYS {
        let mut start = None;
        for f in 0..=roll.len() {
            let on = f < roll.len() && roll.is_active(f, key);
            match (on, start) {
                (true, None) => start = Some(f),
                (false, Some(s)) => {
                    events.push(NoteEvent {
                        onset_seconds: s as f64 / FRAME_RATE,
                        offset_seconds: f as f64 / FRAME_RATE,
                        pitch: PITCH_MIN + key as u8,
                        velocity: 64,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    events.sort_by(|a, b| a.onset_seconds.total_cmp(&b.onset_seconds).then(a.pitch.cmp(&b.pitch)));
    events
}
