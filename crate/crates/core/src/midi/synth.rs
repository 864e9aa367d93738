//! Rule-based motion targets for piano rolls, and the seeded toy dataset.
//!
//! The keyboard splits at key index 44. Each hand's wrist x follows an
//! exponential moving average (α = 0.2) of the centroid of its active keys,
//! mapped by `keyx(k) = (k − 43.5) / 44`, and holds still while the hand has
//! no keys. Wrist y is `0.05 · min(count, 4)`, z is zero. Gesture dims start
//! with an α = 0.3 average of an 8-bin histogram of the hand's active keys;
//! the rest are `0.1 · sin(2π f n / 30 + φ)` oscillations whose frequencies
//! (0.5 to 4 Hz) and phases come from the seed.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};

use super::roll::{roll_from_events, PianoRoll, FRAME_RATE, KEYS};
use super::smf::{NoteEvent, PITCH_MIN};
use crate::error::{arg_err, dim_err, Result};
use crate::numcore::{rng, Tensor};

pub const SPLIT_KEY: usize = 44;
pub const D_HAND: usize = 48;
pub const HIST_BINS: usize = 8;
const WRIST_ALPHA: f64 = 0.2;
const GESTURE_ALPHA: f64 = 0.3;
const OSC_AMPLITUDE: f64 = 0.1;
const OSC_STREAM: u64 = 0x05c1;

/// Paired wrist trajectories (`N×6`, left xyz then right xyz) and gesture
/// parameters (`N×2·D_hand`, left block then right block).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub wrists: Tensor,
    pub gestures: Tensor,
}

impl MotionSequence {
    pub fn new(wrists: Tensor, gestures: Tensor) -> Result<Self> {
        if wrists.cols() != 6 || wrists.rows() != gestures.rows() || gestures.cols() % 2 != 0 {
            return Err(dim_err!(
                "motion needs N×6 wrists and N×2D gestures, got {:?} and {:?}",
                wrists.shape(),
                gestures.shape()
            ));
        }
        if !wrists.is_finite() || !gestures.is_finite() {
            return Err(arg_err!("motion contains non-finite values"));
        }
        Ok(Self { wrists, gestures })
    }

    pub fn len(&self) -> usize {
        self.wrists.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn d_hand(&self) -> usize {
        self.gestures.cols() / 2
    }

    /// Wrist block of one hand (`0` left, `1` right), `N×3`.
    pub fn wrist(&self, hand: usize) -> Tensor {
        self.wrists.slice_cols(3 * hand, 3).expect("hand index is 0 or 1")
    }

    /// Gesture block of one hand, `N×D_hand`.
    pub fn gesture(&self, hand: usize) -> Tensor {
        let d = self.d_hand();
        self.gestures.slice_cols(d * hand, d).expect("hand index is 0 or 1")
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            wrists: self.wrists.slice_rows(start, len)?,
            gestures: self.gestures.slice_rows(start, len)?,
        })
    }
}

pub fn keyx(k: f64) -> f64 {
    (k - 43.5) / 44.0
}

fn hand_keys(hand: usize) -> std::ops::Range<usize> {
    if hand == 0 {
        0..SPLIT_KEY
    } else {
        SPLIT_KEY..KEYS
    }
}

pub fn synth_motion_from_roll(roll: &PianoRoll, seed: u64) -> MotionSequence {
    synth_motion_with(roll, seed, D_HAND).expect("default gesture width is valid")
}

pub fn synth_motion_with(roll: &PianoRoll, seed: u64, d_hand: usize) -> Result<MotionSequence> {
    if d_hand < HIST_BINS {
        return Err(arg_err!("gesture width {d_hand} is below the {HIST_BINS} histogram dims"));
    }
    let n = roll.len();
    let n_osc = d_hand - HIST_BINS;
    let mut r = rng::stream(seed, OSC_STREAM);
    let osc: Vec<[(f64, f64); 2]> = (0..n_osc)
        .map(|_| {
            let mut draw = || (r.random_range(0.5..4.0), r.random_range(0.0..TAU));
            [draw(), draw()]
        })
        .collect();

    let mut wrists = Tensor::zeros(&[n, 6]);
    let mut gestures = Tensor::zeros(&[n, 2 * d_hand]);
    for hand in 0..2 {
        let mut x = 0.0;
        let mut hist = [0.0; HIST_BINS];
        let keys = hand_keys(hand);
        for f in 0..n {
            let active: Vec<usize> = keys.clone().filter(|&k| roll.is_active(f, k)).collect();
            if !active.is_empty() {
                let centroid = active.iter().sum::<usize>() as f64 / active.len() as f64;
                x += WRIST_ALPHA * (keyx(centroid) - x);
            }
            wrists.set(f, 3 * hand, x);
            wrists.set(f, 3 * hand + 1, 0.05 * active.len().min(4) as f64);

            let mut counts = [0.0; HIST_BINS];
            for &k in &active {
                counts[(k - keys.start) * HIST_BINS / keys.len()] += 1.0;
            }
            let base = hand * d_hand;
            for b in 0..HIST_BINS {
                hist[b] += GESTURE_ALPHA * (counts[b] - hist[b]);
                gestures.set(f, base + b, hist[b]);
            }
            for (j, o) in osc.iter().enumerate() {
                let (freq, phase) = o[hand];
                let v = OSC_AMPLITUDE * (TAU * freq * f as f64 / FRAME_RATE + phase).sin();
                gestures.set(f, base + HIST_BINS + j, v);
            }
        }
    }
    MotionSequence::new(wrists, gestures)
}

/// One synthetic training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub roll: PianoRoll,
    pub motion: MotionSequence,
    pub seed: u64,
}

pub fn clip_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Random notes for one clip: per hand a Poisson stream (3 notes/s) with
/// durations uniform in [0.2, 1] s and pitches centred low for the left
/// hand and high for the right.
pub fn random_notes(r: &mut rng::Rng, clip_seconds: f64) -> Vec<NoteEvent> {
    let gap = Exp::<f64>::new(3.0).expect("positive rate");
    let mut events = Vec::new();
    for centre in [22.0, 64.0] {
        let pitch = Normal::<f64>::new(centre, 8.0).expect("positive sd");
        let mut t = gap.sample(r);
        while t < clip_seconds {
            let key = pitch.sample(r).round().clamp(0.0, (KEYS - 1) as f64) as u8;
            let dur = r.random_range(0.2..1.0);
            events.push(NoteEvent {
                onset_seconds: t,
                offset_seconds: (t + dur).min(clip_seconds),
                pitch: PITCH_MIN + key,
                velocity: r.random_range(40..=110),
            });
            t += gap.sample(r);
        }
    }
    events
}

pub fn make_toy_dataset(n_clips: usize, clip_seconds: f64, seed: u64) -> Result<Vec<Clip>> {
    make_toy_dataset_with(n_clips, clip_seconds, seed, D_HAND)
}

pub fn make_toy_dataset_with(n_clips: usize, clip_seconds: f64, seed: u64, d_hand: usize) -> Result<Vec<Clip>> {
    if n_clips == 0 {
        return Err(arg_err!("dataset needs at least one clip"));
    }
    (0..n_clips)
        .map(|i| {
            let cs = clip_seed(seed, i);
            let mut r = rng::seeded(cs);
            let events = random_notes(&mut r, clip_seconds);
            let roll = roll_from_events(&events, clip_seconds)?;
            let motion = synth_motion_with(&roll, cs, d_hand)?;
            Ok(Clip { roll, motion, seed: cs })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn held(key: usize, n: usize) -> PianoRoll {
        let mut roll = PianoRoll::zeros(n);
        for f in 0..n {
            roll.set(f, key, true);
        }
        roll
    }

    #[test]
    fn left_wrist_converges_to_key_position() {
        let m = synth_motion_from_roll(&held(10, 60), 1);
        assert!((m.wrists.at(49, 0) - (-0.7614)).abs() < 1e-3);
        assert!((m.wrists.at(59, 1) - 0.05).abs() < 1e-12);
        assert_eq!(m.wrists.at(59, 3), 0.0);
    }

    #[test]
    fn right_wrist_converges_to_key_position() {
        let m = synth_motion_from_roll(&held(70, 60), 1);
        assert!((m.wrists.at(49, 3) - 0.6023).abs() < 1e-3);
        assert_eq!(m.wrists.at(59, 0), 0.0);
    }

    #[test]
    fn silent_roll_holds_rest_pose() {
        let m = synth_motion_from_roll(&PianoRoll::zeros(30), 3);
        for f in 0..30 {
            for c in 0..6 {
                assert_eq!(m.wrists.at(f, c), 0.0);
            }
        }
    }

    #[test]
    fn dataset_shapes() {
        let ds = make_toy_dataset(4, 8.0, 0).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(ds.iter().all(|c| c.roll.len() == 240 && c.motion.gestures.cols() == 96));
        assert_eq!(make_toy_dataset(1, 1.0, 0).unwrap()[0].roll.len(), 30);
        assert!(make_toy_dataset(0, 1.0, 0).is_err());
    }
}
