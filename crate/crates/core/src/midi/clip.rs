//! Clip and motion files: `u32` little-endian header length, a JSON header,
//! then little-endian `f32` blocks in the order listed by the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::roll::{PianoRoll, FRAME_RATE, KEYS};
use super::synth::{Clip, MotionSequence};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipHeader {
    pub n: usize,
    /// Full gesture width (both hands).
    pub d: usize,
    pub frame_rate: f64,
    pub seed: u64,
    #[serde(default = "default_blocks")]
    pub blocks: Vec<String>,
}

fn default_blocks() -> Vec<String> {
    vec!["roll".into(), "wrists".into(), "gestures".into()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipFile {
    pub header: ClipHeader,
    pub roll: Option<PianoRoll>,
    pub motion: MotionSequence,
}

impl ClipFile {
    pub fn from_clip(clip: &Clip) -> Self {
        Self {
            header: ClipHeader {
                n: clip.roll.len(),
                d: clip.motion.gestures.cols(),
                frame_rate: FRAME_RATE,
                seed: clip.seed,
                blocks: default_blocks(),
            },
            roll: Some(clip.roll.clone()),
            motion: clip.motion.clone(),
        }
    }

    pub fn from_motion(motion: &MotionSequence, seed: u64) -> Self {
        Self {
            header: ClipHeader {
                n: motion.len(),
                d: motion.gestures.cols(),
                frame_rate: FRAME_RATE,
                seed,
                blocks: vec!["wrists".into(), "gestures".into()],
            },
            roll: None,
            motion: motion.clone(),
        }
    }

    pub fn into_clip(self) -> Result<Clip> {
        let roll = self
            .roll
            .ok_or_else(|| Error::Format("file has no piano roll block".into()))?;
        Ok(Clip {
            roll,
            motion: self.motion,
            seed: self.header.seed,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend(header);
        for block in &self.header.blocks {
            let t = match block.as_str() {
                "roll" => self
                    .roll
                    .as_ref()
                    .map(PianoRoll::frames)
                    .ok_or_else(|| Error::Format("header lists a roll block but none is set".into()))?,
                "wrists" => &self.motion.wrists,
                "gestures" => &self.motion.gestures,
                other => return Err(Error::Format(format!("unknown block {other:?}"))),
            };
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("clip file truncated".into());
        let len = bytes
            .get(..4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(truncated)?;
        let header: ClipHeader = serde_json::from_slice(bytes.get(4..4 + len).ok_or_else(truncated)?)?;
        if header.n == 0 || header.d == 0 || header.d % 2 != 0 {
            return Err(Error::Format(format!("invalid clip dimensions n={} d={}", header.n, header.d)));
        }
        let mut pos = 4 + len;
        let mut read = |cols: usize| -> Result<Tensor> {
            let count = header.n * cols;
            let raw = bytes.get(pos..pos + 4 * count).ok_or_else(truncated)?;
            pos += 4 * count;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Tensor::new(&[header.n, cols], data)
        };
        let (mut roll, mut wrists, mut gestures) = (None, None, None);
        for block in &header.blocks {
            match block.as_str() {
                "roll" => roll = Some(PianoRoll::new(read(KEYS)?)?),
                "wrists" => wrists = Some(read(6)?),
                "gestures" => gestures = Some(read(header.d)?),
                other => return Err(Error::Format(format!("unknown block {other:?}"))),
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in clip file", bytes.len() - pos)));
        }
        let missing = |b: &str| Error::Format(format!("clip file has no {b} block"));
        let motion = MotionSequence::new(
            wrists.ok_or_else(|| missing("wrists"))?,
            gestures.ok_or_else(|| missing("gestures"))?,
        )?;
        Ok(Self { header, roll, motion })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
