//! Harmonic Perceiver: encodes a piano roll into per-frame MIDI features.
//!
//! Each frame's 88 keys pass through an octave-width (13) and then an
//! interval-width (5) convolution along the pitch axis, gain an absolute
//! pitch embedding, and are pooled by `M` learned queries. The pooled
//! vectors are concatenated, projected, and run through a temporal
//! transformer encoder.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::midi::KEYS;
use crate::numcore::nn::{attention_with_weights, init_uniform, sinusoidal_positions, Linear, TransformerBlock};
use crate::numcore::rng::{self, Rng};
use crate::numcore::{Graph, ParamId, ParamStore, Var};

pub const OCTAVE_KERNEL: usize = 13;
pub const INTERVAL_KERNEL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicConfig {
    pub channels: usize,
    pub d_p: usize,
    pub queries: usize,
    pub c_mid: usize,
    pub layers: usize,
    pub use_pitch_pos: bool,
    pub use_time_pos: bool,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            d_p: 32,
            queries: 8,
            c_mid: 64,
            layers: 2,
            use_pitch_pos: true,
            use_time_pos: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HarmonicPerceiver {
    pub config: HarmonicConfig,
    pub octave: Linear,
    pub interval: Linear,
    pub pitch_pos: ParamId,
    pub queries: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub merge: Linear,
    pub blocks: Vec<TransformerBlock>,
}

impl HarmonicPerceiver {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: HarmonicConfig, rng: &mut Rng) -> Self {
        let c = config.channels;
        let octave = Linear::new(ps, &format!("{prefix}.octave"), OCTAVE_KERNEL, c, true, rng);
        let interval = Linear::new(ps, &format!("{prefix}.interval"), INTERVAL_KERNEL * c, c, true, rng);
        let pitch_pos = ps.add(format!("{prefix}.pitch_pos"), rng::normal(rng, &[KEYS, c]).map(|v| 0.1 * v));
        let queries = ps.add(format!("{prefix}.queries"), init_uniform(rng, 1, &[config.queries, c]));
        let wq = Linear::new(ps, &format!("{prefix}.pool.q"), c, config.d_p, false, rng);
        let wk = Linear::new(ps, &format!("{prefix}.pool.k"), c, config.d_p, true, rng);
        let wv = Linear::new(ps, &format!("{prefix}.pool.v"), c, config.d_p, false, rng);
        let merge = Linear::new(ps, &format!("{prefix}.merge"), config.queries * config.d_p, config.c_mid, true, rng);
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(ps, &format!("{prefix}.temporal.{i}"), config.c_mid, 2 * config.c_mid, rng))
            .collect();
        Self {
            config,
            octave,
            interval,
            pitch_pos,
            queries,
            wq,
            wk,
            wv,
            merge,
            blocks,
        }
    }

    /// `[N, 88]` frames to stacked per-frame pitch maps `[N·88, C]`.
    pub fn pitch_structure(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let (n, keys) = g.shape(frames);
        if keys != KEYS {
            return Err(dim_err!("pitch_structure expects 88 keys per frame, got {keys}"));
        }
        let col = g.reshape(frames, n * KEYS, 1)?;
        let taps = g.im2col(col, KEYS, OCTAVE_KERNEL, 1, OCTAVE_KERNEL / 2)?;
        let h = self.octave.forward(g, taps)?;
        let taps = g.im2col(h, KEYS, INTERVAL_KERNEL, 1, INTERVAL_KERNEL / 2)?;
        let s = self.interval.forward(g, taps)?;
        if !self.config.use_pitch_pos {
            return Ok(s);
        }
        let p = g.param(self.pitch_pos);
        let p = g.tile_rows(p, n)?;
        g.add(s, p)
    }

    /// Learned-query attention over each frame's 88 pitch rows, returning
    /// the merged `[N, C_mid]` embeddings and the `[N·M, 88]` weights.
    pub fn pitch_pool_with_weights(&self, g: &mut Graph, s: Var) -> Result<(Var, Var)> {
        let (rows, _) = g.shape(s);
        if rows % KEYS != 0 {
            return Err(dim_err!("pitch_pool expects a multiple of 88 rows, got {rows}"));
        }
        let n = rows / KEYS;
        let q0 = g.param(self.queries);
        let q = self.wq.forward(g, q0)?;
        let q = g.tile_rows(q, n)?;
        let k = self.wk.forward(g, s)?;
        let v = self.wv.forward(g, s)?;
        let (pooled, weights) = attention_with_weights(g, q, k, v, n)?;
        let flat = g.reshape(pooled, n, self.config.queries * self.config.d_p)?;
        Ok((self.merge.forward(g, flat)?, weights))
    }

    pub fn pitch_pool(&self, g: &mut Graph, s: Var) -> Result<Var> {
        self.pitch_pool_with_weights(g, s).map(|(e, _)| e)
    }

    pub fn temporal_encode(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let (n, d) = g.shape(e);
        let mut h = if self.config.use_time_pos {
            let pos = g.constant(&sinusoidal_positions(n, d));
            g.add(e, pos)?
        } else {
            e
        };
        for block in &self.blocks {
            h = block.forward(g, h, 1)?;
        }
        Ok(h)
    }

    /// `F_midi` for a `[N, 88]` roll.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let s = self.pitch_structure(g, frames)?;
        let e = self.pitch_pool(g, s)?;
        self.temporal_encode(g, e)
    }
}
