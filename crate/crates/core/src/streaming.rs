//! Arbitrary-length generation in overlapping chunks.
//!
//! [`AfcStreamer`] continues each chunk from the generated tail of the
//! previous one by inpainting the overlap at every solver step.
//! [`swf_generate`] is the independent-chunk cross-fade baseline.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::flowgen::{heun_integrate, heun_step, raw_condition, VelocityField};
use crate::midi::PianoRoll;
use crate::numcore::rng;
use crate::numcore::Tensor;
use crate::stage1::{acoustic_stand_in_with, Stage1Model};

pub const CHUNK_FRAMES: usize = 240;
pub const OVERLAP_FRAMES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk_frames: usize,
    pub overlap_frames: usize,
    pub total_frames: usize,
}

impl ChunkPlan {
    pub fn new(chunk_frames: usize, overlap_frames: usize, total_frames: usize) -> Result<Self> {
        if overlap_frames == 0 || overlap_frames >= chunk_frames {
            return Err(arg_err!("overlap {overlap_frames} must lie in (0, {chunk_frames})"));
        }
        if total_frames == 0 {
            return Err(arg_err!("cannot plan zero frames"));
        }
        Ok(Self {
            chunk_frames,
            overlap_frames,
            total_frames,
        })
    }

    pub fn with_defaults(total_frames: usize) -> Result<Self> {
        Self::new(CHUNK_FRAMES, OVERLAP_FRAMES, total_frames)
    }

    pub fn hop(&self) -> usize {
        self.chunk_frames - self.overlap_frames
    }

    /// `(start, len)` of every chunk. The last one may be shorter.
    pub fn chunks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let len = self.chunk_frames.min(self.total_frames - start);
            out.push((start, len));
            if start + len >= self.total_frames {
                return out;
            }
            start += self.hop();
        }
    }
}

/// `m_i = (1 + cos(π i / (L - 1))) / 2`, decaying from 1 to 0.
pub fn cosine_mask(overlap: usize) -> Result<Vec<f64>> {
    if overlap < 2 {
        return Err(arg_err!("cosine mask needs at least 2 frames, got {overlap}"));
    }
    let last = (overlap - 1) as f64;
    Ok((0..overlap)
        .map(|i| match i {
            0 => 1.0,
            i if i == overlap - 1 => 0.0,
            i => 0.5 * (1.0 + (std::f64::consts::PI * i as f64 / last).cos()),
        })
        .collect())
}

/// One Heun step over the whole chunk, then the overlap rows are pulled
/// toward the known path `(1 - t′) ε + t′ x_past` with weights `mask`.
#[allow(clippy::too_many_arguments)]
pub fn afc_step<F: VelocityField>(
    x: &Tensor,
    t: f64,
    dt: f64,
    field: &F,
    cond: &Tensor,
    x_past: &Tensor,
    eps: &Tensor,
    mask: &[f64],
) -> Result<Tensor> {
    let l = mask.len();
    if x_past.shape() != eps.shape() || x_past.rows() != l || l > x.rows() || x_past.cols() != x.cols() {
        return Err(dim_err!(
            "afc: chunk {:?}, past {:?}, noise {:?}, mask {l}",
            x.shape(),
            x_past.shape(),
            eps.shape()
        ));
    }
    let tn = t + dt;
    if tn > 1.0 + 1e-12 {
        return Err(arg_err!("afc step ends past t = 1 ({tn})"));
    }
    let mut out = heun_step(field, x, t, dt, cond)?;
    for (i, &m) in mask.iter().enumerate() {
        let (p, e) = (x_past.row(i), eps.row(i));
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            let known = (1.0 - tn) * e[j] + tn * p[j];
            *v = m * known + (1.0 - m) * *v;
        }
    }
    Ok(out)
}

/// Supplies the condition rows for one chunk, with no lookahead past it.
pub trait ConditionSource {
    fn chunk(&self, start: usize, len: usize) -> Result<Tensor>;
}

impl ConditionSource for Tensor {
    fn chunk(&self, start: usize, len: usize) -> Result<Tensor> {
        self.slice_rows(start, len)
    }
}

/// Runs the frozen stage-1 student on each chunk of a roll as it arrives.
pub struct RollCondition<'a> {
    pub stage1: &'a Stage1Model,
    pub roll: &'a PianoRoll,
}

impl ConditionSource for RollCondition<'_> {
    fn chunk(&self, start: usize, len: usize) -> Result<Tensor> {
        let part = self.roll.slice(start, len)?;
        let audio = acoustic_stand_in_with(&part, self.stage1.config.c_a);
        raw_condition(&audio, &self.stage1.student_outputs(&audio)?)
    }
}

/// Everything needed to resume a stream in a later call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub next_chunk: usize,
    pub emitted: usize,
    pub tail_rows: usize,
    pub tail_cols: usize,
    /// Held tail, as IEEE-754 bit patterns so the round trip is exact.
    pub tail_bits: Vec<u64>,
}

impl StreamState {
    fn tail(&self) -> Result<Option<Tensor>> {
        if self.tail_bits.is_empty() {
            return Ok(None);
        }
        let data = self.tail_bits.iter().map(|&b| f64::from_bits(b)).collect();
        Tensor::new(&[self.tail_rows, self.tail_cols], data).map(Some)
    }

    fn set_tail(&mut self, t: Option<&Tensor>) {
        match t {
            Some(t) => {
                self.tail_rows = t.rows();
                self.tail_cols = t.cols();
                self.tail_bits = t.data().iter().map(|v| v.to_bits()).collect();
            }
            None => {
                self.tail_rows = 0;
                self.tail_cols = 0;
                self.tail_bits.clear();
            }
        }
    }
}

/// Chunk-by-chunk AFC generation.
#[derive(Debug, Clone)]
pub struct AfcStreamer {
    pub plan: ChunkPlan,
    pub seed: u64,
    pub n_steps: usize,
    pub dims: usize,
    mask: Vec<f64>,
    state: StreamState,
}

impl AfcStreamer {
    pub fn new(plan: ChunkPlan, seed: u64, n_steps: usize, dims: usize) -> Result<Self> {
        Self::resume(plan, seed, n_steps, dims, StreamState {
            next_chunk: 0,
            emitted: 0,
            tail_rows: 0,
            tail_cols: 0,
            tail_bits: Vec::new(),
        })
    }

    pub fn resume(plan: ChunkPlan, seed: u64, n_steps: usize, dims: usize, state: StreamState) -> Result<Self> {
        if n_steps == 0 || dims == 0 {
            return Err(arg_err!("streamer needs positive steps and dims"));
        }
        let n_chunks = plan.chunks().len();
        let mid_stream = state.next_chunk > 0 && state.next_chunk < n_chunks;
        if state.next_chunk > n_chunks || mid_stream == state.tail_bits.is_empty() {
            return Err(Error::State(format!(
                "stream state at chunk {} of {n_chunks} is inconsistent with its tail",
                state.next_chunk
            )));
        }
        Ok(Self {
            mask: cosine_mask(plan.overlap_frames)?,
            plan,
            seed,
            n_steps,
            dims,
            state,
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.next_chunk >= self.plan.chunks().len()
    }

    /// Generates the next chunk and returns the frames it finalizes, or
    /// `None` once the plan is exhausted.
    pub fn next_frames<F: VelocityField, C: ConditionSource + ?Sized>(
        &mut self,
        field: &F,
        cond: &C,
    ) -> Result<Option<Tensor>> {
        let chunks = self.plan.chunks();
        let k = self.state.next_chunk;
        let Some(&(start, len)) = chunks.get(k) else {
            return Ok(None);
        };
        let c = cond.chunk(start, len)?;
        let mut r = rng::stream(self.seed, k as u64);
        let eps = rng::normal(&mut r, &[len, self.dims]);
        let x = match self.state.tail()? {
            None => heun_integrate(field, &eps, &c, self.n_steps)?,
            Some(past) => {
                let l = self.plan.overlap_frames;
                let eps_ov = eps.slice_rows(0, l)?;
                let dt = 1.0 / self.n_steps as f64;
                let mut x = eps.clone();
                for i in 0..self.n_steps {
                    x = afc_step(&x, i as f64 * dt, dt, field, &c, &past, &eps_ov, &self.mask)?;
                    if !x.is_finite() {
                        return Err(Error::Numerical(format!("chunk {k}: non-finite state at step {i}")));
                    }
                }
                x
            }
        };
        let last = k + 1 == chunks.len();
        let keep = if last { len } else { len - self.plan.overlap_frames };
        let tail = if last { None } else { Some(x.slice_rows(keep, len - keep)?) };
        self.state.set_tail(tail.as_ref());
        self.state.next_chunk += 1;
        self.state.emitted += keep;
        Ok(Some(x.slice_rows(0, keep)?))
    }
}

/// Whole-sequence AFC generation.
pub fn stream_generate<F: VelocityField, C: ConditionSource + ?Sized>(
    field: &F,
    cond: &C,
    plan: ChunkPlan,
    seed: u64,
    n_steps: usize,
    dims: usize,
) -> Result<Tensor> {
    let mut s = AfcStreamer::new(plan, seed, n_steps, dims)?;
    let mut parts = Vec::new();
    while let Some(frames) = s.next_frames(field, cond)? {
        parts.push(frames);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// `w·new + (1 - w)·old` with `w` rising linearly from 0 to 1.
pub fn crossfade(old: &Tensor, new: &Tensor) -> Result<Tensor> {
    if old.shape() != new.shape() {
        return Err(dim_err!("crossfade {:?} vs {:?}", old.shape(), new.shape()));
    }
    let l = old.rows();
    let mut out = old.clone();
    for i in 0..l {
        let w = if l == 1 { 1.0 } else { i as f64 / (l - 1) as f64 };
        let n = new.row(i);
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = w * n[j] + (1.0 - w) * *v;
        }
    }
    Ok(out)
}

/// Independently sampled chunks joined by linear cross-fades.
pub fn swf_generate<F: VelocityField, C: ConditionSource + ?Sized>(
    field: &F,
    cond: &C,
    plan: ChunkPlan,
    seed: u64,
    n_steps: usize,
    dims: usize,
) -> Result<Tensor> {
    let chunks = plan
        .chunks()
        .iter()
        .enumerate()
        .map(|(k, &(start, len))| {
            let c = cond.chunk(start, len)?;
            let eps = rng::normal(&mut rng::stream(seed, k as u64), &[len, dims]);
            heun_integrate(field, &eps, &c, n_steps)
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_chunks(&chunks, plan)
}

/// Stitches chunks laid out by `plan`, cross-fading each overlap.
pub fn fuse_chunks(chunks: &[Tensor], plan: ChunkPlan) -> Result<Tensor> {
    let spans = plan.chunks();
    if chunks.len() != spans.len() {
        return Err(dim_err!("{} chunks for a plan of {}", chunks.len(), spans.len()));
    }
    let l = plan.overlap_frames;
    let mut out = chunks[0].clone();
    for (c, &(start, len)) in chunks.iter().zip(&spans).skip(1) {
        if c.rows() != len {
            return Err(dim_err!("chunk at {start} has {} rows, plan says {len}", c.rows()));
        }
        let head = out.slice_rows(0, start)?;
        let old = out.slice_rows(start, l)?;
        let fused = crossfade(&old, &c.slice_rows(0, l)?)?;
        let rest = c.slice_rows(l, len - l)?;
        out = Tensor::concat_rows(&[&head, &fused, &rest])?;
    }
    Ok(out)
}

/// Frame-to-frame jump sizes `‖x_n − x_{n−1}‖` split into those touching a
/// seam region (from the last frame before each later chunk's start through the
/// end of its overlap) and the rest.
pub fn seam_jumps(x: &Tensor, plan: ChunkPlan) -> (Vec<f64>, Vec<f64>) {
    let jump = |n: usize| -> f64 {
        x.row(n).iter().zip(x.row(n - 1)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut seam = vec![false; x.rows()];
    for &(start, _) in plan.chunks().iter().skip(1) {
        for n in start..(start + plan.overlap_frames + 1).min(x.rows()) {
            seam[n] = true;
        }
    }
    let (mut at_seams, mut within) = (Vec::new(), Vec::new());
    for n in 1..x.rows() {
        if seam[n] {
            at_seams.push(jump(n));
        } else {
            within.push(jump(n));
        }
    }
    (at_seams, within)
}

/// Linear-interpolated percentile, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_values() {
        assert_eq!(cosine_mask(3).unwrap(), vec![1.0, 0.5, 0.0]);
        assert_eq!(cosine_mask(2).unwrap(), vec![1.0, 0.0]);
        assert!(cosine_mask(1).is_err());
        let m = cosine_mask(240).unwrap();
        assert!(m.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn plan_covers_and_overlaps() {
        let p = ChunkPlan::with_defaults(900).unwrap();
        assert_eq!(p.chunks(), vec![(0, 240), (210, 240), (420, 240), (630, 240), (840, 60)]);
        assert_eq!(ChunkPlan::with_defaults(240).unwrap().chunks(), vec![(0, 240)]);
        assert_eq!(ChunkPlan::with_defaults(100).unwrap().chunks(), vec![(0, 100)]);
        assert_eq!(ChunkPlan::with_defaults(241).unwrap().chunks(), vec![(0, 240), (210, 31)]);
        assert!(ChunkPlan::new(240, 240, 10).is_err());
        assert!(ChunkPlan::new(240, 0, 10).is_err());
    }

    #[test]
    fn crossfade_of_constants() {
        let a = Tensor::full(&[3, 2], 1.0);
        let b = Tensor::full(&[3, 2], 3.0);
        let f = crossfade(&a, &b).unwrap();
        assert_eq!(f.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(crossfade(&a, &a).unwrap(), a);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
    }
}
