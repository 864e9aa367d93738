//! Layers built from graph ops. Weights are stored `[in, out]` so a layer
//! maps row-major activations `[rows, in] -> [rows, out]`.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::{self, Rng};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// `softmax(q kᵀ / √d_k) v`.
pub fn attention_forward(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_weights(g, q, k, v, 1).map(|(out, _)| out)
}

/// Attention over `batch` independent row blocks, returning the output and
/// the softmax weights.
pub fn attention_with_weights(g: &mut Graph, q: Var, k: Var, v: Var, batch: usize) -> Result<(Var, Var)> {
    let (_, dq) = g.shape(q);
    let (rk, dk) = g.shape(k);
    let (rv, _) = g.shape(v);
    if dq != dk {
        return Err(dim_err!("attention: query width {dq} != key width {dk}"));
    }
    if rk != rv {
        return Err(dim_err!("attention: {rk} keys but {rv} values"));
    }
    let logits = g.matmul_ex(q, k, false, true, batch)?;
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax(logits)?;
    let out = g.matmul_ex(weights, v, false, false, batch)?;
    Ok((out, weights))
}

/// `gamma ⊙ h + beta`, with `gamma`/`beta` either shaped like `h` or a
/// single `1×c` row broadcast over rows.
pub fn film_modulate(g: &mut Graph, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (r, c) = g.shape(h);
    let scaled = match g.shape(gamma) {
        s if s == (r, c) => g.mul(h, gamma)?,
        s if s == (1, c) => g.mul_row(h, gamma)?,
        s => return Err(dim_err!("film: gamma {s:?} does not broadcast to {r}x{c}")),
    };
    match g.shape(beta) {
        s if s == (r, c) => g.add(scaled, beta),
        s if s == (1, c) => g.add_row(scaled, beta),
        s => Err(dim_err!("film: beta {s:?} does not broadcast to {r}x{c}")),
    }
}

/// Uniform `±1/√fan_in` initialization.
pub fn init_uniform(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng::uniform(rng, shape, -bound, bound)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Self::scaled(ps, name, d_in, d_out, bias, 1.0, rng)
    }

    /// Like [`Linear::new`] with the initial weights multiplied by `gain`.
    pub fn scaled(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = init_uniform(rng, d_in, &[d_in, d_out]).map(|v| v * gain);
        let w = ps.add(format!("{name}.w"), w);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[1, d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        film_modulate(g, n, gain, bias)
    }
}

/// Single-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, d_query: usize, d_kv: usize, d_attn: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Linear::new(ps, &format!("{name}.q"), d_query, d_attn, false, rng),
            wk: Linear::new(ps, &format!("{name}.k"), d_kv, d_attn, false, rng),
            wv: Linear::new(ps, &format!("{name}.v"), d_kv, d_attn, false, rng),
            wo: Linear::new(ps, &format!("{name}.o"), d_attn, d_out, true, rng),
        }
    }

    /// Queries from `x`, keys and values from `ctx`; `batch` splits both
    /// into independent row blocks.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Var, batch: usize) -> Result<Var> {
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, ctx)?;
        let v = self.wv.forward(g, ctx)?;
        let (a, _) = attention_with_weights(g, q, k, v, batch)?;
        self.wo.forward(g, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), d_in, hidden, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer encoder block: self-attention then feed-forward,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, ff_hidden: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: Attention::new(ps, &format!("{name}.attn"), d, d, d, d, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, ff_hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, batch)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        g.add(x, f)
    }
}

/// Sinusoidal position table `[n, d]`: even columns sine, odd columns
/// cosine, geometric wavelengths up to 10000.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n, d], data).expect("sinusoidal: zero extent")
}

/// `d`-dimensional sinusoidal embedding of a flow time `t ∈ [0, 1]`, with
/// angular frequencies spread geometrically over `[1, 1000]`.
pub fn time_embedding(t: f64, d: usize) -> Tensor {
    let half = (d / 2).max(1);
    let mut data = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = t * 1000f64.powf(i as f64 / half as f64);
        data[i] = angle.sin();
        data[d / 2 + i] = angle.cos();
    }
    Tensor::new(&[1, d], data).expect("time embedding: zero extent")
}
