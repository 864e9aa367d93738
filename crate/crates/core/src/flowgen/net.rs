//! The per-hand velocity network: joint-token spatial attention, then a
//! FiLM-conditioned temporal U-Net whose bottlenecks meet in [`Argi`].

use serde::{Deserialize, Serialize};

use super::argi::{Argi, ArgiOutput};
use super::VelocityField;
use crate::error::{dim_err, Error, Result};
use crate::numcore::nn::{film_modulate, time_embedding, Linear, TransformerBlock};
use crate::numcore::rng::{self, Rng};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub d_hand: usize,
    pub joints: usize,
    pub joint_dim: usize,
    pub spatial_width: usize,
    pub widths: Vec<usize>,
    pub cond_width: usize,
    pub time_dim: usize,
    pub d_k: usize,
    pub gate_hidden: usize,
    /// Acoustic feature width in the raw condition.
    pub c_a: usize,
    /// Stage-1 encoder width in the raw condition.
    pub enc_width: usize,
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adds a learned, time-dependent linear path from `x_t` to the output.
    pub input_skip: bool,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub patience: usize,
    pub n_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            d_hand: 48,
            joints: 12,
            joint_dim: 4,
            spatial_width: 32,
            widths: vec![64, 128],
            cond_width: 64,
            time_dim: 32,
            d_k: 64,
            gate_hidden: 32,
            c_a: 32,
            enc_width: 64,
            steps: 500,
            batch: 4,
            crop_frames: 240,
            lr: 2e-3,
            weight_decay: 0.01,
            input_skip: true,
            grad_clip: 1.0,
            patience: 15,
            n_steps: 25,
        }
    }
}

impl FlowConfig {
    /// Raw per-hand condition width: acoustic, encoder, both wrists.
    pub fn raw_cond_width(&self) -> usize {
        self.c_a + self.enc_width + 6
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.widths.is_empty() || self.widths.contains(&0) {
            p.push("stage2.widths must be a non-empty list of positive widths".to_string());
        }
        if self.joints * self.joint_dim != self.d_hand {
            p.push(format!(
                "stage2.joints × stage2.joint_dim must equal d_hand ({} × {} != {})",
                self.joints, self.joint_dim, self.d_hand
            ));
        }
        for (name, v) in [
            ("d_hand", self.d_hand),
            ("spatial_width", self.spatial_width),
            ("cond_width", self.cond_width),
            ("d_k", self.d_k),
            ("gate_hidden", self.gate_hidden),
            ("steps", self.steps),
            ("batch", self.batch),
            ("n_steps", self.n_steps),
        ] {
            if v == 0 {
                p.push(format!("stage2.{name} must be positive"));
            }
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            p.push("stage2.time_dim must be even and at least 2".into());
        }
        if self.crop_frames < 3 {
            p.push("stage2.crop_frames must be at least 3".into());
        }
        if !(self.lr > 0.0) {
            p.push("stage2.lr must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            p.push("stage2.grad_clip must be non-negative".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Convolution (k = 3, same padding) → FiLM → GELU.
#[derive(Debug, Clone)]
pub struct FilmBlock {
    pub conv: Linear,
    pub film: Linear,
    pub width: usize,
}

impl FilmBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, film_in: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Linear::new(ps, &format!("{name}.conv"), 3 * c_in, c_out, true, rng),
            film: Linear::scaled(ps, &format!("{name}.film"), film_in, 2 * c_out, true, 0.1, rng),
            width: c_out,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, film_in: Var) -> Result<Var> {
        let n = g.shape(x).0;
        let taps = g.im2col(x, n, 3, 1, 1)?;
        let h = self.conv.forward(g, taps)?;
        let gb = self.film.forward(g, film_in)?;
        let gamma = g.slice_cols(gb, 0, self.width)?;
        let gamma = g.add_scalar(gamma, 1.0)?;
        let beta = g.slice_cols(gb, self.width, self.width)?;
        let h = film_modulate(g, h, gamma, beta)?;
        g.gelu(h)
    }
}

/// One hand's unshared stream.
#[derive(Debug, Clone)]
pub struct HandStream {
    pub tokenizer: Linear,
    pub joint_embed: ParamId,
    pub spatial: TransformerBlock,
    pub in_proj: Linear,
    pub enc: Vec<FilmBlock>,
    pub down: Vec<Linear>,
    pub bottleneck: FilmBlock,
    pub dec: Vec<FilmBlock>,
    pub out: Linear,
    /// Time-conditioned per-dim gain on `x_t`, added to the velocity.
    pub skip: Option<Linear>,
}

impl HandStream {
    fn new(ps: &mut ParamStore, prefix: &str, cfg: &FlowConfig, rng: &mut Rng) -> Self {
        let film_in = cfg.cond_width + cfg.time_dim;
        let w = &cfg.widths;
        let levels = w.len();
        let next = |l: usize| w[(l + 1).min(levels - 1)];
        let ds = cfg.spatial_width;
        Self {
            tokenizer: Linear::new(ps, &format!("{prefix}.tokenizer"), cfg.joint_dim, ds, true, rng),
            joint_embed: ps.add(format!("{prefix}.joint_embed"), rng::normal(rng, &[cfg.joints, ds]).map(|v| 0.1 * v)),
            spatial: TransformerBlock::new(ps, &format!("{prefix}.spatial"), ds, 2 * ds, rng),
            in_proj: Linear::new(ps, &format!("{prefix}.in_proj"), cfg.joints * ds, w[0], true, rng),
            enc: (0..levels)
                .map(|l| FilmBlock::new(ps, &format!("{prefix}.enc.{l}"), w[l], w[l], film_in, rng))
                .collect(),
            down: (0..levels)
                .map(|l| Linear::new(ps, &format!("{prefix}.down.{l}"), 3 * w[l], next(l), true, rng))
                .collect(),
            bottleneck: FilmBlock::new(ps, &format!("{prefix}.bottleneck"), w[levels - 1], w[levels - 1], film_in, rng),
            dec: (0..levels)
                .map(|l| FilmBlock::new(ps, &format!("{prefix}.dec.{l}"), next(l) + w[l], w[l], film_in, rng))
                .collect(),
            out: Linear::scaled(ps, &format!("{prefix}.out"), w[0], cfg.d_hand, true, 0.1, rng),
            skip: cfg
                .input_skip
                .then(|| Linear::scaled(ps, &format!("{prefix}.skip"), cfg.time_dim, cfg.d_hand, true, 0.0, rng)),
        }
    }

    fn spatial_embed(&self, g: &mut Graph, x: Var, cfg: &FlowConfig) -> Result<Var> {
        let n = g.shape(x).0;
        let tokens = g.reshape(x, n * cfg.joints, cfg.joint_dim)?;
        let h = self.tokenizer.forward(g, tokens)?;
        let je = g.param(self.joint_embed);
        let je = g.tile_rows(je, n)?;
        let h = g.add(h, je)?;
        let h = self.spatial.forward(g, h, n)?;
        let h = g.reshape(h, n, cfg.joints * cfg.spatial_width)?;
        self.in_proj.forward(g, h)
    }

    /// Encoder half; returns the bottleneck features and the skips.
    fn encode(&self, g: &mut Graph, x: Var, films: &[Var], cfg: &FlowConfig) -> Result<(Var, Vec<Var>)> {
        let mut h = self.spatial_embed(g, x, cfg)?;
        let mut skips = Vec::new();
        for l in 0..cfg.levels() {
            h = self.enc[l].forward(g, h, films[l])?;
            skips.push(h);
            let n = g.shape(h).0;
            let taps = g.im2col(h, n, 3, 2, 1)?;
            h = self.down[l].forward(g, taps)?;
        }
        let h = self.bottleneck.forward(g, h, films[cfg.levels()])?;
        Ok((h, skips))
    }

    fn decode(&self, g: &mut Graph, mut h: Var, skips: &[Var], films: &[Var], cfg: &FlowConfig) -> Result<Var> {
        for l in (0..cfg.levels()).rev() {
            let up = g.repeat_rows(h, 2)?;
            let cat = g.concat_cols(&[up, skips[l]])?;
            h = self.dec[l].forward(g, cat, films[l])?;
        }
        self.out.forward(g, h)
    }
}

/// The full two-hand velocity field `v_θ(t, x_t; c)`.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: FlowConfig,
    pub params: ParamStore,
    pub cond_proj: Linear,
    pub hands: [HandStream; 2],
    pub argi: Argi,
}

/// Intermediate values exposed for tests and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct NetOutputs {
    pub velocity: Var,
    pub bottleneck: [Var; 2],
    pub argi: ArgiOutput,
}

impl VelocityNet {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut r = rng::stream(seed, 0x52_0001);
        let cond_proj = Linear::new(&mut ps, "stage2.cond", config.raw_cond_width(), config.cond_width, false, &mut r);
        let left = HandStream::new(&mut ps, "stage2.left", &config, &mut r);
        let right = HandStream::new(&mut ps, "stage2.right", &config, &mut r);
        let argi = Argi::new(
            &mut ps,
            "stage2.argi",
            config.bottleneck_width(),
            config.d_k,
            config.gate_hidden,
            &mut r,
        );
        Ok(Self {
            config,
            params: ps,
            cond_proj,
            hands: [left, right],
            argi,
        })
    }

    pub fn from_params(config: FlowConfig, store: &ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let problems = net.params.load_from(store);
        if !problems.is_empty() {
            return Err(Error::Format(format!("stage-2 checkpoint mismatch: {}", problems.join(", "))));
        }
        Ok(net)
    }

    /// Frames must be a multiple of this for the U-Net.
    pub fn multiple(&self) -> usize {
        1 << self.config.levels()
    }

    /// Shared projection of one hand's raw `[N, C_a + C + 6]` condition.
    pub fn build_condition(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        self.cond_proj.forward(g, raw)
    }

    fn pad_rows(g: &mut Graph, x: Var, to: usize) -> Result<Var> {
        let n = g.shape(x).0;
        if n == to {
            return Ok(x);
        }
        let last = g.slice_rows(x, n - 1, 1)?;
        let fill = g.tile_rows(last, to - n)?;
        g.concat_rows(&[x, fill])
    }

    /// Differentiable forward pass. `cond` holds both hands' raw conditions
    /// side by side, `[N, 2·(C_a + C + 6)]`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, t: f64, cond: Var) -> Result<NetOutputs> {
        let cfg = &self.config;
        let (n, d) = g.shape(x);
        let w = cfg.raw_cond_width();
        if d != 2 * cfg.d_hand {
            return Err(dim_err!("velocity field expects {} gesture dims, got {d}", 2 * cfg.d_hand));
        }
        if g.shape(cond) != (n, 2 * w) {
            return Err(dim_err!("condition must be {n}x{}, got {:?}", 2 * w, g.shape(cond)));
        }
        let m = self.multiple();
        let padded = n.div_ceil(m) * m;
        let x = Self::pad_rows(g, x, padded)?;
        let cond = Self::pad_rows(g, cond, padded)?;
        let temb = g.constant(&time_embedding(t, cfg.time_dim));

        let mut films = [Vec::new(), Vec::new()];
        let mut bottleneck = [x; 2];
        let mut skips = [Vec::new(), Vec::new()];
        for s in 0..2 {
            let raw = g.slice_cols(cond, s * w, w)?;
            let c = self.build_condition(g, raw)?;
            for l in 0..=cfg.levels() {
                let pooled = g.avg_pool_rows(c, 1 << l)?;
                let rows = g.shape(pooled).0;
                let tt = g.tile_rows(temb, rows)?;
                films[s].push(g.concat_cols(&[pooled, tt])?);
            }
            let xs = g.slice_cols(x, s * cfg.d_hand, cfg.d_hand)?;
            let (h, sk) = self.hands[s].encode(g, xs, &films[s], cfg)?;
            bottleneck[s] = h;
            skips[s] = sk;
        }
        let argi = self.argi.forward(g, bottleneck)?;
        let mut outs = Vec::new();
        for s in 0..2 {
            let mut v = self.hands[s].decode(g, argi.hands[s], &skips[s], &films[s], cfg)?;
            if let Some(skip) = &self.hands[s].skip {
                let gain = skip.forward(g, temb)?;
                let xs = g.slice_cols(x, s * cfg.d_hand, cfg.d_hand)?;
                let direct = g.mul_row(xs, gain)?;
                v = g.add(v, direct)?;
            }
            outs.push(v);
        }
        let v = g.concat_cols(&outs)?;
        let velocity = if padded == n { v } else { g.slice_rows(v, 0, n)? };
        Ok(NetOutputs {
            velocity,
            bottleneck,
            argi,
        })
    }
}

impl VelocityField for VelocityNet {
    fn eval(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x);
        let cv = g.constant(cond);
        let out = self.forward_graph(&mut g, xv, t, cv)?;
        Ok(g.tensor(out.velocity))
    }
}
