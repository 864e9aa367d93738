//! Stage 2: conditional flow matching over both hands' gesture vectors.
//!
//! Noise `x_0 ~ N(0, I)` flows to data `x_1` along `x_t = (1 - t) x_0 + t x_1`
//! with target velocity `x_1 - x_0`. Sampling integrates the learnt field
//! from `t = 0` to `t = 1` with Heun's method.

mod argi;
mod net;

use std::path::Path;

pub use argi::{Argi, ArgiOutput};
pub use net::{FilmBlock, FlowConfig, HandStream, NetOutputs, VelocityNet};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::midi::{Clip, PianoRoll};
use crate::numcore::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState, PlateauScheduler};
use crate::numcore::rng::{self, Rng};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::stage1::{acoustic_stand_in_with, sample_batch, AcousticFeature, Stage1Model, StudentOutput};

const TRAIN_STREAM: u64 = 0x53;

/// Anything that maps `(x_t, t, c)` to a velocity of the same shape as `x_t`.
pub trait VelocityField {
    fn eval(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn eval(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        (**self).eval(x, t, cond)
    }
}

/// Point and target velocity on the straight path at time `t`.
pub fn path_point(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(arg_err!("path time must lie in [0, 1], got {t}"));
    }
    let xt = x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?;
    let u = x0.zip_map(x1, |a, b| b - a)?;
    Ok((xt, u))
}

/// One batch element's noise and time.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmDraw {
    pub x0: Tensor,
    pub t: f64,
}

/// Draws `(x_0, t)` for each target, in order: noise first, then time.
pub fn draw_cfm(r: &mut Rng, targets: &[&Tensor]) -> Vec<CfmDraw> {
    use rand::Rng as _;
    targets
        .iter()
        .map(|x1| {
            let x0 = rng::normal(r, x1.shape());
            let t = r.random::<f64>();
            CfmDraw { x0, t }
        })
        .collect()
}

/// Mean squared velocity error over every batch element and coordinate.
pub fn cfm_loss<F: VelocityField>(field: &F, batch: &[(Tensor, Tensor)], draws: &[CfmDraw]) -> Result<f64> {
    if batch.len() != draws.len() || batch.is_empty() {
        return Err(arg_err!("cfm loss: {} targets for {} draws", batch.len(), draws.len()));
    }
    let mut total = 0.0;
    for ((x1, cond), d) in batch.iter().zip(draws) {
        let (xt, u) = path_point(&d.x0, x1, d.t)?;
        let v = field.eval(&xt, d.t, cond)?;
        if v.shape() != u.shape() {
            return Err(dim_err!("velocity {:?} vs target {:?}", v.shape(), u.shape()));
        }
        let se: f64 = v.data().iter().zip(u.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += se / u.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// As [`cfm_loss`], drawing fresh noise and times from `r`.
pub fn cfm_loss_sampled<F: VelocityField>(
    field: &F,
    batch: &[(Tensor, Tensor)],
    r: &mut Rng,
) -> Result<(f64, Vec<CfmDraw>)> {
    let targets: Vec<&Tensor> = batch.iter().map(|(x1, _)| x1).collect();
    let draws = draw_cfm(r, &targets);
    Ok((cfm_loss(field, batch, &draws)?, draws))
}

/// Differentiable per-element CFM loss for the network.
pub fn cfm_loss_graph(net: &VelocityNet, g: &mut Graph, x1: &Tensor, cond: &Tensor, draw: &CfmDraw) -> Result<Var> {
    let (xt, u) = path_point(&draw.x0, x1, draw.t)?;
    let xv = g.constant(&xt);
    let cv = g.constant(cond);
    let out = net.forward_graph(g, xv, draw.t, cv)?;
    let u = g.constant(&u);
    let diff = g.sub(out.velocity, u)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

fn ensure_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("sampler produced non-finite values at step {step}")))
    }
}

/// One Heun step from `t` to `t + dt`.
pub fn heun_step<F: VelocityField>(field: &F, x: &Tensor, t: f64, dt: f64, cond: &Tensor) -> Result<Tensor> {
    let k1 = field.eval(x, t, cond)?;
    let pred = x.zip_map(&k1, |a, b| a + dt * b)?;
    let k2 = field.eval(&pred, t + dt, cond)?;
    let avg = k1.zip_map(&k2, |a, b| 0.5 * (a + b))?;
    x.zip_map(&avg, |a, b| a + dt * b)
}

/// Integrates from `x0` at `t = 0` to `t = 1` in `n_steps` Heun steps.
pub fn heun_integrate<F: VelocityField>(field: &F, x0: &Tensor, cond: &Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(arg_err!("sampler needs at least one step"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for i in 0..n_steps {
        x = heun_step(field, &x, i as f64 * dt, dt, cond)?;
        ensure_finite(&x, i)?;
    }
    Ok(x)
}

/// Draws `x_0 ~ N(0, I)` of shape `[n, d]` from `r` and integrates it.
pub fn heun_sample<F: VelocityField>(
    field: &F,
    cond: &Tensor,
    n: usize,
    d: usize,
    n_steps: usize,
    r: &mut Rng,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(arg_err!("sampler needs at least one step"));
    }
    let x0 = rng::normal(r, &[n, d]);
    heun_integrate(field, &x0, cond, n_steps)
}

/// Both hands' raw conditions side by side: for each hand, the acoustic
/// features, that hand's stage-1 encoding and both predicted wrists.
pub fn raw_condition(audio: &AcousticFeature, student: &StudentOutput) -> Result<Tensor> {
    let n = audio.features.rows();
    for t in student.enc.iter().chain([&student.wrists]) {
        if t.rows() != n {
            return Err(dim_err!("condition parts have {} and {n} frames", t.rows()));
        }
    }
    let left = Tensor::concat_cols(&[&audio.features, &student.enc[0], &student.wrists])?;
    let right = Tensor::concat_cols(&[&audio.features, &student.enc[1], &student.wrists])?;
    Tensor::concat_cols(&[&left, &right])
}

/// Runs the frozen stage-1 student on a roll's acoustic stand-in.
pub fn condition_from_roll(stage1: &Stage1Model, roll: &PianoRoll) -> Result<Tensor> {
    let audio = acoustic_stand_in_with(roll, stage1.config.c_a);
    let student = stage1.student_outputs(&audio)?;
    raw_condition(&audio, &student)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CfmRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Per-dimension standardization of gesture vectors; the flow runs in the
/// standardized space.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const SCALE_MEAN: &str = "stage2.scale.mean";
const SCALE_STD: &str = "stage2.scale.std";
const STD_FLOOR: f64 = 1e-3;

impl GestureScale {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Statistics over every frame of every sequence.
    pub fn fit(seqs: &[&Tensor]) -> Result<Self> {
        let d = seqs.first().map_or(0, |t| t.cols());
        let n: usize = seqs.iter().map(|t| t.rows()).sum();
        if n == 0 || seqs.iter().any(|t| t.cols() != d) {
            return Err(arg_err!("gesture statistics need equally wide, non-empty sequences"));
        }
        let mut mean = vec![0.0; d];
        for t in seqs {
            for i in 0..t.rows() {
                t.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for t in seqs {
            for i in 0..t.rows() {
                for (j, v) in t.row(i).iter().enumerate() {
                    var[j] += (v - mean[j]).powi(2);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        let mut s = Self { mean, std };
        s.round_to_f32();
        Ok(s)
    }

    fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(dim_err!("gesture width {} vs scale width {}", x.cols(), self.mean.len()));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}

/// A trained stage-2 network and its gesture standardization.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub net: VelocityNet,
    pub scale: GestureScale,
    trained: bool,
}

impl Stage2Model {
    pub fn untrained(config: FlowConfig, seed: u64) -> Result<Self> {
        let d = 2 * config.d_hand;
        Ok(Self {
            net: VelocityNet::new(config, seed)?,
            scale: GestureScale::identity(d),
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn dims(&self) -> usize {
        2 * self.net.config.d_hand
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if !self.trained {
            return Err(Error::State("refusing to save an untrained stage-2 model".into()));
        }
        let mut store = self.net.params.clone();
        let d = self.scale.mean.len();
        store.add(SCALE_MEAN, Tensor::new(&[1, d], self.scale.mean.clone())?);
        store.add(SCALE_STD, Tensor::new(&[1, d], self.scale.std.clone())?);
        store.save(path)
    }

    pub fn load(config: FlowConfig, path: impl AsRef<Path>) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let d = 2 * config.d_hand;
        let read = |name: &str| match store.by_name(name) {
            Some(t) if t.len() == d => Ok(t.data().to_vec()),
            _ => Err(Error::Format(format!("stage-2 checkpoint lacks {name} of width {d}"))),
        };
        let scale = GestureScale {
            mean: read(SCALE_MEAN)?,
            std: read(SCALE_STD)?,
        };
        Ok(Self {
            net: VelocityNet::from_params(config, &store)?,
            scale,
            trained: true,
        })
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("stage-2 model has not been trained or loaded".into()))
        }
    }

    /// Samples `[n, 2·d_hand]` gestures for a raw condition, in data units.
    pub fn sample(&self, cond: &Tensor, r: &mut Rng) -> Result<Tensor> {
        self.require_trained()?;
        let cfg = &self.net.config;
        let x = heun_sample(&self.net, cond, cond.rows(), self.dims(), cfg.n_steps, r)?;
        self.scale.denormalize(&x)
    }
}

/// The field acts on standardized gestures; map results back with
/// [`GestureScale::denormalize`].
impl VelocityField for Stage2Model {
    fn eval(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        self.require_trained()?;
        self.net.eval(x, t, cond)
    }
}

/// Trains the velocity field on gestures conditioned by a frozen stage 1.
pub fn train_stage2(
    clips: &[Clip],
    stage1: &Stage1Model,
    config: &FlowConfig,
    seed: u64,
) -> Result<(Stage2Model, Vec<CfmRecord>)> {
    config.validate()?;
    if !stage1.is_trained() {
        return Err(Error::State("stage 2 needs a trained stage-1 model".into()));
    }
    let mut problems = Vec::new();
    if config.c_a != stage1.config.c_a {
        problems.push(format!("stage2.c_a {} != stage1.c_a {}", config.c_a, stage1.config.c_a));
    }
    if config.enc_width != stage1.config.width {
        problems.push(format!(
            "stage2.enc_width {} != stage1.width {}",
            config.enc_width, stage1.config.width
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if clips.is_empty() {
        return Err(arg_err!("stage-2 training needs at least one clip"));
    }
    let mut data: Vec<(Tensor, Tensor)> = Vec::with_capacity(clips.len());
    for c in clips {
        if c.motion.d_hand() != config.d_hand {
            return Err(dim_err!("clip gestures have {} dims per hand, config {}", c.motion.d_hand(), config.d_hand));
        }
        if c.roll.len() < config.crop_frames.min(3) {
            return Err(arg_err!("clip of {} frames is too short", c.roll.len()));
        }
        data.push((c.motion.gestures.clone(), condition_from_roll(stage1, &c.roll)?));
    }
    let lens: Vec<usize> = data.iter().map(|(x, _)| x.rows()).collect();
    let scale = GestureScale::fit(&data.iter().map(|(x, _)| x).collect::<Vec<_>>())?;
    for (x, _) in data.iter_mut() {
        *x = scale.normalize(x)?;
    }

    let mut model = Stage2Model::untrained(config.clone(), seed)?;
    model.scale = scale;
    let adam = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&model.net.params, adam)?;
    let mut plateau = PlateauScheduler::new(config.lr, config.patience);
    let steps_per_epoch = clips.len().div_ceil(config.batch);
    let mut r = rng::stream(seed, TRAIN_STREAM);
    let mut history = Vec::with_capacity(config.steps);
    let mut epoch_loss = 0.0;
    let scale = 1.0 / config.batch as f64;

    for step in 0..config.steps {
        let picks = sample_batch(&mut r, &lens, config.batch, config.crop_frames);
        let batch = picks
            .iter()
            .map(|&(i, start, len)| Ok((data[i].0.slice_rows(start, len)?, data[i].1.slice_rows(start, len)?)))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<&Tensor> = batch.iter().map(|(x, _)| x).collect();
        let draws = draw_cfm(&mut r, &targets);
        let mut grads = model.net.params.zero_grads();
        let mut total = 0.0;
        for ((x1, cond), d) in batch.iter().zip(&draws) {
            let mut g = Graph::with_params(&model.net.params);
            let loss = cfm_loss_graph(&model.net, &mut g, x1, cond, d)?;
            let loss = g.scale(loss, scale)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("stage-2 loss became {value} at step {step}")));
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut grads);
            total += value;
        }
        let lr = opt.lr();
        clip_grad_norm(&mut grads, config.grad_clip);
        adamw_step(&mut model.net.params, &grads, &mut opt)?;
        log::debug!("stage2 step {step}: cfm {total:.5} lr {lr:.2e}");
        history.push(CfmRecord { step, loss: total, lr });
        epoch_loss += total;
        if (step + 1) % steps_per_epoch == 0 {
            opt.set_lr(plateau.step(epoch_loss / steps_per_epoch as f64));
            epoch_loss = 0.0;
        }
    }
    model.net.params.round_to_f32();
    model.trained = true;
    Ok((model, history))
}
