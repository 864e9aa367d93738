//! Stage 1: wrist trajectories from acoustic features.
//!
//! Each hand has its own branch. A student encoder reads acoustic features;
//! the teacher adds a cross-attention message from the MIDI features to the
//! student encoding. Both paths share one backbone block and then split into
//! their own decoder and head. Training aligns the student's encoder and
//! decoder features with the teacher's (stop-gradient on the teacher side),
//! so inference needs acoustic features only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::harmonic::{HarmonicConfig, HarmonicPerceiver};
use crate::midi::{Clip, PianoRoll, KEYS};
use crate::numcore::nn::{attention_with_weights, sinusoidal_positions, Linear, TransformerBlock};
use crate::numcore::rng::{self, Rng};
use crate::numcore::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamStore, PlateauScheduler, Tensor, Var};

pub const C_A: usize = 32;
/// Chroma, register histogram, count, count difference.
pub const RAW_ACOUSTIC: usize = 12 + 8 + 2;
const ACOUSTIC_SEED: u64 = 0xac05;
const COS_EPS: f64 = 1e-8;
const TRAIN_STREAM: u64 = 0x51;
const INIT_STREAM: u64 = 0x52;

/// Stand-in for a frozen music encoder's output, `N×C_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeature {
    pub features: Tensor,
}

impl AcousticFeature {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            features: self.features.slice_rows(start, len)?,
        })
    }
}

/// Per-frame 22-dim summary of a roll before projection.
pub fn acoustic_summary(roll: &PianoRoll) -> Tensor {
    let n = roll.len();
    let mut out = Tensor::zeros(&[n, RAW_ACOUSTIC]);
    let mut prev = 0.0;
    for f in 0..n {
        let row = out.row_mut(f);
        let frame = roll.frame(f);
        let mut count = 0.0;
        for (k, &a) in frame.iter().enumerate() {
            row[(21 + k) % 12] += a;
            row[12 + k / 11] += a;
            count += a;
        }
        row[20] = count;
        row[21] = count - prev;
        prev = count;
    }
    out
}

/// The fixed `22×C_a` projection shared by both hands.
pub fn acoustic_projection(c_a: usize) -> Tensor {
    rng::normal(&mut rng::seeded(ACOUSTIC_SEED), &[RAW_ACOUSTIC, c_a]).map(|v| v / (RAW_ACOUSTIC as f64).sqrt())
}

pub fn acoustic_stand_in(roll: &PianoRoll) -> AcousticFeature {
    acoustic_stand_in_with(roll, C_A)
}

pub fn acoustic_stand_in_with(roll: &PianoRoll, c_a: usize) -> AcousticFeature {
    let raw = acoustic_summary(roll);
    let mut g = Graph::new();
    let x = g.constant(&raw);
    let p = g.constant(&acoustic_projection(c_a));
    let y = g.matmul(x, p).expect("summary width matches projection");
    AcousticFeature { features: g.tensor(y) }
}

/// Linear warm-up of the distillation weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub final_weight: f64,
    pub ramp: f64,
    pub total_steps: usize,
}

impl DistillSchedule {
    pub fn weight(&self, step: usize) -> f64 {
        let ramp_steps = self.ramp * self.total_steps as f64;
        if ramp_steps <= 0.0 {
            return self.final_weight;
        }
        self.final_weight * (step as f64 / ramp_steps).clamp(0.0, 1.0)
    }
}

pub const LAMBDA_TAU: f64 = 1.0;
pub const LAMBDA_VEL: f64 = 3.0;

pub fn total_loss(task_sigma: f64, task_tau: f64, align: f64, distill_weight: f64) -> f64 {
    task_sigma + LAMBDA_TAU * task_tau + distill_weight * align
}

/// `Σ_layers mean_frames (1 − cos)` with the teacher side detached.
pub fn align_loss_graph(g: &mut Graph, student: &[Var], teacher: &[Var]) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(dim_err!("align_loss: {} student vs {} teacher layers", student.len(), teacher.len()));
    }
    let mut total: Option<Var> = None;
    for (&s, &t) in student.iter().zip(teacher) {
        if g.shape(s) != g.shape(t) {
            return Err(dim_err!("align_loss: {:?} vs {:?}", g.shape(s), g.shape(t)));
        }
        let t = g.detach(t);
        let st = g.mul(s, t)?;
        let dot = g.sum_cols(st)?;
        let ss = g.mul(s, s)?;
        let ss = g.sum_cols(ss)?;
        let ss = g.add_scalar(ss, COS_EPS * COS_EPS)?;
        let ns = g.sqrt(ss)?;
        let tt = g.mul(t, t)?;
        let tt = g.sum_cols(tt)?;
        let nt = g.sqrt(tt)?;
        let denom = g.mul(ns, nt)?;
        let denom = g.add_scalar(denom, COS_EPS)?;
        let cos = g.div(dot, denom)?;
        let mean_cos = g.mean(cos)?;
        let term = g.scale(mean_cos, -1.0)?;
        let term = g.add_scalar(term, 1.0)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

pub fn align_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let s: Vec<Var> = student.iter().map(|t| g.input(t)).collect();
    let t: Vec<Var> = teacher.iter().map(|t| g.input(t)).collect();
    let l = align_loss_graph(&mut g, &s, &t)?;
    Ok(g.scalar(l))
}

/// `L_rec + λ_vel L_vel` for one hand and branch.
pub fn task_loss_graph(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let (n, c) = g.shape(pred);
    if g.shape(gt) != (n, c) {
        return Err(dim_err!("task_loss: {:?} vs {:?}", (n, c), g.shape(gt)));
    }
    if n < 2 {
        return Err(arg_err!("task_loss needs at least 2 frames for the velocity term, got {n}"));
    }
    let diff = g.sub(pred, gt)?;
    let sq = g.mul(diff, diff)?;
    let rec = g.sum(sq)?;
    let rec = g.scale(rec, 1.0 / n as f64)?;
    let later = g.slice_rows(diff, 1, n - 1)?;
    let earlier = g.slice_rows(diff, 0, n - 1)?;
    let dv = g.sub(later, earlier)?;
    let sq = g.mul(dv, dv)?;
    let vel = g.sum(sq)?;
    let vel = g.scale(vel, LAMBDA_VEL / (n - 1) as f64)?;
    g.add(rec, vel)
}

pub fn task_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred);
    let t = g.constant(gt);
    let l = task_loss_graph(&mut g, p, t)?;
    Ok(g.scalar(l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub c_a: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub harmonic: HarmonicConfig,
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub distill_weight: f64,
    pub distill_ramp: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            c_a: C_A,
            width: 64,
            enc_layers: 2,
            harmonic: HarmonicConfig::default(),
            steps: 300,
            batch: 4,
            crop_frames: 120,
            lr: 2e-3,
            weight_decay: 0.01,
            patience: 10,
            distill_weight: 0.1,
            distill_ramp: 0.2,
        }
    }
}

/// One hand's student and teacher paths.
#[derive(Debug, Clone)]
pub struct Stage1Branch {
    pub enc_in: Linear,
    pub enc_blocks: Vec<TransformerBlock>,
    pub fuse_q: Linear,
    pub fuse_k: Linear,
    pub fuse_v: Linear,
    pub backbone: TransformerBlock,
    pub dec_student: TransformerBlock,
    pub dec_teacher: TransformerBlock,
    pub head_student: Linear,
    pub head_teacher: Linear,
}

/// Intermediate features of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    pub enc_student: Var,
    pub dec_student: Var,
    pub wrist_student: Var,
    pub enc_teacher: Var,
    pub dec_teacher: Var,
    pub wrist_teacher: Var,
}

impl Stage1Branch {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &Stage1Config, rng: &mut Rng) -> Self {
        let c = cfg.width;
        let ff = 2 * c;
        Self {
            enc_in: Linear::new(ps, &format!("{prefix}.enc.in"), cfg.c_a, c, true, rng),
            enc_blocks: (0..cfg.enc_layers)
                .map(|i| TransformerBlock::new(ps, &format!("{prefix}.enc.{i}"), c, ff, rng))
                .collect(),
            fuse_q: Linear::new(ps, &format!("{prefix}.fuse.q"), c, c, false, rng),
            fuse_k: Linear::new(ps, &format!("{prefix}.fuse.k"), cfg.harmonic.c_mid, c, false, rng),
            fuse_v: Linear::new(ps, &format!("{prefix}.fuse.v"), cfg.harmonic.c_mid, c, false, rng),
            backbone: TransformerBlock::new(ps, &format!("{prefix}.backbone"), c, ff, rng),
            dec_student: TransformerBlock::new(ps, &format!("{prefix}.dec.student"), c, ff, rng),
            dec_teacher: TransformerBlock::new(ps, &format!("{prefix}.dec.teacher"), c, ff, rng),
            head_student: Linear::scaled(ps, &format!("{prefix}.head.student"), c, 3, true, 0.1, rng),
            head_teacher: Linear::scaled(ps, &format!("{prefix}.head.teacher"), c, 3, true, 0.1, rng),
        }
    }

    /// `F_σ^enc` from `[N, C_a]` acoustic features.
    pub fn encode_student(&self, g: &mut Graph, audio: Var) -> Result<Var> {
        let (n, _) = g.shape(audio);
        let h = self.enc_in.forward(g, audio)?;
        let pos = g.constant(&sinusoidal_positions(n, self.enc_in.d_out));
        let mut h = g.add(h, pos)?;
        for b in &self.enc_blocks {
            h = b.forward(g, h, 1)?;
        }
        Ok(h)
    }

    /// `F_τ^enc = F_σ^enc + softmax(Q Kᵀ/√d_m) V` with acoustic queries and
    /// MIDI keys and values.
    pub fn teacher_fuse(&self, g: &mut Graph, enc_student: Var, midi: Var) -> Result<Var> {
        let (ns, nm) = (g.shape(enc_student).0, g.shape(midi).0);
        if ns != nm {
            return Err(dim_err!("teacher_fuse: {ns} acoustic frames vs {nm} MIDI frames"));
        }
        let q = self.fuse_q.forward(g, enc_student)?;
        let k = self.fuse_k.forward(g, midi)?;
        let v = self.fuse_v.forward(g, midi)?;
        let (msg, _) = attention_with_weights(g, q, k, v, 1)?;
        g.add(enc_student, msg)
    }

    pub fn student(&self, g: &mut Graph, audio: Var) -> Result<(Var, Var, Var)> {
        let enc = self.encode_student(g, audio)?;
        let b = self.backbone.forward(g, enc, 1)?;
        let dec = self.dec_student.forward(g, b, 1)?;
        let wrist = self.head_student.forward(g, dec)?;
        Ok((enc, dec, wrist))
    }

    pub fn forward(&self, g: &mut Graph, audio: Var, midi: Var) -> Result<BranchOutputs> {
        let (enc_student, dec_student, wrist_student) = self.student(g, audio)?;
        let enc_teacher = self.teacher_fuse(g, enc_student, midi)?;
        let b = self.backbone.forward(g, enc_teacher, 1)?;
        let dec_teacher = self.dec_teacher.forward(g, b, 1)?;
        let wrist_teacher = self.head_teacher.forward(g, dec_teacher)?;
        Ok(BranchOutputs {
            enc_student,
            dec_student,
            wrist_student,
            enc_teacher,
            dec_teacher,
            wrist_teacher,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub student_task: f64,
    pub teacher_task: f64,
    pub align: f64,
    pub lr: f64,
}

/// Both hands' branches plus the shared MIDI encoder.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub params: ParamStore,
    pub perceiver: HarmonicPerceiver,
    pub branches: [Stage1Branch; 2],
    trained: bool,
}

/// Student outputs used downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    /// `F_σ^enc` per hand, `N×C`.
    pub enc: [Tensor; 2],
    /// `N×6`, left xyz then right xyz.
    pub wrists: Tensor,
}

impl Stage1Model {
    pub fn new(config: Stage1Config, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng::stream(seed, INIT_STREAM);
        let perceiver = HarmonicPerceiver::new(&mut ps, "stage1.midi", config.harmonic.clone(), &mut r);
        let left = Stage1Branch::new(&mut ps, "stage1.left", &config, &mut r);
        let right = Stage1Branch::new(&mut ps, "stage1.right", &config, &mut r);
        Self {
            config,
            params: ps,
            perceiver,
            branches: [left, right],
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if !self.trained {
            return Err(Error::State("refusing to save an untrained stage-1 model".into()));
        }
        self.params.save(path)
    }

    pub fn load(config: Stage1Config, path: impl AsRef<Path>) -> Result<Self> {
        let store = ParamStore::load(path)?;
        Self::from_params(config, &store)
    }

    pub fn from_params(config: Stage1Config, store: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0);
        let problems = model.params.load_from(store);
        if !problems.is_empty() {
            return Err(Error::Format(format!("stage-1 checkpoint mismatch: {}", problems.join(", "))));
        }
        model.trained = true;
        Ok(model)
    }

    /// Student-only inference; needs no MIDI.
    pub fn student_outputs(&self, audio: &AcousticFeature) -> Result<StudentOutput> {
        if !self.trained {
            return Err(Error::State("stage-1 model has not been trained or loaded".into()));
        }
        if audio.features.cols() != self.config.c_a {
            return Err(dim_err!("expected {} acoustic dims, got {}", self.config.c_a, audio.features.cols()));
        }
        let mut g = Graph::with_params(&self.params);
        let a = g.constant(&audio.features);
        let mut enc = Vec::new();
        let mut wrists = Vec::new();
        for b in &self.branches {
            let (e, _, w) = b.student(&mut g, a)?;
            enc.push(g.tensor(e));
            wrists.push(g.tensor(w));
        }
        let wrists = Tensor::concat_cols(&[&wrists[0], &wrists[1]])?;
        let [l, r]: [Tensor; 2] = enc.try_into().expect("two hands");
        Ok(StudentOutput { enc: [l, r], wrists })
    }

    pub fn predict_wrists(&self, audio: &AcousticFeature) -> Result<Tensor> {
        Ok(self.student_outputs(audio)?.wrists)
    }

    /// Loss of one example on `g`, returning the loss var and its parts.
    fn example_loss(&self, g: &mut Graph, ex: &Example, distill: f64) -> Result<(Var, [f64; 3])> {
        let audio = g.constant(&ex.audio);
        let roll = g.constant(&ex.roll);
        let midi = self.perceiver.forward(g, roll)?;
        let mut total: Option<Var> = None;
        let mut parts = [0.0; 3];
        for (hand, b) in self.branches.iter().enumerate() {
            let o = b.forward(g, audio, midi)?;
            let gt = g.constant(&ex.wrists.slice_cols(3 * hand, 3)?);
            let ls = task_loss_graph(g, o.wrist_student, gt)?;
            let lt = task_loss_graph(g, o.wrist_teacher, gt)?;
            let la = align_loss_graph(g, &[o.enc_student, o.dec_student], &[o.enc_teacher, o.dec_teacher])?;
            parts[0] += g.scalar(ls);
            parts[1] += g.scalar(lt);
            parts[2] += g.scalar(la);
            let lt = g.scale(lt, LAMBDA_TAU)?;
            let la = g.scale(la, distill)?;
            let l = g.add(ls, lt)?;
            let l = g.add(l, la)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        Ok((total.expect("two hands"), parts))
    }

    /// Gradient of the full training loss on one example, for checks.
    pub fn loss_on(&self, g: &mut Graph<'_>, clip: &Clip, distill: f64) -> Result<Var> {
        let ex = Example::from_clip(clip, self.config.c_a);
        self.example_loss(g, &ex, distill).map(|(v, _)| v)
    }
}

struct Example {
    audio: Tensor,
    roll: Tensor,
    wrists: Tensor,
}

impl Example {
    fn from_clip(clip: &Clip, c_a: usize) -> Self {
        Self {
            audio: acoustic_stand_in_with(&clip.roll, c_a).features,
            roll: clip.roll.frames().clone(),
            wrists: clip.motion.wrists.clone(),
        }
    }

    fn crop(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            audio: self.audio.slice_rows(start, len)?,
            roll: self.roll.slice_rows(start, len)?,
            wrists: self.wrists.slice_rows(start, len)?,
        })
    }
}

/// Random crops of random clips, shared by both stages.
pub(crate) fn sample_batch(r: &mut Rng, lens: &[usize], batch: usize, crop: usize) -> Vec<(usize, usize, usize)> {
    use rand::Rng as _;
    (0..batch)
        .map(|_| {
            let i = r.random_range(0..lens.len());
            let len = crop.min(lens[i]);
            let start = r.random_range(0..=lens[i] - len);
            (i, start, len)
        })
        .collect()
}

pub fn validate(cfg: &Stage1Config) -> Result<()> {
    let mut problems = Vec::new();
    for (name, v) in [
        ("c_a", cfg.c_a),
        ("width", cfg.width),
        ("steps", cfg.steps),
        ("batch", cfg.batch),
        ("harmonic.channels", cfg.harmonic.channels),
        ("harmonic.d_p", cfg.harmonic.d_p),
        ("harmonic.queries", cfg.harmonic.queries),
        ("harmonic.c_mid", cfg.harmonic.c_mid),
    ] {
        if v == 0 {
            problems.push(format!("stage1.{name} must be positive"));
        }
    }
    if cfg.crop_frames < 2 {
        problems.push("stage1.crop_frames must be at least 2".into());
    }
    if !(cfg.lr > 0.0) {
        problems.push("stage1.lr must be positive".into());
    }
    if !(cfg.distill_ramp > 0.0 && cfg.distill_ramp <= 1.0) {
        problems.push("stage1.distill_ramp must lie in (0, 1]".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

/// Trains both hands' branches with AdamW and a per-epoch plateau schedule.
pub fn train_stage1(clips: &[Clip], config: &Stage1Config, seed: u64) -> Result<(Stage1Model, Vec<LossRecord>)> {
    validate(config)?;
    if clips.is_empty() {
        return Err(arg_err!("stage-1 training needs at least one clip"));
    }
    if clips.iter().any(|c| c.roll.len() < 2 || c.roll.frames().cols() != KEYS) {
        return Err(arg_err!("every training clip needs at least 2 frames"));
    }
    let mut model = Stage1Model::new(config.clone(), seed);
    let examples: Vec<Example> = clips.iter().map(|c| Example::from_clip(c, config.c_a)).collect();
    let lens: Vec<usize> = examples.iter().map(|e| e.audio.rows()).collect();
    let schedule = DistillSchedule {
        final_weight: config.distill_weight,
        ramp: config.distill_ramp,
        total_steps: config.steps,
    };
    let adam = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&model.params, adam)?;
    let mut plateau = PlateauScheduler::new(config.lr, config.patience);
    let steps_per_epoch = clips.len().div_ceil(config.batch);
    let mut r = rng::stream(seed, TRAIN_STREAM);
    let mut history = Vec::with_capacity(config.steps);
    let mut epoch_loss = 0.0;

    for step in 0..config.steps {
        let distill = schedule.weight(step);
        let mut grads = model.params.zero_grads();
        let mut rec = LossRecord {
            step,
            total: 0.0,
            student_task: 0.0,
            teacher_task: 0.0,
            align: 0.0,
            lr: opt.lr(),
        };
        let scale = 1.0 / config.batch as f64;
        for (i, start, len) in sample_batch(&mut r, &lens, config.batch, config.crop_frames) {
            let ex = examples[i].crop(start, len)?;
            let mut g = Graph::with_params(&model.params);
            let (loss, parts) = model.example_loss(&mut g, &ex, distill)?;
            let loss = g.scale(loss, scale)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("stage-1 loss became {value} at step {step}")));
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut grads);
            rec.total += value;
            rec.student_task += parts[0] * scale;
            rec.teacher_task += parts[1] * scale;
            rec.align += parts[2] * scale;
        }
        adamw_step(&mut model.params, &grads, &mut opt)?;
        log::debug!(
            "stage1 step {step}: total {:.5} student {:.5} teacher {:.5} align {:.5}",
            rec.total,
            rec.student_task,
            rec.teacher_task,
            rec.align
        );
        history.push(rec);
        epoch_loss += rec.total;
        if (step + 1) % steps_per_epoch == 0 {
            let lr = plateau.step(epoch_loss / steps_per_epoch as f64);
            opt.set_lr(lr);
            epoch_loss = 0.0;
        }
    }
    model.params.round_to_f32();
    model.trained = true;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distill_schedule_ramps_then_clamps() {
        let s = DistillSchedule {
            final_weight: 0.1,
            ramp: 0.2,
            total_steps: 100,
        };
        assert_eq!(s.weight(0), 0.0);
        assert!((s.weight(10) - 0.05).abs() < 1e-15);
        assert_eq!(s.weight(20), 0.1);
        assert_eq!(s.weight(1000), 0.1);
        let mut last = 0.0;
        for step in 0..200 {
            let w = s.weight(step);
            assert!(w >= last && (0.0..=0.1).contains(&w));
            last = w;
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 2.0, 4.0, 0.1) - 3.4).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 2.0, 4.0, 0.0), 3.0);
    }

    #[test]
    fn acoustic_chroma_of_middle_c() {
        let mut roll = PianoRoll::zeros(2);
        roll.set(1, 39, true);
        let raw = acoustic_summary(&roll);
        assert_eq!(raw.at(1, 0), 1.0);
        assert_eq!(raw.at(1, 12 + 39 / 11), 1.0);
        assert_eq!((raw.at(1, 20), raw.at(1, 21)), (1.0, 1.0));
        assert_eq!(raw.row(0).iter().sum::<f64>(), 0.0);
        let f = acoustic_stand_in(&PianoRoll::zeros(3));
        assert!(f.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_refuses_inference() {
        let model = Stage1Model::new(Stage1Config::default(), 0);
        let audio = acoustic_stand_in(&PianoRoll::zeros(4));
        assert!(matches!(model.predict_wrists(&audio), Err(Error::State(_))));
    }
}
