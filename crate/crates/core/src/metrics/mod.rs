//! Evaluation suite: distribution distances, per-frame errors, spectral
//! error and timing, plus the sliding-window protocol for long sequences.

mod frechet;
mod signal;
mod wgd;

use serde::{Deserialize, Serialize};

pub use frechet::{frechet_gaussian, frechet_samples, GaussianFit, COV_EPS};
pub use signal::{amplitude_spectrum, fde, high_bins, pd, rtf, smoothness};
pub use wgd::{gmm_distance, transport, w2_diag, wgd, GmmFit, Pca};

use crate::error::{arg_err, Result};
use crate::midi::MotionSequence;
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub window: usize,
    pub stride: usize,
    pub d_pca: usize,
    pub components: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            window: 240,
            stride: 120,
            d_pca: 8,
            components: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fgd_left: f64,
    pub fgd_right: f64,
    pub wgd_left: f64,
    pub wgd_right: f64,
    pub pd_left: f64,
    pub pd_right: f64,
    pub smooth_left: f64,
    pub smooth_right: f64,
    pub fde_left: f64,
    pub fde_right: f64,
    pub fid: f64,
    /// Present when the prediction was generated in the same run.
    pub rtf: Option<f64>,
    pub windows: usize,
    /// Set when the sequence was shorter than one window.
    pub fallback: bool,
}

/// Window starts for a sequence of `n` frames.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n < window {
        return vec![0];
    }
    (0..=(n - window) / stride).map(|i| i * stride).collect()
}

/// Rows z-scored with the reference's per-column mean and deviation.
fn z_normalize(x: &Tensor, reference: &Tensor) -> Tensor {
    let (n, d) = (reference.rows(), reference.cols());
    let mut out = x.clone();
    for j in 0..d {
        let m = (0..n).map(|i| reference.at(i, j)).sum::<f64>() / n as f64;
        let sd = ((0..n).map(|i| (reference.at(i, j) - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-8 { sd } else { 1.0 };
        for i in 0..x.rows() {
            out.set(i, j, (x.at(i, j) - m) / sd);
        }
    }
    out
}

/// Fréchet distance on z-normalized concatenated wrist and gesture features.
pub fn fid(pred: &MotionSequence, gt: &MotionSequence) -> Result<f64> {
    let p = Tensor::concat_cols(&[&pred.wrists, &pred.gestures])?;
    let g = Tensor::concat_cols(&[&gt.wrists, &gt.gestures])?;
    frechet_samples(&z_normalize(&p, &g), &z_normalize(&g, &g))
}

#[derive(Default)]
struct HandScores {
    fgd: f64,
    wgd: f64,
    pd: f64,
    smooth: f64,
}

fn hand_scores(pred: &MotionSequence, gt: &MotionSequence, hand: usize, opts: &EvalOptions) -> Result<HandScores> {
    let (pg, gg) = (pred.gesture(hand), gt.gesture(hand));
    Ok(HandScores {
        fgd: frechet_samples(&pg, &gg)?,
        wgd: wgd(&pg, &gg, opts.d_pca, opts.components, opts.seed)?,
        pd: pd(&pred.wrist(hand), &gt.wrist(hand))?,
        smooth: smoothness(&pg, &gg)?,
    })
}

/// Per-window FGD, WGD, PD and smoothness averaged over windows; FDE and FID
/// on the whole sequence.
pub fn windowed_eval(pred: &MotionSequence, gt: &MotionSequence, opts: &EvalOptions) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.d_hand() != gt.d_hand() {
        return Err(arg_err!(
            "prediction is {}x{} per hand, ground truth {}x{}",
            pred.len(),
            pred.d_hand(),
            gt.len(),
            gt.d_hand()
        ));
    }
    if opts.window == 0 || opts.stride == 0 {
        return Err(arg_err!("window and stride must be positive"));
    }
    let n = pred.len();
    let fallback = n < opts.window;
    let starts = window_starts(n, opts.window, opts.stride);
    let len = opts.window.min(n);
    let mut acc = [HandScores::default(), HandScores::default()];
    for &s in &starts {
        let (pw, gw) = (pred.slice(s, len)?, gt.slice(s, len)?);
        for (hand, a) in acc.iter_mut().enumerate() {
            let h = hand_scores(&pw, &gw, hand, opts)?;
            a.fgd += h.fgd;
            a.wgd += h.wgd;
            a.pd += h.pd;
            a.smooth += h.smooth;
        }
    }
    let w = starts.len() as f64;
    let [l, r] = acc;
    Ok(MetricReport {
        fgd_left: l.fgd / w,
        fgd_right: r.fgd / w,
        wgd_left: l.wgd / w,
        wgd_right: r.wgd / w,
        pd_left: l.pd / w,
        pd_right: r.pd / w,
        smooth_left: l.smooth / w,
        smooth_right: r.smooth / w,
        fde_left: fde(&pred.gesture(0), &gt.gesture(0))?,
        fde_right: fde(&pred.gesture(1), &gt.gesture(1))?,
        fid: fid(pred, gt)?,
        rtf: None,
        windows: starts.len(),
        fallback,
    })
}
