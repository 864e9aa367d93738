//! Per-frame error metrics and the spectral error.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{arg_err, Result};
use crate::midi::FRAME_RATE;
use crate::numcore::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(arg_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding rows.
pub fn pd(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "pd")?;
    if pred.rows() == 0 {
        return Err(arg_err!("pd of an empty sequence"));
    }
    let s: f64 = (0..pred.rows())
        .map(|n| {
            pred.row(n)
                .iter()
                .zip(gt.row(n))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(s / pred.rows() as f64)
}

/// Mean norm of the difference in second differences.
pub fn smoothness(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "smoothness")?;
    let n = pred.rows();
    if n < 3 {
        return Err(arg_err!("smoothness needs at least 3 frames, got {n}"));
    }
    let mut total = 0.0;
    for i in 1..n - 1 {
        let mut s = 0.0;
        for j in 0..pred.cols() {
            let acc = |x: &Tensor| x.at(i + 1, j) - 2.0 * x.at(i, j) + x.at(i - 1, j);
            s += (acc(pred) - acc(gt)).powi(2);
        }
        total += s.sqrt();
    }
    Ok(total / (n - 2) as f64)
}

/// Frequency bins strictly above 5 Hz up to Nyquist.
pub fn high_bins(n: usize) -> std::ops::RangeInclusive<usize> {
    let fs = FRAME_RATE;
    let first = (0..=n / 2).find(|&k| k as f64 * fs / n as f64 > 5.0).unwrap_or(n / 2 + 1);
    first..=n / 2
}

/// One-sided amplitude spectrum `2|X_k| / N` of each column.
pub fn amplitude_spectrum(x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.rows();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    (0..x.cols())
        .map(|j| {
            let mut buf: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(x.at(i, j), 0.0)).collect();
            fft.process(&mut buf);
            buf[..=n / 2].iter().map(|c| 2.0 * c.norm() / n as f64).collect()
        })
        .collect()
}

/// Mean absolute amplitude difference over bins above 5 Hz and all dims.
pub fn fde(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "fde")?;
    let n = pred.rows();
    if n < 12 {
        return Err(arg_err!("fde needs at least 12 frames, got {n}"));
    }
    let (sp, sg) = (amplitude_spectrum(pred), amplitude_spectrum(gt));
    let bins = high_bins(n);
    let count = bins.clone().count() * pred.cols();
    let mut total = 0.0;
    for (a, b) in sp.iter().zip(&sg) {
        for k in bins.clone() {
            total += (a[k] - b[k]).abs();
        }
    }
    Ok(total / count as f64)
}

/// Wall time over the duration of the generated frames.
pub fn rtf(wall_seconds: f64, n_frames: usize) -> Result<f64> {
    if n_frames == 0 {
        return Err(arg_err!("rtf of zero frames"));
    }
    Ok(wall_seconds / (n_frames as f64 / FRAME_RATE))
}
