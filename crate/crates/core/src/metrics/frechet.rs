//! Gaussian fits and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{arg_err, Error, Result};
use crate::numcore::Tensor;

pub const COV_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    /// Sample mean and unbiased covariance of the rows, plus `COV_EPS·I`.
    pub fn fit(samples: &Tensor) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        if n == 0 || d == 0 {
            return Err(arg_err!("cannot fit a Gaussian to {n}x{d} samples"));
        }
        let x = DMatrix::from_row_slice(n, d, samples.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = centered.transpose() * &centered / denom;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..d {
            cov[(i, i)] += COV_EPS;
        }
        Ok(Self { mean, cov })
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(arg_err!("covariance has {} entries for dimension {d}", cov.len()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const NEG_TOL: f64 = -1e-8;

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < NEG_TOL {
            return Err(Error::Numerical(format!("covariance eigenvalue {v} is negative")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A^½ Σ_B Σ_A^½)^½)`.
pub fn frechet_gaussian(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(arg_err!("Fréchet distance between dimensions {} and {}", a.dim(), b.dim()));
    }
    let diff = &a.mean - &b.mean;
    let sa = sqrt_psd(&a.cov)?;
    let inner = &sa * &b.cov * &sa;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < NEG_TOL {
            return Err(Error::Numerical(format!("product eigenvalue {v} is negative")));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_samples(a: &Tensor, b: &Tensor) -> Result<f64> {
    frechet_gaussian(&GaussianFit::fit(a)?, &GaussianFit::fit(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_forms() {
        let g = |m: f64, v: f64| GaussianFit::new(vec![m], vec![v]).unwrap();
        assert!(frechet_gaussian(&g(0.0, 1.0), &g(0.0, 1.0)).unwrap().abs() < 1e-8);
        assert!((frechet_gaussian(&g(0.0, 1.0), &g(2.0, 1.0)).unwrap() - 4.0).abs() < 1e-8);
        assert!((frechet_gaussian(&g(0.0, 1.0), &g(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn shifted_identity_in_higher_dimension() {
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let a = GaussianFit::new(vec![0.0; 3], eye.clone()).unwrap();
        let b = GaussianFit::new(vec![1.0, -2.0, 0.5], eye).unwrap();
        assert!((frechet_gaussian(&a, &b).unwrap() - 5.25).abs() < 1e-8);
    }

    #[test]
    fn rejects_mismatch_and_indefinite() {
        let a = GaussianFit::new(vec![0.0], vec![1.0]).unwrap();
        let b = GaussianFit::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(frechet_gaussian(&a, &b).is_err());
        let bad = GaussianFit::new(vec![0.0], vec![-1.0]).unwrap();
        assert!(matches!(frechet_gaussian(&bad, &a), Err(Error::Numerical(_))));
    }
}
