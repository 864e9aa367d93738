//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is not finite")))
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = f(&mut g, xv)?;
    finite(g.scalar(y), "f(x)")?;
    g.backward(y)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        finite(g.scalar(y), "perturbed f")
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Same check with respect to stored parameters, restricted to the listed
/// `(parameter, flat index)` coordinates.
pub fn grad_check_params<F>(ps: &ParamStore, f: F, coords: &[(ParamId, usize)], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(ps);
    let y = f(&mut g)?;
    finite(g.scalar(y), "f(params)")?;
    g.backward(y)?;
    let grads: Vec<(ParamId, Vec<f64>)> = g
        .param_grads()
        .into_iter()
        .map(|(id, v)| (id, v.to_vec()))
        .collect();
    let analytic = |id: ParamId, i: usize| {
        grads
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, v)| v[i])
    };
    drop(g);

    let mut probe = ps.clone();
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let plus = {
            let mut g = Graph::with_params(&probe);
            let y = f(&mut g)?;
            finite(g.scalar(y), "perturbed f")?
        };
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let minus = {
            let mut g = Graph::with_params(&probe);
            let y = f(&mut g)?;
            finite(g.scalar(y), "perturbed f")?
        };
        probe.get_mut(id).data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic(id, i), (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}
