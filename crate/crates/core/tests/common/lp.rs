//! Exhaustive transportation-problem oracle.

use nalgebra::{DMatrix, DVector};

/// Minimum cost over every basic feasible solution, found by solving each
/// `m + n - 1` cell subset and keeping the nonnegative ones.
pub fn brute_force_transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let basis = m + n - 1;
    let mut best = f64::INFINITY;
    let rhs = DVector::from_iterator(m + n, a.iter().chain(b).cloned());
    for mask in 0u32..(1 << cells.len()) {
        if mask.count_ones() as usize != basis {
            continue;
        }
        let chosen: Vec<(usize, usize)> = (0..cells.len()).filter(|&c| mask >> c & 1 == 1).map(|c| cells[c]).collect();
        let mut sys = DMatrix::zeros(m + n, basis);
        for (k, &(i, j)) in chosen.iter().enumerate() {
            sys[(i, k)] = 1.0;
            sys[(m + j, k)] = 1.0;
        }
        let svd = sys.clone().svd(true, true);
        if svd.singular_values.iter().filter(|&&s| s > 1e-10).count() < basis {
            continue;
        }
        let x = svd.solve(&rhs, 1e-12).unwrap();
        if (&sys * &x - &rhs).abs().max() > 1e-10 || x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let c: f64 = chosen.iter().zip(x.iter()).map(|(&(i, j), &v)| v * cost[i][j]).sum();
        best = best.min(c);
    }
    best
}
