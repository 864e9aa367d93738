//! PCA, diagonal Gaussian mixtures, and exact discrete optimal transport.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;

use crate::error::{arg_err, Error, Result};
use crate::numcore::rng;
use crate::numcore::Tensor;

const VAR_FLOOR: f64 = 1e-6;
const EM_ITERS: usize = 100;
const KMEANS_ITERS: usize = 20;

/// Principal axes of a sample set, largest variance first.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `d × d_pca`, orthonormal columns.
    pub basis: DMatrix<f64>,
}

impl Pca {
    pub fn fit(samples: &Tensor, d_pca: usize) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        if n < 2 || d_pca == 0 {
            return Err(arg_err!("PCA needs at least 2 samples and 1 component"));
        }
        let x = DMatrix::from_row_slice(n, d, samples.data());
        let mean = x.row_mean().transpose();
        let mut c = x;
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = c.transpose() * &c / (n - 1) as f64;
        let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let k = d_pca.min(d);
        let mut basis = DMatrix::zeros(d, k);
        for (col, &i) in order.iter().take(k).enumerate() {
            basis.set_column(col, &eig.eigenvectors.column(i));
        }
        Ok(Self { mean, basis })
    }

    pub fn project(&self, samples: &Tensor) -> Tensor {
        let (n, d) = (samples.rows(), samples.cols());
        let mut x = DMatrix::from_row_slice(n, d, samples.data());
        for mut row in x.row_iter_mut() {
            row -= self.mean.transpose();
        }
        let p = x * &self.basis;
        let k = p.ncols();
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            data.extend(p.row(i).iter());
        }
        Tensor::new(&[n, k], data).expect("projection extent")
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&xi, &m), &v) in x.iter().zip(mean).zip(var) {
        s += (xi - m) * (xi - m) / v + v.ln() + (2.0 * std::f64::consts::PI).ln();
    }
    -0.5 * s
}

struct Reseeder {
    budget: usize,
    r: rng::Rng,
}

impl Reseeder {
    fn reseed(&mut self, what: &str, rows: usize) -> Result<usize> {
        if self.budget == 0 {
            return Err(Error::Numerical(format!("{what}: component stayed empty after reseeding")));
        }
        self.budget -= 1;
        Ok(self.r.random_range(0..rows))
    }
}

impl GmmFit {
    /// k-means initialization then EM, both seeded.
    pub fn fit(x: &Tensor, k: usize, seed: u64) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if k == 0 || n < k {
            return Err(arg_err!("GMM with {k} components needs at least {k} samples, got {n}"));
        }
        let mut r = rng::seeded(seed);
        let picks = rand::seq::index::sample(&mut r, n, k).into_vec();
        let mut means: Vec<Vec<f64>> = picks.iter().map(|&i| x.row(i).to_vec()).collect();
        let mut re = Reseeder { budget: 1, r };
        let mut assign = vec![0usize; n];
        for _ in 0..KMEANS_ITERS {
            for (i, a) in assign.iter_mut().enumerate() {
                let row = x.row(i);
                *a = (0..k)
                    .min_by(|&p, &q| sq_dist(row, &means[p]).total_cmp(&sq_dist(row, &means[q])))
                    .expect("k > 0");
            }
            for (c, mean) in means.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    *mean = x.row(re.reseed("k-means", n)?).to_vec();
                    continue;
                }
                for j in 0..d {
                    mean[j] = members.iter().map(|&i| x.at(i, j)).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let global_var: Vec<f64> = (0..d)
            .map(|j| {
                let m = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
                ((0..n).map(|i| (x.at(i, j) - m).powi(2)).sum::<f64>() / n as f64).max(VAR_FLOOR)
            })
            .collect();
        let mut gmm = GmmFit {
            weights: vec![1.0 / k as f64; k],
            means,
            vars: vec![global_var.clone(); k],
        };
        let mut resp = vec![0.0; n * k];
        let mut last_ll = f64::NEG_INFINITY;
        for _ in 0..EM_ITERS {
            let mut ll = 0.0;
            for i in 0..n {
                let row = x.row(i);
                let logs: Vec<f64> = (0..k)
                    .map(|c| gmm.weights[c].ln() + log_normal_diag(row, &gmm.means[c], &gmm.vars[c]))
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = logs.iter().map(|l| (l - top).exp()).sum::<f64>();
                ll += top + z.ln();
                for c in 0..k {
                    resp[i * k + c] = (logs[c] - top).exp() / z;
                }
            }
            for c in 0..k {
                let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
                if nk < 1e-10 {
                    let i = re.reseed("EM", n)?;
                    gmm.means[c] = x.row(i).to_vec();
                    gmm.vars[c] = global_var.clone();
                    gmm.weights[c] = 1.0 / n as f64;
                    continue;
                }
                for j in 0..d {
                    let m = (0..n).map(|i| resp[i * k + c] * x.at(i, j)).sum::<f64>() / nk;
                    let v = (0..n).map(|i| resp[i * k + c] * (x.at(i, j) - m).powi(2)).sum::<f64>() / nk;
                    gmm.means[c][j] = m;
                    gmm.vars[c][j] = v.max(VAR_FLOOR);
                }
                gmm.weights[c] = nk / n as f64;
            }
            let total: f64 = gmm.weights.iter().sum();
            gmm.weights.iter_mut().for_each(|w| *w /= total);
            if (ll - last_ll).abs() < 1e-10 * ll.abs().max(1.0) {
                break;
            }
            last_ll = ll;
        }
        Ok(gmm)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
pub fn w2_diag(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> f64 {
    let sd: f64 = var_a.iter().zip(var_b).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    sq_dist(mean_a, mean_b) + sd
}

/// Optimal transport plan between `supply` and `demand` (equal totals) for
/// a dense `cost[i][j]`, by successive shortest augmenting paths.
pub fn transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 || cost.len() != m || cost.iter().any(|c| c.len() != n) {
        return Err(arg_err!("transport needs an {m}x{n} cost matrix"));
    }
    if supply.iter().chain(demand).any(|&w| !(w >= 0.0)) {
        return Err(arg_err!("transport weights must be nonnegative"));
    }
    let total: f64 = supply.iter().sum();
    if (total - demand.iter().sum::<f64>()).abs() > 1e-9 * total.max(1.0) {
        return Err(arg_err!("supply and demand totals differ"));
    }
    // Residual network: source 0, rows 1..=m, columns m+1..=m+n, sink m+n+1.
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let nodes = m + n + 2;
    let sink = nodes - 1;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj = vec![Vec::new(); nodes];
    let mut add = |edges: &mut Vec<Edge>, a: usize, b: usize, cap: f64, cost: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0.0, cost: -cost });
    };
    for (i, &s) in supply.iter().enumerate() {
        add(&mut edges, 0, 1 + i, s, 0.0);
    }
    let first_cell = edges.len();
    for (i, row) in cost.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            add(&mut edges, 1 + i, 1 + m + j, f64::INFINITY, c);
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        add(&mut edges, 1 + m + j, sink, d, 0.0);
    }
    let tol = 1e-15 * total.max(1.0);
    let mut sent = 0.0;
    while total - sent > tol {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if !dist[u].is_finite() {
                    continue;
                }
                for &e in &adj[u] {
                    let ed = &edges[e];
                    if ed.cap > tol && dist[u] + ed.cost < dist[ed.to] - 1e-15 {
                        dist[ed.to] = dist[u] + ed.cost;
                        via[ed.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            let e = via[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != 0 {
            let e = via[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        sent += push;
    }
    let mut plan = vec![vec![0.0; n]; m];
    let mut value = 0.0;
    for (i, row) in plan.iter_mut().enumerate() {
        for (j, p) in row.iter_mut().enumerate() {
            let e = first_cell + 2 * (i * n + j);
            *p = edges[e ^ 1].cap;
            value += *p * cost[i][j];
        }
    }
    Ok((value, plan))
}

/// Transport cost between two mixtures under the diagonal `W2²` ground cost.
pub fn gmm_distance(a: &GmmFit, b: &GmmFit) -> Result<f64> {
    let cost: Vec<Vec<f64>> = (0..a.k())
        .map(|i| (0..b.k()).map(|j| w2_diag(&a.means[i], &a.vars[i], &b.means[j], &b.vars[j])).collect())
        .collect();
    transport(&a.weights, &b.weights, &cost).map(|(v, _)| v)
}

/// PCA on the union, one GMM per side, then exact transport.
pub fn wgd(a: &Tensor, b: &Tensor, d_pca: usize, k: usize, seed: u64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(arg_err!("wgd sample widths {} and {} differ", a.cols(), b.cols()));
    }
    if a.rows() < 8 * k || b.rows() < 8 * k {
        return Err(arg_err!("wgd needs at least {} samples per side", 8 * k));
    }
    let pca = Pca::fit(&Tensor::concat_rows(&[a, b])?, d_pca)?;
    let ga = GmmFit::fit(&pca.project(a), k, seed)?;
    let gb = GmmFit::fit(&pca.project(b), k, seed)?;
    gmm_distance(&ga, &gb)
}
