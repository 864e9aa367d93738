//! Finite-difference sweep over every differentiable graph op.

use pianoflow::numcore::rng::{self, Rng};
use pianoflow::numcore::{attention_forward, film_modulate, grad_check, Graph, Tensor, Var};
use pianoflow::Result;
use rand::Rng as _;

pub const EPS: f64 = 1e-5;

/// Contracts `y` against fixed random weights so every output coordinate
/// feeds the scalar with a distinct coefficient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = rng::uniform(&mut rng::seeded(seed ^ 0x5eed), &[r, c], -1.0, 1.0);
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn dim(rng: &mut Rng, hi: usize) -> usize {
    rng.random_range(1..=hi)
}

/// Runs every op once with shapes drawn from `seed`, returning the max
/// relative gradient error per op.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng::seeded(seed);
    let r = dim(&mut rng, 4);
    let c = dim(&mut rng, 4);
    let k = dim(&mut rng, 3);
    let mut out = Vec::new();

    let mut run = |name: &'static str, x: Tensor, f: &dyn Fn(&mut Graph, Var) -> Result<Var>| {
        let err = grad_check(|g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        }, &x, EPS)
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name, err));
    };

    let pair = rng::uniform(&mut rng, &[r, 2 * c], -1.5, 1.5);
    let split = |g: &mut Graph, v: Var| -> Result<(Var, Var)> {
        Ok((g.slice_cols(v, 0, c)?, g.slice_cols(v, c, c)?))
    };

    // products: both operands come from the differentiated input
    let mm = rng::uniform(&mut rng, &[r * k + k * c, 1], -1.0, 1.0);
    run("matmul", mm.clone(), &|g, v| {
        let a = g.slice_rows(v, 0, r * k)?;
        let a = g.reshape(a, r, k)?;
        let b = g.slice_rows(v, r * k, k * c)?;
        let b = g.reshape(b, k, c)?;
        g.matmul(a, b)
    });
    run("matmul_tn", mm.clone(), &|g, v| {
        let a = g.slice_rows(v, 0, r * k)?;
        let a = g.reshape(a, k, r)?;
        let b = g.slice_rows(v, r * k, k * c)?;
        let b = g.reshape(b, k, c)?;
        g.matmul_ex(a, b, true, false, 1)
    });
    run("matmul_nt", mm.clone(), &|g, v| {
        let a = g.slice_rows(v, 0, r * k)?;
        let a = g.reshape(a, r, k)?;
        let b = g.slice_rows(v, r * k, k * c)?;
        let b = g.reshape(b, c, k)?;
        g.matmul_nt(a, b)
    });
    let batch = dim(&mut rng, 3);
    let bm = rng::uniform(&mut rng, &[batch * (r * k + k * c), 1], -1.0, 1.0);
    run("matmul_batched", bm, &|g, v| {
        let a = g.slice_rows(v, 0, batch * r * k)?;
        let a = g.reshape(a, batch * r, k)?;
        let b = g.slice_rows(v, batch * r * k, batch * k * c)?;
        let b = g.reshape(b, batch * c, k)?;
        g.matmul_ex(a, b, false, true, batch)
    });
    let sq = rng::uniform(&mut rng, &[r, c], -1.5, 1.5);
    run("transpose", sq.clone(), &|g, v| g.transpose(v));

    run("add", pair.clone(), &|g, v| {
        let (a, b) = split(g, v)?;
        g.add(a, b)
    });
    run("sub", pair.clone(), &|g, v| {
        let (a, b) = split(g, v)?;
        g.sub(a, b)
    });
    run("mul", pair.clone(), &|g, v| {
        let (a, b) = split(g, v)?;
        g.mul(a, b)
    });
    let pos = rng::uniform(&mut rng, &[r, 2 * c], 0.5, 2.0);
    run("div", pos.clone(), &|g, v| {
        let (a, b) = split(g, v)?;
        g.div(a, b)
    });
    let wide = rng::uniform(&mut rng, &[r + 1, c], -1.5, 1.5);
    run("add_row", wide.clone(), &|g, v| {
        let a = g.slice_rows(v, 0, r)?;
        let b = g.slice_rows(v, r, 1)?;
        g.add_row(a, b)
    });
    run("mul_row", wide, &|g, v| {
        let a = g.slice_rows(v, 0, r)?;
        let b = g.slice_rows(v, r, 1)?;
        g.mul_row(a, b)
    });
    let tall = rng::uniform(&mut rng, &[r, c + 1], -1.5, 1.5);
    run("add_col", tall.clone(), &|g, v| {
        let a = g.slice_cols(v, 0, c)?;
        let b = g.slice_cols(v, c, 1)?;
        g.add_col(a, b)
    });
    run("mul_col", tall, &|g, v| {
        let a = g.slice_cols(v, 0, c)?;
        let b = g.slice_cols(v, c, 1)?;
        g.mul_col(a, b)
    });

    let s = rng.random_range(-2.0..2.0);
    run("scale", sq.clone(), &|g, v| g.scale(v, s));
    run("add_scalar", sq.clone(), &|g, v| g.add_scalar(v, s));
    run("sqrt", pos.clone(), &|g, v| g.sqrt(v));
    run("sigmoid", sq.clone(), &|g, v| g.sigmoid(v));
    run("gelu", sq.clone(), &|g, v| g.gelu(v));
    run("softmax", sq.clone(), &|g, v| g.softmax(v));
    let ln = rng::uniform(&mut rng, &[r, c + 1], -1.5, 1.5);
    run("layer_norm", ln, &|g, v| g.layer_norm(v));

    run("sum", sq.clone(), &|g, v| g.sum(v));
    run("mean", sq.clone(), &|g, v| g.mean(v));
    run("sum_cols", sq.clone(), &|g, v| g.sum_cols(v));
    run("mean_rows", sq.clone(), &|g, v| g.mean_rows(v));

    run("slice_rows", wide_rows(&mut rng, r, c), &|g, v| g.slice_rows(v, 1, r));
    run("slice_cols", pair.clone(), &|g, v| g.slice_cols(v, c / 2, c));
    run("concat_rows", pair.clone(), &|g, v| {
        let (a, b) = split(g, v)?;
        let a2 = g.scale(a, 2.0)?;
        g.concat_rows(&[a, b, a2])
    });
    run("concat_cols", pair.clone(), &|g, v| {
        let (a, b) = split(g, v)?;
        g.concat_cols(&[b, a, b])
    });

    let seg = dim(&mut rng, 5) + 1;
    let n_seg = dim(&mut rng, 2);
    let kk = rng.random_range(1..=seg.min(3));
    let stride = dim(&mut rng, 2);
    let pad = rng.random_range(0..=kk / 2);
    let conv = rng::uniform(&mut rng, &[seg * n_seg, c], -1.5, 1.5);
    run("im2col", conv, &|g, v| g.im2col(v, seg, kk, stride, pad));

    let f = dim(&mut rng, 3);
    run("repeat_rows", sq.clone(), &|g, v| g.repeat_rows(v, f));
    let pool = rng::uniform(&mut rng, &[r * f, c], -1.5, 1.5);
    run("avg_pool_rows", pool, &|g, v| g.avg_pool_rows(v, f));
    run("tile_rows", sq.clone(), &|g, v| g.tile_rows(v, f));
    run("reshape", sq.clone(), &|g, v| g.reshape(v, c, r));

    let d = dim(&mut rng, 3);
    let nq = dim(&mut rng, 3);
    let nk = dim(&mut rng, 3);
    let att = rng::uniform(&mut rng, &[nq * d + nk * d + nk * c, 1], -1.5, 1.5);
    run("attention", att, &|g, v| {
        let q = g.slice_rows(v, 0, nq * d)?;
        let q = g.reshape(q, nq, d)?;
        let kv = g.slice_rows(v, nq * d, nk * d)?;
        let kv = g.reshape(kv, nk, d)?;
        let vv = g.slice_rows(v, nq * d + nk * d, nk * c)?;
        let vv = g.reshape(vv, nk, c)?;
        attention_forward(g, q, kv, vv)
    });
    let film = rng::uniform(&mut rng, &[r + 2, c], -1.5, 1.5);
    run("film", film, &|g, v| {
        let h = g.slice_rows(v, 0, r)?;
        let gamma = g.slice_rows(v, r, 1)?;
        let beta = g.slice_rows(v, r + 1, 1)?;
        film_modulate(g, h, gamma, beta)
    });
    // a node consumed three times
    run("shared_input", sq, &|g, v| {
        let a = g.mul(v, v)?;
        let b = g.sigmoid(v)?;
        let c = g.add(a, b)?;
        g.mul(c, v)
    });
    out
}

fn wide_rows(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rng::uniform(rng, &[r + 2, c], -1.5, 1.5)
}
