//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node is a row-major `rows × cols` matrix. Ops are appended to the
//! tape in execution order; [`Graph::backward`] walks the tape once in
//! reverse, summing gradient contributions into each input, so a node that
//! is consumed several times receives the total of all of them.

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm(Var),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Im2Col {
        x: Var,
        seg: usize,
        k: usize,
        stride: usize,
        pad: usize,
        l_out: usize,
    },
    RepeatRows { x: Var, factor: usize },
    AvgPoolRows { x: Var, factor: usize },
    TileRows { x: Var, times: usize },
    Reshape(Var),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm(..) => "layer_norm",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Im2Col { .. } => "im2col",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::AvgPoolRows { .. } => "avg_pool_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
    /// Per-row inverse standard deviations for layer norm.
    aux: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// A single-use tape. Build it forward, call [`Graph::backward`] once, read
/// gradients.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            check_finite: false,
            backward_done: false,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            param_vars: vec![None; params.len()],
            params: Some(params),
            ..Self::new()
        }
    }

    /// Rejects any op whose output contains NaN or ±Inf.
    pub fn check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&[n.rows, n.cols], n.value.clone()).expect("node shape is valid")
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.rows(), t.cols(), t.data().to_vec(), false)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.rows(), t.cols(), t.data().to_vec(), true)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len());
        self.leaf(rows, cols, value, false)
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = self
            .params
            .expect("graph has no parameter store")
            .get(id);
        let v = self.leaf(t.rows(), t.cols(), t.data().to_vec(), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op: Op::Leaf,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, aux: Vec<f64>) -> Result<Var> {
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sqrt(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::LayerNorm(x)
            | Op::Sum(x)
            | Op::SumCols(x)
            | Op::MeanRows(x)
            | Op::Reshape(x)
            | Op::Transpose(x) => vec![*x],
            Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Im2Col { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::AvgPoolRows { x, .. }
            | Op::TileRows { x, .. } => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(sa)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false, 1)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true, 1)
    }

    /// Batched product over `batch` equal row blocks of both operands.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool, batch: usize) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if batch == 0 || ra % batch != 0 || rb % batch != 0 {
            return Err(dim_err!("matmul: batch {batch} does not divide rows {ra}/{rb}"));
        }
        let (m, ka) = if ta { (ca, ra / batch) } else { (ra / batch, ca) };
        let (kb, n) = if tb { (cb, rb / batch) } else { (rb / batch, cb) };
        if ka != kb {
            return Err(dim_err!(
                "matmul: inner dimensions {ka} and {kb} differ ({ra}x{ca} · {rb}x{cb})"
            ));
        }
        let k = ka;
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for bi in 0..batch {
                gemm(
                    ta,
                    tb,
                    m,
                    n,
                    k,
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        self.push(
            batch * m,
            n,
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                n,
                k,
            },
            vec![],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(x), vec![])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, op.name())?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(r, c, out, op, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(dim_err!(
                "row broadcast: {:?} onto {r}x{c}",
                self.shape(b)
            ));
        }
        let bv = &self.nodes[b.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(bv)
                    .map(move |(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        self.push(r, c, out, op, vec![])
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, false)
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, true)
    }

    fn col_broadcast(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (r, 1) {
            return Err(dim_err!(
                "column broadcast: {:?} onto {r}x{c}",
                self.shape(b)
            ));
        }
        let bv = &self.nodes[b.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .zip(bv)
            .flat_map(|(row, &y)| row.iter().map(move |&x| if mul { x * y } else { x + y }))
            .collect();
        let op = if mul { Op::MulCol(a, b) } else { Op::AddCol(a, b) };
        self.push(r, c, out, op, vec![])
    }

    /// Adds an `r×1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast(a, b, false)
    }

    /// Scales row `i` of `a` by entry `i` of an `r×1` column.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.col_broadcast(a, b, true)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        self.push(r, c, out, op, vec![])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
        })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(r, c, out, Op::Softmax(x), vec![])
    }

    /// Row-wise normalization to zero mean and unit variance, without affine
    /// terms.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = self.nodes[x.0].value.clone();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(r, c, out, Op::LayerNorm(x), inv_std)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x), vec![])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of each row, as an `r×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.nodes[x.0].value.chunks(c).map(|row| row.iter().sum()).collect();
        self.push(r, 1, out, Op::SumCols(x), vec![])
    }

    /// Mean over rows, as a `1×c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; c];
        for row in self.nodes[x.0].value.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.push(1, c, out, Op::MeanRows(x), vec![])
    }

    // ---- structural -----------------------------------------------------

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(dim_err!("slice_rows {start}+{len} out of {r}"));
        }
        let out = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { x, start }, vec![])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(dim_err!("slice_cols {start}+{len} out of {c}"));
        }
        let out = self.nodes[x.0]
            .value
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(r, len, out, Op::SliceCols { x, start }, vec![])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs.first().map(|&v| self.shape(v).1).ok_or_else(|| dim_err!("empty concat"))?;
        if xs.iter().any(|&v| self.shape(v).1 != c) {
            return Err(dim_err!("concat_rows: column counts differ"));
        }
        let r = xs.iter().map(|&v| self.shape(v).0).sum();
        let out = xs
            .iter()
            .flat_map(|&v| self.nodes[v.0].value.iter().copied())
            .collect();
        self.push(r, c, out, Op::ConcatRows(xs.to_vec()), vec![])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = xs.first().map(|&v| self.shape(v).0).ok_or_else(|| dim_err!("empty concat"))?;
        if xs.iter().any(|&v| self.shape(v).0 != r) {
            return Err(dim_err!("concat_cols: row counts differ"));
        }
        let c: usize = xs.iter().map(|&v| self.shape(v).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &v in xs {
                let w = self.nodes[v.0].cols;
                out.extend_from_slice(&self.nodes[v.0].value[i * w..(i + 1) * w]);
            }
        }
        self.push(r, c, out, Op::ConcatCols(xs.to_vec()), vec![])
    }

    /// Unfolds 1-D convolution windows along rows.
    ///
    /// Rows are grouped into consecutive segments of `seg` rows; windows
    /// never cross a segment and are zero-padded by `pad` at both ends.
    /// Output row `s·l_out + o` holds taps `j = 0..k` laid out as
    /// `j·cols + channel`.
    pub fn im2col(&mut self, x: Var, seg: usize, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if seg == 0 || r % seg != 0 || stride == 0 || k == 0 || seg + 2 * pad < k {
            return Err(dim_err!(
                "im2col: rows {r}, segment {seg}, kernel {k}, stride {stride}, pad {pad}"
            ));
        }
        let l_out = (seg + 2 * pad - k) / stride + 1;
        let n_seg = r / seg;
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; n_seg * l_out * k * c];
        for s in 0..n_seg {
            for o in 0..l_out {
                let dst = &mut out[(s * l_out + o) * k * c..(s * l_out + o + 1) * k * c];
                for j in 0..k {
                    let pos = (o * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < seg {
                        let row = s * seg + pos as usize;
                        dst[j * c..(j + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
                    }
                }
            }
        }
        self.push(
            n_seg * l_out,
            k * c,
            out,
            Op::Im2Col {
                x,
                seg,
                k,
                stride,
                pad,
                l_out,
            },
            vec![],
        )
    }

    /// Nearest-neighbour upsampling along rows.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c * factor);
        for row in self.nodes[x.0].value.chunks(c) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        self.push(r * factor, c, out, Op::RepeatRows { x, factor }, vec![])
    }

    /// Mean over consecutive groups of `factor` rows.
    pub fn avg_pool_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if factor == 0 || r % factor != 0 {
            return Err(dim_err!("avg_pool_rows: factor {factor} does not divide {r}"));
        }
        let mut out = vec![0.0; r / factor * c];
        for (i, row) in self.nodes[x.0].value.chunks(c).enumerate() {
            let dst = &mut out[(i / factor) * c..(i / factor + 1) * c];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v / factor as f64;
            }
        }
        self.push(r / factor, c, out, Op::AvgPoolRows { x, factor }, vec![])
    }

    /// Stacks `times` copies of the whole matrix vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        let src = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        self.push(r * times, c, out, Op::TileRows { x, times }, vec![])
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(dim_err!("reshape {r}x{c} -> {rows}x{cols}"));
        }
        let out = self.nodes[x.0].value.clone();
        self.push(rows, cols, out, Op::Reshape(x), vec![])
    }

    /// Stop-gradient: a constant copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let value = self.nodes[x.0].value.clone();
        self.leaf(r, c, value, false)
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d`loss` to every reachable differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(dim_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(dy);
                continue;
            }
            self.propagate(i, &dy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let op = nodes[i].op.clone();
        let (rows, cols) = (nodes[i].rows, nodes[i].cols);
        match op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                n,
                k,
            } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let g = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if ta {
                            gemm(tb, true, k, m, n, bb, dc, 1.0, g);
                        } else {
                            gemm(false, !tb, m, k, n, dc, bb, 1.0, g);
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..(bi + 1) * m * n];
                        let aa = &av[bi * m * k..(bi + 1) * m * k];
                        let g = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if tb {
                            gemm(true, ta, n, k, m, dc, aa, 1.0, g);
                        } else {
                            gemm(!ta, false, k, n, m, aa, dc, 1.0, g);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                acc_scaled(nodes, grads, a, dy, 1.0);
                acc_scaled(nodes, grads, b, dy, 1.0);
            }
            Op::Sub(a, b) => {
                acc_scaled(nodes, grads, a, dy, 1.0);
                acc_scaled(nodes, grads, b, dy, -1.0);
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv.iter()) {
                        *g += d * y;
                    }
                }
                if let Some(g) = acc(nodes, grads, b) {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av.iter()) {
                        *g += d * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv.iter()) {
                        *g += d / y;
                    }
                }
                if let Some(g) = acc(nodes, grads, b) {
                    for (((g, d), x), y) in g.iter_mut().zip(dy).zip(av.iter()).zip(bv.iter()) {
                        *g -= d * x / (y * y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                acc_scaled(nodes, grads, a, dy, 1.0);
                if let Some(g) = acc(nodes, grads, b) {
                    for row in dy.chunks(cols) {
                        for (g, d) in g.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MulRow(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for (grow, drow) in g.chunks_mut(cols).zip(dy.chunks(cols)) {
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(bv.iter()) {
                            *g += d * y;
                        }
                    }
                }
                if let Some(g) = acc(nodes, grads, b) {
                    for (arow, drow) in av.chunks(cols).zip(dy.chunks(cols)) {
                        for ((g, d), x) in g.iter_mut().zip(drow).zip(arow) {
                            *g += d * x;
                        }
                    }
                }
            }
            Op::AddCol(a, b) => {
                acc_scaled(nodes, grads, a, dy, 1.0);
                if let Some(g) = acc(nodes, grads, b) {
                    for (g, row) in g.iter_mut().zip(dy.chunks(cols)) {
                        *g += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MulCol(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(g) = acc(nodes, grads, a) {
                    for ((grow, drow), y) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(bv.iter()) {
                        for (g, d) in grow.iter_mut().zip(drow) {
                            *g += d * y;
                        }
                    }
                }
                if let Some(g) = acc(nodes, grads, b) {
                    for ((g, arow), drow) in g.iter_mut().zip(av.chunks(cols)).zip(dy.chunks(cols)) {
                        *g += arow.iter().zip(drow).map(|(x, d)| x * d).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, s) => acc_scaled(nodes, grads, x, dy, s),
            Op::AddScalar(x) => acc_scaled(nodes, grads, x, dy, 1.0),
            Op::Sqrt(x) => {
                let y = &nodes[i].value;
                if let Some(g) = acc(nodes, grads, x) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y.iter()) {
                        *g += d * 0.5 / y;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &nodes[i].value;
                if let Some(g) = acc(nodes, grads, x) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y.iter()) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(g) = acc(nodes, grads, x) {
                    for ((g, d), &v) in g.iter_mut().zip(dy).zip(xv.iter()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *g += d * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                if let Some(g) = acc(nodes, grads, x) {
                    for ((grow, yrow), drow) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for ((g, y), d) in grow.iter_mut().zip(yrow).zip(drow) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(x) => {
                let y = &nodes[i].value;
                let inv_std = &nodes[i].aux;
                if let Some(g) = acc(nodes, grads, x) {
                    for (((grow, yrow), drow), is) in g
                        .chunks_mut(cols)
                        .zip(y.chunks(cols))
                        .zip(dy.chunks(cols))
                        .zip(inv_std.iter())
                    {
                        let n = cols as f64;
                        let mean_d = drow.iter().sum::<f64>() / n;
                        let mean_dy = drow.iter().zip(yrow).map(|(d, y)| d * y).sum::<f64>() / n;
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += is * (d - mean_d - y * mean_dy);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let d = dy[0];
                if let Some(g) = acc(nodes, grads, x) {
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::SumCols(x) => {
                let xc = nodes[x.0].cols;
                if let Some(g) = acc(nodes, grads, x) {
                    for (grow, d) in g.chunks_mut(xc).zip(dy) {
                        grow.iter_mut().for_each(|g| *g += d);
                    }
                }
            }
            Op::MeanRows(x) => {
                let xr = nodes[x.0].rows as f64;
                if let Some(g) = acc(nodes, grads, x) {
                    for grow in g.chunks_mut(cols) {
                        for (g, d) in grow.iter_mut().zip(dy) {
                            *g += d / xr;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(g) = acc(nodes, grads, x) {
                    for (g, d) in g[start * cols..(start + rows) * cols].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xc = nodes[x.0].cols;
                if let Some(g) = acc(nodes, grads, x) {
                    for (grow, drow) in g.chunks_mut(xc).zip(dy.chunks(cols)) {
                        for (g, d) in grow[start..start + cols].iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for v in xs {
                    let len = nodes[v.0].value.len();
                    acc_scaled(nodes, grads, v, &dy[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for v in xs {
                    let w = nodes[v.0].cols;
                    if let Some(g) = acc(nodes, grads, v) {
                        for (grow, drow) in g.chunks_mut(w).zip(dy.chunks(cols)) {
                            for (g, d) in grow.iter_mut().zip(&drow[offset..offset + w]) {
                                *g += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Im2Col {
                x,
                seg,
                k,
                stride,
                pad,
                l_out,
            } => {
                let c = nodes[x.0].cols;
                let n_seg = nodes[x.0].rows / seg;
                if let Some(g) = acc(nodes, grads, x) {
                    for s in 0..n_seg {
                        for o in 0..l_out {
                            let src = &dy[(s * l_out + o) * k * c..(s * l_out + o + 1) * k * c];
                            for j in 0..k {
                                let pos = (o * stride + j) as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < seg {
                                    let row = s * seg + pos as usize;
                                    for (g, d) in g[row * c..(row + 1) * c].iter_mut().zip(&src[j * c..(j + 1) * c]) {
                                        *g += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { x, factor } => {
                if let Some(g) = acc(nodes, grads, x) {
                    for (r, drow) in dy.chunks(cols).enumerate() {
                        let dst = &mut g[(r / factor) * cols..(r / factor + 1) * cols];
                        for (g, d) in dst.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
            Op::AvgPoolRows { x, factor } => {
                if let Some(g) = acc(nodes, grads, x) {
                    for (r, grow) in g.chunks_mut(cols).enumerate() {
                        let src = &dy[(r / factor) * cols..(r / factor + 1) * cols];
                        for (g, d) in grow.iter_mut().zip(src) {
                            *g += d / factor as f64;
                        }
                    }
                }
            }
            Op::TileRows { x, times } => {
                let len = nodes[x.0].value.len();
                if let Some(g) = acc(nodes, grads, x) {
                    for t in 0..times {
                        for (g, d) in g.iter_mut().zip(&dy[t * len..(t + 1) * len]) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Reshape(x) => acc_scaled(nodes, grads, x, dy, 1.0),
            Op::Transpose(x) => {
                // output is cols_x × rows_x
                let (xr, xc) = (nodes[x.0].rows, nodes[x.0].cols);
                if let Some(g) = acc(nodes, grads, x) {
                    for a in 0..xr {
                        for b in 0..xc {
                            g[a * xc + b] += dy[b * xr + a];
                        }
                    }
                }
            }
        }
    }


    /// Gradient of a leaf after [`Graph::backward`]; `None` when unreachable
    /// or not differentiable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter leaf that was created on this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.grad(v).map(|g| (ParamId::from_index(i), g))
            })
            .collect()
    }

    /// Adds this graph's parameter gradients into `acc`, which must be laid
    /// out like the parameter store.
    pub fn accumulate_param_grads(&self, acc: &mut [Vec<f64>]) {
        for (id, g) in self.param_grads() {
            for (a, b) in acc[id.index()].iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn acc_scaled(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, dy: &[f64], s: f64) {
    if let Some(g) = acc(nodes, grads, v) {
        for (g, d) in g.iter_mut().zip(dy) {
            *g += s * d;
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
