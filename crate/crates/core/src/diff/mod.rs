//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a
//! new node whose parents are already in the arena, so index order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Scalars are 1×1 matrices. Broadcasting exists only where an operation
//! says so explicitly (`add_row`, `add_col`, `mul_col`, `div_col`).
//!
//! Gradients accumulate: calling [`Graph::backward`] twice on the same root
//! without [`Graph::zero_grad`] doubles every stored gradient.

mod adam;
mod checkpoint;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::ParamStore;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("{op}: index {index} out of range for {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Huber(Var, f64),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRow(Var, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    WindowScores {
        q: Var,
        k: Var,
        index: Vec<Option<usize>>,
        width: usize,
        scale: f64,
    },
    WindowMix {
        p: Var,
        v: Var,
        index: Vec<Option<usize>>,
        width: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn column(&mut self, values: &[f64]) -> Var {
        let m = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape");
        self.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Accumulated gradient; zeros if the node was never reached.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Array2::zeros(node.value.dim()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn col_of(&self, op: &'static str, a: Var, c: Var) -> Result<()> {
        let (sa, sc) = (self.shape(a), self.shape(c));
        if sc != (sa.0, 1) {
            return Err(DiffError::Shape {
                op,
                lhs: sa,
                rhs: sc,
            });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a) / self.value(b);
        Ok(self.binary(a, b, v, Op::Div(a, b)))
    }

    /// `a` (n×m) plus row vector `r` (1×m) on every row.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(r));
        if sr != (1, sa.1) {
            return Err(DiffError::Shape {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let v = self.value(a) + self.value(r);
        Ok(self.binary(a, r, v, Op::AddRow(a, r)))
    }

    /// `a` (n×m) plus column vector `c` (n×1) on every column.
    pub fn add_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_of("add_col", a, c)?;
        let v = self.value(a) + self.value(c);
        Ok(self.binary(a, c, v, Op::AddCol(a, c)))
    }

    /// Row `i` of `a` scaled by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_of("mul_col", a, c)?;
        let v = self.value(a) * self.value(c);
        Ok(self.binary(a, c, v, Op::MulCol(a, c)))
    }

    /// Row `i` of `a` divided by `c[i]`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_of("div_col", a, c)?;
        let v = self.value(a) / self.value(c);
        Ok(self.binary(a, c, v, Op::DivCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.unary(a, v, Op::Transpose(a))
    }

    /// Sum of all entries, 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Mean of all entries, 1×1.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        self.unary(a, v, Op::Mean(a))
    }

    /// Per-row sums, n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, v, Op::SumCols(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.unary(a, v, Op::Abs(a))
    }

    /// Elementwise Huber loss with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let v = self.value(a).mapv(|e| huber_value(e, delta));
        self.unary(a, v, Op::Huber(a, delta))
    }

    /// Row-wise softmax; entries whose mask is `false` are excluded and come
    /// out as exactly 0. `mask` is row-major with the same length as `a`.
    /// A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(DiffError::Shape {
                op: "masked_softmax",
                lhs: (r, c),
                rhs: (mask.len(), 1),
            });
        }
        let x = self.value(a);
        let mut out = Array2::zeros((r, c));
        for i in 0..r {
            let m = &mask[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| m[j])
                .map(|j| x[[i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (x[[i, j]] - max).exp();
                    out[[i, j]] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[[i, j]] /= z;
            }
        }
        Ok(self.unary(a, out, Op::MaskedSoftmax(a)))
    }

    /// Row-wise layer normalisation with learned `gain` and `bias` (1×m each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        for (p, name) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            if self.shape(p) != (1, c) {
                return Err(DiffError::Shape {
                    op: name,
                    lhs: (r, c),
                    rhs: self.shape(p),
                });
            }
        }
        let xv = self.value(x);
        let mut normed = Array2::zeros((r, c));
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mu = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                normed[[i, j]] = (row[j] - mu) * is;
            }
        }
        let out = &normed * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(DiffError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Invalid("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, _) = self.shape(a);
        if i >= r {
            return Err(DiffError::Index {
                op: "slice_row",
                index: i,
                len: r,
            });
        }
        let v = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        Ok(self.unary(a, v, Op::SliceRow(a, i)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.shape(a);
        if start >= end || end > c {
            return Err(DiffError::Index {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.unary(a, v, Op::SliceCols(a, start, end)))
    }

    /// Output row `r` is row `index[r]` of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(DiffError::Index {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let src = self.value(a);
        let mut v = Array2::zeros((index.len(), c));
        for (o, &i) in index.iter().enumerate() {
            v.row_mut(o).assign(&src.row(i));
        }
        Ok(self.unary(a, v, Op::GatherRows(a, index)))
    }

    /// Sums rows of `a` into `groups` buckets: output row `g` is the sum of
    /// every row `r` with `group[r] == g`.
    pub fn segment_sum(&mut self, a: Var, group: Vec<usize>, groups: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if group.len() != r {
            return Err(DiffError::Shape {
                op: "segment_sum",
                lhs: (r, c),
                rhs: (group.len(), 1),
            });
        }
        if let Some(&bad) = group.iter().find(|&&g| g >= groups) {
            return Err(DiffError::Index {
                op: "segment_sum",
                index: bad,
                len: groups,
            });
        }
        let src = self.value(a);
        let mut v = Array2::zeros((groups, c));
        for (row, &g) in group.iter().enumerate() {
            let mut dst = v.row_mut(g);
            dst += &src.row(row);
        }
        Ok(self.unary(a, v, Op::SegmentSum(a, group)))
    }

    fn check_window(
        &self,
        op: &'static str,
        rows: usize,
        index: &[Option<usize>],
        width: usize,
        source_rows: usize,
    ) -> Result<()> {
        if index.len() != rows * width {
            return Err(DiffError::Shape {
                op,
                lhs: (rows, width),
                rhs: (index.len(), 1),
            });
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= source_rows) {
            return Err(DiffError::Index {
                op,
                index: *bad,
                len: source_rows,
            });
        }
        Ok(())
    }

    /// Windowed attention scores. `q` is B×d, `k` is N×d and `index` holds
    /// `width` optional row references into `k` per query row. Output is
    /// B×width with `scale * q_b · k_index` or 0 where the reference is absent.
    pub fn window_scores(
        &mut self,
        q: Var,
        k: Var,
        index: Vec<Option<usize>>,
        width: usize,
        scale: f64,
    ) -> Result<Var> {
        let (b, d) = self.shape(q);
        let (n, dk) = self.shape(k);
        if d != dk {
            return Err(DiffError::Shape {
                op: "window_scores",
                lhs: (b, d),
                rhs: (n, dk),
            });
        }
        self.check_window("window_scores", b, &index, width, n)?;
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = Array2::zeros((b, width));
        for row in 0..b {
            for l in 0..width {
                if let Some(src) = index[row * width + l] {
                    out[[row, l]] = scale * qv.row(row).dot(&kv.row(src));
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            out,
            Op::WindowScores {
                q,
                k,
                index,
                width,
                scale,
            },
            rg,
        ))
    }

    /// Windowed mixing: output row `b` is `sum_l p[b,l] * v[index[b,l]]`.
    pub fn window_mix(
        &mut self,
        p: Var,
        v: Var,
        index: Vec<Option<usize>>,
        width: usize,
    ) -> Result<Var> {
        let (b, pw) = self.shape(p);
        let (n, d) = self.shape(v);
        if pw != width {
            return Err(DiffError::Shape {
                op: "window_mix",
                lhs: (b, pw),
                rhs: (b, width),
            });
        }
        self.check_window("window_mix", b, &index, width, n)?;
        let (pv, vv) = (self.value(p), self.value(v));
        let mut out = Array2::zeros((b, d));
        for row in 0..b {
            let mut dst = out.row_mut(row);
            for l in 0..width {
                if let Some(src) = index[row * width + l] {
                    dst.scaled_add(pv[[row, l]], &vv.row(src));
                }
            }
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(out, Op::WindowMix { p, v, index, width }, rg))
    }

    /// Reverse sweep from a 1×1 `root`, adding d(root)/d(node) into the
    /// stored gradient of every reachable node that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let dim = self.shape(root);
        if dim != (1, 1) {
            return Err(DiffError::NonScalarRoot(dim));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => *acc += &g,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => *acc += &contrib,
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g * val(*b));
                send(*b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                send(*a, g / bv);
                send(*b, -(g * val(*a)) / (bv * bv));
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                send(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(a, c) => {
                send(*a, g.clone());
                send(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulCol(a, c) => {
                send(*a, g * val(*c));
                let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*c, gc);
            }
            Op::DivCol(a, c) => {
                let cv = val(*c);
                send(*a, g / cv);
                let num = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*c, -num / (cv * cv));
            }
            Op::Scale(a, s) => send(*a, g * *s),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                send(*a, g.dot(&val(*b).t()));
                send(*b, val(*a).t().dot(g));
            }
            Op::Transpose(a) => send(*a, g.t().as_standard_layout().into_owned()),
            Op::Sum(a) => send(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
            }
            Op::SumCols(a) => {
                let dim = val(*a).dim();
                send(*a, g.broadcast(dim).expect("column broadcast").to_owned());
            }
            Op::Square(a) => send(*a, g * val(*a) * 2.0),
            Op::Sqrt(a) => send(*a, g / (&node.value * 2.0)),
            Op::Exp(a) => send(*a, g * &node.value),
            Op::Log(a) => send(*a, g / val(*a)),
            Op::Softplus(a) => send(*a, g * &val(*a).mapv(sigmoid)),
            Op::Relu(a) => {
                send(*a, g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
            }
            Op::Abs(a) => send(*a, g * &val(*a).mapv(sign)),
            Op::Huber(a, delta) => {
                let d = *delta;
                let dh = val(*a).mapv(|e| if e.abs() < d { e } else { d * sign(e) });
                send(*a, g * &dh);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*a, y * &(g - &dot));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                send(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                send(*gain, (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].requires_grad {
                    let gn = g * val(*gain);
                    let (r, c) = gn.dim();
                    let mut gx = Array2::zeros((r, c));
                    for row in 0..r {
                        let gr = gn.row(row);
                        let nr = normed.row(row);
                        let m1 = gr.sum() / c as f64;
                        let m2 = gr.dot(&nr) / c as f64;
                        for j in 0..c {
                            gx[[row, j]] = inv_std[row] * (gr[j] - m1 - nr[j] * m2);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).nrows();
                    send(p, g.slice(s![off..off + r, ..]).to_owned());
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).ncols();
                    send(p, g.slice(s![.., off..off + c]).to_owned());
                    off += c;
                }
            }
            Op::SliceRow(a, i) => {
                let mut ga = Array2::zeros(val(*a).dim());
                ga.row_mut(*i).assign(&g.row(0));
                send(*a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(val(*a).dim());
                ga.slice_mut(s![.., *start..*end]).assign(g);
                send(*a, ga);
            }
            Op::GatherRows(a, index) => {
                let mut ga = Array2::zeros(val(*a).dim());
                for (o, &src) in index.iter().enumerate() {
                    let mut dst = ga.row_mut(src);
                    dst += &g.row(o);
                }
                send(*a, ga);
            }
            Op::SegmentSum(a, group) => {
                let mut ga = Array2::zeros(val(*a).dim());
                for (row, &grp) in group.iter().enumerate() {
                    ga.row_mut(row).assign(&g.row(grp));
                }
                send(*a, ga);
            }
            Op::WindowScores {
                q,
                k,
                index,
                width,
                scale,
            } => {
                let (qv, kv) = (val(*q), val(*k));
                let mut gq = Array2::zeros(qv.dim());
                let mut gk = Array2::zeros(kv.dim());
                for row in 0..qv.nrows() {
                    for l in 0..*width {
                        if let Some(src) = index[row * width + l] {
                            let w = scale * g[[row, l]];
                            gq.row_mut(row).scaled_add(w, &kv.row(src));
                            gk.row_mut(src).scaled_add(w, &qv.row(row));
                        }
                    }
                }
                send(*q, gq);
                send(*k, gk);
            }
            Op::WindowMix { p, v, index, width } => {
                let (pv, vv) = (val(*p), val(*v));
                let mut gp = Array2::zeros(pv.dim());
                let mut gv = Array2::zeros(vv.dim());
                for row in 0..pv.nrows() {
                    for l in 0..*width {
                        if let Some(src) = index[row * width + l] {
                            gp[[row, l]] = g.row(row).dot(&vv.row(src));
                            gv.row_mut(src).scaled_add(pv[[row, l]], &g.row(row));
                        }
                    }
                }
                send(*p, gp);
                send(*v, gv);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar Huber loss.
pub fn huber_value(err: f64, delta: f64) -> f64 {
    if err.abs() < delta {
        0.5 * err * err
    } else {
        delta * (err.abs() - 0.5 * delta)
    }
}
