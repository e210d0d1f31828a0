//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] replays the
//! record in reverse and accumulates adjoints by the chain rule. Training
//! differentiates straight through the unrolled fixed-step ODE solver, so the
//! op set here is exactly what the attention stack needs and nothing more.

pub mod optim;

#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::{Cell, RefCell};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// [m,n] plus a length-n bias broadcast over rows.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [m,n] times an [m,1] column broadcast over columns.
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    /// Gather flat entries of a matrix into a [k,1] column.
    SelectEntries(usize, Vec<usize>),
    /// Accumulate a [k,1] column into flat positions of a zero matrix.
    ScatterEntries(usize, Vec<usize>),
    /// Sum rows of [p,d] into [nseg,d] buckets given per-row segment ids.
    SegmentSum(usize, Vec<usize>),
    SumAxis0(usize),
    SumAxis1(usize),
    SumAll(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize, f64),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Dropout(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records ops for one forward/backward pass. Single-threaded; distinct
/// tapes on distinct threads share nothing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    training: Cell<bool>,
    dropout_rng: RefCell<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            training: Cell::new(false),
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Tape with dropout active, drawing masks from `rng`.
    pub fn for_training(rng: ChaCha8Rng) -> Self {
        let t = Tape::new();
        t.training.set(true);
        *t.dropout_rng.borrow_mut() = rng;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by recorded node values; a coarse peak-memory estimate.
    pub fn approx_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.numel() * std::mem::size_of::<f64>())
            .sum()
    }

    fn push(&self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: node_op });
        Ok(Var(nodes.len() - 1))
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Clone out the value of a node.
    pub fn get(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ---- binary ops ----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            ta.matmul(tb)?
        };
        self.push("matmul", value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(Error::ShapeMismatch {
                    op: "add",
                    lhs: ta.shape.clone(),
                    rhs: tb.shape.clone(),
                });
            }
            let mut out = ta.clone();
            for (o, &x) in out.data.iter_mut().zip(tb.data.iter()) {
                *o += x;
            }
            out
        };
        self.push("add", value, Op::Add(a.0, b.0))
    }

    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            if ta.cols() != tb.numel() {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: ta.shape.clone(),
                    rhs: tb.shape.clone(),
                });
            }
            let mut out = ta.clone();
            let n = tb.numel();
            for (i, o) in out.data.iter_mut().enumerate() {
                *o += tb.data[i % n];
            }
            out
        };
        self.push("add_bias", value, Op::AddBias(a.0, bias.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(Error::ShapeMismatch {
                    op: "sub",
                    lhs: ta.shape.clone(),
                    rhs: tb.shape.clone(),
                });
            }
            let mut out = ta.clone();
            for (o, &x) in out.data.iter_mut().zip(tb.data.iter()) {
                *o -= x;
            }
            out
        };
        self.push("sub", value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(Error::ShapeMismatch {
                    op: "mul",
                    lhs: ta.shape.clone(),
                    rhs: tb.shape.clone(),
                });
            }
            let mut out = ta.clone();
            for (o, &x) in out.data.iter_mut().zip(tb.data.iter()) {
                *o *= x;
            }
            out
        };
        self.push("mul", value, Op::Mul(a.0, b.0))
    }

    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tc) = (&nodes[a.0].value, &nodes[col.0].value);
            if tc.numel() != ta.rows() {
                return Err(Error::ShapeMismatch {
                    op: "mul_col",
                    lhs: ta.shape.clone(),
                    rhs: tc.shape.clone(),
                });
            }
            let n = ta.cols();
            let mut out = ta.clone();
            for (i, o) in out.data.iter_mut().enumerate() {
                *o *= tc.data[i / n];
            }
            out
        };
        self.push("mul_col", value, Op::MulCol(a.0, col.0))
    }

    // ---- unary / scalar ops ---------------------------------------------

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(|x| x * c);
        self.push("scale", value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a.0))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.transpose2();
        self.push("transpose", value, Op::Transpose(a.0))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(shape.to_vec(), ta.data.clone())?
        };
        self.push("reshape", value, Op::Reshape(a.0))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0].0].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rows() != m {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[parts[0].0].value.shape.clone(),
                        rhs: t.shape.clone(),
                    });
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; m * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(widths.iter()) {
                let t = &nodes[p.0].value;
                for i in 0..m {
                    out[i * total + off..i * total + off + w].copy_from_slice(t.row_slice(i));
                }
                off += w;
            }
            (Tensor::new(vec![m, total], out)?, widths)
        };
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect(), widths),
        )
    }

    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = (ta.rows(), ta.cols());
            let mut out = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= m {
                    return Err(Error::invalid(format!(
                        "select_rows: index {i} out of range for {m} rows"
                    )));
                }
                out.extend_from_slice(ta.row_slice(i));
            }
            Tensor::new(vec![idx.len(), n], out)?
        };
        self.push("select_rows", value, Op::SelectRows(a.0, idx.to_vec()))
    }

    pub fn select_entries(&self, a: Var, pos: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let mut out = Vec::with_capacity(pos.len());
            for &p in pos {
                if p >= ta.numel() {
                    return Err(Error::invalid(format!(
                        "select_entries: flat index {p} out of range"
                    )));
                }
                out.push(ta.data[p]);
            }
            Tensor::new(vec![pos.len(), 1], out)?
        };
        self.push(
            "select_entries",
            value,
            Op::SelectEntries(a.0, pos.to_vec()),
        )
    }

    /// Accumulate the [k,1] column `src` into a fresh zero matrix of `shape`
    /// at the given flat positions.
    pub fn scatter_entries(&self, src: Var, pos: &[usize], shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[src.0].value;
            if ts.numel() != pos.len() {
                return Err(Error::invalid(format!(
                    "scatter_entries: {} sources for {} positions",
                    ts.numel(),
                    pos.len()
                )));
            }
            let mut out = Tensor::zeros(shape);
            for (&p, &v) in pos.iter().zip(ts.data.iter()) {
                out.data[p] += v;
            }
            out
        };
        self.push(
            "scatter_entries",
            value,
            Op::ScatterEntries(src.0, pos.to_vec()),
        )
    }

    /// Sum rows of `src` into `nseg` buckets; row p lands in bucket `seg[p]`.
    pub fn segment_sum(&self, src: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[src.0].value;
            if ts.rows() != seg.len() {
                return Err(Error::invalid(format!(
                    "segment_sum: {} rows but {} segment ids",
                    ts.rows(),
                    seg.len()
                )));
            }
            let n = ts.cols();
            let mut out = Tensor::zeros(&[nseg, n]);
            for (p, &s) in seg.iter().enumerate() {
                let row = ts.row_slice(p);
                let orow = &mut out.data[s * n..(s + 1) * n];
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    *o += v;
                }
            }
            out
        };
        self.push("segment_sum", value, Op::SegmentSum(src.0, seg.to_vec()))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_axis0(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = (ta.rows(), ta.cols());
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &v) in out.iter_mut().zip(ta.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::new(vec![1, n], out)?
        };
        self.push("sum_axis0", value, Op::SumAxis0(a.0))
    }

    pub fn sum_axis1(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = (ta.rows(), ta.cols());
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = ta.row_slice(i).iter().sum();
            }
            let _ = n;
            Tensor::new(vec![m, 1], out)?
        };
        self.push("sum_axis1", value, Op::SumAxis1(a.0))
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data.iter().sum())
        };
        self.push("sum_all", value, Op::SumAll(a.0))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.numel()
        };
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn mean_axis0(&self, a: Var) -> Result<Var> {
        let m = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.rows()
        };
        let s = self.sum_axis0(a)?;
        self.scale(s, 1.0 / m as f64)
    }

    // ---- nonlinearities --------------------------------------------------

    pub fn exp(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f64::exp);
        self.push("exp", value, Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f64::ln);
        self.push("log", value, Op::Log(a.0))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a.0))
    }

    /// softplus_beta(x) = beta * ln(1 + exp(x / beta))
    pub fn softplus(&self, a: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::invalid("softplus: beta must be positive"));
        }
        let value = self.nodes.borrow()[a.0]
            .value
            .map(|x| softplus_beta(x, beta));
        self.push("softplus", value, Op::Softplus(a.0, beta))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.cols() == 0 {
                return Err(Error::invalid("softmax_rows: empty rows"));
            }
            let (m, n) = (ta.rows(), ta.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = ta.row_slice(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * n..(i + 1) * n];
                let mut z = 0.0;
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    *o = (v - mx).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            Tensor::new(ta.shape.clone(), out)?
        };
        self.push("softmax_rows", value, Op::SoftmaxRows(a.0))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let tg = &nodes[gamma.0].value;
            let tb = &nodes[beta.0].value;
            let n = tx.cols();
            if tg.numel() != n || tb.numel() != n {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape.clone(),
                    rhs: tg.shape.clone(),
                });
            }
            let m = tx.rows();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = tx.row_slice(i);
                let (mu, istd) = row_moments(row, eps);
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = (row[j] - mu) * istd * tg.data[j] + tb.data[j];
                }
            }
            Tensor::new(tx.shape.clone(), out)?
        };
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Inverted dropout: keeps are scaled by 1/(1-rate) so the expectation is
    /// the identity. Inactive outside training or at rate 0.
    pub fn dropout(&self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout: rate {rate} not in [0,1)")));
        }
        if rate == 0.0 || !self.training.get() {
            return Ok(a);
        }
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let keep = 1.0 - rate;
            let mut rng = self.dropout_rng.borrow_mut();
            let mask: Vec<f64> = (0..ta.numel())
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let data = ta
                .data
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| v * m)
                .collect();
            (Tensor::new(ta.shape.clone(), data)?, mask)
        };
        self.push("dropout", value, Op::Dropout(a.0, mask))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns adjoints for every node that
    /// the loss depends on; untouched leaves simply have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(nodes[id].op, Op::Leaf);
            match &nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ta = &nodes[*a].value;
                    let tb = &nodes[*b].value;
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA += g @ B^T
                    let bt = tb.transpose2();
                    let mut da = take_or_zeros(&mut adj[*a], &ta.shape);
                    matmul_into(&g.data, &bt.data, m, n, k, &mut da.data);
                    adj[*a] = Some(da);
                    // dB += A^T @ g
                    let at = ta.transpose2();
                    let mut db = take_or_zeros(&mut adj[*b], &tb.shape);
                    matmul_into(&at.data, &g.data, k, m, n, &mut db.data);
                    adj[*b] = Some(db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &g.data, 1.0);
                    accumulate(&mut adj[*b], &nodes[*b].value.shape, &g.data, 1.0);
                }
                Op::AddBias(a, b) => {
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &g.data, 1.0);
                    let n = nodes[*b].value.numel();
                    let mut db = take_or_zeros(&mut adj[*b], &nodes[*b].value.shape);
                    for (i, &gv) in g.data.iter().enumerate() {
                        db.data[i % n] += gv;
                    }
                    adj[*b] = Some(db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &g.data, 1.0);
                    accumulate(&mut adj[*b], &nodes[*b].value.shape, &g.data, -1.0);
                }
                Op::Mul(a, b) => {
                    let prod_b: Vec<f64> = g
                        .data
                        .iter()
                        .zip(nodes[*b].value.data.iter())
                        .map(|(&g, &b)| g * b)
                        .collect();
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &prod_b, 1.0);
                    let prod_a: Vec<f64> = g
                        .data
                        .iter()
                        .zip(nodes[*a].value.data.iter())
                        .map(|(&g, &a)| g * a)
                        .collect();
                    accumulate(&mut adj[*b], &nodes[*b].value.shape, &prod_a, 1.0);
                }
                Op::MulCol(a, c) => {
                    let ta = &nodes[*a].value;
                    let tc = &nodes[*c].value;
                    let n = ta.cols();
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * tc.data[i / n])
                        .collect();
                    accumulate(&mut adj[*a], &ta.shape, &da, 1.0);
                    let mut dc = take_or_zeros(&mut adj[*c], &tc.shape);
                    for (i, (&gv, &av)) in g.data.iter().zip(ta.data.iter()).enumerate() {
                        dc.data[i / n] += gv * av;
                    }
                    adj[*c] = Some(dc);
                }
                Op::Scale(a, cf) => {
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &g.data, *cf);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &g.data, 1.0);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose2();
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &gt.data, 1.0);
                }
                Op::Reshape(a) => {
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &g.data, 1.0);
                }
                Op::ConcatCols(parts, widths) => {
                    let total: usize = widths.iter().sum();
                    let m = nodes[id].value.rows();
                    let mut off = 0;
                    for (p, &w) in parts.iter().zip(widths.iter()) {
                        let mut dp = take_or_zeros(&mut adj[*p], &nodes[*p].value.shape);
                        for i in 0..m {
                            for j in 0..w {
                                dp.data[i * w + j] += g.data[i * total + off + j];
                            }
                        }
                        adj[*p] = Some(dp);
                        off += w;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let n = nodes[*a].value.cols();
                    let mut da = take_or_zeros(&mut adj[*a], &nodes[*a].value.shape);
                    for (p, &i) in idx.iter().enumerate() {
                        let grow = &g.data[p * n..(p + 1) * n];
                        let drow = &mut da.data[i * n..(i + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                            *d += gv;
                        }
                    }
                    adj[*a] = Some(da);
                }
                Op::SelectEntries(a, pos) => {
                    let mut da = take_or_zeros(&mut adj[*a], &nodes[*a].value.shape);
                    for (p, &fp) in pos.iter().enumerate() {
                        da.data[fp] += g.data[p];
                    }
                    adj[*a] = Some(da);
                }
                Op::ScatterEntries(src, pos) => {
                    let mut ds = take_or_zeros(&mut adj[*src], &nodes[*src].value.shape);
                    for (p, &fp) in pos.iter().enumerate() {
                        ds.data[p] += g.data[fp];
                    }
                    adj[*src] = Some(ds);
                }
                Op::SegmentSum(src, seg) => {
                    let n = nodes[*src].value.cols();
                    let mut ds = take_or_zeros(&mut adj[*src], &nodes[*src].value.shape);
                    for (p, &s) in seg.iter().enumerate() {
                        let grow = &g.data[s * n..(s + 1) * n];
                        let drow = &mut ds.data[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                            *d += gv;
                        }
                    }
                    adj[*src] = Some(ds);
                }
                Op::SumAxis0(a) => {
                    let ta = &nodes[*a].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = take_or_zeros(&mut adj[*a], &ta.shape);
                    for i in 0..m {
                        for j in 0..n {
                            da.data[i * n + j] += g.data[j];
                        }
                    }
                    adj[*a] = Some(da);
                }
                Op::SumAxis1(a) => {
                    let ta = &nodes[*a].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = take_or_zeros(&mut adj[*a], &ta.shape);
                    for i in 0..m {
                        for j in 0..n {
                            da.data[i * n + j] += g.data[i];
                        }
                    }
                    adj[*a] = Some(da);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let ta = &nodes[*a].value;
                    let mut da = take_or_zeros(&mut adj[*a], &ta.shape);
                    for d in da.data.iter_mut() {
                        *d += gv;
                    }
                    adj[*a] = Some(da);
                }
                Op::Exp(a) => {
                    let y = &nodes[id].value;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &dx, 1.0);
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&g, &x)| g / x)
                        .collect();
                    accumulate(&mut adj[*a], &x.shape, &dx, 1.0);
                }
                Op::Tanh(a) => {
                    let y = &nodes[id].value;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &dx, 1.0);
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[id].value;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &dx, 1.0);
                }
                Op::Softplus(a, beta) => {
                    let x = &nodes[*a].value;
                    let b = *beta;
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&g, &x)| g * sigmoid(x / b))
                        .collect();
                    accumulate(&mut adj[*a], &x.shape, &dx, 1.0);
                }
                Op::SoftmaxRows(a) => {
                    let y = &nodes[id].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = y.row_slice(i);
                        let gr = &g.data[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &dx, 1.0);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let tx = &nodes[*x].value;
                    let tg = &nodes[*gamma].value;
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let row = tx.row_slice(i);
                        let (mu, istd) = row_moments(row, *eps);
                        let gr = &g.data[i * n..(i + 1) * n];
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * istd).collect();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_x = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * tg.data[j];
                            mean_dxhat += dxh;
                            mean_dxhat_x += dxh * xhat[j];
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_x /= n as f64;
                        for j in 0..n {
                            let dxh = gr[j] * tg.data[j];
                            dx[i * n + j] = istd * (dxh - mean_dxhat - xhat[j] * mean_dxhat_x);
                        }
                    }
                    accumulate(&mut adj[*x], &tx.shape, &dx, 1.0);
                    accumulate(&mut adj[*gamma], &tg.shape, &dgamma, 1.0);
                    accumulate(&mut adj[*beta], &nodes[*beta].value.shape, &dbeta, 1.0);
                }
                Op::Dropout(a, mask) => {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(mask.iter())
                        .map(|(&g, &m)| g * m)
                        .collect();
                    accumulate(&mut adj[*a], &nodes[*a].value.shape, &dx, 1.0);
                }
            }
            if keep {
                adj[id] = Some(g);
            }
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|o| o.as_ref())
    }

    /// Gradient of a leaf; a leaf the loss never touched has gradient zero.
    pub fn of(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn take_or_zeros(slot: &mut Option<Tensor>, shape: &[usize]) -> Tensor {
    slot.take().unwrap_or_else(|| Tensor::zeros(shape))
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contrib: &[f64], scale: f64) {
    let mut t = take_or_zeros(slot, shape);
    for (d, &c) in t.data.iter_mut().zip(contrib.iter()) {
        *d += c * scale;
    }
    *slot = Some(t);
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_beta(x: f64, beta: f64) -> f64 {
    let z = x / beta;
    beta * (z.max(0.0) + (-z.abs()).exp().ln_1p())
}
