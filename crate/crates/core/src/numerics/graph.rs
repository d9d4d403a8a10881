//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates gradients for nodes that depend on a
//! parameter. Index-valued inputs (gather rows, attention key rows, gain
//! indices) are constants: routing decisions never carry gradient.

use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use super::attention::{attention_probs, scale_rows};
use super::{attend, gelu, gelu_grad, gemm, normalize_row, sigmoid, GainTarget, Mask, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-key gains read from a differentiable tensor.
#[derive(Clone, Debug)]
pub struct Gains {
    pub source: Var,
    /// Flat index into `source` for each key; `None` keeps the key ungated.
    pub index: Rc<[Option<usize>]>,
    pub target: GainTarget,
}

/// Arguments of the fused attention op.
///
/// Queries are rows `q_rows`, columns `q_cols` of `q`; the context is the rows
/// `key_rows` (all rows when `None`) of `k` and `v`, restricted to `k_cols`
/// and `v_cols`. Column ranges select a head out of a wide projection.
#[derive(Clone, Debug)]
pub struct AttnArgs {
    pub q: Var,
    pub q_rows: Option<Range<usize>>,
    pub q_cols: Option<Range<usize>>,
    pub k: Var,
    pub k_cols: Option<Range<usize>>,
    pub v: Var,
    pub v_cols: Option<Range<usize>>,
    pub key_rows: Option<Rc<[usize]>>,
    pub gains: Option<Gains>,
    pub mask: Option<Rc<Mask>>,
    pub scale: f64,
}

impl AttnArgs {
    pub fn new(q: Var, k: Var, v: Var, scale: f64) -> Self {
        Self {
            q,
            q_rows: None,
            q_cols: None,
            k,
            k_cols: None,
            v,
            v_cols: None,
            key_rows: None,
            gains: None,
            mask: None,
            scale,
        }
    }
}

#[derive(Debug)]
struct ResolvedAttn {
    q: Var,
    q_rows: Range<usize>,
    q_cols: Range<usize>,
    k: Var,
    k_cols: Range<usize>,
    v: Var,
    v_cols: Range<usize>,
    key_rows: Rc<[usize]>,
    gains: Option<Gains>,
    mask: Option<Rc<Mask>>,
    scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Modulate { x: Var, shift: Var, scale: Var },
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SoftmaxRows { x: Var },
    Attention(Box<ResolvedAttn>),
    GatherRows { x: Var, idx: Rc<[usize]> },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    Mse { pred: Var, target: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) | Op::MatMulT(..) => "matmul",
            Op::Add(..) | Op::AddRow(..) => "add",
            Op::Mul(..) | Op::MulRow(..) | Op::Scale(..) => "mul",
            Op::Modulate { .. } => "modulate",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows { .. } => "softmax",
            Op::Attention(_) => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::Slice { .. } => "slice",
            Op::ConcatRows(_) | Op::ConcatCols(_) => "concat",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    grad_enabled: bool,
    non_finite: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            grad_enabled: true,
            non_finite: None,
        }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any op so far produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(format!("op {op}"))),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Leaf bound to a named parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?
            .clone();
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = self.grad_enabled;
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_t shapes");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), true, 0.0, &mut out);
        let value = Tensor::matrix(m, n, out).unwrap();
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add shapes");
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a single row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(a), self.value(row), |x, r| x + r);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shapes");
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(a), self.value(row), |x, r| x * r);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `x * (1 + scale) + shift`, with `shift` and `scale` row vectors.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let scaled = broadcast_rows(self.value(x), self.value(scale), |v, s| v * (1.0 + s));
        let value = broadcast_rows(&scaled, self.value(shift), |v, b| v + b);
        self.push(value, Op::Modulate { x, shift, scale }, &[x, shift, scale])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        let rstd = value.data_mut().chunks_exact_mut(c).map(normalize_row).collect();
        self.push(value, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Row-wise softmax; masked entries get probability zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<Mask>>) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        for (r, row) in value.data_mut().chunks_exact_mut(c).enumerate() {
            super::attention::softmax_in_place(row, mask.as_ref().map(|m| m.row(r)));
        }
        self.push(value, Op::SoftmaxRows { x }, &[x])
    }

    pub fn attention(&mut self, args: AttnArgs) -> Var {
        let resolved = self.resolve_attn(args);
        let (q, keys, values) = self.attn_operands(&resolved);
        let nq = resolved.q_rows.len();
        let (d, dv, m) = (resolved.q_cols.len(), resolved.v_cols.len(), resolved.key_rows.len());
        let mut out = vec![0.0; nq * dv];
        attend(&q, nq, &keys, &values, m, d, dv, resolved.mask.as_deref(), resolved.scale, &mut out);
        let value = Tensor::matrix(nq, dv, out).unwrap();
        let mut inputs = vec![resolved.q, resolved.k, resolved.v];
        if let Some(g) = &resolved.gains {
            inputs.push(g.source);
        }
        self.push(value, Op::Attention(Box::new(resolved)), &inputs)
    }

    fn resolve_attn(&self, a: AttnArgs) -> ResolvedAttn {
        let (qv, kv, vv) = (self.value(a.q), self.value(a.k), self.value(a.v));
        let q_rows = a.q_rows.unwrap_or(0..qv.rows());
        let q_cols = a.q_cols.unwrap_or(0..qv.cols());
        let k_cols = a.k_cols.unwrap_or(0..kv.cols());
        let v_cols = a.v_cols.unwrap_or(0..vv.cols());
        assert_eq!(kv.rows(), vv.rows(), "attention key/value rows");
        assert_eq!(q_cols.len(), k_cols.len(), "attention head width");
        assert!(q_rows.end <= qv.rows() && q_cols.end <= qv.cols(), "query block out of range");
        assert!(k_cols.end <= kv.cols() && v_cols.end <= vv.cols(), "key/value columns out of range");
        let key_rows: Rc<[usize]> = a.key_rows.unwrap_or_else(|| (0..kv.rows()).collect());
        assert!(key_rows.iter().all(|&r| r < kv.rows()), "key row out of range");
        if let Some(g) = &a.gains {
            assert_eq!(g.index.len(), key_rows.len(), "one gain slot per key");
            let n = self.value(g.source).len();
            assert!(g.index.iter().flatten().all(|&i| i < n), "gain index out of range");
        }
        if let Some(mask) = &a.mask {
            assert_eq!((mask.n_queries(), mask.n_keys()), (q_rows.len(), key_rows.len()), "mask shape");
            mask.validate().expect("attention mask");
        } else {
            assert!(!key_rows.is_empty() || q_rows.is_empty(), "empty attention context");
        }
        ResolvedAttn {
            q: a.q,
            q_rows,
            q_cols,
            k: a.k,
            k_cols,
            v: a.v,
            v_cols,
            key_rows,
            gains: a.gains,
            mask: a.mask,
            scale: a.scale,
        }
    }

    fn gain_values(&self, a: &ResolvedAttn) -> Option<Vec<f64>> {
        a.gains.as_ref().map(|g| {
            let src = self.value(g.source).data();
            g.index.iter().map(|i| i.map_or(1.0, |i| src[i])).collect()
        })
    }

    /// Contiguous query block and gathered (ungated) keys and values.
    fn attn_raw(&self, a: &ResolvedAttn) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let q = gather_block(self.value(a.q), a.q_rows.clone(), &a.q_cols);
        let keys = gather_block(self.value(a.k), a.key_rows.iter().copied(), &a.k_cols);
        let values = gather_block(self.value(a.v), a.key_rows.iter().copied(), &a.v_cols);
        (q, keys, values)
    }

    /// Contiguous query block and gain-applied keys and values.
    fn attn_operands(&self, a: &ResolvedAttn) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (q, mut keys, mut values) = self.attn_raw(a);
        if let (Some(g), Some(gains)) = (&a.gains, self.gain_values(a)) {
            match g.target {
                GainTarget::Key => scale_rows(&mut keys, a.k_cols.len(), gains.into_iter()),
                GainTarget::Value => scale_rows(&mut values, a.v_cols.len(), gains.into_iter()),
            }
        }
        (q, keys, values)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data = gather_block(xv, idx.iter().copied(), &(0..c));
        let value = Tensor::matrix(idx.len(), c, data).unwrap();
        self.push(value, Op::GatherRows { x, idx }, &[x])
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Var {
        let xv = self.value(x);
        assert!(rows.end <= xv.rows() && cols.end <= xv.cols(), "slice out of range");
        let data = gather_block(xv, rows.clone(), &cols);
        let value = Tensor::matrix(rows.len(), cols.len(), data).unwrap();
        self.push(value, Op::Slice { x, rows, cols }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Var {
        let c = self.value(x).cols();
        self.slice(x, rows, 0..c)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors).expect("concat_rows");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat_cols rows");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data).unwrap();
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::matrix(1, 1, vec![self.value(x).sum()]).unwrap();
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.len(), t.len(), "mse length");
        let n = p.len() as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::matrix(1, 1, vec![s / n]).unwrap();
        self.push(value, Op::Mse { pred, target }, &[pred, target])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            self.backprop_node(node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, 1.0, dy.data(), false, bv.data(), true, 1.0, da.data_mut());
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, 1.0, av.data(), true, dy.data(), false, 1.0, db.data_mut());
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, 1.0, dy.data(), false, bv.data(), false, 1.0, da.data_mut());
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(n, m, k, 1.0, dy.data(), true, av.data(), false, 1.0, db.data_mut());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        axpy(d.data_mut(), dy.data(), 1.0);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da.data_mut(), dy.data(), 1.0);
                }
                if let Some(dr) = self.slot(grads, *row) {
                    col_sums_into(dr.data_mut(), dy, |_, g| g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), o) in da.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *d += g * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, g), o) in db.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *d += g * o;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if let Some(da) = self.slot(grads, *a) {
                    let c = rv.len();
                    for (i, (d, g)) in da.data_mut().iter_mut().zip(dy.data()).enumerate() {
                        *d += g * rv.data()[i % c];
                    }
                }
                if let Some(dr) = self.slot(grads, *row) {
                    col_sums_into(dr.data_mut(), dy, |i, g| g * av.data()[i]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da.data_mut(), dy.data(), *c);
                }
            }
            Op::Modulate { x, shift, scale } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if let Some(dx) = self.slot(grads, *x) {
                    let c = sv.len();
                    for (i, (d, g)) in dx.data_mut().iter_mut().zip(dy.data()).enumerate() {
                        *d += g * (1.0 + sv.data()[i % c]);
                    }
                }
                if let Some(ds) = self.slot(grads, *scale) {
                    col_sums_into(ds.data_mut(), dy, |i, g| g * xv.data()[i]);
                }
                if let Some(db) = self.slot(grads, *shift) {
                    col_sums_into(db.data_mut(), dy, |_, g| g);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, g), s) in dx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *d += g * s * (1.0 - s);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, g), &xi) in dx.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                        *d += g * gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = y.cols();
                    let n = c as f64;
                    for (r, &rs) in rstd.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        let dr = &mut dx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] += rs * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, .. } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = &mut dx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention(a) => self.backprop_attention(a, dy, grads),
            Op::GatherRows { x, idx } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = dx.cols();
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut dx.data_mut()[src * c..(src + 1) * c], dy.row(r), 1.0);
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = dx.cols();
                    for (r, src) in rows.clone().enumerate() {
                        let dst = &mut dx.data_mut()[src * c + cols.start..src * c + cols.end];
                        axpy(dst, dy.row(r), 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp.data_mut(), &dy.data()[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..dy.rows() {
                            let src = &dy.row(r)[col..col + w];
                            axpy(&mut dp.data_mut()[r * w..(r + 1) * w], src, 1.0);
                        }
                    }
                    col += w;
                }
            }
            Op::Transpose(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx.data_mut(), dy.transpose().data(), 1.0);
                }
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.data_mut() {
                        *d += g;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = 2.0 * dy.data()[0] / p.len() as f64;
                if let Some(dp) = self.slot(grads, *pred) {
                    for ((d, a), b) in dp.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                        *d += scale * (a - b);
                    }
                }
                if let Some(dt) = self.slot(grads, *target) {
                    for ((d, a), b) in dt.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                        *d -= scale * (a - b);
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, a: &ResolvedAttn, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let (q, raw_keys, raw_values) = self.attn_raw(a);
        let (_, keys, values) = self.attn_operands(a);
        let nq = a.q_rows.len();
        let (d, dv, m) = (a.q_cols.len(), a.v_cols.len(), a.key_rows.len());
        let p = attention_probs(&q, nq, &keys, m, d, a.mask.as_deref(), a.scale);

        // dV = P^T dO ; dP = dO V^T ; dS = P * (dP - rowdot) ; dQ = s dS K ; dK = s dS^T Q
        let mut d_values = vec![0.0; m * dv];
        gemm(m, nq, dv, 1.0, &p, true, dy.data(), false, 0.0, &mut d_values);
        let mut ds = vec![0.0; nq * m];
        gemm(nq, dv, m, 1.0, dy.data(), false, &values, true, 0.0, &mut ds);
        for (pr, dr) in p.chunks_exact(m).zip(ds.chunks_exact_mut(m)) {
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, &pi) in dr.iter_mut().zip(pr) {
                *x = pi * (*x - dot);
            }
        }
        let mut dq = vec![0.0; nq * d];
        gemm(nq, m, d, a.scale, &ds, false, &keys, false, 0.0, &mut dq);
        let mut d_keys = vec![0.0; m * d];
        gemm(m, nq, d, a.scale, &ds, true, &q, false, 0.0, &mut d_keys);

        // d_keys / d_values are w.r.t. the gain-applied operands.
        if let (Some(g), Some(gains)) = (&a.gains, self.gain_values(a)) {
            let (gated_grad, raw, width) = match g.target {
                GainTarget::Key => (&mut d_keys, &raw_keys, d),
                GainTarget::Value => (&mut d_values, &raw_values, dv),
            };
            if let Some(dg) = self.slot(grads, g.source) {
                for r in 0..m {
                    if let Some(i) = g.index[r] {
                        let row_g = &gated_grad[r * width..(r + 1) * width];
                        let row_x = &raw[r * width..(r + 1) * width];
                        dg.data_mut()[i] += row_g.iter().zip(row_x).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            scale_rows(gated_grad, width, gains.iter().copied());
        }

        if let Some(dqt) = self.slot(grads, a.q) {
            let c = dqt.cols();
            for (r, src) in a.q_rows.clone().enumerate() {
                let dst = &mut dqt.data_mut()[src * c + a.q_cols.start..src * c + a.q_cols.end];
                axpy(dst, &dq[r * d..(r + 1) * d], 1.0);
            }
        }
        for (var, buf, cols, w) in [(a.k, &d_keys, &a.k_cols, d), (a.v, &d_values, &a.v_cols, dv)] {
            if let Some(dt) = self.slot(grads, var) {
                let c = dt.cols();
                for (r, &src) in a.key_rows.iter().enumerate() {
                    let dst = &mut dt.data_mut()[src * c + cols.start..src * c + cols.end];
                    axpy(dst, &buf[r * w..(r + 1) * w], 1.0);
                }
            }
        }
    }

    /// Gradient accumulator for `v`, created on first use; `None` when `v`
    /// does not lead to a parameter.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape())))
    }

    /// Adds `weight * dL/dparam` into the store's gradients.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore, weight: f64) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = grads.get(*v) {
                store.accumulate_grad(name, g, weight)?;
            }
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = a.cols();
    assert_eq!(row.len(), c, "row broadcast width");
    let mut out = a.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x = f(*x, row.data()[i % c]);
    }
    out
}

fn gather_block(t: &Tensor, rows: impl Iterator<Item = usize>, cols: &Range<usize>) -> Vec<f64> {
    let c = t.cols();
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(&t.data()[r * c + cols.start..r * c + cols.end]);
    }
    out
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn col_sums_into(dst: &mut [f64], dy: &Tensor, f: impl Fn(usize, f64) -> f64) {
    let c = dst.len();
    for (i, &g) in dy.data().iter().enumerate() {
        dst[i % c] += f(i, g);
    }
}
