use serde::{Deserialize, Serialize};

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Boolean attention mask, `true` = the query row may attend the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n_queries: usize,
    n_keys: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self { n_queries, n_keys, allow: vec![true; n_queries * n_keys] }
    }

    pub fn from_fn(n_queries: usize, n_keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(n_queries * n_keys);
        for q in 0..n_queries {
            for k in 0..n_keys {
                allow.push(f(q, k));
            }
        }
        Self { n_queries, n_keys, allow }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n_keys + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.n_keys..(q + 1) * self.n_keys]
    }

    pub fn set(&mut self, q: usize, k: usize, allowed: bool) {
        self.allow[q * self.n_keys + k] = allowed;
    }

    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Every query row must see at least one key.
    pub fn validate(&self) -> Result<()> {
        match (0..self.n_queries).find(|&q| !self.row(q).iter().any(|&a| a)) {
            Some(row) => Err(Error::EmptyAttentionContext { row }),
            None => Ok(()),
        }
    }
}

/// Where importance gains are applied inside attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainTarget {
    /// Gains scale key rows before the dot product (pre-softmax reweighting).
    #[default]
    Key,
    /// Gains scale value rows after the softmax.
    Value,
}

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub mask: Option<Mask>,
    /// One gain per key, each in (0, 1]; `None` means ungated.
    pub key_gains: Option<Vec<f64>>,
    pub scale: f64,
}

impl AttentionSpec {
    /// Ungated, unmasked attention with the usual `1/sqrt(d_head)` scale.
    pub fn new(d_head: usize) -> Self {
        Self { mask: None, key_gains: None, scale: 1.0 / (d_head as f64).sqrt() }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_gains(mut self, gains: Vec<f64>) -> Self {
        self.key_gains = Some(gains);
        self
    }
}

/// Scaled dot-product attention with an optional boolean mask and per-key
/// gains: `logit[q][k] = scale * Q[q] . (gain[k] * K[k])`, masked logits are
/// replaced by `-inf` before the softmax.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec) -> Result<Tensor> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.rows() != nk {
        return Err(Error::Shape(format!(
            "attention q {nq}x{d}, k {}x{}, v {}x{}",
            nk,
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    for (name, t) in [("query", q), ("key", k), ("value", v)] {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("attention {name}")));
        }
    }
    if let Some(mask) = &spec.mask {
        if mask.n_queries() != nq || mask.n_keys() != nk {
            return Err(Error::Shape(format!(
                "mask {}x{} for {nq} queries and {nk} keys",
                mask.n_queries(),
                mask.n_keys()
            )));
        }
        mask.validate()?;
    } else if nk == 0 && nq > 0 {
        return Err(Error::EmptyAttentionContext { row: 0 });
    }
    let mut keys = k.data().to_vec();
    if let Some(gains) = &spec.key_gains {
        if gains.len() != nk {
            return Err(Error::Shape(format!("{} gains for {nk} keys", gains.len())));
        }
        if let Some(&g) = gains.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::NonPositiveGain(g));
        }
        scale_rows(&mut keys, d, gains.iter().copied());
    }
    let dv = v.cols();
    let mut out = vec![0.0; nq * dv];
    attend(q.data(), nq, &keys, v.data(), nk, d, dv, spec.mask.as_ref(), spec.scale, &mut out);
    Tensor::matrix(nq, dv, out)
}

pub(crate) fn scale_rows(buf: &mut [f64], width: usize, gains: impl Iterator<Item = f64>) {
    for (row, g) in buf.chunks_exact_mut(width).zip(gains) {
        for x in row {
            *x *= g;
        }
    }
}

const QUERY_BLOCK: usize = 64;

/// Attention over contiguous buffers: `q` is `nq x d`, `keys` is `nk x d`
/// (already gain-scaled), `values` is `nk x dv`. Queries are processed in
/// blocks so the score buffer stays bounded for long contexts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    q: &[f64],
    nq: usize,
    keys: &[f64],
    values: &[f64],
    nk: usize,
    d: usize,
    dv: usize,
    mask: Option<&Mask>,
    scale: f64,
    out: &mut [f64],
) {
    let mut scores = vec![0.0; QUERY_BLOCK.min(nq) * nk];
    let mut start = 0;
    while start < nq {
        let nb = QUERY_BLOCK.min(nq - start);
        let s = &mut scores[..nb * nk];
        gemm(nb, d, nk, scale, &q[start * d..], false, keys, true, 0.0, s);
        for (r, row) in s.chunks_exact_mut(nk).enumerate() {
            softmax_in_place(row, mask.map(|m| m.row(start + r)));
        }
        gemm(nb, nk, dv, 1.0, s, false, values, false, 0.0, &mut out[start * dv..(start + nb) * dv]);
        start += nb;
    }
}

/// Full probability matrix `nq x nk`; used by the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_probs(
    q: &[f64],
    nq: usize,
    keys: &[f64],
    nk: usize,
    d: usize,
    mask: Option<&Mask>,
    scale: f64,
) -> Vec<f64> {
    let mut p = vec![0.0; nq * nk];
    gemm(nq, d, nk, scale, q, false, keys, true, 0.0, &mut p);
    for (r, row) in p.chunks_exact_mut(nk.max(1)).enumerate().take(nq) {
        softmax_in_place(row, mask.map(|m| m.row(r)));
    }
    p
}

pub(crate) fn softmax_in_place(row: &mut [f64], allow: Option<&[bool]>) {
    if let Some(allow) = allow {
        for (x, &a) in row.iter_mut().zip(allow) {
            if !a {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}
