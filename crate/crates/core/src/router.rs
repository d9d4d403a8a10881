//! Component-level importance scores and top-k routing.
//!
//! Each component's anchor token is projected by two separate linear maps
//! into a router query and a router key. Per head `h`,
//! `o[h][i][j] = act(q_i . k_j / sqrt(d_head))`, with `act` a sigmoid by
//! default. Routing picks, for every (head, component), the `k` other
//! components whose full vecset tokens enter its global attention.

use std::rc::Rc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    /// Softmax over the other components of each row.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub k_fraction: f64,
    pub activation: Activation,
    /// One router per attention head; otherwise a single router shared by all heads.
    pub multi_head: bool,
    /// Stochastic routing during training; deterministic top-k otherwise.
    pub load_balance: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { k_fraction: 0.25, activation: Activation::Sigmoid, multi_head: true, load_balance: true }
    }
}

impl RouterConfig {
    pub fn router_heads(&self, heads: usize) -> usize {
        if self.multi_head {
            heads
        } else {
            1
        }
    }
}

/// `clamp(round(fraction * n), 1, n - 1)`; zero when there is no other component.
pub fn top_k_count(n: usize, fraction: f64) -> usize {
    if n <= 1 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Scores `o[h][i][j]`, stored as an `(heads * n) x n` matrix with row `h * n + i`.
/// The diagonal is never read.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    heads: usize,
    n: usize,
    values: Tensor,
}

impl ImportanceMatrix {
    pub fn new(heads: usize, n: usize, values: Tensor) -> Result<Self> {
        if values.shape() != [heads * n, n] {
            return Err(Error::Shape(format!("importance {:?} for {heads} heads x {n}", values.shape())));
        }
        Ok(Self { heads, n, values })
    }

    pub fn filled(heads: usize, n: usize, value: f64) -> Self {
        Self { heads, n, values: Tensor::full(&[heads * n, n], value) }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.values.at(h * self.n + i, j)
    }

    pub fn set(&mut self, h: usize, i: usize, j: usize, value: f64) {
        let n = self.n;
        self.values.row_mut(h * n + i)[j] = value;
    }

    /// Flat offset of `o[h][i][j]` in the backing tensor.
    pub fn offset(&self, h: usize, i: usize, j: usize) -> usize {
        (h * self.n + i) * self.n + j
    }

    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        self.values.row(h * self.n + i)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Every off-diagonal entry must be a usable gain.
    pub fn validate_gains(&self) -> Result<()> {
        for h in 0..self.heads {
            for i in 0..self.n {
                for j in (0..self.n).filter(|&j| j != i) {
                    let o = self.get(h, i, j);
                    if !o.is_finite() {
                        return Err(Error::NonFinite(format!("importance [{h}][{i}][{j}]")));
                    }
                    if o <= 0.0 {
                        return Err(Error::NonPositiveGain(o));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn init_router<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut R) -> Result<()> {
    let std = 1.0 / (d_model as f64).sqrt();
    store.insert(format!("{prefix}.wq"), Tensor::randn(&[d_model, d_model], std, rng))?;
    store.insert(format!("{prefix}.wk"), Tensor::randn(&[d_model, d_model], std, rng))
}

/// Importance scores from the `n x D` anchor rows; returns the
/// `(router_heads * n) x n` score matrix as a differentiable node.
pub fn importance_on_graph(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    anchors: Var,
    router_heads: usize,
    activation: Activation,
) -> Result<Var> {
    let (n, d) = (g.value(anchors).rows(), g.value(anchors).cols());
    if n == 0 {
        return Err(Error::InvalidArgument("importance of zero components".into()));
    }
    if router_heads == 0 || d % router_heads != 0 {
        return Err(Error::Config(format!("model width {d} not divisible by {router_heads} heads")));
    }
    let dh = d / router_heads;
    let wq = g.param(params, &format!("{prefix}.wq"))?;
    let wk = g.param(params, &format!("{prefix}.wk"))?;
    let q = g.matmul(anchors, wq);
    let k = g.matmul(anchors, wk);
    let per_head: Vec<Var> = (0..router_heads)
        .map(|h| {
            let qh = g.slice(q, 0..n, h * dh..(h + 1) * dh);
            let kh = g.slice(k, 0..n, h * dh..(h + 1) * dh);
            let logits = g.matmul_t(qh, kh);
            g.scale(logits, 1.0 / (dh as f64).sqrt())
        })
        .collect();
    let logits = g.concat_rows(&per_head);
    Ok(match activation {
        Activation::Softmax if n > 1 => {
            let mask = Mask::from_fn(router_heads * n, n, |r, j| r % n != j);
            g.softmax_rows(logits, Some(Rc::new(mask)))
        }
        _ => g.sigmoid(logits),
    })
}

/// Importance scores without gradient tracking.
pub fn importance_scores(
    anchors: &Tensor,
    params: &ParamStore,
    prefix: &str,
    router_heads: usize,
    activation: Activation,
) -> Result<ImportanceMatrix> {
    if !anchors.is_finite() {
        return Err(Error::NonFinite("anchor tokens".into()));
    }
    let mut g = Graph::inference();
    let a = g.constant(anchors.clone());
    let o = importance_on_graph(&mut g, params, prefix, a, router_heads, activation)?;
    g.check_finite()?;
    ImportanceMatrix::new(router_heads, anchors.rows(), g.value(o).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Deterministic,
    Stochastic,
}

/// Selected components per (router head, querying component), ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingDecision {
    pub k: usize,
    pub mode: RoutingMode,
    heads: usize,
    n: usize,
    selected: Vec<Vec<usize>>,
}

impl RoutingDecision {
    /// Builds a decision from explicit selections indexed `h * n + i`.
    pub fn from_selected(k: usize, mode: RoutingMode, heads: usize, n: usize, selected: Vec<Vec<usize>>) -> Result<Self> {
        if selected.len() != heads * n {
            return Err(Error::Shape(format!("{} selections for {heads} heads x {n}", selected.len())));
        }
        let mut out = Self { k, mode, heads, n, selected };
        for (slot, s) in out.selected.iter_mut().enumerate() {
            let i = slot % n;
            s.sort_unstable();
            for w in s.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::DuplicateComponent(w[0]));
                }
            }
            if s.contains(&i) {
                return Err(Error::DuplicateComponent(i));
            }
            if let Some(&j) = s.iter().find(|&&j| j >= n) {
                return Err(Error::InvalidArgument(format!("routed component {j} out of range {n}")));
            }
        }
        Ok(out)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn selected(&self, h: usize, i: usize) -> &[usize] {
        &self.selected[h * self.n + i]
    }

    pub fn is_selected(&self, h: usize, i: usize, j: usize) -> bool {
        self.selected(h, i).binary_search(&j).is_ok()
    }

    /// Applies a component relabeling: component `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Shape(format!("permutation of {} for {} components", perm.len(), self.n)));
        }
        let mut selected = vec![Vec::new(); self.heads * self.n];
        for h in 0..self.heads {
            for i in 0..self.n {
                selected[h * self.n + perm[i]] = self.selected(h, i).iter().map(|&j| perm[j]).collect();
            }
        }
        Self::from_selected(self.k, self.mode, self.heads, self.n, selected)
    }
}

/// Top-k by score with ties broken toward the smaller index.
pub fn route_deterministic(o: &ImportanceMatrix, k: usize) -> RoutingDecision {
    let n = o.n();
    let take = k.min(n.saturating_sub(1));
    let mut selected = Vec::with_capacity(o.heads() * n);
    for h in 0..o.heads() {
        for i in 0..n {
            let row = o.row(h, i);
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut s = cand[..take].to_vec();
            s.sort_unstable();
            selected.push(s);
        }
    }
    RoutingDecision { k, mode: RoutingMode::Deterministic, heads: o.heads(), n, selected }
}

/// Sequential draws without replacement, each proportional to the remaining
/// scores; falls back to uniform when the remaining scores are unusable.
pub fn route_stochastic<R: Rng + ?Sized>(o: &ImportanceMatrix, k: usize, rng: &mut R) -> Result<RoutingDecision> {
    let n = o.n();
    if k > n.saturating_sub(1) {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {} other components", n.saturating_sub(1))));
    }
    let mut selected = Vec::with_capacity(o.heads() * n);
    for h in 0..o.heads() {
        for i in 0..n {
            let row = o.row(h, i);
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut s = Vec::with_capacity(k);
            for _ in 0..k {
                let weights = cand.iter().map(|&j| if row[j].is_finite() { row[j].max(0.0) } else { 0.0 });
                let pos = match WeightedIndex::new(weights) {
                    Ok(dist) => dist.sample(rng),
                    Err(_) => rng.random_range(0..cand.len()),
                };
                s.push(cand.remove(pos));
            }
            s.sort_unstable();
            selected.push(s);
        }
    }
    Ok(RoutingDecision { k, mode: RoutingMode::Stochastic, heads: o.heads(), n, selected })
}
