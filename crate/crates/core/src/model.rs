//! Compositional diffusion transformer.
//!
//! Latents of every component are lifted to model width, packed into
//! compressed and anchor tokens, tagged with a per-component ID embedding
//! and run through alternating local and global blocks. The velocity is read
//! out from the vecset rows only.

use std::rc::Rc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::block::{init_block, init_linear, init_zero_linear, linear, block_forward};
use crate::error::{Error, Result};
use crate::local_block::local_block_on_graph;
use crate::moc_attention::{moc_attention_on_graph, MocConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::router::{
    importance_on_graph, init_router, route_deterministic, route_stochastic, top_k_count, ImportanceMatrix,
    RouterConfig, RoutingDecision,
};
use crate::tokens::{compressed_len, init_packer, pack_on_graph, Segments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Number of (local, global) block pairs.
    pub block_pairs: usize,
    pub vecset_len: usize,
    pub latent_dim: usize,
    pub ffn_mult: usize,
    pub codebook_size: usize,
    /// Side of the square layout grid used as condition.
    pub grid: usize,
    pub router: RouterConfig,
    pub moc: MocConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            block_pairs: 4,
            vecset_len: 32,
            latent_dim: 8,
            ffn_mult: 4,
            codebook_size: crate::tokens::ID_CODEBOOK_SIZE,
            grid: 8,
            router: RouterConfig::default(),
            moc: MocConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if self.vecset_len == 0 || self.latent_dim == 0 || self.block_pairs == 0 || self.ffn_mult == 0 {
            return bad("vecset_len, latent_dim, block_pairs and ffn_mult must be positive".into());
        }
        if self.moc.sigma == 0 {
            return bad("moc.sigma must be at least 1".into());
        }
        if self.codebook_size == 0 || self.grid == 0 {
            return bad("codebook_size and grid must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.router.k_fraction) {
            return bad(format!("router.k_fraction {} outside [0, 1]", self.router.k_fraction));
        }
        Ok(())
    }

    pub fn segments(&self) -> Segments {
        Segments { vecset: self.vecset_len, compressed: compressed_len(self.vecset_len, self.moc.sigma) }
    }

    /// Number of fully attended components per query component.
    pub fn top_k(&self, n: usize) -> usize {
        if self.moc.use_routing {
            top_k_count(n, self.router.k_fraction)
        } else {
            0
        }
    }
}

/// Layout condition; `None` is the learned null condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub layout: Option<Vec<f64>>,
}

impl Condition {
    pub fn layout(grid: Vec<f64>) -> Self {
        Self { layout: Some(grid) }
    }

    pub fn null() -> Self {
        Self { layout: None }
    }

    pub fn is_null(&self) -> bool {
        self.layout.is_none()
    }
}

/// Replaces the condition by the null condition with probability `p_drop`.
pub fn cfg_dropout<R: Rng + ?Sized>(cond: &Condition, p_drop: f64, rng: &mut R) -> Result<Condition> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::InvalidArgument(format!("drop probability {p_drop} outside [0, 1]")));
    }
    Ok(if rng.random::<f64>() < p_drop { Condition::null() } else { cond.clone() })
}

/// How each global block chooses its routed components.
pub enum Routing<'a> {
    Deterministic,
    /// Load-balanced sampling; deterministic when load balancing is disabled.
    Stochastic(&'a mut dyn RngCore),
    /// Reuse decisions, one per global block.
    Fixed(&'a [RoutingDecision]),
}

pub fn init_model<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut s = ParamStore::new();
    init_linear(&mut s, "in", cfg.latent_dim, d, rng)?;
    init_linear(&mut s, "time.fc1", d, d, rng)?;
    init_linear(&mut s, "time.fc2", d, d, rng)?;
    init_linear(&mut s, "cond.proj", cfg.grid * cfg.grid, d, rng)?;
    init_linear(&mut s, "cond.out", d, d, rng)?;
    s.insert("cond.null", Tensor::randn(&[1, d], 0.1, rng))?;
    init_packer(&mut s, "pack", d, cfg.segments().compressed, rng)?;
    s.insert("ids", Tensor::randn(&[cfg.codebook_size, d], 0.5, rng))?;
    for b in 0..cfg.block_pairs {
        init_block(&mut s, &format!("local{b}"), d, cfg.ffn_mult, rng)?;
        init_block(&mut s, &format!("global{b}"), d, cfg.ffn_mult, rng)?;
        init_router(&mut s, &format!("router{b}"), d, rng)?;
    }
    init_zero_linear(&mut s, "final.ada", d, 2 * d)?;
    init_zero_linear(&mut s, "final.out", d, cfg.latent_dim)?;
    Ok(s)
}

/// Sinusoidal embedding of `t` scaled to `[0, 1000]`.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.cos();
        out[half + k] = arg.sin();
    }
    Tensor::matrix(1, dim, out).unwrap()
}

/// Condition embedding: a two-layer GELU map of the layout, or the learned null vector.
pub fn encode_condition_on_graph(g: &mut Graph, params: &ParamStore, cfg: &ModelConfig, cond: &Condition) -> Result<Var> {
    match &cond.layout {
        None => g.param(params, "cond.null"),
        Some(layout) => {
            let cells = cfg.grid * cfg.grid;
            if layout.len() != cells {
                return Err(Error::Shape(format!("layout of {} cells, expected {cells}", layout.len())));
            }
            let x = g.constant(Tensor::matrix(1, cells, layout.clone())?);
            let h = linear(g, params, "cond.proj", x)?;
            let h = g.gelu(h);
            let h = linear(g, params, "cond.out", h)?;
            Ok(g.gelu(h))
        }
    }
}

pub fn encode_condition(params: &ParamStore, cfg: &ModelConfig, cond: &Condition) -> Result<Tensor> {
    let mut g = Graph::inference();
    let v = encode_condition_on_graph(&mut g, params, cfg, cond)?;
    Ok(g.value(v).clone())
}

/// Activated conditioning row shared by every block.
fn conditioning(g: &mut Graph, params: &ParamStore, cfg: &ModelConfig, t: f64, cond: &Condition) -> Result<Var> {
    let feats = g.constant(timestep_features(t, cfg.d_model));
    let h = linear(g, params, "time.fc1", feats)?;
    let h = g.gelu(h);
    let temb = linear(g, params, "time.fc2", h)?;
    let cemb = encode_condition_on_graph(g, params, cfg, cond)?;
    let c = g.add(temb, cemb);
    Ok(g.gelu(c))
}

/// Packed, ID-tagged tokens of all components, row-stacked (`n * T` rows).
fn embed_tokens(g: &mut Graph, params: &ParamStore, cfg: &ModelConfig, z_t: Var, n: usize, ids: &[usize]) -> Result<Var> {
    let seg = cfg.segments();
    let l = seg.vecset;
    let z = linear(g, params, "in", z_t)?;
    let packed = pack_on_graph(g, params, "pack", z, n, l)?;
    let extra = seg.compressed + 1;
    let parts: Vec<Var> = (0..n)
        .flat_map(|i| {
            let zi = g.slice_rows(z, i * l..(i + 1) * l);
            let pi = g.slice_rows(packed, i * extra..(i + 1) * extra);
            [zi, pi]
        })
        .collect();
    let x = g.concat_rows(&parts);
    let table = g.param(params, "ids")?;
    let idx: Rc<[usize]> = ids.iter().flat_map(|&id| std::iter::repeat_n(id, seg.total())).collect();
    let id_rows = g.gather_rows(table, idx);
    Ok(g.add(x, id_rows))
}

/// Global block: router on the anchor rows of the normalized input, then
/// gated sparse attention. Returns the block output and the routing used.
#[allow(clippy::too_many_arguments)]
pub fn global_block_on_graph(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    index: usize,
    x: Var,
    cond: Var,
    n: usize,
    routing: &mut Routing<'_>,
) -> Result<(Var, RoutingDecision)> {
    let seg = cfg.segments();
    let t = seg.total();
    let router_heads = cfg.router.router_heads(cfg.heads);
    let mut decision = None;
    let out = block_forward(g, params, &format!("global{index}"), x, cond, |g, h, qkv| {
        let anchors: Rc<[usize]> = (0..n).map(|i| i * t + seg.anchor()).collect();
        let a = g.gather_rows(h, anchors);
        let o = importance_on_graph(g, params, &format!("router{index}"), a, router_heads, cfg.router.activation)?;
        let k = cfg.top_k(n);
        let d = match routing {
            Routing::Fixed(ds) => ds
                .get(index)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no routing for global block {index}")))?,
            Routing::Stochastic(rng) if cfg.router.load_balance => {
                let m = ImportanceMatrix::new(router_heads, n, g.value(o).clone())?;
                route_stochastic(&m, k, &mut **rng)?
            }
            _ => route_deterministic(&ImportanceMatrix::new(router_heads, n, g.value(o).clone())?, k),
        };
        let y = moc_attention_on_graph(g, qkv, o, &d, n, seg, cfg.heads, &cfg.moc)?;
        decision = Some(d);
        Ok(y)
    })?;
    Ok((out, decision.expect("routing decided inside the block")))
}

pub struct ModelOutput {
    /// `(n * L) x latent_dim` velocity rows.
    pub velocity: Var,
    /// Routing of each global block, in order.
    pub decisions: Vec<RoutingDecision>,
}

/// Velocity prediction for one sample. `z_t` holds `n * L` rows of width
/// `latent_dim` (any leading shape), all at the shared time `t`.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_graph(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    z_t: &Tensor,
    t: f64,
    cond: &Condition,
    ids: &[usize],
    mut routing: Routing<'_>,
) -> Result<ModelOutput> {
    let n = ids.len();
    let l = cfg.vecset_len;
    if n == 0 {
        return Err(Error::InvalidArgument("no components".into()));
    }
    if n > cfg.codebook_size {
        return Err(Error::CodebookExceeded { n, codebook: cfg.codebook_size });
    }
    if z_t.len() != n * l * cfg.latent_dim || z_t.cols() != cfg.latent_dim {
        return Err(Error::Shape(format!("latents {:?} for {n} components of {l} x {}", z_t.shape(), cfg.latent_dim)));
    }
    if !z_t.is_finite() || !t.is_finite() {
        return Err(Error::NonFinite("model input".into()));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.last().is_some_and(|&m| m >= cfg.codebook_size) {
        return Err(Error::InvalidArgument(format!("ID indices {ids:?} must be distinct and below {}", cfg.codebook_size)));
    }
    let seg = cfg.segments();
    let c = conditioning(g, params, cfg, t, cond)?;
    let zv = g.constant(z_t.clone().reshape(&[n * l, cfg.latent_dim])?);
    let mut x = embed_tokens(g, params, cfg, zv, n, ids)?;
    let mut decisions = Vec::with_capacity(cfg.block_pairs);
    for b in 0..cfg.block_pairs {
        x = local_block_on_graph(g, params, &format!("local{b}"), x, c, n, seg, cfg.heads)?;
        let (y, d) = global_block_on_graph(g, params, cfg, b, x, c, n, &mut routing)?;
        x = y;
        decisions.push(d);
    }
    let velocity = readout(g, params, cfg, x, c, n)?;
    Ok(ModelOutput { velocity, decisions })
}

fn readout(g: &mut Graph, params: &ParamStore, cfg: &ModelConfig, x: Var, c: Var, n: usize) -> Result<Var> {
    let d = cfg.d_model;
    let seg = cfg.segments();
    let t = seg.total();
    let mods = linear(g, params, "final.ada", c)?;
    let shift = g.slice(mods, 0..1, 0..d);
    let scale = g.slice(mods, 0..1, d..2 * d);
    let z_rows: Rc<[usize]> = (0..n).flat_map(|i| seg.z().map(move |r| i * t + r)).collect();
    let z = g.gather_rows(x, z_rows);
    let h = g.layer_norm(z);
    let h = g.modulate(h, shift, scale);
    linear(g, params, "final.out", h)
}

/// Inference forward; returns the `[n, L, latent_dim]` velocity.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    params: &ParamStore,
    cfg: &ModelConfig,
    z_t: &Tensor,
    t: f64,
    cond: &Condition,
    ids: &[usize],
    routing: Routing<'_>,
) -> Result<(Tensor, Vec<RoutingDecision>)> {
    let mut g = Graph::inference();
    let out = forward_on_graph(&mut g, params, cfg, z_t, t, cond, ids, routing)?;
    g.check_finite()?;
    let v = g.value(out.velocity).clone().reshape(&[ids.len(), cfg.vecset_len, cfg.latent_dim])?;
    Ok((v, out.decisions))
}
