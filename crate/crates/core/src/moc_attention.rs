//! Global attention over a per-component sparse context.
//!
//! Every token of component `i` (vecset, compressed and anchor) queries a
//! context made of its own vecset keys (ungated), then for each other
//! component `j` in ascending order either the full vecset tokens (when `j`
//! is routed) or its compressed tokens. Keys of segment `j` are multiplied by
//! the importance `o[h][i][j]`; values stay ungated. Anchors are never keys.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::block::linear;
use crate::error::{Error, Result};
use crate::numerics::{attention, AttentionSpec, AttnArgs, GainTarget, Gains, Graph, ParamStore, Tensor, Var};
use crate::router::{ImportanceMatrix, RoutingDecision};
use crate::tokens::{compressed_len, PackedTokens, Segments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocConfig {
    pub sigma: usize,
    pub gate_target: GainTarget,
    /// Unrouted components contribute their compressed tokens.
    pub use_compressed_context: bool,
    /// Routed components contribute their full vecset tokens.
    pub use_routing: bool,
}

impl Default for MocConfig {
    fn default() -> Self {
        Self { sigma: 8, gate_target: GainTarget::Key, use_compressed_context: true, use_routing: true }
    }
}

/// `L + k L + (N - k - 1) ceil(L / sigma)`.
pub fn context_length(n: usize, l: usize, k: usize, sigma: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidArgument("no components".into()));
    }
    if k >= n && !(n == 1 && k == 0) {
        return Err(Error::InvalidArgument(format!("k = {k} must be below N = {n}")));
    }
    if sigma == 0 {
        return Err(Error::InvalidArgument("sigma must be at least 1".into()));
    }
    let k = k.min(n - 1);
    Ok(l + k * l + (n - k - 1) * compressed_len(l, sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Own,
    Full,
    Compressed,
}

/// Where a context key comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyOrigin {
    pub component: usize,
    pub kind: SegmentKind,
    /// Token index within the source component's packed sequence.
    pub token: usize,
}

/// Context of one (head, component) pair. `rows` index the row-stacked
/// tokens of all components; `gain_slots` index the importance tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionContext {
    pub rows: Vec<usize>,
    pub gain_slots: Vec<Option<usize>>,
    pub gains: Vec<f64>,
    pub provenance: Vec<KeyOrigin>,
}

impl AttentionContext {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Router head serving attention head `h`.
fn router_head(h: usize, importance: &ImportanceMatrix) -> usize {
    if importance.heads() == 1 {
        0
    } else {
        h
    }
}

pub fn assemble_context(
    i: usize,
    h: usize,
    seg: Segments,
    importance: &ImportanceMatrix,
    routing: &RoutingDecision,
    cfg: &MocConfig,
) -> Result<AttentionContext> {
    let n = importance.n();
    if routing.n() != n || routing.heads() != importance.heads() {
        return Err(Error::Shape(format!(
            "routing for {}x{} vs importance {}x{}",
            routing.heads(),
            routing.n(),
            importance.heads(),
            n
        )));
    }
    if i >= n {
        return Err(Error::InvalidArgument(format!("component {i} out of range {n}")));
    }
    let rh = router_head(h, importance);
    let t = seg.total();
    let mut ctx = AttentionContext { rows: Vec::new(), gain_slots: Vec::new(), gains: Vec::new(), provenance: Vec::new() };
    let mut seen = vec![false; n];
    let mut push = |ctx: &mut AttentionContext, j: usize, kind: SegmentKind, tokens: std::ops::Range<usize>| -> Result<()> {
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::DuplicateComponent(j));
        }
        let slot = (kind != SegmentKind::Own).then(|| importance.offset(rh, i, j));
        let gain = slot.map_or(1.0, |_| importance.get(rh, i, j));
        for tok in tokens {
            ctx.rows.push(j * t + tok);
            ctx.gain_slots.push(slot);
            ctx.gains.push(gain);
            ctx.provenance.push(KeyOrigin { component: j, kind, token: tok });
        }
        Ok(())
    };
    push(&mut ctx, i, SegmentKind::Own, seg.z())?;
    for j in (0..n).filter(|&j| j != i) {
        if cfg.use_routing && routing.is_selected(rh, i, j) {
            push(&mut ctx, j, SegmentKind::Full, seg.z())?;
        } else if cfg.use_compressed_context {
            push(&mut ctx, j, SegmentKind::Compressed, seg.p())?;
        }
    }
    for &j in routing.selected(rh, i) {
        if j == i {
            return Err(Error::DuplicateComponent(j));
        }
    }
    Ok(ctx)
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    Ok(d / heads)
}

/// Gated global attention on the graph.
///
/// `qkv` holds `[Q | K | V]` for the row-stacked tokens of all `n`
/// components; `importance` is the `(router_heads * n) x n` score node that
/// produced `routing`. Returns the per-head outputs concatenated along
/// columns, one row per input token.
#[allow(clippy::too_many_arguments)]
pub fn moc_attention_on_graph(
    g: &mut Graph,
    qkv: Var,
    importance: Var,
    routing: &RoutingDecision,
    n: usize,
    seg: Segments,
    heads: usize,
    cfg: &MocConfig,
) -> Result<Var> {
    let d = g.value(qkv).cols() / 3;
    let dh = check_heads(d, heads)?;
    let t = seg.total();
    if g.value(qkv).rows() != n * t {
        return Err(Error::Shape(format!("{} rows for {n} components of {t} tokens", g.value(qkv).rows())));
    }
    let o = ImportanceMatrix::new(routing.heads(), n, g.value(importance).clone())?;
    if o.heads() != 1 && o.heads() != heads {
        return Err(Error::Config(format!("{} router heads for {heads} attention heads", o.heads())));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let ctx = assemble_context(i, h, seg, &o, routing, cfg)?;
            if let Some(&gain) = ctx.gains.iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
                return Err(Error::NonPositiveGain(gain));
            }
            let c = h * dh;
            let mut a = AttnArgs::new(qkv, qkv, qkv, scale);
            a.q_rows = Some(i * t..(i + 1) * t);
            a.q_cols = Some(c..c + dh);
            a.k_cols = Some(d + c..d + c + dh);
            a.v_cols = Some(2 * d + c..2 * d + c + dh);
            a.key_rows = Some(Rc::from(ctx.rows));
            a.gains = Some(Gains { source: importance, index: Rc::from(ctx.gain_slots), target: cfg.gate_target });
            outs.push(g.attention(a));
        }
        comps.push(g.concat_cols(&outs));
    }
    Ok(g.concat_rows(&comps))
}

/// Dense global attention baseline: every vecset token attends the vecset
/// tokens of all components; compressed and anchor rows produce zeros.
pub fn dense_attention_on_graph(g: &mut Graph, qkv: Var, n: usize, seg: Segments, heads: usize) -> Result<Var> {
    let d = g.value(qkv).cols() / 3;
    let dh = check_heads(d, heads)?;
    let t = seg.total();
    if g.value(qkv).rows() != n * t {
        return Err(Error::Shape(format!("{} rows for {n} components of {t} tokens", g.value(qkv).rows())));
    }
    let z_rows: Rc<[usize]> = (0..n).flat_map(|i| seg.z().map(move |r| i * t + r)).collect();
    let zq = g.gather_rows(qkv, z_rows);
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let c = h * dh;
            let mut a = AttnArgs::new(zq, zq, zq, scale);
            a.q_cols = Some(c..c + dh);
            a.k_cols = Some(d + c..d + c + dh);
            a.v_cols = Some(2 * d + c..2 * d + c + dh);
            g.attention(a)
        })
        .collect();
    let z_out = g.concat_cols(&outs);
    let l = seg.vecset;
    let pad = g.constant(Tensor::zeros(&[t - l, d]));
    let parts: Vec<Var> = (0..n)
        .flat_map(|i| {
            let zi = g.slice_rows(z_out, i * l..(i + 1) * l);
            [zi, pad]
        })
        .collect();
    Ok(g.concat_rows(&parts))
}

fn stack(tokens: &[PackedTokens]) -> Result<(Tensor, Segments)> {
    let first = tokens.first().ok_or_else(|| Error::InvalidArgument("no components".into()))?;
    let seg = first.segments;
    if let Some(bad) = tokens.iter().find(|x| x.segments != seg || x.tokens.cols() != first.tokens.cols()) {
        return Err(Error::Shape(format!("component layout {:?} vs {:?}", bad.segments, seg)));
    }
    let parts: Vec<&Tensor> = tokens.iter().map(|x| &x.tokens).collect();
    Ok((Tensor::concat_rows(&parts)?, seg))
}

fn unstack(out: &Tensor, tokens: &[PackedTokens]) -> Result<Vec<PackedTokens>> {
    let t = tokens[0].segments.total();
    tokens
        .iter()
        .enumerate()
        .map(|(i, x)| PackedTokens::new(out.slice_rows(i * t..(i + 1) * t), x.segments, x.id_index))
        .collect()
}

/// Attention sublayer of a global block: `{prefix}.qkv` projection, gated
/// sparse attention, `{prefix}.out` projection. Returns the sublayer output
/// for every token (no residual).
pub fn moc_attention_forward(
    tokens: &[PackedTokens],
    importance: &ImportanceMatrix,
    routing: &RoutingDecision,
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    cfg: &MocConfig,
) -> Result<Vec<PackedTokens>> {
    let (x, seg) = stack(tokens)?;
    if !x.is_finite() {
        return Err(Error::NonFinite("global attention input".into()));
    }
    importance.validate_gains()?;
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let o = g.constant(importance.values().clone());
    let qkv = linear(&mut g, params, &format!("{prefix}.qkv"), xv)?;
    let mixed = moc_attention_on_graph(&mut g, qkv, o, routing, tokens.len(), seg, heads, cfg)?;
    let out = linear(&mut g, params, &format!("{prefix}.out"), mixed)?;
    g.check_finite()?;
    unstack(g.value(out), tokens)
}

/// Same contract as [`moc_attention_forward`], computed one (head,
/// component) at a time with explicit key and value matrices.
pub fn dense_reference(
    tokens: &[PackedTokens],
    importance: &ImportanceMatrix,
    routing: &RoutingDecision,
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    cfg: &MocConfig,
) -> Result<Vec<PackedTokens>> {
    let (x, seg) = stack(tokens)?;
    importance.validate_gains()?;
    let affine = |x: &Tensor, name: &str| -> Result<Tensor> {
        let w = params.get(&format!("{prefix}.{name}.w")).ok_or_else(|| Error::Config(format!("missing {prefix}.{name}.w")))?;
        let mut y = x.matmul(w)?;
        if let Some(b) = params.get(&format!("{prefix}.{name}.b")) {
            for r in 0..y.rows() {
                for (v, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
        Ok(y)
    };
    let qkv = affine(&x, "qkv")?;
    let d = x.cols();
    let dh = check_heads(d, heads)?;
    let t = seg.total();
    let n = tokens.len();
    let mut mixed = Tensor::zeros(&[n * t, d]);
    for i in 0..n {
        for h in 0..heads {
            let rh = router_head(h, importance);
            let cols = |base: usize| base + h * dh..base + (h + 1) * dh;
            let pick = |r: usize, base: usize| qkv.row(r)[cols(base)].to_vec();
            let mut k_rows = Vec::new();
            let mut v_rows = Vec::new();
            for r in seg.z() {
                k_rows.push(pick(i * t + r, d));
                v_rows.push(pick(i * t + r, 2 * d));
            }
            for j in (0..n).filter(|&j| j != i) {
                let range = if cfg.use_routing && routing.selected(rh, i).contains(&j) {
                    seg.z()
                } else if cfg.use_compressed_context {
                    seg.p()
                } else {
                    continue;
                };
                let o = importance.get(rh, i, j);
                for r in range {
                    let mut kr = pick(j * t + r, d);
                    let mut vr = pick(j * t + r, 2 * d);
                    match cfg.gate_target {
                        GainTarget::Key => kr.iter_mut().for_each(|v| *v *= o),
                        GainTarget::Value => vr.iter_mut().for_each(|v| *v *= o),
                    }
                    k_rows.push(kr);
                    v_rows.push(vr);
                }
            }
            let q_rows: Vec<Vec<f64>> = (0..t).map(|r| pick(i * t + r, 0)).collect();
            let out = attention(
                &Tensor::from_rows(&q_rows)?,
                &Tensor::from_rows(&k_rows)?,
                &Tensor::from_rows(&v_rows)?,
                &AttentionSpec::new(dh),
            )?;
            for r in 0..t {
                mixed.row_mut(i * t + r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(r));
            }
        }
    }
    let out = affine(&mixed, "out")?;
    unstack(&out, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::init_block;
    use crate::numerics::{grad_check_report, sigmoid};
    use crate::router::{route_deterministic, route_stochastic};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_block(&mut s, "g", d, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn random_tokens(n: usize, l: usize, sigma: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<PackedTokens> {
        let seg = Segments::new(l, sigma).unwrap();
        (0..n).map(|i| PackedTokens::new(Tensor::randn(&[seg.total(), d], 1.0, rng), seg, i).unwrap()).collect()
    }

    fn random_importance(heads: usize, n: usize, rng: &mut ChaCha8Rng) -> ImportanceMatrix {
        ImportanceMatrix::new(heads, n, Tensor::randn(&[heads * n, n], 1.5, rng).map(sigmoid)).unwrap()
    }

    #[test]
    fn context_length_formula() {
        assert_eq!(context_length(32, 1024, 8, 8).unwrap(), 12160);
        assert_eq!(context_length(5, 16, 4, 1).unwrap(), 80);
        assert_eq!(context_length(1, 16, 0, 8).unwrap(), 16);
        assert_eq!(context_length(3, 8, 1, 4).unwrap(), 18);
        assert_eq!(context_length(4, 7, 1, 8).unwrap(), 7 + 7 + 2);
        assert!(context_length(4, 8, 4, 2).is_err());
        assert!(context_length(4, 8, 1, 0).is_err());
    }

    #[test]
    fn context_of_three_components() {
        let seg = Segments::new(8, 4).unwrap();
        let mut o = ImportanceMatrix::filled(1, 3, 0.3);
        o.set(0, 0, 2, 0.8);
        let r = route_deterministic(&o, 1);
        assert_eq!(r.selected(0, 0), &[2]);
        let ctx = assemble_context(0, 0, seg, &o, &r, &MocConfig::default()).unwrap();
        assert_eq!(ctx.len(), 18);
        let t = seg.total();
        let expect: Vec<usize> = (0..8).chain(t + 8..t + 10).chain(2 * t..2 * t + 8).collect();
        assert_eq!(ctx.rows, expect);
        assert!(ctx.gains[..8].iter().all(|&g| g == 1.0));
        assert!(ctx.gains[8..10].iter().all(|&g| g == 0.3));
        assert!(ctx.gains[10..].iter().all(|&g| g == 0.8));
    }

    #[test]
    fn two_components_have_no_compressed_segment() {
        let seg = Segments::new(6, 2).unwrap();
        let o = ImportanceMatrix::filled(2, 2, 0.5);
        let r = route_deterministic(&o, 1);
        for i in 0..2 {
            let ctx = assemble_context(i, 1, seg, &o, &r, &MocConfig::default()).unwrap();
            assert_eq!(ctx.len(), 12);
            assert!(ctx.provenance.iter().all(|p| p.kind != SegmentKind::Compressed));
        }
    }

    #[test]
    fn provenance_is_exhaustive_at_four_components() {
        let (n, l, sigma, heads, k) = (4, 5, 2, 2, 2);
        let seg = Segments::new(l, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = random_importance(heads, n, &mut rng);
        let r = route_deterministic(&o, k);
        let t = seg.total();
        for h in 0..heads {
            for i in 0..n {
                let ctx = assemble_context(i, h, seg, &o, &r, &MocConfig::default()).unwrap();
                assert_eq!(ctx.len(), context_length(n, l, k, sigma).unwrap());
                for j in 0..n {
                    let keys: Vec<&KeyOrigin> = ctx.provenance.iter().filter(|p| p.component == j).collect();
                    let toks: Vec<usize> = keys.iter().map(|p| p.token).collect();
                    if j == i {
                        assert_eq!(toks, seg.z().collect::<Vec<_>>());
                    } else if r.is_selected(h, i, j) {
                        assert!(keys.iter().all(|p| p.kind == SegmentKind::Full));
                        assert_eq!(toks, seg.z().collect::<Vec<_>>());
                    } else {
                        assert!(keys.iter().all(|p| p.kind == SegmentKind::Compressed));
                        assert_eq!(toks, seg.p().collect::<Vec<_>>());
                    }
                }
                for ((row, p), gain) in ctx.rows.iter().zip(&ctx.provenance).zip(&ctx.gains) {
                    assert_eq!(*row, p.component * t + p.token);
                    assert!(p.token < seg.anchor());
                    let expect = if p.component == i { 1.0 } else { o.get(h, i, p.component) };
                    assert_eq!(*gain, expect);
                }
            }
        }
    }

    #[test]
    fn ablated_contexts() {
        let seg = Segments::new(8, 4).unwrap();
        let o = ImportanceMatrix::filled(1, 4, 0.5);
        let r = route_deterministic(&o, 1);
        let no_route = MocConfig { use_routing: false, ..MocConfig::default() };
        assert_eq!(assemble_context(0, 0, seg, &o, &r, &no_route).unwrap().len(), 8 + 3 * 2);
        let no_comp = MocConfig { use_compressed_context: false, ..MocConfig::default() };
        assert_eq!(assemble_context(0, 0, seg, &o, &r, &no_comp).unwrap().len(), 16);
    }

    fn oracle_case(seed: u64, n: usize, l: usize, sigma: usize, d: usize, heads: usize, cfg: &MocConfig) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(n, l, sigma, d, &mut rng);
        let o = random_importance(heads, n, &mut rng);
        let r = route_stochastic(&o, 2.min(n - 1), &mut rng).unwrap();
        let p = params(d, seed + 100);
        let a = moc_attention_forward(&tokens, &o, &r, &p, "g", heads, cfg).unwrap();
        let b = dense_reference(&tokens, &o, &r, &p, "g", heads, cfg).unwrap();
        a.iter().zip(&b).map(|(x, y)| x.tokens.max_abs_diff(&y.tokens)).fold(0.0, f64::max)
    }

    #[test]
    fn matches_naive_reference() {
        let cfg = MocConfig::default();
        assert!(oracle_case(1, 6, 16, 4, 16, 2, &cfg) < 1e-9);
        let value = MocConfig { gate_target: GainTarget::Value, ..cfg.clone() };
        assert!(oracle_case(2, 5, 8, 4, 8, 2, &value) < 1e-9);
        let no_comp = MocConfig { use_compressed_context: false, ..cfg.clone() };
        assert!(oracle_case(3, 4, 8, 2, 8, 4, &no_comp) < 1e-9);
        let no_route = MocConfig { use_routing: false, ..cfg };
        assert!(oracle_case(4, 4, 8, 2, 8, 1, &no_route) < 1e-9);
    }

    #[test]
    fn single_router_head_serves_all_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = random_tokens(4, 8, 4, 8, &mut rng);
        let o = random_importance(1, 4, &mut rng);
        let r = route_deterministic(&o, 1);
        let p = params(8, 6);
        let cfg = MocConfig::default();
        let a = moc_attention_forward(&tokens, &o, &r, &p, "g", 2, &cfg).unwrap();
        let b = dense_reference(&tokens, &o, &r, &p, "g", 2, &cfg).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.tokens.max_abs_diff(&y.tokens) < 1e-9));
    }

    #[test]
    fn full_routing_with_unit_gains_is_dense_attention() {
        let (n, l, d, heads) = (4, 8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = random_tokens(n, l, 4, d, &mut rng);
        let o = ImportanceMatrix::filled(heads, n, 1.0);
        let r = route_deterministic(&o, n - 1);
        let p = params(d, 8);
        let moc = moc_attention_forward(&tokens, &o, &r, &p, "g", heads, &MocConfig::default()).unwrap();

        // Plain multi-head attention over the concatenated vecset tokens.
        let (x, seg) = stack(&tokens).unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let qkv = linear(&mut g, &p, "g.qkv", xv).unwrap();
        let mixed = dense_attention_on_graph(&mut g, qkv, n, seg, heads).unwrap();
        let out = linear(&mut g, &p, "g.out", mixed).unwrap();
        let dense = g.value(out);
        let t = seg.total();
        for i in 0..n {
            let diff = moc[i].tokens.slice_rows(0..l).max_abs_diff(&dense.slice_rows(i * t..i * t + l));
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn single_component_is_self_attention_over_own_vecset() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens = random_tokens(1, 6, 2, d, &mut rng);
        let o = ImportanceMatrix::filled(2, 1, 0.5);
        let r = route_deterministic(&o, 0);
        let p = params(d, 10);
        let moc = moc_attention_forward(&tokens, &o, &r, &p, "g", 2, &MocConfig::default()).unwrap();
        let x = &tokens[0].tokens;
        let t = x.rows();
        let mask = crate::numerics::Mask::from_fn(t, t, |_, k| k < 6);
        let qkv = x.matmul(p.get("g.qkv.w").unwrap()).unwrap();
        let mut mixed = Tensor::zeros(&[t, d]);
        for h in 0..2 {
            let cols = |base: usize| -> Tensor {
                let rows: Vec<Vec<f64>> = (0..t).map(|r| qkv.row(r)[base + 4 * h..base + 4 * h + 4].to_vec()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let spec = AttentionSpec::new(4).with_mask(mask.clone());
            let out = attention(&cols(0), &cols(d), &cols(2 * d), &spec).unwrap();
            for r in 0..t {
                mixed.row_mut(r)[4 * h..4 * h + 4].copy_from_slice(out.row(r));
            }
        }
        let expect = mixed.matmul(p.get("g.out.w").unwrap()).unwrap();
        assert!(moc[0].tokens.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gating_values_differs_from_gating_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tokens = random_tokens(4, 8, 4, 8, &mut rng);
        let o = random_importance(2, 4, &mut rng);
        let r = route_deterministic(&o, 1);
        let p = params(8, 12);
        let key = moc_attention_forward(&tokens, &o, &r, &p, "g", 2, &MocConfig::default()).unwrap();
        let value_cfg = MocConfig { gate_target: GainTarget::Value, ..MocConfig::default() };
        let value = moc_attention_forward(&tokens, &o, &r, &p, "g", 2, &value_cfg).unwrap();
        assert!(key[0].tokens.max_abs_diff(&value[0].tokens) > 1e-3);
    }

    #[test]
    fn identical_components_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let one = random_tokens(1, 8, 4, 8, &mut rng).remove(0);
        let mut two = one.clone();
        two.id_index = 1;
        let o = ImportanceMatrix::filled(2, 2, 0.6);
        let r = route_deterministic(&o, 1);
        let out = moc_attention_forward(&[one, two], &o, &r, &params(8, 14), "g", 2, &MocConfig::default()).unwrap();
        assert_eq!(out[0].tokens, out[1].tokens);
    }

    #[test]
    fn permuting_components_permutes_outputs() {
        let (n, heads) = (5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tokens = random_tokens(n, 8, 4, 8, &mut rng);
        let o = random_importance(heads, n, &mut rng);
        let r = route_stochastic(&o, 2, &mut rng).unwrap();
        let p = params(8, 16);
        let cfg = MocConfig::default();
        let base = moc_attention_forward(&tokens, &o, &r, &p, "g", heads, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut ptoks = tokens.clone();
        let mut po = o.clone();
        for i in 0..n {
            ptoks[perm[i]] = tokens[i].clone();
            for j in 0..n {
                for h in 0..heads {
                    po.set(h, perm[i], perm[j], o.get(h, i, j));
                }
            }
        }
        let out = moc_attention_forward(&ptoks, &po, &r.permuted(&perm).unwrap(), &p, "g", heads, &cfg).unwrap();
        for i in 0..n {
            assert!(out[perm[i]].tokens.max_abs_diff(&base[i].tokens) < 1e-12);
        }
    }

    #[test]
    fn influence_flows_through_full_or_compressed_tokens_only() {
        let (n, l, d) = (4, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tokens = random_tokens(n, l, 3, d, &mut rng);
        let o = random_importance(1, n, &mut rng);
        let r = route_deterministic(&o, 1);
        let p = params(d, 18);
        let cfg = MocConfig::default();
        let base = moc_attention_forward(&tokens, &o, &r, &p, "g", 2, &cfg).unwrap();
        let sel = r.selected(0, 0)[0];
        let unsel = (1..n).find(|&j| j != sel).unwrap();
        let effect = |j: usize, row: usize| {
            let mut t = tokens.clone();
            t[j].tokens.row_mut(row)[0] += 1e-4;
            let out = moc_attention_forward(&t, &o, &r, &p, "g", 2, &cfg).unwrap();
            out[0].tokens.max_abs_diff(&base[0].tokens)
        };
        let seg = tokens[0].segments;
        assert!(effect(sel, 0) > 0.0);
        assert_eq!(effect(sel, seg.p().start), 0.0);
        assert_eq!(effect(unsel, 0), 0.0);
        assert!(effect(unsel, seg.p().start) > 0.0);
        assert_eq!(effect(unsel, seg.anchor()), 0.0);
        assert_eq!(effect(sel, seg.anchor()), 0.0);
    }

    #[test]
    fn gradients_reach_the_router_and_match_finite_differences() {
        let (n, l, d, heads) = (3, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let tokens = random_tokens(n, l, 2, d, &mut rng);
        let (x, seg) = stack(&tokens).unwrap();
        let mut p = params(d, 20);
        p.insert("logits", Tensor::randn(&[heads * n, n], 1.0, &mut rng)).unwrap();
        let o = ImportanceMatrix::new(heads, n, p.get("logits").unwrap().map(sigmoid)).unwrap();
        let r = route_deterministic(&o, 1);
        let loss = |g: &mut Graph, p: &ParamStore| {
            let xv = g.constant(x.clone());
            let qkv = linear(g, p, "g.qkv", xv)?;
            let logits = g.param(p, "logits")?;
            let o = g.sigmoid(logits);
            let y = moc_attention_on_graph(g, qkv, o, &r, n, seg, heads, &MocConfig::default())?;
            let c = g.constant(Tensor::randn(g.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
            let yc = g.mul(y, c);
            Ok(g.sum(yc))
        };
        let mut g = Graph::new();
        let out = loss(&mut g, &p).unwrap();
        let grads = g.backward(out);
        let mut store = p.clone();
        g.accumulate_param_grads(&grads, &mut store, 1.0).unwrap();
        let gl = store.grad("logits").unwrap();
        for h in 0..heads {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    assert!(gl.at(h * n + i, j).abs() > 0.0);
                }
                assert_eq!(gl.at(h * n + i, i), 0.0);
            }
        }
        let report = grad_check_report(loss, &p, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
