//! Pre-norm transformer block with adaptive scale/shift/gate modulation.
//!
//! `x <- x + gate1 * Attn(LN(x) * (1 + scale1) + shift1)`
//! `x <- x + gate2 * FFN(LN(x) * (1 + scale2) + shift2)`
//!
//! The six modulation rows come from one linear map of the conditioning
//! vector. That map is zero-initialized, so a fresh block is the identity.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
}

pub(crate) fn init_zero_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
}

pub(crate) fn init_linear_no_bias<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng))
}

/// `x W + b`; the bias is optional and used when `{name}.b` exists.
pub(crate) fn linear(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let bias = format!("{name}.b");
    let b = if params.contains(&bias) { Some(g.param(params, &bias)?) } else { None };
    Ok(g.linear(x, w, b))
}

/// Attention projections, FFN and modulation of one block.
pub fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    ffn_mult: usize,
    rng: &mut R,
) -> Result<()> {
    init_zero_linear(store, &format!("{prefix}.ada"), d_model, 6 * d_model)?;
    // A key bias shifts every logit of a query row equally and would be
    // redundant, so the joint projection has no bias.
    init_linear_no_bias(store, &format!("{prefix}.qkv"), d_model, 3 * d_model, rng)?;
    init_linear(store, &format!("{prefix}.out"), d_model, d_model, rng)?;
    init_linear(store, &format!("{prefix}.ffn1"), d_model, ffn_mult * d_model, rng)?;
    init_linear(store, &format!("{prefix}.ffn2"), ffn_mult * d_model, d_model, rng)
}

/// Runs one block. `cond` is the activated conditioning row (`1 x D`).
/// `mix` receives the modulated normalized tokens and returns the token
/// mixer output before the `out` projection.
pub fn block_forward(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    cond: Var,
    mix: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let d = g.value(x).cols();
    let mods = linear(g, params, &format!("{prefix}.ada"), cond)?;
    let chunk = |g: &mut Graph, i: usize| g.slice(mods, 0..1, i * d..(i + 1) * d);
    let (shift1, scale1, gate1) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
    let (shift2, scale2, gate2) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));

    let h = g.layer_norm(x);
    let h = g.modulate(h, shift1, scale1);
    let qkv = linear(g, params, &format!("{prefix}.qkv"), h)?;
    let mixed = mix(g, h, qkv)?;
    let attn = linear(g, params, &format!("{prefix}.out"), mixed)?;
    let attn = g.mul_row(attn, gate1);
    let x = g.add(x, attn);

    let h = g.layer_norm(x);
    let h = g.modulate(h, shift2, scale2);
    let f = linear(g, params, &format!("{prefix}.ffn1"), h)?;
    let f = g.gelu(f);
    let f = linear(g, params, &format!("{prefix}.ffn2"), f)?;
    let f = g.mul_row(f, gate2);
    Ok(g.add(x, f))
}
