//! Per-component block with the partially blocked attention mask.
//!
//! Within one packed component `[z; p; anchor]`:
//! - vecset rows attend only vecset columns (blind to appended tokens),
//! - compressed rows attend vecset and compressed columns,
//! - the anchor row attends every column.
//!
//! The masks are band-blocked rather than triangular even though this layout
//! is often described as causal.

use std::rc::Rc;

use crate::block::block_forward;
use crate::error::{Error, Result};
use crate::numerics::{AttnArgs, Graph, Mask, ParamStore, Tensor, Var};
use crate::tokens::{PackedTokens, Segments};

pub fn build_local_mask(vecset_len: usize, n_compressed: usize) -> Mask {
    let l = vecset_len;
    let total = l + n_compressed + 1;
    Mask::from_fn(total, total, |q, k| {
        if q < l {
            k < l
        } else if q < l + n_compressed {
            k < l + n_compressed
        } else {
            true
        }
    })
}

/// Masked multi-head self-attention within each component of the stacked
/// token matrix; `qkv` holds `[Q | K | V]` column blocks.
pub fn local_attention(g: &mut Graph, qkv: Var, n: usize, seg: Segments, heads: usize) -> Result<Var> {
    let d = g.value(qkv).cols() / 3;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    let t = seg.total();
    if g.value(qkv).rows() != n * t {
        return Err(Error::Shape(format!("{} rows for {n} components of {t} tokens", g.value(qkv).rows())));
    }
    let dh = d / heads;
    let mask = Rc::new(build_local_mask(seg.vecset, seg.compressed));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        let rows = i * t..(i + 1) * t;
        let key_rows: Rc<[usize]> = rows.clone().collect();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let c = h * dh;
                let mut a = AttnArgs::new(qkv, qkv, qkv, scale);
                a.q_rows = Some(rows.clone());
                a.q_cols = Some(c..c + dh);
                a.k_cols = Some(d + c..d + c + dh);
                a.v_cols = Some(2 * d + c..2 * d + c + dh);
                a.key_rows = Some(key_rows.clone());
                a.mask = Some(mask.clone());
                g.attention(a)
            })
            .collect();
        comps.push(g.concat_cols(&outs));
    }
    Ok(g.concat_rows(&comps))
}

/// Local block over all `n` components stacked row-wise in `x`.
#[allow(clippy::too_many_arguments)]
pub fn local_block_on_graph(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    cond: Var,
    n: usize,
    seg: Segments,
    heads: usize,
) -> Result<Var> {
    block_forward(g, params, prefix, x, cond, |g, _h, qkv| local_attention(g, qkv, n, seg, heads))
}

/// Applies one local block to a single packed component.
pub fn local_block_forward(
    x: &PackedTokens,
    modulation: &Tensor,
    params: &ParamStore,
    prefix: &str,
    heads: usize,
) -> Result<PackedTokens> {
    let d = x.tokens.cols();
    if modulation.len() != d {
        return Err(Error::Shape(format!("modulation width {} vs {d}", modulation.len())));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.tokens.clone());
    let cv = g.constant(modulation.clone().reshape(&[1, d])?);
    let out = local_block_on_graph(&mut g, params, prefix, xv, cv, 1, x.segments, heads)?;
    g.check_finite()?;
    PackedTokens::new(g.value(out).clone(), x.segments, x.id_index)
}
