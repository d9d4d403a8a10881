//! Per-component input sequences.
//!
//! Each component's latents `z` (`L x D`) are summarized by cross-attention
//! from shared learnable queries into `N_p = ceil(L / sigma)` compressed
//! tokens plus one anchor token. The packed sequence is `[z; p; anchor]`,
//! and a randomly assigned ID embedding is added to every row of it.

use std::ops::Range;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{AttnArgs, Graph, ParamStore, Tensor, Var};

pub const ID_CODEBOOK_SIZE: usize = 50;

pub fn compressed_len(vecset_len: usize, sigma: usize) -> usize {
    vecset_len.div_ceil(sigma.max(1))
}

/// Row layout of one packed component: `vecset` latent rows, then
/// `compressed` rows, then a single anchor row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub vecset: usize,
    pub compressed: usize,
}

impl Segments {
    pub fn new(vecset_len: usize, sigma: usize) -> Result<Self> {
        if vecset_len == 0 {
            return Err(Error::EmptyComponent);
        }
        if sigma == 0 {
            return Err(Error::Config("compression ratio must be >= 1".into()));
        }
        Ok(Self { vecset: vecset_len, compressed: compressed_len(vecset_len, sigma) })
    }

    pub fn total(&self) -> usize {
        self.vecset + self.compressed + 1
    }

    pub fn z(&self) -> Range<usize> {
        0..self.vecset
    }

    pub fn p(&self) -> Range<usize> {
        self.vecset..self.vecset + self.compressed
    }

    pub fn anchor(&self) -> usize {
        self.vecset + self.compressed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTokens {
    pub tokens: Tensor,
    pub segments: Segments,
    pub id_index: usize,
}

impl PackedTokens {
    pub fn new(tokens: Tensor, segments: Segments, id_index: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != segments.total() {
            return Err(Error::Shape(format!(
                "packed tokens {:?} for {} rows",
                tokens.shape(),
                segments.total()
            )));
        }
        Ok(Self { tokens, segments, id_index })
    }

    pub fn from_parts(z: &Tensor, p: &Tensor, anchor: &Tensor, id_index: usize) -> Result<Self> {
        if anchor.rows() != 1 {
            return Err(Error::Shape("anchor must be a single row".into()));
        }
        let segments = Segments { vecset: z.rows(), compressed: p.rows() };
        if segments.vecset == 0 {
            return Err(Error::EmptyComponent);
        }
        Self::new(Tensor::concat_rows(&[z, p, anchor])?, segments, id_index)
    }

    pub fn split(&self) -> (Tensor, Tensor, Tensor) {
        split_component(self)
    }
}

/// `(z, p, anchor)` row blocks of a packed component.
pub fn split_component(x: &PackedTokens) -> (Tensor, Tensor, Tensor) {
    let s = x.segments;
    (
        x.tokens.slice_rows(s.z()),
        x.tokens.slice_rows(s.p()),
        x.tokens.slice_rows(s.anchor()..s.anchor() + 1),
    )
}

/// Draws `n` distinct codebook indices uniformly without replacement.
pub fn assign_id_embeddings<R: Rng + ?Sized>(
    n: usize,
    codebook_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n > codebook_size {
        return Err(Error::CodebookExceeded { n, codebook: codebook_size });
    }
    Ok(sample(rng, codebook_size, n).into_vec())
}

/// Parameter names of the cross-attention packer under `prefix`.
pub struct PackerNames {
    pub queries: String,
    pub anchor: String,
    pub wq: String,
    pub wk: String,
    pub wv: String,
}

impl PackerNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            queries: format!("{prefix}.queries"),
            anchor: format!("{prefix}.anchor"),
            wq: format!("{prefix}.wq"),
            wk: format!("{prefix}.wk"),
            wv: format!("{prefix}.wv"),
        }
    }
}

pub fn init_packer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    n_compressed: usize,
    rng: &mut R,
) -> Result<()> {
    let names = PackerNames::new(prefix);
    let w_std = 1.0 / (d_model as f64).sqrt();
    store.insert(names.queries, Tensor::randn(&[n_compressed, d_model], 1.0, rng))?;
    store.insert(names.anchor, Tensor::randn(&[1, d_model], 1.0, rng))?;
    store.insert(names.wq, Tensor::randn(&[d_model, d_model], w_std, rng))?;
    store.insert(names.wk, Tensor::randn(&[d_model, d_model], w_std, rng))?;
    store.insert(names.wv, Tensor::randn(&[d_model, d_model], w_std, rng))?;
    Ok(())
}

/// Packs every component of the stacked latents `z` (`n * l` rows).
///
/// Returns `n * (N_p + 1)` rows: for each component its compressed tokens
/// followed by its anchor. Each component's block depends only on its own
/// latent rows.
pub fn pack_on_graph(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    z: Var,
    n: usize,
    l: usize,
) -> Result<Var> {
    if l == 0 {
        return Err(Error::EmptyComponent);
    }
    if g.value(z).rows() != n * l {
        return Err(Error::Shape(format!("packing {} rows as {n} x {l}", g.value(z).rows())));
    }
    let names = PackerNames::new(prefix);
    let queries = g.param(params, &names.queries)?;
    let anchor = g.param(params, &names.anchor)?;
    let (wq, wk, wv) = (g.param(params, &names.wq)?, g.param(params, &names.wk)?, g.param(params, &names.wv)?);
    let d = g.value(queries).cols();
    if g.value(z).cols() != d {
        return Err(Error::Shape(format!("latent width {} vs model width {d}", g.value(z).cols())));
    }
    let learnable = g.concat_rows(&[queries, anchor]);
    let q = g.matmul(learnable, wq);
    let k = g.matmul(z, wk);
    let v = g.matmul(z, wv);
    let scale = 1.0 / (d as f64).sqrt();
    let blocks: Vec<Var> = (0..n)
        .map(|i| {
            let mut args = AttnArgs::new(q, k, v, scale);
            args.key_rows = Some(Rc::from((i * l..(i + 1) * l).collect::<Vec<_>>()));
            g.attention(args)
        })
        .collect();
    Ok(g.concat_rows(&blocks))
}

/// Compressed tokens and anchor of a single component.
pub fn pack_component(z: &Tensor, params: &ParamStore, prefix: &str) -> Result<(Tensor, Tensor)> {
    let l = z.rows();
    if l == 0 {
        return Err(Error::EmptyComponent);
    }
    let mut g = Graph::inference();
    let zv = g.constant(z.clone());
    let packed = pack_on_graph(&mut g, params, prefix, zv, 1, l)?;
    g.check_finite()?;
    let out = g.value(packed);
    let n_p = out.rows() - 1;
    Ok((out.slice_rows(0..n_p), out.slice_rows(n_p..n_p + 1)))
}
