//! Fixed linear latent codec. Each point `x` with a random tag `s` maps to
//! `A [x; tag_scale * s]`, where `A` has orthonormal columns; decoding keeps
//! the coordinate part of `A^T z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub dim: usize,
    pub latent_dim: usize,
    pub tag_scale: f64,
    /// `latent_dim x (dim + 1)` with orthonormal columns.
    lift: Tensor,
}

/// Orthonormalizes the columns of `m` (modified Gram-Schmidt).
fn orthonormal_columns(m: &mut Tensor) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    for c in 0..cols {
        for prev in 0..c {
            let dot: f64 = (0..rows).map(|r| m.at(r, c) * m.at(r, prev)).sum();
            for r in 0..rows {
                let v = m.at(r, prev);
                m.row_mut(r)[c] -= dot * v;
            }
        }
        let norm = (0..rows).map(|r| m.at(r, c).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Config("degenerate codec lift".into()));
        }
        for r in 0..rows {
            m.row_mut(r)[c] /= norm;
        }
    }
    Ok(())
}

impl Codec {
    pub fn new(dim: usize, latent_dim: usize, tag_scale: f64, seed: u64) -> Result<Self> {
        if dim == 0 || latent_dim < dim + 1 {
            return Err(Error::Config(format!("latent width {latent_dim} cannot hold {dim} coordinates and a tag")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lift = Tensor::randn(&[latent_dim, dim + 1], 1.0, &mut rng);
        orthonormal_columns(&mut lift)?;
        Ok(Self { dim, latent_dim, tag_scale, lift })
    }

    pub fn lift(&self) -> &Tensor {
        &self.lift
    }

    /// Encodes `points` (`L x dim`) with per-point tags drawn from `rng`.
    pub fn encode<R: Rng + ?Sized>(&self, points: &Tensor, rng: &mut R) -> Result<Tensor> {
        let tags: Vec<f64> = (0..points.rows()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        self.encode_with_tags(points, &tags)
    }

    pub fn encode_with_tags(&self, points: &Tensor, tags: &[f64]) -> Result<Tensor> {
        if points.cols() != self.dim || tags.len() != points.rows() {
            return Err(Error::Shape(format!("{:?} points with {} tags for dim {}", points.shape(), tags.len(), self.dim)));
        }
        let l = points.rows();
        let mut out = vec![0.0; l * self.latent_dim];
        for (p, row) in out.chunks_exact_mut(self.latent_dim).enumerate() {
            let x = points.row(p);
            for (r, v) in row.iter_mut().enumerate() {
                let lr = self.lift.row(r);
                *v = x.iter().zip(lr).map(|(a, b)| a * b).sum::<f64>() + self.tag_scale * tags[p] * lr[self.dim];
            }
        }
        Tensor::matrix(l, self.latent_dim, out)
    }

    /// Coordinates of latents (`L x latent_dim`, any leading shape).
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.cols() != self.latent_dim {
            return Err(Error::Shape(format!("latent width {} vs {}", latents.cols(), self.latent_dim)));
        }
        let l = latents.rows();
        let mut out = vec![0.0; l * self.dim];
        for (p, row) in out.chunks_exact_mut(self.dim).enumerate() {
            let z = latents.row(p);
            for (c, v) in row.iter_mut().enumerate() {
                *v = z.iter().enumerate().map(|(r, zr)| zr * self.lift.at(r, c)).sum();
            }
        }
        Tensor::matrix(l, self.dim, out)
    }

    /// The decoding map as a `dim x latent_dim` matrix.
    pub fn decode_matrix(&self) -> Tensor {
        let cols: Vec<Vec<f64>> = (0..self.dim).map(|c| (0..self.latent_dim).map(|r| self.lift.at(r, c)).collect()).collect();
        Tensor::from_rows(&cols).unwrap()
    }
}

/// Spectral norm of `m` by power iteration on `m^T m`.
pub fn operator_norm(m: &Tensor, iters: usize) -> f64 {
    let mtm = m.transpose().matmul(m).unwrap();
    let mut v = vec![1.0; m.cols()];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w: Vec<f64> = (0..mtm.rows()).map(|r| mtm.row(r).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda.sqrt()
}
