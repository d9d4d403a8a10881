//! Binary scene files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic     b"MOCSCENE"
//! version   u32 = 1
//! count     u32           number of records
//! record*   n u32, l u32, dim u32, seed u64, grid u32,
//!           layout  grid*grid f32,
//!           coords  n*l*dim f32 (component-major, then point, then axis)
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gen_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"MOCSCENE";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub seed: u64,
    pub dim: usize,
    pub grid: usize,
    pub layout: Vec<f64>,
    /// One `L x dim` tensor per component.
    pub components: Vec<Tensor>,
}

impl SceneRecord {
    /// Regenerates the scene for `seed`; the canonical way to build records.
    pub fn generate(seed: u64, n: usize, l: usize, cfg: &SceneConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (components, spec) = gen_scene(&mut rng, n, l, cfg)?;
        Ok(Self { seed, dim: spec.dim, grid: spec.grid, layout: spec.layout, components })
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn l(&self) -> usize {
        self.components.first().map_or(0, Tensor::rows)
    }

    /// Copy with every value rounded through f32, as stored on disk.
    pub fn quantized(&self) -> Self {
        let q = |x: &f64| f64::from(*x as f32);
        Self {
            layout: self.layout.iter().map(q).collect(),
            components: self
                .components
                .iter()
                .map(|c| Tensor::new(c.shape(), c.data().iter().map(q).collect()).unwrap())
                .collect(),
            ..self.clone()
        }
    }
}

/// Seed of scene `index` in a dataset built from `base` (SplitMix64 step).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn u32_of(x: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(x).map(u32::to_le_bytes).map_err(|_| Error::Dataset(format!("{what} {x} does not fit in u32")))
}

pub fn write_dataset<W: Write>(mut w: W, records: &[SceneRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(records.len(), "record count")?)?;
    for (i, r) in records.iter().enumerate() {
        let (n, l) = (r.n(), r.l());
        if r.layout.len() != r.grid * r.grid {
            return Err(Error::Dataset(format!("record {i}: layout length {} for grid {}", r.layout.len(), r.grid)));
        }
        if let Some(c) = r.components.iter().find(|c| c.shape() != [l, r.dim]) {
            return Err(Error::Dataset(format!("record {i}: component shape {:?} vs [{l}, {}]", c.shape(), r.dim)));
        }
        w.write_all(&u32_of(n, "component count")?)?;
        w.write_all(&u32_of(l, "point count")?)?;
        w.write_all(&u32_of(r.dim, "dimension")?)?;
        w.write_all(&r.seed.to_le_bytes())?;
        w.write_all(&u32_of(r.grid, "grid")?)?;
        let values = r.layout.iter().chain(r.components.iter().flat_map(|c| c.data()));
        let bytes: Vec<u8> = values.flat_map(|&x| (x as f32).to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let out: Vec<f64> = bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("dataset values".into()));
    }
    Ok(out)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<SceneRecord>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Dataset("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(Error::Dataset(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = read_u32(&mut r)?;
        let l = read_u32(&mut r)?;
        let dim = read_u32(&mut r)?;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let grid = read_u32(&mut r)?;
        if n == 0 || l == 0 || dim == 0 {
            return Err(Error::Dataset(format!("degenerate record header n={n} l={l} dim={dim}")));
        }
        let layout = read_f32s(&mut r, grid * grid)?;
        let coords = read_f32s(&mut r, n * l * dim)?;
        let components = coords.chunks_exact(l * dim).map(|c| Tensor::matrix(l, dim, c.to_vec())).collect::<Result<_>>()?;
        records.push(SceneRecord { seed: u64::from_le_bytes(seed), dim, grid, layout, components });
    }
    Ok(records)
}
