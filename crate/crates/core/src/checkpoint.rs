//! Model checkpoints: a text manifest plus one little-endian f32 blob.
//!
//! ```text
//! moc-checkpoint 1
//! blob model.bin
//! config {"d_model":64,...}
//! tensor <name> <dim>x<dim>... <byte offset> <byte length>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "model.manifest";
pub const BLOB_FILE: &str = "model.bin";
const HEADER: &str = "moc-checkpoint 1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rounds every parameter through f32, the stored precision.
pub fn quantize(params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        let data = t.data().iter().map(|&x| f64::from(x as f32)).collect();
        out.insert(name, Tensor::new(t.shape(), data).unwrap()).unwrap();
    }
    out
}

pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{HEADER}\nblob {BLOB_FILE}\nconfig {}\n", serde_json::to_string(cfg)?);
    let mut blob = Vec::with_capacity(params.num_elements() * 4);
    for (name, t) in params.iter() {
        if name.contains(char::is_whitespace) {
            return Err(bad(format!("parameter name {name:?} contains whitespace")));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let offset = blob.len();
        blob.extend(t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()));
        writeln!(manifest, "tensor {name} {} {offset} {}", shape.join("x"), blob.len() - offset).unwrap();
    }
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Loads a checkpoint and checks it against a freshly built model of the
/// stored config. With `expected`, the stored config must equal it.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<(ModelConfig, ParamStore)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad("unrecognized manifest header"));
    }
    let blob_name = lines.next().and_then(|l| l.strip_prefix("blob ")).ok_or_else(|| bad("missing blob line"))?;
    let blob = fs::read(dir.join(blob_name))?;
    let cfg_json = lines.next().and_then(|l| l.strip_prefix("config ")).ok_or_else(|| bad("missing config line"))?;
    let cfg: ModelConfig = serde_json::from_str(cfg_json)?;
    if let Some(e) = expected {
        if e != &cfg {
            return Err(bad("stored model config differs from the requested config"));
        }
    }
    let mut params = ParamStore::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [kind, name, shape, offset, len] = f[..] else {
            return Err(bad(format!("malformed line {line:?}")));
        };
        if kind != "tensor" {
            return Err(bad(format!("unknown entry {kind:?}")));
        }
        let shape: Vec<usize> = shape.split('x').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(format!("bad shape in {line:?}")))?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
        let len: usize = len.parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
        let count: usize = shape.iter().product();
        if len != 4 * count || offset + len > blob.len() {
            return Err(bad(format!("tensor {name} does not fit the blob")));
        }
        let data = blob[offset..offset + len]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        params.insert(name, Tensor::new(&shape, data)?)?;
    }
    let reference = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => return Err(bad(format!("missing parameter {name}"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(bad(format!("parameter {name} has shape {:?}, config implies {:?}", p.shape(), t.shape())))
            }
            Some(_) => {}
        }
    }
    if params.len() != reference.len() {
        let extra = params.names().find(|n| !reference.contains(n)).unwrap_or_default().to_string();
        return Err(bad(format!("unexpected parameter {extra}")));
    }
    Ok((cfg, params))
}
