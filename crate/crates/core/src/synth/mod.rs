//! Synthetic compositional scenes: every component is a simple shape
//! (box surface, sphere or disk, ring) sampled with a deterministic
//! lattice and a random phase, placed without overlap.

mod codec;
mod dataset;
mod metrics;

pub use codec::{operator_norm, Codec};
pub use dataset::{read_dataset, scene_seed, write_dataset, SceneRecord};
pub use metrics::{chamfer, fps, fscore, self_iou, voxelize};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Ball,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::Ball, ShapeKind::Ring];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub kind: ShapeKind,
    pub center: Vec<f64>,
    /// Half-width of the axis-aligned bounding region.
    pub extent: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
    /// Row-major `grid x grid` occupancy of the components' bounding regions
    /// projected on the first two axes.
    pub layout: Vec<f64>,
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub dim: usize,
    pub grid: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    /// Minimum gap between bounding regions.
    pub margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { dim: 3, grid: 8, min_extent: 0.2, max_extent: 0.35, margin: 0.1 }
    }
}

const MAX_REJECTIONS: usize = 1000;

/// Unit-scale points of one shape, centered at the origin.
fn shape_points(kind: ShapeKind, l: usize, dim: usize, phase: f64) -> Vec<Vec<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..l)
        .map(|k| {
            let u = (k as f64 + 0.5) / l as f64;
            let angle = 2.0 * PI * u + phase;
            match (kind, dim) {
                (ShapeKind::Ring, 2) => vec![angle.cos(), angle.sin()],
                (ShapeKind::Ring, _) => {
                    let mut p = vec![angle.cos(), angle.sin(), 0.0];
                    p.resize(dim, 0.0);
                    p
                }
                (ShapeKind::Ball, 2) => {
                    let r = u.sqrt();
                    let a = k as f64 * golden + phase;
                    vec![r * a.cos(), r * a.sin()]
                }
                (ShapeKind::Ball, _) => {
                    let z = 1.0 - 2.0 * u;
                    let r = (1.0 - z * z).sqrt();
                    let a = k as f64 * golden + phase;
                    let mut p = vec![r * a.cos(), r * a.sin(), z];
                    p.resize(dim, 0.0);
                    p
                }
                (ShapeKind::Box, 2) => {
                    let p = [angle.cos(), angle.sin()];
                    let m = p[0].abs().max(p[1].abs());
                    vec![p[0] / m, p[1] / m]
                }
                (ShapeKind::Box, _) => {
                    let z = 1.0 - 2.0 * u;
                    let r = (1.0 - z * z).sqrt();
                    let a = k as f64 * golden + phase;
                    let p = [r * a.cos(), r * a.sin(), z];
                    let m = p.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    let mut q: Vec<f64> = p.iter().map(|x| x / m).collect();
                    q.resize(dim, 0.0);
                    q
                }
            }
        })
        .collect()
}

fn overlaps(a: &ComponentSpec, b: &ComponentSpec, margin: f64) -> bool {
    a.center.iter().zip(&b.center).all(|(x, y)| (x - y).abs() < a.extent + b.extent + margin)
}

fn layout_grid(components: &[ComponentSpec], grid: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid * grid];
    let cell = 2.0 / grid as f64;
    for c in components {
        for (r, row) in out.chunks_mut(grid).enumerate() {
            let y0 = -1.0 + r as f64 * cell;
            for (col, v) in row.iter_mut().enumerate() {
                let x0 = -1.0 + col as f64 * cell;
                let hit_x = c.center[0] + c.extent > x0 && c.center[0] - c.extent < x0 + cell;
                let hit_y = c.center[1] + c.extent > y0 && c.center[1] - c.extent < y0 + cell;
                if hit_x && hit_y {
                    *v = 1.0;
                }
            }
        }
    }
    out
}

/// Points of one component from its description.
pub fn component_points(c: &ComponentSpec, l: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(l * dim);
    for p in shape_points(c.kind, l, dim, c.phase) {
        data.extend(p.iter().zip(&c.center).map(|(x, o)| o + c.extent * x));
    }
    Tensor::matrix(l, dim, data).unwrap()
}

/// Random scene of `n` components with `l` points each.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, n: usize, l: usize, cfg: &SceneConfig) -> Result<(Vec<Tensor>, SceneSpec)> {
    let dim = cfg.dim;
    if !(2..=50).contains(&n) {
        return Err(Error::InvalidArgument(format!("scene needs 2..=50 components, got {n}")));
    }
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidArgument(format!("dimension {dim} not in {{2, 3}}")));
    }
    if l == 0 {
        return Err(Error::EmptyComponent);
    }
    if !(cfg.min_extent > 0.0 && cfg.min_extent <= cfg.max_extent && cfg.max_extent < 1.0) || cfg.grid == 0 {
        return Err(Error::Config(format!("invalid scene config {cfg:?}")));
    }
    let mut comps: Vec<ComponentSpec> = Vec::with_capacity(n);
    for index in 0..n {
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let extent = rng.random_range(cfg.min_extent..=cfg.max_extent);
            let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0 + extent..=1.0 - extent)).collect();
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let phase = rng.random_range(0.0..2.0 * PI);
            let c = ComponentSpec { kind, center, extent, phase };
            if comps.iter().all(|o| !overlaps(o, &c, cfg.margin)) {
                comps.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SceneTooCrowded { component: index, attempts: MAX_REJECTIONS });
        }
    }
    let points = comps.iter().map(|c| component_points(c, l, dim)).collect();
    let layout = layout_grid(&comps, cfg.grid);
    Ok((points, SceneSpec { dim, components: comps, layout, grid: cfg.grid }))
}

/// All points of a scene in one set.
pub fn merge(components: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = components.iter().collect();
    Tensor::concat_rows(&parts)
}
