//! Point-set metrics and farthest point sampling.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 || a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("point dimension {} vs {}", a.cols(), b.cols())));
    }
    Ok(())
}

/// Distance from each point of `a` to its nearest point of `b`.
fn nearest(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| (0..b.rows()).map(|j| dist(a.row(i), b.row(j))).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Symmetric mean of nearest-neighbor Euclidean distances, halved.
pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(nearest(a, b)) + mean(nearest(b, a))))
}

/// Harmonic mean of precision (points of `a` within `tau` of `b`) and recall.
pub fn fscore(a: &Tensor, b: &Tensor, tau: f64) -> Result<f64> {
    check_pair(a, b)?;
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("threshold {tau} must be positive")));
    }
    let frac = |v: Vec<f64>| v.iter().filter(|&&d| d <= tau).count() as f64 / v.len() as f64;
    let (p, r) = (frac(nearest(a, b)), frac(nearest(b, a)));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Occupied cells of a `resolution^dim` grid over `[-1, 1]^dim`; points
/// outside the cube are clamped to the border cells.
pub fn voxelize(points: &Tensor, resolution: usize) -> HashSet<Vec<usize>> {
    let cell = |x: f64| (((x + 1.0) / 2.0 * resolution as f64).floor().max(0.0) as usize).min(resolution - 1);
    (0..points.rows()).map(|r| points.row(r).iter().map(|&x| cell(x)).collect()).collect()
}

/// Mean voxel IoU over unordered component pairs.
pub fn self_iou(components: &[Tensor], resolution: usize) -> Result<f64> {
    if components.len() < 2 {
        return Err(Error::InvalidArgument("self-IoU needs at least two components".into()));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let vox: Vec<HashSet<Vec<usize>>> = components.iter().map(|c| voxelize(c, resolution)).collect();
    if let Some(i) = vox.iter().position(HashSet::is_empty) {
        return Err(Error::InvalidArgument(format!("component {i} voxelizes to nothing")));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vox.len() {
        for j in i + 1..vox.len() {
            let inter = vox[i].intersection(&vox[j]).count();
            let union = vox[i].len() + vox[j].len() - inter;
            total += inter as f64 / union as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Greedy farthest point sampling starting from `start`.
pub fn fps(points: &Tensor, n: usize, start: usize) -> Result<Tensor> {
    let l = points.rows();
    if n > l {
        return Err(Error::InvalidArgument(format!("cannot pick {n} of {l} points")));
    }
    if start >= l && n > 0 {
        return Err(Error::InvalidArgument(format!("start index {start} out of range {l}")));
    }
    let mut chosen = Vec::with_capacity(n);
    let mut best = vec![f64::INFINITY; l];
    let mut current = start;
    for _ in 0..n {
        chosen.push(current);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist(points.row(i), points.row(current)));
        }
        // first index among the farthest
        current = (0..l).fold(0, |arg, i| if best[i] > best[arg] { i } else { arg });
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();
    if rows.is_empty() {
        return Tensor::new(&[0, points.cols()], Vec::new());
    }
    Tensor::from_rows(&rows)
}
