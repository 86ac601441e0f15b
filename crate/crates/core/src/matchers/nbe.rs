//! Normalized brightness error between equally sized patches.

use crate::error::Result;
use crate::grid::Grid;

/// Zero-mean, unit-variance copy of `patch`; a constant patch maps to zeros.
pub fn standardize(patch: &Grid) -> Grid {
    let n = patch.data().len() as f64;
    let mean = patch.mean();
    let var = patch.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-24 {
        return Grid::zeros(patch.height(), patch.width());
    }
    let sd = var.sqrt();
    patch.map(|v| (v - mean) / sd)
}

/// Mean squared difference of standardized patches and the per-pixel
/// absolute difference map. The scalar lies in `[0, 4]`.
pub fn nbe(a: &Grid, b: &Grid) -> Result<(f64, Grid)> {
    a.check_same(b)?;
    Ok(nbe_standardized(&standardize(a), &standardize(b)))
}

pub(crate) fn nbe_standardized(za: &Grid, zb: &Grid) -> (f64, Grid) {
    let map = za.zip_map(zb, |x, y| (x - y).abs()).expect("same dims");
    let scalar = map.data().iter().map(|d| d * d).sum::<f64>() / map.data().len() as f64;
    (scalar, map)
}
