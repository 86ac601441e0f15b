//! Coarse-to-fine diffeomorphic patch alignment.
//!
//! Each iteration solves a pointwise Tikhonov-regularized linearized SSD
//! problem for an incremental displacement, smooths it, clips it below half a
//! pixel, and composes it onto the running field. Small composed steps keep
//! the warp invertible. Running the same loop over a box pyramid gives the
//! scale cascade.

use serde::{Deserialize, Serialize};

use super::nbe::{nbe_standardized, standardize};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{MatchParams, MAX_STEP_PX, MIN_PATCH_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub levels: usize,
    pub iters: usize,
    pub smoothness: f64,
}

impl From<&MatchParams> for AlignParams {
    fn from(p: &MatchParams) -> Self {
        Self {
            levels: p.align_levels,
            iters: p.align_iters,
            smoothness: p.smoothness,
        }
    }
}

impl Default for AlignParams {
    fn default() -> Self {
        (&MatchParams::default()).into()
    }
}

/// Displacement `d = (u, v)` such that `b(p) ~ a(p - d(p))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub u: Grid,
    pub v: Grid,
    /// Normalized brightness error after alignment.
    pub residual: f64,
    /// Normalized brightness error of the unaligned pair.
    pub initial_residual: f64,
    /// Per-pixel absolute standardized difference after alignment.
    pub error_map: Grid,
    pub converged: bool,
}

impl DeformationField {
    pub fn dims(&self) -> (usize, usize) {
        self.u.dims()
    }

    pub fn mean_displacement(&self) -> (f64, f64) {
        (self.u.mean(), self.v.mean())
    }
}

/// Resamples `a` through the field: `out(p) = a(p - d(p))`.
pub fn warp(a: &Grid, u: &Grid, v: &Grid) -> Grid {
    let w = a.width();
    Grid::from_fn(a.height(), w, |y, x| {
        let i = y * w + x;
        a.sample(y as f64 - v.data()[i], x as f64 - u.data()[i])
    })
}

fn gradient(g: &Grid) -> (Grid, Grid) {
    let (h, w) = g.dims();
    let gx = Grid::from_fn(h, w, |y, x| {
        let l = g.get(y, x.saturating_sub(1));
        let r = g.get(y, (x + 1).min(w - 1));
        let span = ((x + 1).min(w - 1) - x.saturating_sub(1)) as f64;
        (r - l) / span.max(1.0)
    });
    let gy = Grid::from_fn(h, w, |y, x| {
        let t = g.get(y.saturating_sub(1), x);
        let b = g.get((y + 1).min(h - 1), x);
        let span = ((y + 1).min(h - 1) - y.saturating_sub(1)) as f64;
        (b - t) / span.max(1.0)
    });
    (gx, gy)
}

fn upsample_field(f: &Grid, h: usize, w: usize) -> Grid {
    Grid::from_fn(h, w, |y, x| {
        2.0 * f.sample((y as f64 - 0.5) / 2.0, (x as f64 - 0.5) / 2.0)
    })
}

struct Level {
    a: Grid,
    b: Grid,
}

fn residual_of(a: &Grid, b: &Grid, u: &Grid, v: &Grid) -> (f64, Grid) {
    nbe_standardized(&standardize(&warp(a, u, v)), b)
}

/// One optimization sweep at a single level, returning the field with the
/// lowest residual seen (starting field included).
fn refine(level: &Level, mut u: Grid, mut v: Grid, params: &AlignParams) -> (Grid, Grid, f64) {
    let (h, w) = level.a.dims();
    let (mut best_r, _) = residual_of(&level.a, &level.b, &u, &v);
    let mut best = (u.clone(), v.clone());
    let (bgx, bgy) = gradient(&level.b);
    for _ in 0..params.iters {
        let aw = standardize(&warp(&level.a, &u, &v));
        let (agx, agy) = gradient(&aw);
        let mut du = Grid::zeros(h, w);
        let mut dv = Grid::zeros(h, w);
        for i in 0..h * w {
            let r = aw.data()[i] - level.b.data()[i];
            let gx = 0.5 * (agx.data()[i] + bgx.data()[i]);
            let gy = 0.5 * (agy.data()[i] + bgy.data()[i]);
            let denom = gx * gx + gy * gy + r * r + params.smoothness;
            du.data_mut()[i] = r * gx / denom;
            dv.data_mut()[i] = r * gy / denom;
        }
        let du = du.smooth3();
        let dv = dv.smooth3();
        let mut nu = Grid::zeros(h, w);
        let mut nv = Grid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (mut sx, mut sy) = (du.data()[i], dv.data()[i]);
                let n = (sx * sx + sy * sy).sqrt();
                if n > MAX_STEP_PX {
                    sx *= MAX_STEP_PX / n;
                    sy *= MAX_STEP_PX / n;
                }
                // compose: d'(p) = s(p) + d(p - s(p))
                let py = y as f64 - sy;
                let px = x as f64 - sx;
                nu.data_mut()[i] = sx + u.sample(py, px);
                nv.data_mut()[i] = sy + v.sample(py, px);
            }
        }
        u = nu.smooth3();
        v = nv.smooth3();
        let (r, _) = residual_of(&level.a, &level.b, &u, &v);
        if r < best_r {
            best_r = r;
            best = (u.clone(), v.clone());
        }
    }
    (best.0, best.1, best_r)
}

/// Aligns `a` onto `b`. The returned residual never exceeds `nbe(a, b)`.
pub fn diffeo_align(a: &Grid, b: &Grid, params: &AlignParams) -> Result<DeformationField> {
    a.check_same(b)?;
    if params.levels == 0 || params.iters == 0 || params.smoothness <= 0.0 {
        return Err(Error::validation("alignment parameters must be positive"));
    }
    let (h, w) = a.dims();
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("patch {h}x{w} too small")));
    }
    let mut pyramid = vec![Level {
        a: standardize(a),
        b: standardize(b),
    }];
    while pyramid.len() < params.levels {
        let last = pyramid.last().unwrap();
        if last.a.height().min(last.a.width()) < MIN_PATCH_SIDE {
            break;
        }
        let next = Level {
            a: last.a.downsample(),
            b: last.b.downsample(),
        };
        pyramid.push(next);
    }

    let fine = &pyramid[0];
    let zero = Grid::zeros(h, w);
    let (initial_residual, initial_map) = residual_of(&fine.a, &fine.b, &zero, &zero);

    let coarsest = pyramid.last().unwrap();
    let mut u = Grid::zeros(coarsest.a.height(), coarsest.a.width());
    let mut v = u.clone();
    let mut residual = f64::INFINITY;
    for (k, level) in pyramid.iter().enumerate().rev() {
        if k + 1 < pyramid.len() {
            u = upsample_field(&u, level.a.height(), level.a.width());
            v = upsample_field(&v, level.a.height(), level.a.width());
        }
        let (nu, nv, r) = refine(level, u, v, params);
        u = nu;
        v = nv;
        residual = r;
    }

    if residual > initial_residual {
        return Ok(DeformationField {
            u: zero.clone(),
            v: zero,
            residual: initial_residual,
            initial_residual,
            error_map: initial_map,
            converged: false,
        });
    }
    let (residual, error_map) = residual_of(&fine.a, &fine.b, &u, &v);
    Ok(DeformationField {
        u,
        v,
        residual,
        initial_residual,
        error_map,
        converged: residual < initial_residual || initial_residual == 0.0,
    })
}
