//! Multiscale Gaussian-derivative descriptors sampled around fiducials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{DESCRIPTOR_GRID_SIDE, DESCRIPTOR_SCALES, KERNEL_RADIUS_SIGMAS};

/// Derivative orders per scale: (x order, y order).
pub const ORDERS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// Values per scale block.
pub const BLOCK_LEN: usize = ORDERS.len() * DESCRIPTOR_GRID_SIDE * DESCRIPTOR_GRID_SIDE;
pub const DESCRIPTOR_LEN: usize = BLOCK_LEN * DESCRIPTOR_SCALES.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Per-fiducial descriptors. `None` marks a fiducial skipped for lying too
/// close to the border, so indices stay aligned with the fiducial list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub positions: Vec<Point>,
    pub descriptors: Vec<Option<Vec<f64>>>,
}

impl FeatureSet {
    pub fn usable(&self) -> usize {
        self.descriptors.iter().filter(|d| d.is_some()).count()
    }

    pub fn dimension(&self) -> usize {
        DESCRIPTOR_LEN
    }
}

/// 1D sampled Gaussian-derivative kernel of the given order, indexed `-r..=r`.
///
/// Order 0 sums to 1; order 1 satisfies `sum(k) = 0, sum(t k) = -1`; order 2
/// satisfies `sum(k) = 0, sum(t^2 k) = 2`, so convolution reproduces exact
/// derivatives of low-order polynomials.
pub fn kernel(sigma: f64, order: usize) -> Vec<f64> {
    let r = kernel_radius(sigma) as i64;
    let ts: Vec<f64> = (-r..=r).map(|t| t as f64).collect();
    let g: Vec<f64> = ts
        .iter()
        .map(|t| (-t * t / (2.0 * sigma * sigma)).exp())
        .collect();
    match order {
        0 => {
            let s: f64 = g.iter().sum();
            g.iter().map(|v| v / s).collect()
        }
        1 => {
            let raw: Vec<f64> = ts.iter().zip(&g).map(|(t, g)| -t * g).collect();
            let m: f64 = ts.iter().zip(&raw).map(|(t, k)| t * k).sum();
            raw.iter().map(|k| -k / m).collect()
        }
        2 => {
            let raw: Vec<f64> = ts
                .iter()
                .zip(&g)
                .map(|(t, g)| (t * t / (sigma * sigma) - 1.0) * g)
                .collect();
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let centred: Vec<f64> = raw.iter().map(|k| k - mean).collect();
            let m: f64 = ts.iter().zip(&centred).map(|(t, k)| t * t * k).sum();
            centred.iter().map(|k| 2.0 * k / m).collect()
        }
        _ => panic!("derivative order {order} unsupported"),
    }
}

pub fn kernel_radius(sigma: f64) -> usize {
    (KERNEL_RADIUS_SIGMAS * sigma).ceil() as usize
}

/// Separable convolution response at integer pixel `(x, y)`.
///
/// Written as a sum of differences against the centre sample so that any
/// zero-sum kernel returns exactly zero on a constant neighbourhood.
pub fn response(image: &Grid, x: isize, y: isize, kx: &[f64], ky: &[f64]) -> f64 {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let sum_kx: f64 = kx.iter().sum();
    let sum_ky: f64 = ky.iter().sum();
    let x_zero_sum = sum_kx.abs() < 0.5;
    let y_zero_sum = sum_ky.abs() < 0.5;
    let row = |yy: isize| -> f64 {
        let c = image.get_clamped(yy, x);
        let mut acc = 0.0;
        for (i, k) in kx.iter().enumerate() {
            let t = i as isize - rx;
            acc += (image.get_clamped(yy, x - t) - c) * k;
        }
        if x_zero_sum {
            acc
        } else {
            acc + c
        }
    };
    let centre_row = row(y);
    let mut acc = 0.0;
    for (j, k) in ky.iter().enumerate() {
        let t = j as isize - ry;
        acc += (row(y - t) - centre_row) * k;
    }
    if y_zero_sum {
        acc
    } else {
        acc + centre_row
    }
}

/// Margin a fiducial needs from every border to be described.
pub fn required_margin() -> usize {
    let max_sigma = DESCRIPTOR_SCALES.iter().cloned().fold(0.0, f64::max);
    grid_spacing(max_sigma) * (DESCRIPTOR_GRID_SIDE / 2) + kernel_radius(max_sigma)
}

fn grid_spacing(sigma: f64) -> usize {
    (2.0 * sigma).round() as usize
}

fn describe_at(image: &Grid, cx: isize, cy: isize, kernels: &[[Vec<f64>; 3]]) -> Vec<f64> {
    let half = (DESCRIPTOR_GRID_SIDE / 2) as isize;
    let mut out = Vec::with_capacity(DESCRIPTOR_LEN);
    for (s, &sigma) in DESCRIPTOR_SCALES.iter().enumerate() {
        let step = grid_spacing(sigma) as isize;
        let mut block = Vec::with_capacity(BLOCK_LEN);
        for gy in -half..=half {
            for gx in -half..=half {
                for &(ox, oy) in ORDERS.iter() {
                    block.push(response(
                        image,
                        cx + gx * step,
                        cy + gy * step,
                        &kernels[s][ox],
                        &kernels[s][oy],
                    ));
                }
            }
        }
        // order-0 responses are centred over the sampling grid, making the
        // descriptor invariant to brightness bias
        let n0 = DESCRIPTOR_GRID_SIDE * DESCRIPTOR_GRID_SIDE;
        let mean0 = block.iter().step_by(ORDERS.len()).sum::<f64>() / n0 as f64;
        for v in block.iter_mut().step_by(ORDERS.len()) {
            *v -= mean0;
        }
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            block.iter_mut().for_each(|v| *v /= norm);
        } else {
            block.iter_mut().for_each(|v| *v = 0.0);
        }
        out.extend(block);
    }
    out
}

/// Describes `image` at each fiducial. Fiducials too close to the border for
/// the largest scale are skipped; an error is returned if none remain.
pub fn extract_features(image: &Grid, fiducials: &[Point]) -> Result<FeatureSet> {
    let kernels: Vec<[Vec<f64>; 3]> = DESCRIPTOR_SCALES
        .iter()
        .map(|&s| [kernel(s, 0), kernel(s, 1), kernel(s, 2)])
        .collect();
    let margin = required_margin() as isize;
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut descriptors = Vec::with_capacity(fiducials.len());
    for (i, p) in fiducials.iter().enumerate() {
        let cx = p.x.round() as isize;
        let cy = p.y.round() as isize;
        if !p.x.is_finite()
            || !p.y.is_finite()
            || cx < margin
            || cy < margin
            || cx >= w - margin
            || cy >= h - margin
        {
            log::warn!("fiducial {i} at ({:.1}, {:.1}) too close to border; skipped", p.x, p.y);
            descriptors.push(None);
            continue;
        }
        descriptors.push(Some(describe_at(image, cx, cy, &kernels)));
    }
    let fs = FeatureSet {
        positions: fiducials.to_vec(),
        descriptors,
    };
    if fs.usable() == 0 {
        return Err(Error::Insufficient("no usable fiducials".into()));
    }
    Ok(fs)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine over fiducials described in both sets, mapped to `[0, 1]`.
pub fn descriptor_cosine(a: &FeatureSet, b: &FeatureSet) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (da, db) in a.descriptors.iter().zip(&b.descriptors) {
        if let (Some(da), Some(db)) = (da, db) {
            sum += cosine(da, db);
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    (1.0 + sum / n as f64) / 2.0
}

/// Square patch of side `2 * half_width + 1` centred on the rounded fiducial.
pub fn extract_patch(image: &Grid, centre: Point, half_width: usize) -> Grid {
    let side = 2 * half_width + 1;
    image.crop(
        centre.y.round() as isize - half_width as isize,
        centre.x.round() as isize - half_width as isize,
        side,
        side,
    )
}
