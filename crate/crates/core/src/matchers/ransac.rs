//! Iterated correspondence with RANSAC affine re-fitting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureSet, Point};
use crate::params::MatchParams;
use crate::rng::derived_rng;

const OUTER_ROUNDS: usize = 5;

/// Row-major 2x3 affine map `[a b c; d e f]`.
pub type Affine = [[f64; 3]; 2];

pub const IDENTITY: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

pub fn apply(t: &Affine, p: Point) -> Point {
    Point::new(
        t[0][0] * p.x + t[0][1] * p.y + t[0][2],
        t[1][0] * p.x + t[1][1] * p.y + t[1][2],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iters: usize,
    pub inlier_tol_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl From<&MatchParams> for RansacParams {
    fn from(p: &MatchParams) -> Self {
        Self {
            iters: p.ransac_iters,
            inlier_tol_px: p.inlier_tol_px,
            min_inliers: p.min_inliers,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacMatch {
    /// `None` when fewer than three usable correspondences exist.
    pub affine: Option<Affine>,
    /// Inlier correspondences as `(index in a, index in b)`.
    pub inliers: Vec<(usize, usize)>,
    pub score: f64,
    pub rounds: usize,
}

impl RansacMatch {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }

    fn empty() -> Self {
        Self {
            affine: None,
            inliers: Vec::new(),
            score: 0.0,
            rounds: 0,
        }
    }
}

/// Solves the 3x3 system `m x = r` with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        r.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|k| m[i][k] * x[k]).sum();
        x[i] = (r[i] - s) / m[i][i];
    }
    Some(x)
}

/// Least-squares affine fit; exact for three non-collinear pairs.
pub fn fit_affine(src: &[Point], dst: &[Point]) -> Option<Affine> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    // centre for conditioning
    let n = src.len() as f64;
    let (sx, sy) = src.iter().fold((0.0, 0.0), |a, p| (a.0 + p.x, a.1 + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mut m = [[0.0; 3]; 3];
    let mut rx = [0.0; 3];
    let mut ry = [0.0; 3];
    for (p, q) in src.iter().zip(dst) {
        let row = [p.x - cx, p.y - cy, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            rx[i] += row[i] * q.x;
            ry[i] += row[i] * q.y;
        }
    }
    let a = solve3(m, rx)?;
    let b = solve3(m, ry)?;
    Some([
        [a[0], a[1], a[2] - a[0] * cx - a[1] * cy],
        [b[0], b[1], b[2] - b[0] * cx - b[1] * cy],
    ])
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn described(fs: &FeatureSet) -> Vec<(usize, Point, &[f64])> {
    fs.descriptors
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.as_deref().map(|d| (i, fs.positions[i], d)))
        .collect()
}

type Corr = (usize, usize, f64);

/// Keeps one correspondence per target, the one with the closest descriptor.
fn one_to_one(mut corrs: Vec<Corr>) -> Vec<Corr> {
    corrs.sort_by(|x, y| x.1.cmp(&y.1).then(x.2.total_cmp(&y.2)).then(x.0.cmp(&y.0)));
    corrs.dedup_by_key(|c| c.1);
    corrs.sort_by_key(|c| c.0);
    corrs
}

fn inliers_of(t: &Affine, corrs: &[Corr], a: &FeatureSet, b: &FeatureSet, tol: f64) -> Vec<(usize, usize)> {
    corrs
        .iter()
        .filter(|&&(i, j, _)| {
            let p = apply(t, a.positions[i]);
            let q = b.positions[j];
            ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() < tol
        })
        .map(|&(i, j, _)| (i, j))
        .collect()
}

fn refit(inl: &[(usize, usize)], a: &FeatureSet, b: &FeatureSet) -> Option<Affine> {
    let src: Vec<Point> = inl.iter().map(|&(i, _)| a.positions[i]).collect();
    let dst: Vec<Point> = inl.iter().map(|&(_, j)| b.positions[j]).collect();
    fit_affine(&src, &dst)
}

fn ransac(
    corrs: &[Corr],
    a: &FeatureSet,
    b: &FeatureSet,
    params: &RansacParams,
    round: usize,
) -> Option<(Affine, Vec<(usize, usize)>)> {
    if corrs.len() < 3 {
        return None;
    }
    let mut rng = derived_rng(params.seed, &[round as u64]);
    let mut best: Option<(Affine, Vec<(usize, usize)>)> = None;
    for _ in 0..params.iters.max(1) {
        let i0 = rng.gen_range(0..corrs.len());
        let mut i1 = rng.gen_range(0..corrs.len() - 1);
        if i1 >= i0 {
            i1 += 1;
        }
        let mut i2 = rng.gen_range(0..corrs.len() - 2);
        for &taken in [i0.min(i1), i0.max(i1)].iter() {
            if i2 >= taken {
                i2 += 1;
            }
        }
        let sample = [corrs[i0], corrs[i1], corrs[i2]];
        let src: Vec<Point> = sample.iter().map(|c| a.positions[c.0]).collect();
        let dst: Vec<Point> = sample.iter().map(|c| b.positions[c.1]).collect();
        let Some(t) = fit_affine(&src, &dst) else { continue };
        let inl = inliers_of(&t, corrs, a, b, params.inlier_tol_px);
        if best.as_ref().map_or(true, |(_, bi)| inl.len() > bi.len()) {
            best = Some((t, inl));
        }
    }
    let (mut t, mut inl) = best?;
    // polish with least squares on the consensus set
    for _ in 0..3 {
        let Some(t2) = refit(&inl, a, b) else { break };
        let inl2 = inliers_of(&t2, corrs, a, b, params.inlier_tol_px);
        if inl2.len() < inl.len() {
            break;
        }
        let done = inl2 == inl;
        t = t2;
        inl = inl2;
        if done {
            break;
        }
    }
    Some((t, inl))
}

/// Alternates descriptor matching (gated by the current transform) with RANSAC
/// affine fits until the inlier set is stable or five rounds have run.
pub fn ransac_match(a: &FeatureSet, b: &FeatureSet, params: &RansacParams) -> RansacMatch {
    let da = described(a);
    let db = described(b);
    if da.len() < 3 || db.len() < 3 {
        return RansacMatch::empty();
    }
    let nearest = |p: &[f64], gate: &dyn Fn(usize) -> bool| -> Option<(usize, f64)> {
        db.iter()
            .filter(|(j, _, _)| gate(*j))
            .map(|&(j, _, d)| (j, sq_dist(p, d)))
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
    };
    let mut corrs: Vec<Corr> = one_to_one(
        da.iter()
            .filter_map(|&(i, _, d)| nearest(d, &|_| true).map(|(j, dist)| (i, j, dist)))
            .collect(),
    );
    let mut current: Option<(Affine, Vec<(usize, usize)>)> = None;
    let mut rounds = 0;
    for round in 0..OUTER_ROUNDS {
        rounds = round + 1;
        let Some((t, inl)) = ransac(&corrs, a, b, params, round) else { break };
        let stable = current.as_ref().is_some_and(|(_, prev)| *prev == inl);
        let shrank = current.as_ref().is_some_and(|(_, prev)| inl.len() < prev.len());
        if shrank {
            break;
        }
        // A bare three-point fit is exact for any sample, so gating around it
        // only collects coincidences.
        let minimal = inl.len() <= 3;
        current = Some((t, inl));
        if stable || minimal {
            break;
        }
        let gate_px = 2.0 * params.inlier_tol_px;
        corrs = one_to_one(
            da.iter()
                .filter_map(|&(i, p, d)| {
                    let pred = apply(&t, p);
                    nearest(d, &|j| {
                        let q = b.positions[j];
                        ((pred.x - q.x).powi(2) + (pred.y - q.y).powi(2)).sqrt() < gate_px
                    })
                    .map(|(j, dist)| (i, j, dist))
                })
                .collect(),
        );
        if corrs.len() < 3 {
            break;
        }
    }
    match current {
        Some((t, inl)) if inl.len() >= params.min_inliers.max(3) => {
            let score = inl.len() as f64 / da.len().min(db.len()) as f64;
            RansacMatch {
                affine: Some(t),
                inliers: inl,
                score: score.min(1.0),
                rounds,
            }
        }
        _ => RansacMatch {
            rounds,
            ..RansacMatch::empty()
        },
    }
}
