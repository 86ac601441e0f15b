//! An independently written forward pass of the primed CNN and a
//! finite-difference gradient check built on it.

#![allow(dead_code)]

use rand::Rng;
use sloop_core::grid::Grid;
use sloop_core::matchers::cnn::{CnnInput, PrimedCnnModel, PARAM_COUNT};
use sloop_core::rng::rng;

pub const S: usize = 32;

pub fn random_input(seed: u64) -> CnnInput {
    let mut r = rng(seed);
    let a = Grid::from_fn(S, S, |_, _| r.gen_range(-0.3..0.3));
    let b = Grid::from_fn(S, S, |_, _| r.gen_range(0.0..2.0));
    CnnInput::new(&a, &b).unwrap()
}

pub fn random_model(seed: u64) -> PrimedCnnModel {
    let mut m = PrimedCnnModel::init(seed);
    let mut r = rng(seed ^ 0xABCD);
    // non-zero biases so every code path is exercised
    for p in m.params.iter_mut() {
        *p += r.gen_range(-0.05..0.05);
    }
    m
}

/// Straightforward nested-loop forward pass written from the layer description.
/// Also returns the sign pattern of every ReLU pre-activation.
pub fn naive_eval(params: &[f64], x: &[f64]) -> (f64, Vec<bool>) {
    let w1 = |o: usize, k: usize, i: usize, j: usize| params[o * 18 + k * 9 + i * 3 + j];
    let b1 = |o: usize| params[144 + o];
    let w2 = |o: usize, k: usize, i: usize, j: usize| params[152 + o * 72 + k * 9 + i * 3 + j];
    let b2 = |o: usize| params[728 + o];
    let w3 = |c: usize| params[736 + c];
    let b3 = params[744];
    let mut pattern = Vec::with_capacity(8 * (900 + 784));
    let mut h1 = vec![[[0.0f64; 30]; 30]; 8];
    for o in 0..8 {
        for y in 0..30 {
            for xx in 0..30 {
                let mut s = b1(o);
                for k in 0..2 {
                    for i in 0..3 {
                        for j in 0..3 {
                            s += w1(o, k, i, j) * x[k * S * S + (y + i) * S + xx + j];
                        }
                    }
                }
                pattern.push(s > 0.0);
                h1[o][y][xx] = s.max(0.0);
            }
        }
    }
    let mut pooled = [0.0f64; 8];
    for o in 0..8 {
        let mut total = 0.0;
        for y in 0..28 {
            for xx in 0..28 {
                let mut s = b2(o);
                for k in 0..8 {
                    for i in 0..3 {
                        for j in 0..3 {
                            s += w2(o, k, i, j) * h1[k][y + i][xx + j];
                        }
                    }
                }
                pattern.push(s > 0.0);
                total += s.max(0.0);
            }
        }
        pooled[o] = total / 784.0;
    }
    let logit: f64 = b3 + (0..8).map(|c| w3(c) * pooled[c]).sum::<f64>();
    (1.0 / (1.0 + (-logit).exp()), pattern)
}

pub fn naive_forward(params: &[f64], x: &[f64]) -> f64 {
    naive_eval(params, x).0
}

pub fn bce(p: f64, y: bool) -> f64 {
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub struct GradientCheck {
    /// Max elementwise relative error over coordinates whose ReLU pattern is
    /// unchanged across the finite-difference stencil.
    pub max_rel_smooth: f64,
    /// Max elementwise relative error over all coordinates, kinks included.
    pub max_rel_all: f64,
    pub kink_coordinates: usize,
    pub total_coordinates: usize,
}

/// Analytic gradients against central finite differences (step 1e-3) of an
/// independently written forward pass, over `triples` seeded triples.
pub fn gradient_check(triples: u64) -> GradientCheck {
    let h = 1e-3;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut out = GradientCheck {
        max_rel_smooth: 0.0,
        max_rel_all: 0.0,
        kink_coordinates: 0,
        total_coordinates: 0,
    };
    for seed in 0..triples {
        let m = random_model(1000 + seed);
        let x = random_input(2000 + seed);
        let label = seed % 2 == 0;
        let (_, analytic) = m.loss_and_gradient(&x, label);
        let (_, base_pattern) = naive_eval(&m.params, x.values());
        for k in 0..PARAM_COUNT {
            let mut plus = m.params.clone();
            plus[k] += h;
            let mut minus = m.params.clone();
            minus[k] -= h;
            let (pp, pat_p) = naive_eval(&plus, x.values());
            let (pm, pat_m) = naive_eval(&minus, x.values());
            let numeric = (bce(pp, label) - bce(pm, label)) / (2.0 * h);
            let e = rel(analytic[k], numeric);
            out.total_coordinates += 1;
            out.max_rel_all = out.max_rel_all.max(e);
            if pat_p == base_pattern && pat_m == base_pattern {
                out.max_rel_smooth = out.max_rel_smooth.max(e);
            } else {
                out.kink_coordinates += 1;
            }
        }
    }
    out
}
