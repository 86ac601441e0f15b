//! The primed shallow CNN: deformation-divergence and brightness-error maps in,
//! same-individual probability out.
//!
//! Architecture (version 1): conv 2->8 3x3 valid + ReLU, conv 8->8 3x3 valid +
//! ReLU + global average pool, fully connected 8->1 + sigmoid. Parameters are
//! stored flat so the optimizer and gradient checks treat them uniformly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{CNN_CHANNELS, CNN_INPUT_SIDE};
use crate::rng::rng;

pub const ARCH_VERSION: u32 = 1;
const S0: usize = CNN_INPUT_SIDE;
const S1: usize = S0 - 2;
const S2: usize = S1 - 2;
const C: usize = CNN_CHANNELS;
const IN_C: usize = 2;

const W1: usize = 0;
const B1: usize = W1 + C * IN_C * 9;
const W2: usize = B1 + C;
const B2: usize = W2 + C * C * 9;
const W3: usize = B2 + C;
const B3: usize = W3 + C;
pub const PARAM_COUNT: usize = B3 + 1;

/// Divergence is typically two orders of magnitude smaller than the
/// brightness error, so it is rescaled on the way in.
pub const DIV_INPUT_GAIN: f64 = 10.0;

/// Two stacked `32 x 32` channels: divergence map (scaled by
/// [`DIV_INPUT_GAIN`]) then brightness-error map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnInput(Vec<f64>);

impl CnnInput {
    pub fn new(div_map: &Grid, nbe_map: &Grid) -> Result<Self> {
        for (name, g) in [("divergence", div_map), ("brightness-error", nbe_map)] {
            if g.dims() != (S0, S0) {
                return Err(Error::Dimension(format!(
                    "{name} map is {}x{}, expected {S0}x{S0}",
                    g.height(),
                    g.width()
                )));
            }
        }
        let mut v = Vec::with_capacity(IN_C * S0 * S0);
        v.extend(div_map.data().iter().map(|d| d * DIV_INPUT_GAIN));
        v.extend_from_slice(nbe_map.data());
        Ok(Self(v))
    }

    /// Resamples arbitrary-size maps to the network input size first.
    pub fn resampled(div_map: &Grid, nbe_map: &Grid) -> Result<Self> {
        div_map.check_same(nbe_map)?;
        Self::new(&div_map.resample(S0, S0), &nbe_map.resample(S0, S0))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimedCnnModel {
    pub version: u32,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 30,
            batch: 32,
            seed: 0,
        }
    }
}

pub struct TrainReport {
    pub model: PrimedCnnModel,
    /// Mean training loss after each epoch, preceded by the initial loss.
    pub losses: Vec<f64>,
}

struct Cache {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    pooled: [f64; C],
    prob: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Valid 3x3 convolution of `in_c` channels of side `s_in` into `out_c` channels.
fn conv3(input: &[f64], in_c: usize, s_in: usize, w: &[f64], b: &[f64], out_c: usize) -> Vec<f64> {
    let s_out = s_in - 2;
    let mut out = vec![0.0; out_c * s_out * s_out];
    for o in 0..out_c {
        let plane = &mut out[o * s_out * s_out..(o + 1) * s_out * s_out];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for k in 0..in_c {
            let src = &input[k * s_in * s_in..(k + 1) * s_in * s_in];
            for di in 0..3 {
                for dj in 0..3 {
                    let wt = w[((o * in_c + k) * 3 + di) * 3 + dj];
                    for i in 0..s_out {
                        let row = &src[(i + di) * s_in + dj..(i + di) * s_in + dj + s_out];
                        let dst = &mut plane[i * s_out..(i + 1) * s_out];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and (optionally) the input gradient of `conv3`.
#[allow(clippy::too_many_arguments)]
fn conv3_backward(
    input: &[f64],
    in_c: usize,
    s_in: usize,
    w: &[f64],
    dout: &[f64],
    out_c: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let s_out = s_in - 2;
    for o in 0..out_c {
        let g = &dout[o * s_out * s_out..(o + 1) * s_out * s_out];
        db[o] += g.iter().sum::<f64>();
        for k in 0..in_c {
            let src = &input[k * s_in * s_in..(k + 1) * s_in * s_in];
            for di in 0..3 {
                for dj in 0..3 {
                    let widx = ((o * in_c + k) * 3 + di) * 3 + dj;
                    let mut acc = 0.0;
                    for i in 0..s_out {
                        let row = &src[(i + di) * s_in + dj..(i + di) * s_in + dj + s_out];
                        let gr = &g[i * s_out..(i + 1) * s_out];
                        acc += row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[widx] += acc;
                    if let Some(din) = dinput.as_deref_mut() {
                        let wt = w[widx];
                        let dplane = &mut din[k * s_in * s_in..(k + 1) * s_in * s_in];
                        for i in 0..s_out {
                            let drow = &mut dplane[(i + di) * s_in + dj..(i + di) * s_in + dj + s_out];
                            let gr = &g[i * s_out..(i + 1) * s_out];
                            for (d, gv) in drow.iter_mut().zip(gr) {
                                *d += wt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl PrimedCnnModel {
    pub fn zeros() -> Self {
        Self {
            version: ARCH_VERSION,
            params: vec![0.0; PARAM_COUNT],
        }
    }

    /// He-uniform initialization from the seeded generator; biases start at zero.
    pub fn init(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut params = vec![0.0; PARAM_COUNT];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = r.gen_range(-bound..bound);
            }
        };
        fill(W1..B1, IN_C * 9);
        fill(W2..B2, C * 9);
        fill(W3..B3, C);
        Self {
            version: ARCH_VERSION,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check(&self) -> Result<()> {
        if self.params.len() != PARAM_COUNT || self.version != ARCH_VERSION {
            return Err(Error::Dimension(format!(
                "model v{} with {} parameters, expected v{ARCH_VERSION} with {PARAM_COUNT}",
                self.version,
                self.params.len()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &CnnInput) -> Cache {
        let p = &self.params;
        let z1 = conv3(&x.0, IN_C, S0, &p[W1..B1], &p[B1..W2], C);
        let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = conv3(&a1, C, S1, &p[W2..B2], &p[B2..W3], C);
        let mut pooled = [0.0; C];
        for (c, slot) in pooled.iter_mut().enumerate() {
            let plane = &z2[c * S2 * S2..(c + 1) * S2 * S2];
            *slot = plane.iter().map(|v| v.max(0.0)).sum::<f64>() / (S2 * S2) as f64;
        }
        let logit = p[B3] + (0..C).map(|c| p[W3 + c] * pooled[c]).sum::<f64>();
        Cache {
            z1,
            a1,
            z2,
            pooled,
            prob: sigmoid(logit),
        }
    }

    pub fn forward(&self, x: &CnnInput) -> Result<f64> {
        self.check()?;
        Ok(self.forward_cached(x).prob)
    }

    /// Binary cross-entropy of one example and its gradient w.r.t. every parameter.
    pub fn loss_and_gradient(&self, x: &CnnInput, label: bool) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; PARAM_COUNT];
        let loss = self.accumulate_gradient(x, label, &mut grad);
        (loss, grad)
    }

    fn accumulate_gradient(&self, x: &CnnInput, label: bool, grad: &mut [f64]) -> f64 {
        let p = &self.params;
        let cache = self.forward_cached(x);
        let y = if label { 1.0 } else { 0.0 };
        let loss = bce(cache.prob, y);
        let dlogit = cache.prob - y;
        grad[B3] += dlogit;
        let mut dz2 = vec![0.0; C * S2 * S2];
        for c in 0..C {
            grad[W3 + c] += dlogit * cache.pooled[c];
            let dpool = dlogit * p[W3 + c] / (S2 * S2) as f64;
            for i in 0..S2 * S2 {
                let idx = c * S2 * S2 + i;
                if cache.z2[idx] > 0.0 {
                    dz2[idx] = dpool;
                }
            }
        }
        let mut da1 = vec![0.0; C * S1 * S1];
        {
            let (head, tail) = grad.split_at_mut(B2);
            conv3_backward(
                &cache.a1,
                C,
                S1,
                &p[W2..B2],
                &dz2,
                C,
                &mut head[W2..B2],
                &mut tail[..C],
                Some(&mut da1),
            );
        }
        let dz1: Vec<f64> = da1
            .iter()
            .zip(&cache.z1)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let (head, tail) = grad.split_at_mut(B1);
        conv3_backward(&x.0, IN_C, S0, &p[W1..B1], &dz1, C, &mut head[W1..B1], &mut tail[..C], None);
        loss
    }
}

fn bce(prob: f64, y: f64) -> f64 {
    let p = prob.clamp(1e-15, 1.0 - 1e-15);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn mean_loss(model: &PrimedCnnModel, data: &[(CnnInput, bool)]) -> f64 {
    data.iter()
        .map(|(x, y)| bce(model.forward_cached(x).prob, if *y { 1.0 } else { 0.0 }))
        .sum::<f64>()
        / data.len().max(1) as f64
}

/// Mini-batch Adam on binary cross-entropy. Deterministic for a fixed seed.
pub fn train(data: &[(CnnInput, bool)], hyper: &TrainHyper) -> Result<TrainReport> {
    let positives = data.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::Insufficient("training needs both classes".into()));
    }
    if hyper.batch == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut model = PrimedCnnModel::init(hyper.seed);
    let mut shuffle_rng = rng(crate::rng::derive(hyper.seed, &[1]));
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; PARAM_COUNT];
    let mut v = vec![0.0; PARAM_COUNT];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = vec![mean_loss(&model, data)];
    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hyper.batch) {
            let mut grad = vec![0.0; PARAM_COUNT];
            for &i in chunk {
                let (x, y) = &data[i];
                model.accumulate_gradient(x, *y, &mut grad);
            }
            let scale = 1.0 / chunk.len() as f64;
            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            for k in 0..PARAM_COUNT {
                let g = grad[k] * scale;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                model.params[k] -= hyper.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
        losses.push(mean_loss(&model, data));
    }
    Ok(TrainReport { model, losses })
}
