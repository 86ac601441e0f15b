//! Tunable constants for the matchers, ensemble and feedback loop.
//!
//! Every functional-form parameter lives here so the defaults can be audited
//! in one place. Workflow documents may override the ones exposed in
//! [`MatchParams`].

use serde::{Deserialize, Serialize};

/// Gaussian-derivative scales used by the descriptor, in pixels.
pub const DESCRIPTOR_SCALES: [f64; 3] = [1.0, 2.0, 4.0];
/// Kernel support in multiples of sigma.
pub const KERNEL_RADIUS_SIGMAS: f64 = 3.0;
/// Descriptor sampling grid is `GRID_SIDE x GRID_SIDE` points around a fiducial.
pub const DESCRIPTOR_GRID_SIDE: usize = 3;

/// Default patch half-width in pixels.
pub const PATCH_HALF_WIDTH: usize = 24;
/// Smallest permitted patch side.
pub const MIN_PATCH_SIDE: usize = 8;

/// Per-composition-step displacement bound (invertibility guard).
pub const MAX_STEP_PX: f64 = 0.49;

/// Deformation score `exp(-alpha * div - beta * residual)`.
pub const DEFORMATION_ALPHA: f64 = 4.0;
pub const DEFORMATION_BETA: f64 = 1.0;

/// CNN input side after resampling.
pub const CNN_INPUT_SIDE: usize = 32;
pub const CNN_CHANNELS: usize = 8;

/// Hedge learning rate for ensemble weight adaptation.
pub const WEIGHT_ETA: f64 = 0.5;
/// Simplex floor.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Lease time-to-live for work items, seconds.
pub const LEASE_TTL_SECS: u64 = 300;
/// Session lifetime, seconds.
pub const SESSION_TTL_SECS: u64 = 3600;

/// Matcher parameters carried by a workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub patch_half_width: usize,
    pub align_levels: usize,
    pub align_iters: usize,
    pub smoothness: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ransac_iters: usize,
    pub inlier_tol_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            patch_half_width: PATCH_HALF_WIDTH,
            align_levels: 3,
            align_iters: 20,
            smoothness: 0.05,
            alpha: DEFORMATION_ALPHA,
            beta: DEFORMATION_BETA,
            ransac_iters: 200,
            inlier_tol_px: 3.0,
            min_inliers: 3,
            seed: 0,
        }
    }
}

/// Crowd quality-control defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrowdParams {
    pub redundancy: usize,
    pub consensus_fraction: f64,
    pub gold_every: usize,
    pub deactivate_below: f64,
    pub min_gold_for_deactivation: u32,
    pub prior_correct: f64,
    pub prior_wrong: f64,
}

impl Default for CrowdParams {
    fn default() -> Self {
        Self {
            redundancy: 3,
            consensus_fraction: 0.7,
            gold_every: 10,
            deactivate_below: 0.6,
            min_gold_for_deactivation: 5,
            prior_correct: 2.0,
            prior_wrong: 1.0,
        }
    }
}
