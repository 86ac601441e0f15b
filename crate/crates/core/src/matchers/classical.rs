//! Pairwise image scoring with the individual matchers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::align::{diffeo_align, AlignParams, DeformationField};
use super::cnn::{CnnInput, PrimedCnnModel};
use super::divergence::divergence;
use super::features::{descriptor_cosine, extract_features, extract_patch, FeatureSet, Point};
use super::ransac::{ransac_match, RansacParams};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::MatchParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    DescriptorCosine,
    Ransac,
    Deformation,
    PrimedCnn,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [
        MethodId::DescriptorCosine,
        MethodId::Ransac,
        MethodId::Deformation,
        MethodId::PrimedCnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::DescriptorCosine => "descriptor_cosine",
            MethodId::Ransac => "ransac",
            MethodId::Deformation => "deformation",
            MethodId::PrimedCnn => "primed_cnn",
        }
    }

    /// Methods that need dense patch alignment.
    pub fn is_expensive(self) -> bool {
        matches!(self, MethodId::Deformation | MethodId::PrimedCnn)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub query_id: String,
    pub candidate_id: String,
    pub method_id: MethodId,
    pub raw: f64,
    pub normalized: f64,
}

/// An image reduced to what the matchers consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedImage {
    pub id: String,
    pub features: FeatureSet,
    /// One patch per fiducial (`None` where the fiducial was skipped); empty
    /// when patches have not been extracted.
    pub patches: Vec<Option<Grid>>,
}

impl PreparedImage {
    pub fn new(id: impl Into<String>, image: &Grid, fiducials: &[Point], params: &MatchParams) -> Result<Self> {
        let features = extract_features(image, fiducials)?;
        let patches = features
            .descriptors
            .iter()
            .zip(fiducials)
            .map(|(d, &p)| d.as_ref().map(|_| extract_patch(image, p, params.patch_half_width)))
            .collect();
        Ok(Self {
            id: id.into(),
            features,
            patches,
        })
    }

    /// Copy with every fiducial outside `keep` marked unusable.
    pub fn masked(&self, keep: &[usize]) -> Self {
        let mut out = self.clone();
        for (i, d) in out.features.descriptors.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *d = None;
            }
        }
        for (i, p) in out.patches.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *p = None;
            }
        }
        out
    }
}

/// Fiducial indices described in both images.
pub fn common_fiducials(a: &PreparedImage, b: &PreparedImage) -> Vec<usize> {
    a.features
        .descriptors
        .iter()
        .zip(&b.features.descriptors)
        .enumerate()
        .filter(|(_, (x, y))| x.is_some() && y.is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Alignment outcome at one fiducial.
#[derive(Debug, Clone, PartialEq)]
pub struct FiducialAlignment {
    pub index: usize,
    pub field: DeformationField,
    pub div_map: Grid,
    pub div_score: f64,
}

impl FiducialAlignment {
    pub fn cnn_input(&self) -> Result<CnnInput> {
        CnnInput::resampled(&self.div_map, &self.field.error_map)
    }
}

/// Aligns every patch of `a` onto the corresponding patch of `b`.
pub fn align_pair(a: &PreparedImage, b: &PreparedImage, params: &MatchParams) -> Result<Vec<FiducialAlignment>> {
    if a.patches.is_empty() || b.patches.is_empty() {
        return Err(Error::validation(format!(
            "patches missing for {} or {}; workflow steps out of order",
            a.id, b.id
        )));
    }
    let align = AlignParams::from(params);
    let mut out = Vec::new();
    for (index, (pa, pb)) in a.patches.iter().zip(&b.patches).enumerate() {
        let (Some(pa), Some(pb)) = (pa, pb) else { continue };
        let field = diffeo_align(pa, pb, &align)?;
        let (div_map, div_score) = divergence(&field.u, &field.v)?;
        out.push(FiducialAlignment {
            index,
            field,
            div_map,
            div_score,
        });
    }
    if out.is_empty() {
        return Err(Error::Insufficient(format!(
            "no common fiducials between {} and {}",
            a.id, b.id
        )));
    }
    Ok(out)
}

/// `exp(-alpha * mean div - beta * mean residual)` over aligned fiducials.
pub fn deformation_score(alignments: &[FiducialAlignment], params: &MatchParams) -> f64 {
    let n = alignments.len() as f64;
    let div = alignments.iter().map(|a| a.div_score).sum::<f64>() / n;
    let res = alignments.iter().map(|a| a.field.residual).sum::<f64>() / n;
    (-params.alpha * div - params.beta * res).exp()
}

/// Mean CNN same-individual probability over aligned fiducials.
pub fn cnn_score(alignments: &[FiducialAlignment], model: &PrimedCnnModel) -> Result<f64> {
    let mut sum = 0.0;
    for a in alignments {
        sum += model.forward(&a.cnn_input()?)?;
    }
    Ok(sum / alignments.len() as f64)
}

/// Scores a pair with one matcher; every method maps into `[0, 1]` and a
/// self-pair scores 1 (the CNN excepted, whose output is a probability).
pub fn pair_score_classical(
    a: &PreparedImage,
    b: &PreparedImage,
    method: MethodId,
    params: &MatchParams,
    model: Option<&PrimedCnnModel>,
) -> Result<MatchScore> {
    let raw = match method {
        MethodId::DescriptorCosine => descriptor_cosine(&a.features, &b.features),
        MethodId::Ransac => ransac_match(&a.features, &b.features, &RansacParams::from(params)).score,
        MethodId::Deformation => deformation_score(&align_pair(a, b, params)?, params),
        MethodId::PrimedCnn => {
            let model = model.ok_or_else(|| Error::validation("primed_cnn requires a trained model"))?;
            cnn_score(&align_pair(a, b, params)?, model)?
        }
    };
    Ok(MatchScore {
        query_id: a.id.clone(),
        candidate_id: b.id.clone(),
        method_id: method,
        raw,
        normalized: raw,
    })
}
