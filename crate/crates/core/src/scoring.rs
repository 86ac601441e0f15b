//! Pool-level scoring with per-pair caching.
//!
//! Pair scores are computed once per unordered pair, in the direction from the
//! lexicographically smaller id, and reused for both queries. Deformation and
//! the primed CNN share that pair's alignments.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rayon::prelude::*;

use crate::ensemble::{cascade_match, CascadeConfig, EnsembleWeights, PairScorer, RankedList};
use crate::error::{Error, Result};
use crate::feedback::{pair_key, PairKey};
use crate::matchers::classical::{align_pair, cnn_score, deformation_score, MethodId, PreparedImage};
use crate::matchers::cnn::PrimedCnnModel;
use crate::matchers::features::descriptor_cosine;
use crate::matchers::ransac::{ransac_match, RansacParams};
use crate::params::MatchParams;

#[derive(Debug, Clone, Copy, Default)]
struct AlignedScores {
    deformation: f64,
    cnn: Option<f64>,
}

pub struct PoolScorer {
    images: BTreeMap<String, Arc<PreparedImage>>,
    params: MatchParams,
    model: Option<PrimedCnnModel>,
    aligned: Mutex<HashMap<PairKey, AlignedScores>>,
    ransac: Mutex<HashMap<PairKey, f64>>,
}

impl PoolScorer {
    pub fn new(images: impl IntoIterator<Item = PreparedImage>, params: MatchParams, model: Option<PrimedCnnModel>) -> Self {
        Self {
            images: images.into_iter().map(|p| (p.id.clone(), Arc::new(p))).collect(),
            params,
            model,
            aligned: Mutex::new(HashMap::new()),
            ransac: Mutex::new(HashMap::new()),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    pub fn params(&self) -> &MatchParams {
        &self.params
    }

    pub fn model(&self) -> Option<&PrimedCnnModel> {
        self.model.as_ref()
    }

    pub fn insert(&mut self, image: PreparedImage) {
        self.images.insert(image.id.clone(), Arc::new(image));
    }

    pub fn image(&self, id: &str) -> Result<&PreparedImage> {
        self.images
            .get(id)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::not_found(format!("image {id} not featured")))
    }

    fn canonical(&self, a: &str, b: &str) -> Result<(PairKey, &PreparedImage, &PreparedImage)> {
        let key = pair_key(a, b);
        let x = self.image(&key.0)?;
        let y = self.image(&key.1)?;
        Ok((key, x, y))
    }

    fn aligned_scores(&self, a: &str, b: &str) -> Result<AlignedScores> {
        let (key, x, y) = self.canonical(a, b)?;
        if let Some(s) = self.aligned.lock().get(&key) {
            return Ok(*s);
        }
        let al = align_pair(x, y, &self.params)?;
        let s = AlignedScores {
            deformation: deformation_score(&al, &self.params),
            cnn: match &self.model {
                Some(m) => Some(cnn_score(&al, m)?),
                None => None,
            },
        };
        self.aligned.lock().insert(key, s);
        Ok(s)
    }

    /// Number of distinct pairs aligned so far.
    pub fn alignments_computed(&self) -> usize {
        self.aligned.lock().len()
    }

    /// Ranks every image against all others.
    pub fn rank_all(&self, config: &CascadeConfig, weights: &EnsembleWeights, scorer: &dyn PairScorer) -> Result<Vec<RankedList>> {
        let ids = self.ids();
        ids.par_iter()
            .map(|q| {
                let pool: Vec<String> = ids.iter().filter(|c| *c != q).cloned().collect();
                cascade_match(q, &pool, config, weights, scorer)
            })
            .collect()
    }
}

impl PairScorer for PoolScorer {
    fn score(&self, query: &str, candidate: &str, method: MethodId) -> Result<f64> {
        match method {
            MethodId::DescriptorCosine => {
                let (_, x, y) = self.canonical(query, candidate)?;
                Ok(descriptor_cosine(&x.features, &y.features))
            }
            MethodId::Ransac => {
                let (key, x, y) = self.canonical(query, candidate)?;
                if let Some(s) = self.ransac.lock().get(&key) {
                    return Ok(*s);
                }
                let s = ransac_match(&x.features, &y.features, &RansacParams::from(&self.params)).score;
                self.ransac.lock().insert(key, s);
                Ok(s)
            }
            MethodId::Deformation => Ok(self.aligned_scores(query, candidate)?.deformation),
            MethodId::PrimedCnn => self
                .aligned_scores(query, candidate)?
                .cnn
                .ok_or_else(|| Error::validation("primed_cnn requires a trained model")),
        }
    }
}
