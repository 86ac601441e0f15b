//! The operations workers and coordinators need from a DEI, whether it runs
//! in-process or behind HTTP.

use std::sync::Arc;

use sloop_core::ensemble::{EnsembleWeights, RankedList};
use sloop_core::experiment::IterationMetrics;
use sloop_core::feedback::{CohortPartition, Label, PairKey, SubmitOutcome, VerificationTask};
use sloop_core::workflow::{WorkflowDef, WorkflowState};
use sloop_core::Result;

use crate::store::{Dei, ImageMetadata, ImageRecord, MetricsView, Session, TransitionRequest, WorkItem};

pub trait DeiApi: Send + Sync {
    fn authenticate(&self, principal: &str, secret: &str, capabilities: &[String]) -> Result<Session>;
    fn workflow(&self, name: &str) -> Result<WorkflowDef>;
    fn put_image(&self, token: &str, blob: &[u8], species: &str, metadata: &ImageMetadata) -> Result<String>;
    fn get_image(&self, id: &str) -> Result<ImageRecord>;
    fn get_blob(&self, id: &str) -> Result<Vec<u8>>;
    fn list_images(&self, species: Option<&str>) -> Result<Vec<ImageRecord>>;
    fn poll_work(&self, token: &str, max: usize) -> Result<Vec<WorkItem>>;
    fn commit_transition(&self, token: &str, req: &TransitionRequest) -> Result<WorkflowState>;
    fn put_scores(&self, token: &str, ranking: &RankedList) -> Result<String>;
    /// Ranking of `id`, truncated to `k`; `base` skips reweighting and cohorts.
    fn rankings(&self, id: &str, k: Option<usize>, base: bool) -> Result<RankedList>;
    fn weights(&self) -> Result<Option<EnsembleWeights>>;
    fn put_weights(&self, token: &str, weights: &EnsembleWeights) -> Result<()>;
    fn add_gold(&self, token: &str, pair: &PairKey, label: Label) -> Result<()>;
    fn create_task(&self, token: &str, pair: &PairKey) -> Result<u64>;
    fn get_tasks(&self, token: &str, annotator: &str, max: usize) -> Result<Vec<VerificationTask>>;
    fn submit_response(&self, token: &str, task_id: u64, annotator: &str, label: Label) -> Result<SubmitOutcome>;
    fn skip_task(&self, token: &str, task_id: u64, annotator: &str) -> Result<()>;
    fn list_tasks(&self) -> Result<Vec<VerificationTask>>;
    fn cohorts(&self) -> Result<CohortPartition>;
    fn put_cohorts(&self, token: &str, partition: &CohortPartition) -> Result<()>;
    fn push_metrics(&self, token: &str, row: &IterationMetrics) -> Result<()>;
    fn metrics(&self) -> Result<MetricsView>;
}

impl DeiApi for Dei {
    fn authenticate(&self, principal: &str, secret: &str, capabilities: &[String]) -> Result<Session> {
        Dei::authenticate(self, principal, secret, capabilities)
    }

    fn workflow(&self, name: &str) -> Result<WorkflowDef> {
        Dei::workflow(self, name)
    }

    fn put_image(&self, token: &str, blob: &[u8], species: &str, metadata: &ImageMetadata) -> Result<String> {
        Dei::put_image(self, token, blob, species, metadata.clone())
    }

    fn get_image(&self, id: &str) -> Result<ImageRecord> {
        Dei::get_image(self, id)
    }

    fn get_blob(&self, id: &str) -> Result<Vec<u8>> {
        Dei::get_blob(self, id).map(|b| b.as_ref().clone())
    }

    fn list_images(&self, species: Option<&str>) -> Result<Vec<ImageRecord>> {
        Ok(Dei::list_images(self, species))
    }

    fn poll_work(&self, token: &str, max: usize) -> Result<Vec<WorkItem>> {
        Dei::poll_work(self, token, max)
    }

    fn commit_transition(&self, token: &str, req: &TransitionRequest) -> Result<WorkflowState> {
        Dei::commit_transition(self, token, req)
    }

    fn put_scores(&self, token: &str, ranking: &RankedList) -> Result<String> {
        Dei::put_scores(self, token, ranking)
    }

    fn rankings(&self, id: &str, k: Option<usize>, base: bool) -> Result<RankedList> {
        let entries = self.get_rankings(id, k, base)?;
        let stages = self.base_ranking(id)?.map(|l| l.stages.clone()).unwrap_or_default();
        Ok(RankedList {
            query: id.to_string(),
            entries,
            stages,
        })
    }

    fn weights(&self) -> Result<Option<EnsembleWeights>> {
        Ok(Dei::weights(self))
    }

    fn put_weights(&self, token: &str, weights: &EnsembleWeights) -> Result<()> {
        Dei::put_weights(self, token, weights.clone())
    }

    fn add_gold(&self, token: &str, pair: &PairKey, label: Label) -> Result<()> {
        Dei::add_gold(self, token, pair.clone(), label)
    }

    fn create_task(&self, token: &str, pair: &PairKey) -> Result<u64> {
        Dei::create_task(self, token, pair.clone())
    }

    fn get_tasks(&self, token: &str, annotator: &str, max: usize) -> Result<Vec<VerificationTask>> {
        Dei::get_tasks(self, token, annotator, max)
    }

    fn submit_response(&self, token: &str, task_id: u64, annotator: &str, label: Label) -> Result<SubmitOutcome> {
        Dei::submit_response(self, token, task_id, annotator, label)
    }

    fn skip_task(&self, token: &str, task_id: u64, annotator: &str) -> Result<()> {
        Dei::skip_task(self, token, task_id, annotator)
    }

    fn list_tasks(&self) -> Result<Vec<VerificationTask>> {
        Ok(Dei::list_tasks(self))
    }

    fn cohorts(&self) -> Result<CohortPartition> {
        Ok(Dei::cohorts(self))
    }

    fn put_cohorts(&self, token: &str, partition: &CohortPartition) -> Result<()> {
        Dei::put_cohorts(self, token, partition.clone())
    }

    fn push_metrics(&self, token: &str, row: &IterationMetrics) -> Result<()> {
        Dei::push_metrics(self, token, row.clone())
    }

    fn metrics(&self) -> Result<MetricsView> {
        Ok(Dei::metrics(self))
    }
}

impl<T: DeiApi + ?Sized> DeiApi for Arc<T> {
    fn authenticate(&self, principal: &str, secret: &str, capabilities: &[String]) -> Result<Session> {
        (**self).authenticate(principal, secret, capabilities)
    }
    fn workflow(&self, name: &str) -> Result<WorkflowDef> {
        (**self).workflow(name)
    }
    fn put_image(&self, token: &str, blob: &[u8], species: &str, metadata: &ImageMetadata) -> Result<String> {
        (**self).put_image(token, blob, species, metadata)
    }
    fn get_image(&self, id: &str) -> Result<ImageRecord> {
        (**self).get_image(id)
    }
    fn get_blob(&self, id: &str) -> Result<Vec<u8>> {
        (**self).get_blob(id)
    }
    fn list_images(&self, species: Option<&str>) -> Result<Vec<ImageRecord>> {
        (**self).list_images(species)
    }
    fn poll_work(&self, token: &str, max: usize) -> Result<Vec<WorkItem>> {
        (**self).poll_work(token, max)
    }
    fn commit_transition(&self, token: &str, req: &TransitionRequest) -> Result<WorkflowState> {
        (**self).commit_transition(token, req)
    }
    fn put_scores(&self, token: &str, ranking: &RankedList) -> Result<String> {
        (**self).put_scores(token, ranking)
    }
    fn rankings(&self, id: &str, k: Option<usize>, base: bool) -> Result<RankedList> {
        (**self).rankings(id, k, base)
    }
    fn weights(&self) -> Result<Option<EnsembleWeights>> {
        (**self).weights()
    }
    fn put_weights(&self, token: &str, weights: &EnsembleWeights) -> Result<()> {
        (**self).put_weights(token, weights)
    }
    fn add_gold(&self, token: &str, pair: &PairKey, label: Label) -> Result<()> {
        (**self).add_gold(token, pair, label)
    }
    fn create_task(&self, token: &str, pair: &PairKey) -> Result<u64> {
        (**self).create_task(token, pair)
    }
    fn get_tasks(&self, token: &str, annotator: &str, max: usize) -> Result<Vec<VerificationTask>> {
        (**self).get_tasks(token, annotator, max)
    }
    fn submit_response(&self, token: &str, task_id: u64, annotator: &str, label: Label) -> Result<SubmitOutcome> {
        (**self).submit_response(token, task_id, annotator, label)
    }
    fn skip_task(&self, token: &str, task_id: u64, annotator: &str) -> Result<()> {
        (**self).skip_task(token, task_id, annotator)
    }
    fn list_tasks(&self) -> Result<Vec<VerificationTask>> {
        (**self).list_tasks()
    }
    fn cohorts(&self) -> Result<CohortPartition> {
        (**self).cohorts()
    }
    fn put_cohorts(&self, token: &str, partition: &CohortPartition) -> Result<()> {
        (**self).put_cohorts(token, partition)
    }
    fn push_metrics(&self, token: &str, row: &IterationMetrics) -> Result<()> {
        (**self).push_metrics(token, row)
    }
    fn metrics(&self) -> Result<MetricsView> {
        (**self).metrics()
    }
}
