use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// `K` samples drawn from one domain: the unit of episodic training.
#[derive(Debug, Clone)]
pub struct TaskBatch<'a> {
    pub domain_id: &'a str,
    pub samples: Vec<&'a Sample>,
    /// Whether the masks may be used. Entropy and distillation tasks are
    /// unlabeled.
    pub labeled: bool,
}

impl TaskBatch<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws `k` distinct samples from `dataset`.
pub fn sample_task<'a, R: Rng + ?Sized>(
    dataset: &'a DomainDataset,
    k: usize,
    labeled: bool,
    stream: &mut R,
) -> Result<TaskBatch<'a>> {
    if k == 0 {
        return Err(Error::arg("task size K must be positive"));
    }
    if k > dataset.len() {
        return Err(Error::arg(format!(
            "cannot draw {k} samples from {} ({} available)",
            dataset.domain_id,
            dataset.len()
        )));
    }
    let samples = index::sample(stream, dataset.len(), k).into_iter().map(|i| &dataset.samples[i]).collect();
    Ok(TaskBatch { domain_id: &dataset.domain_id, samples, labeled })
}

/// One random split of a target domain into `K` shots and a test set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSelection {
    pub target_domain_id: String,
    pub k: usize,
    pub repeat_index: usize,
    pub shot_ids: Vec<String>,
    /// The complement of `shot_ids`, in dataset order.
    pub test_ids: Vec<String>,
}

/// `repeats` independent uniform draws of `k` shot ids from `target`.
///
/// Repeat `r` uses a stream derived from `(seed, r)`, so any single repeat can
/// be recomputed without replaying the others.
pub fn select_shots(target: &DomainDataset, k: usize, repeats: usize, seed: u64) -> Result<Vec<ShotSelection>> {
    if k == 0 {
        return Err(Error::arg("K must be positive"));
    }
    if k >= target.len() {
        return Err(Error::arg(format!(
            "K = {k} leaves no test samples in {} ({} samples)",
            target.domain_id,
            target.len()
        )));
    }
    Ok((0..repeats)
        .map(|r| {
            let mut stream = rng::stream_for(seed, &[rng::tag("shots"), r as u64]);
            let mut picked = vec![false; target.len()];
            let shot_idx = index::sample(&mut stream, target.len(), k).into_vec();
            for &i in &shot_idx {
                picked[i] = true;
            }
            ShotSelection {
                target_domain_id: target.domain_id.clone(),
                k,
                repeat_index: r,
                shot_ids: shot_idx.iter().map(|&i| target.samples[i].id.clone()).collect(),
                test_ids: target.samples.iter().zip(&picked).filter(|(_, &p)| !p).map(|(s, _)| s.id.clone()).collect(),
            }
        })
        .collect())
}
