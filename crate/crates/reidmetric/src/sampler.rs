//! Identity-uniform P x K batch construction. Each batch draws P
//! identities uniformly; identities holding fewer than K images
//! contribute what they have and additional identities are drawn to
//! complete the batch. Batches are sampled independently within an
//! epoch; the tail that cannot fill a whole batch is dropped.

use std::collections::HashMap;

use crate::data::Dataset;
use crate::numkit::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct BatchPlan {
    /// Sample indices into the dataset; exactly `batch_size`, no duplicates.
    pub indices: Vec<usize>,
    /// (person_id, contributed count) per identity in draw order.
    pub identities_used: Vec<(u32, usize)>,
}

pub fn plan_epoch(
    dataset: &Dataset,
    p: usize,
    k: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchPlan>> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if p * k != batch_size {
        return Err(Error::InfeasibleBatch(format!(
            "P * K = {} does not equal batch_size {}",
            p * k,
            batch_size
        )));
    }
    let ids = dataset.identities();
    let capacity: usize = ids
        .iter()
        .map(|id| dataset.samples_of(*id).len().min(k))
        .sum();
    if capacity < batch_size {
        return Err(Error::InfeasibleBatch(format!(
            "identities can contribute at most {} distinct samples per batch, need {}",
            capacity, batch_size
        )));
    }
    let steps = dataset.records.len() / batch_size;
    let mut plans = Vec::with_capacity(steps);
    for _ in 0..steps {
        plans.push(plan_batch(dataset, &ids, k, batch_size, rng));
    }
    Ok(plans)
}

fn plan_batch(dataset: &Dataset, ids: &[u32], k: usize, batch_size: usize, rng: &mut Rng) -> BatchPlan {
    let mut order: Vec<u32> = ids.to_vec();
    rng.shuffle(&mut order);
    let mut indices = Vec::with_capacity(batch_size);
    let mut identities_used = Vec::new();
    for &id in &order {
        let remaining = batch_size - indices.len();
        if remaining == 0 {
            break;
        }
        let samples = dataset.samples_of(id);
        let take = samples.len().min(k).min(remaining);
        if take == 0 {
            continue;
        }
        let mut pool: Vec<usize> = samples.to_vec();
        rng.shuffle(&mut pool);
        indices.extend_from_slice(&pool[..take]);
        identities_used.push((id, take));
    }
    debug_assert_eq!(indices.len(), batch_size);
    BatchPlan { indices, identities_used }
}

/// Number of batches each identity appears in.
pub fn identity_frequency(plans: &[BatchPlan]) -> Result<HashMap<u32, usize>> {
    if plans.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = HashMap::new();
    for plan in plans {
        for (id, _) in &plan.identities_used {
            *counts.entry(*id).or_insert(0) += 1;
        }
    }
    Ok(counts)
}
