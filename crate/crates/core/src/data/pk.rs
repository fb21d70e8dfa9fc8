use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::rng::stream;
use crate::{Error, Result};

/// `P` distinct identities with `K` sample indices each, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkBatch {
    pub identities: Vec<usize>,
    pub indices: Vec<usize>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Epoch-structured PK sampling over identities that have at least `K` samples.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_identity: BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(samples: &[Sample], p: usize, k: usize) -> Result<Self> {
        Self::from_identities(samples.iter().map(|s| s.identity), p, k)
    }

    /// Sampler over the identity of each sample index, in index order.
    pub fn from_identities(identities: impl Iterator<Item = usize>, p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config(format!("P={p} and K={k} must both be positive")));
        }
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, id) in identities.enumerate() {
            by_identity.entry(id).or_default().push(i);
        }
        by_identity.retain(|_, v| v.len() >= k);
        if by_identity.len() < p {
            return Err(Error::Config(format!(
                "PK sampling needs {p} identities with at least {k} samples each, \
                 found {} (short by {})",
                by_identity.len(),
                p - by_identity.len()
            )));
        }
        Ok(Self { by_identity, p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_identity.len().div_ceil(self.p)
    }

    /// One pass in which every eligible identity appears at least once.
    pub fn epoch(&self, seed: u64) -> Vec<PkBatch> {
        let mut rng = stream(seed, &[0x9e0c]);
        let mut ids: Vec<usize> = self.by_identity.keys().copied().collect();
        ids.shuffle(&mut rng);
        ids.chunks(self.p)
            .map(|chunk| {
                let mut chosen = chunk.to_vec();
                if chosen.len() < self.p {
                    let mut rest: Vec<usize> = self
                        .by_identity
                        .keys()
                        .copied()
                        .filter(|i| !chosen.contains(i))
                        .collect();
                    rest.shuffle(&mut rng);
                    chosen.extend(rest.into_iter().take(self.p - chosen.len()));
                }
                let mut indices = Vec::with_capacity(self.p * self.k);
                for id in &chosen {
                    let mut pool = self.by_identity[id].clone();
                    pool.shuffle(&mut rng);
                    indices.extend_from_slice(&pool[..self.k]);
                }
                PkBatch {
                    identities: chosen,
                    indices,
                }
            })
            .collect()
    }

    /// Batch number `step` of the endless epoch sequence derived from `seed`.
    pub fn batch_at(&self, seed: u64, step: usize) -> PkBatch {
        let per = self.batches_per_epoch();
        let epoch = (step / per) as u64;
        let mut batches = self.epoch(stream(seed, &[epoch]).next_u64());
        batches.swap_remove(step % per)
    }
}

pub fn pk_batches(samples: &[Sample], p: usize, k: usize, seed: u64) -> Result<Vec<PkBatch>> {
    Ok(PkSampler::new(samples, p, k)?.epoch(seed))
}
