//! Organelle-balanced batch composition.
//!
//! One id list per organelle; every batch takes the same number of picks
//! from each non-empty list. Each list is consumed in a shuffled order and
//! reshuffled when exhausted, so within a cycle no id repeats.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::domain::{Modality, Organelle, CHANNEL_ORDER};
use crate::{IslError, Result};

/// Sample ids per organelle (canonical channel order).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganelleLists {
    pub lists: [Vec<String>; 4],
}

impl OrganelleLists {
    pub fn list(&self, o: Organelle) -> &[String] {
        &self.lists[o.index()]
    }

    pub fn sizes(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.lists[i].len())
    }

    /// Organelles with at least one id, in channel order.
    pub fn non_empty(&self) -> Vec<Organelle> {
        CHANNEL_ORDER.iter().copied().filter(|o| !self.list(*o).is_empty()).collect()
    }
}

pub fn build_organelle_lists(m: &Manifest, modality_filter: Option<Modality>) -> Result<OrganelleLists> {
    let mut lists: [Vec<String>; 4] = Default::default();
    for e in m.entries.iter().filter(|e| modality_filter.is_none_or(|f| e.modality == f)) {
        for o in e.targets.keys() {
            lists[o.index()].push(e.id.clone());
        }
    }
    if lists.iter().all(|l| l.is_empty()) {
        let scope = modality_filter.map(|m| format!(" for modality {m}")).unwrap_or_default();
        return Err(IslError::Config(format!("no labeled samples{scope}")));
    }
    Ok(OrganelleLists { lists })
}

/// One batch: `(sample id, organelle that selected it)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub picks: Vec<(String, Organelle)>,
}

impl BatchPlan {
    pub fn count(&self, o: Organelle) -> usize {
        self.picks.iter().filter(|(_, f)| *f == o).count()
    }

    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }
}

/// Resumable sampler state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub orders: [Vec<String>; 4],
    pub cursors: [usize; 4],
    pub seed: [u8; 32],
    /// ChaCha word position, decimal string (u128).
    pub word_pos: String,
}

/// Stateful shuffled-cycling sampler; single owner.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    orders: [Vec<String>; 4],
    cursors: [usize; 4],
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(lists: &OrganelleLists, seed: u64) -> Self {
        let orders = lists.lists.clone();
        // cursor at the end forces a shuffle before first use
        let cursors = std::array::from_fn(|i| orders[i].len());
        Self { orders, cursors, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn non_empty(&self) -> Vec<Organelle> {
        CHANNEL_ORDER.iter().copied().filter(|o| !self.orders[o.index()].is_empty()).collect()
    }

    /// Number of picks per non-empty list for a batch of `batch_size`.
    pub fn quota(&self, batch_size: usize) -> Result<usize> {
        let k = self.non_empty().len();
        if k == 0 || batch_size == 0 || batch_size % k != 0 {
            return Err(IslError::Config(format!(
                "batch size {batch_size} is not a positive multiple of the {k} non-empty organelle lists"
            )));
        }
        Ok(batch_size / k)
    }

    fn pick(&mut self, i: usize) -> String {
        if self.cursors[i] >= self.orders[i].len() {
            self.orders[i].shuffle(&mut self.rng);
            self.cursors[i] = 0;
        }
        let id = self.orders[i][self.cursors[i]].clone();
        self.cursors[i] += 1;
        id
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<BatchPlan> {
        let quota = self.quota(batch_size)?;
        let mut picks = Vec::with_capacity(batch_size);
        for o in self.non_empty() {
            for _ in 0..quota {
                picks.push((self.pick(o.index()), o));
            }
        }
        Ok(BatchPlan { picks })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            orders: self.orders.clone(),
            cursors: self.cursors,
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &SamplerState) -> Result<Self> {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| IslError::Checkpoint(format!("bad sampler word position {:?}", state.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(Self { orders: state.orders.clone(), cursors: state.cursors, rng })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists(sizes: [usize; 4]) -> OrganelleLists {
        OrganelleLists { lists: std::array::from_fn(|i| (0..sizes[i]).map(|j| format!("{i}-{j}")).collect()) }
    }

    #[test]
    fn indivisible_batch_is_rejected() {
        let mut s = BalancedSampler::new(&lists([2, 2, 2, 0]), 1);
        let err = s.next_batch(8).unwrap_err().to_string();
        assert!(err.contains("8") && err.contains("3"), "{err}");
    }

    #[test]
    fn no_repeat_within_a_cycle() {
        let mut s = BalancedSampler::new(&lists([0, 10, 0, 0]), 3);
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.extend(s.next_batch(2).unwrap().picks.into_iter().map(|(id, _)| id));
        }
        let mut uniq = seen.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut a = BalancedSampler::new(&lists([3, 5, 2, 1]), 9);
        for _ in 0..7 {
            a.next_batch(4).unwrap();
        }
        let json = serde_json::to_string(&a.state()).unwrap();
        let mut b = BalancedSampler::from_state(&serde_json::from_str(&json).unwrap()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(8).unwrap(), b.next_batch(8).unwrap());
        }
    }
}
