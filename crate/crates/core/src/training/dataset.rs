use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{BidBounds, Mode, TransitionRecord, CAPACITY_LEVELS};
use crate::error::{Error, Result};
use crate::nn::BoundedGaussian;

/// All stage decisions of one chain, in stage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub chain_id: u64,
    pub host: usize,
    pub records: Vec<TransitionRecord>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassWeights {
    pub mode: Vec<f64>,
    pub target: Vec<f64>,
    pub capacity: Vec<f64>,
}

/// Inverse-frequency weights `n / (k × n_c)` over the classes that occur;
/// absent classes get weight 1.
pub fn inverse_frequency(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { total as f64 / (present as f64 * c as f64) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub max_robots: usize,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub class_weights: ClassWeights,
}

impl OfflineDataset {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn train_records(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.train.iter().flat_map(|t| &t.records)
    }

    pub fn val_records(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.val.iter().flat_map(|t| &t.records)
    }

    pub fn record_count(&self) -> usize {
        self.train.iter().chain(&self.val).map(|t| t.records.len()).sum()
    }
}

/// Group records into chains, keep the complete ones, split 80/20 by
/// arrival order and compute class weights on the training split.
pub fn dataset_prepare(records: Vec<TransitionRecord>, max_robots: usize, bounds: &BidBounds) -> Result<OfflineDataset> {
    let mut by_chain: BTreeMap<u64, Vec<TransitionRecord>> = BTreeMap::new();
    for r in records {
        by_chain.entry(r.chain_id).or_default().push(r);
    }
    let mut chains = Vec::new();
    for (chain_id, mut recs) in by_chain {
        recs.sort_by_key(|r| r.t);
        let complete = recs.iter().enumerate().all(|(i, r)| r.t == i && !r.failed && r.chain_len == recs.len())
            && recs.last().is_some_and(|r| r.done)
            && recs[..recs.len() - 1].iter().all(|r| !r.done);
        if complete {
            samples_from_records(&recs, max_robots, bounds)?;
            chains.push(Trajectory { chain_id, host: recs[0].robot_id, records: recs });
        }
    }
    chains.sort_by(|a, b| a.records[0].time_ms.total_cmp(&b.records[0].time_ms).then(a.chain_id.cmp(&b.chain_id)));
    let cut = (chains.len() * 4).div_ceil(5);
    let val = chains.split_off(cut);
    let train = chains;
    let recs: Vec<TransitionRecord> = train.iter().flat_map(|t| t.records.iter().cloned()).collect();
    let samples = samples_from_records(&recs, max_robots, bounds)?;
    let mut mode = vec![0; Mode::COUNT];
    let mut target = vec![0; max_robots];
    let mut capacity = vec![0; CAPACITY_LEVELS.len()];
    for s in &samples {
        mode[s.mode] += 1;
        if let Some(t) = s.target {
            target[t] += 1;
        }
        capacity[s.capacity] += 1;
    }
    let class_weights =
        ClassWeights { mode: inverse_frequency(&mode), target: inverse_frequency(&target), capacity: inverse_frequency(&capacity) };
    Ok(OfflineDataset { max_robots, train, val, class_weights })
}

/// One robot's labelled decision inside a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index of the source record in the slice passed to
    /// [`samples_from_records`].
    pub record: usize,
    pub slot: usize,
    pub is_host: bool,
    pub features: Vec<f64>,
    pub mode: usize,
    pub mode_mask: [bool; Mode::COUNT],
    pub target: Option<usize>,
    pub target_mask: Vec<bool>,
    pub capacity: usize,
    /// Latent (pre-squash) bid.
    pub latent: f64,
    pub old_log_prob: Option<f64>,
}

pub fn samples_from_records(records: &[TransitionRecord], max_robots: usize, bounds: &BidBounds) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let mut avail = vec![false; max_robots];
        for (s, &m) in r.mask.iter().enumerate().take(max_robots) {
            avail[s] = m;
        }
        for (slot, action) in r.actions.iter().enumerate() {
            let (Some(a), Some(o)) = (action, r.observations.get(slot).and_then(|o| o.as_ref())) else {
                continue;
            };
            let is_host = slot == r.robot_id;
            let others = avail.iter().enumerate().any(|(s, &m)| m && s != slot);
            let mode_mask = if is_host { [true, others, false] } else { [true, false, true] };
            let mode = a.mode.index();
            let bad = |m: String| Err(Error::InvalidInput(format!("chain {} stage {} slot {slot}: {m}", r.chain_id, r.t)));
            if !mode_mask[mode] {
                return bad(format!("mode {:?} is masked", a.mode));
            }
            let (target, target_mask) = if is_host {
                let t = a.target.unwrap_or(r.winner_id);
                if t >= max_robots || !avail[t] {
                    return bad(format!("target {t} is masked"));
                }
                (Some(t), avail.clone())
            } else {
                (None, vec![false; max_robots])
            };
            if a.capacity >= CAPACITY_LEVELS.len() {
                return bad(format!("capacity index {}", a.capacity));
            }
            if !a.bid.is_finite() {
                return bad("non-finite bid".into());
            }
            out.push(Sample {
                record: i,
                slot,
                is_host,
                features: o.features.clone(),
                mode,
                mode_mask,
                target,
                target_mask,
                capacity: a.capacity,
                latent: a.latent.unwrap_or_else(|| BoundedGaussian::unsquash(bounds, a.bid)),
                old_log_prob: a.log_prob,
            });
        }
    }
    Ok(out)
}
