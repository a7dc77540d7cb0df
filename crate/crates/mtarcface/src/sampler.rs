//! The image selector: both datasets share one shuffle permutation, and each
//! batch slot takes the masked or unmasked variant of its face with
//! probability `p`.
//!
//! The full training stream is a pure function of `(config, datasets)`:
//! permutations are keyed by `(seed, epoch)` and the per-slot Bernoulli
//! draws by `(seed, step, slot)`, so any step's batch can be reconstructed
//! without replaying the ones before it.

use rand::Rng;

use crate::datamodel::{validate_twins, FaceStore, SampleRecord};
use crate::rng::{self, Domain};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Probability that a slot takes the masked variant.
    pub masked_probability: f64,
    pub batch_size: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.masked_probability) {
            return Err(Error::Config(format!(
                "masked_probability {} outside [0, 1]",
                self.masked_probability
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Original dataset and its masked twin, loaded and validated.
#[derive(Debug)]
pub struct DualDataset {
    pub original: FaceStore,
    pub masked: FaceStore,
}

impl DualDataset {
    pub fn new(original: FaceStore, masked: FaceStore) -> Result<DualDataset> {
        validate_twins(&original.manifest, &masked.manifest)?;
        if original.side != masked.side {
            return Err(Error::TwinMismatch(format!(
                "image sizes differ: {} vs {}",
                original.side, masked.side
            )));
        }
        Ok(DualDataset { original, masked })
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }
}

/// Fisher-Yates permutation of `[0, n)` keyed by `(seed, epoch)`.
///
/// The same permutation indexes both the original and the masked dataset;
/// that is what "shuffled separately using the same seed" buys: slot `i` of
/// both datasets refers to the same underlying face.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<u32> {
    assert!(n >= 1, "permutation of empty range");
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut stream = rng::stream(seed, Domain::Shuffle, &[epoch]);
    for i in (1..n).rev() {
        let j = stream.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Index-level description of one batch slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotPlan {
    pub image_index: usize,
    pub identity_label: usize,
    pub mask_flag: u8,
}

/// Plan batch `step` without touching pixel data.
///
/// Slot `k` holds image `perm[(step*B + k) mod N]` of epoch
/// `(step*B + k) / N`; its masked/unmasked choice is an independent
/// Bernoulli(p) draw keyed by `(seed, step, k)`.
pub fn plan_batch(cfg: &SamplerConfig, step: u64, labels: &[usize]) -> Vec<SlotPlan> {
    let n = labels.len();
    assert!(n >= 1, "empty dataset");
    let b = cfg.batch_size as u64;
    let mut plan = Vec::with_capacity(cfg.batch_size);
    let mut epoch_cache: Option<(u64, Vec<u32>)> = None;
    for k in 0..b {
        let global = step * b + k;
        let epoch = global / n as u64;
        let pos = (global % n as u64) as usize;
        let perm = match &epoch_cache {
            Some((e, p)) if *e == epoch => p,
            _ => {
                epoch_cache = Some((epoch, epoch_permutation(cfg.seed, epoch, n)));
                &epoch_cache.as_ref().unwrap().1
            }
        };
        let image_index = perm[pos] as usize;
        let masked = rng::stream(cfg.seed, Domain::Bernoulli, &[step, k])
            .random_bool(cfg.masked_probability);
        plan.push(SlotPlan {
            image_index,
            identity_label: labels[image_index],
            mask_flag: masked as u8,
        });
    }
    plan
}

/// Materialize batch `step` as records with pixel data.
pub fn next_batch(cfg: &SamplerConfig, step: u64, data: &DualDataset) -> Vec<SampleRecord> {
    let plan = plan_batch(cfg, step, &data.original.labels);
    plan.into_iter()
        .map(|slot| {
            let store = if slot.mask_flag == 1 {
                &data.masked
            } else {
                &data.original
            };
            SampleRecord {
                face: store.faces[slot.image_index].clone(),
                identity_label: slot.identity_label,
                mask_flag: slot.mask_flag,
            }
        })
        .collect()
}
