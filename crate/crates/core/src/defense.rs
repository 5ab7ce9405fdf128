//! Adversarial training: retraining on batches that mix normal pairs with
//! adversarial (genuine, synthesized) pairs labelled dissimilar.

use crate::data::{Pair, SigImage};
use crate::error::{Error, Result};
use crate::eval::Label;
use crate::model::{train_with_batches, ModelWeights, PairRef, TrainConfig};
use rand::seq::SliceRandom;

/// Normal:adversarial mix per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixRatio {
    pub normal: u32,
    pub adversarial: u32,
}

impl Default for MixRatio {
    fn default() -> Self {
        Self {
            normal: 7,
            adversarial: 3,
        }
    }
}

impl MixRatio {
    /// Parses `a:b`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("mix ratio must look like 7:3, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let ratio = Self {
            normal: a.trim().parse().map_err(|_| bad())?,
            adversarial: b.trim().parse().map_err(|_| bad())?,
        };
        if ratio.normal == 0 {
            return Err(Error::Config(format!("normal share must be positive, got {s:?}")));
        }
        Ok(ratio)
    }

    /// `(normal, adversarial)` pair counts for a batch, rounded to the nearest
    /// integers and summing to `batch`.
    pub fn counts(&self, batch: usize) -> (usize, usize) {
        let total = (self.normal + self.adversarial) as f64;
        let adv = ((batch as f64) * self.adversarial as f64 / total).round() as usize;
        let adv = adv.min(batch.saturating_sub(1));
        (batch - adv, adv)
    }
}

impl std::fmt::Display for MixRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.normal, self.adversarial)
    }
}

/// Retrains a thawed copy of `model`. Each batch holds the ratio's share of
/// shuffled normal pairs plus adversarial pairs drawn cyclically from a
/// per-epoch shuffle of `adversarial` (image index pairs, labelled
/// dissimilar). With no adversarial share this is plain retraining.
pub fn adversarial_retrain(
    model: &ModelWeights,
    images: &[SigImage],
    normal: &[Pair],
    adversarial: &[(usize, usize)],
    ratio: MixRatio,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, Vec<f64>)> {
    if normal.is_empty() {
        return Err(Error::Config("empty training pair set".into()));
    }
    let (n_normal, mut n_adv) = ratio.counts(cfg.batch_size);
    if n_normal == 0 {
        return Err(Error::Config(format!("batch size {} leaves no room for normal pairs", cfg.batch_size)));
    }
    if adversarial.is_empty() {
        if ratio.adversarial > 0 {
            return Err(Error::Config("adversarial share requested but no adversarial pairs given".into()));
        }
        n_adv = 0;
    }
    let normal_refs: Vec<PairRef> = normal.iter().map(|p| (p.a, p.b, p.label)).collect();
    let adv_refs: Vec<PairRef> = adversarial.iter().map(|&(a, b)| (a, b, Label::Dissimilar)).collect();
    let mut weights = model.thawed();
    let curve = train_with_batches(&mut weights, images, cfg, |_, rng| {
        let mut order = normal_refs.clone();
        order.shuffle(rng);
        let mut adv = adv_refs.clone();
        if n_adv > 0 {
            adv.shuffle(rng);
        }
        let mut cursor = 0;
        order
            .chunks(n_normal)
            .map(|chunk| {
                let mut batch = chunk.to_vec();
                for _ in 0..n_adv {
                    batch.push(adv[cursor % adv.len()]);
                    cursor += 1;
                }
                batch
            })
            .collect()
    })?;
    Ok((weights, curve))
}
