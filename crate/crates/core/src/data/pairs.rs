use super::{Dataset, Kind};
use crate::error::{Error, Result};
use crate::eval::Label;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Two images of a dataset (by index) and whether they share an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub a: usize,
    pub b: usize,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub split: Split,
    pub writers: Vec<u32>,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn count(&self, label: Label) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }
}

/// Writer-disjoint train/test pairs.
///
/// `m_train` writers are drawn at random for training; the rest form the test
/// split. Per writer, similar pairs are genuine×genuine combinations and
/// dissimilar pairs are genuine×forged products, both subsampled to
/// `per_class` (or to the largest balanced count when `None`).
pub fn build_pairs(
    dataset: &Dataset,
    m_train: usize,
    per_class: Option<usize>,
    seed: u64,
) -> Result<(PairSet, PairSet)> {
    let mut writers = dataset.writers();
    if m_train == 0 || writers.len() < m_train + 1 {
        return Err(Error::Config(format!(
            "need at least {} writers for {m_train} training writers, dataset has {}",
            m_train + 1,
            writers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    writers.shuffle(&mut rng);
    let (mut train_w, mut test_w) = (writers[..m_train].to_vec(), writers[m_train..].to_vec());
    train_w.sort_unstable();
    test_w.sort_unstable();

    let mut build = |split: Split, ids: Vec<u32>| -> Result<PairSet> {
        let mut pairs = Vec::new();
        for &w in &ids {
            pairs.extend(writer_pairs(dataset, w, per_class, &mut rng)?);
        }
        Ok(PairSet {
            split,
            writers: ids,
            pairs,
        })
    };
    let train = build(Split::Train, train_w)?;
    let test = build(Split::Test, test_w)?;
    Ok((train, test))
}

fn writer_pairs(
    dataset: &Dataset,
    writer: u32,
    per_class: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    let genuine = dataset.indices_of(writer, Kind::Genuine);
    let forged = dataset.indices_of(writer, Kind::Forged);
    let mut similar = Vec::new();
    for i in 0..genuine.len() {
        for j in i + 1..genuine.len() {
            similar.push((genuine[i], genuine[j]));
        }
    }
    let mut dissimilar = Vec::new();
    for &g in &genuine {
        for &f in &forged {
            dissimilar.push((g, f));
        }
    }
    let available = similar.len().min(dissimilar.len());
    let n = per_class.unwrap_or(available);
    if n == 0 || n > available {
        return Err(Error::Config(format!(
            "writer {writer}: {n} pairs per class requested, {} similar / {} dissimilar available",
            similar.len(),
            dissimilar.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * n);
    for (label, mut pool) in [(Label::Similar, similar), (Label::Dissimilar, dissimilar)] {
        pool.shuffle(rng);
        pool.truncate(n);
        pool.sort_unstable();
        for (a, b) in pool {
            let (ia, ib) = (&dataset.images[a], &dataset.images[b]);
            let tag = if ib.kind == Kind::Forged { 'f' } else { 'g' };
            out.push(Pair {
                id: format!("w{writer:03}-g{:02}-{tag}{:02}", ia.sample, ib.sample),
                a,
                b,
                label,
            });
        }
    }
    Ok(out)
}
