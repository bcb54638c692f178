use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupportItem {
    pub molecule: usize,
    pub label: bool,
}

/// A 2-way K-shot task on one target property. Query labels are not stored;
/// they stay in the dataset and are only read when scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub target: usize,
    pub support: Vec<SupportItem>,
    pub query: Vec<usize>,
    pub seed: u64,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len() / 2
    }

    /// Support molecules followed by query molecules.
    pub fn molecules(&self) -> Vec<usize> {
        self.support
            .iter()
            .map(|s| s.molecule)
            .chain(self.query.iter().copied())
            .collect()
    }
}

/// SplitMix64 finaliser over `(global, index)`; gives independent per-episode seeds.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    let mut z = global
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> (Vec<usize>, Vec<usize>) {
    let picked = sample(rng, pool.len(), n).into_vec();
    let mut taken = vec![false; pool.len()];
    for &i in &picked {
        taken[i] = true;
    }
    let chosen = picked.iter().map(|&i| pool[i]).collect();
    let rest = pool.iter().zip(&taken).filter(|(_, &t)| !t).map(|(&m, _)| m).collect();
    (chosen, rest)
}

/// Sample `k` positives and `k` negatives as support and a class-balanced
/// query of `m` molecules, without replacement. Requires at least
/// `k + ceil(m / 2)` labelled molecules of each class.
pub fn sample_episode(d: &Dataset, target: usize, k: usize, m: usize, seed: u64) -> Result<Episode> {
    if target >= d.num_properties() {
        return Err(Error::IndexOutOfRange {
            what: "property list".into(),
            index: target,
            size: d.num_properties(),
        });
    }
    if k == 0 {
        return Err(Error::Config("shots K must be positive".into()));
    }
    let (pos, neg) = d.labeled(target);
    let needed = k + m.div_ceil(2);
    if pos.len() < needed || neg.len() < needed {
        return Err(Error::InsufficientLabels {
            property: target,
            positives: pos.len(),
            negatives: neg.len(),
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sup_pos, rest_pos) = draw(&mut rng, &pos, k);
    let (sup_neg, rest_neg) = draw(&mut rng, &neg, k);

    let mut q_pos = m / 2;
    if m % 2 == 1 && rng.random_bool(0.5) {
        q_pos += 1;
    }
    let q_neg = m - q_pos;
    let (query_pos, _) = draw(&mut rng, &rest_pos, q_pos);
    let (query_neg, _) = draw(&mut rng, &rest_neg, q_neg);

    let support = sup_pos
        .into_iter()
        .map(|molecule| SupportItem { molecule, label: true })
        .chain(
            sup_neg
                .into_iter()
                .map(|molecule| SupportItem { molecule, label: false }),
        )
        .collect();
    let mut query: Vec<usize> = query_pos.into_iter().chain(query_neg).collect();
    let order = sample(&mut rng, query.len(), query.len()).into_vec();
    query = order.into_iter().map(|i| query[i]).collect();
    Ok(Episode {
        target,
        support,
        query,
        seed,
    })
}
