#![allow(dead_code)]

use std::collections::BTreeMap;

use pintune::checkpoint::{HeadConfig, TuningMode};
use pintune::chem::{Dataset, MolGraph};
use pintune::encoder::EncoderConfig;
use pintune::meta::{init_pretraining, Model};
use pintune::synthetic::{random_smiles, synthetic_dataset, SyntheticConfig};
use pintune::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}

pub fn dataset(molecules: usize, seed: u64) -> Dataset {
    synthetic_dataset(&SyntheticConfig {
        molecules,
        seed,
        missing_rate: 0.1,
    })
    .unwrap()
}

pub fn random_graph(rng: &mut impl Rng) -> MolGraph {
    pintune::chem::parse_smiles(&random_smiles(rng)).unwrap()
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig::new(8, 12, 2)
}

/// Randomly initialised encoder standing in for a pre-trained one.
pub fn pretrained(enc: &EncoderConfig, seed: u64) -> ParamStore {
    init_pretraining(enc, &mut rng(seed)).unwrap()
}

pub fn head(mode: TuningMode, context: bool, d: &Dataset) -> HeadConfig {
    HeadConfig {
        mode,
        d2: 3,
        context,
        max_seen: 4,
        num_properties: d.num_properties(),
    }
}

pub fn model(mode: TuningMode, context: bool, d: &Dataset, seed: u64) -> Model {
    let enc = small_encoder();
    let store = pretrained(&enc, seed);
    Model::from_pretrained(enc, store, head(mode, context, d), &mut rng(seed + 1)).unwrap()
}

/// Give every trainable tensor random values so no gradient is trivially zero.
pub fn randomise(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for name in store.trainable_names() {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.assign(&name, random_tensor(&mut r, &shape, scale)).unwrap();
    }
}

pub fn trainable_bindings(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store
        .trainable_names()
        .into_iter()
        .map(|n| {
            let t = store.get(&n).unwrap().clone();
            (n, t)
        })
        .collect()
}
