use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{context_bundle, score_molecules, EpisodeInput, Model, ModelSpec};
use super::train::{inner_adapt, par_map};
use crate::autodiff::{sigmoid, Tape};
use crate::chem::{derive_seed, sample_episode, Dataset, Episode};
use crate::context::{select_seen, ContextGraph};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Mann-Whitney ROC-AUC with average ranks for ties. `None` unless both
/// classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub shots: usize,
    pub seeds: usize,
    pub seed: u64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Query molecules scored per forward pass.
    pub chunk: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 10,
            seeds: 10,
            seed: 0,
            inner_steps: 1,
            inner_lr: 0.5,
            chunk: 64,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub mean_auc: f64,
    pub std_auc: f64,
    pub per_seed: Vec<f64>,
}

/// Query-molecule representation after adaptation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingRecord {
    pub property: String,
    pub seed: usize,
    pub molecule: usize,
    pub label: bool,
    pub score: f64,
    pub h_m: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalOutput {
    pub properties: BTreeMap<String, PropertyReport>,
    #[serde(skip)]
    pub embeddings: Vec<EmbeddingRecord>,
}

/// Everything produced for one evaluation episode.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub graph: Option<ContextGraph>,
    /// Context matrix computed with the adapted parameters.
    pub context: Option<Tensor>,
    /// Probabilities for the episode's query molecules, in query order.
    pub scores: Vec<f64>,
    /// `[query, d]` molecule representations.
    pub h_m: Tensor,
}

/// Adapt on the support set, then score every query molecule. Never reads
/// the target labels of query molecules.
pub fn predict_episode(
    spec: &ModelSpec,
    store: &ParamStore,
    input: &EpisodeInput,
    inner_steps: usize,
    inner_lr: f64,
    chunk: usize,
) -> Result<Prediction> {
    let adapted = inner_adapt(spec, store, input, inner_steps, inner_lr)?;
    let mut tape = Tape::new();
    let bundle = context_bundle(&mut tape, spec, &adapted, input)?;
    let context = bundle.as_ref().map(|b| tape.value(b.c).clone());
    let d = spec.encoder().d;
    let mut scores = Vec::with_capacity(input.episode.query.len());
    let mut h = Vec::with_capacity(input.episode.query.len() * d);
    for part in input.episode.query.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let fixed = match (&bundle, &context) {
            (Some(b), Some(c)) => Some(b.with_var(tape.constant(c.clone()))),
            _ => None,
        };
        let out = score_molecules(
            &mut tape,
            spec,
            &adapted,
            input.dataset,
            input.episode.target,
            part,
            fixed.as_ref(),
        )?;
        scores.extend(tape.value(out.logits).data().iter().map(|&z| sigmoid(z)));
        h.extend_from_slice(tape.value(out.molecules).data());
    }
    let rows = scores.len();
    Ok(Prediction {
        graph: input.graph.clone(),
        context,
        scores,
        h_m: Tensor::from_parts(vec![rows, d], h),
    })
}

/// Evaluation episode for `property`: `shots` per class as support, every
/// other labelled molecule as query.
pub fn evaluation_episode(d: &Dataset, property: usize, shots: usize, seed: u64) -> Result<Episode> {
    let mut e = sample_episode(d, property, shots, 0, seed)?;
    let (pos, neg) = d.labeled(property);
    let support: Vec<usize> = e.support.iter().map(|s| s.molecule).collect();
    let mut query: Vec<usize> = pos.into_iter().chain(neg).filter(|m| !support.contains(m)).collect();
    query.sort_unstable();
    e.query = query;
    Ok(e)
}

fn seed_for(global: u64, property: usize, seed: usize) -> u64 {
    derive_seed(derive_seed(global, property as u64), seed as u64)
}

/// ROC-AUC per test property over `cfg.seeds` support draws.
pub fn evaluate(model: &Model, d: &Dataset, cfg: &EvalConfig, keep_embeddings: bool) -> Result<EvalOutput> {
    if cfg.seeds == 0 || cfg.shots == 0 {
        return Err(Error::Config("evaluation needs at least one seed and one shot".into()));
    }
    let train: Vec<usize> = d.train_properties().to_vec();
    if let Some(p) = d.test_properties().iter().find(|p| train.contains(p)) {
        return Err(Error::SplitOverlap(*p));
    }
    let cache = match model.spec.context {
        Some(_) => model.frozen_features(d)?,
        None => Tensor::zeros(&[1]),
    };
    let max_seen = model.spec.context.map_or(0, |c| c.max_seen);
    let jobs: Vec<(usize, usize)> = d
        .test_properties()
        .iter()
        .flat_map(|&p| (0..cfg.seeds).map(move |s| (p, s)))
        .collect();
    let results = par_map(&jobs, cfg.threads, |&(p, s)| {
        let seed = seed_for(cfg.seed, p, s);
        let episode = evaluation_episode(d, p, cfg.shots, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen = select_seen(d, p, max_seen, &mut rng);
        let input = EpisodeInput::new(&model.spec, d, episode, &seen, &cache)?;
        let pred = predict_episode(
            &model.spec,
            &model.store,
            &input,
            cfg.inner_steps,
            cfg.inner_lr,
            cfg.chunk,
        )?;
        let labels = input.query_targets()?.iter().map(|&y| y == 1.0).collect::<Vec<_>>();
        let auc = roc_auc(&pred.scores, &labels).ok_or(Error::Empty("query with both classes"))?;
        Ok((input.episode.query.clone(), labels, pred, auc))
    })?;
    let mut out = EvalOutput::default();
    for (&(p, s), (query, labels, pred, auc)) in jobs.iter().zip(results) {
        let name = d.property_name(p).to_string();
        let entry = out.properties.entry(name.clone()).or_insert_with(|| PropertyReport {
            mean_auc: 0.0,
            std_auc: 0.0,
            per_seed: Vec::new(),
        });
        entry.per_seed.push(auc);
        if keep_embeddings {
            for (i, &m) in query.iter().enumerate() {
                out.embeddings.push(EmbeddingRecord {
                    property: name.clone(),
                    seed: s,
                    molecule: m,
                    label: labels[i],
                    score: pred.scores[i],
                    h_m: pred.h_m.row(i).to_vec(),
                });
            }
        }
    }
    for r in out.properties.values_mut() {
        (r.mean_auc, r.std_auc) = mean_std(&r.per_seed);
    }
    Ok(out)
}

impl EvalOutput {
    /// Mean of the per-property mean AUCs.
    pub fn overall_mean(&self) -> f64 {
        let means: Vec<f64> = self.properties.values().map(|r| r.mean_auc).collect();
        mean_std(&means).0
    }
}
