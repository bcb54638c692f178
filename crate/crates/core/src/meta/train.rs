use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{context_bundle, score_molecules, EpisodeInput, Model, ModelSpec};
use crate::autodiff::{Gradients, Tape, Var};
use crate::chem::{derive_seed, sample_episode, Dataset};
use crate::consolidation::{penalty, EmbeddingAnchor, FisherDiag, PenaltyMode};
use crate::context::select_seen;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub shots: usize,
    pub query: usize,
    pub batch: usize,
    pub steps: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub lambda: f64,
    pub penalty: PenaltyMode,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub threads: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            shots: 10,
            query: 16,
            batch: 4,
            steps: 500,
            inner_steps: 1,
            inner_lr: 0.5,
            outer_lr: 1e-3,
            lambda: 0.1,
            penalty: PenaltyMode::Efim,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            threads: 1,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.shots == 0 || self.query == 0 {
            return bad("shots and query size must be positive");
        }
        if self.batch == 0 {
            return bad("episodes per batch must be positive");
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) || !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad("learning rates must be finite, inner >= 0 and outer > 0");
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// One outer step's diagnostics, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub query_loss: f64,
    pub penalty: f64,
    pub emb_displacement_norm: f64,
}

fn check_loss(tape: &Tape, loss: Var, what: &str) -> Result<f64> {
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{what} loss is {v}")));
    }
    Ok(v)
}

/// Summed support loss and its gradient at `store`.
pub fn support_loss(spec: &ModelSpec, store: &ParamStore, input: &EpisodeInput) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let bundle = context_bundle(&mut tape, spec, store, input)?;
    let support = input.support_molecules();
    let scored = score_molecules(
        &mut tape,
        spec,
        store,
        input.dataset,
        input.episode.target,
        &support,
        bundle.as_ref(),
    )?;
    let loss = tape.bce_with_logits(scored.logits, &input.support_targets())?;
    let value = check_loss(&tape, loss, "support")?;
    Ok((value, tape.backward(loss)?))
}

/// `inner_steps` gradient steps on the support loss over every trainable tensor.
pub fn inner_adapt(
    spec: &ModelSpec,
    store: &ParamStore,
    input: &EpisodeInput,
    steps: usize,
    lr: f64,
) -> Result<ParamStore> {
    let mut adapted = store.clone();
    for _ in 0..steps {
        let (_, grads) = support_loss(spec, &adapted, input)?;
        adapted.sgd_step(&grads, lr)?;
    }
    Ok(adapted)
}

/// Summed query loss and its gradient at `store`.
pub fn query_loss(spec: &ModelSpec, store: &ParamStore, input: &EpisodeInput) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let bundle = context_bundle(&mut tape, spec, store, input)?;
    let scored = score_molecules(
        &mut tape,
        spec,
        store,
        input.dataset,
        input.episode.target,
        &input.episode.query,
        bundle.as_ref(),
    )?;
    let loss = tape.bce_with_logits(scored.logits, &input.query_targets()?)?;
    let value = check_loss(&tape, loss, "query")?;
    Ok((value, tape.backward(loss)?))
}

fn add_scaled(acc: &mut Gradients, grads: &Gradients, scale: f64) {
    for (name, g) in grads {
        match acc.get_mut(name) {
            Some(a) => a.axpy(scale, g),
            None => {
                let mut t = Tensor::zeros(g.shape());
                t.axpy(scale, g);
                acc.insert(name.clone(), t);
            }
        }
    }
}

/// Map `f` over `items` on up to `threads` scoped threads; output order is
/// input order, so reductions stay deterministic.
pub(crate) fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// Whether embedding tables are trainable in `store`.
fn embeddings_trainable(store: &ParamStore, anchor: &EmbeddingAnchor) -> bool {
    anchor
        .tables
        .iter()
        .any(|(name, _)| store.is_frozen(name).map(|f| !f).unwrap_or(false))
}

/// Penalty value and `lambda`-scaled gradient at the current parameters.
fn penalty_grads(
    store: &ParamStore,
    anchor: &EmbeddingAnchor,
    cfg: &MetaConfig,
    fisher: Option<&FisherDiag>,
) -> Result<(f64, Gradients)> {
    if cfg.penalty == PenaltyMode::None || !embeddings_trainable(store, anchor) {
        return Ok((0.0, Gradients::new()));
    }
    let mut tape = Tape::new();
    let p = penalty(&mut tape, store, anchor, cfg.penalty, fisher)?;
    let value = check_loss(&tape, p, "penalty")?;
    let scaled = tape.scale(p, cfg.lambda)?;
    Ok((value, tape.backward(scaled)?))
}

/// First-order meta-update: query gradients at each adapted `θ'` are averaged
/// and applied to `θ`, together with the consolidation gradient at `θ`.
#[allow(clippy::too_many_arguments)]
pub fn outer_step(
    spec: &ModelSpec,
    store: &mut ParamStore,
    episodes: &[EpisodeInput],
    anchor: &EmbeddingAnchor,
    fisher: Option<&FisherDiag>,
    cfg: &MetaConfig,
    optimizer: &mut Optimizer,
    step: usize,
) -> Result<StepRecord> {
    if episodes.is_empty() {
        return Err(Error::Empty("episode batch"));
    }
    let theta: &ParamStore = store;
    let results = par_map(episodes, cfg.threads, |input| {
        let adapted = inner_adapt(spec, theta, input, cfg.inner_steps, cfg.inner_lr)?;
        query_loss(spec, &adapted, input)
    })?;
    let inv_b = 1.0 / episodes.len() as f64;
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l * inv_b;
        add_scaled(&mut grads, g, inv_b);
    }
    let (pen, pen_grads) = penalty_grads(store, anchor, cfg, fisher)?;
    add_scaled(&mut grads, &pen_grads, 1.0);
    optimizer.step(store, &grads)?;
    Ok(StepRecord {
        step,
        query_loss: loss,
        penalty: pen,
        emb_displacement_norm: anchor.displacement_norm(store)?,
    })
}

/// Training properties with enough labels of each class for an episode.
pub fn eligible_properties(d: &Dataset, shots: usize, query: usize) -> Vec<usize> {
    let needed = shots + query.div_ceil(2);
    d.train_properties()
        .iter()
        .copied()
        .filter(|&p| {
            let (pos, neg) = d.labeled(p);
            pos.len() >= needed && neg.len() >= needed
        })
        .collect()
}

/// Sample the `index`-th training episode.
pub fn training_episode<'a>(
    spec: &ModelSpec,
    d: &'a Dataset,
    eligible: &[usize],
    cache: &Tensor,
    cfg: &MetaConfig,
    index: u64,
) -> Result<EpisodeInput<'a>> {
    let seed = derive_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = eligible[rng.random_range(0..eligible.len())];
    let episode = sample_episode(d, target, cfg.shots, cfg.query, rng.random())?;
    let max_seen = spec.context.map_or(0, |c| c.max_seen);
    let seen = select_seen(d, target, max_seen, &mut rng);
    EpisodeInput::new(spec, d, episode, &seen, cache)
}

/// Run `cfg.steps` outer steps, calling `on_step` after each.
pub fn meta_train(
    model: &mut Model,
    d: &Dataset,
    fisher: Option<&FisherDiag>,
    cfg: &MetaConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if cfg.penalty.needs_fisher() {
        match fisher {
            None => return Err(Error::MissingFisher("tuning")),
            Some(f) => f.check_config(model.spec.encoder())?,
        }
    }
    let eligible = eligible_properties(d, cfg.shots, cfg.query);
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "no training property has {} labelled molecules per class",
            cfg.shots + cfg.query.div_ceil(2)
        )));
    }
    let anchor = model.anchor()?;
    let cache = match model.spec.context {
        Some(_) => model.frozen_features(d)?,
        None => Tensor::zeros(&[1]),
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.outer_lr);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let episodes = (0..cfg.batch)
            .map(|b| training_episode(&model.spec, d, &eligible, &cache, cfg, (step * cfg.batch + b) as u64))
            .collect::<Result<Vec<_>>>()?;
        let rec = outer_step(
            &model.spec,
            &mut model.store,
            &episodes,
            &anchor,
            fisher,
            cfg,
            &mut optimizer,
            step,
        )?;
        log::debug!(
            "step {step}: query loss {:.4}, penalty {:.3e}",
            rec.query_loss,
            rec.penalty
        );
        on_step(&rec)?;
        log.push(rec);
    }
    Ok(log)
}
