//! Masked-atom pre-training: hide a fraction of atoms behind a learned mask
//! vector and predict their atomic-number category from the encoder output.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::chem::{derive_seed, MolGraph};
use crate::consolidation::{estimate_fisher, FisherDiag};
use crate::encoder::{
    embed, encode, encode_embedded, freeze_message_passing, layer_prefix, register_encoder, update_running_stats,
    BnMode, EncoderConfig, GraphBatch,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Molecules per step.
    pub batch: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 32,
            mask_rate: 0.15,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_rate.is_nan() || self.mask_rate <= 0.0 {
            return Err(Error::Config("mask rate is 0: nothing to predict".into()));
        }
        if self.mask_rate > 1.0 {
            return Err(Error::Config(format!("mask rate {} exceeds 1", self.mask_rate)));
        }
        if self.batch == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Atoms to mask: `round(rate * n)` of them, at least one.
pub fn choose_masked(num_atoms: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = ((rate * num_atoms as f64).round() as usize).clamp(1, num_atoms);
    let mut picked = sample(rng, num_atoms, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean cross-entropy over the masked atoms of `batch`.
pub fn masked_atom_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    batch: &GraphBatch,
    masked: &[usize],
    mode: BnMode,
) -> Result<(Var, Vec<crate::autodiff::BatchStats>)> {
    let n = batch.num_atoms();
    if masked.is_empty() {
        return Err(Error::Config("nothing to predict: no atom is masked".into()));
    }
    let mut embedded = embed(tape, store, cfg, batch)?;
    let mut keep = vec![0.0; n * n];
    let mut hit = vec![0.0; n];
    for a in 0..n {
        keep[a * n + a] = 1.0;
    }
    for &a in masked {
        if a >= n {
            return Err(Error::IndexOutOfRange {
                what: "masked atoms".into(),
                index: a,
                size: n,
            });
        }
        keep[a * n + a] = 0.0;
        hit[a] = 1.0;
    }
    let keep = tape.constant(Tensor::from_parts(vec![n, n], keep));
    let hit = tape.constant(Tensor::from_parts(vec![n, 1], hit));
    let token = store.var(tape, "pretrain.mask_token")?;
    let kept = tape.matmul(keep, embedded.atoms)?;
    let filled = tape.matmul(hit, token)?;
    embedded.atoms = tape.add(kept, filled)?;
    let out = encode_embedded(tape, store, cfg, batch, &embedded, mode, None, None)?;
    let rows = tape.gather(out.atoms(), masked)?;
    let w = store.var(tape, "pretrain.head.w")?;
    let b = store.var(tape, "pretrain.head.b")?;
    let logits = tape.linear(rows, w, Some(b))?;
    let targets: Vec<usize> = masked.iter().map(|&a| batch.atom_features()[a][0]).collect();
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok((loss, out.batch_stats))
}

/// Fresh encoder plus pre-training tensors (mask vector, zero-initialised head).
pub fn init_pretraining(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    register_encoder(&mut store, cfg, rng)?;
    let bound = (6.0 / (1 + cfg.d) as f64).sqrt();
    let mut token = Tensor::zeros(&[1, cfg.d]);
    for v in token.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    store.insert("pretrain.mask_token", token, false)?;
    let classes = cfg.atom_vocab[0];
    store.insert("pretrain.head.w", Tensor::zeros(&[cfg.d, classes]), false)?;
    store.insert("pretrain.head.b", Tensor::zeros(&[classes]), false)?;
    Ok(store)
}

/// Train with Adam, then freeze message passing and the pre-training tensors.
/// Returns the store and the per-step losses.
pub fn pretrain_masked_atoms(
    graphs: &[&MolGraph],
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    cfg.validate()?;
    enc.validate()?;
    if graphs.is_empty() {
        return Err(Error::Empty("pre-training molecules"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_pretraining(enc, &mut rng)?;
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch_size = cfg.batch.min(graphs.len());
    for step in 0..cfg.steps {
        let picked = sample(&mut rng, graphs.len(), batch_size).into_vec();
        let chosen: Vec<&MolGraph> = picked.iter().map(|&i| graphs[i]).collect();
        let batch = GraphBatch::new(&chosen)?;
        let masked = choose_masked(batch.num_atoms(), cfg.mask_rate, &mut rng);
        let mut tape = Tape::new();
        let (loss, stats) = masked_atom_loss(&mut tape, &store, enc, &batch, &masked, BnMode::Train)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "pre-training loss is {value} at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut store, &grads)?;
        update_running_stats(&mut store, &stats)?;
        log::debug!("pretrain step {step}: loss {value:.4}");
        losses.push(value);
    }
    recalibrate_running_stats(&mut store, enc, graphs, cfg.batch)?;
    freeze_message_passing(&mut store);
    store.freeze_prefix("pretrain.");
    Ok((store, losses))
}

/// Replace the running batch-norm statistics by their average over unmasked
/// molecules. Training batches carry mask tokens, so the momentum estimates
/// do not match what the frozen encoder sees later.
pub fn recalibrate_running_stats(
    store: &mut ParamStore,
    enc: &EncoderConfig,
    graphs: &[&MolGraph],
    chunk: usize,
) -> Result<()> {
    let chunks: Vec<&[&MolGraph]> = graphs.chunks(chunk.max(2)).collect();
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut used = 0usize;
    for part in chunks {
        let batch = GraphBatch::new(part)?;
        if batch.num_atoms() < 2 {
            continue;
        }
        let mut tape = Tape::new();
        let out = encode(&mut tape, store, enc, &batch, BnMode::Train, None, None)?;
        let unbias = batch.num_atoms() as f64 / (batch.num_atoms() - 1) as f64;
        if sums.is_empty() {
            sums = out
                .batch_stats
                .iter()
                .map(|s| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()]))
                .collect();
        }
        for ((m, v), s) in sums.iter_mut().zip(&out.batch_stats) {
            m.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
            v.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b * unbias);
        }
        used += 1;
    }
    if used == 0 {
        return Ok(());
    }
    for (l, (m, v)) in sums.into_iter().enumerate() {
        let p = layer_prefix(l);
        let n = used as f64;
        let mean = Tensor::from_parts(vec![m.len()], m.into_iter().map(|a| a / n).collect());
        let var = Tensor::from_parts(vec![v.len()], v.into_iter().map(|a| a / n).collect());
        store.set_buffer(&format!("{p}.bn.running_mean"), mean)?;
        store.set_buffer(&format!("{p}.bn.running_var"), var)?;
    }
    Ok(())
}

/// Diagonal Fisher of the masked-atom loss over the embedding tables, one
/// molecule per sample with a per-molecule seeded mask and eval-mode batch norm.
pub fn pretraining_fisher(
    store: &ParamStore,
    enc: &EncoderConfig,
    graphs: &[&MolGraph],
    mask_rate: f64,
    seed: u64,
) -> Result<FisherDiag> {
    let tables: Vec<String> = enc.embedding_tables().into_iter().map(|(n, _)| n).collect();
    let mut view = store.clone();
    for t in &tables {
        view.set_frozen(t, false)?;
    }
    let samples: Vec<(usize, &MolGraph)> = graphs.iter().copied().enumerate().collect();
    estimate_fisher(&view, &tables, &samples, |tape, s, &(i, g)| {
        let batch = GraphBatch::new(&[g])?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let masked = choose_masked(batch.num_atoms(), mask_rate, &mut rng);
        Ok(masked_atom_loss(tape, s, enc, &batch, &masked, BnMode::Eval)?.0)
    })
}
