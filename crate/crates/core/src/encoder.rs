//! GIN-style molecular encoder: summed categorical atom/bond embeddings, L
//! message-passing layers `ReLU(BN(MLP(sum of self, neighbours and incident
//! bond embeddings)))`, and a mean readout over atoms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, AdapterSet};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::chem::{featurize, MolGraph, ATOM_VOCAB, BOND_DIR_VOCAB, BOND_TYPE_VOCAB, CHIRALITY_VOCAB};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Momentum for running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hidden width.
    pub d: usize,
    /// Hidden width inside each layer's MLP.
    pub d1: usize,
    pub layers: usize,
    /// Vocabulary size per atom feature family.
    pub atom_vocab: Vec<usize>,
    /// Vocabulary size per bond feature family.
    pub bond_vocab: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::new(300, 600, 5)
    }
}

impl EncoderConfig {
    pub fn new(d: usize, d1: usize, layers: usize) -> Self {
        Self {
            d,
            d1,
            layers,
            atom_vocab: vec![ATOM_VOCAB, CHIRALITY_VOCAB],
            bond_vocab: vec![BOND_TYPE_VOCAB, BOND_DIR_VOCAB],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d1 == 0 || self.layers == 0 {
            return Err(Error::Config(format!(
                "encoder widths and depth must be positive (d={}, d1={}, L={})",
                self.d, self.d1, self.layers
            )));
        }
        if self.atom_vocab.len() != 2 || self.bond_vocab.len() != 2 {
            return Err(Error::Config(
                "encoder expects two atom and two bond feature families".into(),
            ));
        }
        if self.atom_vocab.iter().chain(&self.bond_vocab).any(|&v| v == 0) {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        Ok(())
    }

    /// Every encoder tensor name with its shape, embeddings first in the
    /// stacked-embedding order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .embedding_tables()
            .into_iter()
            .map(|(n, rows)| (n, vec![rows, self.d]))
            .collect();
        for l in 0..self.layers {
            let p = layer_prefix(l);
            out.push((format!("{p}.mlp.0.w"), vec![self.d, self.d1]));
            out.push((format!("{p}.mlp.0.b"), vec![self.d1]));
            out.push((format!("{p}.mlp.1.w"), vec![self.d1, self.d]));
            out.push((format!("{p}.mlp.1.b"), vec![self.d]));
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("{p}.bn.{s}"), vec![self.d]));
            }
        }
        out
    }

    /// Embedding tables in stacked order: atom families, then per layer the
    /// bond families. Row `i` of the stacked matrix walks this list.
    pub fn embedding_tables(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (a, &rows) in self.atom_vocab.iter().enumerate() {
            out.push((atom_table(a), rows));
        }
        for l in 0..self.layers {
            for (b, &rows) in self.bond_vocab.iter().enumerate() {
                out.push((bond_table(l, b), rows));
            }
        }
        out
    }

    /// Total rows `E` of the stacked embedding matrix.
    pub fn embedding_rows(&self) -> usize {
        self.embedding_tables().iter().map(|(_, r)| r).sum()
    }
}

pub fn atom_table(family: usize) -> String {
    format!("encoder.atom_emb.{family}")
}

pub fn bond_table(layer: usize, family: usize) -> String {
    format!("encoder.layer{layer}.bond_emb.{family}")
}

pub fn layer_prefix(layer: usize) -> String {
    format!("encoder.layer{layer}")
}

fn is_message_passing(name: &str) -> bool {
    name.starts_with("encoder.layer") && (name.contains(".mlp.") || name.contains(".bn."))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// Register freshly initialised encoder tensors, all trainable except the
/// running batch-norm statistics.
pub fn register_encoder(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in cfg.tensor_shapes() {
        let (tensor, frozen) = if name.contains("emb") {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (uniform(rng, &shape, bound), false)
        } else if name.contains(".mlp.") {
            let fan_in = if name.contains(".mlp.0.") { cfg.d } else { cfg.d1 };
            (uniform(rng, &shape, 1.0 / (fan_in as f64).sqrt()), false)
        } else if name.ends_with("gamma") || name.ends_with("running_var") {
            (Tensor::full(&shape, 1.0), name.ends_with("running_var"))
        } else {
            (Tensor::zeros(&shape), name.ends_with("running_mean"))
        };
        store.insert(&name, tensor, frozen)?;
    }
    Ok(())
}

/// Freeze the MLP and batch-norm tensors of every message-passing layer.
pub fn freeze_message_passing(store: &mut ParamStore) {
    let names: Vec<String> = store
        .names()
        .filter(|n| is_message_passing(n))
        .map(str::to_string)
        .collect();
    for n in names {
        store.set_frozen(&n, true).expect("name from store");
    }
}

/// Verify that `store` holds every encoder tensor with the shape `cfg` implies.
pub fn check_encoder_shapes(store: &ParamStore, cfg: &EncoderConfig) -> Result<()> {
    for (name, shape) in cfg.tensor_shapes() {
        let found = store.get(&name)?;
        if found.shape() != shape.as_slice() {
            return Err(Error::TensorShape {
                name,
                expected: shape,
                found: found.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Several molecules packed into one disconnected graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    atom_features: Vec<[usize; 2]>,
    edge_features: Vec<[usize; 2]>,
    atom_to_mol: Vec<usize>,
    num_mols: usize,
    /// `A + I`, dense `[n, n]`.
    adjacency_self: Tensor,
    /// `[n, directed edges]`, 1 where the edge starts at the atom.
    incidence: Option<Tensor>,
    /// `[mols, n]` mean-readout weights.
    pool: Tensor,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Empty("graph batch"));
        }
        let n: usize = graphs.iter().map(|g| g.num_atoms()).sum();
        let mut atom_features = Vec::with_capacity(n);
        let mut edge_features = Vec::new();
        let mut edges = Vec::new();
        let mut atom_to_mol = Vec::with_capacity(n);
        let mut offset = 0;
        for (m, g) in graphs.iter().enumerate() {
            let f = featurize(g);
            atom_features.extend_from_slice(&f.atom_features);
            for (&(s, t), ef) in f.edge_index.iter().zip(&f.edge_features) {
                edges.push((offset + s, offset + t));
                edge_features.push(*ef);
            }
            atom_to_mol.extend(std::iter::repeat_n(m, g.num_atoms()));
            offset += g.num_atoms();
        }
        let mut adj = vec![0.0; n * n];
        for v in 0..n {
            adj[v * n + v] = 1.0;
        }
        for &(s, t) in &edges {
            adj[s * n + t] = 1.0;
        }
        let incidence = (!edges.is_empty()).then(|| {
            let e = edges.len();
            let mut inc = vec![0.0; n * e];
            for (k, &(s, _)) in edges.iter().enumerate() {
                inc[s * e + k] = 1.0;
            }
            Tensor::from_parts(vec![n, e], inc)
        });
        let mut pool = vec![0.0; graphs.len() * n];
        let mut start = 0;
        for (m, g) in graphs.iter().enumerate() {
            let w = 1.0 / g.num_atoms() as f64;
            for a in start..start + g.num_atoms() {
                pool[m * n + a] = w;
            }
            start += g.num_atoms();
        }
        Ok(Self {
            atom_features,
            edge_features,
            atom_to_mol,
            num_mols: graphs.len(),
            adjacency_self: Tensor::from_parts(vec![n, n], adj),
            incidence,
            pool: Tensor::from_parts(vec![graphs.len(), n], pool),
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_features.len()
    }

    pub fn num_mols(&self) -> usize {
        self.num_mols
    }

    /// Molecule (position in the batch) owning each atom.
    pub fn atom_to_mol(&self) -> &[usize] {
        &self.atom_to_mol
    }

    pub fn atom_features(&self) -> &[[usize; 2]] {
        &self.atom_features
    }
}

/// Layer-0 atom embeddings and per-layer directed-edge embeddings.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub atoms: Var,
    /// `None` when the batch has no bonds.
    pub bonds: Vec<Option<Var>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-atom context rows fed to context-conditioned adapters.
#[derive(Clone, Copy, Debug)]
pub struct AtomContext {
    /// `c_m` of the molecule owning each atom, `[n, d2]`.
    pub molecule: Var,
    /// `c_p` of the target property repeated per atom, `[n, d2]`.
    pub property: Var,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// Output of each layer (after the adapter when one is attached).
    pub layers: Vec<Var>,
    /// Molecule representations `[mols, d]`.
    pub molecules: Var,
    /// Populated in train mode only, one entry per layer.
    pub batch_stats: Vec<BatchStats>,
}

impl EncodeOutput {
    pub fn atoms(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

fn sum_families(tape: &mut Tape, store: &ParamStore, tables: &[String], index: &[Vec<usize>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (table, idx) in tables.iter().zip(index) {
        let t = store.var(tape, table)?;
        let rows = tape.gather(t, idx)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, rows)?,
            None => rows,
        });
    }
    acc.ok_or(Error::Empty("embedding families"))
}

pub fn embed(tape: &mut Tape, store: &ParamStore, cfg: &EncoderConfig, batch: &GraphBatch) -> Result<Embedded> {
    let atom_index: Vec<Vec<usize>> = (0..cfg.atom_vocab.len())
        .map(|a| batch.atom_features.iter().map(|f| f[a]).collect())
        .collect();
    let atom_tables: Vec<String> = (0..cfg.atom_vocab.len()).map(atom_table).collect();
    let atoms = sum_families(tape, store, &atom_tables, &atom_index)?;
    let mut bonds = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        if batch.edge_features.is_empty() {
            bonds.push(None);
            continue;
        }
        let bond_index: Vec<Vec<usize>> = (0..cfg.bond_vocab.len())
            .map(|b| batch.edge_features.iter().map(|f| f[b]).collect())
            .collect();
        let tables: Vec<String> = (0..cfg.bond_vocab.len()).map(|b| bond_table(l, b)).collect();
        bonds.push(Some(sum_families(tape, store, &tables, &bond_index)?));
    }
    Ok(Embedded { atoms, bonds })
}

/// One message-passing layer, optionally followed by its adapter.
#[allow(clippy::too_many_arguments)]
pub fn message_passing_layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    h_prev: Var,
    edge_emb: Option<Var>,
    batch: &GraphBatch,
    mode: BnMode,
    adapter: Option<(&AdapterSet, Option<&AtomContext>)>,
) -> Result<(Var, Option<BatchStats>)> {
    if layer >= cfg.layers {
        return Err(Error::IndexOutOfRange {
            what: "encoder layers".into(),
            index: layer,
            size: cfg.layers,
        });
    }
    let p = layer_prefix(layer);
    let adj = tape.named_constant("batch.adjacency_self", batch.adjacency_self.clone());
    let mut agg = tape.matmul(adj, h_prev)?;
    if let (Some(e), Some(inc)) = (edge_emb, &batch.incidence) {
        let inc = tape.named_constant("batch.incidence", inc.clone());
        let bond_sum = tape.matmul(inc, e)?;
        agg = tape.add(agg, bond_sum)?;
    }
    let w0 = store.var(tape, &format!("{p}.mlp.0.w"))?;
    let b0 = store.var(tape, &format!("{p}.mlp.0.b"))?;
    let w1 = store.var(tape, &format!("{p}.mlp.1.w"))?;
    let b1 = store.var(tape, &format!("{p}.mlp.1.b"))?;
    let hidden = tape.linear(agg, w0, Some(b0))?;
    let hidden = tape.relu(hidden)?;
    let mlp = tape.linear(hidden, w1, Some(b1))?;
    let gamma = store.var(tape, &format!("{p}.bn.gamma"))?;
    let beta = store.var(tape, &format!("{p}.bn.beta"))?;
    let (normed, stats) = match mode {
        BnMode::Train => {
            let (v, s) = tape.batch_norm_train(mlp, gamma, beta)?;
            (v, Some(s))
        }
        BnMode::Eval => {
            let rm = store.get(&format!("{p}.bn.running_mean"))?;
            let rv = store.get(&format!("{p}.bn.running_var"))?;
            (tape.batch_norm_eval(mlp, gamma, beta, rm.data(), rv.data())?, None)
        }
    };
    let out = tape.relu(normed)?;
    let out = match adapter {
        Some((set, ctx)) => adapter_forward(tape, store, set, layer, out, ctx)?,
        None => out,
    };
    Ok((out, stats))
}

#[allow(clippy::too_many_arguments)]
pub fn encode_embedded(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    batch: &GraphBatch,
    embedded: &Embedded,
    mode: BnMode,
    adapters: Option<&AdapterSet>,
    context: Option<&AtomContext>,
) -> Result<EncodeOutput> {
    if let Some(set) = adapters {
        set.check_layers(cfg.layers)?;
    }
    let mut h = embedded.atoms;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut batch_stats = Vec::new();
    for l in 0..cfg.layers {
        let (out, stats) = message_passing_layer(
            tape,
            store,
            cfg,
            l,
            h,
            embedded.bonds[l],
            batch,
            mode,
            adapters.map(|a| (a, context)),
        )?;
        batch_stats.extend(stats);
        layers.push(out);
        h = out;
    }
    let pool = tape.named_constant("batch.pool", batch.pool.clone());
    let molecules = tape.matmul(pool, h)?;
    Ok(EncodeOutput {
        layers,
        molecules,
        batch_stats,
    })
}

pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    batch: &GraphBatch,
    mode: BnMode,
    adapters: Option<&AdapterSet>,
    context: Option<&AtomContext>,
) -> Result<EncodeOutput> {
    let embedded = embed(tape, store, cfg, batch)?;
    encode_embedded(tape, store, cfg, batch, &embedded, mode, adapters, context)
}

/// Fold train-mode batch statistics into the running estimates.
pub fn update_running_stats(store: &mut ParamStore, stats: &[BatchStats]) -> Result<()> {
    for (l, s) in stats.iter().enumerate() {
        let p = layer_prefix(l);
        let mean_name = format!("{p}.bn.running_mean");
        let var_name = format!("{p}.bn.running_var");
        let mut mean = store.get(&mean_name)?.clone();
        let mut var = store.get(&var_name)?.clone();
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
        store.set_buffer(&mean_name, mean)?;
        store.set_buffer(&var_name, var)?;
    }
    Ok(())
}

/// Mean-readout representations for many molecules, processed in chunks,
/// with no adapters and eval-mode batch norm.
pub fn embed_molecules(
    store: &ParamStore,
    cfg: &EncoderConfig,
    graphs: &[&MolGraph],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(graphs.len());
    for part in graphs.chunks(chunk.max(1)) {
        let batch = GraphBatch::new(part)?;
        let mut tape = Tape::new();
        let enc = encode(&mut tape, store, cfg, &batch, BnMode::Eval, None, None)?;
        let v = tape.value(enc.molecules);
        for r in 0..v.rows() {
            out.push(v.row(r).to_vec());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Full,
    Pin,
}

/// Trainable-parameter accounting for full fine-tuning versus adapter tuning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterReport {
    pub mode: CountMode,
    pub context_enabled: bool,
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub layers: usize,
    /// Trainable MLP + batch-norm affine parameters.
    pub message_passing_trainable: usize,
    /// Exact embedding parameters: total vocabulary rows times `d`.
    pub embedding_trainable_exact: usize,
    /// `|E_n| d + L |E_e| d` with `|E_n|`, `|E_e|` the number of feature families.
    pub embedding_family_formula: usize,
    pub adapter_trainable: usize,
    /// Message-passing trainables of full tuning minus adapter trainables of
    /// Pin tuning for the same `context_enabled` setting.
    pub delta_n: i64,
    /// Extra adapter parameters from widening the down-projection input by `2 d2`.
    pub context_extra: usize,
}

pub fn full_message_passing_count(d: usize, d1: usize, layers: usize) -> usize {
    layers * (2 * d * d1 + d1 + 3 * d)
}

/// Adapter trainables: down `(in, d2)` + bias, up `(d2, d)` + bias, layer-norm affine.
pub fn adapter_count(d: usize, d2: usize, layers: usize, context_enabled: bool) -> usize {
    let input = if context_enabled { d + 2 * d2 } else { d };
    layers * (input * d2 + d2 + d2 * d + d + 2 * d)
}

pub fn count_parameters(cfg: &EncoderConfig, d2: usize, mode: CountMode, context_enabled: bool) -> ParameterReport {
    let (d, d1, layers) = (cfg.d, cfg.d1, cfg.layers);
    let full_mp = full_message_passing_count(d, d1, layers);
    let adapters = adapter_count(d, d2, layers, context_enabled);
    let embedding_exact = cfg.embedding_rows() * d;
    let embedding_formula = cfg.atom_vocab.len() * d + layers * cfg.bond_vocab.len() * d;
    let (mp, adapter_trainable) = match mode {
        CountMode::Full => (full_mp, 0),
        CountMode::Pin => (0, adapters),
    };
    ParameterReport {
        mode,
        context_enabled,
        d,
        d1,
        d2,
        layers,
        message_passing_trainable: mp,
        embedding_trainable_exact: embedding_exact,
        embedding_family_formula: embedding_formula,
        adapter_trainable,
        delta_n: full_mp as i64 - adapters as i64,
        context_extra: adapter_count(d, d2, layers, true) - adapter_count(d, d2, layers, false),
    }
}
