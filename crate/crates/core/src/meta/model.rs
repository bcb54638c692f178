use rand::Rng;

use crate::adapter::{attach_fresh, AdapterConfig, AdapterSet};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, HeadConfig, ModelConfig, TuningMode};
use crate::chem::{Dataset, Episode};
use crate::consolidation::EmbeddingAnchor;
use crate::context::{
    build_context_graph, encode_context, node_features, register_context, ContextBundle, ContextConfig, ContextGraph,
};
use crate::encoder::{
    check_encoder_shapes, embed_molecules, encode, freeze_message_passing, AtomContext, BnMode, EncoderConfig,
    GraphBatch,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Prefix of the frozen copies of the pre-trained embedding tables.
pub const ANCHOR_PREFIX: &str = "anchor.";

/// Everything about a tunable model except its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub adapters: Option<AdapterSet>,
    pub context: Option<ContextConfig>,
}

impl ModelSpec {
    pub fn encoder(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    pub fn head(&self) -> &HeadConfig {
        self.config.head.as_ref().expect("tunable model has a head")
    }

    fn from_config(config: ModelConfig) -> Result<Self> {
        let head = config
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no tuning head; run tune first".into()))?;
        validate_head(&config.encoder, head)?;
        let context = (head.context).then(|| ContextConfig {
            max_seen: head.max_seen,
            ..ContextConfig::new(config.encoder.d, head.d2, head.num_properties)
        });
        Ok(Self {
            adapters: None,
            context,
            config,
        })
    }

    fn adapter_config(&self) -> AdapterConfig {
        let head = self.head();
        AdapterConfig {
            d: self.encoder().d,
            d2: head.d2,
            context_enabled: head.context,
        }
    }

    pub fn classifier_input(&self) -> usize {
        let d = self.encoder().d;
        match &self.context {
            Some(c) => d + 2 * c.d2,
            None => d,
        }
    }
}

fn validate_head(encoder: &EncoderConfig, head: &HeadConfig) -> Result<()> {
    if head.d2 == 0 || head.d2 >= encoder.d {
        return Err(Error::Config(format!(
            "bottleneck d2={} must satisfy 0 < d2 < d={}",
            head.d2, encoder.d
        )));
    }
    if head.mode == TuningMode::Frozen && head.context {
        return Err(Error::Config("the frozen baseline has no context module".into()));
    }
    if head.context && head.num_properties == 0 {
        return Err(Error::Config("context needs at least one property".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

/// Rows of the first layer past `d` read the context vectors; they start at
/// zero so the head initially scores on `h_m` alone.
fn register_classifier(
    store: &mut ParamStore,
    d: usize,
    input: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut uniform = |shape: &[usize], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        t
    };
    let mut w0 = uniform(&[input, hidden], input);
    w0.data_mut()[d * hidden..].fill(0.0);
    store.insert("classifier.0.w", w0, false)?;
    store.insert("classifier.0.b", uniform(&[hidden], input), false)?;
    store.insert("classifier.1.w", uniform(&[hidden, 1], hidden), false)?;
    store.insert("classifier.1.b", uniform(&[1], hidden), false)?;
    Ok(())
}

impl Model {
    /// Set up tuning on top of a pre-trained encoder: freeze message passing
    /// (and, for the frozen baseline, the embeddings), keep frozen copies of
    /// the embedding tables, then add adapters, context encoder and head.
    pub fn from_pretrained(
        encoder: EncoderConfig,
        mut store: ParamStore,
        head: HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        encoder.validate()?;
        check_encoder_shapes(&store, &encoder)?;
        let mut spec = ModelSpec::from_config(ModelConfig {
            encoder,
            head: Some(head.clone()),
        })?;
        freeze_message_passing(&mut store);
        store.freeze_prefix("pretrain.");
        for (name, _) in spec.encoder().embedding_tables() {
            let t = store.get(&name)?.clone();
            store.insert(&format!("{ANCHOR_PREFIX}{name}"), t, true)?;
            if head.mode == TuningMode::Frozen {
                store.set_frozen(&name, true)?;
            }
        }
        if head.mode == TuningMode::Pin {
            let set = attach_fresh(&mut store, spec.encoder(), spec.adapter_config(), rng)?;
            spec.adapters = Some(set);
        }
        if let Some(ctx) = &spec.context {
            register_context(&mut store, ctx, rng)?;
        }
        register_classifier(&mut store, spec.encoder().d, spec.classifier_input(), head.d2, rng)?;
        Ok(Self { spec, store })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut spec = ModelSpec::from_config(ckpt.config)?;
        if spec.head().mode == TuningMode::Pin {
            let set = AdapterSet::existing(&ckpt.store, spec.adapter_config(), spec.encoder().layers)?;
            spec.adapters = Some(set);
        }
        Ok(Self {
            spec,
            store: ckpt.store,
        })
    }

    pub fn checkpoint(&self, run_config: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            config: self.spec.config.clone(),
            store: self.store.clone(),
            run_config,
        }
    }

    /// The pre-trained embedding tables kept alongside the tuned ones.
    pub fn anchor(&self) -> Result<EmbeddingAnchor> {
        let tables = self
            .spec
            .encoder()
            .embedding_tables()
            .into_iter()
            .map(|(name, _)| {
                let t = self.store.get(&format!("{ANCHOR_PREFIX}{name}"))?.clone();
                Ok((name, t))
            })
            .collect::<Result<_>>()?;
        Ok(EmbeddingAnchor { tables })
    }

    /// Molecule representations of the pre-trained encoder (anchor
    /// embeddings, no adapters) for every molecule of `d`; these initialise
    /// the context graph's molecule nodes.
    pub fn frozen_features(&self, d: &Dataset) -> Result<Tensor> {
        let mut plain = ParamStore::new();
        for (name, shape) in self.spec.encoder().tensor_shapes() {
            let src = if name.contains("emb") {
                format!("{ANCHOR_PREFIX}{name}")
            } else {
                name.clone()
            };
            let t = self.store.get(&src)?;
            debug_assert_eq!(t.shape(), shape.as_slice());
            plain.insert(&name, t.clone(), true)?;
        }
        let graphs: Vec<_> = d.graphs().collect();
        let rows = embed_molecules(&plain, self.spec.encoder(), &graphs, 64)?;
        let width = self.spec.encoder().d;
        Ok(Tensor::from_parts(vec![rows.len(), width], rows.concat()))
    }
}

/// One episode prepared for the model: context graph and its node features.
#[derive(Clone, Debug)]
pub struct EpisodeInput<'a> {
    pub dataset: &'a Dataset,
    pub episode: Episode,
    pub graph: Option<ContextGraph>,
    pub features: Option<Tensor>,
}

impl<'a> EpisodeInput<'a> {
    pub fn new(
        spec: &ModelSpec,
        dataset: &'a Dataset,
        episode: Episode,
        seen: &[usize],
        cache: &Tensor,
    ) -> Result<Self> {
        let (graph, features) = if spec.context.is_some() {
            let g = build_context_graph(&episode, dataset, seen)?;
            let f = node_features(cache, &g);
            (Some(g), Some(f))
        } else {
            (None, None)
        };
        Ok(Self {
            dataset,
            episode,
            graph,
            features,
        })
    }

    pub fn support_molecules(&self) -> Vec<usize> {
        self.episode.support.iter().map(|s| s.molecule).collect()
    }

    pub fn support_targets(&self) -> Vec<f64> {
        self.episode
            .support
            .iter()
            .map(|s| if s.label { 1.0 } else { 0.0 })
            .collect()
    }

    /// Target-property labels of the query molecules. Only loss and metric
    /// code reads these.
    pub fn query_targets(&self) -> Result<Vec<f64>> {
        self.episode
            .query
            .iter()
            .map(|&m| {
                self.dataset
                    .label(m, self.episode.target)
                    .as_bool()
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .ok_or_else(|| Error::Context(format!("query molecule {m} has no target label")))
            })
            .collect()
    }
}

/// Encode the context graph on `tape`; `None` without a context module.
pub fn context_bundle(
    tape: &mut Tape,
    spec: &ModelSpec,
    store: &ParamStore,
    input: &EpisodeInput,
) -> Result<Option<ContextBundle>> {
    match (&spec.context, &input.graph, &input.features) {
        (Some(cfg), Some(g), Some(f)) => Ok(Some(encode_context(tape, store, cfg, g, f)?)),
        (Some(_), _, _) => Err(Error::Context("episode was prepared without a context graph".into())),
        (None, _, _) => Ok(None),
    }
}

/// Output of scoring a set of molecules.
#[derive(Clone, Copy, Debug)]
pub struct Scored {
    /// `[k, 1]` pre-sigmoid scores.
    pub logits: Var,
    /// `[k, d]` molecule representations.
    pub molecules: Var,
}

/// Classifier logits for `molecules` of the episode, given its encoded context.
pub fn score_molecules(
    tape: &mut Tape,
    spec: &ModelSpec,
    store: &ParamStore,
    dataset: &Dataset,
    target: usize,
    molecules: &[usize],
    bundle: Option<&ContextBundle>,
) -> Result<Scored> {
    if molecules.is_empty() {
        return Err(Error::Empty("molecules to score"));
    }
    let graphs: Vec<_> = molecules.iter().map(|&m| &dataset.molecules[m].graph).collect();
    let batch = GraphBatch::new(&graphs)?;
    let ctx = match bundle {
        Some(b) => {
            let mol_rows = molecules
                .iter()
                .map(|&m| b.molecule_row(m))
                .collect::<Result<Vec<_>>>()?;
            let prow = b.property_row(target)?;
            let atom_rows: Vec<usize> = batch.atom_to_mol().iter().map(|&i| mol_rows[i]).collect();
            let atom_ctx = AtomContext {
                molecule: tape.gather(b.c, &atom_rows)?,
                property: tape.gather(b.c, &vec![prow; atom_rows.len()])?,
            };
            let c_m = tape.gather(b.c, &mol_rows)?;
            let c_p = tape.gather(b.c, &vec![prow; molecules.len()])?;
            Some((atom_ctx, c_m, c_p))
        }
        None if spec.context.is_some() => {
            return Err(Error::Context(
                "context-conditioned model needs a context bundle".into(),
            ))
        }
        None => None,
    };
    let out = encode(
        tape,
        store,
        spec.encoder(),
        &batch,
        BnMode::Eval,
        spec.adapters.as_ref(),
        ctx.as_ref().map(|(a, _, _)| a),
    )?;
    let input = match &ctx {
        Some((_, c_m, c_p)) => tape.concat(&[out.molecules, *c_m, *c_p])?,
        None => out.molecules,
    };
    let logits = classify(tape, store, input)?;
    Ok(Scored {
        logits,
        molecules: out.molecules,
    })
}

/// Two-layer head on `h_m ‖ c_m ‖ c_p`; returns pre-sigmoid scores `[k, 1]`.
pub fn classify(tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
    let w0 = store.var(tape, "classifier.0.w")?;
    let b0 = store.var(tape, "classifier.0.b")?;
    let w1 = store.var(tape, "classifier.1.w")?;
    let b1 = store.var(tape, "classifier.1.b")?;
    let hidden = tape.linear(input, w0, Some(b0))?;
    let hidden = tape.relu(hidden)?;
    tape.linear(hidden, w1, Some(b1))
}
