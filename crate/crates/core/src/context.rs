//! Per-episode molecule/property context graph and its edge-typed encoder.
//!
//! Node order: episode molecules (support, then query), then the target
//! property, then the seen properties.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::chem::{Dataset, Episode, Label};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeType {
    Positive,
    Negative,
    TargetQuery,
}

impl EdgeType {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Width of the molecule features fed to the projection.
    pub d: usize,
    /// Context width.
    pub d2: usize,
    pub layers: usize,
    /// Upper bound on seen properties per episode.
    pub max_seen: usize,
    pub num_properties: usize,
}

impl ContextConfig {
    pub fn new(d: usize, d2: usize, num_properties: usize) -> Self {
        Self {
            d,
            d2,
            layers: 2,
            max_seen: 8,
            num_properties,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextGraph {
    /// Dataset index of each molecule node.
    pub molecules: Vec<usize>,
    /// Property index of each property node; entry 0 is the target.
    pub properties: Vec<usize>,
    /// `(molecule node, property node, type)`, property node counted from 0
    /// within the property block.
    pub edges: Vec<(usize, usize, EdgeType)>,
}

impl ContextGraph {
    pub fn num_nodes(&self) -> usize {
        self.molecules.len() + self.properties.len()
    }

    pub fn target(&self) -> usize {
        self.properties[0]
    }

    /// Same graph with positive/negative edges to the target turned into
    /// unlabelled ones.
    pub fn without_target_labels(&self) -> ContextGraph {
        let mut g = self.clone();
        for e in &mut g.edges {
            if e.1 == 0 {
                e.2 = EdgeType::TargetQuery;
            }
        }
        g
    }

    /// `[N, N]` adjacency of one edge type, each row divided by the node's
    /// degree in that type so aggregation is a per-type neighbour mean.
    pub fn adjacency(&self, kind: EdgeType) -> Option<Tensor> {
        let n = self.num_nodes();
        let m = self.molecules.len();
        let mut data = vec![0.0; n * n];
        let mut degree = vec![0usize; n];
        for &(mol, prop, t) in &self.edges {
            if t == kind {
                let p = m + prop;
                data[mol * n + p] = 1.0;
                data[p * n + mol] = 1.0;
                degree[mol] += 1;
                degree[p] += 1;
            }
        }
        if degree.iter().all(|&g| g == 0) {
            return None;
        }
        for (row, &g) in data.chunks_mut(n).zip(&degree) {
            if g > 1 {
                let inv = 1.0 / g as f64;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Some(Tensor::from_parts(vec![n, n], data))
    }
}

/// Training properties other than `target`, subsampled to at most `cap`.
pub fn select_seen(d: &Dataset, target: usize, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    let pool: Vec<usize> = d.train_properties().iter().copied().filter(|&p| p != target).collect();
    if pool.len() <= cap {
        return pool;
    }
    let mut picked: Vec<usize> = sample(rng, pool.len(), cap).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// The target-property labels of query molecules are never read.
pub fn build_context_graph(episode: &Episode, d: &Dataset, seen: &[usize]) -> Result<ContextGraph> {
    let target = episode.target;
    if seen.contains(&target) {
        return Err(Error::Context(format!(
            "target property {target} is also listed as seen"
        )));
    }
    if let Some(p) = seen.iter().find(|p| !d.train_properties().contains(p)) {
        return Err(Error::Context(format!("seen property {p} is not a training property")));
    }
    let molecules = episode.molecules();
    let mut properties = vec![target];
    properties.extend_from_slice(seen);
    let mut edges = Vec::new();
    for (node, s) in episode.support.iter().enumerate() {
        let t = if s.label {
            EdgeType::Positive
        } else {
            EdgeType::Negative
        };
        edges.push((node, 0, t));
    }
    for node in episode.support.len()..molecules.len() {
        edges.push((node, 0, EdgeType::TargetQuery));
    }
    for (node, &m) in molecules.iter().enumerate() {
        for (k, &p) in seen.iter().enumerate() {
            match d.label(m, p) {
                Label::Positive => edges.push((node, k + 1, EdgeType::Positive)),
                Label::Negative => edges.push((node, k + 1, EdgeType::Negative)),
                Label::Missing => {}
            }
        }
    }
    Ok(ContextGraph {
        molecules,
        properties,
        edges,
    })
}

pub fn register_context(store: &mut ParamStore, cfg: &ContextConfig, rng: &mut impl Rng) -> Result<()> {
    let mut uniform = |shape: &[usize], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        t
    };
    let (d, d2) = (cfg.d, cfg.d2);
    store.insert("context.mol_proj.w", uniform(&[d, d2], d), false)?;
    store.insert("context.mol_proj.b", uniform(&[d2], d), false)?;
    store.insert("context.prop_emb", uniform(&[cfg.num_properties, d2], 1), false)?;
    store.insert("context.target_emb", uniform(&[1, d2], 1), false)?;
    for k in 0..cfg.layers {
        store.insert(&format!("context.layer{k}.self.w"), uniform(&[d2, d2], d2), false)?;
        store.insert(&format!("context.layer{k}.self.b"), uniform(&[d2], d2), false)?;
        for t in 0..EdgeType::COUNT {
            store.insert(&format!("context.layer{k}.edge{t}.w"), uniform(&[d2, d2], d2), false)?;
        }
    }
    Ok(())
}

/// Encoded context with node lookup. `c` stacks the labelled pass over the
/// label-hidden pass, `2N` rows; lookups pick the right half.
#[derive(Clone, Debug)]
pub struct ContextBundle {
    pub c: Var,
    molecule_rows: BTreeMap<usize, usize>,
    property_rows: BTreeMap<usize, usize>,
}

impl ContextBundle {
    pub fn molecule_row(&self, molecule: usize) -> Result<usize> {
        self.molecule_rows
            .get(&molecule)
            .copied()
            .ok_or_else(|| Error::Context(format!("molecule {molecule} is not in the context graph")))
    }

    pub fn property_row(&self, property: usize) -> Result<usize> {
        self.property_rows
            .get(&property)
            .copied()
            .ok_or_else(|| Error::Context(format!("property {property} is not in the context graph")))
    }

    /// Re-root the bundle on another tape, e.g. as a constant.
    pub fn with_var(&self, c: Var) -> Self {
        Self {
            c,
            molecule_rows: self.molecule_rows.clone(),
            property_rows: self.property_rows.clone(),
        }
    }
}

/// `mol_features` holds one row of frozen molecule features per molecule
/// node, in node order.
pub fn encode_context(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ContextConfig,
    graph: &ContextGraph,
    mol_features: &Tensor,
) -> Result<ContextBundle> {
    let m = graph.molecules.len();
    let n = graph.num_nodes();
    if mol_features.shape() != [m, cfg.d] {
        return Err(Error::Shape {
            op: "encode_context",
            node: 0,
            detail: format!(
                "molecule features {:?}, expected [{m}, {}]",
                mol_features.shape(),
                cfg.d
            ),
        });
    }
    let feats = tape.constant(mol_features.clone());
    let pw = store.var(tape, "context.mol_proj.w")?;
    let pb = store.var(tape, "context.mol_proj.b")?;
    let mol_x = tape.linear(feats, pw, Some(pb))?;
    // The target node starts from one shared vector whatever the property,
    // so a held-out target looks like any training target. Seen properties
    // keep their own rows.
    let target_x = store.var(tape, "context.target_emb")?;

    // Stack molecule rows, the target row and seen-property rows via placement matrices.
    let mut place_m = vec![0.0; n * m];
    for i in 0..m {
        place_m[i * m + i] = 1.0;
    }
    let place_m = tape.constant(Tensor::from_parts(vec![n, m], place_m));
    let mut x = tape.matmul(place_m, mol_x)?;
    let mut place_t = vec![0.0; n];
    place_t[m] = 1.0;
    let place_t = tape.constant(Tensor::from_parts(vec![n, 1], place_t));
    let target_rows = tape.matmul(place_t, target_x)?;
    x = tape.add(x, target_rows)?;
    let seen = &graph.properties[1..];
    if !seen.is_empty() {
        let table = store.var(tape, "context.prop_emb")?;
        let seen_x = tape.gather(table, seen)?;
        let s = seen.len();
        let mut place_s = vec![0.0; n * s];
        for j in 0..s {
            place_s[(m + 1 + j) * s + j] = 1.0;
        }
        let place_s = tape.constant(Tensor::from_parts(vec![n, s], place_s));
        let bottom = tape.matmul(place_s, seen_x)?;
        x = tape.add(x, bottom)?;
    }

    // Property rows come from the labelled graph. Molecule rows come from a
    // copy where support labels on the target are hidden, so a support
    // molecule's vector does not carry its own label and matches a query's.
    let full = propagate(tape, store, cfg, x, graph)?;
    let hidden = propagate(tape, store, cfg, x, &graph.without_target_labels())?;
    let mut top = vec![0.0; 2 * n * n];
    let mut bottom = vec![0.0; 2 * n * n];
    for i in 0..n {
        top[i * n + i] = 1.0;
        bottom[(n + i) * n + i] = 1.0;
    }
    let top = tape.constant(Tensor::from_parts(vec![2 * n, n], top));
    let bottom = tape.constant(Tensor::from_parts(vec![2 * n, n], bottom));
    let top = tape.matmul(top, full)?;
    let bottom = tape.matmul(bottom, hidden)?;
    let c = tape.add(top, bottom)?;
    let molecule_rows = graph
        .molecules
        .iter()
        .enumerate()
        .map(|(i, &mol)| (mol, n + i))
        .collect();
    let property_rows = graph
        .properties
        .iter()
        .enumerate()
        .map(|(j, &prop)| (prop, m + j))
        .collect();
    Ok(ContextBundle {
        c,
        molecule_rows,
        property_rows,
    })
}

fn propagate(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ContextConfig,
    mut x: Var,
    graph: &ContextGraph,
) -> Result<Var> {
    let adjacency: Vec<Option<Var>> = [EdgeType::Positive, EdgeType::Negative, EdgeType::TargetQuery]
        .into_iter()
        .map(|t| graph.adjacency(t).map(|a| tape.constant(a)))
        .collect();
    let ones = tape.constant(Tensor::full(&[cfg.d2], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[cfg.d2]));
    for k in 0..cfg.layers {
        let sw = store.var(tape, &format!("context.layer{k}.self.w"))?;
        let sb = store.var(tape, &format!("context.layer{k}.self.b"))?;
        let mut next = tape.linear(x, sw, Some(sb))?;
        for (t, adj) in adjacency.iter().enumerate() {
            if let Some(adj) = adj {
                let w = store.var(tape, &format!("context.layer{k}.edge{t}.w"))?;
                let msg = tape.matmul(x, w)?;
                let agg = tape.matmul(*adj, msg)?;
                next = tape.add(next, agg)?;
            }
        }
        // Parameter-free norm keeps c on the scale of h_m.
        let normed = tape.layer_norm(next, ones, zeros)?;
        x = tape.relu(normed)?;
    }
    Ok(x)
}

/// `(c_m, c_p)` rows for one molecule and property.
pub fn extract(tape: &mut Tape, bundle: &ContextBundle, molecule: usize, property: usize) -> Result<(Var, Var)> {
    let mr = bundle.molecule_row(molecule)?;
    let pr = bundle.property_row(property)?;
    Ok((tape.gather(bundle.c, &[mr])?, tape.gather(bundle.c, &[pr])?))
}

/// Rows of `cache` (one per dataset molecule) for the graph's molecule nodes.
pub fn node_features(cache: &Tensor, graph: &ContextGraph) -> Tensor {
    let d = cache.cols();
    let mut data = Vec::with_capacity(graph.molecules.len() * d);
    for &m in &graph.molecules {
        data.extend_from_slice(cache.row(m));
    }
    Tensor::from_parts(vec![graph.molecules.len(), d], data)
}
