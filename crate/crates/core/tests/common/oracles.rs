//! Hand-written reference computations shared by the integration tests.

use pintune::adapter::{adapter_forward, attach_fresh, AdapterConfig};
use pintune::autodiff::{Tape, NORM_EPS};
use pintune::chem::{AtomFeat, Bond, BondFeat, MolGraph};
use pintune::consolidation::{penalty_on, FisherDiag, PenaltyMode};
use pintune::encoder::{
    atom_table, bond_table, encode, layer_prefix, register_encoder, AtomContext, BnMode, EncoderConfig, GraphBatch,
};
use pintune::{ParamStore, Tensor};
use rand::Rng;

use super::{random_tensor, rng};

pub fn encoder_store(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    register_encoder(&mut store, cfg, &mut rng(seed)).unwrap();
    // Non-trivial running statistics so eval-mode batch norm does real work.
    let mut r = rng(seed + 100);
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        let mean = random_tensor(&mut r, &[cfg.d], 0.5);
        let var = Tensor::new(vec![cfg.d], (0..cfg.d).map(|_| r.random_range(0.3..2.0)).collect()).unwrap();
        store.set_buffer(&format!("{p}.bn.running_mean"), mean).unwrap();
        store.set_buffer(&format!("{p}.bn.running_var"), var).unwrap();
        for s in ["gamma", "beta"] {
            let name = format!("{p}.bn.{s}");
            store.assign(&name, random_tensor(&mut r, &[cfg.d], 1.0)).unwrap();
        }
    }
    store
}

pub fn h_m(store: &ParamStore, cfg: &EncoderConfig, g: &MolGraph) -> Vec<f64> {
    let batch = GraphBatch::new(&[g]).unwrap();
    let mut tape = Tape::new();
    let out = encode(&mut tape, store, cfg, &batch, BnMode::Eval, None, None).unwrap();
    tape.value(out.molecules).data().to_vec()
}

pub fn random_small_graph(r: &mut impl Rng) -> MolGraph {
    let n = r.random_range(1..=4);
    let atoms = (0..n)
        .map(|_| AtomFeat {
            atomic_number_index: r.random_range(0..119),
            chirality_index: r.random_range(0..4),
        })
        .collect();
    let feat = |r: &mut dyn rand::RngCore| BondFeat {
        bond_type_index: r.random_range(0..4),
        bond_direction_index: r.random_range(0..3),
    };
    let mut bonds: Vec<Bond> = (1..n)
        .map(|i| Bond {
            i: r.random_range(0..i),
            j: i,
            feat: feat(r),
        })
        .collect();
    if n >= 3 && r.random_bool(0.5) {
        let present = |i, j| bonds.iter().any(|b: &Bond| (b.i, b.j) == (i, j));
        if let Some((i, j)) = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .find(|&(i, j)| !present(i, j))
        {
            bonds.push(Bond { i, j, feat: feat(r) });
        }
    }
    MolGraph::new(atoms, bonds).unwrap()
}

fn row(t: &Tensor, r: usize) -> Vec<f64> {
    t.row(r).to_vec()
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// First-layer output written out directly from the update rule.
pub fn hand_layer(store: &ParamStore, cfg: &EncoderConfig, g: &MolGraph) -> Vec<Vec<f64>> {
    let get = |n: &str| store.get(n).unwrap().clone();
    let (t0, t1) = (get(&atom_table(0)), get(&atom_table(1)));
    let (b0, b1) = (get(&bond_table(0, 0)), get(&bond_table(0, 1)));
    let p = layer_prefix(0);
    let (w0, c0) = (get(&format!("{p}.mlp.0.w")), get(&format!("{p}.mlp.0.b")));
    let (w1, c1) = (get(&format!("{p}.mlp.1.w")), get(&format!("{p}.mlp.1.b")));
    let (gamma, beta) = (get(&format!("{p}.bn.gamma")), get(&format!("{p}.bn.beta")));
    let (rm, rv) = (
        get(&format!("{p}.bn.running_mean")),
        get(&format!("{p}.bn.running_var")),
    );
    let h0: Vec<Vec<f64>> = g
        .atoms()
        .iter()
        .map(|a| {
            let mut v = row(&t0, a.atomic_number_index);
            add(&mut v, t1.row(a.chirality_index));
            v
        })
        .collect();
    let adj = g.adjacency();
    (0..g.num_atoms())
        .map(|v| {
            let mut agg = h0[v].clone();
            for &u in &adj[v] {
                add(&mut agg, &h0[u]);
            }
            for b in g.bonds().iter().filter(|b| b.i == v || b.j == v) {
                add(&mut agg, b0.row(b.feat.bond_type_index));
                add(&mut agg, b1.row(b.feat.bond_direction_index));
            }
            let hidden: Vec<f64> = (0..cfg.d1)
                .map(|j| {
                    let s: f64 = (0..cfg.d).map(|i| agg[i] * w0.data()[i * cfg.d1 + j]).sum::<f64>() + c0.data()[j];
                    s.max(0.0)
                })
                .collect();
            (0..cfg.d)
                .map(|k| {
                    let z: f64 = (0..cfg.d1).map(|j| hidden[j] * w1.data()[j * cfg.d + k]).sum::<f64>() + c1.data()[k];
                    let xhat = (z - rm.data()[k]) / rv.data()[k].max(NORM_EPS).sqrt();
                    (gamma.data()[k] * xhat + beta.data()[k]).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// A fresh adapter's residual branch is exactly zero and its output is
/// exactly `LN(h)`.
pub fn fresh_adapter_is_identity_norm(r: &mut impl Rng, context: bool) -> bool {
    let d = r.random_range(3..9);
    let d2 = r.random_range(1..d);
    let enc = EncoderConfig::new(d, d + 2, 1);
    let mut store = ParamStore::new();
    let cfg = AdapterConfig {
        d,
        d2,
        context_enabled: context,
    };
    let set = attach_fresh(&mut store, &enc, cfg, r).unwrap();
    let n = r.random_range(1..6);
    let h = random_tensor(r, &[n, d], 3.0);
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let ctx = AtomContext {
        molecule: tape.constant(random_tensor(r, &[n, d2], 2.0)),
        property: tape.constant(random_tensor(r, &[n, d2], 2.0)),
    };
    let out = adapter_forward(&mut tape, &store, &set, 0, hv, context.then_some(&ctx)).unwrap();

    // The residual branch on its own.
    let input = if context {
        tape.concat(&[hv, ctx.molecule, ctx.property]).unwrap()
    } else {
        hv
    };
    let w = store.var(&mut tape, "adapter.layer0.down.w").unwrap();
    let b = store.var(&mut tape, "adapter.layer0.down.b").unwrap();
    let z = tape.linear(input, w, Some(b)).unwrap();
    let z = tape.relu(z).unwrap();
    let uw = store.var(&mut tape, "adapter.layer0.up.w").unwrap();
    let ub = store.var(&mut tape, "adapter.layer0.up.b").unwrap();
    let delta = tape.linear(z, uw, Some(ub)).unwrap();
    let zero = tape.value(delta).data().iter().all(|&v| v == 0.0);

    let ones = tape.constant(Tensor::full(&[d], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[d]));
    let ln = tape.layer_norm(hv, ones, zeros).unwrap();
    zero && tape.value(out).bit_eq(tape.value(ln))
}

/// Trainable message-passing parameters found by walking the store.
pub fn enumerate_message_passing(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(n, p)| !p.frozen && n.starts_with("encoder.layer") && (n.contains(".mlp.") || n.contains(".bn.")))
        .map(|(_, p)| p.tensor.len())
        .sum()
}

/// ROC-AUC by counting every positive/negative pair, ties scoring one half.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut pairs = 0.0;
    let mut wins = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += match scores[i].total_cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Penalty value with each `(current, anchor)` pair bound as a leaf.
pub fn penalty_value(mode: PenaltyMode, tables: &[(Tensor, Tensor)], f: Option<&FisherDiag>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = tables
        .iter()
        .enumerate()
        .map(|(i, (cur, _))| tape.bind(&format!("t{i}"), cur.clone()).unwrap())
        .collect();
    let pairs: Vec<_> = vars.iter().zip(tables).map(|(&v, (_, a))| (v, a)).collect();
    let p = penalty_on(&mut tape, &pairs, mode, f).unwrap();
    tape.value(p).data()[0]
}
