//! Randomised finite-difference cases, one per tape primitive plus random
//! three-layer compositions.

use std::collections::BTreeMap;

use pintune::autodiff::{Tape, Var};
use pintune::checkpoint::{HeadConfig, TuningMode};
use pintune::chem::{sample_episode, Dataset};
use pintune::consolidation::{penalty, FisherDiag, PenaltyMode};
use pintune::context::select_seen;
use pintune::encoder::EncoderConfig;
use pintune::meta::{context_bundle, eligible_properties, init_pretraining, score_molecules, EpisodeInput, Model};
use pintune::synthetic::{synthetic_dataset, SyntheticConfig};
use pintune::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Tape) -> Result<Var>>;

pub struct Case {
    pub bindings: BTreeMap<String, Tensor>,
    pub build: Build,
}

pub const PRIMITIVES: [&str; 19] = [
    "matmul",
    "add",
    "add_row",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "concat",
    "gather",
    "row_sums",
    "mean_of_rows",
    "sum_all",
    "layer_norm",
    "batch_norm_train",
    "batch_norm_eval",
    "bce_with_logits",
    "softmax_cross_entropy",
    "sub",
    "linear",
];

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

/// Reduce any output to a scalar through a fixed random weighting.
fn weigh(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn leaf(tape: &Tape, name: &str) -> Result<Var> {
    tape.leaf(name)
}

fn put(b: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) {
    b.insert(name.to_string(), rand_t(rng, shape));
}

/// Case exercising one primitive with random shapes and values.
pub fn primitive_case(op: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..5);
    let m = rng.random_range(2..5);
    let k = rng.random_range(1..4);
    let mut b = BTreeMap::new();
    let build: Build = match op {
        "matmul" => {
            put(&mut b, &mut rng, "a", &[n, k]);
            put(&mut b, &mut rng, "b", &[k, m]);
            let w = rand_t(&mut rng, &[n, m]);
            Box::new(move |t| {
                let o = t.matmul(leaf(t, "a")?, leaf(t, "b")?)?;
                weigh(t, o, &w)
            })
        }
        "add" | "mul" | "sub" => {
            put(&mut b, &mut rng, "a", &[n, m]);
            put(&mut b, &mut rng, "b", &[n, m]);
            let w = rand_t(&mut rng, &[n, m]);
            let op = op.to_string();
            Box::new(move |t| {
                let (x, y) = (leaf(t, "a")?, leaf(t, "b")?);
                let o = match op.as_str() {
                    "add" => t.add(x, y)?,
                    "mul" => t.mul(x, y)?,
                    _ => t.sub(x, y)?,
                };
                weigh(t, o, &w)
            })
        }
        "add_row" => {
            put(&mut b, &mut rng, "x", &[n, m]);
            put(&mut b, &mut rng, "r", &[m]);
            let w = rand_t(&mut rng, &[n, m]);
            Box::new(move |t| {
                let o = t.add_row(leaf(t, "x")?, leaf(t, "r")?)?;
                weigh(t, o, &w)
            })
        }
        "scale" => {
            put(&mut b, &mut rng, "x", &[n, m]);
            let f = rng.random_range(-3.0..3.0);
            let w = rand_t(&mut rng, &[n, m]);
            Box::new(move |t| {
                let o = t.scale(leaf(t, "x")?, f)?;
                weigh(t, o, &w)
            })
        }
        "relu" | "sigmoid" => {
            put(&mut b, &mut rng, "x", &[n, m]);
            let w = rand_t(&mut rng, &[n, m]);
            let relu = op == "relu";
            Box::new(move |t| {
                let x = leaf(t, "x")?;
                let o = if relu { t.relu(x)? } else { t.sigmoid(x)? };
                weigh(t, o, &w)
            })
        }
        "concat" => {
            put(&mut b, &mut rng, "a", &[n, m]);
            put(&mut b, &mut rng, "b", &[n, k]);
            let w = rand_t(&mut rng, &[n, m + k]);
            Box::new(move |t| {
                let o = t.concat(&[leaf(t, "a")?, leaf(t, "b")?])?;
                weigh(t, o, &w)
            })
        }
        "gather" => {
            put(&mut b, &mut rng, "table", &[n, m]);
            let idx: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
            let w = rand_t(&mut rng, &[idx.len(), m]);
            Box::new(move |t| {
                let o = t.gather(leaf(t, "table")?, &idx)?;
                weigh(t, o, &w)
            })
        }
        "row_sums" | "mean_of_rows" => {
            put(&mut b, &mut rng, "x", &[n, m]);
            let rows = op == "row_sums";
            let w = rand_t(&mut rng, &[if rows { n } else { m }]);
            Box::new(move |t| {
                let x = leaf(t, "x")?;
                let o = if rows { t.row_sums(x)? } else { t.mean_of_rows(x)? };
                weigh(t, o, &w)
            })
        }
        "sum_all" => {
            put(&mut b, &mut rng, "x", &[n, m]);
            Box::new(move |t| {
                let x = leaf(t, "x")?;
                let sq = t.mul(x, x)?;
                t.sum_all(sq)
            })
        }
        "layer_norm" | "batch_norm_train" | "batch_norm_eval" => {
            put(&mut b, &mut rng, "x", &[n, m]);
            put(&mut b, &mut rng, "gamma", &[m]);
            put(&mut b, &mut rng, "beta", &[m]);
            let rm: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..2.0)).collect();
            let w = rand_t(&mut rng, &[n, m]);
            let op = op.to_string();
            Box::new(move |t| {
                let (x, g, be) = (leaf(t, "x")?, leaf(t, "gamma")?, leaf(t, "beta")?);
                let o = match op.as_str() {
                    "layer_norm" => t.layer_norm(x, g, be)?,
                    "batch_norm_train" => t.batch_norm_train(x, g, be)?.0,
                    _ => t.batch_norm_eval(x, g, be, &rm, &rv)?,
                };
                weigh(t, o, &w)
            })
        }
        "bce_with_logits" => {
            put(&mut b, &mut rng, "z", &[n, 1]);
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            Box::new(move |t| t.bce_with_logits(leaf(t, "z")?, &y))
        }
        "softmax_cross_entropy" => {
            put(&mut b, &mut rng, "z", &[n, m]);
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            Box::new(move |t| t.softmax_cross_entropy(leaf(t, "z")?, &y))
        }
        "linear" => {
            put(&mut b, &mut rng, "x", &[n, k]);
            put(&mut b, &mut rng, "w", &[k, m]);
            put(&mut b, &mut rng, "bias", &[m]);
            let w = rand_t(&mut rng, &[n, m]);
            Box::new(move |t| {
                let o = t.linear(leaf(t, "x")?, leaf(t, "w")?, Some(leaf(t, "bias")?))?;
                weigh(t, o, &w)
            })
        }
        other => panic!("no case for primitive `{other}`"),
    };
    Case { bindings: b, build }
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    LinearRelu,
    LinearSigmoid,
    LayerNorm,
    BatchNorm,
    Gate,
    Widen,
    Regather,
}

/// Three random stages on a `[n, m]` input, then a random loss head.
pub fn composition_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..6);
    let m = rng.random_range(2..5);
    let mut b = BTreeMap::new();
    b.insert("x".to_string(), rand_t(&mut rng, &[n, m]));
    let all = [
        Stage::LinearRelu,
        Stage::LinearSigmoid,
        Stage::LayerNorm,
        Stage::BatchNorm,
        Stage::Gate,
        Stage::Widen,
        Stage::Regather,
    ];
    let mut stages = Vec::new();
    for s in 0..3 {
        let st = all[rng.random_range(0..all.len())];
        match st {
            Stage::Widen => {
                b.insert(format!("w{s}"), rand_t(&mut rng, &[2 * m, m]));
                b.insert(format!("b{s}"), rand_t(&mut rng, &[m]));
            }
            Stage::LinearRelu | Stage::LinearSigmoid => {
                b.insert(format!("w{s}"), rand_t(&mut rng, &[m, m]));
                b.insert(format!("b{s}"), rand_t(&mut rng, &[m]));
            }
            Stage::LayerNorm | Stage::BatchNorm => {
                b.insert(format!("g{s}"), rand_t(&mut rng, &[m]));
                b.insert(format!("b{s}"), rand_t(&mut rng, &[m]));
            }
            Stage::Gate => {
                b.insert(format!("g{s}"), rand_t(&mut rng, &[n, m]));
            }
            Stage::Regather => {}
        }
        let perm: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        stages.push((st, perm));
    }
    let softmax = rng.random_bool(0.5);
    let y_bce: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let y_ce: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    let head = rand_t(&mut rng, &[m, 1]);
    let build: Build = Box::new(move |t| {
        let mut h = t.leaf("x")?;
        for (s, (st, perm)) in stages.iter().enumerate() {
            h = match st {
                Stage::LinearRelu | Stage::LinearSigmoid => {
                    let (w, bias) = (t.leaf(&format!("w{s}"))?, t.leaf(&format!("b{s}"))?);
                    let z = t.linear(h, w, Some(bias))?;
                    if matches!(st, Stage::LinearRelu) {
                        t.relu(z)?
                    } else {
                        t.sigmoid(z)?
                    }
                }
                Stage::LayerNorm => {
                    let (g, bias) = (t.leaf(&format!("g{s}"))?, t.leaf(&format!("b{s}"))?);
                    t.layer_norm(h, g, bias)?
                }
                Stage::BatchNorm => {
                    let (g, bias) = (t.leaf(&format!("g{s}"))?, t.leaf(&format!("b{s}"))?);
                    t.batch_norm_train(h, g, bias)?.0
                }
                Stage::Gate => {
                    let g = t.leaf(&format!("g{s}"))?;
                    let g = t.sigmoid(g)?;
                    t.mul(h, g)?
                }
                Stage::Widen => {
                    let (w, bias) = (t.leaf(&format!("w{s}"))?, t.leaf(&format!("b{s}"))?);
                    let sq = t.mul(h, h)?;
                    let both = t.concat(&[h, sq])?;
                    let z = t.matmul(both, w)?;
                    let z = t.add_row(z, bias)?;
                    let half = t.scale(z, 0.5)?;
                    t.sub(h, half)?
                }
                Stage::Regather => t.gather(h, perm)?,
            };
        }
        if softmax {
            t.softmax_cross_entropy(h, &y_ce)
        } else {
            let w = t.constant(head.clone());
            let z = t.matmul(h, w)?;
            t.bce_with_logits(z, &y_bce)
        }
    });
    Case { bindings: b, build }
}

/// Query loss of a context-conditioned adapter model plus an embedding
/// penalty, with every trainable tensor as a leaf. All parameters get random
/// values so adapters, context and penalty all carry gradient.
pub fn model_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: &'static Dataset = Box::leak(Box::new(
        synthetic_dataset(&SyntheticConfig {
            molecules: 60,
            seed: 11,
            missing_rate: 0.1,
        })
        .expect("synthetic data"),
    ));
    let enc = EncoderConfig::new(5, 7, 2);
    let store = init_pretraining(&enc, &mut rng).expect("init");
    let head = HeadConfig {
        mode: TuningMode::Pin,
        d2: 2,
        context: rng.random_bool(0.75),
        max_seen: 2,
        num_properties: d.num_properties(),
    };
    let mut model = Model::from_pretrained(enc.clone(), store, head, &mut rng).expect("model");
    for name in model.store.trainable_names() {
        let shape = model.store.get(&name).unwrap().shape().to_vec();
        model.store.assign(&name, rand_t(&mut rng, &shape)).unwrap();
    }
    let cache = model.frozen_features(d).expect("features");
    let eligible = eligible_properties(d, 2, 3);
    let target = eligible[rng.random_range(0..eligible.len())];
    let episode = sample_episode(d, target, 2, 3, rng.random()).expect("episode");
    let seen = select_seen(d, target, 2, &mut rng);
    let input = EpisodeInput::new(&model.spec, d, episode, &seen, &cache).expect("input");
    let targets = input.query_targets().expect("labels");
    let anchor = model.anchor().expect("anchor");
    let mut f_hat = Tensor::zeros(&[enc.embedding_rows(), enc.d]);
    for v in f_hat.data_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let fisher = FisherDiag::from_f_hat(f_hat, 1);
    let mode = [PenaltyMode::Im, PenaltyMode::Fim, PenaltyMode::Efim][rng.random_range(0..3)];
    let lambda = rng.random_range(0.01..1.0);
    let bindings = model
        .store
        .trainable_names()
        .into_iter()
        .map(|n| {
            let t = model.store.get(&n).unwrap().clone();
            (n, t)
        })
        .collect();
    let build: Build = Box::new(move |t| {
        let bundle = context_bundle(t, &model.spec, &model.store, &input)?;
        let scored = score_molecules(
            t,
            &model.spec,
            &model.store,
            d,
            input.episode.target,
            &input.episode.query,
            bundle.as_ref(),
        )?;
        let loss = t.bce_with_logits(scored.logits, &targets)?;
        let pen = penalty(t, &model.store, &anchor, mode, Some(&fisher))?;
        let pen = t.scale(pen, lambda)?;
        t.add(loss, pen)
    });
    Case { bindings, build }
}
