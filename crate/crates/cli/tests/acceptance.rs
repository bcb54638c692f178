//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) and exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;
#[path = "../../core/tests/common/gradcases.rs"]
mod gradcases;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::oracles::{
    brute_auc, encoder_store, enumerate_message_passing, fresh_adapter_is_identity_norm, h_m, hand_layer,
    penalty_value, random_small_graph,
};
use common::{dataset, model, random_graph, random_tensor, rng};
use pintune::adapter::{attach_fresh, AdapterConfig};
use pintune::autodiff::{finite_diff_check, finite_diff_check_with, FdOptions, Tape, Var};
use pintune::checkpoint::TuningMode;
use pintune::chem::{sample_episode, Label};
use pintune::consolidation::{estimate_fisher, FisherDiag, PenaltyMode};
use pintune::context::select_seen;
use pintune::encoder::{
    count_parameters, encode, full_message_passing_count, register_encoder, BnMode, CountMode, EncoderConfig,
    GraphBatch,
};
use pintune::meta::{meta_train, predict_episode, roc_auc, EpisodeInput, MetaConfig};
use pintune::optim::OptimizerKind;
use pintune::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for op in gradcases::PRIMITIVES {
        for seed in 0..100 {
            let case = gradcases::primitive_case(op, seed);
            let r = finite_diff_check(&case.bindings, STEP, &case.build).map_err(|e| e.to_string())?;
            check(r.checked > 0 && r.max_rel_error < TOL, || {
                format!("{op} seed {seed}: {r:?}")
            })?;
            worst = worst.max(r.max_rel_error);
            configs += 1;
        }
    }
    for seed in 0..100 {
        let case = gradcases::composition_case(seed);
        let r = finite_diff_check(&case.bindings, STEP, &case.build).map_err(|e| e.to_string())?;
        check(r.max_rel_error < TOL, || format!("composition seed {seed}: {r:?}"))?;
        worst = worst.max(r.max_rel_error);
        configs += 1;
    }
    let opts = FdOptions {
        max_coords_per_leaf: Some(3),
        ..FdOptions::new(STEP)
    };
    for seed in 0..100 {
        let case = gradcases::model_case(seed);
        let r = finite_diff_check_with(&case.bindings, &opts, &case.build).map_err(|e| e.to_string())?;
        check(r.checked > 50 && r.max_rel_error < TOL, || {
            format!("model seed {seed}: {r:?}")
        })?;
        worst = worst.max(r.max_rel_error);
        configs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{configs} configs, max rel error {worst:.2e}, {secs:.1}s"))
}

fn parameter_counts() -> Outcome {
    let grid = [
        (300, 600, 50, 5),
        (4, 8, 2, 1),
        (8, 16, 3, 2),
        (16, 12, 5, 3),
        (10, 40, 9, 4),
        (32, 64, 8, 2),
        (7, 5, 3, 6),
        (20, 30, 1, 3),
    ];
    for &(d, d1, d2, layers) in &grid {
        let tag = format!("({d},{d1},{d2},{layers})");
        let cfg = EncoderConfig::new(d, d1, layers);
        let mut store = ParamStore::new();
        register_encoder(&mut store, &cfg, &mut rng(0)).map_err(|e| e.to_string())?;
        let full = count_parameters(&cfg, d2, CountMode::Full, false);
        check(
            full.message_passing_trainable == layers * (2 * d * d1 + d1 + 3 * d),
            || format!("{tag} full formula"),
        )?;
        check(
            full.message_passing_trainable == full_message_passing_count(d, d1, layers),
            || format!("{tag} full"),
        )?;
        check(
            enumerate_message_passing(&store) == full.message_passing_trainable,
            || format!("{tag} full enum"),
        )?;
        let ac = AdapterConfig {
            d,
            d2,
            context_enabled: false,
        };
        attach_fresh(&mut store, &cfg, ac, &mut rng(1)).map_err(|e| e.to_string())?;
        let pin = count_parameters(&cfg, d2, CountMode::Pin, false);
        check(pin.adapter_trainable == layers * (2 * d * d2 + d2 + 3 * d), || {
            format!("{tag} adapter formula")
        })?;
        check(store.count_trainable("adapter.") == pin.adapter_trainable, || {
            format!("{tag} adapter enum")
        })?;
        let delta = (d1 as i64 - d2 as i64) * layers as i64 * (2 * d as i64 + 1);
        let enumerated = enumerate_message_passing(&store) as i64 - store.count_trainable("adapter.") as i64;
        check(pin.delta_n == delta && enumerated == delta, || format!("{tag} delta N"))?;
    }
    let reference = count_parameters(&EncoderConfig::new(300, 600, 5), 50, CountMode::Pin, false).delta_n;
    check(reference == 1_652_750, || format!("reference delta N {reference}"))?;
    Ok(format!("{} configs exact, reference delta N {reference}", grid.len()))
}

fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, v.to_vec()).unwrap()
}

fn consolidation() -> Outcome {
    // Penalties against hand-summed values on a dyadic 3x4 stub.
    let anchor = m(3, 4, &[0.5, -1.0, 0.0, 2.0, 1.0, 1.0, -0.5, 0.25, 0.0, 0.0, 3.0, -2.0]);
    let delta = [0.5, -0.25, 0.0, 1.0, 0.125, 0.125, 0.5, -0.5, -1.0, 0.5, 0.25, 0.0];
    let cur = Tensor::matrix(3, 4, anchor.data().iter().zip(&delta).map(|(a, d)| a + d).collect()).unwrap();
    let f_hat = m(3, 4, &[1.0, 2.0, 0.5, 0.0, 4.0, 0.25, 1.0, 2.0, 0.0, 8.0, 1.0, 0.5]);
    let f = FisherDiag::from_f_hat(f_hat, 1);
    let t = [(cur, anchor)];
    let im = penalty_value(PenaltyMode::Im, &t, None);
    let fim = penalty_value(PenaltyMode::Fim, &t, Some(&f));
    let efim = penalty_value(PenaltyMode::Efim, &t, Some(&f));
    check(im == 1.578125, || format!("IM {im}"))?;
    check(fim == 1.626953125, || format!("FIM {fim}"))?;
    check(efim == 0.5 * (3.5 * 1.5625 + 7.25 * 0.0625 + 9.5 * 0.0625), || {
        format!("EFIM {efim}")
    })?;

    let mut r = rng(4);
    for _ in 0..100 {
        let rows = r.random_range(1..30);
        let cols = r.random_range(1..20);
        let f = FisherDiag::from_f_hat(random_tensor(&mut r, &[rows, cols], 5.0).map(|v| v * v), 3);
        for (i, &t) in f.f_tilde.iter().enumerate() {
            let s: f64 = f.f_hat.row(i).iter().sum();
            check((t - s).abs() <= 1e-12, || format!("row sum {t} vs {s}"))?;
        }
    }

    let mut s = ParamStore::new();
    s.insert("theta", m(1, 1, &[1.0]), false).unwrap();
    let loss = |tape: &mut Tape, s: &ParamStore, &(x, y): &(f64, f64)| -> pintune::Result<Var> {
        let th = s.var(tape, "theta")?;
        let p = tape.scale(th, x)?;
        let t = tape.constant(m(1, 1, &[y]));
        let r = tape.sub(p, t)?;
        let sq = tape.mul(r, r)?;
        tape.sum_all(sq)
    };
    let toy =
        estimate_fisher(&s, &["theta".to_string()], &[(1.0, 0.0), (2.0, 0.0)], loss).map_err(|e| e.to_string())?;
    check(toy.f_hat.data() == [34.0], || {
        format!("toy Fisher {:?}", toy.f_hat.data())
    })?;

    let d = dataset(80, 3);
    let mut mdl = model(TuningMode::Pin, false, &d, 8);
    let anchor = mdl.anchor().map_err(|e| e.to_string())?;
    let cfg = MetaConfig {
        shots: 2,
        query: 4,
        batch: 2,
        steps: 25,
        inner_lr: 0.1,
        outer_lr: 1e-4,
        lambda: 1e6,
        penalty: PenaltyMode::Im,
        optimizer: OptimizerKind::Adam,
        ..MetaConfig::default()
    };
    meta_train(&mut mdl, &d, None, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let moved = anchor.max_abs_displacement(&mdl.store).map_err(|e| e.to_string())?;
    check(moved < 1e-3, || format!("lambda 1e6 displacement {moved:.3e}"))?;
    Ok(format!(
        "IM {im}, FIM {fim}, EFIM {efim}, toy Fisher 34, lambda 1e6 displacement {moved:.2e}"
    ))
}

fn freezing() -> Outcome {
    let d = dataset(100, 2);
    let mut checked = 0;
    for (mode, context, penalty) in [
        (TuningMode::Pin, true, PenaltyMode::Im),
        (TuningMode::Pin, false, PenaltyMode::None),
        (TuningMode::Frozen, false, PenaltyMode::None),
    ] {
        let mut mdl = model(mode, context, &d, 6);
        let before = mdl.store.clone();
        let cfg = MetaConfig {
            shots: 2,
            query: 4,
            batch: 2,
            steps: 6,
            inner_lr: 0.1,
            outer_lr: 1e-2,
            penalty,
            ..MetaConfig::default()
        };
        meta_train(&mut mdl, &d, None, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
        let message_passing = |n: &&str| n.starts_with("encoder.layer") && (n.contains(".mlp.") || n.contains(".bn."));
        for (name, p) in before.iter().filter(|(n, _)| message_passing(n)) {
            check(p.frozen, || format!("{mode:?}: {name} is trainable"))?;
            check(p.tensor.bit_eq(mdl.store.get(name).unwrap()), || {
                format!("{mode:?}: {name} moved")
            })?;
            checked += 1;
        }
    }
    let mut r = rng(21);
    for trial in 0..100 {
        check(fresh_adapter_is_identity_norm(&mut r, trial % 2 == 0), || {
            format!("adapter trial {trial}")
        })?;
    }
    Ok(format!(
        "{checked} message-passing tensors unchanged over 3 runs, 100 fresh adapters exact"
    ))
}

fn invariance() -> Outcome {
    let cfg = EncoderConfig::new(6, 9, 3);
    let store = encoder_store(&cfg, 1);
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let g = random_graph(&mut r);
        let mut perm: Vec<usize> = (0..g.num_atoms()).collect();
        perm.shuffle(&mut r);
        let p = g.permuted(&perm).unwrap();
        for (x, y) in h_m(&store, &cfg, &g).iter().zip(h_m(&store, &cfg, &p)) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst < 1e-9, || format!("permutation gap {worst:.2e}"))?;
    let one = EncoderConfig::new(5, 7, 1);
    let mut oracle: f64 = 0.0;
    for trial in 0..200 {
        let store = encoder_store(&one, trial);
        let g = random_small_graph(&mut r);
        let batch = GraphBatch::new(&[&g]).unwrap();
        let mut tape = Tape::new();
        let out = encode(&mut tape, &store, &one, &batch, BnMode::Eval, None, None).map_err(|e| e.to_string())?;
        let got = tape.value(out.atoms()).clone();
        for (v, want) in hand_layer(&store, &one, &g).iter().enumerate() {
            for (a, b) in got.row(v).iter().zip(want) {
                oracle = oracle.max((a - b).abs());
            }
        }
    }
    check(oracle < 1e-9, || format!("hand oracle gap {oracle:.2e}"))?;
    Ok(format!(
        "200 molecules, permutation gap {worst:.1e}; hand oracle gap {oracle:.1e}"
    ))
}

fn auc() -> Outcome {
    let mut r = rng(1);
    let mut patterns = 0;
    for n in 1..=8 {
        for trial in 0..10 {
            // Even trials draw from four levels so ties are common.
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        r.random_range(0..4) as f64 / 4.0
                    } else {
                        r.random()
                    }
                })
                .collect();
            for mask in 0u32..(1 << n) {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let (got, want) = (roc_auc(&scores, &labels), brute_auc(&scores, &labels));
                check(got == want, || format!("{scores:?} {labels:?}: {got:?} vs {want:?}"))?;
                patterns += 1;
            }
        }
    }
    Ok(format!("{patterns} labellings agree exactly"))
}

fn leakage() -> Outcome {
    let d = dataset(150, 7);
    let mut mdl = model(TuningMode::Pin, true, &d, 4);
    common::randomise(&mut mdl.store, 9, 0.3);
    let cache = mdl.frozen_features(&d).map_err(|e| e.to_string())?;
    for seed in 0..50u64 {
        let target = d.test_properties()[seed as usize % d.test_properties().len()];
        let ep = sample_episode(&d, target, 2, 6, seed).map_err(|e| e.to_string())?;
        let seen = select_seen(&d, target, 4, &mut rng(seed));
        let mut flipped = d.clone();
        for &q in &ep.query {
            let l = match d.label(q, target) {
                Label::Positive => Label::Negative,
                _ => Label::Positive,
            };
            flipped.set_label(q, target, l);
        }
        let a = EpisodeInput::new(&mdl.spec, &d, ep.clone(), &seen, &cache).map_err(|e| e.to_string())?;
        let b = EpisodeInput::new(&mdl.spec, &flipped, ep, &seen, &cache).map_err(|e| e.to_string())?;
        check(a.graph == b.graph, || format!("episode {seed}: context graph differs"))?;
        let pa = predict_episode(&mdl.spec, &mdl.store, &a, 2, 0.1, 4).map_err(|e| e.to_string())?;
        let pb = predict_episode(&mdl.spec, &mdl.store, &b, 2, 0.1, 4).map_err(|e| e.to_string())?;
        check(pa.context.unwrap().bit_eq(&pb.context.unwrap()), || {
            format!("episode {seed}: C differs")
        })?;
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        check(bits(&pa.scores) == bits(&pb.scores), || {
            format!("episode {seed}: scores differ")
        })?;
    }
    Ok("50 episodes bitwise identical".into())
}

const ARTIFACTS: [&str; 8] = [
    "pre.json",
    "fisher.json",
    "pin.json",
    "pin.jsonl",
    "frozen.json",
    "frozen.jsonl",
    "pin_report.json",
    "frozen_report.json",
];

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json")
}

/// The full synthetic pipeline inside `dir`, all paths relative so reruns
/// in another directory write identical bytes.
fn pipeline(dir: &Path) -> Result<Duration, String> {
    std::fs::copy(config_path(), dir.join("cfg.json")).map_err(|e| e.to_string())?;
    let data = ["--data", "ds/data.jsonl"];
    let tasks = ["--tasks", "ds/tasks.json"];
    let cfg = ["--config", "cfg.json"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--out-dir", "ds", "--molecules", "400"],
        [&["pretrain"][..], &data, &["--out", "pre.json"], &cfg].concat(),
        [
            &["fisher"][..],
            &data,
            &["--ckpt", "pre.json", "--out", "fisher.json"],
            &cfg,
        ]
        .concat(),
        [
            &["tune"][..],
            &data,
            &tasks,
            &[
                "--ckpt",
                "pre.json",
                "--fisher",
                "fisher.json",
                "--out",
                "pin.json",
                "--log",
                "pin.jsonl",
            ],
            &["--mode", "pin", "--penalty", "efim"],
            &cfg,
        ]
        .concat(),
        [
            &["tune"][..],
            &data,
            &tasks,
            &["--ckpt", "pre.json", "--out", "frozen.json", "--log", "frozen.jsonl"],
            &["--mode", "frozen", "--penalty", "none"],
            &cfg,
        ]
        .concat(),
        [
            &["eval"][..],
            &data,
            &tasks,
            &["--ckpt", "pin.json", "--report", "pin_report.json"],
            &cfg,
        ]
        .concat(),
        [
            &["eval"][..],
            &data,
            &tasks,
            &["--ckpt", "frozen.json", "--report", "frozen_report.json"],
            &cfg,
        ]
        .concat(),
    ];
    let start = Instant::now();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_pintune"))
            .current_dir(dir)
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "`pintune {}` failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(start.elapsed())
}

fn mean_auc(path: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let props = v["properties"].as_object().ok_or("report has no properties")?;
    let aucs: Vec<f64> = props.values().filter_map(|p| p["mean_auc"].as_f64()).collect();
    if aucs.len() != props.len() || aucs.is_empty() {
        return Err("malformed report".into());
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn end_to_end(dir: &Path) -> Outcome {
    let took = pipeline(dir)?;
    let pin = mean_auc(&dir.join("pin_report.json"))?;
    let frozen = mean_auc(&dir.join("frozen_report.json"))?;
    let mins = took.as_secs_f64() / 60.0;
    let summary = format!("pin {pin:.4}, frozen baseline {frozen:.4}, {mins:.1} min");
    check(pin >= 0.85, || format!("{summary}: pin below 0.85"))?;
    check(pin >= frozen, || format!("{summary}: pin below baseline"))?;
    check(mins < 15.0, || format!("{summary}: too slow"))?;
    Ok(summary)
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    pipeline(second)?;
    for name in ARTIFACTS {
        let a = std::fs::read(first.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(second.join(name)).map_err(|e| format!("{name}: {e}"))?;
        check(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical", ARTIFACTS.len()))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {n} {name}: PASS ({detail}) [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("criterion {n} {name}: FAIL ({detail}) [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    // Criterion numbers on the command line select a subset; 9 implies 8.
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n) || (n == 8 && picked.contains(&9));
    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    let criteria: [Criterion; 9] = [
        ("gradient suite", Box::new(gradients)),
        ("parameter counts", Box::new(parameter_counts)),
        ("embedding consolidation", Box::new(consolidation)),
        ("freezing and init", Box::new(freezing)),
        ("encoder invariance", Box::new(invariance)),
        ("ROC-AUC oracle", Box::new(auc)),
        ("leakage freedom", Box::new(leakage)),
        ("synthetic end-to-end", Box::new(|| end_to_end(first.path()))),
        ("determinism", Box::new(|| determinism(first.path(), second.path()))),
    ];
    let mut passed = 0;
    let mut total = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if wanted(i + 1) {
            total += 1;
            passed += run(i + 1, name, f) as usize;
        }
    }
    println!("{passed} of {total} criteria passed");
    if passed < total {
        std::process::exit(1);
    }
}
