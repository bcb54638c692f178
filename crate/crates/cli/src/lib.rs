//! Command implementations behind the `pintune` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use pintune::checkpoint::{Checkpoint, HeadConfig, ModelConfig, TuningMode};
use pintune::chem::{derive_seed, load_dataset, load_molecules, Dataset};
use pintune::consolidation::{read_fisher, write_fisher, PenaltyMode};
use pintune::encoder::{check_encoder_shapes, count_parameters, CountMode, EncoderConfig};
use pintune::meta::{
    evaluate, meta_train, pretrain_masked_atoms, pretraining_fisher, EvalConfig, MetaConfig, Model, PretrainConfig,
};
use pintune::optim::OptimizerKind;
use pintune::synthetic::{synthetic_dataset, SyntheticConfig};
use pintune::ErrorClass;

/// Every tunable knob of a run. Loaded from a flat JSON file, then
/// overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    /// Encoder widths; when tuning or evaluating they must match the checkpoint.
    pub d: Option<usize>,
    pub d1: Option<usize>,
    pub layers: Option<usize>,

    pub d2: usize,
    pub mode: TuningMode,
    pub context: bool,
    pub max_seen: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub mask_rate: f64,
    pub pretrain_lr: f64,

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

    pub eval_seeds: usize,
    pub eval_chunk: usize,

    pub data: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub fisher: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub dump_embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        let pre = PretrainConfig::default();
        let eval = EvalConfig::default();
        Self {
            seed: 0,
            threads: 1,
            d: None,
            d1: None,
            layers: None,
            d2: 50,
            mode: TuningMode::Pin,
            context: true,
            max_seen: 8,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch,
            mask_rate: pre.mask_rate,
            pretrain_lr: pre.lr,
            shots: meta.shots,
            query: meta.query,
            batch: meta.batch,
            steps: meta.steps,
            inner_steps: meta.inner_steps,
            inner_lr: meta.inner_lr,
            outer_lr: meta.outer_lr,
            lambda: meta.lambda,
            penalty: meta.penalty,
            optimizer: meta.optimizer,
            eval_seeds: eval.seeds,
            eval_chunk: eval.chunk,
            data: None,
            tasks: None,
            ckpt: None,
            fisher: None,
            out: None,
            log: None,
            report: None,
            dump_embeddings: None,
        }
    }
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        let def = EncoderConfig::default();
        EncoderConfig::new(
            self.d.unwrap_or(def.d),
            self.d1.unwrap_or(def.d1),
            self.layers.unwrap_or(def.layers),
        )
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            mask_rate: self.mask_rate,
            lr: self.pretrain_lr,
            seed: self.seed,
        }
    }

    pub fn meta(&self) -> MetaConfig {
        MetaConfig {
            shots: self.shots,
            query: self.query,
            batch: self.batch,
            steps: self.steps,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            lambda: self.lambda,
            penalty: self.penalty,
            optimizer: self.optimizer,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            shots: self.shots,
            seeds: self.eval_seeds,
            seed: self.seed,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            chunk: self.eval_chunk,
            threads: self.threads,
        }
    }

    pub fn head(&self, num_properties: usize) -> HeadConfig {
        HeadConfig {
            mode: self.mode,
            d2: self.d2,
            context: self.context && self.mode == TuningMode::Pin,
            max_seen: self.max_seen,
            num_properties,
        }
    }

    /// Reject checkpoints whose encoder disagrees with any width given here.
    fn check_checkpoint(&self, ckpt: &Checkpoint) -> pintune::Result<()> {
        let mut expected = ckpt.config.encoder.clone();
        expected.d = self.d.unwrap_or(expected.d);
        expected.d1 = self.d1.unwrap_or(expected.d1);
        expected.layers = self.layers.unwrap_or(expected.layers);
        check_encoder_shapes(&ckpt.store, &expected)
    }

    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pintune::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "pintune",
    version,
    about = "Few-shot molecular property prediction with adapter tuning"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// Flat JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override any configuration field, e.g. `--set d2=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic motif dataset (data.jsonl, tasks.json).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 400)]
        molecules: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Masked-atom pre-training.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the embedding Fisher diagonal of a pre-trained checkpoint.
    Fisher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Episodic meta-training on the training properties.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        fisher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// pin or frozen.
        #[arg(long)]
        mode: Option<TuningMode>,
        /// none, im, fim or efim.
        #[arg(long)]
        penalty: Option<PenaltyMode>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// ROC-AUC on the test properties over several support draws.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        report: PathBuf,
        /// Write query-molecule representations as JSON Lines.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trainable-parameter report for full tuning versus adapter tuning.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Print the reports as JSON.
        #[arg(long)]
        json: bool,
    },
}

/// Load `--config`, apply `--set` pairs and the typed flags.
pub fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if !common.set.is_empty() {
        let mut value = cfg.to_value();
        let map = value.as_object_mut().expect("config is an object");
        for pair in &common.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.to_string(), parsed);
        }
        cfg = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("--set: {e}")))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t.max(1);
    }
    apply(&mut cfg);
    log::info!("resolved config: {}", cfg.to_value());
    Ok(cfg)
}

fn write_json_line<W: Write>(w: &mut W, path: &Path, v: &impl Serialize) -> CliResult<()> {
    serde_json::to_writer(&mut *w, v).map_err(|e| pintune::Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(pintune::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?))
}

fn read_dataset(data: &Path, tasks: &Path) -> CliResult<Dataset> {
    let (d, skipped) = load_dataset(data, tasks)?;
    if skipped > 0 {
        log::warn!("skipped {skipped} molecules with unsupported SMILES");
    }
    Ok(d)
}

pub fn cmd_synth(out_dir: &Path, molecules: usize, seed: u64) -> CliResult<()> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let cfg = SyntheticConfig {
        molecules,
        seed,
        ..SyntheticConfig::default()
    };
    let d = synthetic_dataset(&cfg)?;
    d.write(&out_dir.join("data.jsonl"), &out_dir.join("tasks.json"))?;
    println!(
        "wrote {} molecules, {} properties to {}",
        d.len(),
        d.num_properties(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<()> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let molecules = match &cfg.tasks {
        Some(tasks) => read_dataset(data, tasks)?.molecules,
        None => load_molecules(data)?.0,
    };
    let graphs: Vec<_> = molecules.iter().map(|m| &m.graph).collect();
    let encoder = cfg.encoder();
    let (store, losses) = pretrain_masked_atoms(&graphs, &encoder, &cfg.pretrain())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("pre-training loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    let ckpt = Checkpoint {
        config: ModelConfig { encoder, head: None },
        store,
        run_config: Some(cfg.to_value()),
    };
    ckpt.save(out)?;
    Ok(())
}

fn load_pretrained(cfg: &RunConfig, path: &Path) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    cfg.check_checkpoint(&ckpt)?;
    Ok(ckpt)
}

pub fn cmd_fisher(cfg: &RunConfig) -> CliResult<()> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let ckpt_path = cfg
        .ckpt
        .as_deref()
        .ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let ckpt = load_pretrained(cfg, ckpt_path)?;
    let (molecules, _) = load_molecules(data)?;
    let graphs: Vec<_> = molecules.iter().map(|m| &m.graph).collect();
    let fisher = pretraining_fisher(&ckpt.store, &ckpt.config.encoder, &graphs, cfg.mask_rate, cfg.seed)?;
    write_fisher(out, &fisher, Some(&cfg.to_value()))?;
    println!(
        "Fisher diagonal over {} molecules, {} embedding rows",
        fisher.samples,
        fisher.rows()
    );
    Ok(())
}

pub fn cmd_tune(cfg: &RunConfig) -> CliResult<()> {
    let meta = cfg.meta();
    meta.validate()?;
    if meta.penalty.needs_fisher() && cfg.fisher.is_none() {
        return Err(CliError::Usage(format!(
            "penalty mode {:?} needs --fisher",
            meta.penalty
        )));
    }
    let need =
        |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| CliError::Usage(format!("{flag} is required")));
    let (data, tasks, ckpt_path) = (
        need(&cfg.data, "--data")?,
        need(&cfg.tasks, "--tasks")?,
        need(&cfg.ckpt, "--ckpt")?,
    );
    let (out, log_path) = (need(&cfg.out, "--out")?, need(&cfg.log, "--log")?);

    let d = read_dataset(&data, &tasks)?;
    let ckpt = load_pretrained(cfg, &ckpt_path)?;
    if ckpt.config.head.is_some() {
        return Err(CliError::Usage(format!(
            "{} is already tuned; start from a pre-trained checkpoint",
            ckpt_path.display()
        )));
    }
    let fisher = match &cfg.fisher {
        Some(p) if meta.penalty.needs_fisher() => {
            let f = read_fisher(p)?;
            f.check_config(&ckpt.config.encoder)?;
            Some(f)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut model = Model::from_pretrained(
        ckpt.config.encoder.clone(),
        ckpt.store,
        cfg.head(d.num_properties()),
        &mut rng,
    )?;
    let mut log = create(&log_path)?;
    write_json_line(&mut log, &log_path, &json!({ "run_config": cfg.to_value() }))?;
    let records = meta_train(&mut model, &d, fisher.as_ref(), &meta, |rec| {
        write_json_line(&mut log, &log_path, rec).map_err(|e| match e {
            CliError::Core(c) => c,
            CliError::Usage(m) => pintune::Error::Config(m),
        })
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    model.checkpoint(Some(cfg.to_value())).save(&out)?;
    if let (Some(a), Some(b)) = (records.first(), records.last()) {
        println!(
            "query loss {:.4} -> {:.4} over {} steps; embedding displacement {:.3e}",
            a.query_loss,
            b.query_loss,
            records.len(),
            b.emb_displacement_norm
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let need =
        |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| CliError::Usage(format!("{flag} is required")));
    let (data, tasks, ckpt_path) = (
        need(&cfg.data, "--data")?,
        need(&cfg.tasks, "--tasks")?,
        need(&cfg.ckpt, "--ckpt")?,
    );
    let report_path = need(&cfg.report, "--report")?;
    let d = read_dataset(&data, &tasks)?;
    let ckpt = load_pretrained(cfg, &ckpt_path)?;
    let model = Model::from_checkpoint(ckpt)?;
    let out = evaluate(&model, &d, &cfg.eval(), cfg.dump_embeddings.is_some())?;
    let report = json!({ "run_config": cfg.to_value(), "properties": out.properties });
    let mut w = create(&report_path)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| pintune::Error::Json {
        path: report_path.clone(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| io_err(&report_path, e))?;
    w.flush().map_err(|e| io_err(&report_path, e))?;
    if let Some(p) = &cfg.dump_embeddings {
        let mut w = create(p)?;
        write_json_line(&mut w, p, &json!({ "run_config": cfg.to_value() }))?;
        for rec in &out.embeddings {
            write_json_line(&mut w, p, rec)?;
        }
        w.flush().map_err(|e| io_err(p, e))?;
    }
    for (name, r) in &out.properties {
        println!(
            "{name}: ROC-AUC {:.4} ± {:.4} over {} seeds",
            r.mean_auc,
            r.std_auc,
            r.per_seed.len()
        );
    }
    println!("mean ROC-AUC {:.4}", out.overall_mean());
    Ok(())
}

/// `1652750` -> `1,652,750`.
pub fn group_digits(n: i64) -> String {
    let digits = n.unsigned_abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        out.insert(0, '-');
    }
    out
}

pub fn cmd_count_params(cfg: &RunConfig, as_json: bool) -> CliResult<()> {
    let enc = cfg.encoder();
    enc.validate()?;
    let context = cfg.context;
    let full = count_parameters(&enc, cfg.d2, CountMode::Full, context);
    let pin = count_parameters(&enc, cfg.d2, CountMode::Pin, context);
    let plain = count_parameters(&enc, cfg.d2, CountMode::Pin, false);
    if as_json {
        let v = json!({ "full": full, "pin": pin, "pin_without_context": plain });
        println!("{}", serde_json::to_string_pretty(&v).expect("report serialises"));
        return Ok(());
    }
    let g = |n: usize| group_digits(n as i64);
    println!(
        "encoder: d={} d1={} L={}; adapter bottleneck d2={}",
        enc.d, enc.d1, enc.layers, cfg.d2
    );
    println!(
        "full fine-tuning, message-passing trainables: {}",
        g(full.message_passing_trainable)
    );
    println!(
        "adapter trainables without context:          {}",
        g(plain.adapter_trainable)
    );
    println!(
        "delta N without context:                     {}",
        group_digits(plain.delta_n)
    );
    if context {
        println!(
            "adapter trainables with context:             {}",
            g(pin.adapter_trainable)
        );
        println!(
            "delta N with context:                        {}",
            group_digits(pin.delta_n)
        );
        println!("context widening adds:                       {}", g(pin.context_extra));
    }
    println!(
        "embedding trainables (exact, vocab rows x d): {}",
        g(pin.embedding_trainable_exact)
    );
    println!(
        "embedding formula (families x d):             {}",
        g(pin.embedding_family_formula)
    );
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            out_dir,
            molecules,
            seed,
        } => cmd_synth(&out_dir, molecules, seed),
        Command::Pretrain {
            data,
            tasks,
            out,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                c.data = Some(data);
                c.tasks = tasks;
                c.out = Some(out);
            })?;
            cmd_pretrain(&cfg)
        }
        Command::Fisher {
            data,
            ckpt,
            out,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                c.data = Some(data);
                c.ckpt = Some(ckpt);
                c.out = Some(out);
            })?;
            cmd_fisher(&cfg)
        }
        Command::Tune {
            data,
            tasks,
            ckpt,
            fisher,
            out,
            log,
            mode,
            penalty,
            lambda,
            steps,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                c.data = Some(data);
                c.tasks = Some(tasks);
                c.ckpt = Some(ckpt);
                if fisher.is_some() {
                    c.fisher = fisher;
                }
                c.out = Some(out);
                c.log = Some(log);
                c.mode = mode.unwrap_or(c.mode);
                c.penalty = penalty.unwrap_or(c.penalty);
                c.lambda = lambda.unwrap_or(c.lambda);
                c.steps = steps.unwrap_or(c.steps);
            })?;
            cmd_tune(&cfg)
        }
        Command::Eval {
            data,
            tasks,
            ckpt,
            shots,
            seeds,
            report,
            dump_embeddings,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                c.data = Some(data);
                c.tasks = Some(tasks);
                c.ckpt = Some(ckpt);
                c.shots = shots.unwrap_or(c.shots);
                c.eval_seeds = seeds.unwrap_or(c.eval_seeds);
                c.report = Some(report);
                if dump_embeddings.is_some() {
                    c.dump_embeddings = dump_embeddings;
                }
            })?;
            cmd_eval(&cfg)
        }
        Command::CountParams { common, json } => {
            let cfg = resolve(&common, |_| {})?;
            cmd_count_params(&cfg, json)
        }
    }
}
