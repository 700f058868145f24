//! Command-line front end.
//!
//! Every command merges a `key = value` config file (optional) with flag
//! overrides, validates all input paths, and only then starts work. Exit
//! codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::data::{self, load_corpus, make_synthetic_corpus, save_corpus, Instance, LabelMode, SyntheticSpec};
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::evaluation::{self, dataset_hash, report_from_scores, BreakdownKey, EvalReport, MetricsReport, SeedStats};
use crate::heads::Variant;
use crate::model::{ModelConfig, TargetCache};
use crate::tokenizer::{train_bpe, Vocab};
use crate::training::{self, bagging_cv_train, write_log, LossKind, TrainConfig, TrainState};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "melbert", version, about = "Late-interaction metaphor detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a BPE vocabulary from the sentences of a corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed; writes checkpoints, logs and, given a test
    /// corpus, reports.
    Train(RunArgs),
    /// Score a corpus with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        breakdown: Vec<String>,
        /// JSON report path; a `.txt` table is written next to it.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Score one sentence.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space-separated words.
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        target_index: usize,
        #[arg(long, default_value = "")]
        pos: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and evaluate all five variants on one dataset.
    Ablate(RunArgs),
    /// k-fold bagging: one model per fold, ensemble scored on the test corpus.
    Cv {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write a synthetic corpus in vua-tsv form.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        balance: f64,
        #[arg(long, default_value_t = 0)]
        lexicon_variant: usize,
    },
    /// Print dataset statistics for vua-tsv files.
    Summarize {
        #[arg(required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        regression: bool,
    },
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint path for `train`, output directory for `ablate` and `cv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    pos_weight: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    breakdown: Vec<String>,
    #[arg(long)]
    dry_run: bool,
}

/// Merged view of config file and flags.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub vocab_size: usize,
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub head_dim: Option<usize>,
    pub pooling: Pooling,
    pub threshold: f64,
    pub breakdown: Vec<String>,
    pub k: usize,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            test: None,
            vocab: None,
            out: None,
            vocab_size: 200,
            variant: Variant::Melbert,
            layers: 2,
            heads: 2,
            hidden_dim: 64,
            ffn_dim: 128,
            head_dim: None,
            pooling: Pooling::Mean,
            threshold: 0.5,
            breakdown: Vec::new(),
            k: 10,
            training: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("bad value {v:?} for `{key}`")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.training;
        match key {
            "train" => self.train = Some(v.into()),
            "test" => self.test = Some(v.into()),
            "vocab" => self.vocab = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "head_dim" => self.head_dim = Some(parse(key, v)?),
            "pooling" => self.pooling = v.parse()?,
            "threshold" => self.threshold = parse(key, v)?,
            "breakdown" => self.breakdown = split_list(v),
            "k" => self.k = parse(key, v)?,
            "seed" => t.seeds = vec![parse(key, v)?],
            "seeds" => {
                t.seeds = split_list(v).iter().map(|s| parse(key, s)).collect::<Result<_>>()?;
            }
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_len" => t.max_seq_len = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "peak_lr" => t.peak_lr = parse(key, v)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "dropout" => t.dropout_p = parse(key, v)?,
            "pos_weight" => t.pos_weight = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "grad_clip" => t.grad_clip = if v == "off" { None } else { Some(parse(key, v)?) },
            "loss" => {
                t.loss = match v {
                    "bce" => LossKind::Bce,
                    "mse" => LossKind::Mse,
                    _ => return Err(Error::config(format!("unknown loss `{v}` (expected bce or mse)"))),
                }
            }
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    fn from_args(a: &RunArgs) -> Result<RunConfig> {
        let mut cfg = match &a.config {
            Some(p) => {
                let text = read_input(p)?;
                RunConfig::from_text(&text, &p.display().to_string())?
            }
            None => RunConfig::default(),
        };
        let t = &mut cfg.training;
        if let Some(v) = a.seed {
            t.seeds = vec![v];
        }
        if let Some(v) = a.pos_weight {
            t.pos_weight = v;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.peak_lr {
            t.peak_lr = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.max_len {
            t.max_seq_len = v;
        }
        if let Some(v) = &a.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(v) = a.threshold {
            cfg.threshold = v;
        }
        if !a.breakdown.is_empty() {
            cfg.breakdown = a.breakdown.clone();
        }
        for (slot, flag) in [
            (&mut cfg.train, &a.train),
            (&mut cfg.test, &a.test),
            (&mut cfg.vocab, &a.vocab),
            (&mut cfg.out, &a.out),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        parse_breakdown(&self.breakdown)?;
        self.model_config(self.vocab_size.max(1))?.validate()
    }

    pub fn label_mode(&self) -> LabelMode {
        match self.training.loss {
            LossKind::Bce => LabelMode::Binary,
            LossKind::Mse => LabelMode::Regression,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut mc = ModelConfig::desk(vocab_size, self.variant);
        mc.encoder.num_layers = self.layers;
        mc.encoder.num_heads = self.heads;
        mc.encoder.hidden_dim = self.hidden_dim;
        mc.encoder.ffn_dim = self.ffn_dim;
        mc.encoder.max_positions = self.training.max_seq_len.max(mc.encoder.max_positions);
        mc.encoder.target_pooling = self.pooling;
        mc.head_dim = self.head_dim.unwrap_or(self.hidden_dim);
        mc.threshold = self.threshold;
        self.training.apply_to(&mut mc);
        mc.validate()?;
        Ok(mc)
    }

    /// Echo written into every artifact; output paths are left out so
    /// identical runs produce identical files.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_breakdown(keys: &[String]) -> Result<Vec<BreakdownKey>> {
    keys.iter().map(|k| k.parse()).collect()
}

fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

fn check_input(path: &Path) -> Result<()> {
    std::fs::File::open(path)
        .map(drop)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

fn check_output_parent(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(Error::config(format!("output directory {} does not exist", parent.display())))
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::config(format!("missing required `{what}` path")))
}

/// Loads a corpus; malformed rows are printed and make the load fail.
fn load_clean(path: &Path, mode: LabelMode) -> Result<Vec<Instance>> {
    let corpus = load_corpus(path, mode)?;
    if !corpus.errors.is_empty() {
        for e in &corpus.errors {
            eprintln!("{}:{}: {}", path.display(), e.line, e.message);
        }
        return Err(Error::contract(format!(
            "{} malformed rows in {}",
            corpus.errors.len(),
            path.display()
        )));
    }
    Ok(corpus.instances)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(report: &EvalReport, json_path: &Path) -> Result<()> {
    write_file(json_path, &report.to_json()?)?;
    write_file(&json_path.with_extension("txt"), &report.to_table())
}

struct Prepared {
    cfg: RunConfig,
    vocab: Vocab,
    train: Vec<Instance>,
    test: Option<Vec<Instance>>,
    model_cfg: ModelConfig,
}

/// Validates paths, loads vocab and data, and checks that every instance
/// fits the model. Touches no output.
fn prepare(args: &RunArgs, out_is_dir: bool) -> Result<Prepared> {
    let cfg = RunConfig::from_args(args)?;
    let train_path = require(&cfg.train, "train")?.clone();
    check_input(&train_path)?;
    if let Some(p) = &cfg.test {
        check_input(p)?;
    }
    if let Some(p) = &cfg.vocab {
        check_input(p)?;
    }
    let out = require(&cfg.out, "out")?;
    if out_is_dir && out.exists() && !out.is_dir() {
        return Err(Error::config(format!("{} is not a directory", out.display())));
    }
    check_output_parent(out)?;

    let mode = cfg.label_mode();
    let train = load_clean(&train_path, mode)?;
    if train.is_empty() {
        return Err(Error::contract("training corpus has no rows"));
    }
    let test = cfg.test.as_ref().map(|p| load_clean(p, mode)).transpose()?;
    let vocab = match &cfg.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let text: Vec<String> = train.iter().map(|i| i.tokens.join(" ")).collect();
            train_bpe(&text, cfg.vocab_size)?
        }
    };
    let model_cfg = cfg.model_config(vocab.len())?;
    let probe = crate::model::Model {
        config: model_cfg.clone(),
        vocab: vocab.clone(),
        params: Default::default(),
    };
    probe.prepare_all(&train)?;
    if let Some(t) = &test {
        probe.prepare_all(t)?;
    }
    Ok(Prepared {
        cfg,
        vocab,
        train,
        test,
        model_cfg,
    })
}

fn run_meta(p: &Prepared) -> Value {
    json!({
        "config": p.cfg.echo(),
        "train_hash": dataset_hash(&p.train),
        "test_hash": p.test.as_deref().map(dataset_hash),
        "vocab_size": p.vocab.len(),
    })
}

/// Report over seeds: confusion counts pooled across runs, per-seed F1
/// statistics in `seeds`.
fn seed_report(p: &Prepared, states: &[TrainState], test: &[Instance], variant_cfg: &ModelConfig) -> Result<EvalReport> {
    let keys = parse_breakdown(&p.cfg.breakdown)?;
    let mut per_seed = Vec::with_capacity(states.len());
    let mut pooled: Option<EvalReport> = None;
    for st in states {
        let scores = st.model.score_inputs(&st.model.prepare_all(test)?, &mut TargetCache::new())?;
        let r = report_from_scores(&st.model, test, &scores, variant_cfg.threshold, &keys, Value::Null)?;
        per_seed.push(r.overall.clone());
        pooled = Some(match pooled {
            None => r,
            Some(acc) => merge_reports(acc, &r),
        });
    }
    let mut report = pooled.ok_or_else(|| Error::contract("no runs to report"))?;
    let seeds: Vec<u64> = states.iter().map(|s| s.seed).collect();
    report.seeds = Some(SeedStats::new(&seeds, &per_seed)?);
    report.config = run_meta(p);
    Ok(report)
}

fn add_counts(a: &MetricsReport, b: &MetricsReport) -> MetricsReport {
    MetricsReport::from_counts(a.tp + b.tp, a.fp + b.fp, a.fn_ + b.fn_, a.tn + b.tn)
}

fn merge_maps(
    a: Option<std::collections::BTreeMap<String, MetricsReport>>,
    b: &Option<std::collections::BTreeMap<String, MetricsReport>>,
) -> Option<std::collections::BTreeMap<String, MetricsReport>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            for (k, v) in b {
                let merged = a.get(k).map_or_else(|| v.clone(), |x| add_counts(x, v));
                a.insert(k.clone(), merged);
            }
            Some(a)
        }
        (a, _) => a,
    }
}

fn merge_reports(mut acc: EvalReport, r: &EvalReport) -> EvalReport {
    acc.overall = add_counts(&acc.overall, &r.overall);
    acc.by_genre = merge_maps(acc.by_genre, &r.by_genre);
    acc.by_pos = merge_maps(acc.by_pos, &r.by_pos);
    acc
}

fn train_all(p: &Prepared, model_cfg: &ModelConfig) -> Result<Vec<TrainState>> {
    p.cfg
        .training
        .seeds
        .iter()
        .map(|&seed| training::train(model_cfg, &p.vocab, &p.train, &p.cfg.training, seed))
        .collect()
}

fn checkpoint_for(p: &Prepared, state: TrainState) -> Checkpoint {
    Checkpoint {
        state,
        train: p.cfg.training.clone(),
        meta: run_meta(p),
    }
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let p = prepare(args, false)?;
    let out = p.cfg.out.clone().expect("validated");
    if args.dry_run {
        println!("dry run ok: {} training instances, vocab {}", p.train.len(), p.vocab.len());
        return Ok(());
    }
    let states = train_all(&p, &p.model_cfg)?;
    let multi = states.len() > 1;
    for st in &states {
        let path = if multi {
            with_suffix(&out, &format!(".seed{}", st.seed))
        } else {
            out.clone()
        };
        write_log(&with_suffix(&path, ".log.jsonl"), &st.history)?;
        checkpoint_for(&p, st.clone()).save(&path)?;
        let last = st.history.last().map_or(f64::NAN, |r| r.loss);
        println!("seed {}: {} steps, final epoch loss {last:.4} -> {}", st.seed, st.step, path.display());
    }
    if let Some(test) = &p.test {
        let report = seed_report(&p, &states, test, &p.model_cfg)?;
        write_report(&report, &with_suffix(&out, ".report.json"))?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let p = prepare(args, true)?;
    let test = p
        .test
        .as_ref()
        .ok_or_else(|| Error::config("ablate needs a `test` corpus"))?;
    let dir = p.cfg.out.clone().expect("validated");
    if args.dry_run {
        println!("dry run ok: {} train / {} test instances", p.train.len(), test.len());
        return Ok(());
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for variant in Variant::ALL {
        let mut mc = p.model_cfg.clone();
        mc.variant = variant;
        let states = train_all(&p, &mc)?;
        let report = seed_report(&p, &states, test, &mc)?;
        write_report(&report, &dir.join(format!("{variant}.report.json")))?;
        println!("{variant:<13} {}", report.overall.prf_row());
    }
    Ok(())
}

fn cmd_cv(args: &RunArgs, k: Option<usize>) -> Result<()> {
    let p = prepare(args, true)?;
    let k = k.unwrap_or(p.cfg.k);
    let test = p.test.as_ref().ok_or_else(|| Error::config("cv needs a `test` corpus"))?;
    data::kfold_split(&p.train, k, p.cfg.training.seeds[0])?;
    let dir = p.cfg.out.clone().expect("validated");
    if args.dry_run {
        println!("dry run ok: {k} folds over {} instances", p.train.len());
        return Ok(());
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (ensemble, states) = bagging_cv_train(&p.model_cfg, &p.vocab, &p.train, k, &p.cfg.training)?;
    for (i, st) in states.into_iter().enumerate() {
        let path = dir.join(format!("fold{i}.ckpt"));
        write_log(&with_suffix(&path, ".log.jsonl"), &st.history)?;
        checkpoint_for(&p, st).save(&path)?;
    }
    let scores = ensemble.predict(test)?;
    let keys = parse_breakdown(&p.cfg.breakdown)?;
    let mut report = report_from_scores(&ensemble.models[0], test, &scores, ensemble.threshold, &keys, run_meta(&p))?;
    report.variant = format!("{}-CV", report.variant);
    write_report(&report, &dir.join("ensemble.report.json"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    corpus: &Path,
    threshold: Option<f64>,
    breakdown: &[String],
    report_path: Option<&Path>,
    dry_run: bool,
) -> Result<bool> {
    check_input(checkpoint)?;
    check_input(corpus)?;
    if let Some(r) = report_path {
        check_output_parent(r)?;
    }
    let keys = parse_breakdown(breakdown)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut model = ckpt.state.model;
    if let Some(t) = threshold {
        model.config.threshold = t;
        model.config.validate()?;
    }
    let mode = match ckpt.train.loss {
        LossKind::Bce => LabelMode::Binary,
        LossKind::Mse => LabelMode::Regression,
    };
    let loaded = load_corpus(corpus, mode)?;
    for e in &loaded.errors {
        eprintln!("{}:{}: {}", corpus.display(), e.line, e.message);
    }
    if dry_run {
        model.prepare_all(&loaded.instances)?;
        println!("dry run ok: {} instances, {} malformed rows", loaded.instances.len(), loaded.errors.len());
        return Ok(loaded.errors.is_empty());
    }
    let config = json!({ "checkpoint": ckpt.meta, "threshold": model.config.threshold });
    let mut report = evaluation::evaluate(&model, &loaded.instances, &keys, config)?;
    if !loaded.errors.is_empty() {
        report
            .warnings
            .push(format!("{} malformed rows were excluded", loaded.errors.len()));
    }
    if let Some(r) = report_path {
        write_report(&report, r)?;
    }
    print!("{}", report.to_table());
    Ok(loaded.errors.is_empty())
}

fn cmd_predict(checkpoint: &Path, sentence: &str, target_index: usize, pos: &str, threshold: Option<f64>) -> Result<()> {
    check_input(checkpoint)?;
    let mut model = Checkpoint::load(checkpoint)?.state.model;
    if let Some(t) = threshold {
        model.config.threshold = t;
        model.config.validate()?;
    }
    let inst = Instance {
        sentence_id: "cli".into(),
        tokens: sentence.split(' ').map(String::from).collect(),
        target_index,
        label: 0.0,
        pos_tag: pos.to_string(),
        genre: None,
    };
    inst.validate().map_err(|e| Error::config(e.to_string()))?;
    let score = model.predict(std::slice::from_ref(&inst))?[0];
    println!("{score:.6}\t{}", model.label(score));
    Ok(())
}

fn cmd_synth(out: &Path, n: usize, seed: u64, balance: f64, lexicon_variant: usize) -> Result<()> {
    check_output_parent(out)?;
    if n == 0 || !(0.0..=1.0).contains(&balance) || lexicon_variant > 1 {
        return Err(Error::config("need n > 0, balance in [0, 1] and lexicon variant 0 or 1"));
    }
    let spec = SyntheticSpec {
        balance,
        lexicon_variant,
        ..Default::default()
    };
    save_corpus(out, &make_synthetic_corpus(seed, n, &spec))
}

fn cmd_summarize(corpora: &[PathBuf], regression: bool) -> Result<bool> {
    for p in corpora {
        check_input(p)?;
    }
    let mode = if regression { LabelMode::Regression } else { LabelMode::Binary };
    let mut clean = true;
    println!("dataset\t#tokens\t%M\t#sentences\tavg_len");
    for p in corpora {
        let corpus = load_corpus(p, mode)?;
        for e in &corpus.errors {
            eprintln!("{}:{}: {}", p.display(), e.line, e.message);
        }
        clean &= corpus.errors.is_empty();
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        println!("{}", data::summarize(&corpus.instances)?.table_row(&name));
    }
    Ok(clean)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TokenizerTrain { corpus, vocab_size, out } => {
            check_input(&corpus)?;
            check_output_parent(&out)?;
            let data = load_clean(&corpus, LabelMode::Regression)?;
            let text: Vec<String> = data.iter().map(|i| i.tokens.join(" ")).collect();
            let vocab = train_bpe(&text, vocab_size)?;
            vocab.save(&out)?;
            println!("{} tokens, {} merges -> {}", vocab.len(), vocab.merges().len(), out.display());
            Ok(true)
        }
        Command::Train(a) => cmd_train(&a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| true),
        Command::Cv { run, k } => cmd_cv(&run, k).map(|_| true),
        Command::Eval {
            checkpoint,
            corpus,
            threshold,
            breakdown,
            report,
            dry_run,
        } => cmd_eval(&checkpoint, &corpus, threshold, &breakdown, report.as_deref(), dry_run),
        Command::Predict {
            checkpoint,
            sentence,
            target_index,
            pos,
            threshold,
        } => cmd_predict(&checkpoint, &sentence, target_index, &pos, threshold).map(|_| true),
        Command::Synth {
            out,
            n,
            seed,
            balance,
            lexicon_variant,
        } => cmd_synth(&out, n, seed, balance, lexicon_variant).map(|_| true),
        Command::Summarize { corpora, regression } => cmd_summarize(&corpora, regression),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = dispatch(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(true) => 0,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
