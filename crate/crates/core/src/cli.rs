//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 staging, 4 corruption.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::encoder::EncoderConfig;
use crate::eval::{self, EvalError, MembenchConfig};
use crate::objective::LossConfig;
use crate::pipeline::{
    self, load_checkpoint, save_checkpoint, stage1_build_store, training_vocab, FeatureStore,
    Model, OptimizerKind, PipelineError, StepMode, TrainConfig, METRICS_HEADER,
};
use crate::tensor::SeededRng;
use crate::text::{self, TextError, Vocab};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Staging(String),
    Corruption(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Staging(_) => 3,
            CliError::Corruption(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Staging(m) | CliError::Corruption(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        let m = e.to_string();
        match e {
            TextError::Io { .. } => CliError::Io(m),
            TextError::Format { .. } => CliError::Corruption(m),
            TextError::EmptyCorpus | TextError::EmptySentence => CliError::Usage(m),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let m = e.to_string();
        match e {
            PipelineError::Io { .. } => CliError::Io(m),
            PipelineError::Format { .. } | PipelineError::Corruption { .. } | PipelineError::Collision(_) => {
                CliError::Corruption(m)
            }
            PipelineError::Staging { .. } => CliError::Staging(m),
            PipelineError::Text(t) => t.into(),
            PipelineError::Eval(e) => (*e).into(),
            _ => CliError::Usage(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => (*p).into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "recse", version, about = "Contrastive sentence embeddings with reshaped features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus plus dev and test pair files.
    GenSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the vocabulary and the reshaped feature store.
    Reshape {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_store: PathBuf,
        #[arg(long)]
        vocab_min_count: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and write the best checkpoint and a metrics log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Defaults to `<store>.vocab`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Defaults to `<out_ckpt>.metrics.tsv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, conflicts_with = "joint")]
        staged: bool,
        #[arg(long)]
        joint: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Spearman correlation per dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `name=path`, repeatable.
        #[arg(long = "datasets", required = true, num_args = 1..)]
        datasets: Vec<String>,
        /// Defaults to `<ckpt>.eval.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of normalized similarity scores and the polarity index.
    Polarity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 9)]
        bins: usize,
        /// Defaults to `<ckpt>.polarity.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Peak tensor memory of one epoch under each training layout.
    Membench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// `key=value` config file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set lambda=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Every tunable in one flat namespace, as read from config files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub normalize_ids: bool,
    pub vocab_min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            normalize_ids: false,
            vocab_min_count: 1,
        }
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 19] = [
        "d_model",
        "n_layers",
        "n_heads",
        "d_ff",
        "l_max",
        "dropout_rate",
        "batch_size",
        "epochs",
        "eval_every_steps",
        "learning_rate",
        "seed",
        "tau",
        "tau_prime",
        "lambda",
        "staged",
        "optimizer",
        "refresh_every_epochs",
        "normalize_ids",
        "vocab_min_count",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        let e = &mut self.encoder;
        let t = &mut self.train;
        let l: &mut LossConfig = &mut t.loss;
        match key {
            "d_model" => e.d_model = p(key, value)?,
            "n_layers" => e.n_layers = p(key, value)?,
            "n_heads" => e.n_heads = p(key, value)?,
            "d_ff" => e.d_ff = p(key, value)?,
            "l_max" => e.l_max = p(key, value)?,
            "dropout_rate" => e.dropout_rate = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "epochs" => t.epochs = p(key, value)?,
            "eval_every_steps" => t.eval_every_steps = p(key, value)?,
            "learning_rate" => t.learning_rate = p(key, value)?,
            "seed" => t.seed = p(key, value)?,
            "tau" => l.tau = p(key, value)?,
            "tau_prime" => l.tau_prime = p(key, value)?,
            "lambda" => l.lambda = p(key, value)?,
            "staged" => {
                t.mode = if p::<bool>(key, value)? {
                    StepMode::Staged
                } else {
                    StepMode::Joint
                }
            }
            "optimizer" => t.optimizer = value.parse::<OptimizerKind>()?,
            "refresh_every_epochs" => t.refresh_every_epochs = p(key, value)?,
            "normalize_ids" => self.normalize_ids = p(key, value)?,
            "vocab_min_count" => self.vocab_min_count = p(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            cfg.set(k.trim(), v.trim()).map_err(|m| format!("line {}: {m}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.encoder.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    fn model_seed(&self) -> SeededRng {
        SeededRng::new(self.train.seed)
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                RunConfig::parse(&text).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))?
            }
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { seed, size, out_dir } => cmd_gen_synth(seed, size, &out_dir),
        Command::Reshape {
            corpus,
            out_store,
            vocab_min_count,
            run,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(m) = vocab_min_count {
                cfg.vocab_min_count = m;
            }
            cmd_reshape(&corpus, &out_store, &cfg)
        }
        Command::Train {
            corpus,
            store,
            vocab,
            dev,
            out_ckpt,
            metrics,
            staged,
            joint,
            run,
        } => {
            let mut cfg = run.resolve()?;
            if joint {
                cfg.train.mode = StepMode::Joint;
            } else if staged {
                cfg.train.mode = StepMode::Staged;
            }
            let vocab = vocab.unwrap_or_else(|| with_suffix(&store, ".vocab"));
            let metrics = metrics.unwrap_or_else(|| with_suffix(&out_ckpt, ".metrics.tsv"));
            cmd_train(&TrainPaths {
                corpus: &corpus,
                store: &store,
                vocab: &vocab,
                dev: dev.as_deref(),
                out_ckpt: &out_ckpt,
                metrics: &metrics,
            }, &cfg)
        }
        Command::Eval { ckpt, datasets, out } => {
            let out = out.unwrap_or_else(|| with_suffix(&ckpt, ".eval.tsv"));
            cmd_eval(&ckpt, &datasets, &out)
        }
        Command::Polarity { ckpt, pairs, bins, out } => {
            let out = out.unwrap_or_else(|| with_suffix(&ckpt, ".polarity.tsv"));
            cmd_polarity(&ckpt, &pairs, bins, &out)
        }
        Command::Membench {
            corpus,
            max_steps,
            out,
            run,
        } => cmd_membench(&corpus, &run.resolve()?, max_steps, out.as_deref()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn cmd_gen_synth(seed: u64, size: usize, out_dir: &Path) -> Result<()> {
    if size == 0 {
        return Err(CliError::Usage("--size must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let data = text::gen_synth_corpus(&SeededRng::new(seed), size);
    let split = size.div_ceil(2);
    let (dev, test) = data.pairs.split_at(split);
    let corpus_path = out_dir.join("corpus.txt");
    let dev_path = out_dir.join("dev.tsv");
    let test_path = out_dir.join("test.tsv");
    text::write_corpus(&corpus_path, &data.corpus)?;
    text::write_pairs(&dev_path, dev)?;
    text::write_pairs(&test_path, test)?;
    println!("corpus: {} ({} sentences)", corpus_path.display(), data.corpus.len());
    println!("dev: {} ({} pairs)", dev_path.display(), dev.len());
    println!("test: {} ({} pairs)", test_path.display(), test.len());
    Ok(())
}

pub fn cmd_reshape(corpus: &Path, out_store: &Path, cfg: &RunConfig) -> Result<()> {
    let sentences = text::read_corpus(corpus)?;
    let vocab = training_vocab(&sentences, cfg.vocab_min_count)?;
    let model = Model::init(cfg.encoder.clone(), vocab, cfg.normalize_ids, &cfg.model_seed())?;
    let store = stage1_build_store(&sentences, &model, out_store)?;
    let vocab_path = with_suffix(out_store, ".vocab");
    model.vocab.write(&vocab_path)?;
    println!("records: {}", store.len());
    println!("checksum: {:016x}", store.checksum());
    println!("vocab: {} ({} tokens)", vocab_path.display(), model.vocab.len());
    Ok(())
}

struct TrainPaths<'a> {
    corpus: &'a Path,
    store: &'a Path,
    vocab: &'a Path,
    dev: Option<&'a Path>,
    out_ckpt: &'a Path,
    metrics: &'a Path,
}

fn cmd_train(paths: &TrainPaths, cfg: &RunConfig) -> Result<()> {
    let sentences = text::read_corpus(paths.corpus)?;
    let vocab = Vocab::read(paths.vocab)?;
    let store = FeatureStore::read(paths.store)?;
    let dev = match paths.dev {
        Some(p) => text::read_pairs(p)?,
        None => Vec::new(),
    };
    let model = Model::init(cfg.encoder.clone(), vocab, cfg.normalize_ids, &cfg.model_seed())?;
    let mut log = format!("{METRICS_HEADER}\n");
    let outcome = pipeline::train(model, &sentences, &dev, Some(store), &cfg.train, |t| {
        log.push_str(&t.to_log_line());
        log.push('\n');
    })?;
    write_file(paths.metrics, &log)?;
    save_checkpoint(&outcome.best, paths.out_ckpt)?;
    println!("steps={}", outcome.traces.len());
    if let Some(rho) = outcome.initial_dev_rho() {
        println!("initial_dev_rho={rho:.6}");
    }
    match outcome.best_dev_rho() {
        Some(rho) => println!("best_dev_rho={rho:.6}"),
        None => println!("best_dev_rho=none"),
    }
    println!("best_step={}", outcome.best_step);
    println!("checkpoint: {}", paths.out_ckpt.display());
    println!("metrics: {}", paths.metrics.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, datasets: &[String], out: &Path) -> Result<()> {
    let named = datasets
        .iter()
        .map(|d| {
            let (name, path) = d
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--datasets expects name=path, got {d:?}")))?;
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = load_checkpoint(ckpt)?;
    let data = named
        .into_iter()
        .map(|(name, path)| Ok((name, text::read_pairs(&path)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = eval::evaluate(&model, &data)?;
    print!("{}", report.to_table());
    write_file(out, &report.to_tsv())?;
    println!("tsv: {}", out.display());
    Ok(())
}

fn cmd_polarity(ckpt: &Path, pairs: &Path, bins: usize, out: &Path) -> Result<()> {
    if bins < 3 || !bins.is_multiple_of(3) {
        return Err(CliError::Usage(format!("--bins must be a positive multiple of 3, got {bins}")));
    }
    let model = load_checkpoint(ckpt)?;
    let pairs = text::read_pairs(pairs)?;
    let scores: Vec<f64> = eval::score_pairs(&model, &pairs)?
        .into_iter()
        .map(eval::normalized_score)
        .collect();
    let report = eval::polarity_analysis(&scores, bins)?;
    print!("{}", report.to_table());
    write_file(out, &report.histogram_tsv())?;
    println!("histogram: {}", out.display());
    Ok(())
}

fn cmd_membench(corpus: &Path, cfg: &RunConfig, max_steps: Option<usize>, out: Option<&Path>) -> Result<()> {
    let sentences = text::read_corpus(corpus)?;
    let report = eval::membench(
        &sentences,
        &MembenchConfig {
            encoder: cfg.encoder.clone(),
            train: cfg.train.clone(),
            normalize_ids: cfg.normalize_ids,
            vocab_min_count: cfg.vocab_min_count,
            max_steps,
        },
    )?;
    print!("{}", report.to_table());
    if let Some(out) = out {
        write_file(out, &report.to_tsv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parses_with_comments() {
        let cfg = RunConfig::parse("# header\nlambda = 1 # pure\n\nepochs=5\nstaged=false\noptimizer=adam\n").unwrap();
        assert_eq!(cfg.train.loss.lambda, 1.0);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.mode, StepMode::Joint);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Adam);
        assert!(RunConfig::parse("nope=1").is_err());
        assert!(RunConfig::parse("epochs").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            let value = match key {
                "staged" | "normalize_ids" => "true",
                "optimizer" => "sgd",
                "dropout_rate" | "learning_rate" | "tau" | "tau_prime" | "lambda" => "0.5",
                _ => "4",
            };
            cfg.set(key, value).unwrap();
        }
    }
}
