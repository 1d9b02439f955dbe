//! The `mtdnn` command-line tool.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or validation error,
//! 3 numeric abort during training.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{encode_split, make_synthetic_with, subsample_indices, write_tsv, Split, SyntheticOptions, Vocabulary};
use crate::encoder::PARAM_PREFIX;
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SuiteConfig};
use crate::metrics::evaluate;
use crate::model::{head_prefix, MtDnn};
use crate::numfmt::g17;
use crate::rng::{stream, Purpose};
use crate::task::{TaskKind, TaskSpec};
use crate::trainer::{fine_tune, run_training, save_checkpoint, Observer, StepRecord, TaskData, TrainerState};

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mtdnn", version, about = "Multi-task deep neural network for language understanding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Single,
    Pair,
    Regression,
    Ranking,
}

impl From<KindArg> for TaskKind {
    fn from(k: KindArg) -> TaskKind {
        match k {
            KindArg::Single => TaskKind::Single,
            KindArg::Pair => TaskKind::Pair,
            KindArg::Regression => TaskKind::Regression,
            KindArg::Ranking => TaskKind::Ranking,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every task in the config jointly.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a trained encoder to one task of the config.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of every task it has a head for.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Directory for eval.tsv; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep 0.1%, 1%, 10% or 100% of a training file.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Ranking files are sampled by query; other kinds by line.
        #[arg(long, value_enum, default_value = "single")]
        kind: KindArg,
    },
    /// Compare backward gradients with finite differences.
    Gradcheck {
        /// Takes the encoder shape from this config; a d=8, 2-layer,
        /// 2-head model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write a generated corpus and its vocabulary.
    Synth {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        vocab_size: usize,
        #[arg(long)]
        seed: u64,
        /// Writes `vocab.txt` and `<kind>.tsv` here.
        #[arg(long)]
        out: PathBuf,
        /// Marker words (0-7) that signal the positive class or answer.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        markers: Vec<usize>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INVALID
    }
}

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()),
        Command::Finetune {
            config,
            init,
            task,
            seed,
            out,
        } => cmd_finetune(&config, &init, &task, seed, out.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => cmd_eval(&config, &checkpoint, split.into(), out.as_deref()),
        Command::Sample {
            input,
            fraction,
            seed,
            output,
            kind,
        } => cmd_sample(&input, fraction, seed, &output, kind.into()),
        Command::Gradcheck { config, tol } => cmd_gradcheck(config.as_deref(), tol),
        Command::Synth {
            kind,
            size,
            vocab_size,
            seed,
            out,
            markers,
        } => cmd_synth(kind.into(), size, vocab_size, seed, &out, markers),
    }
}

fn output_dir(flag: Option<&Path>, config: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output` in the config".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Streams log lines to a file and checkpoints at every epoch end.
struct RunFiles {
    dir: PathBuf,
    log: BufWriter<File>,
    log_path: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path, log_name: &str) -> Result<Self> {
        let log_path = dir.join(log_name);
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
            log_path,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))
    }
}

impl Observer for RunFiles {
    fn on_step(&mut self, record: &StepRecord, _model: &MtDnn) -> Result<ControlFlow<()>> {
        writeln!(self.log, "{}", record.log_line()).map_err(|e| Error::io(&self.log_path, e))?;
        Ok(ControlFlow::Continue(()))
    }

    fn on_epoch_end(&mut self, epoch: u64, model: &MtDnn, state: &TrainerState) -> Result<()> {
        self.flush()?;
        let path = self.dir.join(format!("epoch{epoch}.ckpt"));
        save_checkpoint(&path, model, Some(state))?;
        println!("epoch {epoch}: {}", path.display());
        Ok(())
    }
}

/// Runs `body` with a log file that is flushed whether or not it succeeds.
fn with_run_files<T>(dir: &Path, log_name: &str, body: impl FnOnce(&mut RunFiles) -> Result<T>) -> Result<T> {
    let mut files = RunFiles::create(dir, log_name)?;
    let out = body(&mut files);
    let flushed = files.flush();
    let out = out?;
    flushed?;
    Ok(out)
}

pub fn cmd_train(config_path: &Path, seed: u64, out: Option<&Path>) -> Result<u8> {
    let config = RunConfig::load(config_path)?;
    let vocab = config.load_vocab()?;
    let model_config = config.model_config(vocab.len());
    let mut data = Vec::with_capacity(config.tasks.len());
    for (task, section) in config.tasks.iter().enumerate() {
        let split = config.load_split(&section.name, Split::Train)?.expect("train is required");
        let examples = encode_split(&split, &vocab, model_config.max_len)?;
        data.push(TaskData { task, examples });
    }
    let dir = output_dir(out, &config)?;
    let mut model = MtDnn::new(model_config, &config.task_specs(), seed)?;
    let train_config = config.train_config(seed);
    with_run_files(&dir, "train.log", |files| {
        run_training(&mut model, &data, &train_config, files)?;
        save_checkpoint(dir.join("model.ckpt"), &model, None)
    })?;
    println!("model: {}", dir.join("model.ckpt").display());
    Ok(0)
}

pub fn cmd_finetune(config_path: &Path, init: &Path, task: &str, seed: u64, out: Option<&Path>) -> Result<u8> {
    let config = RunConfig::load(config_path)?;
    let spec: TaskSpec = config
        .task_specs()
        .into_iter()
        .find(|s| s.name == task)
        .ok_or_else(|| Error::Config(format!("task {task} is not in {}", config_path.display())))?;
    let checkpoint = Checkpoint::load(init)?;
    let vocab = config.load_vocab()?;
    let model_config = config.model_config(vocab.len());
    let split = config.load_split(task, Split::Train)?.expect("train is required");
    let examples = encode_split(&split, &vocab, model_config.max_len)?;
    let dir = output_dir(out, &config)?;
    let train_config = config.train_config(seed);
    let model = with_run_files(&dir, "finetune.log", |files| {
        let (model, _) = fine_tune(&checkpoint, model_config, spec, examples, &train_config, files)?;
        save_checkpoint(dir.join("model.ckpt"), &model, None)?;
        Ok(model)
    })?;
    println!("model: {} ({} parameters)", dir.join("model.ckpt").display(), model.store.len());
    Ok(0)
}

pub fn cmd_eval(config_path: &Path, checkpoint: &Path, split: Split, out: Option<&Path>) -> Result<u8> {
    let config = RunConfig::load(config_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = config.load_vocab()?;
    let model_config = config.model_config(vocab.len());
    let mut model = MtDnn::new(model_config, &config.task_specs(), 0)?;
    ck.restore(&mut model.store, PARAM_PREFIX)?;
    let mut report = String::new();
    for (task, section) in config.tasks.iter().enumerate() {
        let prefix = format!("{}.", head_prefix(&section.name));
        if !ck.entries().any(|(name, _)| name.starts_with(&prefix)) {
            eprintln!("skipping {}: the checkpoint has no head for it", section.name);
            continue;
        }
        ck.restore(&mut model.store, &prefix)?;
        let Some(data) = config.load_split(&section.name, split)? else {
            eprintln!("skipping {}: no {split} file", section.name);
            continue;
        };
        if data.is_empty() {
            eprintln!("skipping {}: {split} file is empty", section.name);
            continue;
        }
        let examples = encode_split(&data, &vocab, model.config.max_len)?;
        report.push_str(&evaluate(&model, task, &examples)?.to_tsv());
    }
    if report.is_empty() {
        return Err(Error::Validation(format!("nothing to evaluate on the {split} split")));
    }
    let dir = output_dir(out, &config)?;
    let path = dir.join("eval.tsv");
    fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    print!("{report}");
    Ok(0)
}

pub fn cmd_sample(input: &Path, fraction: f64, seed: u64, output: &Path, kind: TaskKind) -> Result<u8> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    // Units are lines, or for ranking the rows of one query id.
    let mut units: Vec<Vec<&str>> = Vec::new();
    if kind == TaskKind::Ranking {
        let mut index = std::collections::HashMap::new();
        for line in &lines {
            let id = line.split('\t').next().unwrap_or_default();
            let at = *index.entry(id).or_insert_with(|| {
                units.push(Vec::new());
                units.len() - 1
            });
            units[at].push(line);
        }
    } else {
        units = lines.iter().map(|l| vec![*l]).collect();
    }
    let keep = subsample_indices(units.len(), fraction, &mut stream(seed, Purpose::Sampling))?;
    let mut out = String::new();
    for i in keep {
        for line in &units[i] {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(output, out).map_err(|e| Error::io(output, e))?;
    Ok(0)
}

pub fn cmd_gradcheck(config_path: Option<&Path>, tol: f64) -> Result<u8> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut suite = SuiteConfig::default();
    if let Some(path) = config_path {
        let config = RunConfig::load(path)?;
        let m = &config.model;
        suite.model.d_model = m.d_model;
        suite.model.n_layers = m.n_layers;
        suite.model.n_heads = m.n_heads;
        suite.model.ffn_multiplier = m.ffn_multiplier;
        suite.model.layer_norm_eps = m.layer_norm_eps;
        suite.model.max_len = m.max_len.min(suite.model.max_len);
        suite.san_steps = m.san_steps;
    }
    let results = run_suite(&suite)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed(tol) { "PASS" } else { "FAIL" };
        println!("{}\t{}\t{}\t{verdict}", r.name, r.checked, g17(r.max_rel_error));
        if !r.passed(tol) {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed at tolerance {tol}: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

pub fn cmd_synth(kind: TaskKind, size: usize, vocab_size: usize, seed: u64, out: &Path, markers: Vec<usize>) -> Result<u8> {
    let options = SyntheticOptions {
        markers,
        ..SyntheticOptions::default()
    };
    let split = make_synthetic_with(kind, size, vocab_size, &options, &mut stream(seed, Purpose::Sampling))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Vocabulary::synthetic(vocab_size)?.save(out.join("vocab.txt"))?;
    let path = out.join(format!("{kind}.tsv"));
    write_tsv(&path, &split, &TaskSpec::new(kind.name(), kind))?;
    println!("{}", path.display());
    Ok(0)
}
