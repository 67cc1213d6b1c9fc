//! `prosody` command-line tool. Every subcommand reads an optional global
//! JSON config (`--config`), lets its own flags override it, and with
//! `--dry-run` prints the effective configuration instead of running.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 evaluation finished with exclusions. Errors go to stderr as one JSON
//! line: `{"level":"error","command":…,"exit":…,"kind":…,"message":…}`.
//!
//! Contour arguments accept `-` for stdin and contour outputs default to
//! stdout, so `analyze | quantize | dequantize | shift` compose as a pipe.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use prosody_core::audio::{load_audio_file, write_wav, write_wav_file, AudioBuffer, CANONICAL_RATE};
use prosody_core::baselines::{
    monotone, replace_words, repunctuate_heuristic, swap_words, PunctuationTarget, WordContourBank,
};
use prosody_core::codec::{dequantize, quantize, QuantGrid, QuantizedF0};
use prosody_core::corpus::{corpus_stats, training_set, write_toy_corpus, CorpusManifest, ToyCorpusSpec};
use prosody_core::evaluation::{eval_run, make_lowpass_stimulus, EvalConfig, SystemSpec};
use prosody_core::features::{assemble_features, load_alignment, WordEmbeddingTable};
use prosody_core::model::{accuracy_teacher_forced, ContextBundle, Direction, Model, ModelConfig, Trainer};
use prosody_core::neural::RngStream;
use prosody_core::pitch::{
    analyze_detailed, export_posteriorgram, speaker_stats, F0Contour, SpeakerStats,
};
use prosody_core::psola::shift_to_contour;
use prosody_core::Error;

use crate::config::CliConfig;
use crate::editing::EditSpec;
use crate::store::ProjectStore;

#[derive(Debug, Parser)]
#[command(name = "prosody", version, about = "F0 analysis, generation and pitch-shifting")]
pub struct Cli {
    /// Global JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit without running.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// WAV → F0 contour JSON (optionally also the pitch posteriorgram).
    Analyze(AnalyzeArgs),
    /// Contours → speaker log2-F0 statistics JSON.
    Stats(StatsArgs),
    /// Contour → class indices on a speaker grid.
    Quantize(QuantizeArgs),
    /// Class indices → contour at bin centres.
    Dequantize(DequantizeArgs),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Generate a contour from a checkpoint, features and constraints.
    Generate(GenerateArgs),
    /// Non-neural contour generators.
    Baseline(BaselineArgs),
    /// Impose a target contour on a WAV by PSOLA.
    Shift(ShiftArgs),
    /// Low-pass listening stimulus 10 Hz above the contour maximum.
    Lowpass(LowpassArgs),
    /// Objective evaluation of contour sources over a corpus.
    Eval(EvalArgs),
    /// Run the REST service.
    Serve(ServeArgs),
    /// Write a word contour bank for the `replace` baseline.
    Bank(BankArgs),
    /// Write a small synthetic corpus with a manifest.
    ToyCorpus(ToyCorpusArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Also write the posteriorgram and confidence track (PGRM binary).
    #[arg(long)]
    pub posteriorgram: Option<PathBuf>,
    #[arg(long)]
    pub t_high: Option<f64>,
    #[arg(long)]
    pub t_low: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(required = true)]
    pub contours: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    /// Contour JSON, `-` for stdin.
    pub input: PathBuf,
    /// Speaker statistics; computed from the input contour when absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DequantizeArgs {
    /// Quantised JSON from `quantize`, `-` for stdin.
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Cdar,
    Dar,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path; speaker statistics go next to it as `.stats.json`.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Model preset; the config file's `model` section applies when absent.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// JSON-lines training log (per-step and per-epoch loss, final accuracy).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub alignment: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Contour whose voicing the output keeps (and that locked regions read).
    #[arg(long)]
    pub voicing: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// JSON `{"constraints": [...], "keep_regions": [...]}`.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionArg {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Monotone,
    Swap,
    Replace,
    Repunct,
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub contour: PathBuf,
    #[arg(long)]
    pub alignment: Option<PathBuf>,
    /// Speaker statistics (monotone, repunct); from the contour when absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, default_value = prosody_core::corpus::DEFAULT_SPEAKER)]
    pub speaker: String,
    /// `question` or `statement` (repunct).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ShiftArgs {
    pub input: PathBuf,
    /// Target contour JSON, `-` for stdin.
    #[arg(long)]
    pub target: PathBuf,
    /// Analysis of the input; re-analysed when absent.
    #[arg(long)]
    pub analysis: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LowpassArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub contour: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Eval config JSON `{"systems": [...], "seed": n}`; relative paths in it
    /// resolve against the manifest's directory.
    #[arg(long)]
    pub systems: Option<PathBuf>,
    /// Shorthand systems: identity, monotone, swap, replace,
    /// repunct_question, repunct_statement, model=<ckpt>, contours=<dir>.
    #[arg(long = "system")]
    pub system: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `per_utterance.csv` and `report.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<std::net::SocketAddr>,
}

#[derive(Debug, Args, Serialize)]
pub struct BankArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyCorpusArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub utterances: usize,
    #[arg(long, default_value_t = 0.8)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failed command with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub exit: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: 1,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (exit, kind) = match &e {
            Error::Config(_) => (1, "config"),
            Error::Io { .. } => (2, "io"),
            Error::MalformedWav(_) | Error::UnsupportedCodec(_) | Error::ZeroLength | Error::AudioTooShort { .. } => {
                (2, "audio")
            }
            Error::Alignment(_) | Error::MissingEmbedding(_) => (2, "alignment"),
            Error::Format { .. } | Error::Json(_) => (2, "format"),
            Error::VuvMismatch { .. } => (2, "vuv_mismatch"),
            _ => (2, "data"),
        };
        Self {
            exit,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<crate::error::ServiceError> for Failure {
    fn from(e: crate::error::ServiceError) -> Self {
        Self {
            exit: 2,
            kind: "service",
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn is_stdio(p: &Path) -> bool {
    p.as_os_str() == "-"
}

fn read_text(path: &Path) -> CliResult<String> {
    if is_stdio(path) {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(|e| io_fail(path, e))?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| io_fail(path, e))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::from(Error::Format { kind: "json", reason: format!("{}: {e}", path.display()) }))
}

/// Writes to `path`, or stdout when absent or `-`.
fn write_out(path: Option<&Path>, bytes: &[u8]) -> CliResult {
    match path {
        Some(p) if !is_stdio(p) => std::fs::write(p, bytes).map_err(|e| io_fail(p, e)),
        _ => {
            let mut out = std::io::stdout().lock();
            match out.write_all(bytes).and_then(|_| out.write_all(b"\n")) {
                // a closed downstream pipe (e.g. `| head`) is not our failure
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_fail(Path::new("-"), e)),
                _ => Ok(()),
            }
        }
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, v: &T) -> CliResult {
    let text = serde_json::to_string(v).map_err(Error::from)?;
    write_out(path, text.as_bytes())
}

fn load_wav(path: &Path) -> CliResult<AudioBuffer> {
    Ok(load_audio_file(path, CANONICAL_RATE)?)
}

/// Output of `quantize`: the grid travels with the classes so `dequantize`
/// needs nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizedDoc {
    pub mu: f64,
    pub sigma: f64,
    pub bins: Vec<u8>,
}

fn stats_or_own(stats: Option<&PathBuf>, contour: &F0Contour) -> CliResult<SpeakerStats> {
    match stats {
        Some(p) => read_json(p),
        None => Ok(speaker_stats([contour])?),
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status; diagnostics are printed to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = command_name(&cli.command);
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            let line = serde_json::json!({
                "level": "error",
                "command": name,
                "exit": f.exit,
                "kind": f.kind,
                "message": f.message,
            });
            eprintln!("{line}");
            f.exit
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Analyze(_) => "analyze",
        Command::Stats(_) => "stats",
        Command::Quantize(_) => "quantize",
        Command::Dequantize(_) => "dequantize",
        Command::Train(_) => "train",
        Command::Generate(_) => "generate",
        Command::Baseline(_) => "baseline",
        Command::Shift(_) => "shift",
        Command::Lowpass(_) => "lowpass",
        Command::Eval(_) => "eval",
        Command::Serve(_) => "serve",
        Command::Bank(_) => "bank",
        Command::ToyCorpus(_) => "toy-corpus",
    }
}

/// Folds command flags into the global config, so the printed effective
/// config reflects what will run.
fn effective_config(cli: &Cli) -> CliResult<CliConfig> {
    let mut c = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::defaults(),
    };
    match &cli.command {
        Command::Analyze(a) => {
            if let Some(v) = a.t_high {
                c.voicing.t_high = v;
            }
            if let Some(v) = a.t_low {
                c.voicing.t_low = v;
            }
        }
        Command::Train(a) => {
            match a.arch {
                Some(Arch::Cdar) => c.model = ModelConfig::cdar(),
                Some(Arch::Dar) => c.model = ModelConfig::dar(),
                None => {}
            }
            let t = &mut c.training;
            if let Some(v) = a.seed {
                t.seed = v;
            }
            if a.steps.is_some() {
                t.max_steps = a.steps;
            }
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.learning_rate {
                t.learning_rate = v;
            }
        }
        Command::Generate(a) => {
            if let Some(v) = a.seed {
                c.generation.seed = v;
            }
            if let Some(v) = a.temperature {
                c.generation.temperature = v;
            }
        }
        Command::Baseline(a) => {
            if let Some(v) = a.seed {
                c.generation.seed = v;
            }
        }
        Command::Eval(a) => {
            if let Some(v) = a.seed {
                c.generation.seed = v;
            }
        }
        Command::Serve(a) => {
            if let Some(v) = &a.root {
                c.serve.root = v.clone();
            }
            if let Some(v) = &a.models {
                c.serve.models = v.clone();
            }
            if let Some(v) = a.addr {
                c.serve.addr = v;
            }
        }
        _ => {}
    }
    c.validate()?;
    Ok(c)
}

fn execute(cli: Cli) -> CliResult<i32> {
    let cfg = effective_config(&cli)?;
    if cli.dry_run {
        let doc = serde_json::json!({
            "command": command_name(&cli.command),
            "config": cfg,
            "args": args_json(&cli.command),
        });
        let text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
        write_out(None, text.as_bytes())?;
        return Ok(0);
    }
    match cli.command {
        Command::Analyze(a) => analyze_cmd(&cfg, a).map(|_| 0),
        Command::Stats(a) => stats_cmd(a).map(|_| 0),
        Command::Quantize(a) => quantize_cmd(a).map(|_| 0),
        Command::Dequantize(a) => dequantize_cmd(a).map(|_| 0),
        Command::Train(a) => train_cmd(&cfg, a).map(|_| 0),
        Command::Generate(a) => generate_cmd(&cfg, a).map(|_| 0),
        Command::Baseline(a) => baseline_cmd(&cfg, a).map(|_| 0),
        Command::Shift(a) => shift_cmd(&cfg, a).map(|_| 0),
        Command::Lowpass(a) => lowpass_cmd(a).map(|_| 0),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Serve(_) => serve_cmd(&cfg).map(|_| 0),
        Command::Bank(a) => bank_cmd(a).map(|_| 0),
        Command::ToyCorpus(a) => toy_corpus_cmd(a).map(|_| 0),
    }
}

fn args_json(c: &Command) -> serde_json::Value {
    let v = match c {
        Command::Analyze(a) => serde_json::to_value(a),
        Command::Stats(a) => serde_json::to_value(a),
        Command::Quantize(a) => serde_json::to_value(a),
        Command::Dequantize(a) => serde_json::to_value(a),
        Command::Train(a) => serde_json::to_value(a),
        Command::Generate(a) => serde_json::to_value(a),
        Command::Baseline(a) => serde_json::to_value(a),
        Command::Shift(a) => serde_json::to_value(a),
        Command::Lowpass(a) => serde_json::to_value(a),
        Command::Eval(a) => serde_json::to_value(a),
        Command::Serve(a) => serde_json::to_value(a),
        Command::Bank(a) => serde_json::to_value(a),
        Command::ToyCorpus(a) => serde_json::to_value(a),
    };
    v.unwrap_or(serde_json::Value::Null)
}

fn analyze_cmd(cfg: &CliConfig, a: AnalyzeArgs) -> CliResult {
    let audio = load_wav(&a.input)?;
    let analysis = analyze_detailed(&audio, cfg.voicing.thresholds())?;
    if let Some(p) = &a.posteriorgram {
        let bytes = export_posteriorgram(&analysis.posteriorgram, &analysis.confidence);
        std::fs::write(p, bytes).map_err(|e| io_fail(p, e))?;
    }
    write_json(a.output.as_deref(), &analysis.contour)
}

fn stats_cmd(a: StatsArgs) -> CliResult {
    let contours = a
        .contours
        .iter()
        .map(|p| read_json::<F0Contour>(p))
        .collect::<CliResult<Vec<_>>>()?;
    write_json(a.output.as_deref(), &speaker_stats(&contours)?)
}

fn quantize_cmd(a: QuantizeArgs) -> CliResult {
    let contour: F0Contour = read_json(&a.input)?;
    let stats = stats_or_own(a.stats.as_ref(), &contour)?;
    let grid = QuantGrid::from_stats(&stats)?;
    let q = quantize(&contour, &grid);
    write_json(
        a.output.as_deref(),
        &QuantizedDoc {
            mu: grid.mu,
            sigma: grid.sigma,
            bins: q.bins,
        },
    )
}

fn dequantize_cmd(a: DequantizeArgs) -> CliResult {
    let doc: QuantizedDoc = read_json(&a.input)?;
    let grid = QuantGrid::new(doc.mu, doc.sigma)?;
    let contour = dequantize(&QuantizedF0::new(doc.bins)?, &grid)?;
    write_json(a.output.as_deref(), &contour)
}

/// Path of the speaker statistics written next to a checkpoint.
pub fn stats_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("stats.json")
}

fn train_cmd(cfg: &CliConfig, a: TrainArgs) -> CliResult {
    let manifest = CorpusManifest::load(&a.manifest)?;
    // everything is loaded and validated before the first step
    let utts = manifest.load_all()?;
    if utts.is_empty() {
        return Err(Error::Config("manifest lists no utterances".into()).into());
    }
    let stats = corpus_stats(&utts)?;
    if stats.len() != 1 {
        return Err(Error::Config(format!(
            "training needs a single-speaker corpus, found {} speakers",
            stats.len()
        ))
        .into());
    }
    let set = training_set(&utts, &stats)?;
    let model = Model::new(cfg.model.clone(), cfg.training.seed)?;
    let mut trainer = Trainer::new(model, cfg.training.clone())?;
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| io_fail(p, e))?),
        None => Box::new(std::io::sink()),
    };
    let per_epoch = set.len().div_ceil(cfg.training.batch_size.min(set.len())) as u64;
    let (mut epoch_sum, mut epoch_steps, mut epoch) = (0.0, 0u64, 0u64);
    let mut io_error = None;
    trainer.fit(&set, |step, loss| {
        let mut line = serde_json::json!({ "step": step, "loss": loss }).to_string();
        epoch_sum += loss;
        epoch_steps += 1;
        if epoch_steps == per_epoch {
            epoch += 1;
            let mean = epoch_sum / epoch_steps as f64;
            eprintln!("epoch {epoch} mean loss {mean:.4}");
            line.push('\n');
            line.push_str(&serde_json::json!({ "epoch": epoch, "mean_loss": mean }).to_string());
            epoch_sum = 0.0;
            epoch_steps = 0;
        }
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
    })?;
    let accuracy = accuracy_teacher_forced(&trainer.model, &set)?;
    let summary = serde_json::json!({
        "checkpoint": a.output,
        "steps": trainer.steps(),
        "final_accuracy": accuracy,
    });
    writeln!(log, "{summary}").map_err(|e| io_fail(Path::new("log"), e))?;
    if let Some(e) = io_error {
        return Err(io_fail(a.log.as_deref().unwrap_or(Path::new("log")), e));
    }
    trainer.model.save(&a.output)?;
    let speaker_stats = stats.values().next().expect("one speaker");
    let sp = stats_path(&a.output);
    std::fs::write(&sp, serde_json::to_vec_pretty(speaker_stats).map_err(Error::from)?)
        .map_err(|e| io_fail(&sp, e))?;
    write_out(None, summary.to_string().as_bytes())?;
    Ok(())
}

fn generate_cmd(cfg: &CliConfig, a: GenerateArgs) -> CliResult {
    let mut model = Model::load(&a.model)?;
    if let Some(d) = a.direction {
        model = model.with_direction(match d {
            DirectionArg::Forward => Direction::Forward,
            DirectionArg::Reverse => Direction::Reverse,
        });
    }
    let voicing: F0Contour = read_json(&a.voicing)?;
    let stats: SpeakerStats = read_json(&a.stats)?;
    let grid = QuantGrid::from_stats(&stats)?;
    let align = load_alignment(&a.alignment, None)?;
    let emb = WordEmbeddingTable::load(&a.embeddings)?;
    let frames = prosody_core::audio::FrameGrid::with_frames(voicing.len(), CANONICAL_RATE);
    let feats = assemble_features(&align, &emb, voicing.voiced(), &frames)?;
    let edits: EditSpec = match &a.constraints {
        Some(p) => read_json(p)?,
        None => EditSpec::default(),
    };
    let track = edits.to_track(voicing.voiced(), &voicing, &grid)?;
    let mut rng = RngStream::new(cfg.generation.seed);
    let (_, contour) = model.generate(
        &feats,
        &ContextBundle::absent(),
        &track,
        voicing.voiced(),
        &grid,
        &mut rng,
        cfg.generation.temperature,
    )?;
    write_json(a.output.as_deref(), &contour)
}

fn baseline_cmd(cfg: &CliConfig, a: BaselineArgs) -> CliResult {
    let contour: F0Contour = read_json(&a.contour)?;
    let align = || -> CliResult<_> {
        let p = a
            .alignment
            .as_ref()
            .ok_or_else(|| Failure::usage(format!("{:?} needs --alignment", a.method)))?;
        Ok(load_alignment(p, None)?)
    };
    let mut rng = RngStream::new(cfg.generation.seed);
    let out = match a.method {
        BaselineMethod::Monotone => monotone(&contour, &stats_or_own(a.stats.as_ref(), &contour)?),
        BaselineMethod::Swap => swap_words(&contour, &align()?, &mut rng)?,
        BaselineMethod::Replace => {
            let p = a.bank.as_ref().ok_or_else(|| Failure::usage("replace needs --bank"))?;
            let bank = WordContourBank::load(p)?;
            replace_words(&contour, &align()?, &bank, &a.speaker, &mut rng)?
        }
        BaselineMethod::Repunct => {
            let target: PunctuationTarget = a
                .target
                .as_deref()
                .ok_or_else(|| Failure::usage("repunct needs --target question|statement"))?
                .parse()?;
            let stats = stats_or_own(a.stats.as_ref(), &contour)?;
            repunctuate_heuristic(&contour, &align()?, target, &stats)?
        }
    };
    write_json(a.output.as_deref(), &out)
}

fn shift_cmd(cfg: &CliConfig, a: ShiftArgs) -> CliResult {
    let audio = load_wav(&a.input)?;
    let target: F0Contour = read_json(&a.target)?;
    let analysis = match &a.analysis {
        Some(p) => read_json(p)?,
        None => prosody_core::pitch::analyze(&audio, cfg.voicing.thresholds())?,
    };
    let out = shift_to_contour(&audio, &analysis, &target)?;
    Ok(write_wav_file(&out, &a.output)?)
}

fn lowpass_cmd(a: LowpassArgs) -> CliResult {
    let audio = load_wav(&a.input)?;
    let contour: F0Contour = read_json(&a.contour)?;
    let out = make_lowpass_stimulus(&audio, &contour)?;
    let bytes = write_wav(&out);
    std::fs::write(&a.output, bytes).map_err(|e| io_fail(&a.output, e))
}

/// Parses a `--system` shorthand. Paths are taken relative to the working
/// directory (the evaluator resolves relative paths against the manifest).
fn parse_system(s: &str) -> CliResult<SystemSpec> {
    let abs = |p: &str| std::path::absolute(p).map_err(|e| io_fail(Path::new(p), e));
    Ok(match s.split_once('=') {
        Some(("model", p)) => SystemSpec::Model {
            checkpoint: abs(p)?,
            temperature: 1.0,
        },
        Some(("contours", p)) => SystemSpec::Contours { dir: abs(p)? },
        Some(("replace", p)) => SystemSpec::Replace { bank: Some(abs(p)?) },
        _ => match s {
            "identity" => SystemSpec::Identity,
            "monotone" => SystemSpec::Monotone,
            "swap" => SystemSpec::Swap,
            "replace" => SystemSpec::Replace { bank: None },
            "repunct_question" => SystemSpec::Repunct {
                target: PunctuationTarget::Question,
            },
            "repunct_statement" => SystemSpec::Repunct {
                target: PunctuationTarget::Statement,
            },
            other => return Err(Failure::usage(format!("unknown system {other:?}"))),
        },
    })
}

fn eval_cmd(cfg: &CliConfig, a: EvalArgs) -> CliResult<i32> {
    let mut config = match &a.systems {
        Some(p) => read_json::<EvalConfig>(p)?,
        None => EvalConfig {
            systems: Vec::new(),
            seed: cfg.generation.seed,
        },
    };
    for s in &a.system {
        config.systems.push(parse_system(s)?);
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if config.systems.is_empty() {
        return Err(Failure::usage("no systems given (--systems or --system)"));
    }
    let manifest = CorpusManifest::load(&a.manifest)?;
    let report = eval_run(&manifest, &config, &a.output)?;
    for agg in &report.aggregate {
        write_json(None, agg)?;
    }
    if report.partial {
        for x in &report.exclusions {
            let line = serde_json::json!({"level": "warning", "command": "eval", "excluded": x});
            eprintln!("{line}");
        }
        return Ok(3);
    }
    Ok(0)
}

fn serve_cmd(cfg: &CliConfig) -> CliResult {
    let s = &cfg.serve;
    let store = ProjectStore::open(&s.root, &s.models)
        .map_err(|e| io_fail(&s.root, e))?
        .with_thresholds(cfg.voicing.thresholds());
    let rt = tokio::runtime::Runtime::new().map_err(|e| io_fail(Path::new("runtime"), e))?;
    rt.block_on(crate::api::serve(Arc::new(store), s.addr))
        .map_err(|e| io_fail(Path::new(&s.addr.to_string()), e))
}

fn bank_cmd(a: BankArgs) -> CliResult {
    let manifest = CorpusManifest::load(&a.manifest)?;
    let mut bank = WordContourBank::new();
    for u in manifest.load_all()? {
        bank.add_utterance(&u.speaker, &u.reference, &u.alignment)?;
    }
    Ok(bank.save(&a.output)?)
}

fn toy_corpus_cmd(a: ToyCorpusArgs) -> CliResult {
    let spec = ToyCorpusSpec {
        utterances: a.utterances,
        seconds: a.seconds,
        seed: a.seed,
    };
    if spec.utterances == 0 || !(spec.seconds >= 0.5) {
        return Err(Failure::usage("toy corpus needs ≥ 1 utterance of ≥ 0.5 s"));
    }
    let m = write_toy_corpus(&a.output, spec)?;
    write_out(None, a.output.join("manifest.json").display().to_string().as_bytes())?;
    eprintln!("wrote {} utterances", m.utterances.len());
    Ok(())
}
