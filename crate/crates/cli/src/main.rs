//! `synccap`: generate data, train, evaluate, caption with attention export,
//! and render attention heatmaps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! unreadable inputs, invalid configuration).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use synccap_core::dataset::{generate_corpus, keyword_table, load_jsonl, save_jsonl, Sample, Segment};
use synccap_core::eval::{evaluate, MetricSet};
use synccap_core::metrics::{write_word_csv, DEFAULT_TAU};
use synccap_core::trainer::{
    best_path, model_config_from_path, resume, split_holdout, train, EpochLog, TrainConfig, TrainOutcome,
};
use synccap_core::viz::{render_svg, write_centers_csv, AttentionMatrix, HeatmapSpec, RowSpan};
use synccap_core::{Checkpoint, ModelConfig};

#[derive(Parser)]
#[command(name = "synccap", version, about = "Synchronous motion captioning with controlled attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic compositional corpus as JSONL.
    GenData(GenData),
    /// Train a model (or resume training) on a JSONL corpus.
    Train(TrainArgs),
    /// Caption a dataset and report BLEU, ROUGE-L and synchronization scores.
    Eval(EvalArgs),
    /// Caption motions and optionally export attention maps.
    Caption(CaptionArgs),
    /// Render an attention CSV as an SVG heatmap.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    min_prims: usize,
    #[arg(long, default_value_t = 3)]
    max_prims: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation JSONL; without it `valid_fraction` of --data is held out.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Model configuration (TOML or JSON). Ignored with --resume.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training configuration (TOML or JSON).
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Final checkpoint path; the best one goes next to it as `*.best.*`.
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    /// Continue from this checkpoint up to the configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epoch log (JSONL); defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of bleu, rouge, sync.
    #[arg(long, default_value = "bleu,rouge,sync")]
    metrics: String,
    /// Attention mass of the predicted interval.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// JSON object mapping segment labels to caption words; defaults to the
    /// synthetic generator's table.
    #[arg(long)]
    keywords: Option<PathBuf>,
    /// Report destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-word synchronization diagnostics as CSV.
    #[arg(long)]
    words_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving `<id>.attention.csv` and `<id>.centers.csv`.
    #[arg(long)]
    emit_attention: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    attention: PathBuf,
    #[arg(long)]
    svg: PathBuf,
    /// JSON array of ground-truth segments drawn as bands.
    #[arg(long)]
    segments: Option<PathBuf>,
    /// JSON array of `{start, end, label?}` row spans averaged into phrases.
    #[arg(long)]
    aggregate: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    tick_stride: usize,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SYNCCAP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Viz(a) => cmd_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn read_data(path: &Path) -> Result<Vec<Sample>, Failure> {
    let data = load_jsonl(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    if data.is_empty() {
        return Err(usage(anyhow!("{} contains no samples", path.display())));
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display())).map_err(usage)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(runtime)
}

fn gen_data(a: GenData) -> CmdResult {
    let corpus = generate_corpus(a.n, a.seed, a.min_prims, a.max_prims).map_err(usage)?;
    save_jsonl(&corpus, &a.out).with_context(|| format!("writing {}", a.out.display())).map_err(runtime)?;
    log::info!("wrote {} samples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn print_epoch(e: &EpochLog) {
    let bleu = e.valid_bleu4.map_or_else(|| "-".to_string(), |b| format!("{b:.4}"));
    println!(
        "epoch {} loss_lang {:.6} loss_0 {:.6} loss_m {:.6} total {:.6} valid_bleu4 {bleu}",
        e.epoch, e.train.loss_lang, e.train.loss_0, e.train.loss_m, e.train.total
    );
    let _ = io::stdout().flush();
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let data = read_data(&a.data)?;
    let mut cfg = match &a.train_config {
        Some(p) => TrainConfig::from_path(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg.validate().map_err(usage)?;
    let ckpt_out = a
        .ckpt_out
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| usage(anyhow!("no checkpoint destination: pass --ckpt-out or set `checkpoint`")))?;

    let valid_data;
    let (train_set, valid_set): (&[Sample], &[Sample]) = match &a.valid {
        Some(p) => {
            valid_data = read_data(p)?;
            (&data, &valid_data)
        }
        None => split_holdout(&data, cfg.valid_fraction),
    };

    let outcome: TrainOutcome = match &a.resume {
        Some(p) => {
            let state = load_checkpoint(p)?;
            if state.epoch >= cfg.epochs {
                return Err(usage(anyhow!(
                    "checkpoint already completed {} epochs; raise --epochs to continue",
                    state.epoch
                )));
            }
            let best_file = best_path(p);
            let best = if best_file.exists() {
                Some(load_checkpoint(&best_file)?)
            } else {
                None
            };
            resume(state, best, train_set, valid_set, &cfg, print_epoch).map_err(runtime)?
        }
        None => {
            let model_cfg = match &a.model_config {
                Some(p) => model_config_from_path(p)
                    .with_context(|| format!("reading {}", p.display()))
                    .map_err(usage)?,
                None => ModelConfig::default(),
            };
            train(train_set, valid_set, model_cfg, &cfg, print_epoch).map_err(|e| match e {
                synccap_core::Error::Config(_) => usage(e),
                other => runtime(other),
            })?
        }
    };

    let mut w = create(&ckpt_out)?;
    outcome.final_checkpoint.write(&mut w).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    let best = best_path(&ckpt_out);
    let mut w = create(&best)?;
    outcome.best_checkpoint.write(&mut w).map_err(runtime)?;
    w.flush().map_err(runtime)?;

    let log_path = a.log.clone().unwrap_or_else(|| ckpt_out.with_extension("log.jsonl"));
    let append = a.resume.is_some() && a.log.is_none() && log_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))
        .map_err(runtime)?;
    outcome.log.write_jsonl(BufWriter::new(file)).map_err(runtime)?;
    log::info!("saved {} and {}", ckpt_out.display(), best.display());
    Ok(())
}

fn read_keywords(path: Option<&Path>) -> Result<BTreeMap<String, String>, Failure> {
    match path {
        None => Ok(keyword_table()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("{}: expected a JSON object of label -> word", p.display()))
                .map_err(usage)
        }
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let metrics = MetricSet::parse(&a.metrics).map_err(usage)?;
    if !(a.tau > 0.0 && a.tau <= 1.0) {
        return Err(usage(anyhow!("--tau must lie in (0, 1]")));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_data(&a.data)?;
    if metrics.sync {
        if let Some(s) = data.iter().find(|s| s.segments.is_none()) {
            return Err(usage(anyhow!(
                "sync metrics need segment annotations, but sample {} in {} has none; \
                 rerun with --metrics bleu,rouge",
                s.id,
                a.data.display()
            )));
        }
    }
    let keywords = read_keywords(a.keywords.as_deref())?;
    let (report, _) = evaluate(&ckpt.model, &ckpt.vocab, &data, metrics, &keywords, a.tau).map_err(|e| match e {
        synccap_core::Error::Config(_) => usage(e),
        other => runtime(other),
    })?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{json}").map_err(runtime)?;
            w.flush().map_err(runtime)?;
        }
        None => println!("{json}"),
    }
    if let Some(p) = &a.words_csv {
        let sync = report
            .sync
            .as_ref()
            .ok_or_else(|| usage(anyhow!("--words-csv needs the sync metric")))?;
        let mut w = create(p)?;
        write_word_csv(&sync.words, &mut w).map_err(runtime)?;
        w.flush().map_err(runtime)?;
    }
    Ok(())
}

/// File-name-safe form of a sample id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_caption(a: CaptionArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_data(&a.input)?;
    if let Some(dir) = &a.emit_attention {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    let caps = synccap_core::eval::caption_all(&ckpt.model, &ckpt.vocab, &data).map_err(runtime)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for c in &caps {
        writeln!(out, "{}\t{}", c.id, c.text()).map_err(runtime)?;
        if let Some(dir) = &a.emit_attention {
            let tokens: Vec<String> =
                c.generation.emitted.iter().map(|&t| ckpt.vocab.token_str(t).to_string()).collect();
            let stem = file_stem(&c.id);
            let m = AttentionMatrix::from_map(&tokens, &c.generation.attention).map_err(runtime)?;
            let mut w = create(&dir.join(format!("{stem}.attention.csv")))?;
            m.write_csv(&mut w).map_err(runtime)?;
            w.flush().map_err(runtime)?;
            let mut w = create(&dir.join(format!("{stem}.centers.csv")))?;
            write_centers_csv(&tokens, &c.generation.attention, &mut w).map_err(runtime)?;
            w.flush().map_err(runtime)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

fn cmd_viz(a: VizArgs) -> CmdResult {
    let file = File::open(&a.attention)
        .with_context(|| format!("reading {}", a.attention.display()))
        .map_err(usage)?;
    let mut m = AttentionMatrix::read_csv(file)
        .with_context(|| format!("parsing {}", a.attention.display()))
        .map_err(usage)?;
    if let Some(p) = &a.aggregate {
        let spans: Vec<RowSpan> = read_json(p)?;
        m = m.aggregate(&spans).map_err(usage)?;
    }
    let segments: Vec<Segment> = match &a.segments {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let spec = HeatmapSpec {
        tick_stride: a.tick_stride,
        segments,
        ..Default::default()
    };
    let svg = render_svg(&m, &spec).map_err(usage)?;
    let mut w = create(&a.svg)?;
    w.write_all(svg.as_bytes()).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    Ok(())
}
