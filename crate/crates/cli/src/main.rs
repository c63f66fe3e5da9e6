//! `hrt` — command-line entry point wiring the engine into reproducible
//! experiment runs.
//!
//! Every subcommand honors `--seed` and `--threads`, resolves its
//! configuration as defaults < JSON config file < explicit flags, and writes
//! a run manifest beside its primary output. Feeding a manifest's
//! `resolved` object back through `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod manifest;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use hrt_core::bench::{BenchConfig, BenchSystem, SystemKind};
use hrt_core::corpus::{self, ToyTask, ToyTaskSpec};
use hrt_core::decode::{self, DecodeConfig, LengthMode};
use hrt_core::masking::{self, MaskGrid};
use hrt_core::model::{Model, ModelConfig, Provenance};
use hrt_core::trainer::{self, TrainConfig, TrainMode};
use hrt_core::vocab::Vocab;
use manifest::ManifestWriter;
use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hrt", version, about = "Hybrid-regressive translation engine", long_about = None)]
struct Cli {
    /// Global RNG seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads inside tensor ops (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (train/valid/test + vocab).
    GenData(GenDataArgs),
    /// Train a model (dense baseline, mask-predict baseline, or hybrid).
    Train(TrainArgs),
    /// Beam-translate a training corpus into distilled targets.
    Distill(DistillArgs),
    /// Translate a source file.
    Translate(TranslateArgs),
    /// Wall-clock benchmark across batch sizes and thread profiles.
    Bench(BenchArgs),
    /// Masking-strategy curves: mask dense hypotheses, fill, score BLEU.
    Maskexp(MaskexpArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// Verify analytic gradients against central differences (64-bit).
    GradCheck(GradCheckArgs),
    /// Print a checkpoint's manifest.
    InspectCheckpoint(InspectArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version also arrive through the error path, with status 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            std::process::exit(2);
        }
    }
    let config = match load_config(cli.config.as_deref()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, &cli, &config),
        Command::Train(a) => cmd_train(a, &cli, &config),
        Command::Distill(a) => cmd_distill(a, &cli, &config),
        Command::Translate(a) => cmd_translate(a, &cli, &config),
        Command::Bench(a) => cmd_bench(a, &cli, &config),
        Command::Maskexp(a) => cmd_maskexp(a, &cli, &config),
        Command::Bleu(a) => cmd_bleu(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::InspectCheckpoint(a) => cmd_inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&raw).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

// Layering helpers: flag value wins, then config file, then default.
fn lay_u64(flag: Option<u64>, cfg: &Value, key: &str, default: u64) -> u64 {
    flag.or_else(|| cfg.get(key).and_then(Value::as_u64)).unwrap_or(default)
}
fn lay_usize(flag: Option<usize>, cfg: &Value, key: &str, default: usize) -> usize {
    flag.or_else(|| cfg.get(key).and_then(Value::as_u64).map(|v| v as usize)).unwrap_or(default)
}
fn lay_f64(flag: Option<f64>, cfg: &Value, key: &str, default: f64) -> f64 {
    flag.or_else(|| cfg.get(key).and_then(Value::as_f64)).unwrap_or(default)
}
fn lay_str(flag: Option<&String>, cfg: &Value, key: &str, default: &str) -> String {
    flag.cloned()
        .or_else(|| cfg.get(key).and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| default.to_string())
}
fn lay_flag(flag: bool, cfg: &Value, key: &str) -> bool {
    flag || cfg.get(key).and_then(Value::as_bool).unwrap_or(false)
}

fn load_vocab_near(path: &Path) -> anyhow::Result<Vocab> {
    Vocab::load(path).map_err(|e| anyhow!("{e}"))
}

// ═══════════════════════════════════════════════════════════════════════
// gen-data
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct GenDataArgs {
    /// Toy task: copy | reverse | cipher_blockswap [default: cipher_blockswap].
    #[arg(long)]
    task: Option<String>,
    /// Total vocabulary size, reserved specials included [default: 72].
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Shortest source length [default: 4].
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest source length [default: 20].
    #[arg(long)]
    max_len: Option<usize>,
    /// Training pairs [default: 50000].
    #[arg(long)]
    train: Option<usize>,
    /// Validation pairs [default: 1000].
    #[arg(long)]
    valid: Option<usize>,
    /// Test pairs [default: 1000].
    #[arg(long)]
    test: Option<usize>,
    /// Output directory for vocab.txt and the six split files.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_gen_data(a: &GenDataArgs, cli: &Cli, cfg: &Value) -> anyhow::Result<()> {
    let task = lay_str(a.task.as_ref(), cfg, "task", "cipher_blockswap");
    let kind = match task.as_str() {
        "copy" => ToyTask::Copy,
        "reverse" => ToyTask::Reverse,
        "cipher_blockswap" => ToyTask::CipherBlockswap,
        other => bail!("unknown task {other:?} (copy | reverse | cipher_blockswap)"),
    };
    let defaults = ToyTaskSpec::default();
    let spec = ToyTaskSpec {
        kind,
        vocab_size: lay_usize(a.vocab_size, cfg, "vocab_size", defaults.vocab_size),
        min_len: lay_usize(a.min_len, cfg, "min_len", defaults.min_len),
        max_len: lay_usize(a.max_len, cfg, "max_len", defaults.max_len),
        train: lay_usize(a.train, cfg, "train", defaults.train),
        valid: lay_usize(a.valid, cfg, "valid", defaults.valid),
        test: lay_usize(a.test, cfg, "test", defaults.test),
        seed: cli.seed,
    };
    let mut writer = ManifestWriter::new("gen-data", cli.seed, cli.threads, &spec)?;
    let generated = corpus::generate_corpus(&spec)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let vocab_path = a.out_dir.join("vocab.txt");
    generated.vocab.save(&vocab_path)?;
    writer.output(&vocab_path);
    for (name, pairs) in
        [("train", &generated.train), ("valid", &generated.valid), ("test", &generated.test)]
    {
        let (s, t) = corpus::write_pair_files(&generated.vocab, pairs, &a.out_dir.join(name))?;
        writer.output(&s);
        writer.output(&t);
    }
    writer.finish(&a.out_dir.join("gen-data"))?;
    eprintln!(
        "wrote {} train / {} valid / {} test pairs under {}",
        generated.train.len(),
        generated.valid.len(),
        generated.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// train
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct TrainArgs {
    /// at | cmlm | hrt [default: hrt].
    #[arg(long)]
    mode: Option<String>,
    /// Directory produced by gen-data (vocab.txt, train.src, train.tgt).
    #[arg(long)]
    data_dir: PathBuf,
    /// Distilled target file (defaults to <data-dir>/train.dist when it
    /// exists and p_raw < 1).
    #[arg(long)]
    distilled: Option<PathBuf>,
    /// Total training steps T [default: 10000].
    #[arg(long)]
    steps: Option<u64>,
    /// Pairs per step [default: 16].
    #[arg(long)]
    batch: Option<usize>,
    /// Chunk size [default: 2].
    #[arg(long)]
    k: Option<usize>,
    /// Raw-target probability under mixed distillation [default: 0.5; 1.0 for at].
    #[arg(long)]
    p_raw: Option<f64>,
    /// Curriculum exponent [default: 1.0].
    #[arg(long)]
    lambda: Option<f64>,
    /// Peak learning rate [default: 3e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// Warmup steps [default: 400].
    #[arg(long)]
    warmup: Option<u64>,
    /// Label smoothing [default: 0.1].
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Fine-tune source checkpoint; omit for random init (the -FT ablation).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Disable the curriculum: primary tasks from step one (-CL ablation).
    #[arg(long)]
    no_curriculum: bool,
    /// Model width [default: 64].
    #[arg(long)]
    dim: Option<usize>,
    /// Feed-forward width [default: 128].
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    heads: Option<usize>,
    /// Encoder layers [default: 2].
    #[arg(long)]
    enc_layers: Option<usize>,
    /// Decoder layers [default: 2].
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Longest supported position [default: 256].
    #[arg(long)]
    max_position: Option<usize>,
    /// Dropout rate during training [default: 0].
    #[arg(long)]
    dropout: Option<f64>,
    /// Log cadence in steps [default: 200].
    #[arg(long)]
    log_every: Option<u64>,
    /// Periodic checkpoint cadence, 0 = off [default: 0].
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ResolvedTrain {
    mode: String,
    data_dir: String,
    distilled: Option<String>,
    init: Option<String>,
    model: ModelConfig,
    train: TrainConfig,
}

fn cmd_train(a: &TrainArgs, cli: &Cli, cfg: &Value) -> anyhow::Result<()> {
    let mode_s = lay_str(a.mode.as_ref(), cfg, "mode", "hrt");
    let mode = match mode_s.as_str() {
        "at" => TrainMode::AtOnly,
        "cmlm" => TrainMode::CmlmOnly,
        "hrt" => TrainMode::Hrt,
        other => bail!("unknown mode {other:?} (at | cmlm | hrt)"),
    };
    let vocab = load_vocab_near(&a.data_dir.join("vocab.txt"))?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        mode,
        total_steps: lay_u64(a.steps, cfg, "steps", defaults.total_steps),
        lambda: lay_f64(a.lambda, cfg, "lambda", defaults.lambda),
        p_raw: lay_f64(
            a.p_raw,
            cfg,
            "p_raw",
            // the dense baseline defaults to raw-only; the others mix
            if mode == TrainMode::AtOnly { 1.0 } else { 0.5 },
        ),
        batch_pairs: lay_usize(a.batch, cfg, "batch", defaults.batch_pairs),
        peak_lr: lay_f64(a.lr, cfg, "lr", defaults.peak_lr),
        warmup_steps: lay_u64(a.warmup, cfg, "warmup", defaults.warmup_steps),
        label_smoothing: lay_f64(a.label_smoothing, cfg, "label_smoothing", 0.1),
        seed: cli.seed,
        k: lay_usize(a.k, cfg, "k", 2),
        curriculum: !lay_flag(a.no_curriculum, cfg, "no_curriculum"),
        log_every: lay_u64(a.log_every, cfg, "log_every", defaults.log_every),
        checkpoint_every: lay_u64(a.checkpoint_every, cfg, "checkpoint_every", 0),
    };
    let mut mc = ModelConfig {
        vocab_size: vocab.size(),
        model_dim: lay_usize(a.dim, cfg, "dim", 64),
        ffn_dim: lay_usize(a.ffn_dim, cfg, "ffn_dim", 128),
        heads: lay_usize(a.heads, cfg, "heads", 4),
        encoder_layers: lay_usize(a.enc_layers, cfg, "enc_layers", 2),
        decoder_layers: lay_usize(a.dec_layers, cfg, "dec_layers", 2),
        max_position: lay_usize(a.max_position, cfg, "max_position", 256),
        dropout: lay_f64(a.dropout, cfg, "dropout", 0.0),
        chunk_size: tc.k,
        length_head: mode == TrainMode::CmlmOnly,
    };

    let distilled = a.distilled.clone().or_else(|| {
        let p = a.data_dir.join("train.dist");
        (tc.p_raw < 1.0 && p.exists()).then_some(p)
    });
    let data = trainer::load_pairs(
        &vocab,
        &a.data_dir.join("train.src"),
        &a.data_dir.join("train.tgt"),
        distilled.as_deref(),
    )?;

    let init_model = match &a.init {
        None => None,
        Some(p) => Some(Model::<f32>::load(p)?),
    };
    if let Some(src) = &init_model {
        // fine-tuning adopts the source architecture; head presence still
        // follows the training mode
        mc = ModelConfig {
            length_head: mode == TrainMode::CmlmOnly,
            chunk_size: tc.k,
            ..src.config.clone()
        };
    }

    let resolved = ResolvedTrain {
        mode: mode_s,
        data_dir: a.data_dir.display().to_string(),
        distilled: distilled.as_ref().map(|p| p.display().to_string()),
        init: a.init.as_ref().map(|p| p.display().to_string()),
        model: mc.clone(),
        train: tc.clone(),
    };
    let mut writer = ManifestWriter::new("train", cli.seed, cli.threads, &resolved)?;

    let mut model = Model::<f32>::new(mc, cli.seed)?;
    if let Some(src) = &init_model {
        if src.config.length_head == model.config.length_head {
            model.init_from(src).map_err(|e| anyhow!("{e}"))?;
        } else {
            init_shared_prefix(&mut model, src);
        }
    }
    model.provenance = Some(Provenance {
        mode: tc.mode.name().into(),
        p_raw: tc.p_raw,
        label_smoothing: tc.label_smoothing,
        init: a
            .init
            .as_ref()
            .map(|p| format!("finetune:{}", p.display()))
            .unwrap_or_else(|| "random".into()),
        seed: cli.seed,
    });

    let log_every = tc.log_every;
    let outcome = trainer::train(&mut model, &data, &tc, Some(&a.out), |r| {
        if log_every > 0 {
            eprintln!("{}", r.log_line());
        }
    })?;
    model.save(&a.out)?;
    writer.output(&a.out);
    for c in &outcome.checkpoints {
        writer.output(c);
    }
    if let Some(r) = &outcome.final_report {
        writer.note("final_loss", serde_json::to_value(r)?);
    }
    writer.finish(&a.out)?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

/// Copy parameters with matching names and shapes (fine-tune across a
/// length-head mismatch). Extra parameters keep their fresh init.
fn init_shared_prefix(dst: &mut Model<f32>, src: &Model<f32>) {
    for pid in 0..dst.store.len() {
        let name = dst.store.entry(pid).name.clone();
        let shape = dst.store.entry(pid).shape.clone();
        if let Some(se) = src.store.iter().find(|e| e.name == name && e.shape == shape) {
            let data = se.data.as_ref().clone();
            dst.store.set(pid, data);
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════
// distill
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct DistillArgs {
    /// Dense (autoregressive) checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary file (defaults to vocab.txt beside the source file).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    /// Beam width [default: 5].
    #[arg(long)]
    beam: Option<usize>,
    /// Sentences per decoding batch [default: 32].
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ResolvedDistill {
    model: String,
    src: String,
    beam: usize,
    batch: usize,
}

fn cmd_distill(a: &DistillArgs, cli: &Cli, cfg: &Value) -> anyhow::Result<()> {
    let beam = lay_usize(a.beam, cfg, "beam", 5);
    let batch = lay_usize(a.batch, cfg, "batch", 32);
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.src.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = load_vocab_near(&vocab_path)?;
    let model = Model::<f32>::load(&a.model)?;
    let sources = corpus::read_id_lines(&vocab, &a.src)?;
    let resolved = ResolvedDistill {
        model: a.model.display().to_string(),
        src: a.src.display().to_string(),
        beam,
        batch,
    };
    let mut writer = ManifestWriter::new("distill", cli.seed, cli.threads, &resolved)?;
    let report = corpus::distill(&model, &vocab, &sources, beam, batch, &a.out)?;
    writer.output(&a.out);
    writer.note("lines", report.lines.into());
    writer.note("empty_flagged", report.empty_flagged.into());
    writer.finish(&a.out)?;
    eprintln!("distilled {} lines ({} empty, flagged)", report.lines, report.empty_flagged);
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// translate
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    /// at | hrt | cmlm [default: hrt].
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dense beam width (at) and length-candidate beam (cmlm) [default: 5].
    #[arg(long)]
    beam: Option<usize>,
    /// Chunk size [default: 2].
    #[arg(long)]
    k: Option<usize>,
    /// Stage-I beam width (hrt) [default: 5].
    #[arg(long)]
    bat: Option<usize>,
    /// Stage-II beam width (hrt) [default: 1].
    #[arg(long)]
    bnat: Option<usize>,
    /// Mask-predict iterations (cmlm) [default: 10].
    #[arg(long)]
    iterations: Option<usize>,
    /// predicted | oracle (cmlm) [default: predicted].
    #[arg(long)]
    length_mode: Option<String>,
    /// Reference file for oracle lengths (cmlm).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Sentences per decoding batch [default: 32].
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Serialize)]
struct ResolvedTranslate {
    model: String,
    system: String,
    src: String,
    beam: usize,
    k: usize,
    bat: usize,
    bnat: usize,
    iterations: usize,
    length_mode: String,
    batch: usize,
}

fn cmd_translate(a: &TranslateArgs, cli: &Cli, cfg: &Value) -> anyhow::Result<()> {
    let system = lay_str(a.system.as_ref(), cfg, "system", "hrt");
    let beam = lay_usize(a.beam, cfg, "beam", 5);
    let k = lay_usize(a.k, cfg, "k", 2);
    let bat = lay_usize(a.bat, cfg, "bat", 5);
    let bnat = lay_usize(a.bnat, cfg, "bnat", 1);
    let iterations = lay_usize(a.iterations, cfg, "iterations", 10);
    let length_mode_s = lay_str(a.length_mode.as_ref(), cfg, "length_mode", "predicted");
    let batch = lay_usize(a.batch, cfg, "batch", 32).max(1);
    let length_mode = match length_mode_s.as_str() {
        "predicted" => LengthMode::Predicted,
        "oracle" => LengthMode::Oracle,
        other => bail!("unknown length mode {other:?} (predicted | oracle)"),
    };
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.src.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = load_vocab_near(&vocab_path)?;
    let model = Model::<f32>::load(&a.model)?;
    let sources = corpus::read_id_lines(&vocab, &a.src)?;
    let oracle_lens: Option<Vec<usize>> = match (&a.reference, length_mode) {
        (Some(p), LengthMode::Oracle) => {
            Some(corpus::read_id_lines(&vocab, p)?.iter().map(|l| l.len()).collect())
        }
        (None, LengthMode::Oracle) => bail!("--length-mode oracle needs --reference"),
        _ => None,
    };

    let resolved = ResolvedTranslate {
        model: a.model.display().to_string(),
        system: system.clone(),
        src: a.src.display().to_string(),
        beam,
        k,
        bat,
        bnat,
        iterations,
        length_mode: length_mode_s,
        batch,
    };
    let mut writer = ManifestWriter::new("translate", cli.seed, cli.threads, &resolved)?;

    let mut lines = Vec::with_capacity(sources.len());
    let mut calls = 0u64;
    let started = std::time::Instant::now();
    for (ci, chunk) in sources.chunks(batch).enumerate() {
        match system.as_str() {
            "at" => {
                for t in decode::translate_at_batch(&model, chunk, beam, None)? {
                    calls += t.stats.decoder_calls as u64;
                    lines.push(vocab.decode_line(&t.tokens)?);
                }
            }
            "hrt" => {
                let dc = DecodeConfig::new(k, bat, bnat)?;
                for o in decode::hrt_translate_batch(&model, chunk, &dc)? {
                    calls += o.translation.stats.decoder_calls as u64;
                    lines.push(vocab.decode_line(&o.translation.tokens)?);
                }
            }
            "cmlm" => {
                let ol = oracle_lens
                    .as_ref()
                    .map(|ls| ls[ci * batch..(ci * batch + chunk.len()).min(ls.len())].to_vec());
                for o in decode::cmlm_translate_batch(
                    &model,
                    chunk,
                    iterations,
                    beam,
                    length_mode,
                    ol.as_deref(),
                )? {
                    calls += o.translation.stats.decoder_calls as u64;
                    lines.push(vocab.decode_line(&o.translation.tokens)?);
                }
            }
            other => bail!("unknown system {other:?} (at | hrt | cmlm)"),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    corpus::write_lines(&a.out, &lines)?;
    writer.output(&a.out);
    writer.note("wall_seconds", serde_json::json!(secs));
    writer.note("decoder_calls", calls.into());
    writer.finish(&a.out)?;
    eprintln!("translated {} lines in {:.2}s ({} decoder calls)", lines.len(), secs, calls);
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// bench
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct BenchArgs {
    /// Dense reference checkpoint.
    #[arg(long)]
    at: PathBuf,
    /// Hybrid checkpoint (optional).
    #[arg(long)]
    hrt: Option<PathBuf>,
    /// Mask-predict checkpoint (optional).
    #[arg(long)]
    cmlm: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    /// Evaluate only the first N corpus lines.
    #[arg(long)]
    limit: Option<usize>,
    /// Comma-separated batch sizes [default: 1,8,16,32].
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Comma-separated thread counts [default: 1,4].
    #[arg(long)]
    thread_profiles: Option<String>,
    /// Timed runs per cell after one warmup [default: 5].
    #[arg(long)]
    runs: Option<usize>,
    /// Dense reference beam width [default: 5].
    #[arg(long)]
    beam: Option<usize>,
    /// Chunk size [default: 2].
    #[arg(long)]
    k: Option<usize>,
    /// Stage-I beam width [default: 5].
    #[arg(long)]
    bat: Option<usize>,
    /// Stage-II beam width [default: 1].
    #[arg(long)]
    bnat: Option<usize>,
    /// Mask-predict iterations [default: 10].
    #[arg(long)]
    iterations: Option<usize>,
    /// Also measure parallel efficiency over the sequence axis.
    #[arg(long)]
    efficiency: bool,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ResolvedBench {
    at: String,
    hrt: Option<String>,
    cmlm: Option<String>,
    src: String,
    limit: Option<usize>,
    batch_sizes: Vec<usize>,
    thread_profiles: Vec<usize>,
    runs: usize,
    beam: usize,
    k: usize,
    bat: usize,
    bnat: usize,
    iterations: usize,
}

fn parse_list(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| anyhow!("bad list entry {p:?}: {e}")))
        .collect()
}

fn cmd_bench(a: &BenchArgs, cli: &Cli, cfg: &Value) -> anyhow::Result<()> {
    let batch_sizes = match &a.batch_sizes {
        Some(s) => parse_list(s)?,
        None => cfg
            .get("batch_sizes")
            .and_then(Value::as_array)
            .map(|v| v.iter().filter_map(Value::as_u64).map(|x| x as usize).collect())
            .unwrap_or_else(|| vec![1, 8, 16, 32]),
    };
    let thread_profiles = match &a.thread_profiles {
        Some(s) => parse_list(s)?,
        None => cfg
            .get("thread_profiles")
            .and_then(Value::as_array)
            .map(|v| v.iter().filter_map(Value::as_u64).map(|x| x as usize).collect())
            .unwrap_or_else(|| vec![1, 4]),
    };
    let runs = lay_usize(a.runs, cfg, "runs", 5);
    let beam = lay_usize(a.beam, cfg, "beam", 5);
    let k = lay_usize(a.k, cfg, "k", 2);
    let bat = lay_usize(a.bat, cfg, "bat", 5);
    let bnat = lay_usize(a.bnat, cfg, "bnat", 1);
    let iterations = lay_usize(a.iterations, cfg, "iterations", 10);

    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.src.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = load_vocab_near(&vocab_path)?;
    let mut corpus_lines = corpus::read_id_lines(&vocab, &a.src)?;
    if let Some(n) = a.limit {
        corpus_lines.truncate(n);
    }

    let mut systems = vec![BenchSystem {
        label: "at".into(),
        kind: SystemKind::At { beam },
        model: Model::<f32>::load(&a.at)?,
    }];
    if let Some(p) = &a.hrt {
        systems.push(BenchSystem {
            label: format!("hrt-k{k}"),
            kind: SystemKind::Hrt { k, b_at: bat, b_nat: bnat },
            model: Model::<f32>::load(p)?,
        });
    }
    if let Some(p) = &a.cmlm {
        systems.push(BenchSystem {
            label: format!("cmlm-i{iterations}"),
            kind: SystemKind::Cmlm { iterations, beam },
            model: Model::<f32>::load(p)?,
        });
    }

    let resolved = ResolvedBench {
        at: a.at.display().to_string(),
        hrt: a.hrt.as_ref().map(|p| p.display().to_string()),
        cmlm: a.cmlm.as_ref().map(|p| p.display().to_string()),
        src: a.src.display().to_string(),
        limit: a.limit,
        batch_sizes: batch_sizes.clone(),
        thread_profiles: thread_profiles.clone(),
        runs,
        beam,
        k,
        bat,
        bnat,
        iterations,
    };
    let mut writer = ManifestWriter::new("bench", cli.seed, cli.threads, &resolved)?;

    let bc = BenchConfig { batch_sizes, thread_profiles: thread_profiles.clone(), runs };
    let report = hrt_core::bench::run_bench(&systems, &corpus_lines, &bc)?;
    print!("{}", report.table());

    let mut report_json = serde_json::to_value(&report)?;
    if a.efficiency {
        let rows = hrt_core::bench::measure_parallel_efficiency(
            &systems[0].model,
            &bc.batch_sizes,
            &[1, 4, 8, 16],
            thread_profiles[0],
            runs,
        )?;
        println!("\nparallel efficiency (threads = {}):", thread_profiles[0]);
        println!("{:>6} {:>6} {:>10} {:>10} {:>8}", "B", "N", "T(1) ms", "T(N) ms", "E");
        for r in &rows {
            println!(
                "{:>6} {:>6} {:>10.3} {:>10.3} {:>8.3}",
                r.batch_size, r.target_len, r.t_len1_ms, r.t_lenn_ms, r.efficiency
            );
        }
        report_json["efficiency"] = serde_json::to_value(&rows)?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&report_json)?)?;
    writer.output(&a.out);
    writer.finish(&a.out)?;
    eprintln!("report written to {}", a.out.display());
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// maskexp
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct MaskexpArgs {
    /// Mask-predict checkpoint used for filling.
    #[arg(long)]
    cmlm: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    /// Dense-system hypotheses to mask (one line per source).
    #[arg(long)]
    hyp: PathBuf,
    /// References for BLEU.
    #[arg(long)]
    reference: PathBuf,
    /// Comma-separated masking rates [default: 0.1,...,1.0].
    #[arg(long)]
    rates: Option<String>,
    /// Comma-separated chunk sizes [default: 2,3,4].
    #[arg(long)]
    chunk_sizes: Option<String>,
    /// Comma-separated RANDOM seeds [default: 11,22,33].
    #[arg(long)]
    random_seeds: Option<String>,
    /// Sentences per decoding batch [default: 32].
    #[arg(long)]
    batch: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional plot-ready TSV path.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResolvedMaskexp {
    cmlm: String,
    src: String,
    hyp: String,
    reference: String,
    rates: Vec<f64>,
    chunk_sizes: Vec<usize>,
    random_seeds: Vec<u64>,
    batch: usize,
}

fn cmd_maskexp(a: &MaskexpArgs, cli: &Cli, cfg: &Value) -> anyhow::Result<()> {
    let defaults = MaskGrid::default();
    let rates: Vec<f64> = match &a.rates {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| anyhow!("bad rate {p:?}: {e}")))
            .collect::<anyhow::Result<_>>()?,
        None => defaults.rates.clone(),
    };
    let chunk_sizes = match &a.chunk_sizes {
        Some(s) => parse_list(s)?,
        None => defaults.chunk_sizes.clone(),
    };
    let random_seeds: Vec<u64> = match &a.random_seeds {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| anyhow!("bad seed {p:?}: {e}")))
            .collect::<anyhow::Result<_>>()?,
        None => defaults.random_seeds.clone(),
    };
    let batch = lay_usize(a.batch, cfg, "batch", 32);

    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.src.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = load_vocab_near(&vocab_path)?;
    let model = Model::<f32>::load(&a.cmlm)?;
    let srcs = corpus::read_id_lines(&vocab, &a.src)?;
    let hyps = corpus::read_id_lines(&vocab, &a.hyp)?;
    let refs = corpus::read_text_lines(&a.reference)?;

    let resolved = ResolvedMaskexp {
        cmlm: a.cmlm.display().to_string(),
        src: a.src.display().to_string(),
        hyp: a.hyp.display().to_string(),
        reference: a.reference.display().to_string(),
        rates: rates.clone(),
        chunk_sizes: chunk_sizes.clone(),
        random_seeds: random_seeds.clone(),
        batch,
    };
    let mut writer = ManifestWriter::new("maskexp", cli.seed, cli.threads, &resolved)?;

    let grid = MaskGrid { rates, chunk_sizes, random_seeds };
    let points = masking::fill_and_score_grid(&model, &vocab, &srcs, &hyps, &refs, &grid, batch)?;
    std::fs::write(&a.out, masking::curve_csv(&points))?;
    writer.output(&a.out);
    if let Some(tsv) = &a.tsv {
        std::fs::write(tsv, masking::curve_tsv(&points))?;
        writer.output(tsv);
    }
    writer.finish(&a.out)?;
    for p in points.iter().filter(|p| p.seed.is_none()) {
        println!("{:<8} rate {:.2}  BLEU {:.2}", p.strategy.name(), p.rate, p.bleu);
    }
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// bleu / grad-check / inspect
// ═══════════════════════════════════════════════════════════════════════

#[derive(Args)]
struct BleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Add-one smoothing on orders >= 2.
    #[arg(long)]
    smooth: bool,
}

fn cmd_bleu(a: &BleuArgs) -> anyhow::Result<()> {
    let score = corpus::bleu_files(&a.hyp, &a.reference, a.smooth)?;
    println!("{score:.2}");
    Ok(())
}

#[derive(Args)]
struct GradCheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Worst acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

fn cmd_grad_check(a: &GradCheckArgs) -> anyhow::Result<()> {
    let mut worst: f64 = 0.0;
    println!("{:<32} {:>12}", "op", "max rel err");
    for (name, err) in hrt_core::tensor::standard_op_grad_checks::<f64>(a.eps)? {
        println!("{name:<32} {err:>12.3e}");
        worst = worst.max(err);
    }
    let model_checks = hrt_core::model::full_model_grad_check(1e-5)?;
    let model_worst = model_checks.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    println!(
        "{:<32} {:>12.3e}  ({} parameters)",
        "model loss (all params)",
        model_worst,
        model_checks.len()
    );
    worst = worst.max(model_worst);
    if worst >= a.threshold {
        bail!("worst relative error {worst:.3e} exceeds threshold {:.1e}", a.threshold);
    }
    println!("all gradients within {:.1e}", a.threshold);
    Ok(())
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn cmd_inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let model = Model::<f32>::load(&a.model)?;
    println!("config: {}", serde_json::to_string_pretty(&model.config)?);
    println!("step: {}", model.step);
    match &model.provenance {
        Some(p) => println!("provenance: {}", serde_json::to_string(p)?),
        None => println!("provenance: none"),
    }
    println!("shared decoder: {}", model.shared_decoder_check());
    println!("parameters: {} tensors, {} scalars", model.store.len(), model.param_count());
    for e in model.store.iter() {
        println!("  {:<28} {:?}", e.name, e.shape);
    }
    Ok(())
}
