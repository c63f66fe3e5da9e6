//! Training: mixed distillation sampling, curriculum batch splitting, joint
//! gradient accumulation over the task sub-batches, Adam, checkpointing.
//!
//! One step builds every sub-batch on a single graph (the encoder runs once
//! per pair), sums the cross-entropies, and performs exactly one optimizer
//! update. Sub-batch losses are normalized by the total non-ignored token
//! count of the whole accumulated batch, so task weighting stays implicit.

use crate::error::{Error, Result};
use crate::model::{DecInput, Model, LEN_CLASSES, LEN_OFFSET_RANGE};
use crate::tasks::{self, CurriculumState, Task, TrainingSample};
use crate::vocab::{Vocab, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

// ═══════════════════════════════════════════════════════════════════════
// Config and data
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    AtOnly,
    CmlmOnly,
    Hrt,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::AtOnly => "at_only",
            TrainMode::CmlmOnly => "cmlm_only",
            TrainMode::Hrt => "hrt",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Total steps T. Zero is a valid no-op run (fine-tune smoke check).
    pub total_steps: u64,
    pub lambda: f64,
    /// Probability of training on the raw target rather than the distilled
    /// one.
    pub p_raw: f64,
    /// Pairs per step before task expansion.
    pub batch_pairs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub k: usize,
    /// Curriculum switch: when false, p_k is pinned at 1 (primary tasks
    /// only) — the "-CL" ablation.
    pub curriculum: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Hrt,
            total_steps: 10_000,
            lambda: 1.0,
            p_raw: 0.5,
            batch_pairs: 16,
            peak_lr: 3e-3,
            warmup_steps: 400,
            label_smoothing: 0.1,
            seed: 1,
            k: 2,
            curriculum: true,
            log_every: 200,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_raw) {
            return Err(Error::Config(format!("p_raw {} outside [0,1]", self.p_raw)));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be positive".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config("lambda must be positive".into()));
        }
        Ok(())
    }
}

/// One sentence pair with an optional distilled target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub src: Vec<u32>,
    pub tgt_raw: Vec<u32>,
    pub tgt_distilled: Option<Vec<u32>>,
}

/// Mixed distillation: raw target with probability `p_raw`, distilled
/// otherwise.
pub fn sample_target<'a, R: Rng>(
    pair: &'a ParallelPair,
    p_raw: f64,
    rng: &mut R,
) -> Result<&'a [u32]> {
    let take_raw = p_raw >= 1.0 || (p_raw > 0.0 && rng.gen::<f64>() < p_raw);
    if take_raw {
        return Ok(&pair.tgt_raw);
    }
    match pair.tgt_distilled.as_deref() {
        // A degenerate (empty) distilled line falls back to the raw target.
        Some(d) if !d.is_empty() => Ok(d),
        Some(_) => Ok(&pair.tgt_raw),
        None => Err(Error::Train(format!(
            "p_raw = {p_raw} requires distilled targets, but a pair has none"
        ))),
    }
}

/// Load aligned corpus files into pairs.
pub fn load_pairs(
    vocab: &Vocab,
    src: &Path,
    tgt: &Path,
    distilled: Option<&Path>,
) -> Result<Vec<ParallelPair>> {
    let srcs = crate::corpus::read_id_lines(vocab, src)?;
    let tgts = crate::corpus::read_id_lines(vocab, tgt)?;
    if srcs.len() != tgts.len() {
        return Err(Error::Corpus(format!(
            "line-count mismatch: {} sources vs {} targets",
            srcs.len(),
            tgts.len()
        )));
    }
    let dist = match distilled {
        None => None,
        Some(p) => {
            let d = crate::corpus::read_id_lines(vocab, p)?;
            if d.len() != srcs.len() {
                return Err(Error::Corpus(format!(
                    "line-count mismatch: {} sources vs {} distilled",
                    srcs.len(),
                    d.len()
                )));
            }
            // Distilled lines may carry a bare EOS marker for empty outputs.
            Some(
                d.into_iter()
                    .map(|mut line| {
                        line.retain(|&t| t != EOS);
                        line
                    })
                    .collect::<Vec<_>>(),
            )
        }
    };
    let mut out = Vec::with_capacity(srcs.len());
    for (i, (s, t)) in srcs.into_iter().zip(tgts).enumerate() {
        out.push(ParallelPair {
            src: s,
            tgt_raw: t,
            tgt_distilled: dist.as_ref().map(|d| d[i].clone()),
        });
    }
    Ok(out)
}

// ═══════════════════════════════════════════════════════════════════════
// Optimizer
// ═══════════════════════════════════════════════════════════════════════

/// Adam with the inverse-square-root warmup schedule.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model<f32>) -> Self {
        let m = model.store.iter().map(|e| vec![0.0; e.data.len()]).collect();
        let v = model.store.iter().map(|e| vec![0.0; e.data.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9, t: 0, m, v }
    }

    /// lr(t) = peak * min(t/warmup, sqrt(warmup/t))
    pub fn lr(peak: f64, warmup: u64, t: u64) -> f64 {
        let w = warmup.max(1) as f64;
        let t = t.max(1) as f64;
        peak * (t / w).min((w / t).sqrt())
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// One update over every parameter with a gradient.
    pub fn step(&mut self, model: &mut Model<f32>, grads: &[Option<Vec<f32>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let scale = lr * bc2.sqrt() / bc1;
        for (pid, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[pid], &mut self.v[pid]);
            let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
            let s = scale as f32;
            model.store.update(pid, |w| {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    w[i] -= s * m[i] / (v[i].sqrt() + eps);
                }
            });
        }
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Steps
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, Default, Serialize)]
pub struct TaskLoss {
    pub tokens: usize,
    pub loss_sum: f64,
}

impl TaskLoss {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub p_k: f64,
    pub lr: f64,
    pub at: TaskLoss,
    pub cmlm: TaskLoss,
    pub skip_at: TaskLoss,
    pub skip_cmlm: TaskLoss,
    pub length: TaskLoss,
    pub total_tokens: usize,
    pub wall_ms: f64,
}

impl LossReport {
    pub fn task(&self, t: Task) -> &TaskLoss {
        match t {
            Task::At => &self.at,
            Task::Cmlm => &self.cmlm,
            Task::SkipAt => &self.skip_at,
            Task::SkipCmlm => &self.skip_cmlm,
        }
    }

    /// Mean loss over every supervised token of the step.
    pub fn mean_loss(&self) -> f64 {
        let sum = self.at.loss_sum
            + self.cmlm.loss_sum
            + self.skip_at.loss_sum
            + self.skip_cmlm.loss_sum
            + self.length.loss_sum;
        sum / self.total_tokens.max(1) as f64
    }

    pub fn log_line(&self) -> String {
        format!(
            "step {:>6}  p_k {:.3}  lr {:.2e}  at {:.4}  cmlm {:.4}  skip_at {:.4}  skip_cmlm {:.4}  len {:.4}  tok/s {:.0}",
            self.step,
            self.p_k,
            self.lr,
            self.at.mean(),
            self.cmlm.mean(),
            self.skip_at.mean(),
            self.skip_cmlm.mean(),
            self.length.mean(),
            self.total_tokens as f64 / (self.wall_ms / 1000.0).max(1e-9),
        )
    }
}

/// Deterministic per-step RNG stream, independent of batch history.
fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut x = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

struct StepBatch {
    /// Samples grouped by task, each tagged with its pair index.
    groups: Vec<(Task, Vec<(usize, TrainingSample)>)>,
    /// Sources (EOS-terminated) in batch order.
    srcs: Vec<Vec<u32>>,
    /// Length-head class targets per pair (CMLM-only mode).
    length_targets: Option<Vec<u32>>,
}

/// Construct every sub-batch for one step.
fn build_step_batch(
    pairs: &[&ParallelPair],
    cfg: &TrainConfig,
    state: CurriculumState,
    rng: &mut ChaCha8Rng,
) -> Result<StepBatch> {
    let mut targets: Vec<&[u32]> = Vec::with_capacity(pairs.len());
    for p in pairs {
        targets.push(sample_target(p, cfg.p_raw, rng)?);
    }
    let srcs: Vec<Vec<u32>> = pairs
        .iter()
        .map(|p| {
            let mut s = p.src.clone();
            s.push(EOS);
            s
        })
        .collect();

    let mut groups: Vec<(Task, Vec<(usize, TrainingSample)>)> = Vec::new();
    let push = |groups: &mut Vec<(Task, Vec<(usize, TrainingSample)>)>, idx: usize, s: TrainingSample| {
        match groups.iter_mut().find(|(t, _)| *t == s.task) {
            Some((_, v)) => v.push((idx, s)),
            None => groups.push((s.task, vec![(idx, s)])),
        }
    };

    match cfg.mode {
        TrainMode::AtOnly => {
            for (i, t) in targets.iter().enumerate() {
                push(&mut groups, i, tasks::build_task_at(t)?);
            }
        }
        TrainMode::CmlmOnly => {
            for (i, t) in targets.iter().enumerate() {
                push(&mut groups, i, tasks::build_task_cmlm(t, rng)?);
            }
        }
        TrainMode::Hrt => {
            let idx: Vec<usize> = (0..pairs.len()).collect();
            let split_state = if cfg.curriculum {
                state
            } else {
                CurriculumState { t: 1, total: 1, lambda: state.lambda }
            };
            let (primary, auxiliary) = tasks::split_batch(&idx, split_state);
            for &i in primary {
                let s = tasks::build_primary(targets[i], cfg.k, rng)?;
                push(&mut groups, i, s.causal);
                push(&mut groups, i, s.full);
            }
            for &i in auxiliary {
                let s = tasks::build_auxiliary(targets[i], rng)?;
                push(&mut groups, i, s.causal);
                push(&mut groups, i, s.full);
            }
        }
    }

    let length_targets = (cfg.mode == TrainMode::CmlmOnly).then(|| {
        pairs
            .iter()
            .zip(targets.iter())
            .map(|(p, t)| {
                let off = (t.len() as i64 - p.src.len() as i64)
                    .clamp(-LEN_OFFSET_RANGE, LEN_OFFSET_RANGE);
                (off + LEN_OFFSET_RANGE) as u32
            })
            .collect()
    });

    Ok(StepBatch { groups, srcs, length_targets })
}

/// One training step: forward every sub-batch on one graph, one backward,
/// one optimizer update. Returns the per-task loss report.
pub fn train_step(
    model: &mut Model<f32>,
    pairs: &[&ParallelPair],
    state: CurriculumState,
    opt: &mut Adam,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if pairs.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let started = Instant::now();
    let mut rng = step_rng(cfg.seed, state.t, 1);
    let batch = build_step_batch(pairs, cfg, state, &mut rng)?;

    let mut session = model.train_session(step_rng(cfg.seed, state.t, 2));
    let src_refs: Vec<&[u32]> = batch.srcs.iter().map(|s| s.as_slice()).collect();
    let enc = session.encode_batch(&src_refs, None)?;

    let mut report = LossReport {
        step: state.t,
        p_k: state.p_k(),
        lr: Adam::lr(cfg.peak_lr, cfg.warmup_steps, state.t),
        at: TaskLoss::default(),
        cmlm: TaskLoss::default(),
        skip_at: TaskLoss::default(),
        skip_cmlm: TaskLoss::default(),
        length: TaskLoss::default(),
        total_tokens: 0,
        wall_ms: 0.0,
    };

    let smoothing = cfg.label_smoothing as f32;
    let mut losses = Vec::new();
    for (task, samples) in &batch.groups {
        let inputs: Vec<DecInput<'_>> = samples
            .iter()
            .map(|(_, s)| DecInput { ids: &s.dec_input, positions: &s.positions })
            .collect();
        let mem_of: Vec<usize> = samples.iter().map(|(i, _)| *i).collect();
        let logits = session.decode_batch(
            &inputs,
            &enc.memory,
            &enc.spans,
            None,
            &mem_of,
            task.decoder_mode(),
        )?;
        let mut targets = Vec::new();
        let mut ignore = Vec::new();
        for (_, s) in samples {
            targets.extend_from_slice(&s.targets);
            ignore.extend_from_slice(&s.ignore);
        }
        let (loss, count) = session.graph.cross_entropy(&logits, &targets, &ignore, smoothing)?;
        let part = match task {
            Task::At => &mut report.at,
            Task::Cmlm => &mut report.cmlm,
            Task::SkipAt => &mut report.skip_at,
            Task::SkipCmlm => &mut report.skip_cmlm,
        };
        part.tokens += count;
        part.loss_sum += loss.scalar() as f64;
        losses.push((loss, count));
    }

    if let Some(len_targets) = &batch.length_targets {
        let logits = session.length_logits(&enc)?;
        debug_assert_eq!(logits.cols(), LEN_CLASSES);
        let ignore = vec![false; len_targets.len()];
        let (loss, count) = session.graph.cross_entropy(&logits, len_targets, &ignore, 0.0)?;
        report.length.tokens = count;
        report.length.loss_sum = loss.scalar() as f64;
        losses.push((loss, count));
    }

    // Token-level normalization across the whole accumulated batch.
    let total_tokens: usize = losses.iter().map(|(_, c)| c).sum();
    report.total_tokens = total_tokens;
    let mut total: Option<crate::tensor::Tensor<f32>> = None;
    for (loss, _) in &losses {
        total = Some(match total {
            None => loss.clone(),
            Some(acc) => session.graph.add(&acc, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Train("no sub-batches built".into()))?;
    let total = session.graph.scale(&total, 1.0 / total_tokens.max(1) as f32);

    let total_value = total.scalar();
    if !total_value.is_finite() {
        return Err(Error::Train(format!(
            "non-finite loss at step {}: {} (per-task: at {:.4} cmlm {:.4} skip_at {:.4} skip_cmlm {:.4})",
            state.t,
            total_value,
            report.at.mean(),
            report.cmlm.mean(),
            report.skip_at.mean(),
            report.skip_cmlm.mean(),
        )));
    }

    let param_nodes = session.param_nodes();
    let mut graph = session.graph;
    graph.backward(&total)?;
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; model.store.len()];
    for (pid, nid) in param_nodes {
        if let Some(g) = graph.grad(nid) {
            grads[pid] = Some(g.to_vec());
        }
    }
    drop(graph);

    opt.step(model, &grads, report.lr);
    model.step = state.t;
    report.wall_ms = started.elapsed().as_secs_f64() * 1000.0;
    Ok(report)
}

// ═══════════════════════════════════════════════════════════════════════
// The loop
// ═══════════════════════════════════════════════════════════════════════

pub struct TrainOutcome {
    pub final_report: Option<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run `cfg.total_steps` steps over shuffled batches, logging via the
/// callback and writing periodic checkpoints next to `ckpt_stem`. The model
/// must already be initialized (randomly, or verbatim from a fine-tune
/// source via `Model::init_from`).
pub fn train(
    model: &mut Model<f32>,
    data: &[ParallelPair],
    cfg: &TrainConfig,
    ckpt_stem: Option<&Path>,
    mut log: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.total_steps > 0 {
        return Err(Error::Train("no training data".into()));
    }
    if cfg.total_steps > 0 && cfg.p_raw < 1.0 {
        if let Some(i) = data.iter().position(|p| p.tgt_distilled.is_none()) {
            return Err(Error::Train(format!(
                "p_raw = {} requires distilled targets; pair {} has none",
                cfg.p_raw, i
            )));
        }
    }
    let mut opt = Adam::new(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = usize::MAX; // force initial shuffle
    let mut epoch = 0u64;
    let mut outcome = TrainOutcome { final_report: None, checkpoints: Vec::new() };

    for t in 1..=cfg.total_steps {
        if cursor.saturating_add(cfg.batch_pairs) > order.len() {
            let mut rng = step_rng(cfg.seed, epoch, 3);
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let take = cfg.batch_pairs.min(order.len());
        let batch: Vec<&ParallelPair> =
            order[cursor..cursor + take].iter().map(|&i| &data[i]).collect();
        cursor += take;

        let state = CurriculumState { t, total: cfg.total_steps, lambda: cfg.lambda };
        let report = train_step(model, &batch, state, &mut opt, cfg)?;
        if cfg.log_every > 0 && (t % cfg.log_every == 0 || t == 1 || t == cfg.total_steps) {
            log(&report);
        }
        outcome.final_report = Some(report);

        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t != cfg.total_steps {
            if let Some(stem) = ckpt_stem {
                let path = stem.with_extension(format!("step{t}.ckpt"));
                model.save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, ToyTask, ToyTaskSpec};
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            model_dim: 32,
            ffn_dim: 48,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            max_position: 64,
            dropout: 0.0,
            chunk_size: 2,
            length_head: false,
        }
    }

    fn tiny_data(n: usize) -> (Vec<ParallelPair>, usize) {
        let spec = ToyTaskSpec {
            kind: ToyTask::Copy,
            vocab_size: 24,
            min_len: 3,
            max_len: 8,
            train: n,
            valid: 1,
            test: 1,
            seed: 3,
        };
        let c = generate_corpus(&spec).unwrap();
        let pairs = c
            .train
            .into_iter()
            .map(|(src, tgt)| ParallelPair { src, tgt_raw: tgt, tgt_distilled: None })
            .collect();
        (pairs, spec.vocab_size)
    }

    #[test]
    fn sample_target_frequencies() {
        let pair = ParallelPair {
            src: vec![8],
            tgt_raw: vec![8],
            tgt_distilled: Some(vec![9]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_target(&pair, 1.0, &mut rng).unwrap(), &[8]);
            assert_eq!(sample_target(&pair, 0.0, &mut rng).unwrap(), &[9]);
        }
        let mut raw = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            if sample_target(&pair, 0.5, &mut rng).unwrap() == [8] {
                raw += 1;
            }
        }
        let freq = raw as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.02, "raw frequency {freq}");
    }

    #[test]
    fn sample_target_missing_distilled_errors() {
        let pair = ParallelPair { src: vec![8], tgt_raw: vec![8], tgt_distilled: None };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_target(&pair, 0.0, &mut rng).is_err());
        assert!(sample_target(&pair, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn curriculum_extremes_zero_out_tasks() {
        let (data, vocab) = tiny_data(64);
        let mut model = Model::new(tiny_config(vocab), 11).unwrap();
        let mut opt = Adam::new(&model);
        let cfg = TrainConfig {
            total_steps: 100,
            batch_pairs: 8,
            p_raw: 1.0,
            ..TrainConfig::default()
        };
        let batch: Vec<&ParallelPair> = data.iter().take(8).collect();
        // t near 0: everything auxiliary
        let r = train_step(
            &mut model,
            &batch,
            CurriculumState { t: 0, total: 100, lambda: 1.0 },
            &mut opt,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.skip_at.tokens, 0);
        assert_eq!(r.skip_cmlm.tokens, 0);
        assert!(r.at.tokens > 0 && r.cmlm.tokens > 0);
        // t = T: everything primary
        let r = train_step(
            &mut model,
            &batch,
            CurriculumState { t: 100, total: 100, lambda: 1.0 },
            &mut opt,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.at.tokens, 0);
        assert_eq!(r.cmlm.tokens, 0);
        assert!(r.skip_at.tokens > 0 && r.skip_cmlm.tokens > 0);
        // exactly one optimizer update per step
        assert_eq!(opt.updates(), 2);
    }

    #[test]
    fn short_run_decreases_loss() {
        let (data, vocab) = tiny_data(256);
        let mut model = Model::new(tiny_config(vocab), 7).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::AtOnly,
            total_steps: 50,
            batch_pairs: 16,
            p_raw: 1.0,
            warmup_steps: 20,
            log_every: 1,
            ..TrainConfig::default()
        };
        let mut first = Vec::new();
        let mut last = Vec::new();
        train(&mut model, &data, &cfg, None, |r| {
            if r.step <= 10 {
                first.push(r.mean_loss());
            }
            if r.step > 40 {
                last.push(r.mean_loss());
            }
        })
        .unwrap();
        let head: f64 = first.iter().sum::<f64>() / first.len() as f64;
        let tail: f64 = last.iter().sum::<f64>() / last.len() as f64;
        assert!(tail < head, "smoothed loss must fall: {head} -> {tail}");
    }

    #[test]
    fn zero_step_finetune_is_identity() {
        let (data, vocab) = tiny_data(16);
        let at = Model::new(tiny_config(vocab), 21).unwrap();
        let mut hrt = Model::new(tiny_config(vocab), 99).unwrap();
        hrt.init_from(&at).unwrap();
        let cfg = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        train(&mut hrt, &data, &cfg, None, |_| {}).unwrap();
        for pid in 0..at.store.len() {
            assert_eq!(
                at.store.entry(pid).data.as_ref(),
                hrt.store.entry(pid).data.as_ref(),
                "parameter {} changed",
                at.store.entry(pid).name
            );
        }
    }

    #[test]
    fn init_from_rejects_mismatched_shapes() {
        let a = Model::<f32>::new(tiny_config(24), 1).unwrap();
        let mut b = Model::<f32>::new(tiny_config(32), 1).unwrap();
        assert!(b.init_from(&a).is_err());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (data, vocab) = tiny_data(64);
        let cfg = TrainConfig {
            total_steps: 12,
            batch_pairs: 8,
            p_raw: 1.0,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::new(tiny_config(vocab), 5).unwrap();
            train(&mut model, &data, &cfg, None, |_| {}).unwrap();
            model
        };
        let m1 = run();
        let m2 = run();
        for pid in 0..m1.store.len() {
            let d1 = m1.store.entry(pid).data.as_ref();
            let d2 = m2.store.entry(pid).data.as_ref();
            assert_eq!(d1, d2, "parameter {} diverged", m1.store.entry(pid).name);
        }
        // optimizer updates never split the shared decoder
        assert!(m1.shared_decoder_check());
    }

    #[test]
    fn cmlm_mode_trains_length_head() {
        let (data, vocab) = tiny_data(32);
        let mut model =
            Model::new(ModelConfig { length_head: true, ..tiny_config(vocab) }, 4).unwrap();
        let mut opt = Adam::new(&model);
        let cfg = TrainConfig {
            mode: TrainMode::CmlmOnly,
            total_steps: 10,
            batch_pairs: 8,
            p_raw: 1.0,
            ..TrainConfig::default()
        };
        let batch: Vec<&ParallelPair> = data.iter().take(8).collect();
        let r = train_step(
            &mut model,
            &batch,
            CurriculumState { t: 1, total: 10, lambda: 1.0 },
            &mut opt,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.length.tokens, 8);
        assert!(r.length.loss_sum > 0.0);
        assert_eq!(r.at.tokens, 0);
        assert!(r.cmlm.tokens > 0);
    }
}
