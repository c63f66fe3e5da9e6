//! Acceleration-robustness benchmark: wall-clock translation time across
//! batch sizes and thread profiles, with relative speedup against the dense
//! autoregressive reference and exact decoder-call accounting.

use crate::decode::{self, DecodeConfig, LengthMode};
use crate::error::{Error, Result};
use crate::model::{DecInput, DecoderMode, Model};
use crate::vocab::{EOS, MASK};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    At { beam: usize },
    Hrt { k: usize, b_at: usize, b_nat: usize },
    Cmlm { iterations: usize, beam: usize },
}

pub struct BenchSystem {
    pub label: String,
    pub kind: SystemKind,
    pub model: Model<f32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub thread_profiles: Vec<usize>,
    /// Timed runs per cell; one extra warmup run is discarded.
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch_sizes: vec![1, 8, 16, 32], thread_profiles: vec![1, 4], runs: 5 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::Config("bench needs runs >= 1 and positive batch sizes".into()));
        }
        if self.thread_profiles.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::Config("bench needs at least one profile and batch size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub system: String,
    pub batch_size: usize,
    pub threads: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Relative speedup against the dense reference at the same cell.
    pub alpha: f64,
    /// Timing spread exceeded 20% of the mean.
    pub unstable: bool,
    pub mean_decoder_calls: f64,
    pub mean_output_len: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub corpus_lines: usize,
    pub runs: usize,
    pub reference: String,
    pub systems: Vec<(String, SystemKind)>,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, system: &str, batch_size: usize, threads: usize) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.system == system && c.batch_size == batch_size && c.threads == threads)
    }

    /// Table in the usual layout: per batch size a time and alpha column,
    /// then the average alpha, one section per thread profile.
    pub fn table(&self) -> String {
        let mut batches: Vec<usize> = self.cells.iter().map(|c| c.batch_size).collect();
        batches.sort_unstable();
        batches.dedup();
        let mut threads: Vec<usize> = self.cells.iter().map(|c| c.threads).collect();
        threads.sort_unstable();
        threads.dedup();
        let mut s = String::new();
        for &t in &threads {
            s.push_str(&format!("== threads = {t} ==\n"));
            s.push_str(&format!("{:<18}", "system"));
            for &b in &batches {
                s.push_str(&format!("{:>12}{:>8}", format!("B={b} time"), "alpha"));
            }
            s.push_str(&format!("{:>10}\n", "avg alpha"));
            for (label, _) in &self.systems {
                s.push_str(&format!("{label:<18}"));
                let mut asum = 0.0;
                let mut n = 0;
                for &b in &batches {
                    if let Some(c) = self.cell(label, b, t) {
                        let flag = if c.unstable { "*" } else { "" };
                        s.push_str(&format!(
                            "{:>12}{:>8}",
                            format!("{:.1}{flag}", c.mean_ms),
                            format!("{:.2}", c.alpha)
                        ));
                        asum += c.alpha;
                        n += 1;
                    } else {
                        s.push_str(&format!("{:>12}{:>8}", "-", "-"));
                    }
                }
                let avg = if n > 0 { asum / n as f64 } else { f64::NAN };
                s.push_str(&format!("{:>10}\n", format!("{avg:.2}")));
            }
        }
        s.push_str("(* = timing spread above 20% of the mean)\n");
        s
    }
}

fn translate_once(
    system: &BenchSystem,
    corpus: &[Vec<u32>],
    batch: usize,
) -> Result<(f64, f64, f64)> {
    let started = Instant::now();
    let mut calls = 0u64;
    let mut out_len = 0u64;
    for chunk in corpus.chunks(batch) {
        match &system.kind {
            SystemKind::At { beam } => {
                for t in decode::translate_at_batch(&system.model, chunk, *beam, None)? {
                    calls += t.stats.decoder_calls as u64;
                    out_len += t.tokens.len() as u64;
                }
            }
            SystemKind::Hrt { k, b_at, b_nat } => {
                let cfg = DecodeConfig::new(*k, *b_at, *b_nat)?;
                for o in decode::hrt_translate_batch(&system.model, chunk, &cfg)? {
                    calls += o.translation.stats.decoder_calls as u64;
                    out_len += o.translation.tokens.len() as u64;
                }
            }
            SystemKind::Cmlm { iterations, beam } => {
                for o in decode::cmlm_translate_batch(
                    &system.model,
                    chunk,
                    *iterations,
                    *beam,
                    LengthMode::Predicted,
                    None,
                )? {
                    calls += o.translation.stats.decoder_calls as u64;
                    out_len += o.translation.tokens.len() as u64;
                }
            }
        }
    }
    let ms = started.elapsed().as_secs_f64() * 1000.0;
    let n = corpus.len().max(1) as f64;
    Ok((ms, calls as f64 / n, out_len as f64 / n))
}

/// Run every (system, batch size, thread profile) cell: one discarded warmup
/// plus `runs` timed translations of the whole corpus under a dedicated
/// rayon pool of exactly the profile's thread count.
pub fn run_bench(
    systems: &[BenchSystem],
    corpus: &[Vec<u32>],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Corpus("bench corpus is empty".into()));
    }
    let reference = systems
        .iter()
        .find(|s| matches!(s.kind, SystemKind::At { .. }))
        .ok_or_else(|| Error::Config("bench needs a dense reference system".into()))?
        .label
        .clone();

    let mut cells = Vec::new();
    for &threads in &cfg.thread_profiles {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        for system in systems {
            for &batch in &cfg.batch_sizes {
                let mut samples = Vec::with_capacity(cfg.runs);
                let mut calls = 0.0;
                let mut olen = 0.0;
                for run in 0..=cfg.runs {
                    let (ms, c, l) = pool.install(|| translate_once(system, corpus, batch))?;
                    if run == 0 {
                        // warmup discarded; counters kept (identical per run)
                        calls = c;
                        olen = l;
                        continue;
                    }
                    samples.push(ms);
                }
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                let mut sorted = samples.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = sorted[sorted.len() / 2];
                let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                    / samples.len() as f64;
                let unstable = samples.len() > 1 && var.sqrt() > 0.2 * mean;
                cells.push(BenchCell {
                    system: system.label.clone(),
                    batch_size: batch,
                    threads,
                    samples_ms: samples,
                    mean_ms: mean,
                    median_ms: median,
                    alpha: f64::NAN,
                    unstable,
                    mean_decoder_calls: calls,
                    mean_output_len: olen,
                });
            }
        }
    }
    // alpha against the reference at the matched cell
    for i in 0..cells.len() {
        let (b, t) = (cells[i].batch_size, cells[i].threads);
        let ref_mean = cells
            .iter()
            .find(|c| c.system == reference && c.batch_size == b && c.threads == t)
            .map(|c| c.mean_ms)
            .unwrap_or(f64::NAN);
        cells[i].alpha = ref_mean / cells[i].mean_ms;
    }
    Ok(BenchReport {
        corpus_lines: corpus.len(),
        runs: cfg.runs,
        reference,
        systems: systems.iter().map(|s| (s.label.clone(), s.kind.clone())).collect(),
        cells,
    })
}

// ═══════════════════════════════════════════════════════════════════════
// Parallel efficiency
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyRow {
    pub batch_size: usize,
    pub target_len: usize,
    pub t_len1_ms: f64,
    pub t_lenn_ms: f64,
    /// T(batch x 1) / T(batch x N); at most ~1.
    pub efficiency: f64,
}

/// Time a single FULL-mode decoder forward at target length 1 versus
/// length `n`, at each batch size. The ratio is the parallel-computation
/// efficiency over the sequence axis.
pub fn measure_parallel_efficiency(
    model: &Model<f32>,
    batch_sizes: &[usize],
    target_lens: &[usize],
    threads: usize,
    runs: usize,
) -> Result<Vec<EfficiencyRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let src: Vec<u32> = (0..8).map(|i| crate::vocab::RESERVED + (i % 4)).collect();
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let srcs: Vec<Vec<u32>> = (0..b).map(|_| src.clone()).collect();
        let memory = decode::encode_single_batch(model, &srcs)?;
        let time_len = |len: usize| -> Result<f64> {
            let mut ids = vec![MASK; len - 1];
            ids.push(EOS);
            let positions: Vec<usize> = (1..=len).collect();
            let blocks: Vec<(usize, Vec<u32>, Vec<usize>)> =
                (0..b).map(|si| (si, ids.clone(), positions.clone())).collect();
            // warmup
            pool.install(|| forward_full(model, &memory, &blocks))?;
            let started = Instant::now();
            for _ in 0..runs.max(1) {
                pool.install(|| forward_full(model, &memory, &blocks))?;
            }
            Ok(started.elapsed().as_secs_f64() * 1000.0 / runs.max(1) as f64)
        };
        let t1 = time_len(1)?;
        for &n in target_lens {
            let tn = if n == 1 { t1 } else { time_len(n)? };
            rows.push(EfficiencyRow {
                batch_size: b,
                target_len: n,
                t_len1_ms: t1,
                t_lenn_ms: tn,
                efficiency: t1 / tn,
            });
        }
    }
    Ok(rows)
}

fn forward_full(
    model: &Model<f32>,
    memory: &crate::model::Memory<f32>,
    blocks: &[(usize, Vec<u32>, Vec<usize>)],
) -> Result<()> {
    let mut session = model.session();
    let mem_t = session.inject_memory(memory);
    let inputs: Vec<DecInput<'_>> =
        blocks.iter().map(|(_, ids, pos)| DecInput { ids, positions: pos }).collect();
    let mem_of: Vec<usize> = blocks.iter().map(|(si, ..)| *si).collect();
    session.decode_batch(
        &inputs,
        &mem_t,
        &memory.spans,
        memory.kv_allowed.as_ref(),
        &mem_of,
        DecoderMode::Full,
    )?;
    Ok(())
}
