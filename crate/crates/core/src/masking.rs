//! Synthetic masking experiments: mask dense-pass hypotheses under four
//! strategies, fill with a single FULL-mode pass, and score BLEU curves.

use crate::corpus;
use crate::decode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vocab::{Vocab, MASK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Head,
    Tail,
    Random,
    Chunk,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Head => "head",
            MaskStrategy::Tail => "tail",
            MaskStrategy::Random => "random",
            MaskStrategy::Chunk => "chunk",
        }
    }
}

/// One masking configuration. `p_mask` drives HEAD/TAIL/RANDOM; CHUNK
/// ignores it and masks all but each chunk's first token (asymptotic rate
/// `1 - 1/k`).
#[derive(Debug, Clone, Copy)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub p_mask: f64,
    pub k: usize,
    pub seed: u64,
}

/// Number of masked tokens for the rate-driven strategies.
pub fn n_mask(n: usize, p_mask: f64) -> usize {
    ((n as f64 * p_mask).floor() as usize).max(1)
}

/// Mask a token sequence, returning the masked copy and the masked
/// positions (0-based, ascending).
pub fn apply_mask(tokens: &[u32], spec: &MaskSpec) -> Result<(Vec<u32>, Vec<usize>)> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Corpus("cannot mask an empty hypothesis".into()));
    }
    let positions: Vec<usize> = match spec.strategy {
        MaskStrategy::Head => (0..n_mask(n, spec.p_mask).min(n)).collect(),
        MaskStrategy::Tail => {
            let m = n_mask(n, spec.p_mask).min(n);
            (n - m..n).collect()
        }
        MaskStrategy::Random => {
            let m = n_mask(n, spec.p_mask).min(n);
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for i in 0..m {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            let mut set: Vec<usize> = idx[..m].to_vec();
            set.sort_unstable();
            set
        }
        MaskStrategy::Chunk => {
            if spec.k == 0 {
                return Err(Error::Config("chunk masking needs k >= 1".into()));
            }
            // C = ceil(N/k) chunks; keep each chunk's first token.
            let mut set = Vec::new();
            for c0 in (0..n).step_by(spec.k) {
                for i in c0 + 1..(c0 + spec.k).min(n) {
                    set.push(i);
                }
            }
            set
        }
    };
    let mut masked = tokens.to_vec();
    for &i in &positions {
        masked[i] = MASK;
    }
    Ok((masked, positions))
}

/// One grid point of the curve table.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub strategy: MaskStrategy,
    /// Nominal rate (for CHUNK: the realized `1 - 1/k` label).
    pub rate: f64,
    /// Seed for RANDOM rows; `None` marks non-random or averaged rows.
    pub seed: Option<u64>,
    pub bleu: f64,
}

/// Grid of mask specs to evaluate.
#[derive(Debug, Clone)]
pub struct MaskGrid {
    pub rates: Vec<f64>,
    pub chunk_sizes: Vec<usize>,
    pub random_seeds: Vec<u64>,
}

impl Default for MaskGrid {
    fn default() -> Self {
        MaskGrid {
            rates: (1..=10).map(|i| i as f64 / 10.0).collect(),
            chunk_sizes: vec![2, 3, 4],
            random_seeds: vec![11, 22, 33],
        }
    }
}

/// Mask every hypothesis under `spec`, fill the masks with one FULL-mode
/// greedy pass, and score corpus BLEU against the references. Unmasked
/// positions pass through untouched.
pub fn fill_and_score_once(
    model: &Model<f32>,
    vocab: &Vocab,
    srcs: &[Vec<u32>],
    hyps: &[Vec<u32>],
    refs: &[String],
    spec: &MaskSpec,
    batch: usize,
) -> Result<f64> {
    if srcs.len() != hyps.len() || srcs.len() != refs.len() {
        return Err(Error::Corpus(format!(
            "line-count mismatch: {} sources, {} hypotheses, {} references",
            srcs.len(),
            hyps.len(),
            refs.len()
        )));
    }
    let mut out_lines = Vec::with_capacity(hyps.len());
    let mut offset = 0usize;
    for (src_chunk, hyp_chunk) in srcs.chunks(batch.max(1)).zip(hyps.chunks(batch.max(1))) {
        let filled = fill_chunk(model, src_chunk, hyp_chunk, spec, offset)?;
        for ids in filled {
            out_lines.push(vocab.decode_line(&ids)?);
        }
        offset += src_chunk.len();
    }
    corpus::bleu(&out_lines, refs, true)
}

fn fill_chunk(
    model: &Model<f32>,
    srcs: &[Vec<u32>],
    hyps: &[Vec<u32>],
    spec: &MaskSpec,
    line_offset: usize,
) -> Result<Vec<Vec<u32>>> {
    let memory = decode::encode_single_batch(model, srcs)?;
    let mut blocks = Vec::with_capacity(hyps.len());
    let mut keep: Vec<Option<Vec<u32>>> = Vec::with_capacity(hyps.len());
    for (si, hyp) in hyps.iter().enumerate() {
        if hyp.is_empty() {
            keep.push(Some(Vec::new()));
            continue;
        }
        // Mix the line number into RANDOM's seed so sentences differ.
        let line_spec = MaskSpec {
            seed: spec
                .seed
                .wrapping_add((line_offset + si) as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*spec
        };
        let (masked, _) = apply_mask(hyp, &line_spec)?;
        let mut ids = masked;
        ids.push(crate::vocab::EOS);
        let positions: Vec<usize> = (1..=ids.len()).collect();
        keep.push(None);
        blocks.push((si, ids, positions));
    }
    let filled = decode::fill_masked_blocks(model, &memory, &blocks)?;
    let mut fit = filled.into_iter();
    let mut out = Vec::with_capacity(hyps.len());
    for k in keep {
        match k {
            Some(v) => out.push(v),
            None => {
                let (ids, _) = fit.next().expect("fill result per block");
                out.push(decode::finalize_tokens(&ids));
            }
        }
    }
    Ok(out)
}

/// Full curve sweep: HEAD/TAIL at every rate, RANDOM at every rate for each
/// seed plus an averaged row, CHUNK at its realized rates.
pub fn fill_and_score_grid(
    model: &Model<f32>,
    vocab: &Vocab,
    srcs: &[Vec<u32>],
    hyps: &[Vec<u32>],
    refs: &[String],
    grid: &MaskGrid,
    batch: usize,
) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::new();
    for &rate in &grid.rates {
        for strategy in [MaskStrategy::Head, MaskStrategy::Tail] {
            let spec = MaskSpec { strategy, p_mask: rate, k: 0, seed: 0 };
            let b = fill_and_score_once(model, vocab, srcs, hyps, refs, &spec, batch)?;
            points.push(CurvePoint { strategy, rate, seed: None, bleu: b });
        }
        let mut acc = 0.0;
        for &seed in &grid.random_seeds {
            let spec = MaskSpec { strategy: MaskStrategy::Random, p_mask: rate, k: 0, seed };
            let b = fill_and_score_once(model, vocab, srcs, hyps, refs, &spec, batch)?;
            acc += b;
            points.push(CurvePoint {
                strategy: MaskStrategy::Random,
                rate,
                seed: Some(seed),
                bleu: b,
            });
        }
        points.push(CurvePoint {
            strategy: MaskStrategy::Random,
            rate,
            seed: None,
            bleu: acc / grid.random_seeds.len().max(1) as f64,
        });
    }
    for &k in &grid.chunk_sizes {
        let spec = MaskSpec { strategy: MaskStrategy::Chunk, p_mask: 0.0, k, seed: 0 };
        let b = fill_and_score_once(model, vocab, srcs, hyps, refs, &spec, batch)?;
        points.push(CurvePoint {
            strategy: MaskStrategy::Chunk,
            rate: 1.0 - 1.0 / k as f64,
            seed: None,
            bleu: b,
        });
    }
    Ok(points)
}

/// CSV rows: `strategy,rate,seed,bleu` with `avg` for aggregated rows.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("strategy,rate,seed,bleu\n");
    for p in points {
        let seed = p.seed.map(|v| v.to_string()).unwrap_or_else(|| "avg".into());
        s.push_str(&format!("{},{:.4},{},{:.4}\n", p.strategy.name(), p.rate, seed, p.bleu));
    }
    s
}

/// Tab-separated curve table, one row per rate and one column per strategy
/// (averaged rows only), ready for plotting.
pub fn curve_tsv(points: &[CurvePoint]) -> String {
    let mut s = String::from("rate\tstrategy\tbleu\n");
    for p in points.iter().filter(|p| p.seed.is_none()) {
        s.push_str(&format!("{:.4}\t{}\t{:.4}\n", p.rate, p.strategy.name(), p.bleu));
    }
    s
}
