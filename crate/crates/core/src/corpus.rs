//! Synthetic parallel corpora, distillation data, and BLEU scoring.

use crate::decode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vocab::{self, Vocab};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

// ═══════════════════════════════════════════════════════════════════════
// Toy tasks
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Copy,
    Reverse,
    /// Fixed token substitution, then swap within consecutive 2-blocks.
    CipherBlockswap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub kind: ToyTask,
    /// Total vocabulary size including the reserved specials.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            kind: ToyTask::CipherBlockswap,
            vocab_size: vocab::RESERVED as usize + 64,
            min_len: 4,
            max_len: 20,
            train: 50_000,
            valid: 1_000,
            test: 1_000,
            seed: 1,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < vocab::RESERVED as usize + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} below reserved count + 2",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("invalid length range".into()));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - vocab::RESERVED as usize
    }
}

/// Deterministic source-to-target mapping of a toy task.
pub struct ToyMapping {
    kind: ToyTask,
    /// Content-token permutation, indexed by `id - RESERVED`.
    cipher: Vec<u32>,
}

impl ToyMapping {
    pub fn new(spec: &ToyTaskSpec) -> Self {
        let n = spec.content_tokens();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        // Cipher drawn from its own stream so corpus sizes don't change it.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5f5f_5f5f);
        perm.shuffle(&mut rng);
        ToyMapping { kind: spec.kind, cipher: perm }
    }

    pub fn apply(&self, src: &[u32]) -> Vec<u32> {
        match self.kind {
            ToyTask::Copy => src.to_vec(),
            ToyTask::Reverse => src.iter().rev().copied().collect(),
            ToyTask::CipherBlockswap => {
                let mut out: Vec<u32> = src
                    .iter()
                    .map(|&t| vocab::RESERVED + self.cipher[(t - vocab::RESERVED) as usize])
                    .collect();
                for i in (0..out.len().saturating_sub(1)).step_by(2) {
                    out.swap(i, i + 1);
                }
                out
            }
        }
    }
}

/// A generated split as id sequences.
pub struct GeneratedCorpus {
    pub vocab: Vocab,
    pub train: Vec<(Vec<u32>, Vec<u32>)>,
    pub valid: Vec<(Vec<u32>, Vec<u32>)>,
    pub test: Vec<(Vec<u32>, Vec<u32>)>,
}

/// Generate disjoint train/valid/test splits: i.i.d. uniform sources,
/// deduplicated, mapped by the task rule. Byte-identical for a given spec.
pub fn generate_corpus(spec: &ToyTaskSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let vocab = Vocab::synthetic(spec.content_tokens());
    let mapping = ToyMapping::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train + spec.valid + spec.test;
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    let content = spec.content_tokens() as u32;
    let mut attempts = 0usize;
    while pairs.len() < total {
        attempts += 1;
        if attempts > 200 * total {
            return Err(Error::Corpus(
                "cannot generate enough distinct sources; shrink corpus or widen lengths".into(),
            ));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<u32> =
            (0..len).map(|_| vocab::RESERVED + rng.gen_range(0..content)).collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt = mapping.apply(&src);
        pairs.push((src, tgt));
    }
    let mut rest = pairs.split_off(spec.train);
    let test = rest.split_off(spec.valid);
    Ok(GeneratedCorpus { vocab, train: pairs, valid: rest, test })
}

// ═══════════════════════════════════════════════════════════════════════
// Files
// ═══════════════════════════════════════════════════════════════════════

/// Write aligned `.src`/`.tgt` files for one split.
pub fn write_pair_files(
    vocab: &Vocab,
    pairs: &[(Vec<u32>, Vec<u32>)],
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let src_path = stem.with_extension("src");
    let tgt_path = stem.with_extension("tgt");
    let mut fs = std::io::BufWriter::new(std::fs::File::create(&src_path)?);
    let mut ft = std::io::BufWriter::new(std::fs::File::create(&tgt_path)?);
    for (s, t) in pairs {
        writeln!(fs, "{}", vocab.decode_line(s)?)?;
        writeln!(ft, "{}", vocab.decode_line(t)?)?;
    }
    Ok((src_path, tgt_path))
}

/// Read one token-line file into id sequences.
pub fn read_id_lines(vocab: &Vocab, path: &Path) -> Result<Vec<Vec<u32>>> {
    let f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
    );
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        out.push(vocab.encode_line(&line).map_err(|e| {
            Error::Corpus(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
    );
    let mut out = Vec::new();
    for line in f.lines() {
        out.push(line?);
    }
    Ok(out)
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

// ═══════════════════════════════════════════════════════════════════════
// Distillation
// ═══════════════════════════════════════════════════════════════════════

pub struct DistillReport {
    pub lines: usize,
    pub empty_flagged: usize,
}

/// Beam-translate every source and write the line-aligned distilled target
/// file. Empty translations are written as a bare EOS token and flagged.
pub fn distill(
    model: &Model<f32>,
    vocab: &Vocab,
    sources: &[Vec<u32>],
    beam: usize,
    batch: usize,
    out_path: &Path,
) -> Result<DistillReport> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    let mut empty_flagged = 0usize;
    for chunk in sources.chunks(batch.max(1)) {
        let outs = decode::translate_at_batch(model, chunk, beam, None)?;
        for out in outs {
            if out.tokens.is_empty() {
                empty_flagged += 1;
                writeln!(f, "{}", vocab.token(vocab::EOS)?)?;
            } else {
                writeln!(f, "{}", vocab.decode_line(&out.tokens)?)?;
            }
        }
    }
    Ok(DistillReport { lines: sources.len(), empty_flagged })
}

// ═══════════════════════════════════════════════════════════════════════
// BLEU
// ═══════════════════════════════════════════════════════════════════════

const MAX_NGRAM: usize = 4;

/// Corpus-level tokenized BLEU-4 with the usual brevity penalty.
///
/// Without smoothing, a zero precision at any order gives 0. With smoothing,
/// orders >= 2 get add-one counts.
pub fn bleu(hyp_lines: &[String], ref_lines: &[String], smooth: bool) -> Result<f64> {
    if hyp_lines.len() != ref_lines.len() {
        return Err(Error::Corpus(format!(
            "line-count mismatch: {} hypotheses vs {} references",
            hyp_lines.len(),
            ref_lines.len()
        )));
    }
    if ref_lines.is_empty() {
        return Err(Error::Corpus("empty reference corpus".into()));
    }
    let mut correct = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyp_lines.iter().zip(ref_lines.iter()) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len() as u64;
        ref_len += rt.len() as u64;
        for n in 1..=MAX_NGRAM {
            if ht.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            if rt.len() >= n {
                for g in rt.windows(n) {
                    *ref_counts.entry(g).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in ht.windows(n) {
                *hyp_counts.entry(g).or_insert(0) += 1;
            }
            for (g, c) in &hyp_counts {
                total[n - 1] += c;
                let clip = ref_counts.get(g).copied().unwrap_or(0);
                correct[n - 1] += (*c).min(clip);
            }
        }
    }
    let mut log_precision_sum = 0.0f64;
    let mut orders = 0usize;
    for n in 0..MAX_NGRAM {
        if total[n] == 0 {
            // No n-grams of this order exist in the hypothesis corpus at
            // all; shorten the effective order instead of zeroing the score.
            continue;
        }
        let (c, t) = if smooth && n >= 1 {
            (correct[n] + 1, total[n] + 1)
        } else {
            (correct[n], total[n])
        };
        if c == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (c as f64 / t as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_precision_sum / orders as f64).exp())
}

/// BLEU over files.
pub fn bleu_files(hyp: &Path, reference: &Path, smooth: bool) -> Result<f64> {
    let h = read_text_lines(hyp)?;
    let r = read_text_lines(reference)?;
    bleu(&h, &r, smooth)
}
