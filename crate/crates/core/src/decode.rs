//! Inference: dense beam search, two-stage sparse-then-fill decoding, and
//! iterative mask-predict refinement.
//!
//! Encoder memory is computed once per sentence and reused by every decoder
//! call. Each decoder step is one forward over the ragged batch of all
//! still-active blocks, so batch size genuinely amortizes per-call overhead.
//! Per-sentence counters record how many decoder forwards each sentence
//! participated in.

use crate::error::{Error, Result};
use crate::model::{DecInput, DecoderMode, Memory, Model};
use crate::tensor::log_softmax_row;
use crate::vocab::{self, EOS, MASK};
use std::cmp::Ordering;

// ═══════════════════════════════════════════════════════════════════════
// Config and hypotheses
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub k: usize,
    pub b_at: usize,
    pub b_nat: usize,
    /// Cap on sparse-pass steps; `None` derives from source length.
    pub max_steps: Option<usize>,
    /// Mask-predict iteration budget.
    pub iterations: usize,
    pub length_mode: LengthMode,
    /// Divide ranking scores by token count. Off by default: scores are raw
    /// log-probability sums.
    pub length_normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthMode {
    Predicted,
    Oracle,
}

impl DecodeConfig {
    pub fn new(k: usize, b_at: usize, b_nat: usize) -> Result<Self> {
        if b_nat < 1 || b_at < b_nat {
            return Err(Error::Config(format!(
                "beam widths must satisfy b_at >= b_nat >= 1 (got {b_at}, {b_nat})"
            )));
        }
        if k == 0 || k > vocab::MAX_CHUNK {
            return Err(Error::Config(format!("chunk size {k} outside 1..=4")));
        }
        Ok(DecodeConfig {
            k,
            b_at,
            b_nat,
            max_steps: None,
            iterations: 10,
            length_mode: LengthMode::Predicted,
            length_normalize: false,
        })
    }
}

/// A candidate translation. `score_at` sums causal-pass token log-probs,
/// `score_nat` sums fill-pass log-probs at mask slots; the total score is
/// their sum, with `score_nat` zero until the fill stage runs.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score_at: f64,
    pub score_nat: f64,
    pub finished: bool,
    /// True when the hypothesis hit its step cap and EOS was force-appended.
    pub forced: bool,
}

impl Hypothesis {
    pub fn total(&self) -> f64 {
        self.score_at + self.score_nat
    }
}

/// Score-descending order with deterministic ties: lower token ids first,
/// then shorter hypotheses.
fn rank(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a_tokens.cmp(b_tokens))
}

/// Per-sentence decoding statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Decoder forward calls this sentence participated in.
    pub decoder_calls: u32,
    pub forced: bool,
}

/// Final translation: content tokens only, specials stripped.
#[derive(Debug, Clone)]
pub struct Translation {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub stats: DecodeStats,
}

/// Truncate at the first EOS and strip every special token.
pub fn finalize_tokens(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().take_while(|&&t| t != EOS).filter(|&&t| !vocab::is_special(t)).copied().collect()
}

/// EOS plus content tokens; PAD/BOS/MASK/BOS_k are never emitted.
fn allowed_next(vocab_size: usize) -> impl Iterator<Item = u32> {
    std::iter::once(EOS).chain(vocab::RESERVED..vocab_size as u32)
}

fn argmax_allowed(lp: &[f32]) -> (u32, f64) {
    let mut best = EOS;
    let mut best_lp = lp[EOS as usize];
    for tok in vocab::RESERVED..lp.len() as u32 {
        if lp[tok as usize] > best_lp {
            best = tok;
            best_lp = lp[tok as usize];
        }
    }
    (best, best_lp as f64)
}

/// Default step cap for the dense pass.
pub fn default_max_new(src_len: usize) -> usize {
    src_len + 8
}

/// Default step cap for the sparse pass at stride `k`.
pub fn default_max_steps(src_len: usize, k: usize) -> usize {
    (src_len + 8).div_ceil(k)
}

fn encode_sources(model: &Model<f32>, srcs: &[Vec<u32>]) -> Result<Memory<f32>> {
    let with_eos: Vec<Vec<u32>> = srcs
        .iter()
        .map(|s| {
            let mut v = s.clone();
            v.push(EOS);
            v
        })
        .collect();
    let refs: Vec<&[u32]> = with_eos.iter().map(|v| v.as_slice()).collect();
    let mut session = model.session();
    let enc = session.encode_batch(&refs, None)?;
    Ok(enc.detach())
}

/// Memory restricted to one sentence (re-spanned to offset zero).
fn single_memory(mem: &Memory<f32>, si: usize, d: usize) -> Memory<f32> {
    let (r0, r1) = mem.spans[si];
    Memory {
        data: std::sync::Arc::new(mem.data[r0 * d..r1 * d].to_vec()),
        rows: r1 - r0,
        spans: vec![(0, r1 - r0)],
        kv_allowed: mem.kv_allowed.as_ref().map(|a| vec![a[si].clone()]),
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Causal beam engine (dense when stride == 1, sparse otherwise)
// ═══════════════════════════════════════════════════════════════════════

struct BeamEntry {
    tokens: Vec<u32>,
    score: f64,
}

struct SentenceBeam {
    active: Vec<BeamEntry>,
    finished: Vec<Hypothesis>,
    max_new: usize,
    calls: u32,
}

impl SentenceBeam {
    fn done(&self) -> bool {
        if self.active.is_empty() {
            return true;
        }
        match self.finished.first() {
            None => false,
            // Scores only fall as tokens append, so a finished hypothesis at
            // least as good as every active prefix is final.
            Some(best) => self.active.iter().all(|b| b.score <= best.total()),
        }
    }
}

/// Beam search over the shared decoder in CAUSAL mode from `start`, with
/// positions `(0, stride, 2*stride, ...)`. Returns ranked finished
/// hypotheses and the per-sentence decoder-call counts.
fn causal_beam_batch(
    model: &Model<f32>,
    memory: &Memory<f32>,
    start: u32,
    stride: usize,
    beam: usize,
    max_new: &[usize],
) -> Result<(Vec<Vec<Hypothesis>>, Vec<u32>)> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let nsent = memory.spans.len();
    debug_assert_eq!(max_new.len(), nsent);
    let vsize = model.config.vocab_size;
    let mut sents: Vec<SentenceBeam> = max_new
        .iter()
        .map(|&m| SentenceBeam {
            active: vec![BeamEntry { tokens: Vec::new(), score: 0.0 }],
            finished: Vec::new(),
            max_new: m.max(1),
            calls: 0,
        })
        .collect();

    loop {
        let mut blocks: Vec<(usize, usize, Vec<u32>, Vec<usize>)> = Vec::new();
        for (si, s) in sents.iter().enumerate() {
            if s.done() {
                continue;
            }
            for (bi, b) in s.active.iter().enumerate() {
                let mut ids = Vec::with_capacity(b.tokens.len() + 1);
                ids.push(start);
                ids.extend_from_slice(&b.tokens);
                let positions: Vec<usize> = (0..ids.len()).map(|i| i * stride).collect();
                blocks.push((si, bi, ids, positions));
            }
        }
        if blocks.is_empty() {
            break;
        }
        let mut session = model.session();
        let mem_t = session.inject_memory(memory);
        let inputs: Vec<DecInput<'_>> =
            blocks.iter().map(|(_, _, ids, pos)| DecInput { ids, positions: pos }).collect();
        let mem_of: Vec<usize> = blocks.iter().map(|(si, ..)| *si).collect();
        let logits = session.decode_batch(
            &inputs,
            &mem_t,
            &memory.spans,
            memory.kv_allowed.as_ref(),
            &mem_of,
            DecoderMode::Causal,
        )?;

        // Candidate expansion per sentence.
        let mut row = 0usize;
        let mut expansions: Vec<Vec<(f64, Vec<u32>, bool)>> = vec![Vec::new(); nsent];
        let mut called = vec![false; nsent];
        for (si, bi, ids, _) in &blocks {
            let last_row = row + ids.len() - 1;
            let lp = log_softmax_row(&logits.data[last_row * vsize..(last_row + 1) * vsize]);
            row += ids.len();
            called[*si] = true;
            let entry = &sents[*si].active[*bi];
            // At the step cap only a flagged, force-appended EOS is allowed.
            let at_cap = entry.tokens.len() >= sents[*si].max_new;
            for tok in allowed_next(vsize) {
                if at_cap && tok != EOS {
                    continue;
                }
                let mut t = entry.tokens.clone();
                t.push(tok);
                expansions[*si].push((entry.score + lp[tok as usize] as f64, t, at_cap));
            }
        }
        for (si, mut cands) in expansions.into_iter().enumerate() {
            if cands.is_empty() {
                continue;
            }
            cands.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
            cands.truncate(beam);
            let s = &mut sents[si];
            s.active.clear();
            for (score, tokens, forced) in cands {
                if tokens.last() == Some(&EOS) {
                    s.finished.push(Hypothesis {
                        tokens,
                        score_at: score,
                        score_nat: 0.0,
                        finished: true,
                        forced,
                    });
                } else {
                    s.active.push(BeamEntry { tokens, score });
                }
            }
            s.finished.sort_by(|a, b| rank(a.total(), &a.tokens, b.total(), &b.tokens));
            s.finished.truncate(beam);
        }
        for (si, c) in called.iter().enumerate() {
            if *c {
                sents[si].calls += 1;
            }
        }
    }

    let mut hyps = Vec::with_capacity(nsent);
    let mut counts = Vec::with_capacity(nsent);
    for s in sents {
        counts.push(s.calls);
        hyps.push(s.finished);
    }
    Ok((hyps, counts))
}

// ═══════════════════════════════════════════════════════════════════════
// Dense autoregressive decoding
// ═══════════════════════════════════════════════════════════════════════

/// Standard left-to-right beam search from BOS at positions `(0,1,2,...)`.
/// Hypotheses finish on EOS and are ranked by total log-probability.
pub fn beam_search_at(
    model: &Model<f32>,
    src: &[u32],
    beam: usize,
    max_len: Option<usize>,
) -> Result<Vec<Hypothesis>> {
    let memory = encode_sources(model, std::slice::from_ref(&src.to_vec()))?;
    let cap = max_len.unwrap_or_else(|| default_max_new(src.len()));
    let (mut hyps, _) = causal_beam_batch(model, &memory, vocab::BOS, 1, beam, &[cap])?;
    Ok(hyps.remove(0))
}

/// Batched dense translation; one decoder call per step across the batch.
pub fn translate_at_batch(
    model: &Model<f32>,
    srcs: &[Vec<u32>],
    beam: usize,
    max_len: Option<usize>,
) -> Result<Vec<Translation>> {
    let memory = encode_sources(model, srcs)?;
    let caps: Vec<usize> =
        srcs.iter().map(|s| max_len.unwrap_or_else(|| default_max_new(s.len()))).collect();
    let (hyps, counts) = causal_beam_batch(model, &memory, vocab::BOS, 1, beam, &caps)?;
    Ok(hyps
        .into_iter()
        .zip(counts)
        .map(|(hs, calls)| {
            let best = &hs[0];
            Translation {
                tokens: finalize_tokens(&best.tokens),
                score: best.total(),
                stats: DecodeStats { decoder_calls: calls, forced: best.forced },
            }
        })
        .collect())
}

// ═══════════════════════════════════════════════════════════════════════
// Two-stage decoding
// ═══════════════════════════════════════════════════════════════════════

/// Stage I: sparse causal pass from BOS_k at positions `(0, k, 2k, ...)`.
/// Each hypothesis is the chunk-final sequence ending in EOS; the implied
/// full length is `k * m`.
pub fn skip_at_stage(
    model: &Model<f32>,
    memory: &Memory<f32>,
    k: usize,
    b_at: usize,
    max_steps: usize,
) -> Result<Vec<Hypothesis>> {
    let (mut hyps, _) =
        causal_beam_batch(model, memory, vocab::bos_k(k)?, k, b_at, &[max_steps])?;
    Ok(hyps.remove(0))
}

/// Stage II input: `k-1` MASKs before every sparse token (EOS included),
/// positions `1..=k*m`, so token `z_i` lands exactly at position `i*k`.
pub fn build_nat_input(sparse: &[u32], k: usize) -> Result<(Vec<u32>, Vec<usize>)> {
    if sparse.is_empty() || *sparse.last().unwrap() != EOS {
        return Err(Error::Decode("sparse hypothesis must be non-empty and end with EOS".into()));
    }
    let m = sparse.len();
    let mut ids = Vec::with_capacity(k * m);
    for &z in sparse {
        for _ in 0..k - 1 {
            ids.push(MASK);
        }
        ids.push(z);
    }
    let positions: Vec<usize> = (1..=k * m).collect();
    Ok((ids, positions))
}

/// Stage II: one FULL-mode pass per batch of candidates; every MASK is
/// replaced by its argmax token and `score_nat` sums the mask-position
/// log-probs. Non-mask positions are untouched.
pub fn skip_cmlm_fill(
    model: &Model<f32>,
    memory: &Memory<f32>,
    candidates: &[(Vec<u32>, Vec<usize>)],
) -> Result<Vec<(Vec<u32>, f64)>> {
    let blocks: Vec<(usize, Vec<u32>, Vec<usize>)> =
        candidates.iter().map(|(ids, pos)| (0usize, ids.clone(), pos.clone())).collect();
    fill_blocks(model, memory, &blocks)
}

/// Shared fill pass: each block names its memory span. One decoder call.
fn fill_blocks(
    model: &Model<f32>,
    memory: &Memory<f32>,
    blocks: &[(usize, Vec<u32>, Vec<usize>)],
) -> Result<Vec<(Vec<u32>, f64)>> {
    let vsize = model.config.vocab_size;
    let mut session = model.session();
    let mem_t = session.inject_memory(memory);
    let inputs: Vec<DecInput<'_>> =
        blocks.iter().map(|(_, ids, pos)| DecInput { ids, positions: pos }).collect();
    let mem_of: Vec<usize> = blocks.iter().map(|(si, ..)| *si).collect();
    let logits = session.decode_batch(
        &inputs,
        &mem_t,
        &memory.spans,
        memory.kv_allowed.as_ref(),
        &mem_of,
        DecoderMode::Full,
    )?;
    let mut out = Vec::with_capacity(blocks.len());
    let mut row = 0usize;
    for (_, ids, _) in blocks {
        let mut filled = ids.clone();
        let mut score_nat = 0.0f64;
        for (i, f) in filled.iter_mut().enumerate() {
            if *f == MASK {
                let lp = log_softmax_row(&logits.data[(row + i) * vsize..(row + i + 1) * vsize]);
                let (tok, tok_lp) = argmax_allowed(&lp);
                *f = tok;
                score_nat += tok_lp;
            }
        }
        row += ids.len();
        out.push((filled, score_nat));
    }
    Ok(out)
}

/// One scored two-stage candidate.
#[derive(Debug, Clone)]
pub struct HrtCandidate {
    /// Stage-I chunk-final tokens, EOS included.
    pub sparse: Hypothesis,
    /// Untruncated stage-II construction after filling, length `k * m`.
    pub filled: Vec<u32>,
    pub score_at: f64,
    pub score_nat: f64,
}

impl HrtCandidate {
    pub fn total(&self) -> f64 {
        self.score_at + self.score_nat
    }
}

#[derive(Debug, Clone)]
pub struct HrtOutput {
    pub translation: Translation,
    /// All filled candidates, in stage-I rank order.
    pub candidates: Vec<HrtCandidate>,
    /// Index of the selected candidate.
    pub chosen: usize,
}

/// End-to-end two-stage translation of one sentence.
pub fn hrt_translate(model: &Model<f32>, src: &[u32], cfg: &DecodeConfig) -> Result<HrtOutput> {
    let mut out = hrt_translate_batch(model, std::slice::from_ref(&src.to_vec()), cfg)?;
    Ok(out.remove(0))
}

/// Batched two-stage translation. Stage I runs the sparse beam; the top
/// `b_nat` hypotheses per sentence are filled in one FULL-mode call; the
/// candidate maximizing `score_at + score_nat` wins and is truncated at its
/// first EOS.
pub fn hrt_translate_batch(
    model: &Model<f32>,
    srcs: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<HrtOutput>> {
    let memory = encode_sources(model, srcs)?;
    let caps: Vec<usize> = srcs
        .iter()
        .map(|s| cfg.max_steps.unwrap_or_else(|| default_max_steps(s.len(), cfg.k)))
        .collect();
    let (all_hyps, mut counts) =
        causal_beam_batch(model, &memory, vocab::bos_k(cfg.k)?, cfg.k, cfg.b_at, &caps)?;

    // Build the fill batch across sentences.
    let mut blocks: Vec<(usize, Vec<u32>, Vec<usize>)> = Vec::new();
    let mut owners: Vec<(usize, Hypothesis)> = Vec::new();
    for (si, hyps) in all_hyps.into_iter().enumerate() {
        for h in hyps.into_iter().take(cfg.b_nat) {
            let (ids, positions) = build_nat_input(&h.tokens, cfg.k)?;
            blocks.push((si, ids, positions));
            owners.push((si, h));
        }
    }
    let filled = fill_blocks(model, &memory, &blocks)?;
    for c in counts.iter_mut() {
        *c += 1; // the single fill call
    }

    let mut per_sentence: Vec<Vec<HrtCandidate>> = vec![Vec::new(); srcs.len()];
    for ((si, sparse), (filled_ids, score_nat)) in owners.into_iter().zip(filled) {
        let score_at = sparse.score_at;
        per_sentence[si].push(HrtCandidate { sparse, filled: filled_ids, score_at, score_nat });
    }

    let mut outputs = Vec::with_capacity(srcs.len());
    for (si, cands) in per_sentence.into_iter().enumerate() {
        let norm = |c: &HrtCandidate| {
            if cfg.length_normalize {
                c.total() / c.filled.len().max(1) as f64
            } else {
                c.total()
            }
        };
        let chosen = (0..cands.len())
            .min_by(|&a, &b| rank(norm(&cands[a]), &cands[a].filled, norm(&cands[b]), &cands[b].filled))
            .ok_or_else(|| Error::Decode("no stage-I hypothesis".into()))?;
        let best = &cands[chosen];
        outputs.push(HrtOutput {
            translation: Translation {
                tokens: finalize_tokens(&best.filled),
                score: best.total(),
                stats: DecodeStats {
                    decoder_calls: counts[si],
                    forced: best.sparse.forced,
                },
            },
            candidates: cands,
            chosen,
        });
    }
    Ok(outputs)
}

// ═══════════════════════════════════════════════════════════════════════
// Mask-predict refinement
// ═══════════════════════════════════════════════════════════════════════

/// Tokens re-masked at refinement round `i` of `total` for length `n`.
pub fn remask_count(n: usize, total: usize, i: usize) -> usize {
    (n * (total - i)).div_ceil(total)
}

#[derive(Debug, Clone)]
pub struct CmlmOutput {
    pub translation: Translation,
    /// Refinement rounds actually executed (early stop included).
    pub iterations_used: u32,
}

/// Iterative mask-predict for one sentence.
pub fn cmlm_mask_predict(
    model: &Model<f32>,
    src: &[u32],
    iterations: usize,
    beam: usize,
    length_mode: LengthMode,
    oracle_len: Option<usize>,
) -> Result<CmlmOutput> {
    let mut out = cmlm_translate_batch(
        model,
        std::slice::from_ref(&src.to_vec()),
        iterations,
        beam,
        length_mode,
        oracle_len.map(|l| vec![l]).as_deref(),
    )?;
    Ok(out.remove(0))
}

struct CmlmCandidate {
    sentence: usize,
    tokens: Vec<u32>,
    conf: Vec<f64>,
    prev: Option<Vec<u32>>,
    active: bool,
}

/// Batched mask-predict. Round 0 predicts every position of an all-MASK
/// input; round `i` re-masks the lowest-confidence tokens and re-predicts
/// them; a candidate stops as soon as one round leaves it unchanged. With a
/// length head, `beam` length candidates race and the best mean log-prob
/// wins.
pub fn cmlm_translate_batch(
    model: &Model<f32>,
    srcs: &[Vec<u32>],
    iterations: usize,
    beam: usize,
    length_mode: LengthMode,
    oracle_lens: Option<&[usize]>,
) -> Result<Vec<CmlmOutput>> {
    if iterations == 0 {
        return Err(Error::Config("mask-predict needs at least one iteration".into()));
    }
    let memory = encode_sources(model, srcs)?;
    let lengths = candidate_lengths(model, &memory, srcs, beam, length_mode, oracle_lens)?;

    let mut cands: Vec<CmlmCandidate> = Vec::new();
    for (si, lens) in lengths.iter().enumerate() {
        for &n in lens {
            cands.push(CmlmCandidate {
                sentence: si,
                tokens: vec![MASK; n],
                conf: vec![0.0; n],
                prev: None,
                active: true,
            });
        }
    }
    let mut calls = vec![0u32; srcs.len()];
    let mut rounds_used = vec![0u32; srcs.len()];

    for round in 0..iterations {
        let mut blocks: Vec<(usize, Vec<u32>, Vec<usize>)> = Vec::new();
        let mut block_owner: Vec<usize> = Vec::new();
        let mut remask_sets: Vec<Vec<usize>> = Vec::new();
        for (ci, c) in cands.iter().enumerate() {
            if !c.active {
                continue;
            }
            let n = c.tokens.len();
            let remask: Vec<usize> = if round == 0 {
                (0..n).collect()
            } else {
                let count = remask_count(n, iterations, round).min(n);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    c.conf[a].partial_cmp(&c.conf[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
                });
                let mut set: Vec<usize> = order.into_iter().take(count).collect();
                set.sort_unstable();
                set
            };
            let mut ids = c.tokens.clone();
            for &i in &remask {
                ids[i] = MASK;
            }
            ids.push(EOS);
            let positions: Vec<usize> = (1..=ids.len()).collect();
            blocks.push((c.sentence, ids, positions));
            block_owner.push(ci);
            remask_sets.push(remask);
        }
        if blocks.is_empty() {
            break;
        }
        let filled = fill_blocks_with_conf(model, &memory, &blocks)?;
        let mut touched = vec![false; srcs.len()];
        for ((ci, (new_ids, confs)), remask) in
            block_owner.iter().zip(filled).zip(remask_sets.iter())
        {
            let c = &mut cands[*ci];
            touched[c.sentence] = true;
            for &i in remask {
                c.tokens[i] = new_ids[i];
                c.conf[i] = confs[i];
            }
            if c.prev.as_deref() == Some(c.tokens.as_slice()) {
                c.active = false;
            } else {
                c.prev = Some(c.tokens.clone());
            }
        }
        for (si, t) in touched.iter().enumerate() {
            if *t {
                calls[si] += 1;
                rounds_used[si] += 1;
            }
        }
    }

    // Pick the best candidate per sentence by mean token log-prob.
    let mut best: Vec<Option<(f64, usize)>> = vec![None; srcs.len()];
    for (ci, c) in cands.iter().enumerate() {
        let n = c.tokens.len().max(1);
        let mean = c.conf.iter().sum::<f64>() / n as f64;
        let slot = &mut best[c.sentence];
        if slot.map_or(true, |(s, _)| mean > s) {
            *slot = Some((mean, ci));
        }
    }
    let mut outs = Vec::with_capacity(srcs.len());
    for (si, slot) in best.iter().enumerate() {
        let (_, ci) = slot.ok_or_else(|| Error::Decode("no length candidate".into()))?;
        let c = &cands[ci];
        outs.push(CmlmOutput {
            translation: Translation {
                tokens: finalize_tokens(&c.tokens),
                score: c.conf.iter().sum::<f64>(),
                stats: DecodeStats { decoder_calls: calls[si], forced: false },
            },
            iterations_used: rounds_used[si],
        });
    }
    Ok(outs)
}

/// Candidate target lengths per sentence: the length head's top offsets in
/// predicted mode, the oracle length otherwise. Non-positive predictions
/// fall back to the source length.
fn candidate_lengths(
    model: &Model<f32>,
    memory: &Memory<f32>,
    srcs: &[Vec<u32>],
    beam: usize,
    length_mode: LengthMode,
    oracle_lens: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    let beam = beam.max(1);
    match length_mode {
        LengthMode::Oracle => {
            let lens = oracle_lens
                .ok_or_else(|| Error::Decode("oracle length mode needs reference lengths".into()))?;
            Ok(lens.iter().map(|&l| vec![l.max(1)]).collect())
        }
        LengthMode::Predicted => {
            let mut session = model.session();
            let mem_t = session.inject_memory(memory);
            let logits = session.length_logits_over(&mem_t, &memory.spans)?;
            let classes = crate::model::LEN_CLASSES;
            let mut out = Vec::with_capacity(srcs.len());
            for (si, src) in srcs.iter().enumerate() {
                let row = &logits.data[si * classes..(si + 1) * classes];
                let mut idx: Vec<usize> = (0..classes).collect();
                idx.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
                });
                let mut lens = Vec::new();
                for &off_idx in idx.iter() {
                    let n = src.len() as i64 + (off_idx as i64 - crate::model::LEN_OFFSET_RANGE);
                    let n = if n <= 0 { src.len().max(1) } else { n as usize };
                    if !lens.contains(&n) {
                        lens.push(n);
                    }
                    if lens.len() == beam {
                        break;
                    }
                }
                out.push(lens);
            }
            Ok(out)
        }
    }
}

/// Fill pass that also reports per-position chosen log-probs (confidence).
fn fill_blocks_with_conf(
    model: &Model<f32>,
    memory: &Memory<f32>,
    blocks: &[(usize, Vec<u32>, Vec<usize>)],
) -> Result<Vec<(Vec<u32>, Vec<f64>)>> {
    let vsize = model.config.vocab_size;
    let mut session = model.session();
    let mem_t = session.inject_memory(memory);
    let inputs: Vec<DecInput<'_>> =
        blocks.iter().map(|(_, ids, pos)| DecInput { ids, positions: pos }).collect();
    let mem_of: Vec<usize> = blocks.iter().map(|(si, ..)| *si).collect();
    let logits = session.decode_batch(
        &inputs,
        &mem_t,
        &memory.spans,
        memory.kv_allowed.as_ref(),
        &mem_of,
        DecoderMode::Full,
    )?;
    let mut out = Vec::with_capacity(blocks.len());
    let mut row = 0usize;
    for (_, ids, _) in blocks {
        let mut filled = ids.clone();
        let mut conf = vec![0.0f64; ids.len()];
        for i in 0..ids.len() {
            if ids[i] == MASK {
                let lp = log_softmax_row(&logits.data[(row + i) * vsize..(row + i + 1) * vsize]);
                let (tok, tok_lp) = argmax_allowed(&lp);
                filled[i] = tok;
                conf[i] = tok_lp;
            }
        }
        row += ids.len();
        out.push((filled, conf));
    }
    Ok(out)
}

// ═══════════════════════════════════════════════════════════════════════
// Oracles (teacher-forced recomputation)
// ═══════════════════════════════════════════════════════════════════════

/// Recompute the causal-pass score of a sparse path by teacher forcing:
/// one forward over the full prefix, summing each path token's log-prob.
pub fn forced_score_at(
    model: &Model<f32>,
    memory: &Memory<f32>,
    sparse: &[u32],
    k: usize,
) -> Result<f64> {
    if sparse.is_empty() || *sparse.last().unwrap() != EOS {
        return Err(Error::Decode("sparse path must end with EOS".into()));
    }
    let mut ids = Vec::with_capacity(sparse.len());
    ids.push(vocab::bos_k(k)?);
    ids.extend_from_slice(&sparse[..sparse.len() - 1]);
    let positions: Vec<usize> = (0..ids.len()).map(|i| i * k).collect();
    let vsize = model.config.vocab_size;
    let mut session = model.session();
    let mem_t = session.inject_memory(memory);
    let logits = session.decode_batch(
        &[DecInput { ids: &ids, positions: &positions }],
        &mem_t,
        &memory.spans,
        memory.kv_allowed.as_ref(),
        &[0],
        DecoderMode::Causal,
    )?;
    let mut score = 0.0f64;
    for (r, &tok) in sparse.iter().enumerate() {
        let lp = log_softmax_row(&logits.data[r * vsize..(r + 1) * vsize]);
        score += lp[tok as usize] as f64;
    }
    Ok(score)
}

/// Recompute the fill-pass score of a filled construction: one FULL-mode
/// forward over the mask layout, summing log-probs of the filled tokens at
/// mask slots.
pub fn forced_score_nat(
    model: &Model<f32>,
    memory: &Memory<f32>,
    masked_ids: &[u32],
    filled_ids: &[u32],
    positions: &[usize],
) -> Result<f64> {
    let vsize = model.config.vocab_size;
    let mut session = model.session();
    let mem_t = session.inject_memory(memory);
    let logits = session.decode_batch(
        &[DecInput { ids: masked_ids, positions }],
        &mem_t,
        &memory.spans,
        memory.kv_allowed.as_ref(),
        &[0],
        DecoderMode::Full,
    )?;
    let mut score = 0.0f64;
    for i in 0..masked_ids.len() {
        if masked_ids[i] == MASK {
            let lp = log_softmax_row(&logits.data[i * vsize..(i + 1) * vsize]);
            score += lp[filled_ids[i] as usize] as f64;
        }
    }
    Ok(score)
}

/// Encode one source (EOS appended) into reusable memory.
pub fn encode_single(model: &Model<f32>, src: &[u32]) -> Result<Memory<f32>> {
    encode_sources(model, std::slice::from_ref(&src.to_vec()))
}

/// Encode a batch of sources (EOS appended) into reusable memory.
pub fn encode_single_batch(model: &Model<f32>, srcs: &[Vec<u32>]) -> Result<Memory<f32>> {
    encode_sources(model, srcs)
}

/// One FULL-mode pass that replaces every MASK with its best *content*
/// token — the masking-experiment fill, where the construction fixes the
/// output length and unmasked positions must survive bit-identically.
pub fn fill_masked_blocks(
    model: &Model<f32>,
    memory: &Memory<f32>,
    blocks: &[(usize, Vec<u32>, Vec<usize>)],
) -> Result<Vec<(Vec<u32>, f64)>> {
    let vsize = model.config.vocab_size;
    let mut session = model.session();
    let mem_t = session.inject_memory(memory);
    let inputs: Vec<DecInput<'_>> =
        blocks.iter().map(|(_, ids, pos)| DecInput { ids, positions: pos }).collect();
    let mem_of: Vec<usize> = blocks.iter().map(|(si, ..)| *si).collect();
    let logits = session.decode_batch(
        &inputs,
        &mem_t,
        &memory.spans,
        memory.kv_allowed.as_ref(),
        &mem_of,
        DecoderMode::Full,
    )?;
    let mut out = Vec::with_capacity(blocks.len());
    let mut row = 0usize;
    for (_, ids, _) in blocks {
        let mut filled = ids.clone();
        let mut score = 0.0f64;
        for (i, f) in filled.iter_mut().enumerate() {
            if *f == MASK {
                let lp = log_softmax_row(&logits.data[(row + i) * vsize..(row + i + 1) * vsize]);
                let mut best = vocab::RESERVED;
                let mut best_lp = lp[vocab::RESERVED as usize];
                for tok in vocab::RESERVED + 1..vsize as u32 {
                    if lp[tok as usize] > best_lp {
                        best = tok;
                        best_lp = lp[tok as usize];
                    }
                }
                *f = best;
                score += best_lp as f64;
            }
        }
        row += ids.len();
        out.push((filled, score));
    }
    Ok(out)
}

/// Memory for one sentence out of a batch encode.
pub fn memory_for_sentence(model: &Model<f32>, mem: &Memory<f32>, si: usize) -> Memory<f32> {
    single_memory(mem, si, model.config.model_dim)
}
