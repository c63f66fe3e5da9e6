//! Acceptance suite: one test per release criterion, sharing one set of
//! trained desk-scale artifacts. Run with `--nocapture` for the PASS lines.
//!
//! The heavyweight criteria (end-to-end quality, masking curves, speed
//! benchmark) train three models on the synthetic cipher task once; light
//! criteria run against oracles and exhaustive enumerations.

use hrt_core::corpus::{self, ToyTaskSpec};
use hrt_core::decode::{self, DecodeConfig, LengthMode};
use hrt_core::masking::{self, MaskSpec, MaskStrategy};
use hrt_core::model::{DecoderMode, Model, ModelConfig};
use hrt_core::tasks::{self, CurriculumState};
use hrt_core::tensor::log_softmax_row;
use hrt_core::trainer::{self, ParallelPair, TrainConfig, TrainMode};
use hrt_core::vocab::{self, Vocab, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

// ═══════════════════════════════════════════════════════════════════════
// Shared trained artifacts
// ═══════════════════════════════════════════════════════════════════════

struct Artifacts {
    vocab: Vocab,
    train_pairs: Vec<ParallelPair>,
    test_srcs: Vec<Vec<u32>>,
    test_refs: Vec<String>,
    at: Model<f32>,
    hrt: Model<f32>,
    cmlm: Model<f32>,
    at_bleu: f64,
    hrt_bleu: f64,
    cmlm_bleu: f64,
    at_test_hyps: Vec<Vec<u32>>,
    build_seconds: f64,
}

fn desk_model_config(vocab_size: usize, length_head: bool) -> ModelConfig {
    ModelConfig {
        vocab_size,
        model_dim: 64,
        ffn_dim: 128,
        heads: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        max_position: 256,
        dropout: 0.0,
        chunk_size: 2,
        length_head,
    }
}

fn desk_train_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        total_steps: 10_000,
        lambda: 1.0,
        p_raw: if mode == TrainMode::AtOnly { 1.0 } else { 0.5 },
        batch_pairs: 16,
        peak_lr: 3e-3,
        warmup_steps: 400,
        label_smoothing: 0.1,
        seed: 1,
        k: 2,
        curriculum: true,
        log_every: 0,
        checkpoint_every: 0,
    }
}

fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(build_artifacts)
}

fn build_artifacts() -> Artifacts {
    let started = Instant::now();
    let spec = ToyTaskSpec::default();
    let generated = corpus::generate_corpus(&spec).expect("corpus");
    let vocab = generated.vocab.clone();

    let mut train_pairs: Vec<ParallelPair> = generated
        .train
        .iter()
        .map(|(s, t)| ParallelPair { src: s.clone(), tgt_raw: t.clone(), tgt_distilled: None })
        .collect();
    let test_srcs: Vec<Vec<u32>> = generated.test.iter().map(|(s, _)| s.clone()).collect();
    let test_refs: Vec<String> = generated
        .test
        .iter()
        .map(|(_, t)| vocab.decode_line(t).expect("ref line"))
        .collect();

    // Dense baseline, trained on raw targets.
    let mut at = Model::new(desk_model_config(vocab.size(), false), 1).expect("at model");
    let at_cfg = desk_train_config(TrainMode::AtOnly);
    trainer::train(&mut at, &train_pairs, &at_cfg, None, |_| {}).expect("at training");

    // Distill the training sources with the dense baseline.
    for chunk_start in (0..train_pairs.len()).step_by(64) {
        let end = (chunk_start + 64).min(train_pairs.len());
        let srcs: Vec<Vec<u32>> =
            train_pairs[chunk_start..end].iter().map(|p| p.src.clone()).collect();
        let outs = decode::translate_at_batch(&at, &srcs, 5, None).expect("distill");
        for (i, o) in outs.into_iter().enumerate() {
            train_pairs[chunk_start + i].tgt_distilled = Some(o.tokens);
        }
    }

    // Hybrid model, fine-tuned from the dense baseline.
    let mut hrt = Model::new(desk_model_config(vocab.size(), false), 99).expect("hrt model");
    hrt.init_from(&at).expect("fine-tune init");
    let hrt_cfg = desk_train_config(TrainMode::Hrt);
    trainer::train(&mut hrt, &train_pairs, &hrt_cfg, None, |_| {}).expect("hrt training");

    // Mask-predict baseline with the length head.
    let mut cmlm = Model::new(desk_model_config(vocab.size(), true), 7).expect("cmlm model");
    let cmlm_cfg = desk_train_config(TrainMode::CmlmOnly);
    trainer::train(&mut cmlm, &train_pairs, &cmlm_cfg, None, |_| {}).expect("cmlm training");

    // Translate the held-out test set with all three systems.
    let mut at_lines = Vec::new();
    let mut at_test_hyps = Vec::new();
    let mut hrt_lines = Vec::new();
    let mut cmlm_lines = Vec::new();
    let dc = DecodeConfig::new(2, 5, 1).expect("decode config");
    for chunk in test_srcs.chunks(32) {
        for t in decode::translate_at_batch(&at, chunk, 5, None).expect("at translate") {
            at_lines.push(vocab.decode_line(&t.tokens).expect("line"));
            at_test_hyps.push(t.tokens);
        }
        for o in decode::hrt_translate_batch(&hrt, chunk, &dc).expect("hrt translate") {
            hrt_lines.push(vocab.decode_line(&o.translation.tokens).expect("line"));
        }
        for o in
            decode::cmlm_translate_batch(&cmlm, chunk, 10, 5, LengthMode::Predicted, None)
                .expect("cmlm translate")
        {
            cmlm_lines.push(vocab.decode_line(&o.translation.tokens).expect("line"));
        }
    }
    let at_bleu = corpus::bleu(&at_lines, &test_refs, false).expect("at bleu");
    let hrt_bleu = corpus::bleu(&hrt_lines, &test_refs, false).expect("hrt bleu");
    let cmlm_bleu = corpus::bleu(&cmlm_lines, &test_refs, false).expect("cmlm bleu");

    let build_seconds = started.elapsed().as_secs_f64();
    eprintln!(
        "[artifacts] built in {:.0}s: BLEU at {:.2} / hrt {:.2} / cmlm {:.2}",
        build_seconds, at_bleu, hrt_bleu, cmlm_bleu
    );
    Artifacts {
        vocab,
        train_pairs,
        test_srcs,
        test_refs,
        at,
        hrt,
        cmlm,
        at_bleu,
        hrt_bleu,
        cmlm_bleu,
        at_test_hyps,
        build_seconds,
    }
}

// ═══════════════════════════════════════════════════════════════════════
// 1. Gradient correctness
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c01_gradients_match_central_differences() {
    let started = Instant::now();
    for (name, err) in hrt_core::tensor::standard_op_grad_checks::<f64>(1e-6).unwrap() {
        assert!(err < 1e-4, "op {name}: max rel error {err}");
    }
    for (name, err) in hrt_core::model::full_model_grad_check(1e-5).unwrap() {
        assert!(err < 1e-4, "model param {name}: max rel error {err}");
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient checks took {secs:.1}s, budget is 2 minutes");
    println!("criterion 01 PASS: all analytic gradients within 1e-4 ({secs:.1}s)");
}

// ═══════════════════════════════════════════════════════════════════════
// 2. Golden training-sample constructions
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c02_golden_task_constructions() {
    let y: Vec<u32> = (0..4).map(|i| vocab::RESERVED + i).collect();
    let b2 = vocab::bos_k(2).unwrap();

    let at = tasks::build_task_at(&y).unwrap();
    assert_eq!(at.dec_input, vec![vocab::BOS, y[0], y[1], y[2], y[3]]);
    assert_eq!(at.positions, vec![0, 1, 2, 3, 4]);
    assert_eq!(at.targets, vec![y[0], y[1], y[2], y[3], EOS]);
    assert_eq!(at.ignore, vec![false; 5]);

    // the random-mask task must be able to produce the golden {2,3} layout
    let mut found = false;
    for seed in 0..2000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = tasks::build_task_cmlm(&y, &mut rng).unwrap();
        if s.dec_input == vec![y[0], vocab::MASK, vocab::MASK, y[3], EOS] {
            assert_eq!(s.positions, vec![1, 2, 3, 4, 5]);
            assert_eq!(s.targets, vec![y[0], y[1], y[2], y[3], EOS]);
            assert_eq!(s.ignore, vec![true, false, false, true, true]);
            found = true;
            break;
        }
    }
    assert!(found, "golden mask pattern {{2,3}} unreachable");

    let skip_at = tasks::build_task_skip_at(&y, 2).unwrap().unwrap();
    assert_eq!(skip_at.dec_input, vec![b2, y[1], y[3]]);
    assert_eq!(skip_at.positions, vec![0, 2, 4]);
    assert_eq!(skip_at.targets, vec![y[1], y[3], EOS]);
    assert_eq!(skip_at.ignore, vec![false; 3]);

    let skip_cmlm = tasks::build_task_skip_cmlm(&y, 2).unwrap().unwrap();
    assert_eq!(skip_cmlm.dec_input, vec![vocab::MASK, y[1], vocab::MASK, y[3], EOS]);
    assert_eq!(skip_cmlm.positions, vec![1, 2, 3, 4, 5]);
    assert_eq!(skip_cmlm.targets, vec![y[0], y[1], y[2], y[3], EOS]);
    assert_eq!(skip_cmlm.ignore, vec![false, true, false, true, true]);

    println!("criterion 02 PASS: all four golden constructions exact");
}

// ═══════════════════════════════════════════════════════════════════════
// 3. Supervision partition
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c03_supervision_partitions_target() {
    for k in 1usize..=4 {
        for n in k..=32 {
            let y: Vec<u32> = (0..n as u32).map(|i| vocab::RESERVED + (i % 50)).collect();
            let skip_at = tasks::build_task_skip_at(&y, k).unwrap().unwrap();
            let mut seen: Vec<(usize, u32)> = Vec::new();
            for (i, t) in skip_at
                .targets
                .iter()
                .zip(skip_at.ignore.iter())
                .enumerate()
                .filter(|(_, (_, ig))| !**ig)
                .map(|(i, (t, _))| (i, *t))
            {
                // sparse-pass slot i supervises position (i+1)*k, EOS at the end
                let pos = (i + 1) * k;
                seen.push((pos.min(n + 1), t));
            }
            if let Some(sc) = tasks::build_task_skip_cmlm(&y, k).unwrap() {
                for (i, (t, ig)) in sc.targets.iter().zip(sc.ignore.iter()).enumerate() {
                    if !ig {
                        seen.push((i + 1, *t));
                    }
                }
            }
            seen.sort_unstable();
            let positions: Vec<usize> = seen.iter().map(|(p, _)| *p).collect();
            let want: Vec<usize> = (1..=n + 1).collect();
            assert_eq!(positions, want, "k={k} n={n}: every slot exactly once");
            for (p, t) in &seen {
                let expect = if *p == n + 1 { EOS } else { y[*p - 1] };
                assert_eq!(*t, expect, "k={k} n={n} position {p}");
            }
        }
    }
    println!("criterion 03 PASS: skip tasks partition {{y_1..y_N, EOS}} for k<=4, N<=32");
}

// ═══════════════════════════════════════════════════════════════════════
// 4. Curriculum schedule
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c04_curriculum_schedule_exact() {
    let p = |t, total, lambda| CurriculumState { t, total, lambda }.p_k();
    assert_eq!(p(0, 1000, 1.0), 0.0);
    assert_eq!(p(1000, 1000, 1.0), 1.0);
    assert_eq!(p(0, 1000, 2.0), 0.0);
    assert_eq!(p(1000, 1000, 2.0), 1.0);
    assert!((p(500, 1000, 1.0) - 0.5).abs() < 1e-12);
    assert!((p(500, 1000, 2.0) - 0.25).abs() < 1e-12);
    for lambda in [0.5, 1.0, 2.0, 3.0] {
        let mut last = -1.0f64;
        for t in 0..=1000 {
            let v = p(t, 1000, lambda);
            assert!(v >= last, "lambda {lambda}: decreased at t={t}");
            last = v;
        }
    }
    println!("criterion 04 PASS: schedule endpoints, midpoints, and monotonicity exact");
}

// ═══════════════════════════════════════════════════════════════════════
// 5. Beam-search enumeration oracle
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c05_full_width_beam_matches_enumeration() {
    let started = Instant::now();
    // 4 content tokens, so full width at depth 4 is 4^4 = 256.
    let config = ModelConfig {
        vocab_size: vocab::RESERVED as usize + 4,
        model_dim: 16,
        ffn_dim: 24,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        max_position: 32,
        dropout: 0.0,
        chunk_size: 2,
        length_head: false,
    };
    let model = Model::<f32>::new(config.clone(), 77).unwrap();
    let vsize = config.vocab_size as u32;
    let content: Vec<u32> = (vocab::RESERVED..vsize).collect();
    let max_len = 4usize;
    let beam = 256usize;
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    for case in 0..50 {
        let src: Vec<u32> =
            (0..rng.gen_range(1..=4)).map(|_| content[rng.gen_range(0..content.len())]).collect();
        let got = decode::beam_search_at(&model, &src, beam, Some(max_len)).unwrap();
        let memory = decode::encode_single(&model, &src).unwrap();

        // Brute force: score every content sequence of length <= max_len
        // (EOS appended) with one teacher-forced pass each.
        let mut best: Option<(f64, Vec<u32>)> = None;
        let mut stack: Vec<Vec<u32>> = vec![Vec::new()];
        while let Some(seq) = stack.pop() {
            let mut ids = vec![vocab::BOS];
            ids.extend_from_slice(&seq);
            let positions: Vec<usize> = (0..ids.len()).collect();
            let logits =
                model.decode_step(&ids, &positions, &memory, DecoderMode::Causal).unwrap();
            let mut score = 0.0f64;
            for (row, &tok) in seq.iter().enumerate() {
                let lp = log_softmax_row(
                    &logits[row * config.vocab_size..(row + 1) * config.vocab_size],
                );
                score += lp[tok as usize] as f64;
            }
            let last = seq.len();
            let lp =
                log_softmax_row(&logits[last * config.vocab_size..(last + 1) * config.vocab_size]);
            let full = score + lp[EOS as usize] as f64;
            let mut tokens = seq.clone();
            tokens.push(EOS);
            let better = match &best {
                None => true,
                Some((bs, bt)) => {
                    full > *bs || (full == *bs && tokens < *bt)
                }
            };
            if better {
                best = Some((full, tokens));
            }
            if seq.len() < max_len {
                for &c in &content {
                    let mut next = seq.clone();
                    next.push(c);
                    stack.push(next);
                }
            }
        }
        let (oracle_score, oracle_tokens) = best.unwrap();
        assert_eq!(
            got[0].tokens, oracle_tokens,
            "case {case}: beam {:?} vs enumeration {:?} ({} vs {})",
            got[0].tokens, oracle_tokens, got[0].total(), oracle_score
        );
        assert!((got[0].total() - oracle_score).abs() < 1e-6);
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "oracle comparison took {secs:.1}s, budget is 1 minute");
    println!("criterion 05 PASS: full-width beam equals exhaustive argmax on 50 sources ({secs:.1}s)");
}

// ═══════════════════════════════════════════════════════════════════════
// 6. Two-stage score consistency
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c06_score_decomposition_and_k1_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut checked = 0;
    for case in 0..100 {
        let config = ModelConfig {
            vocab_size: 16,
            model_dim: 16,
            ffn_dim: 24,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            max_position: 96,
            dropout: 0.0,
            chunk_size: 2,
            length_head: false,
        };
        let model = Model::<f32>::new(config, case % 9).unwrap();
        let len = rng.gen_range(1..=7);
        let src: Vec<u32> = (0..len).map(|_| rng.gen_range(vocab::RESERVED..16)).collect();
        let k = rng.gen_range(1..=4);
        let b_at = rng.gen_range(1..=4);
        let b_nat = rng.gen_range(1..=b_at);
        let dc = DecodeConfig::new(k, b_at, b_nat).unwrap();
        let out = decode::hrt_translate(&model, &src, &dc).unwrap();
        let memory = decode::encode_single(&model, &src).unwrap();
        for cand in &out.candidates {
            let at = decode::forced_score_at(&model, &memory, &cand.sparse.tokens, k).unwrap();
            let (masked, positions) = decode::build_nat_input(&cand.sparse.tokens, k).unwrap();
            let nat =
                decode::forced_score_nat(&model, &memory, &masked, &cand.filled, &positions)
                    .unwrap();
            assert!(
                (cand.total() - (at + nat)).abs() < 1e-5,
                "case {case}: S={} vs recomputed {}",
                cand.total(),
                at + nat
            );
            checked += 1;
        }
    }
    assert!(checked >= 100);

    // k=1: the two-stage path equals the dense path exactly once the
    // stage-I start symbol shares the BOS embedding row.
    for seed in 0..10u64 {
        let mut model = Model::<f32>::new(
            ModelConfig {
                vocab_size: 16,
                model_dim: 16,
                ffn_dim: 24,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                max_position: 96,
                dropout: 0.0,
                chunk_size: 1,
                length_head: false,
            },
            seed,
        )
        .unwrap();
        let d = model.config.model_dim;
        let b1 = vocab::bos_k(1).unwrap() as usize;
        model.store.update(0, |w| {
            let src: Vec<f32> =
                w[vocab::BOS as usize * d..(vocab::BOS as usize + 1) * d].to_vec();
            w[b1 * d..(b1 + 1) * d].copy_from_slice(&src);
        });
        let src: Vec<u32> = (0..5).map(|i| vocab::RESERVED + (seed as u32 + i) % 8).collect();
        let beam = 4;
        let at = decode::beam_search_at(&model, &src, beam, None).unwrap();
        let dc = DecodeConfig::new(1, beam, 1).unwrap();
        let hrt = decode::hrt_translate(&model, &src, &dc).unwrap();
        assert_eq!(
            hrt.translation.tokens,
            decode::finalize_tokens(&at[0].tokens),
            "seed {seed}: k=1 outputs must match exactly"
        );
    }
    println!("criterion 06 PASS: {checked} fuzzed scores within 1e-5; k=1 equals dense decoding");
}

// ═══════════════════════════════════════════════════════════════════════
// 7. Mask-construction laws
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c07_mask_construction_laws() {
    // stage-II construction law
    for k in 1usize..=4 {
        for m in 1usize..=32 {
            let mut sparse: Vec<u32> =
                (0..m as u32 - 1).map(|i| vocab::RESERVED + (i % 16)).collect();
            sparse.push(EOS);
            let (ids, pos) = decode::build_nat_input(&sparse, k).unwrap();
            assert_eq!(ids.len(), k * m, "length k*m at k={k} m={m}");
            for (i, &z) in sparse.iter().enumerate() {
                assert_eq!(ids[(i + 1) * k - 1], z);
                assert_eq!(pos[(i + 1) * k - 1], (i + 1) * k);
            }
        }
    }
    // masking-rate law
    for n in 1usize..=32 {
        for i in 1..=10 {
            let p = i as f64 / 10.0;
            let want = (((n as f64) * p).floor() as usize).max(1);
            assert_eq!(masking::n_mask(n, p), want, "n={n} p={p}");
            let toks: Vec<u32> = (0..n as u32).map(|t| vocab::RESERVED + (t % 9)).collect();
            for strategy in [MaskStrategy::Head, MaskStrategy::Tail, MaskStrategy::Random] {
                let spec = MaskSpec { strategy, p_mask: p, k: 0, seed: 5 };
                let (_, positions) = masking::apply_mask(&toks, &spec).unwrap();
                assert_eq!(positions.len(), want.min(n));
            }
        }
    }
    // chunk effective rate at N=1000
    let toks: Vec<u32> = (0..1000).map(|t| vocab::RESERVED + (t % 9) as u32).collect();
    for k in [2usize, 3, 4] {
        let spec = MaskSpec { strategy: MaskStrategy::Chunk, p_mask: 0.0, k, seed: 0 };
        let (_, positions) = masking::apply_mask(&toks, &spec).unwrap();
        let rate = positions.len() as f64 / 1000.0;
        assert!(
            (rate - (1.0 - 1.0 / k as f64)).abs() < 0.01,
            "chunk k={k}: rate {rate}"
        );
    }
    println!("criterion 07 PASS: construction and masking-rate laws hold exhaustively");
}

// ═══════════════════════════════════════════════════════════════════════
// 8. End-to-end quality on the toy task
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c08_toy_task_quality() {
    let a = artifacts();
    assert!(a.at_bleu >= 95.0, "dense baseline BLEU {:.2} < 95", a.at_bleu);
    assert!(a.hrt_bleu >= 95.0, "hybrid BLEU {:.2} < 95", a.hrt_bleu);
    assert!(
        a.at_bleu - a.hrt_bleu <= 1.0,
        "hybrid BLEU {:.2} more than 1.0 below dense {:.2}",
        a.hrt_bleu,
        a.at_bleu
    );
    assert!(
        a.at_bleu - a.cmlm_bleu <= 2.0,
        "mask-predict BLEU {:.2} more than 2.0 below dense {:.2}",
        a.cmlm_bleu,
        a.at_bleu
    );
    assert!(
        a.build_seconds < 3600.0,
        "artifact build took {:.0}s, budget is 60 minutes",
        a.build_seconds
    );
    println!(
        "criterion 08 PASS: BLEU at {:.2} / hrt {:.2} / cmlm {:.2} in {:.0}s",
        a.at_bleu, a.hrt_bleu, a.cmlm_bleu, a.build_seconds
    );
}

// ═══════════════════════════════════════════════════════════════════════
// 9. Masking-strategy ordering at matched rate 0.5
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c09_masking_strategy_ordering() {
    let a = artifacts();
    let batch = 32;
    let score = |spec: &MaskSpec| {
        masking::fill_and_score_once(
            &a.cmlm,
            &a.vocab,
            &a.test_srcs,
            &a.at_test_hyps,
            &a.test_refs,
            spec,
            batch,
        )
        .expect("fill and score")
    };
    let head = score(&MaskSpec { strategy: MaskStrategy::Head, p_mask: 0.5, k: 0, seed: 0 });
    let tail = score(&MaskSpec { strategy: MaskStrategy::Tail, p_mask: 0.5, k: 0, seed: 0 });
    let mut random_sum = 0.0;
    for seed in [11u64, 22, 33] {
        random_sum +=
            score(&MaskSpec { strategy: MaskStrategy::Random, p_mask: 0.5, k: 0, seed });
    }
    let random = random_sum / 3.0;
    let chunk = score(&MaskSpec { strategy: MaskStrategy::Chunk, p_mask: 0.5, k: 2, seed: 0 });
    println!(
        "criterion 09 data: chunk {chunk:.2}, random {random:.2}, head {head:.2}, tail {tail:.2}"
    );
    assert!(chunk >= random, "chunk {chunk:.2} < random {random:.2}");
    assert!(
        random >= head.max(tail),
        "random {random:.2} < max(head {head:.2}, tail {tail:.2})"
    );
    assert!(
        chunk - head.max(tail) >= 0.5,
        "chunk {chunk:.2} within 0.5 of head/tail {:.2}",
        head.max(tail)
    );
    println!("criterion 09 PASS: chunk >= random >= max(head, tail) with margin >= 0.5");
}

// ═══════════════════════════════════════════════════════════════════════
// 10. Acceleration robustness
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c10_acceleration_robustness() {
    let a = artifacts();
    use hrt_core::bench::{run_bench, BenchConfig, BenchSystem, SystemKind};
    let corpus: Vec<Vec<u32>> = a.test_srcs.iter().take(96).cloned().collect();
    let systems = vec![
        BenchSystem {
            label: "at".into(),
            kind: SystemKind::At { beam: 5 },
            model: a.at.clone(),
        },
        BenchSystem {
            label: "hrt-k2".into(),
            kind: SystemKind::Hrt { k: 2, b_at: 5, b_nat: 1 },
            model: a.hrt.clone(),
        },
        BenchSystem {
            label: "cmlm-i10".into(),
            kind: SystemKind::Cmlm { iterations: 10, beam: 5 },
            model: a.cmlm.clone(),
        },
    ];
    let cfg = BenchConfig {
        batch_sizes: vec![1, 8, 16, 32],
        thread_profiles: vec![1, 4],
        runs: 5,
    };
    let report = run_bench(&systems, &corpus, &cfg).unwrap();
    print!("{}", report.table());

    for &threads in &cfg.thread_profiles {
        let a1 = report.cell("cmlm-i10", 1, threads).unwrap();
        let a32 = report.cell("cmlm-i10", 32, threads).unwrap();
        assert!(
            a32.alpha < a1.alpha,
            "threads {threads}: alpha(B=32) {:.2} !< alpha(B=1) {:.2}",
            a32.alpha,
            a1.alpha
        );
        for &b in &cfg.batch_sizes {
            let cell = report.cell("hrt-k2", b, threads).unwrap();
            assert!(
                cell.alpha > 1.0,
                "threads {threads} B={b}: hybrid alpha {:.2} not above 1",
                cell.alpha
            );
        }
    }

    // Exact decoder-call accounting, greedy, sentence by sentence.
    for src in a.test_srcs.iter().take(16) {
        let at = decode::translate_at_batch(&a.at, &[src.clone()], 1, None).unwrap().remove(0);
        assert_eq!(
            at.stats.decoder_calls as usize,
            at.tokens.len() + 1,
            "dense calls must be N+1"
        );
        let dc = DecodeConfig::new(2, 1, 1).unwrap();
        let hrt = decode::hrt_translate(&a.hrt, src, &dc).unwrap();
        let sparse_content = hrt.candidates[hrt.chosen].sparse.tokens.len() - 1;
        assert_eq!(
            hrt.translation.stats.decoder_calls as usize,
            sparse_content + 2,
            "hybrid calls must be m+2"
        );
        let cm = decode::cmlm_mask_predict(&a.cmlm, src, 10, 1, LengthMode::Predicted, None)
            .unwrap();
        assert!(cm.translation.stats.decoder_calls <= 10, "mask-predict calls must be <= I");
    }

    // Larger strides always need fewer decoder calls on the same source.
    for src in a.test_srcs.iter().take(8) {
        let k2 = decode::hrt_translate(&a.hrt, src, &DecodeConfig::new(2, 1, 1).unwrap())
            .unwrap()
            .translation
            .stats
            .decoder_calls;
        let k4 = decode::hrt_translate(&a.hrt, src, &DecodeConfig::new(4, 1, 1).unwrap())
            .unwrap()
            .translation
            .stats
            .decoder_calls;
        assert!(k4 < k2, "stride 4 used {k4} calls, stride 2 used {k2}");
    }
    println!("criterion 10 PASS: alpha trends directional, call counters exact");
}

// ═══════════════════════════════════════════════════════════════════════
// 11. Ablation hooks
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c11_ablation_hooks_complete() {
    let a = artifacts();
    let data: Vec<ParallelPair> = a.train_pairs.iter().take(2000).cloned().collect();
    let base = TrainConfig {
        total_steps: 300,
        batch_pairs: 16,
        log_every: 0,
        ..desk_train_config(TrainMode::Hrt)
    };
    let run = |cfg: &TrainConfig, finetune: bool| -> (f64, String) {
        let mut model =
            Model::new(desk_model_config(a.vocab.size(), false), 33).expect("model");
        if finetune {
            model.init_from(&a.at).expect("init");
        }
        trainer::train(&mut model, &data, cfg, None, |_| {}).expect("ablation training");
        let mut lines = Vec::new();
        let dc = DecodeConfig::new(2, 5, 1).unwrap();
        for chunk in a.test_srcs.chunks(32).take(3) {
            for o in decode::hrt_translate_batch(&model, chunk, &dc).unwrap() {
                lines.push(a.vocab.decode_line(&o.translation.tokens).unwrap());
            }
        }
        let refs = &a.test_refs[..lines.len()];
        let bleu = corpus::bleu(&lines, refs, true).unwrap();
        (bleu, serde_json::to_string(cfg).unwrap())
    };
    let (bleu_no_ft, cfg_no_ft) = run(&base, false);
    let no_md = TrainConfig { p_raw: 0.0, ..base.clone() };
    let (bleu_no_md, cfg_no_md) = run(&no_md, true);
    let no_cl = TrainConfig { curriculum: false, ..base.clone() };
    let (bleu_no_cl, cfg_no_cl) = run(&no_cl, true);
    assert_ne!(cfg_no_ft, cfg_no_md);
    assert_ne!(cfg_no_md, cfg_no_cl);
    assert_ne!(cfg_no_ft, cfg_no_cl);
    for b in [bleu_no_ft, bleu_no_md, bleu_no_cl] {
        assert!(b.is_finite() && b >= 0.0);
    }
    println!(
        "criterion 11 PASS: ablations complete (-FT {bleu_no_ft:.2}, -MD {bleu_no_md:.2}, -CL {bleu_no_cl:.2})"
    );
}

// ═══════════════════════════════════════════════════════════════════════
// 12. Determinism
// ═══════════════════════════════════════════════════════════════════════

#[test]
fn c12_bit_identical_reruns() {
    let spec = ToyTaskSpec { train: 1500, valid: 50, test: 50, ..ToyTaskSpec::default() };
    let generated = corpus::generate_corpus(&spec).unwrap();
    let data: Vec<ParallelPair> = generated
        .train
        .iter()
        .map(|(s, t)| ParallelPair { src: s.clone(), tgt_raw: t.clone(), tgt_distilled: None })
        .collect();
    let cfg = TrainConfig {
        total_steps: 150,
        p_raw: 1.0,
        log_every: 0,
        ..desk_train_config(TrainMode::Hrt)
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |path: &std::path::Path| {
        let mut model =
            Model::new(desk_model_config(generated.vocab.size(), false), 3).unwrap();
        trainer::train(&mut model, &data, &cfg, None, |_| {}).unwrap();
        model.save(path).unwrap();
        model
    };
    let p1 = dir.path().join("run1.ckpt");
    let p2 = dir.path().join("run2.ckpt");
    let m1 = run(&p1);
    let _ = run(&p2);
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "checkpoints must be byte-identical"
    );

    let srcs: Vec<Vec<u32>> = generated.test.iter().map(|(s, _)| s.clone()).collect();
    let dc = DecodeConfig::new(2, 5, 1).unwrap();
    let t1: Vec<Vec<u32>> = decode::hrt_translate_batch(&m1, &srcs, &dc)
        .unwrap()
        .into_iter()
        .map(|o| o.translation.tokens)
        .collect();
    let t2: Vec<Vec<u32>> = decode::hrt_translate_batch(&m1, &srcs, &dc)
        .unwrap()
        .into_iter()
        .map(|o| o.translation.tokens)
        .collect();
    assert_eq!(t1, t2, "translations must be identical across runs");

    use hrt_core::bench::{run_bench, BenchConfig, BenchSystem, SystemKind};
    let bench_corpus: Vec<Vec<u32>> = srcs.iter().take(8).cloned().collect();
    let bench_cfg =
        BenchConfig { batch_sizes: vec![1, 4], thread_profiles: vec![1], runs: 1 };
    let mk = || {
        vec![BenchSystem {
            label: "at".into(),
            kind: SystemKind::At { beam: 2 },
            model: m1.clone(),
        }]
    };
    let r1 = run_bench(&mk(), &bench_corpus, &bench_cfg).unwrap();
    let r2 = run_bench(&mk(), &bench_corpus, &bench_cfg).unwrap();
    let strip = |r: &hrt_core::bench::BenchReport| {
        r.cells
            .iter()
            .map(|c| {
                (
                    c.system.clone(),
                    c.batch_size,
                    c.threads,
                    (c.mean_decoder_calls * 1000.0) as u64,
                    (c.mean_output_len * 1000.0) as u64,
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&r1), strip(&r2), "report structure must be identical");
    println!("criterion 12 PASS: checkpoints, translations, and report structure reproduce");
}
