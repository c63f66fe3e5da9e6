//! Training-sample construction for the four-task curriculum.
//!
//! Two auxiliary tasks (dense autoregressive, random-mask infill) teach the
//! tokens the fixed chunk stride skips; two primary tasks (sparse
//! autoregressive, stride-mask infill) match the two inference stages. For a
//! pair and chunk size `k`, the primary pair partitions `{y_1..y_N, EOS}`:
//! chunk-final tokens and EOS are supervised by the sparse pass, everything
//! else by the fill pass.

use crate::error::{Error, Result};
use crate::model::DecoderMode;
use crate::vocab::{self, BOS, EOS, MASK};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    At,
    Cmlm,
    SkipAt,
    SkipCmlm,
}

impl Task {
    pub fn decoder_mode(self) -> DecoderMode {
        match self {
            Task::At | Task::SkipAt => DecoderMode::Causal,
            Task::Cmlm | Task::SkipCmlm => DecoderMode::Full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::At => "at",
            Task::Cmlm => "cmlm",
            Task::SkipAt => "skip_at",
            Task::SkipCmlm => "skip_cmlm",
        }
    }
}

/// One decoder training instance. `targets[i]` is supervised unless
/// `ignore[i]`; non-ignored targets are real tokens or EOS, never PAD/MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub task: Task,
    pub dec_input: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub ignore: Vec<bool>,
}

impl TrainingSample {
    fn assert_invariants(&self) {
        debug_assert_eq!(self.dec_input.len(), self.positions.len());
        debug_assert_eq!(self.dec_input.len(), self.targets.len());
        debug_assert_eq!(self.dec_input.len(), self.ignore.len());
        debug_assert!(self
            .targets
            .iter()
            .zip(self.ignore.iter())
            .all(|(&t, &ig)| ig || t == EOS || !vocab::is_special(t)));
    }

    /// Ids of supervised target tokens, in order.
    pub fn supervised(&self) -> impl Iterator<Item = u32> + '_ {
        self.targets
            .iter()
            .zip(self.ignore.iter())
            .filter_map(|(&t, &ig)| (!ig).then_some(t))
    }
}

/// Dense left-to-right sample: input `(BOS, y_1..y_N)` at positions `0..=N`,
/// targets `(y_1..y_N, EOS)`, nothing ignored.
pub fn build_task_at(target: &[u32]) -> Result<TrainingSample> {
    let n = target.len();
    if n == 0 {
        return Err(Error::Corpus("empty target".into()));
    }
    let mut dec_input = Vec::with_capacity(n + 1);
    dec_input.push(BOS);
    dec_input.extend_from_slice(target);
    let mut targets = target.to_vec();
    targets.push(EOS);
    let s = TrainingSample {
        task: Task::At,
        dec_input,
        positions: (0..=n).collect(),
        targets,
        ignore: vec![false; n + 1],
    };
    s.assert_invariants();
    Ok(s)
}

/// Random-mask infill sample: input `(y_1..y_N, EOS)` with `n ~ U{1..N}`
/// positions masked; only masked positions are supervised.
pub fn build_task_cmlm<R: Rng>(target: &[u32], rng: &mut R) -> Result<TrainingSample> {
    let n = target.len();
    if n == 0 {
        return Err(Error::Corpus("empty target".into()));
    }
    let n_mask = rng.gen_range(1..=n);
    // Partial Fisher-Yates over indices 0..n gives a uniform subset.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n_mask {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut masked = vec![false; n];
    for &i in &idx[..n_mask] {
        masked[i] = true;
    }

    let mut dec_input = Vec::with_capacity(n + 1);
    let mut targets = Vec::with_capacity(n + 1);
    let mut ignore = Vec::with_capacity(n + 1);
    for (i, &y) in target.iter().enumerate() {
        dec_input.push(if masked[i] { MASK } else { y });
        targets.push(y);
        ignore.push(!masked[i]);
    }
    dec_input.push(EOS);
    targets.push(EOS);
    ignore.push(true);
    let s = TrainingSample {
        task: Task::Cmlm,
        dec_input,
        positions: (1..=n + 1).collect(),
        targets,
        ignore,
    };
    s.assert_invariants();
    Ok(s)
}

/// Sparse autoregressive sample: chunk-final tokens `z_i = y_{i*k}` as input
/// `(BOS_k, z_1..z_m)` at positions `(0, k, 2k, ..., m*k)`, targets
/// `(z_1..z_m, EOS)`. Returns `None` when `m = floor(N/k) = 0`.
pub fn build_task_skip_at(target: &[u32], k: usize) -> Result<Option<TrainingSample>> {
    let n = target.len();
    if n == 0 {
        return Err(Error::Corpus("empty target".into()));
    }
    let m = n / k;
    if m == 0 {
        return Ok(None);
    }
    let chunk_finals: Vec<u32> = (1..=m).map(|i| target[i * k - 1]).collect();
    let mut dec_input = Vec::with_capacity(m + 1);
    dec_input.push(vocab::bos_k(k)?);
    dec_input.extend_from_slice(&chunk_finals);
    let mut targets = chunk_finals;
    targets.push(EOS);
    let s = TrainingSample {
        task: Task::SkipAt,
        dec_input,
        positions: (0..=m).map(|i| i * k).collect(),
        targets,
        ignore: vec![false; m + 1],
    };
    s.assert_invariants();
    Ok(Some(s))
}

/// Stride-mask infill sample mirroring the ground-truth layout: positions not
/// a multiple of `k` are masked and supervised; chunk-final tokens and EOS
/// are visible and ignored. Returns `None` when no position is masked (k=1).
pub fn build_task_skip_cmlm(target: &[u32], k: usize) -> Result<Option<TrainingSample>> {
    let n = target.len();
    if n == 0 {
        return Err(Error::Corpus("empty target".into()));
    }
    let mut dec_input = Vec::with_capacity(n + 1);
    let mut targets = Vec::with_capacity(n + 1);
    let mut ignore = Vec::with_capacity(n + 1);
    let mut any_masked = false;
    for (i, &y) in target.iter().enumerate() {
        let pos = i + 1; // 1-based target position
        let keep = pos % k == 0;
        dec_input.push(if keep { y } else { MASK });
        targets.push(y);
        ignore.push(keep);
        any_masked |= !keep;
    }
    dec_input.push(EOS);
    targets.push(EOS);
    ignore.push(true);
    if !any_masked {
        return Ok(None);
    }
    let s = TrainingSample {
        task: Task::SkipCmlm,
        dec_input,
        positions: (1..=n + 1).collect(),
        targets,
        ignore,
    };
    s.assert_invariants();
    Ok(Some(s))
}

/// Curriculum schedule state: the share of a batch assigned to the primary
/// (skip) tasks is `p_k = (t/T)^lambda`.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumState {
    pub t: u64,
    pub total: u64,
    pub lambda: f64,
}

impl CurriculumState {
    pub fn p_k(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        (self.t as f64 / self.total as f64).powf(self.lambda).clamp(0.0, 1.0)
    }
}

/// Both samples built from one pair, after degenerate-case substitution.
pub struct PairSamples {
    pub causal: TrainingSample,
    pub full: TrainingSample,
}

/// Primary samples for a pair; degenerate skip samples silently fall back to
/// their auxiliary counterpart so no zero-loss work enters the batch.
pub fn build_primary<R: Rng>(target: &[u32], k: usize, rng: &mut R) -> Result<PairSamples> {
    let causal = match build_task_skip_at(target, k)? {
        Some(s) => s,
        None => build_task_at(target)?,
    };
    let full = match build_task_skip_cmlm(target, k)? {
        Some(s) => s,
        None => build_task_cmlm(target, rng)?,
    };
    Ok(PairSamples { causal, full })
}

/// Auxiliary samples for a pair.
pub fn build_auxiliary<R: Rng>(target: &[u32], rng: &mut R) -> Result<PairSamples> {
    Ok(PairSamples { causal: build_task_at(target)?, full: build_task_cmlm(target, rng)? })
}

/// Split a batch by curriculum state: the first `floor(n * p_k)` pairs go to
/// the primary tasks, the rest to the auxiliary tasks.
pub fn split_batch<T>(batch: &[T], state: CurriculumState) -> (&[T], &[T]) {
    let n_primary = ((batch.len() as f64) * state.p_k()).floor() as usize;
    batch.split_at(n_primary.min(batch.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // y1..y4 as content ids
    fn y(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| vocab::RESERVED + i).collect()
    }

    #[test]
    fn golden_at_sample() {
        let t = y(4);
        let s = build_task_at(&t).unwrap();
        assert_eq!(s.dec_input, vec![BOS, t[0], t[1], t[2], t[3]]);
        assert_eq!(s.positions, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.targets, vec![t[0], t[1], t[2], t[3], EOS]);
        assert!(s.ignore.iter().all(|&b| !b));
    }

    #[test]
    fn at_minimal_and_shift_law() {
        let t = y(1);
        let s = build_task_at(&t).unwrap();
        assert_eq!(s.dec_input, vec![BOS, t[0]]);
        assert_eq!(s.targets, vec![t[0], EOS]);
        // stripping BOS from input equals targets minus EOS
        let t = y(7);
        let s = build_task_at(&t).unwrap();
        assert_eq!(&s.dec_input[1..], &s.targets[..s.targets.len() - 1]);
    }

    #[test]
    fn golden_cmlm_sample_layout() {
        // force masks at the golden positions {2,3} by searching seeds
        let t = y(4);
        let mut found = false;
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = build_task_cmlm(&t, &mut rng).unwrap();
            if s.dec_input == vec![t[0], MASK, MASK, t[3], EOS] {
                assert_eq!(s.targets, vec![t[0], t[1], t[2], t[3], EOS]);
                assert_eq!(s.ignore, vec![true, false, false, true, true]);
                assert_eq!(s.positions, vec![1, 2, 3, 4, 5]);
                found = true;
                break;
            }
        }
        assert!(found, "the {{2,3}} masking pattern never appeared");
    }

    #[test]
    fn cmlm_single_token_always_masks() {
        let t = y(1);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = build_task_cmlm(&t, &mut rng).unwrap();
            assert_eq!(s.dec_input, vec![MASK, EOS]);
            assert_eq!(s.ignore, vec![false, true]);
        }
    }

    #[test]
    fn cmlm_mask_count_is_uniform() {
        let t = y(4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let s = build_task_cmlm(&t, &mut rng).unwrap();
            let n = s.ignore.iter().filter(|&&ig| !ig).count();
            counts[n] += 1;
        }
        assert_eq!(counts[0], 0);
        for n in 1..=4 {
            let freq = counts[n] as f64 / draws as f64;
            assert!((freq - 0.25).abs() < 0.02, "n={n}: freq {freq}");
        }
    }

    #[test]
    fn golden_skip_at_sample() {
        let t = y(4);
        let s = build_task_skip_at(&t, 2).unwrap().unwrap();
        assert_eq!(s.dec_input, vec![vocab::bos_k(2).unwrap(), t[1], t[3]]);
        assert_eq!(s.positions, vec![0, 2, 4]);
        assert_eq!(s.targets, vec![t[1], t[3], EOS]);
        assert!(s.ignore.iter().all(|&b| !b));
    }

    #[test]
    fn skip_at_k1_matches_at_except_start() {
        let t = y(5);
        let skip = build_task_skip_at(&t, 1).unwrap().unwrap();
        let at = build_task_at(&t).unwrap();
        assert_eq!(skip.dec_input[0], vocab::bos_k(1).unwrap());
        assert_eq!(&skip.dec_input[1..], &at.dec_input[1..]);
        assert_eq!(skip.positions, at.positions);
        assert_eq!(skip.targets, at.targets);
    }

    #[test]
    fn skip_at_drops_tail_tokens() {
        let t = y(5);
        let s = build_task_skip_at(&t, 2).unwrap().unwrap();
        assert_eq!(s.dec_input, vec![vocab::bos_k(2).unwrap(), t[1], t[3]]);
        assert_eq!(s.positions, vec![0, 2, 4]);
        assert_eq!(s.targets, vec![t[1], t[3], EOS]);
        assert!(!s.targets.contains(&t[4]), "y5 is not a sparse-pass target");
    }

    #[test]
    fn skip_at_degenerate_chunk_returns_none() {
        assert!(build_task_skip_at(&y(2), 3).unwrap().is_none());
    }

    #[test]
    fn golden_skip_cmlm_sample() {
        let t = y(4);
        let s = build_task_skip_cmlm(&t, 2).unwrap().unwrap();
        assert_eq!(s.dec_input, vec![MASK, t[1], MASK, t[3], EOS]);
        assert_eq!(s.positions, vec![1, 2, 3, 4, 5]);
        assert_eq!(s.targets, vec![t[0], t[1], t[2], t[3], EOS]);
        assert_eq!(s.ignore, vec![false, true, false, true, true]);
    }

    #[test]
    fn skip_cmlm_tail_mask_precedes_eos() {
        let t = y(5);
        let s = build_task_skip_cmlm(&t, 2).unwrap().unwrap();
        assert_eq!(s.dec_input, vec![MASK, t[1], MASK, t[3], MASK, EOS]);
        assert_eq!(s.ignore, vec![false, true, false, true, false, true]);
    }

    #[test]
    fn skip_cmlm_k1_filtered_out() {
        assert!(build_task_skip_cmlm(&y(4), 1).unwrap().is_none());
    }

    #[test]
    fn supervision_partition_exhaustive() {
        // For every k in 1..=4 and N in k..=32 the skip pair supervises each
        // of {y_1..y_N, EOS} exactly once.
        for k in 1usize..=4 {
            for n in k..=32 {
                let t = y(n);
                let skip_at = build_task_skip_at(&t, k).unwrap().unwrap();
                let mut seen: Vec<u32> = skip_at.supervised().collect();
                if let Some(skip_cmlm) = build_task_skip_cmlm(&t, k).unwrap() {
                    seen.extend(skip_cmlm.supervised());
                }
                seen.sort_unstable();
                let mut want: Vec<u32> = t.clone();
                want.push(EOS);
                want.sort_unstable();
                assert_eq!(seen, want, "k={k} N={n}");
            }
        }
    }

    #[test]
    fn skip_positions_are_stride_k() {
        for k in 1usize..=4 {
            let t = y(4 * k);
            let s = build_task_skip_at(&t, k).unwrap().unwrap();
            for (i, &p) in s.positions.iter().enumerate() {
                assert_eq!(p, i * k);
            }
        }
    }

    #[test]
    fn curriculum_schedule() {
        let p = |t, total, lambda| CurriculumState { t, total, lambda }.p_k();
        assert_eq!(p(0, 100, 1.0), 0.0);
        assert_eq!(p(100, 100, 1.0), 1.0);
        assert!((p(50, 100, 1.0) - 0.5).abs() < 1e-12);
        assert!((p(50, 100, 2.0) - 0.25).abs() < 1e-12);
        for lambda in [0.5, 1.0, 2.0] {
            let mut last = -1.0;
            for t in 0..=1000 {
                let v = p(t, 1000, lambda);
                assert!(v >= last, "non-monotone at t={t}");
                last = v;
            }
        }
    }

    #[test]
    fn split_batch_boundaries() {
        let batch: Vec<u32> = (0..8).collect();
        let (p, a) = split_batch(&batch, CurriculumState { t: 0, total: 10, lambda: 1.0 });
        assert_eq!((p.len(), a.len()), (0, 8));
        let (p, a) = split_batch(&batch, CurriculumState { t: 10, total: 10, lambda: 1.0 });
        assert_eq!((p.len(), a.len()), (8, 0));
        let (p, a) = split_batch(&batch, CurriculumState { t: 5, total: 10, lambda: 1.0 });
        assert_eq!((p.len(), a.len()), (4, 4));
        assert_eq!(p, &[0, 1, 2, 3]);
    }

    proptest::proptest! {
        #[test]
        fn partition_property_random(n in 1usize..40, k in 1usize..=4) {
            proptest::prop_assume!(k <= n);
            let t = y(n);
            let skip_at = build_task_skip_at(&t, k).unwrap().unwrap();
            let mut seen: Vec<u32> = skip_at.supervised().collect();
            if let Some(s) = build_task_skip_cmlm(&t, k).unwrap() {
                seen.extend(s.supervised());
            }
            seen.sort_unstable();
            let mut want = t.clone();
            want.push(EOS);
            want.sort_unstable();
            proptest::prop_assert_eq!(seen, want);
        }
    }
}
