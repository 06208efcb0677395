//! The particle component: masked associative lookup over a ring buffer of
//! the W most recent tokens plus K global tokens selected by the largest
//! s_eff scores seen so far. Total slot budget W+K regardless of sequence
//! length, which is what makes decode memory O(1).
//!
//! Mask for query position i and key position j:
//!   local(i,j)  = max(0, i-W) <= j < i
//!   global(i,j) = j in TopK({s_eff(k) : k < i}, K)
//!   mask(i,j)   = local OR global
//!
//! Global admission is streaming: a token enters the candidate set the step
//! after it is produced, and once the set is full a newcomer displaces the
//! current minimum only when its score is strictly greater. Ties always
//! resolve toward the smaller position. Scores are fixed at production time,
//! so the streaming set equals the offline top-K.

use std::collections::VecDeque;

use crate::error::{FdmError, Result};
use crate::kernels;
use crate::tape::{Tape, TensorId};

// ── Config ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct CacheConfig {
    /// Local window size W.
    pub window: usize,
    /// Global slot count K.
    pub global_slots: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(FdmError::Config("cache window W must be >= 1".into()));
        }
        if self.d_k == 0 || self.d_v == 0 {
            return Err(FdmError::Config("cache key/value dims must be positive".into()));
        }
        Ok(())
    }

    pub fn slot_budget(&self) -> usize {
        self.window + self.global_slots
    }
}

// ── Streaming top-K of (pos, score) with payload ─────────────────────

/// Keeps the K entries with the largest scores, smaller position winning
/// ties. `offer` must be called in increasing position order.
#[derive(Clone, Debug)]
pub struct GlobalTopK<T> {
    k: usize,
    entries: Vec<(usize, f64, T)>,
}

impl<T> GlobalTopK<T> {
    pub fn new(k: usize) -> Self {
        GlobalTopK { k, entries: Vec::with_capacity(k) }
    }

    pub fn offer(&mut self, pos: usize, score: f64, payload: T) {
        if self.k == 0 {
            return;
        }
        if let Some(last) = self.entries.last() {
            debug_assert!(pos > last.0 || self.entries.iter().all(|e| e.0 < pos));
        }
        if self.entries.len() < self.k {
            self.entries.push((pos, score, payload));
            return;
        }
        // worst = smallest score; among equal scores the largest position
        // (the smaller-position entry always survives a tie)
        let mut worst = 0;
        for idx in 1..self.entries.len() {
            let (wp, ws, _) = self.entries[worst];
            let (ep, es, _) = self.entries[idx];
            if es < ws || (es == ws && ep > wp) {
                worst = idx;
            }
        }
        if score > self.entries[worst].1 {
            self.entries[worst] = (pos, score, payload);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions_sorted(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        p.sort_unstable();
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, f64, T)> {
        self.entries.iter()
    }
}

// ── Mask (streaming route) ───────────────────────────────────────────

/// Evaluate mask(i, j) given the full score history. Rejects future access.
/// This is the streaming implementation; tests hold it against the
/// brute-force sort in `oracles::mask_literal`.
pub fn cache_mask(i: usize, j: usize, scores: &[f64], cfg: &CacheConfig) -> Result<bool> {
    if j > i {
        return Err(FdmError::Config(format!("cache_mask: future access j={j} > i={i}")));
    }
    let local = j < i && j + cfg.window >= i;
    if local {
        return Ok(true);
    }
    let mut tracker: GlobalTopK<()> = GlobalTopK::new(cfg.global_slots);
    for (pos, &s) in scores.iter().enumerate().take(i) {
        tracker.offer(pos, s, ());
    }
    let hit = tracker.iter().any(|&(pos, _, _)| pos == j);
    Ok(hit)
}

/// Positions a query at position i attends to: the union of the local
/// window and the current global set, deduplicated, ascending.
fn union_slots(i: usize, window: usize, globals: &[usize]) -> Vec<usize> {
    let lo = i.saturating_sub(window);
    let mut slots: Vec<usize> = (lo..i).collect();
    for &g in globals {
        if g < lo {
            slots.push(g);
        }
    }
    slots.sort_unstable();
    slots
}

// ── Decode-time state ────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct LocalSlot {
    pos: usize,
    key: Vec<f64>,
    value: Vec<f64>,
}

/// O(W+K) cache state carried across decode steps.
#[derive(Clone, Debug)]
pub struct CacheState {
    cfg: CacheConfig,
    local: VecDeque<LocalSlot>,
    global: GlobalTopK<(Vec<f64>, Vec<f64>)>,
    current_pos: usize,
}

impl CacheState {
    pub fn new(cfg: CacheConfig) -> Self {
        CacheState {
            local: VecDeque::with_capacity(cfg.window),
            global: GlobalTopK::new(cfg.global_slots),
            cfg,
            current_pos: 0,
        }
    }

    pub fn current_pos(&self) -> usize {
        self.current_pos
    }

    /// Stored slots: ring occupancy plus global occupancy (positions held
    /// in both count twice — the budget is W+K physical slots).
    pub fn slot_count(&self) -> usize {
        self.local.len() + self.global.len()
    }

    /// Exact accounting of the buffer payload this state holds.
    pub fn bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        let u = std::mem::size_of::<usize>();
        let mut total = u; // current_pos
        for s in &self.local {
            total += u + (s.key.len() + s.value.len()) * f;
        }
        for (_, _, (k, v)) in self.global.iter() {
            total += u + f + (k.len() + v.len()) * f;
        }
        total
    }

    /// Insert token `pos` with its projections and score. Must be called
    /// with pos equal to the state's current position.
    pub fn update(&mut self, pos: usize, key: Vec<f64>, value: Vec<f64>, s_eff: f64) -> Result<()> {
        if pos != self.current_pos {
            return Err(FdmError::PositionMismatch { expected: self.current_pos, got: pos });
        }
        if self.local.len() == self.cfg.window {
            self.local.pop_front();
        }
        self.global.offer(pos, s_eff, (key.clone(), value.clone()));
        self.local.push_back(LocalSlot { pos, key, value });
        self.current_pos += 1;
        Ok(())
    }

    /// (pos, key, value) for every slot visible to a query at the current
    /// position, deduplicated and sorted by position.
    pub fn attend_slots(&self) -> Vec<(usize, &[f64], &[f64])> {
        let i = self.current_pos;
        let lo = i.saturating_sub(self.cfg.window);
        let mut slots: Vec<(usize, &[f64], &[f64])> = self
            .local
            .iter()
            .map(|s| (s.pos, s.key.as_slice(), s.value.as_slice()))
            .collect();
        for (pos, _, (k, v)) in self.global.iter() {
            if *pos < lo {
                slots.push((*pos, k.as_slice(), v.as_slice()));
            }
        }
        slots.sort_unstable_by_key(|s| s.0);
        slots
    }

    pub fn global_positions(&self) -> Vec<usize> {
        self.global.positions_sorted()
    }
}

// ── Tape path (training) ─────────────────────────────────────────────

/// Tape tensors for one layer's cache projections.
#[derive(Clone, Copy, Debug)]
pub struct CacheTensors {
    pub w_q: TensorId, // [d_k, d]
    pub w_k: TensorId, // [d_k, d]
    pub w_v: TensorId, // [d_v, d]
    pub w_o: TensorId, // [d, d_v]
}

/// Masked single-head attention over a whole sequence on the tape.
///
/// `v_in` is the (normalized) layer input [T, d]; `s_eff` the per-position
/// scores from the same layer's wave schedule. Row 0 has no history and
/// yields a zero vector by convention.
pub fn cache_attend_sequence(
    tape: &mut Tape,
    ct: &CacheTensors,
    v_in: TensorId,
    s_eff: &[f64],
    cfg: &CacheConfig,
) -> TensorId {
    let t_len = tape.shape(v_in)[0];
    let d_model = tape.shape(v_in)[1];
    assert_eq!(s_eff.len(), t_len, "cache_attend_sequence: {} scores for {t_len} rows", s_eff.len());
    let scale = 1.0 / (cfg.d_k as f64).sqrt();

    let q = tape.matmul_tb(v_in, ct.w_q); // [T, d_k]
    let k = tape.matmul_tb(v_in, ct.w_k);
    let v = tape.matmul_tb(v_in, ct.w_v); // [T, d_v]

    let mut tracker: GlobalTopK<()> = GlobalTopK::new(cfg.global_slots);
    let mut rows = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let globals = tracker.positions_sorted();
        let slots = union_slots(i, cfg.window, &globals);
        if slots.is_empty() {
            rows.push(tape.constant_f64(vec![0.0; cfg.d_v], &[1, cfg.d_v]));
        } else {
            let qi = tape.slice_rows(q, i, 1);
            let keys = tape.gather_rows(k, &slots);
            let vals = tape.gather_rows(v, &slots);
            let logits = tape.matmul_tb(qi, keys);
            let scaled = tape.scale(logits, scale);
            let attn = tape.row_softmax(scaled);
            rows.push(tape.matmul(attn, vals));
        }
        tracker.offer(i, s_eff[i], ());
    }
    let att = tape.concat_rows(&rows); // [T, d_v]
    let out = tape.matmul_tb(att, ct.w_o); // [T, d]
    debug_assert_eq!(tape.shape(out), &[t_len, d_model]);
    out
}

// ── Decode path (kernels) ────────────────────────────────────────────

/// Borrowed cache parameter values for one layer.
#[derive(Clone, Copy)]
pub struct CacheView<'a> {
    pub w_q: &'a [f64],
    pub w_k: &'a [f64],
    pub w_v: &'a [f64],
    pub w_o: &'a [f64],
    pub d_model: usize,
    pub cfg: CacheConfig,
}

/// Attention output for the token at the state's current position.
pub fn decode_attend(state: &CacheState, view: &CacheView, x_row: &[f64]) -> Vec<f64> {
    let cfg = &view.cfg;
    let slots = state.attend_slots();
    if slots.is_empty() {
        return vec![0.0; view.d_model];
    }
    let m = slots.len();
    let mut q = vec![0.0; cfg.d_k];
    kernels::matmul_tb(x_row, view.w_q, &mut q, 1, x_row.len(), cfg.d_k);

    let mut keys = Vec::with_capacity(m * cfg.d_k);
    let mut vals = Vec::with_capacity(m * cfg.d_v);
    for (_, k, v) in &slots {
        keys.extend_from_slice(k);
        vals.extend_from_slice(v);
    }
    let mut logits = vec![0.0; m];
    kernels::matmul_tb(&q, &keys, &mut logits, 1, cfg.d_k, m);
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    for l in logits.iter_mut() {
        *l *= scale;
    }
    kernels::softmax_row(&mut logits);
    let mut att = vec![0.0; cfg.d_v];
    kernels::matmul(&logits, &vals, &mut att, 1, m, cfg.d_v);
    let mut out = vec![0.0; view.d_model];
    kernels::matmul_tb(&att, view.w_o, &mut out, 1, cfg.d_v, view.d_model);
    out
}

/// Project and store the token at the state's current position.
pub fn decode_update(
    state: &mut CacheState,
    view: &CacheView,
    x_row: &[f64],
    pos: usize,
    s_eff: f64,
) -> Result<()> {
    let cfg = &view.cfg;
    let mut key = vec![0.0; cfg.d_k];
    kernels::matmul_tb(x_row, view.w_k, &mut key, 1, x_row.len(), cfg.d_k);
    let mut value = vec![0.0; cfg.d_v];
    kernels::matmul_tb(x_row, view.w_v, &mut value, 1, x_row.len(), cfg.d_v);
    state.update(pos, key, value, s_eff)
}

/// Token-by-token pass over a full sequence: attend, then insert. Returns
/// the final state and the per-position attention outputs [T, d].
pub fn prefill(
    view: &CacheView,
    rows: &[&[f64]],
    s_eff: &[f64],
) -> Result<(CacheState, Vec<f64>)> {
    let mut state = CacheState::new(view.cfg);
    let mut outputs = Vec::with_capacity(rows.len() * view.d_model);
    for (i, row) in rows.iter().enumerate() {
        outputs.extend_from_slice(&decode_attend(&state, view, row));
        decode_update(&mut state, view, row, i, s_eff[i])?;
    }
    Ok((state, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::oracles;
    use crate::tape::Buf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(w: usize, k: usize, d_k: usize, d_v: usize) -> CacheConfig {
        CacheConfig { window: w, global_slots: k, d_k, d_v }
    }

    #[test]
    fn mask_matches_window_arithmetic() {
        let c = cfg(4, 0, 2, 2);
        let scores = vec![0.0; 16];
        assert!(cache_mask(10, 7, &scores, &c).unwrap());
        assert!(!cache_mask(10, 5, &scores, &c).unwrap());
    }

    #[test]
    fn mask_rejects_future_access() {
        let c = cfg(4, 0, 2, 2);
        assert!(cache_mask(3, 5, &[0.0; 8], &c).is_err());
    }

    #[test]
    fn mask_global_top1_escapes_window() {
        let c = cfg(2, 1, 2, 2);
        let scores = [9.0, 1.0, 1.0, 1.0];
        assert!(cache_mask(4, 0, &scores, &c).unwrap());
        assert!(!cache_mask(4, 1, &scores, &c).unwrap());
    }

    #[test]
    fn mask_agrees_with_literal_oracle_on_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let n = rng.gen_range(4..40);
            let w = rng.gen_range(1..6);
            let k = rng.gen_range(0..4);
            let c = cfg(w, k, 2, 2);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for i in 0..n {
                for j in 0..=i {
                    assert_eq!(
                        cache_mask(i, j, &scores, &c).unwrap(),
                        oracles::mask_literal(i, j, &scores, w, k),
                        "mask mismatch at i={i} j={j} w={w} k={k}"
                    );
                }
            }
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let c = cfg(2, 0, 1, 1);
        let mut state = CacheState::new(c);
        for pos in 0..3 {
            state.update(pos, vec![pos as f64], vec![0.0], 0.0).unwrap();
        }
        let held: Vec<usize> = state.attend_slots().iter().map(|s| s.0).collect();
        assert_eq!(held, vec![1, 2]);
    }

    #[test]
    fn zero_global_slots_stay_empty() {
        let c = cfg(2, 0, 1, 1);
        let mut state = CacheState::new(c);
        for pos in 0..10 {
            state.update(pos, vec![0.0], vec![0.0], 100.0 + pos as f64).unwrap();
        }
        assert!(state.global_positions().is_empty());
        assert_eq!(state.slot_count(), 2);
    }

    #[test]
    fn update_rejects_position_mismatch() {
        let c = cfg(2, 0, 1, 1);
        let mut state = CacheState::new(c);
        state.update(0, vec![0.0], vec![0.0], 0.0).unwrap();
        let err = state.update(2, vec![0.0], vec![0.0], 0.0).unwrap_err();
        assert!(matches!(err, FdmError::PositionMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn streaming_top_k_equals_offline() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = 64;
            let w = 8;
            let k = 4;
            // Coarse quantization forces plenty of score ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(-2.0..2.0f64) * 4.0).round() / 4.0).collect();
            let mut state = CacheState::new(cfg(w, k, 1, 1));
            for (pos, &s) in scores.iter().enumerate() {
                state.update(pos, vec![0.0], vec![0.0], s).unwrap();
            }
            assert_eq!(
                state.global_positions(),
                oracles::offline_top_k(&scores, n, k),
                "trial {trial}: streaming and offline top-k disagree"
            );
        }
    }

    fn random_proj(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.gen_range(-0.7..0.7)).collect()
    }

    struct Toy {
        w_q: Vec<f64>,
        w_k: Vec<f64>,
        w_v: Vec<f64>,
        w_o: Vec<f64>,
        d: usize,
        cfg: CacheConfig,
    }

    fn toy(rng: &mut ChaCha8Rng, d: usize, c: CacheConfig) -> Toy {
        Toy {
            w_q: random_proj(rng, c.d_k, d),
            w_k: random_proj(rng, c.d_k, d),
            w_v: random_proj(rng, c.d_v, d),
            w_o: random_proj(rng, d, c.d_v),
            d,
            cfg: c,
        }
    }

    impl Toy {
        fn view(&self) -> CacheView<'_> {
            CacheView {
                w_q: &self.w_q,
                w_k: &self.w_k,
                w_v: &self.w_v,
                w_o: &self.w_o,
                d_model: self.d,
                cfg: self.cfg,
            }
        }

        /// Dense oracle on raw inputs: project with plain loops, then
        /// dense masked attention, then the output projection.
        fn oracle_outputs(&self, x: &[f64], s_eff: &[f64], t_len: usize) -> Vec<f64> {
            let c = &self.cfg;
            let mut q = vec![0.0; t_len * c.d_k];
            let mut k = vec![0.0; t_len * c.d_k];
            let mut v = vec![0.0; t_len * c.d_v];
            kernels::matmul_tb(x, &self.w_q, &mut q, t_len, self.d, c.d_k);
            kernels::matmul_tb(x, &self.w_k, &mut k, t_len, self.d, c.d_k);
            kernels::matmul_tb(x, &self.w_v, &mut v, t_len, self.d, c.d_v);
            let att = oracles::dense_masked_attention(
                &q, &k, &v, s_eff, t_len, c.d_k, c.d_v, c.window, c.global_slots,
            );
            let mut out = vec![0.0; t_len * self.d];
            kernels::matmul_tb(&att, &self.w_o, &mut out, t_len, c.d_v, self.d);
            out
        }
    }

    #[test]
    fn single_slot_softmax_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = toy(&mut rng, 3, cfg(4, 0, 2, 2));
        let mut state = CacheState::new(t.cfg);
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        decode_update(&mut state, &t.view(), &x0, 0, 0.0).unwrap();
        let x1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = decode_attend(&state, &t.view(), &x1);
        // softmax over one logit is 1: output must be W_o v_0
        let mut v0 = vec![0.0; 2];
        kernels::matmul_tb(&x0, &t.w_v, &mut v0, 1, 3, 2);
        let mut expected = vec![0.0; 3];
        kernels::matmul_tb(&v0, &t.w_o, &mut expected, 1, 2, 3);
        for c in 0..3 {
            assert!((out[c] - expected[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_slots_match_single_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = toy(&mut rng, 3, cfg(4, 0, 2, 2));
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let query: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut one = CacheState::new(t.cfg);
        decode_update(&mut one, &t.view(), &x0, 0, 0.0).unwrap();
        let out_one = decode_attend(&one, &t.view(), &query);

        let mut two = CacheState::new(t.cfg);
        decode_update(&mut two, &t.view(), &x0, 0, 0.0).unwrap();
        decode_update(&mut two, &t.view(), &x0, 1, 0.0).unwrap();
        let out_two = decode_attend(&two, &t.view(), &query);

        for c in 0..3 {
            assert!((out_one[c] - out_two[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_history_yields_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = toy(&mut rng, 3, cfg(4, 2, 2, 2));
        let state = CacheState::new(t.cfg);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(decode_attend(&state, &t.view(), &x), vec![0.0; 3]);
    }

    #[test]
    fn incremental_matches_dense_oracle_small() {
        // 5-token toy, W=2, K=1, against the dense row-by-row oracle
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = toy(&mut rng, 4, cfg(2, 1, 3, 3));
        let t_len = 5;
        let x: Vec<f64> = (0..t_len * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s_eff: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let rows: Vec<&[f64]> = (0..t_len).map(|i| &x[i * 4..(i + 1) * 4]).collect();
        let (_, incr) = prefill(&t.view(), &rows, &s_eff).unwrap();
        let oracle = t.oracle_outputs(&x, &s_eff, t_len);
        for i in 0..t_len * 4 {
            assert!((incr[i] - oracle[i]).abs() < 1e-12, "mismatch at {i}");
        }
    }

    #[test]
    fn tape_path_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let c = cfg(3, 2, 3, 3);
        let t = toy(&mut rng, 4, c);
        let t_len = 12;
        let x: Vec<f64> = (0..t_len * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s_eff: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let ct = CacheTensors {
            w_q: tape.input_f64(t.w_q.clone(), &[c.d_k, 4]),
            w_k: tape.input_f64(t.w_k.clone(), &[c.d_k, 4]),
            w_v: tape.input_f64(t.w_v.clone(), &[c.d_v, 4]),
            w_o: tape.input_f64(t.w_o.clone(), &[4, c.d_v]),
        };
        let v_in = tape.input_f64(x.clone(), &[t_len, 4]);
        let out = cache_attend_sequence(&mut tape, &ct, v_in, &s_eff, &c);
        let got = tape.value_f64(out);
        let oracle = t.oracle_outputs(&x, &s_eff, t_len);
        for i in 0..t_len * 4 {
            assert!((got[i] - oracle[i]).abs() < 1e-12, "tape path mismatch at {i}");
        }
    }

    #[test]
    fn output_causal_in_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t = toy(&mut rng, 3, cfg(2, 1, 2, 2));
        let t_len = 8;
        let x: Vec<f64> = (0..t_len * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s_eff: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut x2 = x.clone();
        for i in 5 * 3..t_len * 3 {
            x2[i] = rng.gen_range(-1.0..1.0);
        }
        let run = |xs: &[f64]| -> Vec<f64> {
            let rows: Vec<&[f64]> = (0..t_len).map(|i| &xs[i * 3..(i + 1) * 3]).collect();
            prefill(&t.view(), &rows, &s_eff).unwrap().1
        };
        let a = run(&x);
        let b = run(&x2);
        for i in 0..5 * 3 {
            assert_eq!(a[i], b[i], "future token changed output at flat index {i}");
        }
    }

    #[test]
    fn prefill_then_one_decode_equals_longer_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let t = toy(&mut rng, 3, cfg(2, 1, 2, 2));
        let t_len = 7;
        let x: Vec<f64> = (0..(t_len + 1) * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s_eff: Vec<f64> = (0..t_len + 1).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let rows: Vec<&[f64]> = (0..t_len).map(|i| &x[i * 3..(i + 1) * 3]).collect();
        let (mut state, _) = prefill(&t.view(), &rows, &s_eff[..t_len]).unwrap();
        let last_row = &x[t_len * 3..(t_len + 1) * 3];
        let stepped = decode_attend(&state, &t.view(), last_row);
        decode_update(&mut state, &t.view(), last_row, t_len, s_eff[t_len]).unwrap();

        let rows_all: Vec<&[f64]> = (0..t_len + 1).map(|i| &x[i * 3..(i + 1) * 3]).collect();
        let (_, full) = prefill(&t.view(), &rows_all, &s_eff).unwrap();
        for c in 0..3 {
            assert!((stepped[c] - full[t_len * 3 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn state_bytes_constant_once_window_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = toy(&mut rng, 3, cfg(8, 4, 2, 2));
        let mut sizes = Vec::new();
        for n in [128usize, 512, 1024, 2048] {
            let mut state = CacheState::new(t.cfg);
            for pos in 0..n {
                let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                decode_update(&mut state, &t.view(), &row, pos, rng.gen_range(-2.0..2.0)).unwrap();
            }
            sizes.push(state.bytes());
            assert_eq!(state.slot_count(), t.cfg.slot_budget());
        }
        assert!(sizes.windows(2).all(|w| w[0] == w[1]), "state bytes varied: {sizes:?}");
    }

    #[test]
    fn paper_scale_slot_budget_is_272() {
        // W=256, K=16 over 2048 tokens: exactly 272 slots held
        let c = cfg(256, 16, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut state = CacheState::new(c);
        for pos in 0..2048 {
            state.update(pos, vec![0.0], vec![0.0], rng.gen_range(-2.0..2.0)).unwrap();
        }
        assert_eq!(state.slot_count(), 272);
    }

    #[test]
    fn attention_path_passes_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = cfg(2, 1, 3, 3);
        let d = 4;
        let t_len = 6;
        let x: Vec<f64> = (0..t_len * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s_eff: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = toy(&mut rng, d, c);

        let run = |inp: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let ct = CacheTensors {
                w_q: tape.input_f64(t.w_q.clone(), &[c.d_k, d]),
                w_k: tape.input_f64(t.w_k.clone(), &[c.d_k, d]),
                w_v: tape.input_f64(t.w_v.clone(), &[c.d_v, d]),
                w_o: tape.input_f64(t.w_o.clone(), &[d, c.d_v]),
            };
            let v_in = tape.input_f64(inp.to_vec(), &[t_len, d]);
            let out = cache_attend_sequence(&mut tape, &ct, v_in, &s_eff, &c);
            let sq = tape.mul(out, out);
            let loss = tape.sum(sq);
            tape.backward(loss);
            (tape.scalar(loss), tape.grad_f64(v_in).unwrap().to_vec())
        };
        let (_, analytic) = run(&x);
        let mut f = |b: &Buf| run(b.as_f64()).0;
        let rep = finite_difference_check(&mut f, &Buf::F64(x.clone()), &Buf::F64(analytic), 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-4, "cache FD rel err {}", rep.max_rel_err);
    }
}
