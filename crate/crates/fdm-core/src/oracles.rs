//! Independent reference implementations used by the test suites.
//!
//! Everything here is written the slow, literal way — per-element loops over
//! the defining formulas — and deliberately shares no code with the tape ops
//! or the decode kernels it is used to check. Keep it that way: these are
//! one side of a dual-route verification.

use num_complex::Complex64;
use std::collections::HashMap;

// ── Fan recurrence ───────────────────────────────────────────────────

/// Everything the recurrence consumes at one position, already projected.
#[derive(Clone, Debug)]
pub struct FanStepInputs {
    pub theta: Vec<f64>,
    pub theta_h: Vec<f64>,
    pub p: f64,
    pub inj_re: Vec<f64>,
    pub inj_im: Vec<f64>,
}

fn rotate_literal(h: &[Complex64], theta: &[f64], pairs: &[(usize, usize)]) -> Vec<Complex64> {
    let mut out = h.to_vec();
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let c = Complex64::new(theta[idx].cos(), 0.0);
        let s = Complex64::new(theta[idx].sin(), 0.0);
        let (hi, hj) = (h[i], h[j]);
        out[i] = c * hi - s * hj;
        out[j] = s * hi + c * hj;
    }
    out
}

fn fan_step_literal(
    h_prev: &[Complex64],
    theta: &[f64],
    p: f64,
    inj_re: &[f64],
    inj_im: &[f64],
    pairs: &[(usize, usize)],
) -> Vec<Complex64> {
    let rot = rotate_literal(h_prev, theta, pairs);
    (0..h_prev.len())
        .map(|c| {
            rot[c] * Complex64::new(1.0 - p, 0.0)
                + Complex64::new(inj_re[c], inj_im[c]) * Complex64::new(p, 0.0)
        })
        .collect()
}

/// Single-pass Fan scan from a zero state, one literal step at a time.
pub fn naive_fan_scan(steps: &[FanStepInputs], pairs: &[(usize, usize)], d: usize) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); d];
    let mut all = Vec::with_capacity(steps.len() * d);
    for s in steps {
        h = fan_step_literal(&h, &s.theta, s.p, &s.inj_re, &s.inj_im, pairs);
        all.extend_from_slice(&h);
    }
    all
}

/// Two-pass Born scan evaluated literally: pass 1 is the plain scan;
/// delta_t = GivensH(h1_t) - h1_t; pass 2 reruns the recurrence with the
/// real part of g*delta_t added to the real injection and the imaginary
/// part added to the imaginary injection. Both passes share all weights.
pub fn naive_born_scan(
    steps: &[FanStepInputs],
    pairs: &[(usize, usize)],
    gate: &[f64],
    d: usize,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let h1 = naive_fan_scan(steps, pairs, d);
    let mut h2 = Vec::with_capacity(steps.len() * d);
    let mut h = vec![Complex64::new(0.0, 0.0); d];
    for (t, s) in steps.iter().enumerate() {
        let h1_t = &h1[t * d..(t + 1) * d];
        let rotated = rotate_literal(h1_t, &s.theta_h, pairs);
        let mut re2 = s.inj_re.clone();
        let mut im2 = s.inj_im.clone();
        for c in 0..d {
            let delta = rotated[c] - h1_t[c];
            let corr = delta * Complex64::new(gate[c], 0.0);
            re2[c] += corr.re;
            im2[c] += corr.im;
        }
        h = fan_step_literal(&h, &s.theta, s.p, &re2, &im2, pairs);
        h2.extend_from_slice(&h);
    }
    (h1, h2)
}

// ── Local-global cache ───────────────────────────────────────────────

/// The K positions with the largest scores among `scores[..limit]`, ties
/// broken toward the smaller position. Returned sorted by position.
pub fn offline_top_k(scores: &[f64], limit: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..limit.min(scores.len())).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Brute-force evaluation of the cache mask for query position i and key
/// position j: local window OR global top-K of the score history.
pub fn mask_literal(i: usize, j: usize, scores: &[f64], w: usize, k: usize) -> bool {
    assert!(j <= i, "mask_literal: future access j={j} > i={i}");
    let local = j < i && j + w >= i; // max(0, i-W) <= j < i
    let global = offline_top_k(scores, i, k).contains(&j);
    local || global
}

/// Full dense masked attention over a sequence, row by row: the oracle for
/// the incremental cache. Returns [t_len, d_v] outputs; rows with an empty
/// mask produce zeros.
#[allow(clippy::too_many_arguments)]
pub fn dense_masked_attention(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    scores: &[f64],
    t_len: usize,
    d_k: usize,
    d_v: usize,
    w: usize,
    k_global: usize,
) -> Vec<f64> {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = vec![0.0; t_len * d_v];
    for i in 0..t_len {
        let slots: Vec<usize> =
            (0..i).filter(|&j| mask_literal(i, j, scores, w, k_global)).collect();
        if slots.is_empty() {
            continue;
        }
        let mut logits: Vec<f64> = slots
            .iter()
            .map(|&j| {
                let mut dot = 0.0;
                for c in 0..d_k {
                    dot += q[i * d_k + c] * keys[j * d_k + c];
                }
                dot * scale
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for (slot_idx, &j) in slots.iter().enumerate() {
            let a = logits[slot_idx] / sum;
            for c in 0..d_v {
                out[i * d_v + c] += a * values[j * d_v + c];
            }
        }
    }
    out
}

// ── MQAR dictionary replay ───────────────────────────────────────────

/// Replay a task sequence and rebuild the key→value dictionary from the
/// pair section (everything before the separator, read as alternating
/// key, value tokens).
pub fn mqar_replay_dict(tokens: &[usize], sep: usize) -> HashMap<usize, usize> {
    let mut dict = HashMap::new();
    let mut it = tokens.iter().take_while(|&&t| t != sep);
    while let (Some(&k), Some(&v)) = (it.next(), it.next()) {
        dict.insert(k, v);
    }
    dict
}

// ── Holographic modulation ───────────────────────────────────────────

/// Literal evaluation of multi-head reference-beam modulation:
/// out_c = h_c * (1/H) * sum_i (1 + tanh(sum_k W_i[c,k] x_k)).
pub fn holo_modulate_literal(
    h: &[Complex64],
    x: &[f64],
    heads: &[Vec<f64>],
    d: usize,
) -> Vec<Complex64> {
    let d_in = x.len();
    let h_count = heads.len() as f64;
    (0..d)
        .map(|c| {
            let mut factor = 0.0;
            for head in heads {
                let mut logit = 0.0;
                for (k, &xv) in x.iter().enumerate() {
                    logit += head[c * d_in + k] * xv;
                }
                factor += 1.0 + logit.tanh();
            }
            h[c] * (factor / h_count)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_tie_break_prefers_smaller_position() {
        let scores = [5.0, 5.0, 7.0, 5.0];
        assert_eq!(offline_top_k(&scores, 4, 2), vec![0, 2]);
        assert_eq!(offline_top_k(&scores, 4, 3), vec![0, 1, 2]);
        assert_eq!(offline_top_k(&scores, 2, 1), vec![0]);
    }

    #[test]
    fn mask_window_arithmetic() {
        // W = 4, K = 0, i = 10: j = 7 local, j = 5 not
        let scores = vec![0.0; 16];
        assert!(mask_literal(10, 7, &scores, 4, 0));
        assert!(!mask_literal(10, 5, &scores, 4, 0));
    }

    #[test]
    fn mask_global_escapes_window() {
        // W = 2, K = 1, s_eff = [9,1,1,1], i = 4, j = 0: global top-1
        let scores = [9.0, 1.0, 1.0, 1.0];
        assert!(mask_literal(4, 0, &scores, 2, 1));
        assert!(!mask_literal(4, 1, &scores, 2, 1));
        assert!(mask_literal(4, 2, &scores, 2, 1)); // local
    }

    #[test]
    fn replay_builds_dictionary() {
        let tokens = vec![3, 10, 4, 11, 1, 0, 0, 3];
        let dict = mqar_replay_dict(&tokens, 1);
        assert_eq!(dict.len(), 2);
        assert_eq!(dict[&3], 10);
        assert_eq!(dict[&4], 11);
    }
}
