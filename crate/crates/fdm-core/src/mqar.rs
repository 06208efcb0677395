//! Multi-query associative recall: sequences that state key-value pairs and
//! later query them. The layout places all pairs at the head, a separator,
//! padding, then the queries at the tail:
//!
//!   [k1 v1 k2 v2 ... kn vn  SEP  PAD ... PAD  q1 q2 ... qm]
//!
//! Supervision lives only at query positions: the logits at the position
//! holding q_j must put their argmax on that key's value. Answers are not
//! part of the input stream. The padding gap pushes every query far outside
//! the local cache window, so recall must go through the global slots or
//! the recurrent state.
//!
//! Vocab layout: 0 = PAD, 1 = SEP, then keys, then values (disjoint ranges
//! splitting the remainder in half).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FdmError, Result};

pub const PAD: usize = 0;
pub const SEP: usize = 1;

#[derive(Clone, Copy, Debug)]
pub struct MqarConfig {
    pub seq_len: usize,
    pub n_pairs: usize,
    pub vocab_size: usize,
}

impl MqarConfig {
    /// The desk-scale easy split: seq 64, 4 pairs, vocab 64.
    pub fn easy() -> Self {
        MqarConfig { seq_len: 64, n_pairs: 4, vocab_size: 64 }
    }

    pub fn key_range(&self) -> (usize, usize) {
        let content = self.vocab_size - 2;
        (2, 2 + content / 2)
    }

    pub fn value_range(&self) -> (usize, usize) {
        let content = self.vocab_size - 2;
        (2 + content / 2, 2 + content)
    }

    pub fn n_values(&self) -> usize {
        let (lo, hi) = self.value_range();
        hi - lo
    }

    pub fn validate(&self) -> Result<()> {
        let (klo, khi) = self.key_range();
        if khi <= klo || self.n_values() == 0 {
            return Err(FdmError::Infeasible(format!(
                "vocab {} too small for disjoint key/value ranges",
                self.vocab_size
            )));
        }
        if self.n_pairs == 0 || self.n_pairs > khi - klo {
            return Err(FdmError::Infeasible(format!(
                "{} pairs do not fit the key range {}..{}",
                self.n_pairs, klo, khi
            )));
        }
        // pairs + separator + one query per pair must fit
        if 2 * self.n_pairs + 1 + self.n_pairs > self.seq_len {
            return Err(FdmError::Infeasible(format!(
                "seq_len {} too short for {} pairs plus queries",
                self.seq_len, self.n_pairs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MqarInstance {
    pub tokens: Vec<usize>,
    /// Per-position target id or -1; set exactly at query positions.
    pub targets: Vec<i64>,
    /// (query position, expected value id), ascending positions.
    pub answers: Vec<(usize, usize)>,
}

/// Deterministic task generation: every instance states `n_pairs` distinct
/// keys with random values and queries each key exactly once, in random
/// order, at the tail of the sequence.
pub fn generate_mqar(seed: u64, cfg: &MqarConfig, n_instances: usize) -> Result<Vec<MqarInstance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (klo, khi) = cfg.key_range();
    let (vlo, vhi) = cfg.value_range();
    let mut instances = Vec::with_capacity(n_instances);
    for _ in 0..n_instances {
        let mut keys: Vec<usize> = (klo..khi).collect();
        keys.shuffle(&mut rng);
        keys.truncate(cfg.n_pairs);
        let values: Vec<usize> = (0..cfg.n_pairs).map(|_| rng.gen_range(vlo..vhi)).collect();

        let mut tokens = Vec::with_capacity(cfg.seq_len);
        for i in 0..cfg.n_pairs {
            tokens.push(keys[i]);
            tokens.push(values[i]);
        }
        tokens.push(SEP);

        let mut query_order: Vec<usize> = (0..cfg.n_pairs).collect();
        query_order.shuffle(&mut rng);
        let query_start = cfg.seq_len - cfg.n_pairs;
        while tokens.len() < query_start {
            tokens.push(PAD);
        }
        let mut targets = vec![-1i64; cfg.seq_len];
        let mut answers = Vec::with_capacity(cfg.n_pairs);
        for (slot, &qi) in query_order.iter().enumerate() {
            let pos = query_start + slot;
            tokens.push(keys[qi]);
            targets[pos] = values[qi] as i64;
            answers.push((pos, values[qi]));
        }
        debug_assert_eq!(tokens.len(), cfg.seq_len);
        instances.push(MqarInstance { tokens, targets, answers });
    }
    Ok(instances)
}

/// Fraction of query positions where the argmax logit hits the expected
/// value. `logits_fn` returns flattened [T, vocab] next-token logits.
pub fn eval_mqar<F>(logits_fn: F, vocab: usize, instances: &[MqarInstance]) -> f64
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    use rayon::prelude::*;
    let (hits, total): (usize, usize) = instances
        .par_iter()
        .map(|inst| {
            let logits = logits_fn(&inst.tokens);
            let mut hits = 0;
            for &(pos, expected) in &inst.answers {
                let row = &logits[pos * vocab..(pos + 1) * vocab];
                let mut best = 0;
                for (v, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = v;
                    }
                }
                if best == expected {
                    hits += 1;
                }
            }
            (hits, inst.answers.len())
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    #[test]
    fn single_pair_single_query() {
        let cfg = MqarConfig { seq_len: 8, n_pairs: 1, vocab_size: 8 };
        let insts = generate_mqar(0, &cfg, 4).unwrap();
        for inst in &insts {
            assert_eq!(inst.answers.len(), 1);
            let (pos, val) = inst.answers[0];
            assert_eq!(inst.tokens[pos], inst.tokens[0], "query must repeat the key");
            assert_eq!(val, inst.tokens[1], "answer must be the pair's value");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = MqarConfig::easy();
        let a = generate_mqar(7, &cfg, 16).unwrap();
        let b = generate_mqar(7, &cfg, 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.answers, y.answers);
        }
    }

    #[test]
    fn dictionary_replay_validates_all_answers() {
        let cfg = MqarConfig::easy();
        let insts = generate_mqar(11, &cfg, 1000).unwrap();
        for inst in &insts {
            let dict = oracles::mqar_replay_dict(&inst.tokens, SEP);
            assert_eq!(dict.len(), cfg.n_pairs);
            for &(pos, expected) in &inst.answers {
                let key = inst.tokens[pos];
                assert_eq!(dict[&key], expected, "replay disagrees at position {pos}");
            }
        }
    }

    #[test]
    fn keys_unique_and_answers_after_definitions() {
        let cfg = MqarConfig::easy();
        for inst in generate_mqar(13, &cfg, 100).unwrap() {
            let mut keys: Vec<usize> = (0..cfg.n_pairs).map(|i| inst.tokens[2 * i]).collect();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(keys.len(), cfg.n_pairs, "keys must be unique");
            for &(pos, _) in &inst.answers {
                let key = inst.tokens[pos];
                let def = (0..cfg.n_pairs).find(|&i| inst.tokens[2 * i] == key).unwrap();
                assert!(pos > 2 * def + 1, "query at {pos} precedes its definition");
            }
        }
    }

    #[test]
    fn infeasible_sizes_rejected() {
        assert!(generate_mqar(0, &MqarConfig { seq_len: 6, n_pairs: 4, vocab_size: 64 }, 1).is_err());
        assert!(generate_mqar(0, &MqarConfig { seq_len: 64, n_pairs: 40, vocab_size: 64 }, 1).is_err());
        assert!(generate_mqar(0, &MqarConfig { seq_len: 64, n_pairs: 1, vocab_size: 3 }, 1).is_err());
    }

    #[test]
    fn queries_sit_outside_a_small_window() {
        // with the tail layout, every query is far from the pair section
        let cfg = MqarConfig::easy();
        for inst in generate_mqar(17, &cfg, 50).unwrap() {
            for &(pos, _) in &inst.answers {
                let pair_section_end = 2 * cfg.n_pairs;
                assert!(pos >= pair_section_end + 8, "query at {pos} too close to pairs");
            }
        }
    }
}
