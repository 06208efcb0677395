//! Holographic reference-beam decoding: multiplicative modulation of the
//! complex hidden state by a function of the current input.
//!
//! Single head:  h_decoded = h ⊙ (1 + tanh(W_ref x))
//! Multi-head:   h_decoded = h ⊙ (1/H) Σ_i (1 + tanh(W_ref,i x))
//!
//! tanh keeps every per-channel factor in (0, 2), so ||h_decoded|| <= 2||h||,
//! and zero-initialized heads give a factor of exactly 1 — attaching an
//! untrained beam is a bitwise no-op. An orthogonality penalty
//! λ Σ_{i≠j} ||W_i W_j^T||_F^2 pushes heads toward distinct row spaces.

use num_complex::Complex64;

use crate::kernels;
use crate::tape::{Tape, TensorId};

// ── Tape path ────────────────────────────────────────────────────────

/// Modulation factor [T, d] for beam heads applied to the layer input
/// x [T, d_in]. Each head tensor is [d, d_in].
pub fn beam_factor(tape: &mut Tape, heads: &[TensorId], x: TensorId) -> TensorId {
    assert!(!heads.is_empty(), "beam_factor: no heads");
    let mut acc: Option<TensorId> = None;
    for &head in heads {
        let logits = tape.matmul_tb(x, head);
        let th = tape.tanh(logits);
        let one_plus = tape.add_scalar(th, 1.0);
        acc = Some(match acc {
            None => one_plus,
            Some(a) => tape.add(a, one_plus),
        });
    }
    tape.scale(acc.unwrap(), 1.0 / heads.len() as f64)
}

/// Modulate a complex state [T, d] by the beam factor of `x`.
pub fn modulate(tape: &mut Tape, heads: &[TensorId], x: TensorId, h: TensorId) -> TensorId {
    let factor = beam_factor(tape, heads, x);
    tape.mul(factor, h)
}

/// λ Σ_{i≠j} ||W_i W_j^T||_F^2 over ordered pairs; zero for a single head.
pub fn orthogonality_loss(tape: &mut Tape, heads: &[TensorId], lambda: f64) -> TensorId {
    let mut acc: Option<TensorId> = None;
    for (i, &wi) in heads.iter().enumerate() {
        for (j, &wj) in heads.iter().enumerate() {
            if i == j {
                continue;
            }
            let gram = tape.matmul_tb(wi, wj);
            let sq = tape.mul(gram, gram);
            let s = tape.sum(sq);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
    }
    match acc {
        Some(a) => tape.scale(a, lambda),
        None => tape.constant_f64(vec![0.0], &[1, 1]),
    }
}

/// Plain-value evaluation of the cross-head Gram penalty (no λ), for
/// reporting and A/B comparisons outside a tape.
pub fn gram_penalty_value(heads: &[&[f64]], d: usize, d_in: usize) -> f64 {
    let mut total = 0.0;
    for (i, wi) in heads.iter().enumerate() {
        for (j, wj) in heads.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut gram = vec![0.0; d * d];
            kernels::matmul_tb(wi, wj, &mut gram, d, d_in, d);
            total += gram.iter().map(|g| g * g).sum::<f64>();
        }
    }
    total
}

// ── Decode path ──────────────────────────────────────────────────────

/// In-place modulation of one state row by the beam factor of `x_row`.
pub fn modulate_row(h: &mut [Complex64], x_row: &[f64], heads: &[&[f64]]) {
    let d = h.len();
    let d_in = x_row.len();
    let mut factor = vec![0.0; d];
    let mut logits = vec![0.0; d];
    for head in heads {
        kernels::matmul_tb(x_row, head, &mut logits, 1, d_in, d);
        for c in 0..d {
            factor[c] += 1.0 + logits[c].tanh();
        }
    }
    let inv_h = 1.0 / heads.len() as f64;
    for c in 0..d {
        h[c] = h[c] * (factor[c] * inv_h);
    }
}

// ── Layer-wise sequential beam training ──────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerwiseOptions {
    pub steps_per_layer: u64,
    pub n_heads: usize,
    pub lambda: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LayerwiseOptions {
    fn default() -> Self {
        LayerwiseOptions { steps_per_layer: 300, n_heads: 1, lambda: 0.01, lr: 3e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerDelta {
    pub layer: usize,
    pub val_before: f64,
    pub val_after: f64,
}

impl LayerDelta {
    pub fn delta_loss(&self) -> f64 {
        self.val_after - self.val_before
    }

    /// Perplexity delta (byte-level PPL = exp(loss)).
    pub fn delta_ppl(&self) -> f64 {
        self.val_after.exp() - self.val_before.exp()
    }
}

#[derive(Clone, Debug)]
pub struct LayerwiseReport {
    pub base_val: f64,
    pub deltas: Vec<LayerDelta>,
    /// Beams trained in earlier rounds stayed bitwise unchanged.
    pub earlier_beams_untouched: bool,
}

/// One gradient step where the loss is cross-entropy plus the beam
/// orthogonality penalty, with only the given beam heads trainable.
fn beam_step(
    model: &mut crate::model::FdmModel,
    opt: &mut crate::train::AdamW,
    batch: &[(Vec<usize>, Vec<i64>)],
    heads: &[crate::params::ParamId],
    lambda: f64,
    parallel: bool,
) -> crate::error::Result<f64> {
    use rayon::prelude::*;
    let trainable = crate::params::Trainable::subset(heads.iter().copied());
    let one = |tokens: &[usize], targets: &[i64]| -> crate::error::Result<(f64, crate::params::GradMap)> {
        let mut out = model.forward(tokens, Some(targets), &trainable, false)?;
        let ce = out.loss.expect("targets were provided");
        let head_tensors: Vec<TensorId> = heads.iter().map(|h| out.param_tensors[h.0]).collect();
        let orth = orthogonality_loss(&mut out.tape, &head_tensors, lambda);
        let total = out.tape.add(ce, orth);
        out.tape.backward(total);
        let mut grads = crate::params::GradMap::new(&model.params);
        for (key, g) in out.tape.param_grads() {
            grads.accumulate(key, g);
        }
        Ok((out.tape.scalar(total), grads))
    };
    let results: Vec<(f64, crate::params::GradMap)> = if parallel {
        batch.par_iter().map(|(t, tg)| one(t, tg)).collect::<crate::error::Result<_>>()?
    } else {
        batch.iter().map(|(t, tg)| one(t, tg)).collect::<crate::error::Result<_>>()?
    };
    let mut grads = crate::params::GradMap::new(&model.params);
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grads.merge(g);
    }
    grads.scale(1.0 / batch.len() as f64);
    opt.apply(&mut model.params, &grads)?;
    Ok(loss / batch.len() as f64)
}

/// Train one fresh reference beam per listed layer, in order, freezing each
/// when its round ends. The base model is fully frozen throughout; the loss
/// is the whole-model LM loss plus the orthogonality penalty. Returns the
/// per-layer validation-loss deltas of the cumulative attach-and-train
/// sequence.
pub fn train_layerwise_sequential(
    model: &mut crate::model::FdmModel,
    train_tokens: &[usize],
    eval_set: &crate::train::Batch,
    layers: &[usize],
    lw: &LayerwiseOptions,
    train_opts: &crate::train::TrainOptions,
) -> crate::error::Result<LayerwiseReport> {
    use rand::SeedableRng;
    for &l in layers {
        if l >= model.cfg.n_layers {
            return Err(crate::error::FdmError::Config(format!(
                "beam layer {l} out of range for {} layers",
                model.cfg.n_layers
            )));
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(lw.seed);
    let base_val = crate::train::eval_loss(model, eval_set)?;
    let mut prev_val = base_val;
    let mut deltas = Vec::with_capacity(layers.len());
    let mut earlier: Vec<(crate::params::ParamId, Vec<f64>)> = Vec::new();
    let mut earlier_ok = true;

    for &layer in layers {
        model.attach_beam(layer, lw.n_heads)?;
        let heads = model.beam(layer).expect("just attached").heads.clone();
        let mut opt = crate::train::AdamW::new(
            &model.params,
            &crate::params::Trainable::subset(heads.iter().copied()),
            crate::train::AdamWConfig {
                lr: lw.lr,
                warmup_steps: (lw.steps_per_layer / 10).max(1),
                total_steps: lw.steps_per_layer,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..lw.steps_per_layer {
            let batch = crate::train::sample_lm_batch(
                train_tokens,
                train_opts.seq_len,
                train_opts.batch_size,
                &mut rng,
            );
            beam_step(model, &mut opt, &batch, &heads, lw.lambda, train_opts.parallel)?;
        }
        let val_after = crate::train::eval_loss(model, eval_set)?;
        deltas.push(LayerDelta { layer, val_before: prev_val, val_after });
        prev_val = val_after;

        for (id, snap) in &earlier {
            if model.params.values(*id).iter().zip(snap).any(|(a, b)| a.to_bits() != b.to_bits()) {
                earlier_ok = false;
            }
        }
        for &h in &heads {
            earlier.push((h, model.params.values(h).to_vec()));
        }
    }
    Ok(LayerwiseReport { base_val, deltas, earlier_beams_untouched: earlier_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::oracles;
    use crate::tape::Buf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_heads(rng: &mut ChaCha8Rng, h: usize, d: usize, d_in: usize) -> Vec<Vec<f64>> {
        (0..h).map(|_| (0..d * d_in).map(|_| rng.gen_range(-0.8..0.8)).collect()).collect()
    }

    #[test]
    fn zero_beam_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, d_in, t_len) = (5, 3, 4);
        let h: Vec<Complex64> = (0..t_len * d)
            .map(|_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let x: Vec<f64> = (0..t_len * d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let head = tape.input_f64(vec![0.0; d * d_in], &[d, d_in]);
        let x_t = tape.input_f64(x, &[t_len, d_in]);
        let h_t = tape.input(Buf::C128(h.clone()), &[t_len, d]);
        let out = modulate(&mut tape, &[head], x_t, h_t);
        let got = tape.value_c128(out);
        for (a, b) in h.iter().zip(got) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn equal_heads_reduce_to_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, d_in) = (4, 4);
        let w = random_heads(&mut rng, 1, d, d_in).remove(0);
        let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<Complex64> =
            (0..d).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();

        let mut one = h.clone();
        modulate_row(&mut one, &x, &[&w]);
        let mut two = h.clone();
        modulate_row(&mut two, &x, &[&w, &w]);
        for c in 0..d {
            assert!((one[c] - two[c]).norm() < 1e-15);
        }
    }

    #[test]
    fn multi_head_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, d_in, n_heads) = (4, 3, 3);
        let heads = random_heads(&mut rng, n_heads, d, d_in);
        let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<Complex64> =
            (0..d).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();

        let mut got = h.clone();
        let head_refs: Vec<&[f64]> = heads.iter().map(|v| v.as_slice()).collect();
        modulate_row(&mut got, &x, &head_refs);
        let expected = oracles::holo_modulate_literal(&h, &x, &heads, d);
        for c in 0..d {
            assert!((got[c] - expected[c]).norm() < 1e-12, "channel {c}");
        }
    }

    #[test]
    fn modulation_factor_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, d_in) = (6, 6);
        for _ in 0..50 {
            let heads = random_heads(&mut rng, 2, d, d_in);
            let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let h: Vec<Complex64> = (0..d)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let mut out = h.clone();
            let head_refs: Vec<&[f64]> = heads.iter().map(|v| v.as_slice()).collect();
            modulate_row(&mut out, &x, &head_refs);
            let n_in: f64 = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let n_out: f64 = out.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(n_out <= 2.0 * n_in + 1e-12);
            for c in 0..d {
                if h[c].norm() > 0.0 {
                    let ratio = out[c].norm() / h[c].norm();
                    assert!(ratio > 0.0 && ratio < 2.0, "factor {ratio} out of (0,2)");
                }
            }
        }
    }

    #[test]
    fn orthogonality_zero_for_single_head() {
        let mut tape = Tape::new();
        let w = tape.input_f64(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let loss = orthogonality_loss(&mut tape, &[w], 0.5);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn orthogonality_zero_for_orthogonal_rows() {
        let mut tape = Tape::new();
        let w1 = tape.input_f64(vec![1.0, 0.0], &[1, 2]);
        let w2 = tape.input_f64(vec![0.0, 1.0], &[1, 2]);
        let loss = orthogonality_loss(&mut tape, &[w1, w2], 1.0);
        assert!(tape.scalar(loss).abs() < 1e-15);
    }

    #[test]
    fn orthogonality_hand_gram_case() {
        // heads [1,0] and [1,1], λ=1: ||W1 W2^T||_F^2 = 1 for each ordered
        // pair, total 2.
        let mut tape = Tape::new();
        let w1 = tape.input_f64(vec![1.0, 0.0], &[1, 2]);
        let w2 = tape.input_f64(vec![1.0, 1.0], &[1, 2]);
        let loss = orthogonality_loss(&mut tape, &[w1, w2], 1.0);
        assert!((tape.scalar(loss) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonality_gradient_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, d_in) = (3, 4);
        let w1: Vec<f64> = (0..d * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..d * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |w1v: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let a = tape.input_f64(w1v.to_vec(), &[d, d_in]);
            let b = tape.input_f64(w2.clone(), &[d, d_in]);
            let loss = orthogonality_loss(&mut tape, &[a, b], 0.01);
            tape.backward(loss);
            (tape.scalar(loss), tape.grad_f64(a).unwrap().to_vec())
        };
        let (_, analytic) = run(&w1);
        let mut f = |b: &Buf| run(b.as_f64()).0;
        let rep =
            finite_difference_check(&mut f, &Buf::F64(w1.clone()), &Buf::F64(analytic), 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-6, "orthogonality FD rel err {}", rep.max_rel_err);
    }
}
