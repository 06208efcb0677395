//! Training: AdamW with warmup/cosine schedule, batched gradient steps
//! (data-parallel across sequences, reduced in batch order so parallel and
//! serial runs produce bit-identical gradients), the two-phase freeze
//! schedule, and CSV logging.

use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

use crate::corpus::Corpus;
use crate::error::{FdmError, Result};
use crate::model::FdmModel;
use crate::params::{GradMap, ParamId, ParamSet, ParamTag, Trainable};

// ── Model abstraction ────────────────────────────────────────────────

/// Anything trainable by the loops in this module: the FDM model and the
/// minimal attention baseline.
pub trait SeqModel: Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn vocab_size(&self) -> usize;
    /// Loss and parameter gradients for one sequence.
    fn seq_loss_grads(&self, tokens: &[usize], targets: &[i64], trainable: &Trainable)
        -> Result<(f64, GradMap)>;
    /// Loss only; no gradients recorded.
    fn seq_loss(&self, tokens: &[usize], targets: &[i64]) -> Result<f64>;
    /// Flattened [T, vocab] logits for one sequence.
    fn seq_logits(&self, tokens: &[usize]) -> Result<Vec<f64>>;
}

impl SeqModel for FdmModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn seq_loss_grads(
        &self,
        tokens: &[usize],
        targets: &[i64],
        trainable: &Trainable,
    ) -> Result<(f64, GradMap)> {
        let mut out = self.forward(tokens, Some(targets), trainable, false)?;
        let loss = out.loss.expect("targets were provided");
        out.tape.backward(loss);
        let mut grads = GradMap::new(&self.params);
        for (key, g) in out.tape.param_grads() {
            grads.accumulate(key, g);
        }
        Ok((out.tape.scalar(loss), grads))
    }

    fn seq_loss(&self, tokens: &[usize], targets: &[i64]) -> Result<f64> {
        // nothing trainable: the whole forward folds to constants
        let none = Trainable::Subset(Default::default());
        let out = self.forward(tokens, Some(targets), &none, false)?;
        Ok(out.tape.scalar(out.loss.expect("targets were provided")))
    }

    fn seq_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let none = Trainable::Subset(Default::default());
        let out = self.forward(tokens, None, &none, false)?;
        Ok(out.tape.value_f64(out.logits).to_vec())
    }
}

// ── AdamW ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    /// Steps for the cosine decay; 0 = constant lr after warmup.
    pub total_steps: u64,
    /// Final lr as a fraction of the base lr.
    pub lr_floor: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_steps: 200,
            total_steps: 0,
            lr_floor: 0.1,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam. Moments exist only for trainable
/// parameters; everything else is untouched bitwise. Weight decay applies
/// only to genuinely 2-d tensors (matrices), not gains/biases/scalars.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    slots: Vec<Option<Moments>>,
}

const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(params: &ParamSet, trainable: &Trainable, cfg: AdamWConfig) -> Self {
        let slots = params
            .iter()
            .map(|(id, e)| {
                if trainable.includes(id, e.tag) {
                    Some(Moments { m: vec![0.0; e.values.len()], v: vec![0.0; e.values.len()] })
                } else {
                    None
                }
            })
            .collect();
        AdamW { cfg, step: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.cfg;
        let warm = if c.warmup_steps > 0 && step <= c.warmup_steps {
            step as f64 / c.warmup_steps as f64
        } else {
            1.0
        };
        let decay = if c.total_steps > c.warmup_steps && step > c.warmup_steps {
            let t = (step - c.warmup_steps) as f64 / (c.total_steps - c.warmup_steps) as f64;
            let t = t.min(1.0);
            c.lr_floor + (1.0 - c.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        c.lr * warm * decay
    }

    /// Apply one update. The whole step is rejected before any mutation if
    /// a gradient is non-finite.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<f64> {
        // validate + global-norm clip factor
        let mut sq_norm = 0.0;
        for (idx, slot) in self.slots.iter().enumerate() {
            if slot.is_none() {
                continue;
            }
            if let Some(g) = grads.get(ParamId(idx)) {
                for &v in g {
                    if !v.is_finite() {
                        return Err(FdmError::NonFiniteGrad {
                            param: params.entry(ParamId(idx)).name.clone(),
                        });
                    }
                    sq_norm += v * v;
                }
            }
        }
        let norm = sq_norm.sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };

        self.step += 1;
        let lr = self.lr_at(self.step);
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);

        for (idx, slot) in self.slots.iter_mut().enumerate() {
            let Some(mom) = slot else { continue };
            let Some(g) = grads.get(ParamId(idx)) else { continue };
            let id = ParamId(idx);
            let decay = {
                let e = params.entry(id);
                let wide_dims = e.shape.iter().filter(|&&s| s > 1).count();
                if wide_dims >= 2 {
                    self.cfg.weight_decay
                } else {
                    0.0
                }
            };
            let p = params.values_mut(id);
            for c in 0..p.len() {
                let gc = g[c] * clip;
                mom.m[c] = b1 * mom.m[c] + (1.0 - b1) * gc;
                mom.v[c] = b2 * mom.v[c] + (1.0 - b2) * gc * gc;
                let m_hat = mom.m[c] / bc1;
                let v_hat = mom.v[c] / bc2;
                p[c] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * p[c]);
            }
        }
        Ok(lr)
    }

    /// Moments for the resumable train-state file.
    pub fn export_moments(&self, params: &ParamSet) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(idx, s)| {
                s.as_ref().map(|m| (params.entry(ParamId(idx)).name.clone(), m.m.clone(), m.v.clone()))
            })
            .collect()
    }

    pub fn import_moments(
        &mut self,
        params: &ParamSet,
        step: u64,
        moments: &[(String, Vec<f64>, Vec<f64>)],
    ) -> Result<()> {
        self.step = step;
        for (name, m, v) in moments {
            let id = params
                .id_of(name)
                .ok_or_else(|| FdmError::Checkpoint(format!("unknown parameter `{name}` in train state")))?;
            let slot = self.slots[id.0]
                .as_mut()
                .ok_or_else(|| FdmError::Checkpoint(format!("parameter `{name}` is frozen here")))?;
            slot.m.copy_from_slice(m);
            slot.v.copy_from_slice(v);
        }
        Ok(())
    }
}

// ── Batched steps ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub seq_len: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_windows: usize,
    /// false forces the serial path; the parallel path reduces in batch
    /// order and is bit-identical to it.
    pub parallel: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { seq_len: 128, batch_size: 8, eval_every: 50, eval_windows: 16, parallel: true }
    }
}

pub type Batch = Vec<(Vec<usize>, Vec<i64>)>;

/// One optimizer step over a batch of (tokens, targets) sequences.
/// Returns (mean loss, merged gradient map) — the grads are what the
/// optimizer just consumed, exposed for freeze probes.
pub fn train_step<M: SeqModel>(
    model: &mut M,
    opt: &mut AdamW,
    batch: &[(Vec<usize>, Vec<i64>)],
    trainable: &Trainable,
    parallel: bool,
) -> Result<(f64, GradMap)> {
    assert!(!batch.is_empty(), "train_step: empty batch");
    let results: Vec<(f64, GradMap)> = if parallel {
        batch
            .par_iter()
            .map(|(t, tg)| model.seq_loss_grads(t, tg, trainable))
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .map(|(t, tg)| model.seq_loss_grads(t, tg, trainable))
            .collect::<Result<_>>()?
    };
    let mut grads = GradMap::new(model.params());
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grads.merge(g);
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    opt.apply(model.params_mut(), &grads)?;
    Ok((loss / b, grads))
}

/// Mean loss over fixed evaluation sequences, forward only.
pub fn eval_loss<M: SeqModel>(model: &M, windows: &[(Vec<usize>, Vec<i64>)]) -> Result<f64> {
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|(t, tg)| model.seq_loss(t, tg))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ── LM data plumbing ─────────────────────────────────────────────────

/// Random training window: tokens[s..s+L] predicting tokens[s+1..s+L+1].
pub fn sample_lm_window(
    tokens: &[usize],
    seq_len: usize,
    rng: &mut impl rand::Rng,
) -> (Vec<usize>, Vec<i64>) {
    assert!(tokens.len() > seq_len + 1, "stream of {} tokens too short for seq_len {seq_len}", tokens.len());
    let start = rng.gen_range(0..tokens.len() - seq_len - 1);
    let input = tokens[start..start + seq_len].to_vec();
    let targets: Vec<i64> = tokens[start + 1..start + seq_len + 1].iter().map(|&t| t as i64).collect();
    (input, targets)
}

pub fn sample_lm_batch(
    tokens: &[usize],
    seq_len: usize,
    batch: usize,
    rng: &mut impl rand::Rng,
) -> Batch {
    (0..batch).map(|_| sample_lm_window(tokens, seq_len, rng)).collect()
}

/// Evenly spaced evaluation windows over a stream.
pub fn eval_windows(tokens: &[usize], seq_len: usize, count: usize) -> Batch {
    assert!(tokens.len() > seq_len + 1, "eval stream too short");
    let span = tokens.len() - seq_len - 1;
    (0..count)
        .map(|i| {
            let start = span * i / count.max(1);
            let input = tokens[start..start + seq_len].to_vec();
            let targets: Vec<i64> =
                tokens[start + 1..start + seq_len + 1].iter().map(|&t| t as i64).collect();
            (input, targets)
        })
        .collect()
}

// ── Logging ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: u64,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,phase,lr,train_loss,val_loss,wall_time")?;
        for r in &self.rows {
            let val = r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(f, "{},{},{:.6e},{:.6},{},{:.3}", r.step, r.phase, r.lr, r.train_loss, val, r.wall_time_s)?;
        }
        Ok(())
    }

    pub fn last_val_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_loss)
    }
}

// ── Freeze-Scan ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FreezeScanSchedule {
    /// Phase-1 step cap.
    pub phase1_steps: u64,
    /// Stop phase 1 early after this many evals without val-loss improvement.
    pub phase1_patience: Option<u32>,
    pub phase2_steps: u64,
    pub phase2_lr: f64,
}

impl Default for FreezeScanSchedule {
    fn default() -> Self {
        FreezeScanSchedule { phase1_steps: 1000, phase1_patience: Some(5), phase2_steps: 500, phase2_lr: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct FreezeReport {
    /// Every wave parameter bitwise unchanged across phase 2.
    pub wave_bitwise_constant: bool,
    /// Number of phase-2 steps in which any wave parameter received a gradient.
    pub wave_grad_steps: u64,
}

pub struct FreezeScanOutcome {
    pub log: TrainLog,
    pub freeze: FreezeReport,
    pub phase1_final_val: f64,
    pub phase2_final_val: f64,
}

/// One phase of LM training. Appends to `log` and returns the final val loss.
#[allow(clippy::too_many_arguments)]
pub fn lm_phase<M: SeqModel>(
    model: &mut M,
    train_tokens: &[usize],
    eval_set: &Batch,
    trainable: &Trainable,
    opt: &mut AdamW,
    steps: u64,
    opts: &TrainOptions,
    rng: &mut impl rand::Rng,
    log: &mut TrainLog,
    phase: u8,
    patience: Option<u32>,
) -> Result<f64> {
    let t0 = Instant::now();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0u32;
    let mut val = eval_loss(model, eval_set)?;
    for step in 1..=steps {
        let batch = sample_lm_batch(train_tokens, opts.seq_len, opts.batch_size, rng);
        let (train_loss, _) = train_step(model, opt, &batch, trainable, opts.parallel)?;
        let do_eval = step % opts.eval_every as u64 == 0 || step == steps;
        if do_eval {
            val = eval_loss(model, eval_set)?;
            log.rows.push(LogRow {
                step: opt.step_count(),
                phase,
                lr: opt.lr_at(opt.step_count()),
                train_loss,
                val_loss: Some(val),
                wall_time_s: t0.elapsed().as_secs_f64(),
            });
            if let Some(p) = patience {
                if val + 1e-4 < best_val {
                    best_val = val;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= p {
                        break;
                    }
                }
            }
        } else {
            log.rows.push(LogRow {
                step: opt.step_count(),
                phase,
                lr: opt.lr_at(opt.step_count()),
                train_loss,
                val_loss: None,
                wall_time_s: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(val)
}

/// Two-phase training: joint optimization, then freeze the wave set and
/// continue on the cache set alone at `phase2_lr` with a fresh optimizer.
/// The freeze contract is probed every phase-2 step.
pub fn run_freeze_scan(
    model: &mut FdmModel,
    corpus: &Corpus,
    schedule: &FreezeScanSchedule,
    adam: &AdamWConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<FreezeScanOutcome> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let eval_set = eval_windows(&corpus.val, opts.seq_len, opts.eval_windows);
    let mut log = TrainLog::default();

    // Phase 1: all parameters
    let mut cfg1 = adam.clone();
    cfg1.total_steps = schedule.phase1_steps;
    let mut opt1 = AdamW::new(&model.params, &Trainable::All, cfg1);
    let phase1_final_val = lm_phase(
        model,
        &corpus.train,
        &eval_set,
        &Trainable::All,
        &mut opt1,
        schedule.phase1_steps,
        opts,
        &mut rng,
        &mut log,
        1,
        schedule.phase1_patience,
    )?;

    // Phase 2: cache set only, fresh optimizer at the phase-2 lr
    let wave_ids = model.params.ids_with_tag(ParamTag::Wave);
    let wave_snapshot: Vec<Vec<f64>> =
        wave_ids.iter().map(|&id| model.params.values(id).to_vec()).collect();

    let mut cfg2 = adam.clone();
    cfg2.lr = schedule.phase2_lr;
    cfg2.total_steps = schedule.phase2_steps;
    cfg2.warmup_steps = adam.warmup_steps.min(schedule.phase2_steps / 10);
    let cache_only = Trainable::TagOnly(ParamTag::Cache);
    let mut opt2 = AdamW::new(&model.params, &cache_only, cfg2);

    let t0 = Instant::now();
    let mut wave_grad_steps = 0u64;
    let mut val = phase1_final_val;
    for step in 1..=schedule.phase2_steps {
        let batch = sample_lm_batch(&corpus.train, opts.seq_len, opts.batch_size, &mut rng);
        let (train_loss, grads) = train_step(model, &mut opt2, &batch, &cache_only, opts.parallel)?;
        if wave_ids.iter().any(|&id| grads.get(id).is_some()) {
            wave_grad_steps += 1;
        }
        let do_eval = step % opts.eval_every as u64 == 0 || step == schedule.phase2_steps;
        if do_eval {
            val = eval_loss(model, &eval_set)?;
        }
        log.rows.push(LogRow {
            step: opt2.step_count(),
            phase: 2,
            lr: opt2.lr_at(opt2.step_count()),
            train_loss,
            val_loss: do_eval.then_some(val),
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
    }

    let wave_bitwise_constant = wave_ids.iter().enumerate().all(|(i, &id)| {
        model.params.values(id).iter().zip(&wave_snapshot[i]).all(|(a, b)| a.to_bits() == b.to_bits())
    });

    Ok(FreezeScanOutcome {
        log,
        freeze: FreezeReport { wave_bitwise_constant, wave_grad_steps },
        phase1_final_val,
        phase2_final_val: val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::params::ParamTag;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            vocab_size: 16,
            window: 4,
            global_slots: 2,
            n_g: 4,
            k_c: 2,
            horizon: 16,
            eps: 0.01,
            ffn_mult: 2,
            seed: 5,
        }
    }

    fn one_param_set(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", ParamTag::Cache, &[2, 2], vec![value; 4]);
        ps
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut ps = one_param_set(0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, warmup_steps: 0, ..Default::default() };
        let mut opt = AdamW::new(&ps, &Trainable::All, cfg);
        let mut grads = GradMap::new(&ps);
        grads.accumulate(0, &[0.0; 4]);
        let before = ps.values(ParamId(0)).to_vec();
        opt.apply(&mut ps, &grads).unwrap();
        for (a, b) in before.iter().zip(ps.values(ParamId(0))) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn first_step_matches_hand_adamw() {
        // single scalar, grad 1, lr 0.1, betas (0.9, 0.999), no decay:
        // m_hat = 1, v_hat = 1, update = -0.1 / (1 + 1e-8)
        let mut ps = ParamSet::new();
        ps.add("w", ParamTag::Cache, &[1], vec![0.5]);
        let cfg = AdamWConfig {
            lr: 0.1,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            grad_clip: 0.0,
            warmup_steps: 0,
            total_steps: 0,
            lr_floor: 0.1,
        };
        let mut opt = AdamW::new(&ps, &Trainable::All, cfg);
        let mut grads = GradMap::new(&ps);
        grads.accumulate(0, &[1.0]);
        opt.apply(&mut ps, &grads).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((ps.values(ParamId(0))[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_rejected_with_param_name() {
        let mut ps = one_param_set(0.1);
        let mut opt = AdamW::new(&ps, &Trainable::All, AdamWConfig::default());
        let mut grads = GradMap::new(&ps);
        grads.accumulate(0, &[1.0, f64::NAN, 0.0, 0.0]);
        let before = ps.values(ParamId(0)).to_vec();
        match opt.apply(&mut ps, &grads) {
            Err(FdmError::NonFiniteGrad { param }) => assert_eq!(param, "w"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
        // rejected before any mutation
        assert_eq!(before, ps.values(ParamId(0)));
    }

    #[test]
    fn frozen_params_receive_no_moments_and_never_move() {
        let model = FdmModel::new(tiny()).unwrap();
        let mut ps = model.params.clone();
        let cache_only = Trainable::TagOnly(ParamTag::Cache);
        let mut opt = AdamW::new(&ps, &cache_only, AdamWConfig { warmup_steps: 0, ..Default::default() });
        let wave_ids = ps.ids_with_tag(ParamTag::Wave);
        let snapshot: Vec<Vec<f64>> = wave_ids.iter().map(|&id| ps.values(id).to_vec()).collect();

        for _ in 0..100 {
            let mut grads = GradMap::new(&ps);
            for (id, e) in model.params.iter() {
                grads.accumulate(id.0, &vec![0.01; e.values.len()]);
            }
            opt.apply(&mut ps, &grads).unwrap();
        }
        for (i, &id) in wave_ids.iter().enumerate() {
            for (a, b) in ps.values(id).iter().zip(&snapshot[i]) {
                assert_eq!(a.to_bits(), b.to_bits(), "frozen wave param moved");
            }
        }
        // and cache params did move
        let cache_id = ps.id_of("embed.weight").unwrap();
        assert_ne!(ps.values(cache_id)[0], model.params.values(cache_id)[0]);
    }

    #[test]
    fn parallel_batch_grads_equal_serial() {
        let mut model_a = FdmModel::new(tiny()).unwrap();
        let mut model_b = FdmModel::new(tiny()).unwrap();
        let batch: Batch = (0..4)
            .map(|i| {
                let tokens: Vec<usize> = (0..10).map(|t| (t * 3 + i) % 16).collect();
                let targets: Vec<i64> = (0..10).map(|t| ((t * 5 + i) % 16) as i64).collect();
                (tokens, targets)
            })
            .collect();
        let cfg = AdamWConfig { warmup_steps: 0, ..Default::default() };
        let mut opt_a = AdamW::new(&model_a.params, &Trainable::All, cfg.clone());
        let mut opt_b = AdamW::new(&model_b.params, &Trainable::All, cfg);
        let (la, _) = train_step(&mut model_a, &mut opt_a, &batch, &Trainable::All, true).unwrap();
        let (lb, _) = train_step(&mut model_b, &mut opt_b, &batch, &Trainable::All, false).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        for ((_, ea), (_, eb)) in model_a.params.iter().zip(model_b.params.iter()) {
            for (x, y) in ea.values.iter().zip(&eb.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "parallel and serial params diverged");
            }
        }
    }

    #[test]
    fn initial_lm_loss_near_log_vocab() {
        let model = FdmModel::new(tiny()).unwrap();
        let tokens: Vec<usize> = (0..40).map(|t| (t * 7 + 3) % 16).collect();
        let targets: Vec<i64> = tokens.iter().skip(1).map(|&t| t as i64).chain([0]).collect();
        let loss = model.seq_loss(&tokens, &targets).unwrap();
        let ln_v = (16.0f64).ln();
        assert!(
            (loss - ln_v).abs() / ln_v < 0.02,
            "initial loss {loss} not within 2% of ln(16) = {ln_v}"
        );
    }
}
