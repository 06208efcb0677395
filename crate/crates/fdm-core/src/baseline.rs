//! Minimal causal-attention language model, used only as an internal
//! reference point for the associative-recall comparison: single-head full
//! attention, learned absolute positions, pre-norm residual blocks.

use crate::error::{FdmError, Result};
use crate::params::{GradMap, ParamId, ParamSet, ParamTag, Trainable};
use crate::tape::{Tape, TensorId};
use crate::train::SeqModel;

#[derive(Clone, Debug)]
pub struct BaselineConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl BaselineConfig {
    /// Same width/depth as the desk FDM used for recall experiments.
    pub fn desk(vocab_size: usize, max_seq: usize) -> Self {
        BaselineConfig { d_model: 64, n_layers: 2, vocab_size, max_seq, ffn_mult: 4, seed: 42 }
    }
}

struct LayerIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    norm_attn: ParamId,
    norm_ffn: ParamId,
    ffn_w1: ParamId,
    ffn_w2: ParamId,
}

pub struct AttnBaseline {
    pub cfg: BaselineConfig,
    pub params: ParamSet,
    layers: Vec<LayerIds>,
    embed: ParamId,
    pos: ParamId,
    final_norm: ParamId,
    lm_head: ParamId,
}

impl AttnBaseline {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        if cfg.d_model < 2 || cfg.n_layers == 0 || cfg.vocab_size < 2 || cfg.max_seq == 0 {
            return Err(FdmError::Config("bad baseline config".into()));
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uni = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-s..s)).collect() };
        let d = cfg.d_model;
        let f = cfg.ffn_mult * d;
        let v = cfg.vocab_size;
        let mut ps = ParamSet::new();
        let scale = 1.0 / (d as f64).sqrt();
        let embed = ps.add("embed.weight", ParamTag::Cache, &[v, d], uni(v * d, scale));
        let pos = ps.add("pos.weight", ParamTag::Cache, &[cfg.max_seq, d], uni(cfg.max_seq * d, scale));
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                w_q: ps.add(&p("attn.w_q"), ParamTag::Cache, &[d, d], uni(d * d, scale)),
                w_k: ps.add(&p("attn.w_k"), ParamTag::Cache, &[d, d], uni(d * d, scale)),
                w_v: ps.add(&p("attn.w_v"), ParamTag::Cache, &[d, d], uni(d * d, scale)),
                w_o: ps.add(&p("attn.w_o"), ParamTag::Cache, &[d, d], uni(d * d, scale)),
                norm_attn: ps.add(&p("norm_attn.gain"), ParamTag::Cache, &[1, d], vec![1.0; d]),
                norm_ffn: ps.add(&p("norm_ffn.gain"), ParamTag::Cache, &[1, d], vec![1.0; d]),
                ffn_w1: ps.add(&p("ffn.w1"), ParamTag::Cache, &[f, d], uni(f * d, scale)),
                ffn_w2: ps.add(&p("ffn.w2"), ParamTag::Cache, &[d, f], uni(d * f, 1.0 / (f as f64).sqrt())),
            });
        }
        let final_norm = ps.add("final_norm.gain", ParamTag::Cache, &[1, d], vec![1.0; d]);
        let lm_head = ps.add("lm_head.weight", ParamTag::Cache, &[v, d], uni(v * d, 0.02));
        Ok(AttnBaseline { cfg, params: ps, layers, embed, pos, final_norm, lm_head })
    }

    fn forward(
        &self,
        tokens: &[usize],
        targets: Option<&[i64]>,
        trainable: &Trainable,
    ) -> Result<(Tape, TensorId, Option<TensorId>)> {
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(FdmError::TokenOutOfRange { id: t, vocab: self.cfg.vocab_size });
            }
        }
        let t_len = tokens.len();
        if t_len > self.cfg.max_seq {
            return Err(FdmError::Config(format!(
                "sequence length {t_len} exceeds baseline max_seq {}",
                self.cfg.max_seq
            )));
        }
        let scale = 1.0 / (self.cfg.d_model as f64).sqrt();
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|(pid, e)| {
                if trainable.includes(pid, e.tag) {
                    tape.param(pid.0, &e.values, &e.shape)
                } else {
                    tape.constant(crate::tape::Buf::F64(e.values.clone()), &e.shape)
                }
            })
            .collect();
        let t = |p: ParamId| ids[p.0];

        let emb = tape.gather_rows(t(self.embed), tokens);
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.gather_rows(t(self.pos), &positions);
        let mut x = tape.add(emb, pos);

        for layer in &self.layers {
            let u = tape.rms_norm(x, t(layer.norm_attn));
            let q = tape.matmul_tb(u, t(layer.w_q));
            let k = tape.matmul_tb(u, t(layer.w_k));
            let v = tape.matmul_tb(u, t(layer.w_v));
            let mut rows = Vec::with_capacity(t_len);
            for i in 0..t_len {
                let slots: Vec<usize> = (0..=i).collect();
                let qi = tape.slice_rows(q, i, 1);
                let keys = tape.gather_rows(k, &slots);
                let vals = tape.gather_rows(v, &slots);
                let logits = tape.matmul_tb(qi, keys);
                let scaled = tape.scale(logits, scale);
                let attn = tape.row_softmax(scaled);
                rows.push(tape.matmul(attn, vals));
            }
            let att = tape.concat_rows(&rows);
            let proj = tape.matmul_tb(att, t(layer.w_o));
            let y = tape.add(x, proj);

            let uf = tape.rms_norm(y, t(layer.norm_ffn));
            let pre = tape.matmul_tb(uf, t(layer.ffn_w1));
            let act = tape.silu(pre);
            let ffn = tape.matmul_tb(act, t(layer.ffn_w2));
            x = tape.add(y, ffn);
        }
        let xf = tape.rms_norm(x, t(self.final_norm));
        let logits = tape.matmul_tb(xf, t(self.lm_head));
        let loss = targets.map(|tg| tape.cross_entropy(logits, tg));
        Ok((tape, logits, loss))
    }
}

impl SeqModel for AttnBaseline {
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
        let (mut tape, _, loss) = self.forward(tokens, Some(targets), trainable)?;
        let loss = loss.expect("targets were provided");
        tape.backward(loss);
        let mut grads = GradMap::new(&self.params);
        for (key, g) in tape.param_grads() {
            grads.accumulate(key, g);
        }
        Ok((tape.scalar(loss), grads))
    }

    fn seq_loss(&self, tokens: &[usize], targets: &[i64]) -> Result<f64> {
        let none = Trainable::Subset(Default::default());
        let (tape, _, loss) = self.forward(tokens, Some(targets), &none)?;
        Ok(tape.scalar(loss.expect("targets were provided")))
    }

    fn seq_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let none = Trainable::Subset(Default::default());
        let (tape, logits, _) = self.forward(tokens, None, &none)?;
        Ok(tape.value_f64(logits).to_vec())
    }
}
