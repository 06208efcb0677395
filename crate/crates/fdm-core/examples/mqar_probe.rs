// Scratch probe: trainability and throughput of the tiny model on the
// easy recall task. Not part of the test suite.

use fdm_core::model::{FdmModel, ModelConfig};
use fdm_core::mqar::{eval_mqar, generate_mqar, MqarConfig};
use fdm_core::params::Trainable;
use fdm_core::train::{train_step, AdamW, AdamWConfig, SeqModel};
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let task = MqarConfig::easy();
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        vocab_size: task.vocab_size,
        window: 8,
        global_slots: k,
        n_g: 32,
        k_c: 4,
        horizon: task.seq_len,
        eps: 0.01,
        ffn_mult: 4,
        seed: 1,
    };
    let mut model = FdmModel::new(cfg).unwrap();
    let mut opt = AdamW::new(
        &model.params,
        &Trainable::All,
        AdamWConfig { lr, warmup_steps: 100, total_steps: steps, ..Default::default() },
    );
    let eval_insts = generate_mqar(999_999, &task, 200).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

    let acc0 = eval_mqar(|t| model.seq_logits(t).unwrap(), task.vocab_size, &eval_insts);
    println!("k={k} init acc {acc0:.3} (chance {:.3})", 1.0 / task.n_values() as f64);

    let t0 = Instant::now();
    let batch_size = 16;
    for step in 1..=steps {
        use rand::Rng;
        let seed: u64 = rng.gen();
        let insts = generate_mqar(seed, &task, batch_size).unwrap();
        let batch: Vec<(Vec<usize>, Vec<i64>)> =
            insts.into_iter().map(|i| (i.tokens, i.targets)).collect();
        let (loss, _) = train_step(&mut model, &mut opt, &batch, &Trainable::All, true).unwrap();
        if step % 100 == 0 || step == steps {
            let acc = eval_mqar(|t| model.seq_logits(t).unwrap(), task.vocab_size, &eval_insts);
            let sps = step as f64 / t0.elapsed().as_secs_f64();
            println!("step {step:5}  loss {loss:.4}  acc {acc:.3}  {sps:.2} steps/s");
            if acc >= 0.99 {
                println!("early exit: converged");
                break;
            }
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
