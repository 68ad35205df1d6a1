//! First-order training against MeZO on a small byte-level corpus.

use mebp::harness::{synthetic_text, train, Corpus, OptimizerKind, RunConfig, Session, Tokenizer};
use mebp::model::ModelConfig;

fn main() -> mebp::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 256,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 64,
        lora_rank: 8,
        ..ModelConfig::default()
    };
    let session = Session::synthetic(&cfg, 0)?;
    let corpus = Corpus::from_text(
        &synthetic_text(0, 64 * 1024),
        &Tokenizer::Byte,
        32,
        256,
        16,
        0,
    )?;
    for (opt, steps, lr) in [
        (OptimizerKind::Fo, 200, 1e-2),
        (OptimizerKind::Mezo, 2000, 1e-3),
    ] {
        let run = RunConfig {
            optimizer: opt,
            steps,
            seq_len: 32,
            lr,
            eval_every: steps / 4,
            ..RunConfig::default()
        };
        let art = train(&session, &run, &corpus)?;
        let time: f64 = art.steps.iter().map(|s| s.step_time_s).sum();
        println!("{opt} ({steps} steps, lr {lr}, {time:.2}s):");
        for e in &art.curve {
            println!(
                "  step {:>5}  eval loss {:.4}  acc {:.3}",
                e.step, e.eval_loss, e.next_token_acc
            );
        }
    }
    Ok(())
}
