//! One block-wise backprop step against the monolithic tape, with the
//! per-block trace.

use mebp::harness::{random_input, Session};
use mebp::model::{LoraInit, LoraState, ModelConfig};
use mebp::runtime::{mebp_backprop, monolithic_backprop, CheckpointStore};

fn main() -> mebp::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 512,
        n_layers: 4,
        ..ModelConfig::default()
    };
    let session = Session::synthetic(&cfg, 1)?;
    let lora = LoraState::new(
        &cfg,
        1,
        LoraInit {
            a_std: None,
            b_std: 0.02,
        },
    )?;
    let x = random_input(cfg.vocab_size, 64, 3);

    let mut ckpts = CheckpointStore::mmap_spill(None)?;
    let blockwise = mebp_backprop(&session.graph, &session.store, &lora, &mut ckpts, &x)?;
    let mono = monolithic_backprop(&session.graph, &session.store, &lora, &x)?;
    println!(
        "loss {:.6} (monolithic {:.6}), gradient rel err {:.2e}",
        blockwise.loss,
        mono.loss,
        blockwise.grads.relative_error(&mono.grads)?
    );
    println!(
        "peak tracked bytes: block-wise {}, monolithic {}",
        blockwise.metrics.peak_heap_bytes, mono.metrics.peak_heap_bytes
    );
    for b in &blockwise.metrics.per_block {
        println!(
            "{} {:<13} {:>9.3} ms {:>10} B",
            b.phase,
            b.block,
            b.time_s * 1e3,
            b.peak_bytes
        );
    }
    Ok(())
}
