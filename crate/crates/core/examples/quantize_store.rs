//! Quantize seeded frozen weights into an INT4 store, reopen it through mmap
//! and load one block's weights.

use mebp::graph::BlockGraph;
use mebp::model::{init_frozen_weights, ModelConfig};
use mebp::quant::{dequantize, quantize, write_store, QuantizedWeightStore};

fn main() -> mebp::Result<()> {
    let cfg = ModelConfig::default();
    let weights = init_frozen_weights(&cfg, 0)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("weights.mebp");
    write_store(&weights, cfg.group_size, &path)?;

    let store = QuantizedWeightStore::open(&path)?;
    let dense: u64 = weights.values().map(|t| t.bytes()).sum();
    println!(
        "{} tensors, {} bytes on disk ({:.2}x smaller than f32)",
        store.len(),
        store.file_len(),
        dense as f64 / store.file_len() as f64
    );

    let (name, w) = weights.iter().next().unwrap();
    let q = quantize(name, w, cfg.group_size)?;
    let err = dequantize(&q)?
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!(
        "{name}: max error {err:.5}, largest half-scale {:.5}",
        q.max_scale() / 2.0
    );

    let graph = BlockGraph::compile(&cfg)?;
    graph.validate_store(&store)?;
    let bw = store.load_block_weights(&graph, 2)?;
    println!(
        "block 2 ({}): {} tensors, {} bytes decompressed in {:?}",
        graph.block(2)?.name,
        bw.tensors.len(),
        bw.bytes(),
        bw.decompress_time
    );
    Ok(())
}
