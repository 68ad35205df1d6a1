//! Compile the block graph for a config and round-trip its manifest.

use mebp::graph::BlockGraph;
use mebp::model::ModelConfig;

fn main() -> mebp::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        ..ModelConfig::default()
    };
    let graph = BlockGraph::compile(&cfg)?;
    for b in graph.iter() {
        println!(
            "{:>2} {:<13} {} -> {}  frozen {:>2}  adapters {:>2}",
            b.index,
            b.name,
            b.input.id,
            b.output.id,
            b.frozen.len(),
            b.adapters.len()
        );
    }
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("graph.json");
    graph.serialize_manifest(&path)?;
    let back = BlockGraph::deserialize_manifest(&path)?;
    assert_eq!(back, graph);
    println!(
        "manifest: {} bytes, round trip ok",
        std::fs::metadata(&path)?.len()
    );
    Ok(())
}
