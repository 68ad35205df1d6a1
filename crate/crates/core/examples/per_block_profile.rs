//! Time and peak memory of every block in one first-order step. With a
//! large vocabulary the output head dominates. Pass a path to also write CSV.

use mebp::harness::{block_profile, write_csv, Session};
use mebp::model::ModelConfig;

fn main() -> mebp::Result<()> {
    let cfg = ModelConfig::default();
    let session = Session::synthetic(&cfg, 0)?;
    // First call warms caches and the spill directory.
    block_profile(&session, 256, 0)?;
    let rows = block_profile(&session, 256, 1)?;
    for b in &rows {
        println!(
            "{} {:<13} {:>8.3} ms {:>10} B  weights {:>8} B",
            b.phase,
            b.block,
            b.time_s * 1e3,
            b.peak_bytes,
            b.weight_bytes
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        write_csv(&rows, std::path::Path::new(&path))?;
    }
    Ok(())
}
