//! Per-step time, peak tracked bytes and decompression share over a
//! sequence-length sweep, for MeBP and MeZO. Pass a path to also write CSV.

use mebp::harness::{bench, write_csv, BenchCase, OptimizerKind};
use mebp::model::ModelConfig;

fn main() -> mebp::Result<()> {
    let cfg = ModelConfig::default();
    let mut cases = Vec::new();
    for opt in [OptimizerKind::Fo, OptimizerKind::Mezo] {
        for t in [64, 128, 256] {
            cases.push(BenchCase::new(format!("{opt}-{t}"), cfg.clone(), opt, t));
        }
    }
    let rows = bench(&cases)?;
    println!(
        "{:<10} {:>10} {:>12} {:>8} {:>8}",
        "case", "step ms", "peak B", "f dec", "b dec"
    );
    for r in &rows {
        println!(
            "{:<10} {:>10.3} {:>12} {:>8.3} {:>8.3}",
            r.label,
            r.step_time_mean_s * 1e3,
            r.peak_heap_bytes,
            r.decompress_ratio_f,
            r.decompress_ratio_b
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        write_csv(&rows, std::path::Path::new(&path))?;
    }
    Ok(())
}
