use std::path::Path;

use serde::Serialize;

use super::train::{OptimizerKind, RunConfig, Session, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StepInput};
use crate::runtime::{mebp_backprop, BlockMetric, CheckpointStore, Phase, SpillPolicy};
use crate::tensor::Rng;

/// Uniformly random tokens; enough for timing and memory measurements.
pub fn random_input(vocab: usize, seq_len: usize, seed: u64) -> StepInput {
    let mut rng = Rng::new(seed, 0x6265_6e63);
    let seq: Vec<u32> = (0..=seq_len).map(|_| rng.below(vocab) as u32).collect();
    StepInput::from_sequence(&seq).expect("seq_len >= 1")
}

#[derive(Clone, Debug)]
pub struct BenchCase {
    pub label: String,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub seq_len: usize,
    pub seed: u64,
    pub warmup: usize,
    pub repeats: usize,
    pub spill: SpillPolicy,
}

impl BenchCase {
    pub fn new(
        label: impl Into<String>,
        model: ModelConfig,
        optimizer: OptimizerKind,
        seq_len: usize,
    ) -> Self {
        BenchCase {
            label: label.into(),
            model,
            optimizer,
            seq_len,
            seed: 0,
            warmup: 1,
            repeats: 10,
            spill: SpillPolicy::MmapSpill,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub label: String,
    pub optimizer: OptimizerKind,
    pub seq_len: usize,
    pub repeats: usize,
    pub step_time_mean_s: f64,
    pub step_time_min_s: f64,
    pub peak_heap_bytes: u64,
    pub frozen_weight_peak: u64,
    pub decompress_ratio_f: f64,
    pub decompress_ratio_b: f64,
    pub forward_passes: u32,
}

/// Time full optimizer steps. Step time is averaged over `repeats` after
/// `warmup` discarded steps; peak is the maximum over the repeats.
pub fn bench(cases: &[BenchCase]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        if c.repeats == 0 {
            return Err(Error::Config(format!(
                "`{}`: repeats must be positive",
                c.label
            )));
        }
        let session = Session::synthetic(&c.model, c.seed)?;
        let run = RunConfig {
            optimizer: c.optimizer,
            seq_len: c.seq_len,
            seed: c.seed,
            lr: 1e-4,
            spill: c.spill,
            ..RunConfig::default()
        };
        let mut tr = Trainer::new(&session, run)?;
        for w in 0..c.warmup {
            tr.step(&[random_input(c.model.vocab_size, c.seq_len, w as u64)])?;
        }
        let (mut total, mut min, mut peak, mut fw) = (0.0, f64::INFINITY, 0, 0);
        let (mut df, mut tf, mut db, mut tb) = (0.0, 0.0, 0.0, 0.0);
        let mut passes = 0;
        for r in 0..c.repeats {
            let x = random_input(c.model.vocab_size, c.seq_len, 1000 + r as u64);
            let m = tr.step(&[x])?.metrics;
            total += m.step_time_s;
            min = f64::min(min, m.step_time_s);
            peak = peak.max(m.peak_heap_bytes);
            fw = fw.max(m.frozen_weight_peak);
            df += m.forward_decompress_s;
            tf += m.forward_time_s;
            db += m.backward_decompress_s;
            tb += m.backward_time_s;
            passes = m.forward_passes;
        }
        let ratio = |d: f64, t: f64| if t > 0.0 { d / t } else { 0.0 };
        rows.push(BenchRow {
            label: c.label.clone(),
            optimizer: c.optimizer,
            seq_len: c.seq_len,
            repeats: c.repeats,
            step_time_mean_s: total / c.repeats as f64,
            step_time_min_s: min,
            peak_heap_bytes: peak,
            frozen_weight_peak: fw,
            decompress_ratio_f: ratio(df, tf),
            decompress_ratio_b: ratio(db, tb),
            forward_passes: passes,
        });
    }
    Ok(rows)
}

/// Per-block time and peak of one first-order step, forward then backward.
pub fn block_profile(session: &Session, seq_len: usize, seed: u64) -> Result<Vec<BlockMetric>> {
    let tr = Trainer::new(
        session,
        RunConfig {
            seq_len,
            seed,
            ..RunConfig::default()
        },
    )?;
    let mut ckpts = CheckpointStore::mmap_spill(None)?;
    let x = random_input(session.config().vocab_size, seq_len, seed);
    let bp = mebp_backprop(&session.graph, &session.store, &tr.lora, &mut ckpts, &x)?;
    let mut rows = bp.metrics.per_block;
    rows.sort_by_key(|b| b.phase == Phase::Backward);
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_rows() {
        let mut cfg = ModelConfig::tiny();
        cfg.vocab_size = 64;
        let mut fo = BenchCase::new("fo", cfg.clone(), OptimizerKind::Fo, 8);
        fo.repeats = 2;
        let mut mz = BenchCase::new("mezo", cfg, OptimizerKind::Mezo, 8);
        mz.repeats = 2;
        let rows = bench(&[fo, mz]).unwrap();
        assert_eq!(rows[0].forward_passes, 1);
        assert_eq!(rows[1].forward_passes, 2);
        assert!(rows
            .iter()
            .all(|r| r.step_time_mean_s > 0.0 && r.peak_heap_bytes > 0));
        assert_eq!(rows[1].decompress_ratio_b, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_csv(&rows, &p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("label,optimizer,seq_len"));
    }

    #[test]
    fn profile_covers_every_block_twice() {
        let s = Session::synthetic(&ModelConfig::tiny(), 4).unwrap();
        let rows = block_profile(&s, 8, 1).unwrap();
        assert_eq!(rows.len(), 2 * s.graph.len());
        assert_eq!(rows[0].block, "emb");
        assert_eq!(rows.last().unwrap().block, "emb");
    }
}
