use std::fmt;
use std::time::Duration;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    #[serde(rename = "f")]
    Forward,
    #[serde(rename = "b")]
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "f",
            Phase::Backward => "b",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockMetric {
    pub block: String,
    pub phase: Phase,
    pub time_s: f64,
    /// Tracked-byte peak while the block ran, relative to the step baseline.
    pub peak_bytes: u64,
    pub decompress_time_s: f64,
    pub weight_bytes: u64,
}

/// Instrumentation for one gradient (or ZO) step.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step_time_s: f64,
    pub peak_heap_bytes: u64,
    pub decompress_time_s: f64,
    pub forward_time_s: f64,
    pub backward_time_s: f64,
    pub forward_decompress_s: f64,
    pub backward_decompress_s: f64,
    /// Peak decompressed frozen-weight bytes resident at once.
    pub frozen_weight_peak: u64,
    pub per_block: Vec<BlockMetric>,
    pub forward_passes: u32,
    /// Checkpoint entries left after each backward block, in execution order.
    pub checkpoint_counts: Vec<usize>,
}

impl StepMetrics {
    pub(crate) fn push_block(
        &mut self,
        block: &str,
        phase: Phase,
        time: Duration,
        peak_bytes: u64,
        decompress: Duration,
        weight_bytes: u64,
    ) {
        let (t, d) = (time.as_secs_f64(), decompress.as_secs_f64());
        match phase {
            Phase::Forward => self.forward_decompress_s += d,
            Phase::Backward => self.backward_decompress_s += d,
        }
        self.decompress_time_s += d;
        self.per_block.push(BlockMetric {
            block: block.to_owned(),
            phase,
            time_s: t,
            peak_bytes,
            decompress_time_s: d,
            weight_bytes,
        });
    }

    /// Share of a phase's wall time spent decompressing weights.
    pub fn decompress_ratio(&self, phase: Phase) -> f64 {
        let (d, t) = match phase {
            Phase::Forward => (self.forward_decompress_s, self.forward_time_s),
            Phase::Backward => (self.backward_decompress_s, self.backward_time_s),
        };
        if t > 0.0 {
            d / t
        } else {
            0.0
        }
    }

    pub fn block(&self, name: &str, phase: Phase) -> Option<&BlockMetric> {
        self.per_block
            .iter()
            .find(|b| b.block == name && b.phase == phase)
    }

    /// Sum of per-block times for one phase.
    pub fn phase_block_time(&self, phase: Phase) -> f64 {
        self.per_block
            .iter()
            .filter(|b| b.phase == phase)
            .map(|b| b.time_s)
            .sum()
    }

    /// Fold another step's metrics into this one (times and counts add,
    /// peaks take the maximum). Per-block rows are kept from `self`.
    pub fn absorb(&mut self, other: &StepMetrics) {
        self.step_time_s += other.step_time_s;
        self.peak_heap_bytes = self.peak_heap_bytes.max(other.peak_heap_bytes);
        self.decompress_time_s += other.decompress_time_s;
        self.forward_time_s += other.forward_time_s;
        self.backward_time_s += other.backward_time_s;
        self.forward_decompress_s += other.forward_decompress_s;
        self.backward_decompress_s += other.backward_decompress_s;
        self.frozen_weight_peak = self.frozen_weight_peak.max(other.frozen_weight_peak);
        self.forward_passes += other.forward_passes;
    }
}
