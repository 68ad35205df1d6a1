//! Block-wise backpropagation with spilled checkpoints and lazily
//! decompressed frozen weights, plus the whole-model reference it is checked
//! against.
//!
//! Forward: for each block `i`, decompress its weights, read checkpoint
//! `i-1`, compute and spill checkpoint `i`, release the weights. Backward, in
//! reverse: take (and evict) checkpoint `i-1`, decompress the block's weights
//! again, recompute the interior and produce the LoRA gradients and the
//! gradient for the previous block.

mod checkpoint;
mod metrics;
mod monolithic;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

pub use checkpoint::{read_spill_file, CheckpointStore, SpillPolicy};
pub use metrics::{BlockMetric, Phase, StepMetrics};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{BlockGraph, BlockSpec};
use crate::model::block::BlockKind;
use crate::model::{
    block_backward, block_forward, loss_backward_owned, AdapterGrad, LoraState, StepInput,
};
use crate::quant::QuantizedWeightStore;
use crate::tensor::tracker::{self, Category};
use crate::tensor::{ops, relative_error, Element, Tensor};

/// LoRA gradients keyed by adapter id.
#[derive(Clone, Debug)]
pub struct GradBundle<F: Element = f32> {
    grads: BTreeMap<String, AdapterGrad<F>>,
    count: u32,
    finalized: bool,
}

impl<F: Element> GradBundle<F> {
    /// Zero gradients for exactly the adapters of `lora`.
    pub fn zeros_like(lora: &LoraState<F>) -> Self {
        let grads = lora
            .iter()
            .map(|(id, ad)| {
                (
                    id.to_owned(),
                    AdapterGrad {
                        a: Tensor::zeros(ad.a.shape()),
                        b: Tensor::zeros(ad.b.shape()),
                    },
                )
            })
            .collect();
        GradBundle {
            grads,
            count: 0,
            finalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Number of inputs accumulated.
    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn get(&self, id: &str) -> Option<&AdapterGrad<F>> {
        self.grads.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AdapterGrad<F>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    fn add_block(&mut self, block: BTreeMap<String, AdapterGrad<F>>) -> Result<()> {
        for (id, g) in block {
            let acc = self
                .grads
                .get_mut(&id)
                .ok_or_else(|| Error::UnknownAdapter(id.clone()))?;
            ops::axpy(&mut acc.a, F::one(), &g.a)?;
            ops::axpy(&mut acc.b, F::one(), &g.b)?;
        }
        Ok(())
    }

    /// Divide by the accumulation count. Idempotent.
    pub fn finalize(&mut self) {
        if self.finalized || self.count <= 1 {
            self.finalized = true;
            return;
        }
        let inv = F::from_f64(1.0 / self.count as f64);
        for g in self.grads.values_mut() {
            for v in g.a.data_mut().iter_mut().chain(g.b.data_mut().iter_mut()) {
                *v = *v * inv;
            }
        }
        self.finalized = true;
    }

    /// All gradients flattened in id order (A then B per adapter).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(AdapterGrad::to_f64_vec)
            .collect()
    }

    /// Norm-wise relative error against `reference`; the id sets must match.
    pub fn relative_error<G: Element>(&self, reference: &GradBundle<G>) -> Result<f64> {
        if !self.ids().eq(reference.ids()) {
            return Err(Error::Protocol(
                "gradient bundles cover different adapters".into(),
            ));
        }
        Ok(relative_error(&self.to_f64_vec(), &reference.to_f64_vec()))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.grads.len() == other.grads.len()
            && self
                .grads
                .iter()
                .zip(&other.grads)
                .all(|((ka, a), (kb, b))| ka == kb && a.a.bitwise_eq(&b.a) && a.b.bitwise_eq(&b.b))
    }

    pub fn cast<G: Element>(&self) -> GradBundle<G> {
        GradBundle {
            grads: self
                .grads
                .iter()
                .map(|(k, g)| {
                    (
                        k.clone(),
                        AdapterGrad {
                            a: g.a.cast(),
                            b: g.b.cast(),
                        },
                    )
                })
                .collect(),
            count: self.count,
            finalized: self.finalized,
        }
    }
}

/// Result of a gradient computation.
#[derive(Debug)]
pub struct Backprop<F: Element = f32> {
    pub loss: F,
    pub grads: GradBundle<F>,
    pub metrics: StepMetrics,
}

/// Loss and next-token accuracy of one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutput {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

fn load_weights<F: Element>(
    store: &QuantizedWeightStore,
    spec: &BlockSpec,
) -> Result<(BTreeMap<String, Tensor<F>>, Duration, u64)> {
    if spec.frozen.is_empty() {
        return Ok((BTreeMap::new(), Duration::ZERO, 0));
    }
    let bw = store.load_tensors(&spec.frozen)?;
    let bytes = bw.bytes();
    let start = Instant::now();
    let w = bw
        .tensors
        .into_iter()
        .map(|(k, t)| (k, F::from_f32_tensor(t)))
        .collect();
    // Widening to an oracle precision counts as part of decompression.
    Ok((w, bw.decompress_time + start.elapsed(), bytes))
}

fn check_input(graph: &BlockGraph, input: &StepInput) -> Result<()> {
    let t = input.seq_len();
    if t == 0 || t > graph.config.max_seq_len {
        return Err(Error::dim(
            "step",
            format!(
                "sequence length {t} outside 1..={}",
                graph.config.max_seq_len
            ),
        ));
    }
    if input.targets.len() != t {
        return Err(Error::dim("step", "targets and tokens differ in length"));
    }
    Ok(())
}

fn finite_loss<F: Element>(loss: F) -> Result<F> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("loss is {}", loss.as_f64())))
    }
}

fn peak_since(report_peak: u64, base: u64) -> u64 {
    report_peak.saturating_sub(base)
}

/// Gradients of one sequence accumulated into `bundle`; returns the loss.
fn mebp_into<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    ckpts: &mut CheckpointStore<F>,
    input: &StepInput,
    bundle: &mut GradBundle<F>,
    m: &mut StepMetrics,
) -> Result<F> {
    let cfg = &graph.config;
    let step_base = tracker::live_bytes();
    ckpts.clear();
    ckpts.put(0, &input.token_tensor())?;

    let mut loss = None;
    let fwd_start = Instant::now();
    for spec in graph.iter() {
        let t0 = Instant::now();
        let (res, rep) = tracker::measure(&spec.name, || -> Result<_> {
            let (w, dt, wb) = load_weights::<F>(store, spec)?;
            let x = ckpts.get(spec.index - 1)?;
            let y = block_forward(spec.kind, cfg, &w, lora, &x, input)?;
            Ok((y, dt, wb))
        });
        let (y, dt, wb) = res?;
        if spec.kind == BlockKind::Loss {
            loss = Some(finite_loss(y.data()[0])?);
        } else {
            ckpts.put(spec.index, &y)?;
        }
        drop(y);
        m.push_block(
            &spec.name,
            Phase::Forward,
            t0.elapsed(),
            peak_since(rep.peak_bytes, step_base),
            dt,
            wb,
        );
    }
    m.forward_time_s += fwd_start.elapsed().as_secs_f64();
    m.forward_passes += 1;

    let bwd_start = Instant::now();
    let mut upstream: Option<Tensor<F>> = None;
    for spec in graph.iter().rev() {
        let t0 = Instant::now();
        let (res, rep) = tracker::measure(&spec.name, || -> Result<_> {
            let x = ckpts.take(spec.index - 1)?;
            if spec.kind == BlockKind::Loss && upstream.is_none() {
                upstream = loss_backward_owned(x, input)?.input_grad;
                return Ok((Duration::ZERO, 0));
            }
            // Token ids carry no gradient; without adapters the embedding
            // backward needs no weights.
            let skip = spec.kind == BlockKind::Embedding && spec.adapters.is_empty();
            let (w, dt, wb) = if skip {
                (BTreeMap::new(), Duration::ZERO, 0)
            } else {
                load_weights::<F>(store, spec)?
            };
            let g = block_backward(spec.kind, cfg, &w, lora, &x, upstream.as_ref(), input)?;
            drop(w);
            drop(x);
            bundle.add_block(g.lora)?;
            upstream = g.input_grad;
            Ok((dt, wb))
        });
        let (dt, wb) = res?;
        m.checkpoint_counts.push(ckpts.len());
        m.push_block(
            &spec.name,
            Phase::Backward,
            t0.elapsed(),
            peak_since(rep.peak_bytes, step_base),
            dt,
            wb,
        );
    }
    m.backward_time_s += bwd_start.elapsed().as_secs_f64();
    loss.ok_or_else(|| Error::GraphStructure("graph has no loss block".into()))
}

fn with_step_scope<F: Element, R>(
    label: &str,
    ckpts: &mut CheckpointStore<F>,
    m: &mut StepMetrics,
    f: impl FnOnce(&mut CheckpointStore<F>, &mut StepMetrics) -> Result<R>,
) -> Result<R> {
    let frozen_base = tracker::live_bytes_in(Category::FrozenWeight);
    let start = Instant::now();
    let (res, rep) = tracker::measure(label, || f(ckpts, m));
    ckpts.clear();
    m.step_time_s = start.elapsed().as_secs_f64();
    m.peak_heap_bytes = rep.high_water;
    m.frozen_weight_peak = rep.frozen_weight_peak.saturating_sub(frozen_base);
    res
}

/// One exact gradient of the mean next-token loss of `input`.
///
/// `lora` is never mutated; a failure leaves no checkpoint files behind.
pub fn mebp_backprop<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    ckpts: &mut CheckpointStore<F>,
    input: &StepInput,
) -> Result<Backprop<F>> {
    graph_accumulate(graph, store, lora, ckpts, std::slice::from_ref(input))
}

/// Mean gradient over `inputs`, one sequence at a time.
pub fn grad_accumulate<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    ckpts: &mut CheckpointStore<F>,
    inputs: &[StepInput],
) -> Result<Backprop<F>> {
    graph_accumulate(graph, store, lora, ckpts, inputs)
}

fn graph_accumulate<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    ckpts: &mut CheckpointStore<F>,
    inputs: &[StepInput],
) -> Result<Backprop<F>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::dim("grad_accumulate", "no inputs"))?;
    for x in inputs {
        check_input(graph, x)?;
        if x.seq_len() != first.seq_len() {
            return Err(Error::dim(
                "grad_accumulate",
                format!("sequence lengths {} and {}", first.seq_len(), x.seq_len()),
            ));
        }
    }
    graph.validate_lora(lora)?;
    let mut m = StepMetrics::default();
    let (loss, grads) = with_step_scope("mebp_step", ckpts, &mut m, |ckpts, m| {
        let mut bundle = GradBundle::zeros_like(lora);
        let mut total = 0.0f64;
        for x in inputs {
            total += mebp_into(graph, store, lora, ckpts, x, &mut bundle, m)?.as_f64();
            bundle.count += 1;
        }
        bundle.finalize();
        Ok((F::from_f64(total / inputs.len() as f64), bundle))
    })?;
    if inputs.len() > 1 {
        // Per-block rows of the first input describe the step shape; the
        // rest only add up.
        let n = graph.len();
        let keep: Vec<_> = m.per_block.iter().take(2 * n).cloned().collect();
        m.per_block = keep;
        m.checkpoint_counts.truncate(n);
    }
    Ok(Backprop {
        loss,
        grads,
        metrics: m,
    })
}

/// Forward-only evaluation, block by block, holding one activation at a time.
fn forward_blocks<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    input: &StepInput,
    m: &mut StepMetrics,
    want_accuracy: bool,
) -> Result<EvalOutput> {
    check_input(graph, input)?;
    let cfg = &graph.config;
    let step_base = tracker::live_bytes();
    let mut x = input.token_tensor::<F>();
    let mut correct = 0;
    let mut loss = None;
    let start = Instant::now();
    for spec in graph.iter() {
        let t0 = Instant::now();
        let (res, rep) = tracker::measure(&spec.name, || -> Result<_> {
            let (w, dt, wb) = load_weights::<F>(store, spec)?;
            let y = block_forward(spec.kind, cfg, &w, lora, &x, input)?;
            Ok((y, dt, wb))
        });
        let (y, dt, wb) = res?;
        if spec.kind == BlockKind::FinalLinear && want_accuracy {
            correct = ops::argmax_rows(&y)
                .iter()
                .zip(&input.targets)
                .filter(|(p, t)| p == t)
                .count();
        }
        if spec.kind == BlockKind::Loss {
            loss = Some(finite_loss(y.data()[0])?);
        }
        x = y;
        m.push_block(
            &spec.name,
            Phase::Forward,
            t0.elapsed(),
            peak_since(rep.peak_bytes, step_base),
            dt,
            wb,
        );
    }
    m.forward_time_s += start.elapsed().as_secs_f64();
    m.forward_passes += 1;
    let loss = loss.ok_or_else(|| Error::GraphStructure("graph has no loss block".into()))?;
    Ok(EvalOutput {
        loss: loss.as_f64(),
        correct,
        total: input.seq_len(),
    })
}

/// Loss of one sequence without gradients, the zeroth-order building block.
pub fn forward_loss<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    input: &StepInput,
) -> Result<(F, StepMetrics)> {
    let mut m = StepMetrics::default();
    let frozen_base = tracker::live_bytes_in(Category::FrozenWeight);
    let start = Instant::now();
    let (res, rep) = tracker::measure("forward", || {
        forward_blocks(graph, store, lora, input, &mut m, false)
    });
    m.step_time_s = start.elapsed().as_secs_f64();
    m.peak_heap_bytes = rep.high_water;
    m.frozen_weight_peak = rep.frozen_weight_peak.saturating_sub(frozen_base);
    Ok((F::from_f64(res?.loss), m))
}

/// Loss and next-token accuracy of one sequence.
pub fn evaluate<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    input: &StepInput,
) -> Result<EvalOutput> {
    let mut m = StepMetrics::default();
    forward_blocks(graph, store, lora, input, &mut m, true)
}

/// Reference gradients: the whole model on one tape, all weights resident.
pub fn monolithic_backprop<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    input: &StepInput,
) -> Result<Backprop<F>> {
    check_input(graph, input)?;
    graph.validate_lora(lora)?;
    let mut m = StepMetrics::default();
    let start = Instant::now();
    let (res, rep) = tracker::measure("monolithic_step", || -> Result<_> {
        let mut weights = BTreeMap::new();
        for spec in graph.iter() {
            let (w, dt, _) = load_weights::<F>(store, spec)?;
            m.decompress_time_s += dt.as_secs_f64();
            weights.extend(w);
        }
        let mut tape = Tape::new();
        let model = monolithic::build(&mut tape, &graph.config, weights, lora, input)?;
        let loss = finite_loss(tape.value(model.loss).data()[0])?;
        let mut g = tape.backward(model.loss)?;
        let mut bundle = GradBundle::zeros_like(lora);
        for (id, (a, b)) in &model.adapters {
            let acc = bundle.grads.get_mut(id).expect("same adapter set");
            if let Some(ga) = g.take(*a) {
                acc.a = ga;
            }
            if let Some(gb) = g.take(*b) {
                acc.b = gb;
            }
        }
        bundle.count = 1;
        bundle.finalize();
        Ok((loss, bundle))
    });
    m.step_time_s = start.elapsed().as_secs_f64();
    m.peak_heap_bytes = rep.high_water;
    m.frozen_weight_peak = rep.frozen_weight_peak;
    m.forward_passes = 1;
    let (loss, grads) = res?;
    Ok(Backprop {
        loss,
        grads,
        metrics: m,
    })
}

/// Loss of the whole model recorded on a tape (no gradient), for checking
/// that block composition reproduces the single-graph forward.
pub fn monolithic_loss<F: Element>(
    graph: &BlockGraph,
    store: &QuantizedWeightStore,
    lora: &LoraState<F>,
    input: &StepInput,
) -> Result<F> {
    check_input(graph, input)?;
    let mut weights = BTreeMap::new();
    for spec in graph.iter() {
        weights.extend(load_weights::<F>(store, spec)?.0);
    }
    let mut tape = Tape::new();
    let model = monolithic::build(&mut tape, &graph.config, weights, lora, input)?;
    Ok(tape.value(model.loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_frozen_weights, LoraInit, ModelConfig};
    use crate::quant::write_store;

    struct Fixture {
        _dir: tempfile::TempDir,
        graph: BlockGraph,
        store: QuantizedWeightStore,
        lora: LoraState<f32>,
    }

    fn fixture(cfg: ModelConfig, seed: u64) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mebp");
        write_store(
            &init_frozen_weights(&cfg, seed).unwrap(),
            cfg.group_size,
            &path,
        )
        .unwrap();
        let store = QuantizedWeightStore::open(&path).unwrap();
        let graph = BlockGraph::compile(&cfg).unwrap();
        graph.validate_store(&store).unwrap();
        let lora = LoraState::new(
            &cfg,
            seed,
            LoraInit {
                a_std: None,
                b_std: 0.1,
            },
        )
        .unwrap();
        Fixture {
            _dir: dir,
            graph,
            store,
            lora,
        }
    }

    fn seq(n: usize, seed: u64, vocab: usize) -> StepInput {
        let mut rng = crate::tensor::Rng::new(seed, 9);
        let toks: Vec<u32> = (0..=n).map(|_| rng.below(vocab) as u32).collect();
        StepInput::from_sequence(&toks).unwrap()
    }

    #[test]
    fn mebp_matches_monolithic_f64() {
        let f = fixture(ModelConfig::tiny(), 1);
        let lora = f.lora.cast::<f64>();
        let x = seq(8, 1, 32);
        let mut ck = CheckpointStore::<f64>::in_memory();
        let a = mebp_backprop(&f.graph, &f.store, &lora, &mut ck, &x).unwrap();
        let b = monolithic_backprop(&f.graph, &f.store, &lora, &x).unwrap();
        assert_eq!(a.loss, b.loss);
        let err = a.grads.relative_error(&b.grads).unwrap();
        assert!(err <= 1e-10, "rel err {err}");
    }

    #[test]
    fn eviction_and_cleanup() {
        let f = fixture(ModelConfig::tiny(), 2);
        let x = seq(6, 2, 32);
        let mut ck = CheckpointStore::<f32>::mmap_spill(None).unwrap();
        let out = mebp_backprop(&f.graph, &f.store, &f.lora, &mut ck, &x).unwrap();
        let n = f.graph.len();
        let expected: Vec<usize> = (0..n).rev().collect();
        assert_eq!(out.metrics.checkpoint_counts, expected);
        assert_eq!(ck.spill_files(), 0);
        assert_eq!(out.grads.len(), f.lora.len());
        assert_eq!(out.metrics.per_block.len(), 2 * n);
    }

    #[test]
    fn block_composition_equals_single_graph_forward() {
        crate::tensor::set_deterministic(true);
        let f = fixture(ModelConfig::tiny(), 3);
        let x = seq(7, 3, 32);
        let (l1, _) = forward_loss(&f.graph, &f.store, &f.lora, &x).unwrap();
        let l2 = monolithic_loss(&f.graph, &f.store, &f.lora, &x).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn empty_target_set_gives_empty_bundle() {
        let mut cfg = ModelConfig::tiny();
        cfg.lora_targets.clear();
        let f = fixture(cfg, 4);
        let x = seq(5, 4, 32);
        let mut ck = CheckpointStore::<f32>::in_memory();
        let out = mebp_backprop(&f.graph, &f.store, &f.lora, &mut ck, &x).unwrap();
        assert!(out.grads.is_empty());
        assert!(out.loss.is_finite() && out.loss > 0.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let f = fixture(ModelConfig::tiny(), 5);
        let mut ck = CheckpointStore::<f32>::in_memory();
        let xs = [seq(5, 1, 32), seq(6, 2, 32)];
        assert!(grad_accumulate(&f.graph, &f.store, &f.lora, &mut ck, &xs).is_err());
        assert!(grad_accumulate(&f.graph, &f.store, &f.lora, &mut ck, &[]).is_err());
    }

    #[test]
    fn evaluate_counts_tokens() {
        let f = fixture(ModelConfig::tiny(), 6);
        let x = seq(9, 6, 32);
        let e = evaluate(&f.graph, &f.store, &f.lora, &x).unwrap();
        assert_eq!(e.total, 9);
        assert!(e.correct <= 9);
        let (l, m) = forward_loss(&f.graph, &f.store, &f.lora, &x).unwrap();
        assert_eq!(l as f64, e.loss);
        assert_eq!(m.forward_passes, 1);
    }
}
