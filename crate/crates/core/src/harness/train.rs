use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::BlockGraph;
use crate::model::{init_frozen_weights, LoraAdapter, LoraInit, LoraState, ModelConfig, StepInput};
use crate::optim::{adamw_step, zo_step, AdamWConfig, AdamWState, ZoConfig, ZoUpdate, ZoVariant};
use crate::quant::{write_entries, write_store, QuantizedWeightStore, StoreTensor};
use crate::runtime::{
    evaluate, forward_loss, grad_accumulate, CheckpointStore, SpillPolicy, StepMetrics,
};
use crate::tensor::{self, tracker, Rng};

/// A compiled graph bound to a validated weight store.
#[derive(Debug)]
pub struct Session {
    pub graph: BlockGraph,
    pub store: QuantizedWeightStore,
    _dir: Option<tempfile::TempDir>,
}

impl Session {
    /// Bind a graph to a store, checking every tensor reference up front.
    pub fn new(graph: BlockGraph, store: QuantizedWeightStore) -> Result<Self> {
        graph.validate()?;
        graph.validate_store(&store)?;
        Ok(Session {
            graph,
            store,
            _dir: None,
        })
    }

    pub fn open(store_path: &Path, manifest_path: &Path) -> Result<Self> {
        let graph = BlockGraph::deserialize_manifest(manifest_path)?;
        Self::new(graph, QuantizedWeightStore::open(store_path)?)
    }

    /// Seeded random frozen weights quantized into a private temporary store.
    pub fn synthetic(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("weights.mebp");
        prepare_weights(cfg, seed, &path)?;
        let mut s = Self::new(
            BlockGraph::compile(cfg)?,
            QuantizedWeightStore::open(&path)?,
        )?;
        s._dir = Some(dir);
        Ok(s)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.graph.config
    }
}

/// Initialise frozen weights from `seed`, quantize them and write the store.
pub fn prepare_weights(cfg: &ModelConfig, seed: u64, path: &Path) -> Result<()> {
    write_store(&init_frozen_weights(cfg, seed)?, cfg.group_size, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// First-order: block-wise backprop and AdamW.
    Fo,
    Mezo,
    Kzoo,
    Fzoo,
}

impl OptimizerKind {
    pub fn zo_variant(self) -> Option<ZoVariant> {
        match self {
            OptimizerKind::Fo => None,
            OptimizerKind::Mezo => Some(ZoVariant::Mezo),
            OptimizerKind::Kzoo => Some(ZoVariant::Kzoo),
            OptimizerKind::Fzoo => Some(ZoVariant::Fzoo),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Fo => "fo",
            OptimizerKind::Mezo => "mezo",
            OptimizerKind::Kzoo => "kzoo",
            OptimizerKind::Fzoo => "fzoo",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fo" => Ok(OptimizerKind::Fo),
            "mezo" => Ok(OptimizerKind::Mezo),
            "kzoo" => Ok(OptimizerKind::Kzoo),
            "fzoo" => Ok(OptimizerKind::Fzoo),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub optimizer: OptimizerKind,
    pub steps: u64,
    pub seq_len: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at start and end.
    pub eval_every: u64,
    pub out_dir: Option<PathBuf>,
    pub lr: f64,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Sequences per optimizer step (gradient accumulation for FO).
    pub batch: usize,
    pub zo_epsilon: f64,
    /// Defaults per variant when `None`.
    pub zo_estimates: Option<u32>,
    pub spill: SpillPolicy,
    pub deterministic: bool,
    /// Standard deviation of the initial B factors; 0 starts from the base model.
    pub lora_b_std: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            optimizer: OptimizerKind::Fo,
            steps: 100,
            seq_len: 64,
            seed: 0,
            eval_every: 0,
            out_dir: None,
            lr: 1e-3,
            warmup_steps: 0,
            weight_decay: 0.0,
            batch: 1,
            zo_epsilon: 1e-3,
            zo_estimates: None,
            spill: SpillPolicy::MmapSpill,
            deterministic: false,
            lora_b_std: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.seq_len > model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} outside 1..={}",
                self.seq_len, model.max_seq_len
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if let Some(z) = self.zo_config() {
            z.validate()?;
        }
        Ok(())
    }

    pub fn zo_config(&self) -> Option<ZoConfig> {
        self.optimizer.zo_variant().map(|v| {
            let mut c = ZoConfig::new(v, self.zo_epsilon, self.seed);
            if let Some(k) = self.zo_estimates {
                c.n_estimates = k;
            }
            c
        })
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub step_time_s: f64,
    pub peak_heap_bytes: u64,
    pub decompress_time_s: f64,
    pub forward_passes: u32,
    #[serde(skip)]
    pub metrics: StepMetrics,
}

/// One row of the loss-curve CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub eval_loss: f64,
    pub next_token_acc: f64,
}

/// Owns the trainable state for one run.
pub struct Trainer<'s> {
    session: &'s Session,
    run: RunConfig,
    pub lora: LoraState<f32>,
    adamw: AdamWState,
    zo: Option<(ZoConfig, ZoUpdate)>,
    ckpts: CheckpointStore<f32>,
}

impl<'s> Trainer<'s> {
    pub fn new(session: &'s Session, run: RunConfig) -> Result<Self> {
        run.validate(session.config())?;
        if run.deterministic {
            tensor::set_deterministic(true);
        }
        let lora = LoraState::new(
            session.config(),
            run.seed,
            LoraInit {
                a_std: None,
                b_std: run.lora_b_std,
            },
        )?;
        session.graph.validate_lora(&lora)?;
        let ckpts = CheckpointStore::new(run.spill)?;
        let zo = run
            .zo_config()
            .map(|c| (c, ZoUpdate::AdamW(AdamWState::new(run.adamw()))));
        Ok(Trainer {
            session,
            adamw: AdamWState::new(run.adamw()),
            run,
            lora,
            zo,
            ckpts,
        })
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn checkpoints(&self) -> &CheckpointStore<f32> {
        &self.ckpts
    }

    /// Swap the spill store, e.g. to point it at a specific directory.
    pub fn set_checkpoint_store(&mut self, ckpts: CheckpointStore<f32>) {
        self.ckpts = ckpts;
    }

    /// One optimizer step over `inputs` (mean loss; gradient accumulation for FO).
    pub fn step(&mut self, inputs: &[StepInput]) -> Result<StepRecord> {
        let g = &self.session.graph;
        let store = &self.session.store;
        let step_no = self.lora.step + 1;
        let lr = self.run.lr_at(step_no);
        self.adamw.hyper.lr = lr;
        if let Some((_, ZoUpdate::AdamW(st))) = &mut self.zo {
            st.hyper.lr = lr;
        }
        let start = Instant::now();
        let (res, rep) = tracker::measure("train_step", || -> Result<(f64, StepMetrics)> {
            match &mut self.zo {
                None => {
                    let bp = grad_accumulate(g, store, &self.lora, &mut self.ckpts, inputs)?;
                    adamw_step(&mut self.lora, &mut self.adamw, &bp.grads)?;
                    Ok((bp.loss as f64, bp.metrics))
                }
                Some((cfg, update)) => {
                    let mut m = StepMetrics::default();
                    let mut first = true;
                    let out = zo_step(
                        cfg,
                        &mut self.lora,
                        |p: &LoraState<f32>| {
                            let mut total = 0.0;
                            for x in inputs {
                                let (l, fm) = forward_loss(g, store, p, x)?;
                                total += l as f64;
                                if first {
                                    m.per_block = fm.per_block.clone();
                                    first = false;
                                }
                                m.absorb(&fm);
                            }
                            Ok(total / inputs.len() as f64)
                        },
                        update,
                        step_no - 1,
                    )?;
                    if out.skipped {
                        return Err(Error::Numeric(format!(
                            "non-finite zeroth-order loss at step {step_no}"
                        )));
                    }
                    m.forward_passes = out.forward_passes;
                    Ok((out.loss, m))
                }
            }
        });
        let (loss, mut metrics) = res?;
        metrics.step_time_s = start.elapsed().as_secs_f64();
        metrics.peak_heap_bytes = rep.high_water;
        Ok(StepRecord {
            step: step_no,
            loss,
            step_time_s: metrics.step_time_s,
            peak_heap_bytes: metrics.peak_heap_bytes,
            decompress_time_s: metrics.decompress_time_s,
            forward_passes: metrics.forward_passes,
            metrics,
        })
    }

    /// Mean loss and next-token accuracy over `inputs`.
    pub fn evaluate(&self, inputs: &[StepInput]) -> Result<EvalRecord> {
        let (loss, acc) = eval_lora(self.session, &self.lora, inputs)?;
        Ok(EvalRecord {
            step: self.lora.step,
            eval_loss: loss,
            next_token_acc: acc,
        })
    }
}

/// Mean loss and next-token accuracy of `lora` over `inputs`.
pub fn eval_lora(
    session: &Session,
    lora: &LoraState<f32>,
    inputs: &[StepInput],
) -> Result<(f64, f64)> {
    if inputs.is_empty() {
        return Err(Error::Sizing("no evaluation sequences".into()));
    }
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for x in inputs {
        let e = evaluate(&session.graph, &session.store, lora, x)?;
        loss += e.loss;
        correct += e.correct;
        total += e.total;
    }
    Ok((loss / inputs.len() as f64, correct as f64 / total as f64))
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunArtifacts {
    pub steps: Vec<StepRecord>,
    pub curve: Vec<EvalRecord>,
    pub lora: LoraState<f32>,
}

struct Sinks {
    metrics: csv::Writer<File>,
    curve: csv::Writer<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Sinks {
            metrics: csv::Writer::from_path(dir.join("metrics.csv"))?,
            curve: csv::Writer::from_path(dir.join("loss_curve.csv"))?,
        })
    }
}

/// Train for `run.steps` steps on `corpus`, writing CSVs (flushed per row)
/// and the final adapters when `run.out_dir` is set.
pub fn train(session: &Session, run: &RunConfig, corpus: &Corpus) -> Result<RunArtifacts> {
    if corpus.seq_len != run.seq_len {
        return Err(Error::Config(format!(
            "corpus windows are {} tokens, run wants {}",
            corpus.seq_len, run.seq_len
        )));
    }
    if corpus.vocab_size > session.config().vocab_size {
        return Err(Error::Config(
            "corpus vocabulary exceeds the model's".into(),
        ));
    }
    if corpus.train.is_empty() {
        return Err(Error::Sizing("no training sequences".into()));
    }
    let mut trainer = Trainer::new(session, run.clone())?;
    let mut sinks = run.out_dir.as_deref().map(Sinks::open).transpose()?;
    let eval_set = corpus.eval_inputs();
    let mut steps = Vec::with_capacity(run.steps as usize);
    let mut curve = Vec::new();

    let mut order = Vec::new();
    let mut eval_now = |trainer: &Trainer<'_>, sinks: &mut Option<Sinks>| -> Result<()> {
        if eval_set.is_empty() {
            return Ok(());
        }
        let rec = trainer.evaluate(&eval_set)?;
        if let Some(s) = sinks {
            s.curve.serialize(rec)?;
            s.curve.flush()?;
        }
        curve.push(rec);
        Ok(())
    };
    eval_now(&trainer, &mut sinks)?;
    let mut cursor = 0usize;
    for s in 0..run.steps {
        let mut batch = Vec::with_capacity(run.batch);
        for _ in 0..run.batch {
            if cursor.is_multiple_of(corpus.train.len()) {
                order = (0..corpus.train.len()).collect();
                Rng::new(run.seed, 0x6f72_6465 + (cursor / corpus.train.len()) as u64)
                    .shuffle(&mut order);
            }
            batch.push(corpus.train_input(order[cursor % corpus.train.len()]));
            cursor += 1;
        }
        let rec = trainer.step(&batch)?;
        if let Some(sk) = &mut sinks {
            sk.metrics.serialize(&rec)?;
            sk.metrics.flush()?;
        }
        steps.push(rec);
        let done = s + 1;
        if run.eval_every > 0 && done % run.eval_every == 0 && done != run.steps {
            eval_now(&trainer, &mut sinks)?;
        }
    }
    if run.steps > 0 {
        eval_now(&trainer, &mut sinks)?;
    }
    if let Some(dir) = &run.out_dir {
        save_adapters(&trainer.lora, &dir.join("adapters.mebp"))?;
        std::fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(run)? + "\n",
        )?;
    }
    Ok(RunArtifacts {
        steps,
        curve,
        lora: trainer.lora,
    })
}

/// Final evaluation of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lr: f64,
    pub zo_epsilon: f64,
    pub eval_loss: f64,
    pub next_token_acc: f64,
    pub diverged: bool,
}

/// Train once per `(lr, epsilon)` pair, best first. Epsilons are ignored for
/// FO. A run that hits a non-finite loss is kept as a diverged row with
/// infinite loss. With `base.out_dir` set, each point gets its own
/// subdirectory and the table goes to `sweep.csv`.
pub fn sweep(
    session: &Session,
    base: &RunConfig,
    corpus: &Corpus,
    lrs: &[f64],
    epsilons: &[f64],
) -> Result<Vec<SweepRow>> {
    let eps: Vec<f64> = if base.optimizer == OptimizerKind::Fo || epsilons.is_empty() {
        vec![base.zo_epsilon]
    } else {
        epsilons.to_vec()
    };
    if lrs.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    let mut rows = Vec::with_capacity(lrs.len() * eps.len());
    for &lr in lrs {
        for &e in &eps {
            let mut rc = RunConfig {
                lr,
                zo_epsilon: e,
                ..base.clone()
            };
            if let Some(dir) = &base.out_dir {
                rc.out_dir = Some(dir.join(if base.optimizer == OptimizerKind::Fo {
                    format!("lr{lr:e}")
                } else {
                    format!("lr{lr:e}_eps{e:e}")
                }));
            }
            let row = match train(session, &rc, corpus) {
                Ok(art) => {
                    let last = art.curve.last().copied().unwrap_or(EvalRecord {
                        step: 0,
                        eval_loss: f64::INFINITY,
                        next_token_acc: 0.0,
                    });
                    SweepRow {
                        lr,
                        zo_epsilon: e,
                        eval_loss: last.eval_loss,
                        next_token_acc: last.next_token_acc,
                        diverged: false,
                    }
                }
                Err(Error::Numeric(_) | Error::NonFinite { .. }) => SweepRow {
                    lr,
                    zo_epsilon: e,
                    eval_loss: f64::INFINITY,
                    next_token_acc: 0.0,
                    diverged: true,
                },
                Err(other) => return Err(other),
            };
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| a.eval_loss.total_cmp(&b.eval_loss));
    if let Some(dir) = &base.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Write adapters unquantized, as `{id}.a` / `{id}.b`, in the store format.
pub fn save_adapters(lora: &LoraState<f32>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(2 * lora.len());
    for (id, ad) in lora.iter() {
        entries.push(StoreTensor::Raw {
            name: format!("{id}.a"),
            tensor: ad.a.clone(),
        });
        entries.push(StoreTensor::Raw {
            name: format!("{id}.b"),
            tensor: ad.b.clone(),
        });
    }
    write_entries(&entries, path)
}

/// Read adapters written by [`save_adapters`] for the adapter set of `cfg`.
pub fn load_adapters(cfg: &ModelConfig, path: &Path) -> Result<LoraState<f32>> {
    let store = QuantizedWeightStore::open(path)?;
    let mut adapters = std::collections::BTreeMap::new();
    for (id, d_out, d_in) in cfg.adapters() {
        let a = store
            .load_tensor(&format!("{id}.a"))?
            .with_category(tracker::Category::General);
        let b = store
            .load_tensor(&format!("{id}.b"))?
            .with_category(tracker::Category::General);
        if a.shape() != [cfg.lora_rank, d_in] || b.shape() != [d_out, cfg.lora_rank] {
            return Err(Error::dim("load_adapters", format!("`{id}` shape")));
        }
        adapters.insert(
            id,
            LoraAdapter {
                a,
                b,
                scaling: cfg.lora_scaling(),
            },
        );
    }
    Ok(LoraState::from_adapters(adapters))
}
