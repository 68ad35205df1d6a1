use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mebp::graph::BlockGraph;
use mebp::harness::{
    bench, eval_lora, ingest, load_adapters, prepare_weights, sweep, synthetic_text, train,
    write_csv, BenchCase, Corpus, OptimizerKind, RunConfig, Session, Tokenizer,
};
use mebp::model::ModelConfig;
use mebp::runtime::SpillPolicy;

#[derive(Parser)]
#[command(
    name = "mebp",
    version,
    about = "Block-wise LoRA fine-tuning over an INT4 weight store"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Initialise frozen weights from a seed, quantize and write the store.
    PrepareWeights {
        #[command(flatten)]
        common: Common,
    },
    /// Compile the block graph and write its JSON manifest.
    Compile {
        #[command(flatten)]
        common: Common,
    },
    /// Train adapters; writes metrics.csv, loss_curve.csv and adapters.mebp.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Time optimizer steps over a sequence-length sweep.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "fo")]
        optimizer: Vec<OptimizerKind>,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "64")]
        seq_len: Vec<usize>,
        /// Timed repeats per configuration.
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Evaluate saved adapters (or the base model) on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Model config (TOML); the built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    /// Existing weight store; a seeded one is generated when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Manifest for `--weights`; compiled from the config when omitted.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "fo")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 100)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Several comma-separated values run a sweep.
    #[arg(long, value_delimiter = ',', default_value = "1e-3")]
    lr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Several comma-separated values run a sweep (ZO only).
    #[arg(long, value_delimiter = ',', default_value = "1e-3")]
    zo_epsilon: Vec<f64>,
    #[arg(long)]
    zo_estimates: Option<u32>,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    /// Keep checkpoints on the heap instead of spilling them.
    #[arg(long)]
    in_memory: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Text file; a seeded synthetic corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// One word per line; byte-level tokens when omitted.
    #[arg(long)]
    word_map: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    n_eval: usize,
}

impl Common {
    fn model(&self) -> Result<ModelConfig> {
        Ok(match &self.config {
            Some(p) => ModelConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ModelConfig::default(),
        })
    }

    fn session(&self, cfg: &ModelConfig) -> Result<Session> {
        Ok(match (&self.weights, &self.graph) {
            (Some(w), Some(g)) => Session::open(w, g)?,
            (Some(w), None) => Session::new(
                BlockGraph::compile(cfg)?,
                mebp::quant::QuantizedWeightStore::open(w)?,
            )?,
            (None, Some(_)) => bail!("--graph needs --weights"),
            (None, None) => Session::synthetic(cfg, self.seed)?,
        })
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

impl DataArgs {
    fn corpus(&self, seq_len: usize, seed: u64) -> Result<Corpus> {
        let tok = match &self.word_map {
            Some(p) => Tokenizer::word_map_from_file(p)?,
            None => Tokenizer::Byte,
        };
        Ok(match &self.corpus {
            Some(p) => ingest(p, &tok, seq_len, self.n_train, self.n_eval, seed)?,
            None => {
                let need = (seq_len + 1) * (self.n_train + self.n_eval) * 2;
                Corpus::from_text(
                    &synthetic_text(seed, need),
                    &tok,
                    seq_len,
                    self.n_train,
                    self.n_eval,
                    seed,
                )?
            }
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::PrepareWeights { common } => {
            let cfg = common.model()?;
            let out = common.out_or("weights.mebp");
            prepare_weights(&cfg, common.seed, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Compile { common } => {
            let g = BlockGraph::compile(&common.model()?)?;
            let out = common.out_or("graph.json");
            g.serialize_manifest(&out)?;
            println!("wrote {} ({} blocks)", out.display(), g.len());
        }
        Cmd::Train { common, run, data } => {
            let cfg = common.model()?;
            let session = common.session(&cfg)?;
            let corpus = data.corpus(run.seq_len, common.seed)?;
            let rc = RunConfig {
                optimizer: run.optimizer,
                steps: run.steps,
                seq_len: run.seq_len,
                seed: common.seed,
                eval_every: run.eval_every,
                out_dir: Some(common.out_or("run")),
                lr: run.lr[0],
                warmup_steps: run.warmup_steps,
                weight_decay: run.weight_decay,
                batch: run.batch,
                zo_epsilon: run.zo_epsilon[0],
                zo_estimates: run.zo_estimates,
                spill: if run.in_memory {
                    SpillPolicy::InMemory
                } else {
                    SpillPolicy::MmapSpill
                },
                deterministic: common.deterministic,
                lora_b_std: 0.0,
            };
            let grid =
                run.lr.len() > 1 || (rc.optimizer != OptimizerKind::Fo && run.zo_epsilon.len() > 1);
            if grid {
                let rows = sweep(&session, &rc, &corpus, &run.lr, &run.zo_epsilon)?;
                for r in &rows {
                    println!(
                        "lr {:e} eps {:e}: eval loss {:.4}, acc {:.3}{}",
                        r.lr,
                        r.zo_epsilon,
                        r.eval_loss,
                        r.next_token_acc,
                        if r.diverged { " (diverged)" } else { "" }
                    );
                }
                let best = &rows[0];
                println!(
                    "tuned: best of {} by lr sweep: lr {:e} eps {:e}",
                    rows.len(),
                    best.lr,
                    best.zo_epsilon
                );
            } else {
                let art = train(&session, &rc, &corpus)?;
                if let (Some(first), Some(last)) = (art.curve.first(), art.curve.last()) {
                    println!(
                        "eval loss {:.4} -> {:.4}, next-token acc {:.3} -> {:.3}",
                        first.eval_loss, last.eval_loss, first.next_token_acc, last.next_token_acc
                    );
                }
            }
            println!("artifacts in {}", rc.out_dir.unwrap().display());
        }
        Cmd::Bench {
            common,
            optimizer,
            seq_len,
            steps,
        } => {
            mebp::tensor::set_deterministic(common.deterministic);
            let cfg = common.model()?;
            let mut cases = Vec::new();
            for &opt in &optimizer {
                for &t in &seq_len {
                    let mut c = BenchCase::new(format!("{opt}-{t}"), cfg.clone(), opt, t);
                    c.seed = common.seed;
                    c.repeats = steps;
                    cases.push(c);
                }
            }
            let rows = bench(&cases)?;
            let out = common.out_or("bench.csv");
            write_csv(&rows, &out)?;
            for r in &rows {
                println!(
                    "{:<12} {:>10.4}s {:>12} B  f {:.3}  b {:.3}",
                    r.label,
                    r.step_time_mean_s,
                    r.peak_heap_bytes,
                    r.decompress_ratio_f,
                    r.decompress_ratio_b
                );
            }
        }
        Cmd::Eval {
            common,
            data,
            adapters,
            seq_len,
        } => {
            let cfg = common.model()?;
            let session = common.session(&cfg)?;
            let lora = match &adapters {
                Some(p) => load_adapters(&cfg, p)?,
                None => mebp::model::LoraState::new(&cfg, common.seed, Default::default())?,
            };
            let corpus = data.corpus(seq_len, common.seed)?;
            let (loss, acc) = eval_lora(&session, &lora, &corpus.eval_inputs())?;
            let line = format!("eval_loss,next_token_acc\n{loss},{acc}\n");
            match &common.out {
                Some(p) => write_text(p, &line)?,
                None => print!("{line}"),
            }
        }
    }
    Ok(())
}
