use mebp::graph::BlockGraph;
use mebp::harness::{synthetic_text, train, Corpus, OptimizerKind, RunConfig, Session, Tokenizer};
use mebp::model::{ModelConfig, Projection};
use proptest::prelude::*;

fn toy() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 64,
        lora_rank: 8,
        ..ModelConfig::default()
    }
}

fn corpus(seed: u64) -> Corpus {
    Corpus::from_text(
        &synthetic_text(seed, 40_000),
        &Tokenizer::Byte,
        32,
        128,
        16,
        seed,
    )
    .unwrap()
}

#[test]
fn fo_run_lowers_eval_loss() {
    let s = Session::synthetic(&toy(), 0).unwrap();
    let run = RunConfig {
        steps: 200,
        seq_len: 32,
        lr: 1e-2,
        eval_every: 100,
        ..RunConfig::default()
    };
    let art = train(&s, &run, &corpus(0)).unwrap();
    let (first, last) = (art.curve.first().unwrap(), art.curve.last().unwrap());
    assert_eq!(art.curve.len(), 3);
    assert!(
        last.eval_loss < first.eval_loss,
        "{} -> {}",
        first.eval_loss,
        last.eval_loss
    );
    assert!(last.next_token_acc > first.next_token_acc);
}

#[test]
fn deterministic_runs_write_identical_curves() {
    let s = Session::synthetic(&toy(), 1).unwrap();
    let c = corpus(1);
    let mut curves = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let run = RunConfig {
            steps: 20,
            seq_len: 32,
            lr: 1e-2,
            eval_every: 5,
            deterministic: true,
            out_dir: Some(dir.path().to_path_buf()),
            ..RunConfig::default()
        };
        train(&s, &run, &c).unwrap();
        curves.push(std::fs::read(dir.path().join("loss_curve.csv")).unwrap());
        curves.push(std::fs::read(dir.path().join("adapters.mebp")).unwrap());
    }
    assert_eq!(curves[0], curves[2]);
    assert_eq!(curves[1], curves[3]);
}

#[test]
fn mezo_counts_two_passes_per_step() {
    let s = Session::synthetic(&toy(), 2).unwrap();
    let run = RunConfig {
        optimizer: OptimizerKind::Mezo,
        steps: 25,
        seq_len: 32,
        ..RunConfig::default()
    };
    let art = train(&s, &run, &corpus(2)).unwrap();
    assert!(art.steps.iter().all(|r| r.forward_passes == 2));
    assert!(art
        .steps
        .iter()
        .all(|r| r.decompress_time_s <= r.step_time_s));
}

#[test]
fn failed_run_keeps_flushed_rows() {
    let s = Session::synthetic(&toy(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig {
        steps: 5,
        seq_len: 32,
        lr: 1e30,
        out_dir: Some(dir.path().to_path_buf()),
        ..RunConfig::default()
    };
    let res = train(&s, &run, &corpus(3));
    let rows = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(res.is_err(), "an absurd learning rate should overflow");
    assert!(rows.starts_with("step,loss,"));
    assert!(rows.lines().count() >= 2);
    assert!(!dir.path().join("adapters.mebp").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corpus_splits_are_disjoint_and_in_vocab(seed in any::<u64>(), t in 4usize..48, n_train in 1usize..20, n_eval in 1usize..8) {
        let text = synthetic_text(seed, (t + 1) * (n_train + n_eval) + 64);
        let c = Corpus::from_text(&text, &Tokenizer::Byte, t, n_train, n_eval, seed).unwrap();
        let mut offs = c.offsets.clone();
        offs.sort_unstable();
        for w in offs.windows(2) {
            prop_assert!(w[1] - w[0] > t);
        }
        for s in c.train.iter().chain(&c.eval) {
            prop_assert_eq!(s.len(), t + 1);
            prop_assert!(s.iter().all(|&x| (x as usize) < c.vocab_size));
        }
    }

    #[test]
    fn manifest_round_trips(layers in 1usize..6, heads in 1usize..4, rank in 1usize..9, mask in 1u8..128) {
        let cfg = ModelConfig {
            n_layers: layers,
            n_heads: heads,
            d_model: 8 * heads,
            lora_rank: rank,
            lora_targets: Projection::ALL
                .into_iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, p)| p)
                .collect(),
            ..ModelConfig::tiny()
        };
        let g = BlockGraph::compile(&cfg).unwrap();
        prop_assert_eq!(g.len(), layers + 3);
        let json = g.to_json();
        let back = BlockGraph::from_json(&json).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json(), json);
    }
}
