#![allow(dead_code)]

use mebp::harness::{random_input, Session};
use mebp::model::{LoraInit, LoraState, ModelConfig, StepInput};
use mebp::runtime::monolithic_loss;

/// A 2 to 4 layer toy model with non-trivial adapters and a random sequence.
pub struct Fixture {
    pub cfg: ModelConfig,
    pub session: Session,
    pub lora: LoraState<f32>,
    pub input: StepInput,
}

pub fn fixture(seed: u64) -> Fixture {
    let cfg = ModelConfig {
        n_layers: 2 + (seed % 3) as usize,
        ..ModelConfig::tiny()
    };
    let session = Session::synthetic(&cfg, seed).unwrap();
    let lora = LoraState::new(
        &cfg,
        seed ^ 0x9e37,
        LoraInit {
            a_std: None,
            b_std: 0.1,
        },
    )
    .unwrap();
    let input = random_input(cfg.vocab_size, 5 + (seed % 6) as usize, seed);
    Fixture {
        cfg,
        session,
        lora,
        input,
    }
}

/// Central finite differences of the monolithic f64 loss with respect to
/// every adapter parameter, in gradient-bundle order (id, then A, then B).
pub fn fd_gradient(f: &Fixture, h: f64) -> Vec<f64> {
    let base = f.lora.cast::<f64>();
    let loss = |l: &LoraState<f64>| {
        monolithic_loss(&f.session.graph, &f.session.store, l, &f.input).unwrap()
    };
    let ids: Vec<String> = base.ids().map(str::to_owned).collect();
    let mut out = Vec::new();
    for id in &ids {
        for part in 0..2 {
            let n = {
                let ad = base.base(id).unwrap();
                if part == 0 {
                    ad.a.len()
                } else {
                    ad.b.len()
                }
            };
            for k in 0..n {
                let probe = |delta: f64| {
                    let mut l = base.clone();
                    let ad = l.base_mut(id).unwrap();
                    let t = if part == 0 { &mut ad.a } else { &mut ad.b };
                    t.data_mut()[k] += delta;
                    loss(&l)
                };
                out.push((probe(h) - probe(-h)) / (2.0 * h));
            }
        }
    }
    out
}
