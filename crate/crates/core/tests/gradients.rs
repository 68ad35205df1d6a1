mod common;

use common::{fd_gradient, fixture};
use mebp::harness::random_input;
use mebp::runtime::{
    grad_accumulate, mebp_backprop, monolithic_backprop, CheckpointStore, GradBundle,
};
use mebp::tensor::relative_error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blockwise_matches_monolithic(seed in any::<u64>()) {
        let f = fixture(seed);
        let (g, s) = (&f.session.graph, &f.session.store);

        let mut ck = CheckpointStore::in_memory();
        let mb = mebp_backprop(g, s, &f.lora, &mut ck, &f.input).unwrap();
        let mono = monolithic_backprop(g, s, &f.lora, &f.input).unwrap();
        prop_assert!(mb.grads.relative_error(&mono.grads).unwrap() <= 1e-4);
        prop_assert_eq!(mb.loss.to_bits(), mono.loss.to_bits());

        let l64 = f.lora.cast::<f64>();
        let mut ck64 = CheckpointStore::in_memory();
        let mb64 = mebp_backprop(g, s, &l64, &mut ck64, &f.input).unwrap();
        let mono64 = monolithic_backprop(g, s, &l64, &f.input).unwrap();
        prop_assert!(mb64.grads.relative_error(&mono64.grads).unwrap() <= 1e-6);
    }

    #[test]
    fn accumulation_is_the_mean(seed in any::<u64>(), k in 1usize..5) {
        let f = fixture(seed);
        let (g, s) = (&f.session.graph, &f.session.store);
        let inputs: Vec<_> = (0..k)
            .map(|i| random_input(f.cfg.vocab_size, 6, seed.wrapping_add(i as u64)))
            .collect();
        let l64 = f.lora.cast::<f64>();
        let mut ck = CheckpointStore::in_memory();
        let acc = grad_accumulate(g, s, &l64, &mut ck, &inputs).unwrap();
        let mut mean = vec![0.0; acc.grads.to_f64_vec().len()];
        for x in &inputs {
            let one = mebp_backprop(g, s, &l64, &mut ck, x).unwrap();
            for (m, v) in mean.iter_mut().zip(one.grads.to_f64_vec()) {
                *m += v / k as f64;
            }
        }
        prop_assert!(relative_error(&acc.grads.to_f64_vec(), &mean) <= 1e-7);
    }
}

#[test]
fn monolithic_matches_finite_differences() {
    for seed in 0..4 {
        let f = fixture(seed);
        let l64 = f.lora.cast::<f64>();
        let mono = monolithic_backprop(&f.session.graph, &f.session.store, &l64, &f.input).unwrap();
        let fd = fd_gradient(&f, 1e-5);
        let err = relative_error(&mono.grads.to_f64_vec(), &fd);
        assert!(err <= 1e-3, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn zero_adapters_give_zero_a_gradients() {
    let mut f = fixture(7);
    f.lora = mebp::model::LoraState::new(&f.cfg, 7, Default::default()).unwrap();
    let mut ck = CheckpointStore::in_memory();
    let bp = mebp_backprop(
        &f.session.graph,
        &f.session.store,
        &f.lora,
        &mut ck,
        &f.input,
    )
    .unwrap();
    let zero = GradBundle::<f32>::zeros_like(&f.lora);
    for (id, gr) in bp.grads.iter() {
        assert!(gr.a.bitwise_eq(&zero.get(id).unwrap().a), "{id}");
        assert!(gr.b.data().iter().any(|v| *v != 0.0), "{id}");
    }
}
