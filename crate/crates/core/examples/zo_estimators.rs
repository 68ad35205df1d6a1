//! The three zeroth-order estimators on a one-parameter quadratic.

use mebp::optim::{zo_step, ScalarParam, ZoConfig, ZoUpdate, ZoVariant};

fn main() -> mebp::Result<()> {
    let loss = |p: &ScalarParam| Ok(p.effective().powi(2));
    for variant in [ZoVariant::Mezo, ZoVariant::Kzoo, ZoVariant::Fzoo] {
        // Unit noise makes the estimate a plain finite difference.
        let mut cfg = ZoConfig::new(variant, 0.01, 0);
        cfg.constant_noise = Some(1.0);
        let mut p = ScalarParam::new(1.0);
        let out = zo_step(&cfg, &mut p, loss, &mut ZoUpdate::None, 0)?;
        println!(
            "{variant:?}: estimates {:?}, {} forward passes",
            out.projected_grads, out.forward_passes
        );

        let mut cfg = ZoConfig::new(variant, 1e-3, 42);
        cfg.n_estimates = cfg.n_estimates.max(1);
        let mut p = ScalarParam::new(1.0);
        let mut sgd = ZoUpdate::Sgd { lr: 0.05 };
        for step in 0..200 {
            zo_step(&cfg, &mut p, loss, &mut sgd, step)?;
        }
        println!("  200 SGD steps with Gaussian noise: x = {:.4}", p.value);
    }
    Ok(())
}
