//! Zeroth-order gradient estimates from loss differences along regenerable
//! random directions.
//!
//! Perturbations go through [`ZoParams::perturb`], which for [`LoraState`]
//! records an overlay instead of rewriting the weights; the direction is
//! regenerated from its seed whenever an adapter is read, so no noise tensor
//! outlives a single adapter access.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AdamWState;
use crate::error::{Error, Result};
use crate::model::{LoraState, Noise};
use crate::tensor::{ops, Element, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoVariant {
    /// One central-difference estimate (2 forward passes).
    Mezo,
    /// `K` averaged central-difference estimates (`2K` passes).
    Kzoo,
    /// `K` one-sided estimates sharing one unperturbed pass (`K + 1` passes).
    Fzoo,
}

impl FromStr for ZoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mezo" => Ok(ZoVariant::Mezo),
            "kzoo" => Ok(ZoVariant::Kzoo),
            "fzoo" => Ok(ZoVariant::Fzoo),
            _ => Err(Error::Config(format!("unknown zeroth-order variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    pub variant: ZoVariant,
    pub epsilon: f64,
    pub n_estimates: u32,
    pub seed: u64,
    /// Replace Gaussian directions by a constant; for closed-form checks.
    #[serde(default)]
    pub constant_noise: Option<f32>,
}

impl ZoConfig {
    /// Estimate counts used by default: 1 for MeZO, 4 for KZOO, 8 for FZOO.
    pub fn new(variant: ZoVariant, epsilon: f64, seed: u64) -> Self {
        let n_estimates = match variant {
            ZoVariant::Mezo => 1,
            ZoVariant::Kzoo => 4,
            ZoVariant::Fzoo => 8,
        };
        ZoConfig {
            variant,
            epsilon,
            n_estimates,
            seed,
            constant_noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.n_estimates == 0 {
            return Err(Error::Config("n_estimates must be at least 1".into()));
        }
        if self.variant == ZoVariant::Mezo && self.n_estimates != 1 {
            return Err(Error::Config("mezo uses exactly one estimate".into()));
        }
        Ok(())
    }

    /// Forward passes one step costs.
    pub fn forward_passes(&self) -> u32 {
        match self.variant {
            ZoVariant::Mezo | ZoVariant::Kzoo => 2 * self.n_estimates,
            ZoVariant::Fzoo => self.n_estimates + 1,
        }
    }

    /// Direction of estimate `k` at optimizer step `step`.
    pub fn noise(&self, step: u64, k: u32) -> Noise {
        match self.constant_noise {
            Some(c) => Noise::Constant(c),
            None => Noise::Gaussian {
                seed: mix(mix(self.seed ^ 0x5a4f_5a4f) ^ step) ^ k as u64,
            },
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How the estimated gradient `Σ_k c_k z_k` is applied.
#[derive(Clone, Debug)]
pub enum ZoUpdate {
    /// Estimate only; parameters stay put.
    None,
    Sgd {
        lr: f64,
    },
    AdamW(AdamWState),
}

/// Parameters a zeroth-order step can perturb and update.
pub trait ZoParams {
    /// Shift the effective parameters by `coef · z(noise)`.
    fn perturb(&mut self, noise: Noise, coef: f64);
    /// Drop every active perturbation.
    fn clear_perturbations(&mut self);
    /// Apply the gradient estimate `Σ coef_k · z(noise_k)`.
    fn apply_estimate(&mut self, terms: &[(Noise, f64)], update: &mut ZoUpdate) -> Result<()>;
}

impl<F: Element> ZoParams for LoraState<F> {
    fn perturb(&mut self, noise: Noise, coef: f64) {
        LoraState::perturb(self, noise, coef);
    }

    fn clear_perturbations(&mut self) {
        LoraState::clear_perturbations(self);
    }

    fn apply_estimate(&mut self, terms: &[(Noise, f64)], update: &mut ZoUpdate) -> Result<()> {
        if matches!(update, ZoUpdate::None) {
            return Ok(());
        }
        let t = self.step + 1;
        let ids: Vec<String> = self.ids().map(str::to_owned).collect();
        // One adapter factor's gradient is materialised at a time.
        for id in ids {
            for part in 0..2u8 {
                let shape = {
                    let ad = self.base(&id)?;
                    if part == 0 {
                        ad.a.shape().to_vec()
                    } else {
                        ad.b.shape().to_vec()
                    }
                };
                let mut g = Tensor::<F>::zeros(&shape);
                for &(noise, c) in terms {
                    let z = self.noise_tensor(noise, &id, part)?;
                    ops::axpy(&mut g, F::from_f64(c), &z)?;
                }
                let ad = self.base_mut(&id)?;
                let p = if part == 0 { &mut ad.a } else { &mut ad.b };
                match update {
                    ZoUpdate::None => {}
                    ZoUpdate::Sgd { lr } => {
                        if *lr != 0.0 {
                            let lr = F::from_f64(*lr);
                            for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                                *w = *w - lr * gv;
                            }
                        }
                    }
                    ZoUpdate::AdamW(st) => {
                        let key = format!("{id}.{}", if part == 0 { "a" } else { "b" });
                        st.update(&key, t, p.data_mut(), g.data())?;
                    }
                }
            }
        }
        self.step = t;
        Ok(())
    }
}

/// A single scalar parameter; the closed-form test bed for the estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarParam {
    pub value: f64,
    pub step: u64,
    perturbations: Vec<(Noise, f64)>,
}

impl ScalarParam {
    pub fn new(value: f64) -> Self {
        ScalarParam {
            value,
            step: 0,
            perturbations: Vec::new(),
        }
    }

    fn z(noise: Noise) -> f64 {
        match noise {
            Noise::Constant(c) => c as f64,
            Noise::Gaussian { seed } => Rng::new(seed, 0).normal() as f64,
        }
    }

    /// Value including active perturbations.
    pub fn effective(&self) -> f64 {
        self.value
            + self
                .perturbations
                .iter()
                .map(|&(n, c)| c * Self::z(n))
                .sum::<f64>()
    }
}

impl ZoParams for ScalarParam {
    fn perturb(&mut self, noise: Noise, coef: f64) {
        match self.perturbations.iter_mut().find(|(n, _)| *n == noise) {
            Some((_, c)) => *c += coef,
            None => self.perturbations.push((noise, coef)),
        }
        self.perturbations.retain(|(_, c)| *c != 0.0);
    }

    fn clear_perturbations(&mut self) {
        self.perturbations.clear();
    }

    fn apply_estimate(&mut self, terms: &[(Noise, f64)], update: &mut ZoUpdate) -> Result<()> {
        let g: f64 = terms.iter().map(|&(n, c)| c * Self::z(n)).sum();
        let t = self.step + 1;
        match update {
            ZoUpdate::None => return Ok(()),
            ZoUpdate::Sgd { lr } => {
                if *lr != 0.0 {
                    self.value -= *lr * g;
                }
            }
            ZoUpdate::AdamW(st) => {
                let mut p = [self.value];
                st.update("theta", t, &mut p, &[g])?;
                self.value = p[0];
            }
        }
        self.step = t;
        Ok(())
    }
}

/// `θ ← θ + sign·ε·z(seed)`.
pub fn zo_perturb<P: ZoParams>(params: &mut P, noise: Noise, epsilon: f64, sign: f64) {
    params.perturb(noise, sign * epsilon);
}

/// Undo [`zo_perturb`] with the same arguments.
pub fn zo_restore<P: ZoParams>(params: &mut P, noise: Noise, epsilon: f64, sign: f64) {
    params.perturb(noise, -sign * epsilon);
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoOutcome {
    /// Mean of the unperturbed (fzoo) or the ± perturbed (mezo, kzoo) losses.
    pub loss: f64,
    /// One projected gradient per estimate.
    pub projected_grads: Vec<f64>,
    pub forward_passes: u32,
    /// A non-finite loss was seen; parameters were restored and not updated.
    pub skipped: bool,
}

/// One zeroth-order step at optimizer step `step`.
pub fn zo_step<P, L>(
    cfg: &ZoConfig,
    params: &mut P,
    mut loss: L,
    update: &mut ZoUpdate,
    step: u64,
) -> Result<ZoOutcome>
where
    P: ZoParams,
    L: FnMut(&P) -> Result<f64>,
{
    cfg.validate()?;
    let eps = cfg.epsilon;
    let k = cfg.n_estimates;
    let mut passes = 0u32;
    let mut eval = |p: &P, passes: &mut u32| -> Result<f64> {
        *passes += 1;
        loss(p)
    };
    let mut grads = Vec::with_capacity(k as usize);
    let mut losses = Vec::new();
    params.clear_perturbations();

    let mut run = |params: &mut P, passes: &mut u32| -> Result<()> {
        match cfg.variant {
            ZoVariant::Mezo | ZoVariant::Kzoo => {
                for i in 0..k {
                    let z = cfg.noise(step, i);
                    params.perturb(z, eps);
                    let lp = eval(params, passes)?;
                    params.perturb(z, -2.0 * eps);
                    let lm = eval(params, passes)?;
                    params.perturb(z, eps);
                    grads.push((lp - lm) / (2.0 * eps));
                    losses.push(lp);
                    losses.push(lm);
                }
            }
            ZoVariant::Fzoo => {
                let l0 = eval(params, passes)?;
                losses.push(l0);
                for i in 0..k {
                    let z = cfg.noise(step, i);
                    params.perturb(z, eps);
                    let lk = eval(params, passes)?;
                    params.perturb(z, -eps);
                    grads.push((lk - l0) / eps);
                }
            }
        }
        Ok(())
    };
    let res = run(params, &mut passes);
    params.clear_perturbations();
    res?;

    let all_finite = losses.iter().chain(&grads).all(|v| v.is_finite());
    let mean_loss = match cfg.variant {
        ZoVariant::Fzoo => losses[0],
        _ => losses.iter().sum::<f64>() / losses.len() as f64,
    };
    if !all_finite {
        return Ok(ZoOutcome {
            loss: mean_loss,
            projected_grads: grads,
            forward_passes: passes,
            skipped: true,
        });
    }
    let terms: Vec<(Noise, f64)> = grads
        .iter()
        .enumerate()
        .map(|(i, &g)| (cfg.noise(step, i as u32), g / k as f64))
        .collect();
    params.apply_estimate(&terms, update)?;
    Ok(ZoOutcome {
        loss: mean_loss,
        projected_grads: grads,
        forward_passes: passes,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraInit, ModelConfig};

    fn quadratic(p: &ScalarParam) -> Result<f64> {
        Ok(p.effective().powi(2))
    }

    fn cfg(variant: ZoVariant, k: u32) -> ZoConfig {
        ZoConfig {
            variant,
            epsilon: 0.01,
            n_estimates: k,
            seed: 0,
            constant_noise: Some(1.0),
        }
    }

    #[test]
    fn mezo_quadratic_is_exact() {
        let mut p = ScalarParam::new(1.0);
        let out = zo_step(
            &cfg(ZoVariant::Mezo, 1),
            &mut p,
            quadratic,
            &mut ZoUpdate::None,
            0,
        )
        .unwrap();
        assert!((out.projected_grads[0] - 2.0).abs() < 1e-12);
        assert_eq!(out.forward_passes, 2);
        assert_eq!(p.value, 1.0);
    }

    #[test]
    fn fzoo_quadratic_one_sided() {
        let mut p = ScalarParam::new(1.0);
        let out = zo_step(
            &cfg(ZoVariant::Fzoo, 3),
            &mut p,
            quadratic,
            &mut ZoUpdate::None,
            0,
        )
        .unwrap();
        for g in &out.projected_grads {
            assert!((g - 2.01).abs() < 1e-12);
        }
        assert_eq!(out.forward_passes, 4);
    }

    #[test]
    fn kzoo_counts_passes() {
        let mut p = ScalarParam::new(1.0);
        let out = zo_step(
            &cfg(ZoVariant::Kzoo, 4),
            &mut p,
            quadratic,
            &mut ZoUpdate::None,
            0,
        )
        .unwrap();
        assert_eq!(out.forward_passes, 8);
        assert_eq!(out.projected_grads.len(), 4);
    }

    #[test]
    fn sgd_update_descends() {
        let mut p = ScalarParam::new(1.0);
        zo_step(
            &cfg(ZoVariant::Mezo, 1),
            &mut p,
            quadratic,
            &mut ZoUpdate::Sgd { lr: 0.1 },
            0,
        )
        .unwrap();
        assert!((p.value - 0.8).abs() < 1e-12);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn non_finite_loss_skips_and_restores() {
        let mut p = ScalarParam::new(1.0);
        let out = zo_step(
            &cfg(ZoVariant::Mezo, 1),
            &mut p,
            |_: &ScalarParam| Ok(f64::NAN),
            &mut ZoUpdate::Sgd { lr: 0.1 },
            0,
        )
        .unwrap();
        assert!(out.skipped);
        assert_eq!(p, ScalarParam::new(1.0));
    }

    #[test]
    fn mezo_requires_single_estimate() {
        assert!(cfg(ZoVariant::Mezo, 2).validate().is_err());
        let mut c = cfg(ZoVariant::Fzoo, 2);
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lora_weights_unchanged_with_zero_lr() {
        let mc = ModelConfig::tiny();
        let mut lora = LoraState::new(
            &mc,
            1,
            LoraInit {
                a_std: None,
                b_std: 0.1,
            },
        )
        .unwrap();
        let before = lora.clone();
        let zc = ZoConfig::new(ZoVariant::Kzoo, 1e-3, 7);
        let loss = |l: &LoraState<f32>| -> Result<f64> {
            let ad = l.effective("layers.0.q")?;
            Ok(ad.b.data().iter().map(|v| (*v as f64).powi(2)).sum())
        };
        zo_step(&zc, &mut lora, loss, &mut ZoUpdate::Sgd { lr: 0.0 }, 3).unwrap();
        assert!(lora
            .base("layers.0.q")
            .unwrap()
            .b
            .bitwise_eq(&before.base("layers.0.q").unwrap().b));
        assert!(lora.perturbations().is_empty());
        assert!(lora
            .iter()
            .zip(before.iter())
            .all(|((_, a), (_, b))| a.a.bitwise_eq(&b.a) && a.b.bitwise_eq(&b.b)));
    }

    #[test]
    fn noise_seeds_differ_across_steps_and_estimates() {
        let c = ZoConfig::new(ZoVariant::Kzoo, 1e-3, 1);
        assert_ne!(c.noise(0, 0), c.noise(1, 0));
        assert_ne!(c.noise(0, 0), c.noise(0, 1));
        assert_eq!(c.noise(5, 2), c.noise(5, 2));
    }
}
