use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Rng, Tensor};

use super::ModelConfig;

/// Low-rank update `scaling · B·A` on a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F: Element = f32> {
    /// `[r, d_in]`
    pub a: Tensor<F>,
    /// `[d_out, r]`
    pub b: Tensor<F>,
    pub scaling: F,
}

impl<F: Element> LoraAdapter<F> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn bytes(&self) -> u64 {
        self.a.bytes() + self.b.bytes()
    }

    pub fn cast<G: Element>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            scaling: G::from_f64(self.scaling.as_f64()),
        }
    }
}

/// Gradient of one adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad<F: Element = f32> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Element> AdapterGrad<F> {
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let mut v = self.a.to_f64_vec();
        v.extend(self.b.to_f64_vec());
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraInit {
    /// Defaults to `1/√d_in`.
    pub a_std: Option<f32>,
    /// Zero gives the standard zero-delta start.
    pub b_std: f32,
}

impl Default for LoraInit {
    fn default() -> Self {
        LoraInit {
            a_std: None,
            b_std: 0.0,
        }
    }
}

/// Source of a regenerable perturbation direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    /// `z ~ N(0, I)` regenerated from `(seed, per-tensor stream)`.
    Gaussian { seed: u64 },
    /// Every entry equal to the constant; a hook for closed-form tests.
    Constant(f32),
}

/// An active perturbation `coef · z(noise)` folded into every adapter read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub noise: Noise,
    pub coef: f64,
}

/// Trainable LoRA weights: the only training state mutated by optimizers.
///
/// Zeroth-order perturbations are recorded as `(noise, coefficient)` pairs and
/// materialised per adapter when it is read, so the base weights are never
/// rounded by a perturb/restore walk and no noise tensor is kept.
#[derive(Clone, Debug, Default)]
pub struct LoraState<F: Element = f32> {
    adapters: BTreeMap<String, LoraAdapter<F>>,
    pub step: u64,
    perturbations: Vec<Perturbation>,
}

impl LoraState<f32> {
    pub fn new(cfg: &ModelConfig, seed: u64, init: LoraInit) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.lora_rank;
        let mut adapters = BTreeMap::new();
        for (i, (id, d_out, d_in)) in cfg.adapters().into_iter().enumerate() {
            let mut rng = Rng::new(seed ^ 0x4c6f_5241, i as u64);
            let mut a = vec![0.0f32; r * d_in];
            rng.fill_normal(&mut a, init.a_std.unwrap_or(1.0 / (d_in as f32).sqrt()));
            let mut b = vec![0.0f32; d_out * r];
            if init.b_std != 0.0 {
                rng.fill_normal(&mut b, init.b_std);
            }
            adapters.insert(
                id,
                LoraAdapter {
                    a: Tensor::from_vec(&[r, d_in], a)?,
                    b: Tensor::from_vec(&[d_out, r], b)?,
                    scaling: cfg.lora_scaling(),
                },
            );
        }
        Ok(LoraState {
            adapters,
            step: 0,
            perturbations: Vec::new(),
        })
    }
}

impl<F: Element> LoraState<F> {
    pub fn from_adapters(adapters: BTreeMap<String, LoraAdapter<F>>) -> Self {
        LoraState {
            adapters,
            step: 0,
            perturbations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.adapters.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LoraAdapter<F>)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Base (unperturbed) weights.
    pub fn base(&self, id: &str) -> Result<&LoraAdapter<F>> {
        self.adapters
            .get(id)
            .ok_or_else(|| Error::UnknownAdapter(id.to_owned()))
    }

    pub fn base_mut(&mut self, id: &str) -> Result<&mut LoraAdapter<F>> {
        self.adapters
            .get_mut(id)
            .ok_or_else(|| Error::UnknownAdapter(id.to_owned()))
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::param_count).sum()
    }

    pub fn bytes(&self) -> u64 {
        self.adapters.values().map(LoraAdapter::bytes).sum()
    }

    fn stream_index(&self, id: &str) -> Result<u64> {
        self.adapters
            .keys()
            .position(|k| k == id)
            .map(|i| i as u64)
            .ok_or_else(|| Error::UnknownAdapter(id.to_owned()))
    }

    /// The direction `z` for one adapter factor (`part` 0 = A, 1 = B).
    pub fn noise_tensor(&self, noise: Noise, id: &str, part: u8) -> Result<Tensor<F>> {
        let base = self.base(id)?;
        let shape = if part == 0 {
            base.a.shape()
        } else {
            base.b.shape()
        };
        let n: usize = shape.iter().product();
        let data = match noise {
            Noise::Constant(c) => vec![F::from_f32(c); n],
            Noise::Gaussian { seed } => {
                let stream = 2 * self.stream_index(id)? + part as u64;
                let mut rng = Rng::new(seed, stream);
                (0..n).map(|_| F::from_f32(rng.normal())).collect()
            }
        };
        Tensor::from_vec(shape, data)
    }

    /// Add `coef · z(noise)` to the effective weights.
    pub fn perturb(&mut self, noise: Noise, coef: f64) {
        if let Some(p) = self.perturbations.iter_mut().find(|p| p.noise == noise) {
            p.coef += coef;
        } else {
            self.perturbations.push(Perturbation { noise, coef });
        }
        self.perturbations.retain(|p| p.coef != 0.0);
    }

    pub fn perturbations(&self) -> &[Perturbation] {
        &self.perturbations
    }

    pub fn clear_perturbations(&mut self) {
        self.perturbations.clear();
    }

    fn materialize(&self, id: &str, part: u8, base: &Tensor<F>) -> Result<Tensor<F>> {
        let mut acc: Vec<f64> = base.to_f64_vec();
        for p in &self.perturbations {
            let z = self.noise_tensor(p.noise, id, part)?;
            for (a, zv) in acc.iter_mut().zip(z.data()) {
                *a += p.coef * zv.as_f64();
            }
        }
        Tensor::from_vec(base.shape(), acc.into_iter().map(F::from_f64).collect())
    }

    /// Effective adapter: base weights plus any active perturbation.
    pub fn effective(&self, id: &str) -> Result<Cow<'_, LoraAdapter<F>>> {
        let base = self.base(id)?;
        if self.perturbations.is_empty() {
            return Ok(Cow::Borrowed(base));
        }
        Ok(Cow::Owned(LoraAdapter {
            a: self.materialize(id, 0, &base.a)?,
            b: self.materialize(id, 1, &base.b)?,
            scaling: base.scaling,
        }))
    }

    pub fn cast<G: Element>(&self) -> LoraState<G> {
        LoraState {
            adapters: self
                .adapters
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            step: self.step,
            perturbations: self.perturbations.clone(),
        }
    }

    /// Bitwise equality of all base weights (perturbations included).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.perturbations == other.perturbations
            && self.adapters.len() == other.adapters.len()
            && self
                .adapters
                .iter()
                .zip(&other.adapters)
                .all(|((ka, a), (kb, b))| ka == kb && a.a.bitwise_eq(&b.a) && a.b.bitwise_eq(&b.b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tracker;

    #[test]
    fn zero_init_b() {
        let lora = LoraState::new(&ModelConfig::tiny(), 1, LoraInit::default()).unwrap();
        for (_, a) in lora.iter() {
            assert!(a.b.data().iter().all(|v| *v == 0.0));
            assert_eq!(a.rank(), 4);
        }
    }

    #[test]
    fn perturb_walk_restores_bitwise() {
        let mut lora = LoraState::new(
            &ModelConfig::tiny(),
            2,
            LoraInit {
                a_std: None,
                b_std: 0.3,
            },
        )
        .unwrap();
        let original = lora.clone();
        let noise = Noise::Gaussian { seed: 99 };
        let eps = 1e-3;
        lora.perturb(noise, eps);
        assert!(!lora.bitwise_eq(&original));
        lora.perturb(noise, -2.0 * eps);
        lora.perturb(noise, eps);
        assert!(lora.bitwise_eq(&original));
        let id = "layers.0.q";
        assert!(lora
            .effective(id)
            .unwrap()
            .a
            .bitwise_eq(&original.base(id).unwrap().a));
    }

    #[test]
    fn noise_replays_from_seed() {
        let lora = LoraState::new(&ModelConfig::tiny(), 3, LoraInit::default()).unwrap();
        let a = lora
            .noise_tensor(Noise::Gaussian { seed: 5 }, "layers.1.v", 0)
            .unwrap();
        let b = lora
            .noise_tensor(Noise::Gaussian { seed: 5 }, "layers.1.v", 0)
            .unwrap();
        let c = lora
            .noise_tensor(Noise::Gaussian { seed: 5 }, "layers.1.v", 1)
            .unwrap();
        assert!(a.bitwise_eq(&b));
        assert_ne!(a.data()[0], c.data()[0]);
    }

    #[test]
    fn perturb_allocates_no_tensors() {
        let mut lora = LoraState::new(&ModelConfig::tiny(), 4, LoraInit::default()).unwrap();
        let (_, hw) = tracker::track_scope("perturb", || {
            lora.perturb(Noise::Gaussian { seed: 1 }, 0.1);
        });
        assert_eq!(hw, 0);
    }

    #[test]
    fn effective_adds_scaled_noise() {
        let mut lora = LoraState::new(&ModelConfig::tiny(), 6, LoraInit::default()).unwrap();
        let id = "layers.0.k";
        let base = lora.base(id).unwrap().a.clone();
        lora.perturb(Noise::Constant(1.0), 0.5);
        let eff = lora.effective(id).unwrap();
        for (e, b) in eff.a.data().iter().zip(base.data()) {
            assert_eq!(*e, (*b as f64 + 0.5) as f32);
        }
    }
}
