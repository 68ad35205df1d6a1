//! AdamW for first-order steps and the zeroth-order estimator family.

mod zo;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use zo::{
    zo_perturb, zo_restore, zo_step, ScalarParam, ZoConfig, ZoOutcome, ZoParams, ZoUpdate,
    ZoVariant,
};

use crate::error::{Error, Result};
use crate::model::LoraState;
use crate::runtime::GradBundle;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moments per parameter tensor, created on first use.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub hyper: AdamWConfig,
    moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl AdamWState {
    pub fn new(hyper: AdamWConfig) -> Self {
        AdamWState {
            hyper,
            moments: BTreeMap::new(),
        }
    }

    pub fn bytes(&self) -> u64 {
        self.moments
            .values()
            .map(|(m, v)| m.bytes() + v.bytes())
            .sum()
    }

    pub fn moments(&self, key: &str) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        self.moments.get(key).map(|(m, v)| (m, v))
    }

    /// Bias-corrected update with decoupled weight decay at step `t` (1-based):
    /// `θ ← θ(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`.
    pub fn update<F: Element>(
        &mut self,
        key: &str,
        t: u64,
        param: &mut [F],
        grad: &[F],
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::dim(
                "adamw",
                format!("`{key}`: {} params, {} grads", param.len(), grad.len()),
            ));
        }
        if t == 0 {
            return Err(Error::Protocol("adamw step counter starts at 1".into()));
        }
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(key.to_owned())
            .or_insert_with(|| (Tensor::zeros(&[n]), Tensor::zeros(&[n])));
        if m.len() != n {
            return Err(Error::dim("adamw", format!("`{key}` changed size")));
        }
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t as i32);
        let bc2 = 1.0 - h.beta2.powi(t as i32);
        for (((p, &g), mi), vi) in param
            .iter_mut()
            .zip(grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g.as_f64();
            let mn = h.beta1 * *mi as f64 + (1.0 - h.beta1) * g;
            let vn = h.beta2 * *vi as f64 + (1.0 - h.beta2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = (mn / bc1) / ((vn / bc2).sqrt() + h.eps);
            let theta = p.as_f64();
            let decayed = if h.weight_decay == 0.0 {
                theta
            } else {
                theta * (1.0 - h.lr * h.weight_decay)
            };
            let next = if h.lr == 0.0 {
                theta
            } else {
                decayed - h.lr * step
            };
            *p = F::from_f64(next);
        }
        Ok(())
    }
}

/// One AdamW step on every adapter; increments `lora.step`.
pub fn adamw_step<F: Element>(
    lora: &mut LoraState<F>,
    adamw: &mut AdamWState,
    grads: &GradBundle<F>,
) -> Result<()> {
    if !lora.ids().eq(grads.ids()) {
        return Err(Error::Protocol(
            "gradient keys differ from the adapter set".into(),
        ));
    }
    for (_, g) in grads.iter() {
        if !(g.a.all_finite() && g.b.all_finite()) {
            return Err(Error::NonFinite { op: "adamw" });
        }
    }
    let t = lora.step + 1;
    let ids: Vec<String> = lora.ids().map(str::to_owned).collect();
    for id in ids {
        let g = grads.get(&id).expect("keys checked");
        let ad = lora.base_mut(&id)?;
        if ad.a.shape() != g.a.shape() || ad.b.shape() != g.b.shape() {
            return Err(Error::dim("adamw", format!("`{id}` gradient shape")));
        }
        adamw.update(&format!("{id}.a"), t, ad.a.data_mut(), g.a.data())?;
        adamw.update(&format!("{id}.b"), t, ad.b.data_mut(), g.b.data())?;
    }
    lora.step = t;
    Ok(())
}
