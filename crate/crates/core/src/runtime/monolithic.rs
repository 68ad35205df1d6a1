//! Whole-model reference: every frozen weight decompressed up front, every
//! activation kept alive on a tape, gradients by mechanical reverse mode.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{names, LoraState, ModelConfig, Projection, StepInput};
use crate::tensor::{Element, Tensor};

pub(crate) struct TapeModel {
    pub loss: Var,
    pub adapters: BTreeMap<String, (Var, Var)>,
}

struct Builder<'a, F: Element> {
    tape: &'a mut Tape<F>,
    weights: BTreeMap<String, Tensor<F>>,
    cfg: &'a ModelConfig,
    adapters: BTreeMap<String, (Var, Var, F)>,
}

impl<F: Element> Builder<'_, F> {
    fn frozen(&mut self, name: &str) -> Result<Var> {
        let t = self
            .weights
            .remove(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_owned()))?;
        Ok(self.tape.constant(t))
    }

    fn linear(&mut self, x: Var, layer: usize, p: Projection) -> Result<Var> {
        let w = self.frozen(&names::proj(layer, p))?;
        let base = self.tape.matmul_nt(x, w)?;
        match self.adapters.get(&names::adapter(layer, p)).copied() {
            None => Ok(base),
            Some((a, b, s)) => {
                let u = self.tape.matmul_nt(x, a)?;
                let t = self.tape.matmul_nt(u, b)?;
                let t = self.tape.scale(t, s)?;
                self.tape.add(base, t)
            }
        }
    }

    fn layer(&mut self, x: Var, l: usize) -> Result<Var> {
        let cfg = self.cfg;
        let eps = F::from_f64(cfg.norm_eps);
        let g1 = self.frozen(&names::attn_norm(l))?;
        let n1 = self.tape.rmsnorm(x, g1, eps)?;
        let q = self.linear(n1, l, Projection::Q)?;
        let k = self.linear(n1, l, Projection::K)?;
        let v = self.linear(n1, l, Projection::V)?;
        let dh = cfg.head_dim();
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let qr = self.tape.rope(qh, cfg.rope_theta)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let kr = self.tape.rope(kh, cfg.rope_theta)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let s = self.tape.matmul_nt(qr, kr)?;
            let s = self.tape.scale(s, inv_sqrt)?;
            let p = self.tape.causal_softmax(s)?;
            outs.push(self.tape.matmul(p, vh)?);
        }
        let o = self.tape.concat_cols(&outs)?;
        let attn = self.linear(o, l, Projection::O)?;
        let h = self.tape.add(x, attn)?;
        let g2 = self.frozen(&names::mlp_norm(l))?;
        let n2 = self.tape.rmsnorm(h, g2, eps)?;
        let gate = self.linear(n2, l, Projection::Gate)?;
        let up = self.linear(n2, l, Projection::Up)?;
        let sg = self.tape.silu(gate)?;
        let act = self.tape.mul(sg, up)?;
        let down = self.linear(act, l, Projection::Down)?;
        self.tape.add(h, down)
    }
}

/// Record the full model on `tape`. Consumes the frozen weights.
pub(crate) fn build<F: Element>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    weights: BTreeMap<String, Tensor<F>>,
    lora: &LoraState<F>,
    input: &StepInput,
) -> Result<TapeModel> {
    let mut adapters = BTreeMap::new();
    for id in lora.ids() {
        let ad = lora.effective(id)?;
        let a = tape.param(ad.a.clone());
        let b = tape.param(ad.b.clone());
        adapters.insert(id.to_owned(), (a, b, ad.scaling));
    }
    let mut bld = Builder {
        tape,
        weights,
        cfg,
        adapters,
    };
    let table = bld.frozen(names::TOK_EMB)?;
    let mut x = bld.tape.embedding(table, &input.tokens)?;
    for l in 0..cfg.n_layers {
        x = bld.layer(x, l)?;
    }
    let gain = bld.frozen(names::FINAL_NORM)?;
    let n = bld.tape.rmsnorm(x, gain, F::from_f64(cfg.norm_eps))?;
    let head = bld.frozen(names::LM_HEAD)?;
    let logits = bld.tape.matmul_nt(n, head)?;
    let loss = bld.tape.xent(logits, &input.targets)?;
    Ok(TapeModel {
        loss,
        adapters: bld
            .adapters
            .into_iter()
            .map(|(k, (a, b, _))| (k, (a, b)))
            .collect(),
    })
}
