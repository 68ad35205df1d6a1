//! Forward (`F_i`) and backward (`B_i`) computations per checkpoint block.
//!
//! A backward call receives the block's checkpointed *input*, recomputes the
//! block interior from it, and returns LoRA gradients plus the gradient with
//! respect to that input. Frozen tensors never receive gradients.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

use super::{names, AdapterGrad, LoraAdapter, LoraState, ModelConfig, Projection};

/// What a checkpoint block computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    Embedding,
    TransformerLayer { layer: usize },
    FinalLinear,
    Loss,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Embedding => f.write_str("emb"),
            BlockKind::TransformerLayer { layer } => write!(f, "layer{}", layer + 1),
            BlockKind::FinalLinear => f.write_str("final_linear"),
            BlockKind::Loss => f.write_str("loss"),
        }
    }
}

/// Token ids and next-token targets for one training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepInput {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

impl StepInput {
    /// Split a `T + 1` token window into inputs `[..T]` and targets `[1..]`.
    pub fn from_sequence(seq: &[u32]) -> Result<Self> {
        if seq.len() < 2 {
            return Err(Error::dim("step_input", "need at least two tokens"));
        }
        Ok(StepInput {
            tokens: seq[..seq.len() - 1].iter().map(|&t| t as usize).collect(),
            targets: seq[1..].iter().map(|&t| t as usize).collect(),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Checkpoint 0: token ids as a `[T, 1]` tensor.
    pub fn token_tensor<F: Element>(&self) -> Tensor<F> {
        let data = self.tokens.iter().map(|&t| F::from_f64(t as f64)).collect();
        Tensor::from_vec(&[self.tokens.len(), 1], data).expect("shape matches")
    }
}

/// Output of one backward block.
#[derive(Debug)]
pub struct BlockGrads<F: Element = f32> {
    pub lora: BTreeMap<String, AdapterGrad<F>>,
    /// Gradient with respect to the block input; `None` for the embedding,
    /// whose input is token ids.
    pub input_grad: Option<Tensor<F>>,
}

fn frozen<'a, F: Element>(
    weights: &'a BTreeMap<String, Tensor<F>>,
    name: &str,
) -> Result<&'a Tensor<F>> {
    weights
        .get(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_owned()))
}

/// `x · Wᵀ + scaling · (x · Aᵀ) · Bᵀ`.
pub fn lora_apply<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    adapter: Option<&LoraAdapter<F>>,
) -> Result<Tensor<F>> {
    Ok(linear_forward(x, w, adapter)?.0)
}

fn linear_forward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    adapter: Option<&LoraAdapter<F>>,
) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
    let base = ops::matmul_nt(x, w)?;
    match adapter {
        None => Ok((base, None)),
        Some(ad) => {
            if ad.a.cols() != w.cols() || ad.b.rows() != w.rows() || ad.b.cols() != ad.a.rows() {
                return Err(Error::dim(
                    "lora_apply",
                    format!(
                        "W {:?}, A {:?}, B {:?}",
                        w.shape(),
                        ad.a.shape(),
                        ad.b.shape()
                    ),
                ));
            }
            let u = ops::matmul_nt(x, &ad.a)?;
            let delta = ops::scale(&ops::matmul_nt(&u, &ad.b)?, ad.scaling)?;
            Ok((ops::add(&base, &delta)?, Some(u)))
        }
    }
}

/// Returns `dx`; adapter gradients are inserted under `id`.
fn linear_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    adapter: Option<(&str, &LoraAdapter<F>, &Tensor<F>)>,
    dy: &Tensor<F>,
    grads: &mut BTreeMap<String, AdapterGrad<F>>,
) -> Result<Tensor<F>> {
    let dx = ops::matmul(dy, w)?;
    match adapter {
        None => Ok(dx),
        Some((id, ad, u)) => {
            let ds = ops::scale(dy, ad.scaling)?;
            let db = ops::matmul_tn(&ds, u)?;
            let du = ops::matmul(&ds, &ad.b)?;
            let da = ops::matmul_tn(&du, x)?;
            grads.insert(id.to_owned(), AdapterGrad { a: da, b: db });
            ops::add(&dx, &ops::matmul(&du, &ad.a)?)
        }
    }
}

struct Head<F: Element> {
    qr: Tensor<F>,
    kr: Tensor<F>,
    v: Tensor<F>,
    p: Tensor<F>,
}

/// Interior activations of a transformer layer, kept only for backward.
struct LayerCache<F: Element> {
    n1: Tensor<F>,
    heads: Vec<Head<F>>,
    o: Tensor<F>,
    h: Tensor<F>,
    n2: Tensor<F>,
    gate: Tensor<F>,
    up: Tensor<F>,
    sg: Tensor<F>,
    act: Tensor<F>,
    lin: BTreeMap<Projection, Option<Tensor<F>>>,
}

type Adapters<'a, F> = BTreeMap<Projection, std::borrow::Cow<'a, LoraAdapter<F>>>;

fn layer_adapters<'a, F: Element>(lora: &'a LoraState<F>, layer: usize) -> Result<Adapters<'a, F>> {
    let mut out = BTreeMap::new();
    for p in Projection::ALL {
        let id = names::adapter(layer, p);
        if lora.contains(&id) {
            out.insert(p, lora.effective(&id)?);
        }
    }
    Ok(out)
}

fn layer_forward<F: Element>(
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor<F>>,
    adapters: &Adapters<'_, F>,
    layer: usize,
    x: &Tensor<F>,
    keep: bool,
) -> Result<(Tensor<F>, Option<LayerCache<F>>)> {
    if x.shape().len() != 2 || x.cols() != cfg.d_model {
        return Err(Error::dim(
            "transformer_layer",
            format!("input {:?}, d_model {}", x.shape(), cfg.d_model),
        ));
    }
    let eps = F::from_f64(cfg.norm_eps);
    let w = |p: Projection| frozen(weights, &names::proj(layer, p));
    let ad = |p: Projection| adapters.get(&p).map(|c| c.as_ref());
    let mut lin = BTreeMap::new();

    let n1 = ops::rmsnorm(x, frozen(weights, &names::attn_norm(layer))?, eps)?;
    let mut qkv = Vec::with_capacity(3);
    for p in [Projection::Q, Projection::K, Projection::V] {
        let (y, u) = linear_forward(&n1, w(p)?, ad(p))?;
        lin.insert(p, u);
        qkv.push(y);
    }
    let (dh, nh) = (cfg.head_dim(), cfg.n_heads);
    let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(nh);
    let mut outs = Vec::with_capacity(nh);
    for h in 0..nh {
        let qr = ops::rope(&ops::slice_cols(&qkv[0], h * dh, dh)?, cfg.rope_theta)?;
        let kr = ops::rope(&ops::slice_cols(&qkv[1], h * dh, dh)?, cfg.rope_theta)?;
        let v = ops::slice_cols(&qkv[2], h * dh, dh)?;
        let scores = ops::scale(&ops::matmul_nt(&qr, &kr)?, inv_sqrt)?;
        let p = ops::causal_softmax(&scores)?;
        outs.push(ops::matmul(&p, &v)?);
        if keep {
            heads.push(Head { qr, kr, v, p });
        }
    }
    drop(qkv);
    let o = ops::concat_cols(&outs.iter().collect::<Vec<_>>())?;
    drop(outs);
    let (attn, u) = linear_forward(&o, w(Projection::O)?, ad(Projection::O))?;
    lin.insert(Projection::O, u);
    let h = ops::add(x, &attn)?;
    drop(attn);

    let n2 = ops::rmsnorm(&h, frozen(weights, &names::mlp_norm(layer))?, eps)?;
    let (gate, u) = linear_forward(&n2, w(Projection::Gate)?, ad(Projection::Gate))?;
    lin.insert(Projection::Gate, u);
    let (up, u) = linear_forward(&n2, w(Projection::Up)?, ad(Projection::Up))?;
    lin.insert(Projection::Up, u);
    let sg = ops::silu(&gate)?;
    let act = ops::mul(&sg, &up)?;
    let (down, u) = linear_forward(&act, w(Projection::Down)?, ad(Projection::Down))?;
    lin.insert(Projection::Down, u);
    let out = ops::add(&h, &down)?;

    let cache = keep.then(|| LayerCache {
        n1,
        heads,
        o,
        h,
        n2,
        gate,
        up,
        sg,
        act,
        lin,
    });
    Ok((out, cache))
}

fn layer_backward<F: Element>(
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor<F>>,
    adapters: &Adapters<'_, F>,
    layer: usize,
    x: &Tensor<F>,
    dout: &Tensor<F>,
) -> Result<BlockGrads<F>> {
    let (_, cache) = layer_forward(cfg, weights, adapters, layer, x, true)?;
    let c = cache.expect("cache requested");
    if dout.shape() != x.shape() {
        return Err(Error::dim(
            "transformer_layer_backward",
            "upstream grad shape",
        ));
    }
    let eps = F::from_f64(cfg.norm_eps);
    let mut grads = BTreeMap::new();
    let mut us = c.lin;
    let mut lin_back = |p: Projection, input: &Tensor<F>, dy: &Tensor<F>| {
        let id = names::adapter(layer, p);
        let u = us.get_mut(&p).and_then(Option::take);
        let ad = match (adapters.get(&p), u.as_ref()) {
            (Some(a), Some(u)) => Some((id.as_str(), a.as_ref(), u)),
            _ => None,
        };
        linear_backward(
            input,
            frozen(weights, &names::proj(layer, p))?,
            ad,
            dy,
            &mut grads,
        )
    };

    // MLP branch.
    let dact = lin_back(Projection::Down, &c.act, dout)?;
    let dsg = ops::mul(&dact, &c.up)?;
    let dup = ops::mul(&dact, &c.sg)?;
    drop(dact);
    let dgate = ops::silu_backward(&c.gate, &dsg)?;
    drop(dsg);
    let dn2_gate = lin_back(Projection::Gate, &c.n2, &dgate)?;
    let dn2_up = lin_back(Projection::Up, &c.n2, &dup)?;
    let dn2 = ops::add(&dn2_gate, &dn2_up)?;
    let (dh_mlp, _) =
        ops::rmsnorm_backward(&c.h, frozen(weights, &names::mlp_norm(layer))?, eps, &dn2)?;
    let dh = ops::add(dout, &dh_mlp)?;

    // Attention branch.
    let d_o = lin_back(Projection::O, &c.o, &dh)?;
    let (dhd, nh) = (cfg.head_dim(), cfg.n_heads);
    let inv_sqrt = F::from_f64(1.0 / (dhd as f64).sqrt());
    let mut dq = Vec::with_capacity(nh);
    let mut dk = Vec::with_capacity(nh);
    let mut dv = Vec::with_capacity(nh);
    for (h, head) in c.heads.iter().enumerate() {
        let doh = ops::slice_cols(&d_o, h * dhd, dhd)?;
        let dp = ops::matmul_nt(&doh, &head.v)?;
        dv.push(ops::matmul_tn(&head.p, &doh)?);
        let ds = ops::scale(&ops::causal_softmax_backward(&head.p, &dp)?, inv_sqrt)?;
        dq.push(ops::rope_backward(
            &ops::matmul(&ds, &head.kr)?,
            cfg.rope_theta,
        )?);
        dk.push(ops::rope_backward(
            &ops::matmul_tn(&ds, &head.qr)?,
            cfg.rope_theta,
        )?);
    }
    let dq = ops::concat_cols(&dq.iter().collect::<Vec<_>>())?;
    let dk = ops::concat_cols(&dk.iter().collect::<Vec<_>>())?;
    let dv = ops::concat_cols(&dv.iter().collect::<Vec<_>>())?;
    let mut dn1 = lin_back(Projection::Q, &c.n1, &dq)?;
    dn1 = ops::add(&dn1, &lin_back(Projection::K, &c.n1, &dk)?)?;
    dn1 = ops::add(&dn1, &lin_back(Projection::V, &c.n1, &dv)?)?;
    let (dx_attn, _) =
        ops::rmsnorm_backward(x, frozen(weights, &names::attn_norm(layer))?, eps, &dn1)?;
    let dx = ops::add(&dh, &dx_attn)?;
    Ok(BlockGrads {
        lora: grads,
        input_grad: Some(dx),
    })
}

fn token_ids<F: Element>(input: &Tensor<F>, vocab: usize) -> Result<Vec<usize>> {
    if input.shape().len() != 2 || input.cols() != 1 {
        return Err(Error::dim(
            "embedding",
            format!("token input {:?}", input.shape()),
        ));
    }
    input
        .data()
        .iter()
        .map(|&v| {
            let f = v.as_f64();
            if f < 0.0 || f.fract() != 0.0 || f as usize >= vocab {
                Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: f.max(0.0) as usize,
                    bound: vocab,
                })
            } else {
                Ok(f as usize)
            }
        })
        .collect()
}

fn final_norm_forward<F: Element>(
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor<F>>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    if x.shape().len() != 2 || x.cols() != cfg.d_model {
        return Err(Error::dim("final_linear", format!("input {:?}", x.shape())));
    }
    ops::rmsnorm(
        x,
        frozen(weights, names::FINAL_NORM)?,
        F::from_f64(cfg.norm_eps),
    )
}

/// Compute a block's checkpoint output from its input.
pub fn block_forward<F: Element>(
    kind: BlockKind,
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor<F>>,
    lora: &LoraState<F>,
    input: &Tensor<F>,
    step: &StepInput,
) -> Result<Tensor<F>> {
    match kind {
        BlockKind::Embedding => {
            let ids = token_ids(input, cfg.vocab_size)?;
            ops::embedding(frozen(weights, names::TOK_EMB)?, &ids)
        }
        BlockKind::TransformerLayer { layer } => {
            let adapters = layer_adapters(lora, layer)?;
            Ok(layer_forward(cfg, weights, &adapters, layer, input, false)?.0)
        }
        BlockKind::FinalLinear => {
            let n = final_norm_forward(cfg, weights, input)?;
            ops::matmul_nt(&n, frozen(weights, names::LM_HEAD)?)
        }
        BlockKind::Loss => {
            let loss = ops::xent_loss(input, &step.targets)?;
            Ok(Tensor::scalar(loss))
        }
    }
}

/// Gradients of the final loss through one block, recomputing the interior
/// from `input`. `upstream` is `None` exactly for the loss block.
pub fn block_backward<F: Element>(
    kind: BlockKind,
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor<F>>,
    lora: &LoraState<F>,
    input: &Tensor<F>,
    upstream: Option<&Tensor<F>>,
    step: &StepInput,
) -> Result<BlockGrads<F>> {
    let upstream = match (kind, upstream) {
        (BlockKind::Loss, None) => None,
        (BlockKind::Loss, Some(_)) => {
            return Err(Error::Protocol(
                "the loss block originates the gradient and takes no upstream".into(),
            ))
        }
        (_, None) => {
            return Err(Error::Protocol(format!(
                "block `{kind}` needs the upstream gradient"
            )))
        }
        (_, Some(g)) => Some(g),
    };
    match kind {
        BlockKind::Embedding => {
            token_ids(input, cfg.vocab_size)?;
            Ok(BlockGrads {
                lora: BTreeMap::new(),
                input_grad: None,
            })
        }
        BlockKind::TransformerLayer { layer } => {
            let adapters = layer_adapters(lora, layer)?;
            layer_backward(
                cfg,
                weights,
                &adapters,
                layer,
                input,
                upstream.expect("checked"),
            )
        }
        BlockKind::FinalLinear => {
            let dlogits = upstream.expect("checked");
            let head = frozen(weights, names::LM_HEAD)?;
            let dn = ops::matmul(dlogits, head)?;
            let (dx, _) = ops::rmsnorm_backward(
                input,
                frozen(weights, names::FINAL_NORM)?,
                F::from_f64(cfg.norm_eps),
                &dn,
            )?;
            Ok(BlockGrads {
                lora: BTreeMap::new(),
                input_grad: Some(dx),
            })
        }
        BlockKind::Loss => {
            let (_, dlogits) = ops::softmax_xent(input, &step.targets)?;
            Ok(BlockGrads {
                lora: BTreeMap::new(),
                input_grad: Some(dlogits),
            })
        }
    }
}

/// Loss-block backward that reuses the logits buffer for the gradient.
pub fn loss_backward_owned<F: Element>(
    logits: Tensor<F>,
    step: &StepInput,
) -> Result<BlockGrads<F>> {
    let (_, dlogits) = ops::softmax_xent_in_place(logits, &step.targets)?;
    Ok(BlockGrads {
        lora: BTreeMap::new(),
        input_grad: Some(dlogits),
    })
}
