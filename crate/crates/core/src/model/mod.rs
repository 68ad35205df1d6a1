//! Decoder-only transformer with LoRA adapters, split into checkpoint blocks.
//!
//! Architecture: token embedding, `n_layers` pre-norm layers (RMSNorm, RoPE
//! causal attention, SiLU-gated MLP), a final RMSNorm + linear head, and a
//! cross-entropy loss. Linear weights are stored `[d_out, d_in]` and applied as
//! `x · Wᵀ`.

pub mod block;
mod lora;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub use block::{
    block_backward, block_forward, lora_apply, loss_backward_owned, BlockGrads, StepInput,
};
pub use lora::{AdapterGrad, LoraAdapter, LoraInit, LoraState, Noise, Perturbation};

/// Linear projections inside a transformer layer that may carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    /// `(d_out, d_in)` of the frozen weight.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::Q | Projection::K | Projection::V | Projection::O => {
                (cfg.d_model, cfg.d_model)
            }
            Projection::Gate | Projection::Up => (cfg.d_ff, cfg.d_model),
            Projection::Down => (cfg.d_model, cfg.d_ff),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection `{s}`")))
    }
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_group_size() -> u32 {
    crate::quant::DEFAULT_GROUP_SIZE
}

fn all_targets() -> BTreeSet<Projection> {
    Projection::ALL.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    /// Defaults to `2 · lora_rank` when omitted from a config file.
    #[serde(default)]
    pub lora_alpha: Option<f32>,
    #[serde(default = "all_targets")]
    pub lora_targets: BTreeSet<Projection>,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_group_size")]
    pub group_size: u32,
}

impl Default for ModelConfig {
    /// Desk-scale default: the head (`vocab · d_model`) dominates per-block memory.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 4096,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            lora_rank: 16,
            lora_alpha: None,
            lora_targets: all_targets(),
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            group_size: default_group_size(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient and oracle tests.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            lora_rank: 4,
            lora_alpha: None,
            lora_targets: all_targets(),
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            group_size: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn alpha(&self) -> f32 {
        self.lora_alpha.unwrap_or(2.0 * self.lora_rank as f32)
    }

    pub fn lora_scaling(&self) -> f32 {
        self.alpha() / self.lora_rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("head dimension must be even for RoPE".into()));
        }
        if self.lora_rank > self.d_model.min(self.d_ff) {
            return Err(Error::Config(format!(
                "lora_rank {} exceeds min(d_model, d_ff)",
                self.lora_rank
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        if !(self.norm_eps > 0.0 && self.rope_theta > 0.0) {
            return Err(Error::Config(
                "norm_eps and rope_theta must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Every frozen tensor with its shape, in block order.
    pub fn frozen_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(
            names::TOK_EMB.to_owned(),
            vec![self.vocab_size, self.d_model],
        )];
        for l in 0..self.n_layers {
            out.push((names::attn_norm(l), vec![self.d_model]));
            for p in Projection::ALL {
                if p == Projection::Gate {
                    out.push((names::mlp_norm(l), vec![self.d_model]));
                }
                let (o, i) = p.dims(self);
                out.push((names::proj(l, p), vec![o, i]));
            }
        }
        out.push((names::FINAL_NORM.to_owned(), vec![self.d_model]));
        out.push((
            names::LM_HEAD.to_owned(),
            vec![self.vocab_size, self.d_model],
        ));
        out
    }

    /// Adapter ids with `(d_out, d_in)`, in block order.
    pub fn adapters(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for p in Projection::ALL {
                if self.lora_targets.contains(&p) {
                    let (o, i) = p.dims(self);
                    out.push((names::adapter(l, p), o, i));
                }
            }
        }
        out
    }
}

/// Tensor and adapter naming scheme shared by the store, the graph manifest
/// and the LoRA state.
pub mod names {
    use super::Projection;

    pub const TOK_EMB: &str = "tok_emb";
    pub const FINAL_NORM: &str = "final_norm";
    pub const LM_HEAD: &str = "lm_head";

    pub fn attn_norm(layer: usize) -> String {
        format!("layers.{layer}.attn_norm")
    }

    pub fn mlp_norm(layer: usize) -> String {
        format!("layers.{layer}.mlp_norm")
    }

    pub fn proj(layer: usize, p: Projection) -> String {
        format!("layers.{layer}.w_{p}")
    }

    pub fn adapter(layer: usize, p: Projection) -> String {
        format!("layers.{layer}.{p}")
    }
}

/// Seeded initialisation of the frozen weights: Gaussian linear weights with
/// std `1/√d_in`, unit norm gains, embeddings with std 1.
pub fn init_frozen_weights(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<String, Tensor<f32>>> {
    cfg.validate()?;
    let mut out = BTreeMap::new();
    for (stream, (name, shape)) in cfg.frozen_tensors().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = if shape.len() == 1 {
            vec![1.0f32; n]
        } else {
            let std = if name == names::TOK_EMB {
                1.0
            } else {
                1.0 / (shape[1] as f32).sqrt()
            };
            let mut rng = Rng::new(seed, stream as u64);
            let mut v = vec![0.0f32; n];
            rng.fill_normal(&mut v, std);
            v
        };
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().alpha(), 32.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.lora_rank = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let src = "vocab_size = 256\nd_model = 32\nn_layers = 2\nn_heads = 2\nd_ff = 64\nmax_seq_len = 64\nlora_rank = 8\nlora_targets = [\"q\", \"v\"]\n";
        let cfg = ModelConfig::from_toml_str(src).unwrap();
        assert_eq!(cfg.alpha(), 16.0);
        assert_eq!(cfg.lora_targets.len(), 2);
        assert_eq!(cfg.group_size, 32);
        let again = ModelConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn frozen_inventory_counts() {
        let cfg = ModelConfig::tiny();
        // emb + per layer (2 norms + 7 projections) + final norm + head
        assert_eq!(cfg.frozen_tensors().len(), 1 + 2 * 9 + 2);
        assert_eq!(cfg.adapters().len(), 14);
        let w = init_frozen_weights(&cfg, 1).unwrap();
        assert_eq!(w[names::LM_HEAD].shape(), &[32, 16]);
    }
}
