//! Partition of the model into an ordered chain of checkpoint blocks, its
//! JSON manifest, and the checks that make a manifest safe to run.
//!
//! Block indices are 1-based. Checkpoint `ckpt0` is the token input; block
//! `i` reads `ckpt{i-1}` and writes `ckpt{i}`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::block::BlockKind;
use crate::model::{names, LoraState, ModelConfig, Projection};
use crate::quant::QuantizedWeightStore;

pub const MANIFEST_VERSION: u32 = 1;

/// One axis of a checkpoint shape. `Seq` is the sequence length, bound at
/// step time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    Seq,
    Fixed(usize),
}

impl Dim {
    pub fn resolve(self, seq_len: usize) -> usize {
        match self {
            Dim::Seq => seq_len,
            Dim::Fixed(n) => n,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Seq => f.write_str("seq"),
            Dim::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Dim {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Dim::Seq => s.serialize_str("seq"),
            Dim::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Dim {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Dim::Fixed(n as usize)),
            Raw::S(s) if s == "seq" => Ok(Dim::Seq),
            Raw::S(s) => Err(serde::de::Error::custom(format!("unknown dim `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub id: String,
    pub shape: Vec<Dim>,
}

impl CheckpointRef {
    fn new(index: usize, shape: Vec<Dim>) -> Self {
        CheckpointRef {
            id: format!("ckpt{index}"),
            shape,
        }
    }

    pub fn resolve(&self, seq_len: usize) -> Vec<usize> {
        self.shape.iter().map(|d| d.resolve(seq_len)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub index: usize,
    pub name: String,
    #[serde(flatten)]
    pub kind: BlockKind,
    pub input: CheckpointRef,
    pub output: CheckpointRef,
    pub frozen: Vec<String>,
    pub adapters: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGraph {
    pub version: u32,
    pub config: ModelConfig,
    pub blocks: Vec<BlockSpec>,
}

impl BlockGraph {
    /// Embedding, one block per layer, final norm + head, loss.
    pub fn compile(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let act = vec![Dim::Seq, Dim::Fixed(cfg.d_model)];
        let mut blocks = Vec::with_capacity(cfg.n_layers + 3);
        let mut push = |kind: BlockKind, input: Vec<Dim>, output: Vec<Dim>, frozen, adapters| {
            let index = blocks.len() + 1;
            blocks.push(BlockSpec {
                index,
                name: kind.to_string(),
                kind,
                input: CheckpointRef::new(index - 1, input),
                output: CheckpointRef::new(index, output),
                frozen,
                adapters,
            });
        };
        push(
            BlockKind::Embedding,
            vec![Dim::Seq, Dim::Fixed(1)],
            act.clone(),
            vec![names::TOK_EMB.to_owned()],
            vec![],
        );
        for l in 0..cfg.n_layers {
            let mut frozen = vec![names::attn_norm(l), names::mlp_norm(l)];
            frozen.extend(Projection::ALL.iter().map(|&p| names::proj(l, p)));
            let adapters = Projection::ALL
                .iter()
                .filter(|p| cfg.lora_targets.contains(p))
                .map(|&p| names::adapter(l, p))
                .collect();
            push(
                BlockKind::TransformerLayer { layer: l },
                act.clone(),
                act.clone(),
                frozen,
                adapters,
            );
        }
        push(
            BlockKind::FinalLinear,
            act.clone(),
            vec![Dim::Seq, Dim::Fixed(cfg.vocab_size)],
            vec![names::FINAL_NORM.to_owned(), names::LM_HEAD.to_owned()],
            vec![],
        );
        push(
            BlockKind::Loss,
            vec![Dim::Seq, Dim::Fixed(cfg.vocab_size)],
            vec![Dim::Fixed(1)],
            vec![],
            vec![],
        );
        let g = BlockGraph {
            version: MANIFEST_VERSION,
            config: cfg.clone(),
            blocks,
        };
        g.validate()?;
        Ok(g)
    }

    /// Number of blocks `n`.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block by 1-based index.
    pub fn block(&self, index: usize) -> Result<&BlockSpec> {
        index
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i))
            .ok_or(Error::UnknownBlock(index))
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &BlockSpec> {
        self.blocks.iter()
    }

    pub fn adapter_ids(&self) -> BTreeSet<&str> {
        self.blocks
            .iter()
            .flat_map(|b| b.adapters.iter().map(String::as_str))
            .collect()
    }

    /// Structure, shape chain and coverage.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        self.config.validate()?;
        let n = self.blocks.len();
        if n < 3 {
            return Err(Error::GraphStructure(format!(
                "{n} blocks; need at least 3"
            )));
        }
        let count =
            |pred: fn(&BlockKind) -> bool| self.blocks.iter().filter(|b| pred(&b.kind)).count();
        if self.blocks[0].kind != BlockKind::Embedding || count(|k| *k == BlockKind::Embedding) != 1
        {
            return Err(Error::GraphStructure(
                "the embedding must be the first and only embedding block".into(),
            ));
        }
        if self.blocks[n - 1].kind != BlockKind::Loss || count(|k| *k == BlockKind::Loss) != 1 {
            return Err(Error::GraphStructure("exactly one loss block, last".into()));
        }
        if self.blocks[n - 2].kind != BlockKind::FinalLinear
            || count(|k| *k == BlockKind::FinalLinear) != 1
        {
            return Err(Error::GraphStructure(
                "exactly one final_linear block, second to last".into(),
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.index != i + 1 {
                return Err(Error::ChainBroken {
                    index: i + 1,
                    detail: format!("block `{}` carries index {}", b.name, b.index),
                });
            }
            if b.input.id != format!("ckpt{i}") || b.output.id != format!("ckpt{}", i + 1) {
                return Err(Error::ChainBroken {
                    index: b.index,
                    detail: format!("checkpoint ids {} -> {}", b.input.id, b.output.id),
                });
            }
            if i > 0 && b.input.shape != self.blocks[i - 1].output.shape {
                return Err(Error::ChainBroken {
                    index: b.index,
                    detail: format!(
                        "input {:?} does not match previous output {:?}",
                        b.input.shape,
                        self.blocks[i - 1].output.shape
                    ),
                });
            }
        }
        // Layers must appear in order so that the composed function is the model.
        let layers: Vec<usize> = self
            .blocks
            .iter()
            .filter_map(|b| match b.kind {
                BlockKind::TransformerLayer { layer } => Some(layer),
                _ => None,
            })
            .collect();
        if layers != (0..self.config.n_layers).collect::<Vec<_>>() {
            return Err(Error::ChainBroken {
                index: 0,
                detail: format!("layer order {layers:?}"),
            });
        }
        let mut seen = BTreeSet::new();
        for b in &self.blocks {
            for t in &b.frozen {
                if !seen.insert(t.as_str()) {
                    return Err(Error::GraphStructure(format!("tensor `{t}` claimed twice")));
                }
            }
        }
        let expected: BTreeSet<String> = self
            .config
            .frozen_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let claimed: BTreeSet<String> = seen.into_iter().map(str::to_owned).collect();
        if let Some(missing) = expected.difference(&claimed).next() {
            return Err(Error::GraphStructure(format!(
                "frozen tensor `{missing}` not in any block"
            )));
        }
        if let Some(extra) = claimed.difference(&expected).next() {
            return Err(Error::DanglingTensor(extra.clone()));
        }
        Ok(())
    }

    /// Every referenced frozen tensor must exist in `store` with the shape
    /// the config implies.
    pub fn validate_store(&self, store: &QuantizedWeightStore) -> Result<()> {
        let shapes: std::collections::BTreeMap<String, Vec<usize>> =
            self.config.frozen_tensors().into_iter().collect();
        for b in &self.blocks {
            for t in &b.frozen {
                let e = store
                    .entry(t)
                    .map_err(|_| Error::DanglingTensor(t.clone()))?;
                if let Some(s) = shapes.get(t) {
                    if &e.shape != s {
                        return Err(Error::dim(
                            "validate_store",
                            format!("`{t}` stored as {:?}, expected {s:?}", e.shape),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Graph adapters and LoRA state must name the same set.
    pub fn validate_lora<F: crate::tensor::Element>(&self, lora: &LoraState<F>) -> Result<()> {
        let ids = self.adapter_ids();
        for id in &ids {
            if !lora.contains(id) {
                return Err(Error::DanglingAdapter((*id).to_owned()));
            }
        }
        if let Some(extra) = lora.ids().find(|id| !ids.contains(id)) {
            return Err(Error::UnknownAdapter(extra.to_owned()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph is always serialisable");
        s.push('\n');
        s
    }

    /// Parse and structurally validate.
    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            version: u32,
        }
        let head: Head = serde_json::from_str(s)?;
        if head.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: head.version,
                expected: MANIFEST_VERSION,
            });
        }
        let g: BlockGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn serialize_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn deserialize_manifest(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn four_layers_give_seven_blocks() {
        let g = BlockGraph::compile(&cfg(4)).unwrap();
        let names: Vec<_> = g.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "emb",
                "layer1",
                "layer2",
                "layer3",
                "layer4",
                "final_linear",
                "loss"
            ]
        );
        assert_eq!(BlockGraph::compile(&cfg(1)).unwrap().len(), 4);
    }

    #[test]
    fn manifest_is_byte_stable_and_roundtrips() {
        let g = BlockGraph::compile(&cfg(3)).unwrap();
        let a = g.to_json();
        assert_eq!(a, BlockGraph::compile(&cfg(3)).unwrap().to_json());
        let back = BlockGraph::from_json(&a).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), a);
        assert!(a.contains("\"seq\""));
    }

    #[test]
    fn version_mismatch() {
        let s = BlockGraph::compile(&cfg(1)).unwrap().to_json().replacen(
            "\"version\": 1",
            "\"version\": 9",
            1,
        );
        assert!(matches!(
            BlockGraph::from_json(&s),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn swapping_layers_breaks_the_chain() {
        let mut g = BlockGraph::compile(&cfg(3)).unwrap();
        g.blocks.swap(1, 2);
        assert!(matches!(g.validate(), Err(Error::ChainBroken { .. })));
        // Even with indices and checkpoint ids patched up, the order is caught.
        for (i, b) in g.blocks.iter_mut().enumerate() {
            b.index = i + 1;
            b.input.id = format!("ckpt{i}");
            b.output.id = format!("ckpt{}", i + 1);
        }
        assert!(matches!(g.validate(), Err(Error::ChainBroken { .. })));
    }

    #[test]
    fn shape_edit_breaks_the_chain() {
        let mut g = BlockGraph::compile(&cfg(2)).unwrap();
        g.blocks[2].input.shape[1] = Dim::Fixed(7);
        assert!(matches!(
            g.validate(),
            Err(Error::ChainBroken { index: 3, .. })
        ));
    }

    #[test]
    fn structure_and_coverage() {
        let mut g = BlockGraph::compile(&cfg(2)).unwrap();
        g.blocks[1].frozen.pop();
        assert!(matches!(g.validate(), Err(Error::GraphStructure(_))));

        let mut g = BlockGraph::compile(&cfg(2)).unwrap();
        g.blocks[1].frozen.push("ghost".into());
        assert!(matches!(g.validate(), Err(Error::DanglingTensor(_))));

        let mut g = BlockGraph::compile(&cfg(2)).unwrap();
        g.blocks.pop();
        assert!(matches!(g.validate(), Err(Error::GraphStructure(_))));
    }

    #[test]
    fn unknown_block() {
        let g = BlockGraph::compile(&cfg(1)).unwrap();
        assert!(matches!(g.block(0), Err(Error::UnknownBlock(0))));
        assert!(matches!(g.block(5), Err(Error::UnknownBlock(5))));
        assert_eq!(g.block(4).unwrap().kind, BlockKind::Loss);
    }

    #[test]
    fn resolved_shapes() {
        let c = cfg(1);
        let g = BlockGraph::compile(&c).unwrap();
        assert_eq!(g.block(1).unwrap().input.resolve(10), vec![10, 1]);
        assert_eq!(
            g.block(3).unwrap().output.resolve(10),
            vec![10, c.vocab_size]
        );
    }
}
