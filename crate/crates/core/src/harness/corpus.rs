use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::StepInput;
use crate::tensor::Rng;

/// Text to token ids.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    /// One token per byte, vocab 256.
    Byte,
    /// Whitespace-separated words looked up in a fixed list; unknown words map
    /// to the last id.
    WordMap { words: HashMap<String, u32> },
}

impl Tokenizer {
    /// One word per line; line `i` gets id `i`, and `<unk>` follows the list.
    pub fn word_map_from_file(path: &Path) -> Result<Self> {
        Self::word_map_from_str(&std::fs::read_to_string(path)?)
    }

    pub fn word_map_from_str(list: &str) -> Result<Self> {
        let mut words = HashMap::new();
        for w in list.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let id = words.len() as u32;
            words.entry(w.to_owned()).or_insert(id);
        }
        if words.is_empty() {
            return Err(Error::Config("empty word map".into()));
        }
        Ok(Tokenizer::WordMap { words })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::WordMap { words } => words.len() + 1,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Byte => text.bytes().map(u32::from).collect(),
            Tokenizer::WordMap { words } => {
                let unk = words.len() as u32;
                text.split_whitespace()
                    .map(|w| words.get(w).copied().unwrap_or(unk))
                    .collect()
            }
        }
    }
}

/// Fixed-length training and evaluation windows cut from one token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Each window holds `seq_len + 1` tokens: inputs and shifted targets.
    pub train: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
    /// Start offset of every window in the token stream, train then eval.
    pub offsets: Vec<usize>,
    /// FNV-1a over the token stream.
    pub hash: u64,
}

fn fnv1a(tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Corpus {
    /// Cut `n_train + n_eval` non-overlapping windows and assign them to the
    /// two splits in a seeded random order.
    pub fn from_tokens(
        tokens: &[u32],
        vocab_size: usize,
        seq_len: usize,
        n_train: usize,
        n_eval: usize,
        seed: u64,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Sizing("seq_len must be positive".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "ingest",
                index: bad as usize,
                bound: vocab_size,
            });
        }
        let window = seq_len + 1;
        let available = tokens.len() / window;
        let wanted = n_train + n_eval;
        if wanted == 0 || available < wanted {
            return Err(Error::Sizing(format!(
                "{} tokens give {available} windows of {window}; {wanted} requested",
                tokens.len()
            )));
        }
        let mut order: Vec<usize> = (0..available).collect();
        Rng::new(seed, 0x636f_7270).shuffle(&mut order);
        order.truncate(wanted);
        let cut = |j: usize| tokens[j * window..(j + 1) * window].to_vec();
        let (eval_idx, train_idx) = order.split_at(n_eval);
        Ok(Corpus {
            seq_len,
            vocab_size,
            train: train_idx.iter().map(|&j| cut(j)).collect(),
            eval: eval_idx.iter().map(|&j| cut(j)).collect(),
            offsets: train_idx
                .iter()
                .chain(eval_idx)
                .map(|&j| j * window)
                .collect(),
            hash: fnv1a(tokens),
        })
    }

    pub fn from_text(
        text: &str,
        tokenizer: &Tokenizer,
        seq_len: usize,
        n_train: usize,
        n_eval: usize,
        seed: u64,
    ) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Sizing("empty text".into()));
        }
        Self::from_tokens(
            &tokenizer.encode(text),
            tokenizer.vocab_size(),
            seq_len,
            n_train,
            n_eval,
            seed,
        )
    }

    pub fn train_input(&self, i: usize) -> StepInput {
        StepInput::from_sequence(&self.train[i % self.train.len()]).expect("window >= 2")
    }

    pub fn eval_inputs(&self) -> Vec<StepInput> {
        self.eval
            .iter()
            .map(|s| StepInput::from_sequence(s).expect("window >= 2"))
            .collect()
    }
}

/// Read a text file and cut it into windows.
pub fn ingest(
    path: &Path,
    tokenizer: &Tokenizer,
    seq_len: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    Corpus::from_text(&text, tokenizer, seq_len, n_train, n_eval, seed)
}

const WORDS: &[&str] = &[
    "the", "a", "small", "model", "learns", "to", "read", "and", "write", "simple", "text", "on",
    "every", "step", "with", "low", "memory", "each", "block", "runs", "in", "order", "weights",
    "are", "loaded", "when", "needed", "then", "freed", "again",
];

/// Seeded pseudo-English with strong local structure: sentences are walks on
/// a sparse word-transition table, so a small model can learn them quickly.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> String {
    let mut rng = Rng::new(seed, 0x7465_7874);
    let n = WORDS.len();
    let next: Vec<[usize; 3]> = (0..n)
        .map(|_| [rng.below(n), rng.below(n), rng.below(n)])
        .collect();
    let mut out = String::with_capacity(min_bytes + 64);
    let mut w = rng.below(n);
    let mut len = 0;
    while out.len() < min_bytes {
        out.push_str(WORDS[w]);
        len += 1;
        if len >= 6 + rng.below(5) {
            out.push_str(".\n");
            len = 0;
            w = rng.below(n);
        } else {
            out.push(' ');
            // Mostly the first successor, sometimes the others.
            let r = rng.uniform();
            w = next[w][if r < 0.7 {
                0
            } else if r < 0.9 {
                1
            } else {
                2
            }];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        let text = synthetic_text(1, 10 * 1024);
        let c = Corpus::from_text(&text, &Tokenizer::Byte, 64, 16, 4, 3).unwrap();
        assert_eq!(c.train.len(), 16);
        assert_eq!(c.eval.len(), 4);
        assert!(c.train.iter().chain(&c.eval).all(|s| s.len() == 65));
        let mut offs = c.offsets.clone();
        offs.sort_unstable();
        offs.dedup();
        assert_eq!(offs.len(), 20);
    }

    #[test]
    fn deterministic_and_shifted() {
        let text = synthetic_text(2, 8000);
        let a = Corpus::from_text(&text, &Tokenizer::Byte, 32, 10, 5, 9).unwrap();
        let b = Corpus::from_text(&text, &Tokenizer::Byte, 32, 10, 5, 9).unwrap();
        assert_eq!(a, b);
        let stream = Tokenizer::Byte.encode(&text);
        for (seq, &off) in a.train.iter().chain(&a.eval).zip(&a.offsets) {
            let x = StepInput::from_sequence(seq).unwrap();
            for t in 0..x.seq_len() {
                assert_eq!(x.tokens[t], stream[off + t] as usize);
                assert_eq!(x.targets[t], stream[off + t + 1] as usize);
            }
        }
    }

    #[test]
    fn too_small_is_a_sizing_error() {
        assert!(matches!(
            Corpus::from_text("short text", &Tokenizer::Byte, 64, 1, 1, 0),
            Err(Error::Sizing(_))
        ));
        assert!(matches!(
            Corpus::from_text("", &Tokenizer::Byte, 4, 1, 1, 0),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn word_map_tokenizer() {
        let tok = Tokenizer::word_map_from_str("the\nmodel\nlearns\n").unwrap();
        assert_eq!(tok.vocab_size(), 4);
        assert_eq!(tok.encode("the model sings"), vec![0, 1, 3]);
    }
}
