//! Corpus loading, tokenization, sharding, and batch assembly.
//!
//! Splits are positional and deterministic: the first 98% of the stream is
//! train, the next 1% validation, the last 1% test. The vocabulary comes
//! from the train split alone; evaluation text maps unseen symbols to id 0.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TwistError};
use crate::model::TokenBatch;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Char,
    Byte,
}

impl std::str::FromStr for TokenizerKind {
    type Err = TwistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerKind::Char),
            "byte" => Ok(TokenizerKind::Byte),
            other => Err(TwistError::InvalidInput(format!(
                "unknown tokenizer {other:?} (expected char or byte)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub kind: TokenizerKind,
    chars: Vec<char>,
    ids: HashMap<char, u32>,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TokenizerKind::Char => self.chars.len(),
            TokenizerKind::Byte => 256,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.kind {
            TokenizerKind::Char => text
                .chars()
                .map(|c| self.ids.get(&c).copied().unwrap_or(0))
                .collect(),
            TokenizerKind::Byte => text.bytes().map(|b| b as u32).collect(),
        }
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        match self.kind {
            TokenizerKind::Char => tokens
                .iter()
                .map(|&t| self.chars.get(t as usize).copied().unwrap_or('\u{fffd}'))
                .collect(),
            TokenizerKind::Byte => {
                String::from_utf8_lossy(&tokens.iter().map(|&t| t as u8).collect::<Vec<u8>>())
                    .into_owned()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn split(&self, name: &str) -> Result<&[u32]> {
        match name {
            "train" => Ok(&self.train),
            "valid" | "validation" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(TwistError::InvalidInput(format!(
                "unknown split {other:?} (expected train, valid, or test)"
            ))),
        }
    }
}

pub fn load_corpus(path: &Path, kind: TokenizerKind) -> Result<Corpus> {
    if !path.exists() {
        return Err(TwistError::InvalidInput(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    corpus_from_text(&text, kind)
}

pub fn corpus_from_text(text: &str, kind: TokenizerKind) -> Result<Corpus> {
    if text.is_empty() {
        return Err(TwistError::InvalidInput("empty corpus file".into()));
    }
    match kind {
        TokenizerKind::Char => {
            let chars: Vec<char> = text.chars().collect();
            let (train_end, valid_end) = split_points(chars.len());
            let train_chars = &chars[..train_end];

            let mut vocab: Vec<char> = {
                let set: std::collections::BTreeSet<char> = train_chars.iter().copied().collect();
                set.into_iter().collect()
            };
            vocab.sort_unstable();
            if vocab.len() > u16::MAX as usize {
                return Err(TwistError::InvalidInput(format!(
                    "vocab overflow: {} symbols in train split",
                    vocab.len()
                )));
            }
            let ids: HashMap<char, u32> = vocab
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, i as u32))
                .collect();
            let tokenizer = Tokenizer {
                kind,
                chars: vocab,
                ids,
            };
            let enc = |cs: &[char]| -> Vec<u32> {
                cs.iter()
                    .map(|c| tokenizer.ids.get(c).copied().unwrap_or(0))
                    .collect()
            };
            Ok(Corpus {
                train: enc(train_chars),
                valid: enc(&chars[train_end..valid_end]),
                test: enc(&chars[valid_end..]),
                tokenizer,
            })
        }
        TokenizerKind::Byte => {
            let bytes = text.as_bytes();
            let (train_end, valid_end) = split_points(bytes.len());
            let tokenizer = Tokenizer {
                kind,
                chars: Vec::new(),
                ids: HashMap::new(),
            };
            let enc = |bs: &[u8]| bs.iter().map(|&b| b as u32).collect();
            Ok(Corpus {
                train: enc(&bytes[..train_end]),
                valid: enc(&bytes[train_end..valid_end]),
                test: enc(&bytes[valid_end..]),
                tokenizer,
            })
        }
    }
}

/// 98/1/1 boundaries.
fn split_points(n: usize) -> (usize, usize) {
    let train_end = n * 98 / 100;
    let valid_end = n * 99 / 100;
    (train_end, valid_end)
}

/// Number of `seq`-token training windows (each needs one lookahead token).
pub fn window_count(tokens_len: usize, seq: usize) -> usize {
    if tokens_len <= seq {
        0
    } else {
        (tokens_len - 1) / seq
    }
}

/// Contiguous equal shards of the window index space, one per worker.
/// The remainder after equal division is dropped.
pub fn worker_shards(n_windows: usize, workers: usize) -> Vec<Range<usize>> {
    let per = n_windows / workers;
    (0..workers).map(|w| w * per..(w + 1) * per).collect()
}

/// Window visit order for one worker and epoch, reshuffled from the run seed.
pub fn epoch_order(shard: &Range<usize>, rng: &Rng, epoch: usize, worker: usize) -> Vec<usize> {
    let mut order: Vec<usize> = shard.clone().collect();
    let mut r = rng.substream_n(&[0x51AD, epoch as u64, worker as u64]);
    r.shuffle(&mut order);
    order
}

/// Assemble a batch from window indices: window w covers tokens
/// [w·seq, w·seq + seq], inputs and targets shifted by one.
pub fn make_batch(tokens: &[u32], windows: &[usize], seq: usize) -> Result<TokenBatch> {
    let b = windows.len();
    let mut inputs = Vec::with_capacity(b * seq);
    let mut targets = Vec::with_capacity(b * seq);
    for &w in windows {
        let start = w * seq;
        inputs.extend_from_slice(&tokens[start..start + seq]);
        targets.extend_from_slice(&tokens[start + 1..start + seq + 1]);
    }
    TokenBatch::new(inputs, targets, b, seq)
}

/// Consecutive evaluation batches over a split (no shuffling, last short
/// batch kept).
pub fn eval_batches(tokens: &[u32], batch_size: usize, seq: usize) -> Result<Vec<TokenBatch>> {
    let n = window_count(tokens.len(), seq);
    if n == 0 {
        return Err(TwistError::InvalidInput(format!(
            "empty split: {} tokens is shorter than one {seq}-token window",
            tokens.len()
        )));
    }
    let mut out = Vec::new();
    let mut w = 0;
    while w < n {
        let take = batch_size.min(n - w);
        let windows: Vec<usize> = (w..w + take).collect();
        out.push(make_batch(tokens, &windows, seq)?);
        w += take;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abab_char_vocab_is_two() {
        let c = corpus_from_text("abab", TokenizerKind::Char).unwrap();
        assert_eq!(c.vocab_size(), 2);
    }

    #[test]
    fn round_trip_on_train_split() {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(50);
        let c = corpus_from_text(&text, TokenizerKind::Char).unwrap();
        let train_text: String = text.chars().take(c.train.len()).collect();
        assert_eq!(c.tokenizer.decode(&c.train), train_text);
        assert_eq!(c.tokenizer.encode(&train_text), c.train);
    }

    #[test]
    fn splits_are_deterministic_and_98_1_1() {
        let text = "x".repeat(1000);
        let a = corpus_from_text(&text, TokenizerKind::Byte).unwrap();
        let b = corpus_from_text(&text, TokenizerKind::Byte).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 980);
        assert_eq!(a.valid.len(), 10);
        assert_eq!(a.test.len(), 10);
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            corpus_from_text("", TokenizerKind::Char),
            Err(TwistError::InvalidInput(_))
        ));
    }

    #[test]
    fn shards_are_contiguous_and_equal() {
        let shards = worker_shards(103, 4);
        assert_eq!(shards, vec![0..25, 25..50, 50..75, 75..100]);
    }

    #[test]
    fn epoch_order_reshuffles_but_is_reproducible() {
        let rng = Rng::new(7, 0);
        let a = epoch_order(&(0..50), &rng, 0, 1);
        let b = epoch_order(&(0..50), &rng, 0, 1);
        let c = epoch_order(&(0..50), &rng, 1, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
