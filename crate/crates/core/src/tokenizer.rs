//! Subword or word-level tokenization matched to a backbone checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const WORD_VOCAB_FILE: &str = "vocab.json";
const HF_TOKENIZER_FILE: &str = "tokenizer.json";

/// Splits on whitespace and separates every punctuation character into its
/// own piece. Shared by the word tokenizer and BLEU.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = None;
        for (i, ch) in chunk.char_indices() {
            if ch.is_alphanumeric() {
                start.get_or_insert(i);
            } else {
                if let Some(s) = start.take() {
                    pieces.push(&chunk[s..i]);
                }
                pieces.push(&chunk[i..i + ch.len_utf8()]);
            }
        }
        if let Some(s) = start {
            pieces.push(&chunk[s..]);
        }
    }
    pieces
}

/// Closed word vocabulary fitted on training text. Ids 0, 1 and 2 are
/// `<pad>`, `</s>` and `<unk>`, matching the T5 layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD_TOKEN || tokens[1] != EOS_TOKEN || tokens[2] != UNK_TOKEN {
            return Err(Error::Tokenizer("word vocabulary must start with <pad>, </s>, <unk>".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(Error::Tokenizer("duplicate entries in word vocabulary".into()));
        }
        Ok(WordTokenizer { tokens, index })
    }

    /// Vocabulary of every piece seen at least `min_count` times, most
    /// frequent first, ties broken lexicographically.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for piece in split_words(text) {
                *counts.entry(piece).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(p, c)| *c >= min_count.max(1) && ![PAD_TOKEN, EOS_TOKEN, UNK_TOKEN].contains(p))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(p, _)| p))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("fitted vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|p| self.index.get(p).copied().unwrap_or(2))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > 1)
            .filter_map(|&id| self.tokens.get(id as usize))
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone)]
pub enum Tokenizer {
    Word(WordTokenizer),
    Pretrained(Box<tokenizers::Tokenizer>),
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tokenizer::Word(w) => write!(f, "Tokenizer::Word({} tokens)", w.len()),
            Tokenizer::Pretrained(t) => write!(f, "Tokenizer::Pretrained({} tokens)", t.get_vocab_size(true)),
        }
    }
}

impl Tokenizer {
    /// Token ids without a trailing end-of-sequence marker.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Word(w) => Ok(w.encode(text)),
            Tokenizer::Pretrained(t) => t
                .encode(text, false)
                .map(|enc| enc.get_ids().to_vec())
                .map_err(|e| Error::Tokenizer(e.to_string())),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::Word(w) => Ok(w.decode(ids)),
            Tokenizer::Pretrained(t) => t.decode(ids, true).map_err(|e| Error::Tokenizer(e.to_string())),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Word(w) => w.len(),
            Tokenizer::Pretrained(t) => t.get_vocab_size(true),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Tokenizer::Word(w) => {
                let path = dir.join(WORD_VOCAB_FILE);
                fs::write(&path, serde_json::to_vec(&w.tokens)?).with_path(path)
            }
            Tokenizer::Pretrained(t) => t
                .save(dir.join(HF_TOKENIZER_FILE), false)
                .map_err(|e| Error::Tokenizer(e.to_string())),
        }
    }

    /// Loads `vocab.json` (word vocabulary) or `tokenizer.json` (HF format).
    pub fn load(dir: &Path) -> Result<Self> {
        let word = dir.join(WORD_VOCAB_FILE);
        if word.exists() {
            let bytes = fs::read(&word).with_path(&word)?;
            let tokens: Vec<String> = serde_json::from_slice(&bytes)?;
            return Ok(Tokenizer::Word(WordTokenizer::from_tokens(tokens)?));
        }
        let hf = dir.join(HF_TOKENIZER_FILE);
        if hf.exists() {
            let t = tokenizers::Tokenizer::from_file(&hf).map_err(|e| Error::Tokenizer(e.to_string()))?;
            return Ok(Tokenizer::Pretrained(Box::new(t)));
        }
        Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("neither {WORD_VOCAB_FILE} nor {HF_TOKENIZER_FILE} present"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            split_words("That's terrible. What?"),
            vec!["That", "'", "s", "terrible", ".", "What", "?"]
        );
        assert_eq!(split_words("Speaker: hi"), vec!["Speaker", ":", "hi"]);
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn word_vocab_is_deterministic_and_maps_unknowns() {
        let tok = WordTokenizer::fit(["b a a", "c b a"], 1);
        assert_eq!(&tok.tokens[3..], &["a", "b", "c"]);
        let tok = Tokenizer::Word(tok);
        assert_eq!(tok.encode("a zzz").unwrap(), vec![3, 2]);
        assert_eq!(tok.decode(&[3, 4, 1, 0]).unwrap(), "a b");
    }

    #[test]
    fn word_vocab_saves_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::Word(WordTokenizer::fit(["hello there"], 1));
        tok.save(dir.path()).unwrap();
        let back = Tokenizer::load(dir.path()).unwrap();
        assert_eq!(back.encode("there hello").unwrap(), tok.encode("there hello").unwrap());
        assert!(Tokenizer::load(tempfile::tempdir().unwrap().path()).is_err());
    }
}
