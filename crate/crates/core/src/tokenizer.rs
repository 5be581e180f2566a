//! Tokenizers paired with a [`TokenEmbeddingTable`].
//!
//! Two kinds are supported: a whitespace tokenizer whose vocabulary is the
//! table's token strings, and a byte-level BPE tokenizer loaded from the
//! usual vocab/merges file pair. In both tokenizer files tokens use the
//! table's byte escaping, with a literal space additionally written as
//! `\x20` so merges lines stay splittable.

use std::collections::HashMap;
use std::path::Path;

use crate::embedding_store::{escape_bytes, unescape_token, TokenEmbeddingTable, TokenId};
use crate::{Error, Result};

const UNKNOWN: &[u8] = b"<unk>";

#[derive(Debug, Clone)]
pub enum Tokenizer {
    Whitespace(WhitespaceTokenizer),
    Bpe(BpeTokenizer),
}

impl Tokenizer {
    pub fn whitespace(table: &TokenEmbeddingTable) -> Result<Self> {
        WhitespaceTokenizer::new(table.tokens()).map(Tokenizer::Whitespace)
    }

    pub fn bpe_from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        BpeTokenizer::from_files(vocab, merges).map(Tokenizer::Bpe)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Tokenizer::Whitespace(_) => "whitespace",
            Tokenizer::Bpe(_) => "byte-pair-encoding",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Whitespace(t) => t.tokens.len(),
            Tokenizer::Bpe(t) => t.tokens.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        match self {
            Tokenizer::Whitespace(t) => t.encode(text),
            Tokenizer::Bpe(t) => t.encode(text),
        }
    }

    /// Decodes ids back to text; invalid UTF-8 from perturbed byte tokens is
    /// replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        match self {
            Tokenizer::Whitespace(t) => t.decode(ids),
            Tokenizer::Bpe(t) => t.decode(ids),
        }
    }

    /// Checks that every id this tokenizer can emit indexes into `table`.
    pub fn check_compatible(&self, table: &TokenEmbeddingTable) -> Result<()> {
        if self.vocab_size() > table.vocab_size() {
            return Err(Error::Config(format!(
                "tokenizer vocabulary ({}) is larger than the embedding table ({})",
                self.vocab_size(),
                table.vocab_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    unknown: Option<TokenId>,
}

impl WhitespaceTokenizer {
    pub fn new(vocab: &[Vec<u8>]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(vocab.len());
        let mut ids = HashMap::with_capacity(vocab.len());
        for (id, raw) in vocab.iter().enumerate() {
            let tok = String::from_utf8_lossy(raw).into_owned();
            ids.entry(tok.clone()).or_insert(id as TokenId);
            tokens.push(tok);
        }
        let unknown = ids.get(std::str::from_utf8(UNKNOWN).unwrap()).copied();
        Ok(Self { tokens, ids, unknown })
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.ids
                    .get(w)
                    .copied()
                    .or(self.unknown)
                    .ok_or_else(|| Error::Data(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Data(format!("token id {id} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    tokens: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, TokenId>,
    ranks: HashMap<(Vec<u8>, Vec<u8>), usize>,
}

impl BpeTokenizer {
    pub fn new(vocab: Vec<Vec<u8>>, merges: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(vocab.len());
        for (id, tok) in vocab.iter().enumerate() {
            if ids.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Data(format!(
                    "duplicate vocabulary entry `{}`",
                    escape_bytes(tok, false)
                )));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            let merged = [a.as_slice(), b.as_slice()].concat();
            if !ids.contains_key(&merged) {
                return Err(Error::Data(format!(
                    "merge {} `{} {}` produces a token missing from the vocabulary",
                    rank + 1,
                    escape_bytes(&a, true),
                    escape_bytes(&b, true)
                )));
            }
            ranks.entry((a, b)).or_insert(rank);
        }
        Ok(Self {
            tokens: vocab,
            ids,
            ranks,
        })
    }

    pub fn from_files(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        let vocab_text = read_text(vocab_path)?;
        let mut vocab = Vec::new();
        for (i, line) in vocab_text.lines().enumerate() {
            vocab.push(unescape_token(line).map_err(|m| Error::format(vocab_path, i + 1, m))?);
        }

        let merges_text = read_text(merges_path)?;
        let mut merges = Vec::new();
        for (i, line) in merges_text.lines().enumerate() {
            if line.is_empty() || (i == 0 && line.starts_with("#version")) {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .filter(|(_, b)| !b.contains(' '))
                .ok_or_else(|| Error::format(merges_path, i + 1, "expected `tokenA tokenB`"))?;
            let a = unescape_token(a).map_err(|m| Error::format(merges_path, i + 1, m))?;
            let b = unescape_token(b).map_err(|m| Error::format(merges_path, i + 1, m))?;
            merges.push((a, b));
        }
        Self::new(vocab, merges)
    }

    /// Renders the vocab and merges files read by [`BpeTokenizer::from_files`].
    pub fn render_files(vocab: &[Vec<u8>], merges: &[(Vec<u8>, Vec<u8>)]) -> (String, String) {
        let mut v = String::new();
        for tok in vocab {
            v.push_str(&escape_bytes(tok, true));
            v.push('\n');
        }
        let mut m = String::from("#version: 0.2\n");
        for (a, b) in merges {
            m.push_str(&escape_bytes(a, true));
            m.push(' ');
            m.push_str(&escape_bytes(b, true));
            m.push('\n');
        }
        (v, m)
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            for piece in self.merge_chunk(chunk.as_bytes()) {
                let id = self.ids.get(&piece).copied().ok_or_else(|| {
                    Error::Data(format!(
                        "byte sequence `{}` has no vocabulary entry",
                        escape_bytes(&piece, false)
                    ))
                })?;
                out.push(id);
            }
        }
        Ok(out)
    }

    fn merge_chunk(&self, bytes: &[u8]) -> Vec<Vec<u8>> {
        let mut parts: Vec<Vec<u8>> = bytes.iter().map(|&b| vec![b]).collect();
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && self.ranks.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank) {
                    merged.push([parts[i].as_slice(), parts[i + 1].as_slice()].concat());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::Data(format!("token id {id} outside vocabulary")))?;
            bytes.extend_from_slice(tok);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Splits text into chunks that BPE merges never cross: a word with at most
/// one leading space, or a run of whitespace. Chunks concatenate back to the
/// input.
fn pretokenize(text: &str) -> Vec<&str> {
    let mut runs: Vec<(usize, usize, bool)> = Vec::new();
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        match runs.last_mut() {
            Some((_, end, kind)) if *kind == ws => *end = i + c.len_utf8(),
            _ => runs.push((i, i + c.len_utf8(), ws)),
        }
    }
    let mut chunks = Vec::with_capacity(runs.len());
    let mut carry: Option<usize> = None;
    for (idx, &(start, end, ws)) in runs.iter().enumerate() {
        if ws {
            let next_is_word = idx + 1 < runs.len();
            if next_is_word && text[..end].ends_with(' ') {
                if end - 1 > start {
                    chunks.push(&text[start..end - 1]);
                }
                carry = Some(end - 1);
            } else {
                chunks.push(&text[start..end]);
            }
        } else {
            let from = carry.take().unwrap_or(start);
            chunks.push(&text[from..end]);
        }
    }
    chunks
}
