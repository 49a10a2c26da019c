//! Byte-level BPE tokenizer compatible with GPT-2 `vocab.json` / `merges.txt`
//! assets.
//!
//! Text is pre-tokenized into chunks (contractions, optionally
//! space-prefixed letter/digit/punctuation runs, whitespace), each chunk's
//! UTF-8 bytes are remapped into the printable byte-alphabet, and ranked
//! merges are applied greedily. Encoding is lossless: `decode(encode(s)) == s`
//! for any valid UTF-8 input covered by the vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// The reversible byte -> char remapping used by byte-level BPE vocabularies.
/// Printable bytes map to themselves; the rest are shifted into U+0100..
fn build_byte_maps() -> (Vec<char>, HashMap<char, u8>) {
    let mut byte_to_char = vec!['\0'; 256];
    let printable = (b'!'..=b'~')
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect::<Vec<u8>>();
    let mut shifted = 0u32;
    for b in 0..=255u8 {
        byte_to_char[b as usize] = if printable.contains(&b) {
            char::from_u32(b as u32).unwrap()
        } else {
            let c = char::from_u32(256 + shifted).unwrap();
            shifted += 1;
            c
        };
    }
    let char_to_byte = byte_to_char
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect();
    (byte_to_char, char_to_byte)
}

/// Split text into BPE pre-tokens following the GPT-2 rules: contraction
/// suffixes, runs of letters/digits/other symbols with an optional leading
/// space, and whitespace runs that leave their last space attached to the
/// following chunk.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_end = |idx: usize| {
        if idx < n {
            chars[idx].0
        } else {
            text.len()
        }
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i].1;

        // Contraction suffixes ('s 't 're 've 'm 'll 'd), lowercase only.
        if c == '\'' && i + 1 < n {
            let c1 = chars[i + 1].1;
            let c2 = if i + 2 < n { Some(chars[i + 2].1) } else { None };
            let len = match (c1, c2) {
                ('s' | 't' | 'm' | 'd', _) => Some(2),
                ('r', Some('e')) | ('v', Some('e')) | ('l', Some('l')) => Some(3),
                _ => None,
            };
            if let Some(len) = len {
                out.push(&text[chars[i].0..byte_end(i + len)]);
                i += len;
                continue;
            }
        }

        let class_of = |c: char| {
            if c.is_alphabetic() {
                1u8
            } else if c.is_numeric() {
                2
            } else if c.is_whitespace() {
                3
            } else {
                0
            }
        };

        // Optional single leading space attached to the following run.
        let (start, run_from) = if c == ' ' && i + 1 < n && class_of(chars[i + 1].1) != 3 {
            (i, i + 1)
        } else {
            (i, i)
        };
        let first_class = class_of(chars[run_from].1);

        if first_class == 3 {
            // Whitespace run; if it is followed by a non-space chunk, its
            // last space joins that chunk, any other trailing whitespace
            // char stands alone.
            let mut j = i;
            while j < n && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j == n {
                out.push(&text[chars[i].0..text.len()]);
                i = j;
            } else {
                if j - i > 1 {
                    out.push(&text[chars[i].0..chars[j - 1].0]);
                }
                if chars[j - 1].1 == ' ' {
                    i = j - 1; // reprocessed as the leading space of the next chunk
                } else {
                    out.push(&text[chars[j - 1].0..chars[j].0]);
                    i = j;
                }
            }
            continue;
        }

        // Letter, digit or symbol run (class 1, 2 or 0).
        let mut j = run_from;
        while j < n && class_of(chars[j].1) == first_class {
            j += 1;
        }
        out.push(&text[chars[start].0..byte_end(j)]);
        i = j;
    }
    out
}

/// Byte-level BPE tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: HashMap<(String, String), u32>,
    byte_to_char: Vec<char>,
    char_to_byte: HashMap<char, u8>,
}

impl Tokenizer {
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let size = vocab.len();
        let mut id_to_token = vec![String::new(); size];
        for (token, id) in &vocab {
            let idx = *id as usize;
            if idx >= size {
                return Err(Error::MalformedContainer(format!(
                    "vocab id {id} out of range for {size} entries"
                )));
            }
            id_to_token[idx] = token.clone();
        }
        let merges = merges
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank as u32))
            .collect();
        let (byte_to_char, char_to_byte) = build_byte_maps();
        Ok(Self {
            id_to_token,
            token_to_id: vocab,
            merges,
            byte_to_char,
            char_to_byte,
        })
    }

    /// Load GPT-2-format assets: `vocab.json` (token -> id) and `merges.txt`
    /// (one ranked merge pair per line, `#`-prefixed header allowed).
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab: HashMap<String, u32> = serde_json::from_str(&fs::read_to_string(vocab_path)?)?;
        let mut merges = Vec::new();
        for (lineno, line) in fs::read_to_string(merges_path)?.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (left, right) = line.split_once(' ').ok_or_else(|| Error::ParseError {
                line: lineno + 1,
                msg: format!("expected `left right`, got `{line}`"),
            })?;
            merges.push((left.to_string(), right.to_string()));
        }
        Self::new(vocab, merges)
    }

    /// Write assets in the same format `from_files` reads.
    pub fn to_files(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        let ordered: std::collections::BTreeMap<&str, u32> = self
            .token_to_id
            .iter()
            .map(|(t, id)| (t.as_str(), *id))
            .collect();
        fs::write(vocab_path, serde_json::to_string_pretty(&ordered)?)?;
        let mut ranked: Vec<(&(String, String), &u32)> = self.merges.iter().collect();
        ranked.sort_by_key(|(_, rank)| **rank);
        let mut text = String::from("#version: 0.2\n");
        for ((l, r), _) in ranked {
            text.push_str(l);
            text.push(' ');
            text.push_str(r);
            text.push('\n');
        }
        fs::write(merges_path, text)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    fn bpe(&self, chunk: &str) -> Vec<String> {
        let mut symbols: Vec<String> = chunk
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..symbols.len() - 1 {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merges.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, at)) = best else { break };
            // Merge every occurrence of the lowest-ranked pair, left to right.
            let left = symbols[at].clone();
            let right = symbols[at + 1].clone();
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Encode text into token ids. Fails with [`Error::UnknownSymbol`] when a
    /// merged symbol is absent from the vocabulary (cannot happen with a
    /// full byte-level vocabulary such as GPT-2's).
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            return Err(Error::InputTooShort);
        }
        let mut ids = Vec::new();
        for chunk in pretokenize(text) {
            for symbol in self.bpe(chunk) {
                let id = self
                    .token_to_id
                    .get(&symbol)
                    .ok_or_else(|| Error::UnknownSymbol(symbol.clone()))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// Decode token ids back into text. Exact inverse of `encode`; arbitrary
    /// id sequences that do not form valid UTF-8 are decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self
                .id_to_token
                .get(id as usize)
                .ok_or(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.id_to_token.len(),
                })?;
            for c in token.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => {
                        return Err(Error::UnknownSymbol(c.to_string()));
                    }
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Token text (decoded bytes) for a single id.
    pub fn token_text(&self, id: u32) -> Result<String> {
        self.decode(&[id])
    }
}
