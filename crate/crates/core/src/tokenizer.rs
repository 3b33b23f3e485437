//! Byte-level tokenizer with a small block of reserved special tokens, plus an
//! optional external vocabulary (one token string per line).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
/// Bytes plus specials 256..=263 (pad, bos, eos, sep, four unused).
pub const BYTE_VOCAB_SIZE: usize = 264;
const FIRST_SPECIAL: TokenId = 256;

#[derive(Debug, Clone, Default)]
pub enum Tokenizer {
    #[default]
    Bytes,
    /// Greedy longest-match over an explicit vocabulary.
    Vocab(Vocab),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
    max_len: usize,
}

impl Vocab {
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(Error::Format("vocab file is empty".into()));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if !t.is_empty() {
                lookup.entry(t.clone()).or_insert(i as TokenId);
            }
        }
        let max_len = tokens.iter().map(String::len).max().unwrap_or(1);
        Ok(Self {
            tokens,
            lookup,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Tokenizer {
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Tokenizer::Vocab(Vocab::from_lines(&text)?))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => BYTE_VOCAB_SIZE,
            Tokenizer::Vocab(v) => v.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        match self {
            Tokenizer::Bytes => Ok(text.bytes().map(TokenId::from).collect()),
            Tokenizer::Vocab(v) => {
                let mut out = Vec::new();
                let mut rest = text;
                while !rest.is_empty() {
                    let mut hit = None;
                    let mut end = rest.len().min(v.max_len);
                    while end > 0 {
                        if rest.is_char_boundary(end) {
                            if let Some(&id) = v.lookup.get(&rest[..end]) {
                                hit = Some((id, end));
                                break;
                            }
                        }
                        end -= 1;
                    }
                    let (id, used) = hit.ok_or_else(|| {
                        Error::Input(format!(
                            "no vocab entry matches text starting at {:?}",
                            rest.chars().next().unwrap_or_default()
                        ))
                    })?;
                    out.push(id);
                    rest = &rest[used..];
                }
                Ok(out)
            }
        }
    }

    /// Decode, skipping special tokens. Invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        match self {
            Tokenizer::Bytes => {
                let bytes: Vec<u8> = ids.iter().filter(|&&t| t < FIRST_SPECIAL).map(|&t| t as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Vocab(v) => ids
                .iter()
                .filter_map(|&t| v.tokens.get(t as usize))
                .map(String::as_str)
                .collect(),
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        match self {
            Tokenizer::Bytes => id >= FIRST_SPECIAL,
            Tokenizer::Vocab(_) => false,
        }
    }
}

/// True for the reserved byte-level specials (pad, bos, eos, sep, unused).
pub fn is_byte_special(id: TokenId) -> bool {
    (FIRST_SPECIAL..BYTE_VOCAB_SIZE as TokenId).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_skip_specials() {
        let t = Tokenizer::Bytes;
        let mut ids = t.encode("héllo").unwrap();
        ids.push(EOS);
        assert_eq!(t.decode(&ids), "héllo");
        assert!(t.is_special(SEP));
        assert!(!t.is_special(b'a' as TokenId));
    }

    #[test]
    fn vocab_prefers_longest_match() {
        let v = Vocab::from_lines("a\nab\nabc\nc\n").unwrap();
        let t = Tokenizer::Vocab(v);
        assert_eq!(t.encode("abcab").unwrap(), vec![2, 1]);
        assert_eq!(t.decode(&[2, 1]), "abcab");
        assert!(matches!(t.encode("z"), Err(Error::Input(_))));
    }
}
