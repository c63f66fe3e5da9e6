//! Token/id mapping with the reserved special prefix.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
/// `BOS_1..BOS_4` occupy ids 4..=7; `bos_k(k)` resolves them.
pub const BOS_K_BASE: u32 = 4;
pub const MAX_CHUNK: usize = 4;
/// First content-token id.
pub const RESERVED: u32 = 8;

/// Chunk-specific start symbol.
pub fn bos_k(k: usize) -> Result<u32> {
    if k == 0 || k > MAX_CHUNK {
        return Err(Error::Config(format!("chunk size {k} outside reserved range 1..={MAX_CHUNK}")));
    }
    Ok(BOS_K_BASE + (k as u32 - 1))
}

/// True for PAD/BOS/EOS/MASK/BOS_k.
pub fn is_special(id: u32) -> bool {
    id < RESERVED
}

/// Ordered token table. Ids are stable and contiguous: the reserved specials
/// first, then content tokens in insertion order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

const SPECIAL_TOKENS: [&str; 8] =
    ["<pad>", "<bos>", "<eos>", "<mask>", "<bos_1>", "<bos_2>", "<bos_3>", "<bos_4>"];

impl Vocab {
    /// Vocabulary with `content` generated tokens (`t00`, `t01`, ...).
    pub fn synthetic(content: usize) -> Self {
        Self::from_content_tokens((0..content).map(|i| format!("t{i:02}")))
    }

    pub fn from_content_tokens<I: IntoIterator<Item = String>>(content: I) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn content_size(&self) -> usize {
        self.tokens.len() - RESERVED as usize
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range (vocab {})", self.size())))
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown token {token:?}")))
    }

    /// Parse one space-separated line into content-token ids.
    pub fn encode_line(&self, line: &str) -> Result<Vec<u32>> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Render ids as a space-separated line.
    pub fn decode_line(&self, ids: &[u32]) -> Result<String> {
        let toks: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(toks?.join(" "))
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        if tokens.len() < RESERVED as usize
            || SPECIAL_TOKENS.iter().zip(tokens.iter()).any(|(a, b)| a != b)
        {
            return Err(Error::Vocab(format!("{}: missing reserved special prefix", path.display())));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocab { tokens, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_pinned() {
        let v = Vocab::synthetic(4);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("<mask>").unwrap(), MASK);
        assert_eq!(bos_k(1).unwrap(), 4);
        assert_eq!(bos_k(4).unwrap(), 7);
        assert!(bos_k(5).is_err());
        assert_eq!(v.id("t00").unwrap(), RESERVED);
    }

    #[test]
    fn lookup_roundtrip() {
        let v = Vocab::synthetic(16);
        for id in 0..v.size() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()).unwrap(), id);
        }
        assert!(v.id("nope").is_err());
        assert!(v.token(999).is_err());
    }

    #[test]
    fn save_load_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::synthetic(8);
        v.save(&path).unwrap();
        let w = Vocab::load(&path).unwrap();
        assert_eq!(v.tokens, w.tokens);
    }
}
