use crate::error::{EloError, Result};

use super::{LangSpec, NEWLINE, SPACE};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const N_SPECIAL: usize = 3;
/// Vocabulary size of the identity byte mapping.
pub const BYTE_VOCAB: usize = 256 + N_SPECIAL;

/// Byte-level tokenizer: specials first, then one id per byte.
///
/// With a vocabulary of at least 259 ids the mapping is the identity
/// `byte + 3`; smaller vocabularies use the sorted alphabet of the languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    to_id: Vec<Option<usize>>,
    to_byte: Vec<u8>,
    vocab_size: usize,
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Tokenizer {
            to_id: (0..256).map(|b| Some(b + N_SPECIAL)).collect(),
            to_byte: (0..=255u8).collect(),
            vocab_size: BYTE_VOCAB,
        }
    }

    pub fn for_alphabet(bytes: &[u8], vocab_size: usize) -> Result<Self> {
        let mut alphabet = bytes.to_vec();
        alphabet.sort_unstable();
        alphabet.dedup();
        if alphabet.len() + N_SPECIAL > vocab_size {
            return Err(EloError::Config(format!(
                "vocab_size {vocab_size} cannot hold {} bytes plus {N_SPECIAL} specials",
                alphabet.len()
            )));
        }
        let mut to_id = vec![None; 256];
        for (i, &b) in alphabet.iter().enumerate() {
            to_id[b as usize] = Some(i + N_SPECIAL);
        }
        Ok(Tokenizer {
            to_id,
            to_byte: alphabet,
            vocab_size,
        })
    }

    /// Tokenizer covering every language plus the shared separators.
    pub fn for_langs(specs: &[&LangSpec], vocab_size: usize) -> Result<Self> {
        if vocab_size >= BYTE_VOCAB {
            return Ok(Self::byte_level());
        }
        let mut bytes = vec![SPACE, NEWLINE];
        for s in specs {
            bytes.extend_from_slice(&s.char_set);
        }
        Self::for_alphabet(&bytes, vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn id(&self, byte: u8) -> Result<usize> {
        self.to_id[byte as usize].ok_or_else(|| EloError::Config(format!("byte {byte:#04x} is not in the vocabulary")))
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        bytes.iter().map(|&b| self.id(b)).collect()
    }

    /// Drops special and unknown ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id >= N_SPECIAL)
            .filter_map(|&id| self.to_byte.get(id - N_SPECIAL).copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mapping() {
        let t = Tokenizer::byte_level();
        assert_eq!(t.encode(b"ab").unwrap(), vec![b'a' as usize + 3, b'b' as usize + 3]);
        assert_eq!(t.decode(&[BOS, 100, EOS]), vec![97]);
        assert_eq!(t.vocab_size(), 259);
    }

    #[test]
    fn truncated_alphabet_fits_64() {
        let t = Tokenizer::for_langs(&[&LangSpec::source(), &LangSpec::target()], 64).unwrap();
        let ids = t.encode(b"ab CD\n").unwrap();
        assert!(ids.iter().all(|&i| (3..64).contains(&i)));
        assert_eq!(t.decode(&ids), b"ab CD\n");
        assert!(t.encode(b"#").is_err());
        assert!(Tokenizer::for_langs(&[&LangSpec::source(), &LangSpec::target()], 40).is_err());
    }
}
