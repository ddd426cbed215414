use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
const FIRST_SENTINEL: u32 = 3;

pub const DEFAULT_SENTINELS: usize = 16;

/// Character-level vocabulary.
///
/// Ids: `0` pad, `1` bos, `2` sep, then a contiguous block of sentinels, then
/// newline and printable ASCII (`' '..='~'`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    num_sentinels: usize,
    char_to_id: BTreeMap<char, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(DEFAULT_SENTINELS)
    }
}

impl Vocab {
    pub fn new(num_sentinels: usize) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<bos>".into(), "<sep>".into()];
        tokens.extend((0..num_sentinels).map(|i| format!("<s{i}>")));
        let chars = std::iter::once('\n').chain(' '..='~');
        let mut char_to_id = BTreeMap::new();
        for c in chars {
            char_to_id.insert(c, tokens.len() as u32);
            tokens.push(c.to_string());
        }
        Vocab {
            tokens,
            num_sentinels,
            char_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn sentinel(&self, i: usize) -> Result<u32> {
        if i >= self.num_sentinels {
            return Err(Error::InvalidExample(format!(
                "sentinel {i} exceeds budget of {}",
                self.num_sentinels
            )));
        }
        Ok(FIRST_SENTINEL + i as u32)
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (FIRST_SENTINEL..FIRST_SENTINEL + self.num_sentinels as u32).contains(&id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.first_regular()
    }

    /// First id of the character block; everything below is structural.
    pub fn first_regular(&self) -> u32 {
        FIRST_SENTINEL + self.num_sentinels as u32
    }

    /// Number of non-special (character) tokens.
    pub fn num_regular(&self) -> usize {
        self.len() - self.first_regular() as usize
    }

    pub fn id_of(&self, c: char) -> Result<u32> {
        self.char_to_id
            .get(&c)
            .copied()
            .ok_or(Error::OutOfAlphabet(c))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::InvalidTokenId(id))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    /// Inverse of [`Vocab::tokenize`]. Pad ids are dropped; other special ids
    /// render as their token strings.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id == PAD {
                continue;
            }
            out.push_str(self.token(id)?);
        }
        Ok(out)
    }

    /// Token string → id mapping, as stored in vocabulary files.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("map serializes")
    }

    /// Reads a vocabulary file and checks it describes this layout exactly.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let num_sentinels = map
            .keys()
            .filter_map(|k| k.strip_prefix("<s")?.strip_suffix('>'))
            .filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
            .count();
        let vocab = Vocab::new(num_sentinels);
        let expected: BTreeMap<String, u32> = vocab
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if map != expected {
            return Err(Error::InvalidSettings(
                "vocabulary file does not match the character-level layout".into(),
            ));
        }
        Ok(vocab)
    }
}
