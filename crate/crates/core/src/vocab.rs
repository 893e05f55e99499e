//! Character vocabulary with five reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const SEP: usize = 3;
pub const EOS: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[SEP]", "[EOS]"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

const FORMAT_VERSION: u32 = 1;

/// Token ids produced by [`Vocabulary::encode`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl From<TokenSequence> for Vec<usize> {
    fn from(seq: TokenSequence) -> Self {
        seq.ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        Vocabulary {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        }
    }

    /// Specials followed by every distinct character in order of first appearance.
    pub fn build_from_corpus<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::specials_only().extend_with_corpus(texts).0
    }

    /// Appends unseen characters after the existing ids; returns the new
    /// vocabulary and the number of appended tokens.
    pub fn extend_with_corpus<S: AsRef<str>>(&self, texts: &[S]) -> (Self, usize) {
        let mut grown = self.clone();
        let before = grown.len();
        for ch in texts.iter().flat_map(|t| t.as_ref().chars()) {
            if !grown.index.contains_key(&ch) {
                grown.index.insert(ch, grown.tokens.len());
                grown.tokens.push(ch.to_string());
            }
        }
        let added = grown.len() - before;
        (grown, added)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains_all(&self, text: &str) -> bool {
        text.chars().all(|c| self.index.contains_key(&c))
    }

    pub fn encode(&self, text: &str, add_bos: bool, add_eos: bool) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() + 2);
        if add_bos {
            ids.push(BOS);
        }
        ids.extend(text.chars().map(|c| self.id(c).unwrap_or(UNK)));
        if add_eos {
            ids.push(EOS);
        }
        TokenSequence { ids }
    }

    /// Control tokens render as nothing, UNK as the literal `[UNK]`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len() * 3);
        for (position, &id) in ids.iter().enumerate() {
            match id {
                UNK => out.push_str(SPECIALS[UNK]),
                PAD | BOS | SEP | EOS => {}
                _ => out.push_str(self.token(id).ok_or(Error::TokenOutOfRange {
                    id,
                    position,
                    size: self.len(),
                })?),
            }
        }
        Ok(out)
    }

    /// SHA-256 over the token list; stored in checkpoints to detect mismatches.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: FORMAT_VERSION,
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            tokens: self.tokens.clone(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported vocabulary version {}",
                file.version
            )));
        }
        if file.specials != SPECIALS || file.tokens.len() < NUM_SPECIALS || file.tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::Format("vocabulary specials do not match".into()));
        }
        let mut vocab = Self::specials_only();
        for (id, token) in file.tokens.iter().enumerate().skip(NUM_SPECIALS) {
            let mut chars = token.chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(Error::Format(format!(
                        "token {id} is not a single character: {token:?}"
                    )))
                }
            };
            if vocab.index.insert(ch, id).is_some() {
                return Err(Error::Format(format!("duplicate token {token:?}")));
            }
            vocab.tokens.push(token.clone());
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
