//! Token id layout shared by the task, the model and the decoders.
//!
//! Ids `0..256` are action bins; the six specials sit above them.

/// Token id.
pub type TokenId = u32;

pub const ACTION_BINS: u32 = 256;
pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
pub const OBS: TokenId = 260;
pub const INSTR: TokenId = 261;
pub const VOCAB_SIZE: usize = 262;

pub fn is_action(id: TokenId) -> bool {
    id < ACTION_BINS
}

/// An ordered block of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    /// Checks that every id is below `vocab`.
    pub fn validate(&self, vocab: usize) -> crate::Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&t) => Err(crate::Error::Index {
                index: t as usize,
                limit: vocab,
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSequence(v)
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}
