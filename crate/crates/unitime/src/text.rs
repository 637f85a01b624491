//! Domain instructions: tokenization and embedding lookup.
//!
//! Instructions are a handful of fixed sentences, one per domain, so the
//! vocabulary is built from scratch with a whitespace/punctuation tokenizer
//! and trained jointly with the rest of the model. Encoding is a pure
//! function of (text, vocabulary, table).

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};

/// Id of the reserved padding token.
pub const PAD_TEXT: usize = 0;
/// Id of the reserved unknown-word token.
pub const UNK: usize = 1;

const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Dense token-string-to-id mapping with two reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

/// Lowercases and splits on whitespace and punctuation boundaries.
/// Punctuation is dropped, not kept as tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

impl Vocabulary {
    /// Builds a vocabulary from the instruction corpus. Tokens are assigned
    /// ids in order of first occurrence, after the reserved entries. Every
    /// instruction must yield at least one token.
    pub fn build(instructions: &[&str]) -> Result<Self> {
        if instructions.is_empty() {
            return Err(Error::Config("no instructions to build a vocabulary from".into()));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (i, instruction) in instructions.iter().enumerate() {
            let words = tokenize(instruction);
            if words.is_empty() {
                return Err(Error::Config(format!(
                    "instruction {} ({:?}) yields no tokens",
                    i, instruction
                )));
            }
            for w in words {
                if !tokens.contains(&w) {
                    tokens.push(w);
                }
            }
        }
        Ok(Self { tokens })
    }

    /// Restores a vocabulary from a serialized token list (checkpoint load).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[0] != RESERVED[0] || tokens[1] != RESERVED[1] {
            return Err(Error::Checkpoint(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Token ids for a text; unseen words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|w| self.id_of(w).unwrap_or(UNK))
            .collect()
    }
}

/// Looks up instruction-token embeddings on the tape: one `[len, width]` row
/// block per token, order preserved. Gradients flow back into exactly the
/// selected rows of the table.
pub fn embed_tokens(tape: &mut Tape, table: Var, token_ids: &[usize]) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(Error::InvalidOperand {
            op: "embed_tokens",
            reason: "an instruction must yield at least one token".into(),
        });
    }
    tape.gather_rows(table, token_ids)
}
