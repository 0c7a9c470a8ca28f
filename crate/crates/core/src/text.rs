//! Tokenization shared by the hash embedder, entity extraction and the
//! stand-in decoder.

use std::ops::Range;

/// A lowercased token and the byte range it occupies in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: Range<usize>,
}

/// Splits on every non-alphanumeric character and lowercases the pieces.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text).into_iter().map(|t| t.text).collect()
}

pub fn tokenize_with_spans(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            tokens.push(Token {
                text: text[s..i].to_lowercase(),
                span: s..i,
            });
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: text[s..].to_lowercase(),
            span: s..text.len(),
        });
    }
    tokens
}
