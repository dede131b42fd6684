//! Whitespace tokenizer over a closed vocabulary.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOT: usize = 1;
pub const EOT: usize = 2;

/// Every word a caption, class name or prompt template may contain.
/// Index in this list plus three specials is the token id.
pub const WORDS: &[&str] = &[
    "a", "an", "the", "photo", "of", "picture", "drawing", "sketch", "rendering", "painting", "image", "art", "this",
    "is", "my", "one", "small", "large", "big", "little", "bright", "dark", "blurry", "noisy", "clean", "good", "bad",
    "cropped", "close-up", "low", "resolution", "pixelated", "plain", "simple", "shape", "on", "background", "toy",
    "doodle", "with", "it", "in", "there", "here", "red", "green", "blue", "yellow", "circle", "square", "triangle",
    "cross", "ring", "diamond",
];

pub fn vocab_size() -> usize {
    WORDS.len() + 3
}

pub fn token_id(word: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| i + 3)
        .ok_or_else(|| Error::UnknownToken(word.to_string()))
}

/// `<sot> words… <eot>`, lower-cased, split on whitespace.
pub fn tokenize(text: &str, context_len: usize) -> Result<Vec<usize>> {
    let mut ids = vec![SOT];
    for word in text.split_whitespace() {
        ids.push(token_id(&word.to_lowercase())?);
    }
    ids.push(EOT);
    if ids.len() > context_len {
        return Err(Error::invalid(format!(
            "`{text}` needs {} tokens, context holds {context_len}",
            ids.len()
        )));
    }
    Ok(ids)
}

/// Checks that every word of `text` is in the vocabulary.
pub fn check_words(text: &str) -> Result<()> {
    text.split_whitespace().try_for_each(|w| token_id(&w.to_lowercase()).map(|_| ()))
}
