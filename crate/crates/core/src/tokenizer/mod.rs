//! Sentence segmentation, WordPiece vocabulary induction, and
//! encoding/decoding with the pipeline's special tokens.
//!
//! The vocabulary file format is UTF-8 text, one token per line, where the
//! line number is the token id. `[PAD]` is always id 0 so attention masks and
//! padding are unambiguous in checkpoints.

mod segment;
mod vocab;

pub use segment::segment_sentences;
pub use vocab::{build_vocab, Vocabulary, SPECIAL_TOKENS};

use crate::error::{Error, Result};

/// Maximum sequence length including `[CLS]` and `[SEP]`.
pub const MAX_SEQUENCE_LEN: usize = 512;

/// Maximum number of content tokens, leaving room for `[CLS]`/`[SEP]`.
pub const MAX_CONTENT_TOKENS: usize = MAX_SEQUENCE_LEN - 2;

/// An encoded token id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits raw text into word units: special-token literals stay atomic,
/// everything else is lowercased, whitespace-delimited, and split so each
/// non-alphanumeric character stands alone.
pub(crate) fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut rest = text;
    'outer: while !rest.is_empty() {
        // Special tokens are matched verbatim before any normalization.
        for special in SPECIAL_TOKENS {
            if let Some(tail) = rest.strip_prefix(special) {
                words.push(special.to_string());
                rest = tail;
                continue 'outer;
            }
        }
        if let Some(pos) = rest.char_indices().find_map(|(i, _)| {
            SPECIAL_TOKENS.iter().any(|s| rest[i..].starts_with(s)).then_some(i)
        }) {
            split_plain_words(&rest[..pos], &mut words);
            rest = &rest[pos..];
        } else {
            split_plain_words(rest, &mut words);
            break;
        }
    }
    words
}

fn split_plain_words(chunk: &str, out: &mut Vec<String>) {
    for token in chunk.split_whitespace() {
        let mut current = String::new();
        for c in token.chars() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
}

/// Greedy longest-match-first WordPiece encoding.
///
/// With `add_specials` the result is `[CLS] ... [SEP]` and content is
/// truncated to [`MAX_CONTENT_TOKENS`]; without, the full content is
/// returned so callers can filter over-length segments instead.
pub fn encode(vocab: &Vocabulary, text: &str, add_specials: bool) -> TokenSequence {
    let words = pre_tokenize(text);
    let mut ids = Vec::new();
    for word in &words {
        encode_word(vocab, word, &mut ids);
    }
    if add_specials {
        if ids.len() > MAX_CONTENT_TOKENS {
            ids.truncate(MAX_CONTENT_TOKENS);
        }
        let mut full = Vec::with_capacity(ids.len() + 2);
        full.push(vocab.cls_id());
        full.extend_from_slice(&ids);
        full.push(vocab.sep_id());
        ids = full;
    }
    TokenSequence { ids }
}

fn encode_word(vocab: &Vocabulary, word: &str, out: &mut Vec<u32>) {
    if let Some(id) = vocab.id_of(word) {
        out.push(id);
        return;
    }
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        // longest match first
        for end in (start + 1..=chars.len()).rev() {
            let piece: String = chars[start..end].iter().collect();
            let candidate = if start == 0 { piece } else { format!("##{piece}") };
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => {
                // no full cover: the whole word collapses to [UNK]
                out.push(vocab.unk_id());
                return;
            }
        }
    }
    out.extend_from_slice(&pieces);
}

/// Inverse of [`encode`] modulo case: strips special tokens and rejoins
/// `##` continuations without spaces.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut text = String::new();
    for &id in ids {
        let token = vocab
            .token_of(id)
            .ok_or_else(|| Error::invalid_argument(format!("token id {id} out of range")))?;
        if vocab.is_special(id) {
            continue;
        }
        if let Some(cont) = token.strip_prefix("##") {
            text.push_str(cont);
        } else {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(token);
        }
    }
    Ok(text)
}

/// True iff an un-special-wrapped segment fits the 512-token budget once
/// `[CLS]`/`[SEP]` are added.
pub fn filter_segment(seq: &TokenSequence) -> bool {
    seq.len() <= MAX_CONTENT_TOKENS
}
