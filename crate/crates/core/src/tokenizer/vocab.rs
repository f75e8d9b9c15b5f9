//! Subword vocabulary: special tokens, induction by pair merging, and the
//! one-token-per-line file format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::pre_tokenize;

/// The eight special tokens, in id order. `[PAD]` is id 0.
pub const SPECIAL_TOKENS: [&str; 8] =
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[PATIENT]", "[PROVIDER]", "[TOPIC]"];

/// Immutable token inventory with mutually inverse token/id maps.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    special_ids: [u32; 8],
    non_special: Vec<u32>,
}

impl Vocabulary {
    /// Builds from an ordered token list (index = id) and validates the
    /// invariants: no duplicates, all eight special tokens present, `[PAD]`
    /// first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::malformed("vocabulary", format!("empty token at line {i}")));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::malformed("vocabulary", format!("duplicate token {tok:?}")));
            }
        }
        let mut special_ids = [0u32; 8];
        for (slot, name) in special_ids.iter_mut().zip(SPECIAL_TOKENS) {
            *slot = *ids
                .get(name)
                .ok_or_else(|| Error::malformed("vocabulary", format!("missing special token {name}")))?;
        }
        if special_ids[0] != 0 {
            return Err(Error::malformed("vocabulary", "[PAD] must have id 0".to_string()));
        }
        let special_set: BTreeSet<u32> = special_ids.iter().copied().collect();
        let non_special =
            (0..tokens.len() as u32).filter(|id| !special_set.contains(id)).collect();
        Ok(Vocabulary { tokens, ids, special_ids, non_special })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    /// SHA-256 of the serialized file content, hex-encoded.
    pub fn sha256(&self) -> String {
        crate::checkpoint::sha256_hex(self.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special_ids.contains(&id)
    }

    /// Token ids that are not special, in ascending order.
    pub fn non_special_ids(&self) -> &[u32] {
        &self.non_special
    }

    pub fn pad_id(&self) -> u32 {
        self.special_ids[0]
    }
    pub fn unk_id(&self) -> u32 {
        self.special_ids[1]
    }
    pub fn cls_id(&self) -> u32 {
        self.special_ids[2]
    }
    pub fn sep_id(&self) -> u32 {
        self.special_ids[3]
    }
    pub fn mask_id(&self) -> u32 {
        self.special_ids[4]
    }
    pub fn patient_id(&self) -> u32 {
        self.special_ids[5]
    }
    pub fn provider_id(&self) -> u32 {
        self.special_ids[6]
    }
    pub fn topic_id(&self) -> u32 {
        self.special_ids[7]
    }
}

/// Induces a vocabulary from text segments by iterative highest-frequency
/// pair merging, emitting `##` continuations.
///
/// Deterministic given corpus order; frequency ties break on the
/// lexicographically smallest (left, right) pair. Pairs seen fewer than
/// `min_frequency` times never merge.
pub fn build_vocab(corpus: &[String], target_size: usize, min_frequency: u64) -> Result<Vocabulary> {
    // word -> count, in first-seen order for determinism
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for segment in corpus {
        for word in pre_tokenize(segment) {
            if SPECIAL_TOKENS.contains(&word.as_str()) {
                continue;
            }
            *word_counts.entry(word).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::invalid_argument("corpus contains no words".to_string()));
    }

    let mut initial_chars: BTreeSet<String> = BTreeSet::new();
    let mut continuation_chars: BTreeSet<String> = BTreeSet::new();
    let mut words: Vec<(Vec<String>, u64)> = Vec::with_capacity(word_counts.len());
    for (word, count) in &word_counts {
        let mut symbols = Vec::new();
        for (i, c) in word.chars().enumerate() {
            if i == 0 {
                let s = c.to_string();
                initial_chars.insert(s.clone());
                symbols.push(s);
            } else {
                let s = format!("##{c}");
                continuation_chars.insert(s.clone());
                symbols.push(s);
            }
        }
        words.push((symbols, *count));
    }

    let base_size = SPECIAL_TOKENS.len() + initial_chars.len() + continuation_chars.len();
    if target_size <= base_size {
        return Err(Error::invalid_argument(format!(
            "target size {target_size} must exceed the {base_size} special tokens and single characters"
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(initial_chars.iter().cloned());
    tokens.extend(continuation_chars.iter().cloned());
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < target_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for window in symbols.windows(2) {
                *pair_counts
                    .entry((window[0].clone(), window[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // highest count, ties to the lexicographically smallest pair
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(pair, count)| (pair.clone(), *count));
        let Some(((left, right), count)) = best else { break };
        if count < min_frequency.max(1) {
            break;
        }
        let merged = format!("{left}{}", right.strip_prefix("##").unwrap_or(&right));
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if seen.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    Vocabulary::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_word_grows_merged_units() {
        let corpus = vec!["aaaa ".repeat(100).trim().to_string()];
        let vocab = build_vocab(&corpus, 20, 1).unwrap();
        assert!(vocab.id_of("a").is_some());
        assert!(
            vocab.id_of("aa").is_some() || vocab.id_of("##aa").is_some(),
            "expected a merged unit, got {:?}",
            vocab.to_text()
        );
    }

    #[test]
    fn special_tokens_always_present() {
        let corpus = vec!["hello there".to_string()];
        let vocab = build_vocab(&corpus, 64, 1).unwrap();
        for name in SPECIAL_TOKENS {
            assert!(vocab.id_of(name).is_some(), "missing {name}");
        }
        assert_eq!(vocab.id_of("[PAD]"), Some(0));
        assert!(vocab.id_of("[PATIENT]").is_some());
        assert!(vocab.id_of("[PROVIDER]").is_some());
    }

    #[test]
    fn unreachable_min_frequency_keeps_character_level() {
        let corpus = vec!["abc abc".to_string()];
        let vocab = build_vocab(&corpus, 100, 1000).unwrap();
        // specials + {a, b, c} + {##b, ##c}
        assert_eq!(vocab.len(), 8 + 3 + 2);
    }

    #[test]
    fn too_small_target_is_rejected() {
        let corpus = vec!["abcdef".to_string()];
        let err = build_vocab(&corpus, 5, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn induction_is_deterministic() {
        let corpus = vec![
            "the blood draw went well".to_string(),
            "thank you for the blood work".to_string(),
        ];
        let a = build_vocab(&corpus, 80, 1).unwrap();
        let b = build_vocab(&corpus, 80, 1).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn maps_are_mutually_inverse_and_dense() {
        let corpus = vec!["one two three".to_string()];
        let vocab = build_vocab(&corpus, 40, 1).unwrap();
        for id in 0..vocab.len() as u32 {
            let tok = vocab.token_of(id).unwrap();
            assert_eq!(vocab.id_of(tok), Some(id));
        }
    }

    #[test]
    fn file_round_trip_is_identity() {
        let corpus = vec!["round trip check".to_string()];
        let vocab = build_vocab(&corpus, 48, 1).unwrap();
        let reparsed = Vocabulary::from_text(&vocab.to_text()).unwrap();
        assert_eq!(vocab.to_text(), reparsed.to_text());
        assert_eq!(vocab.sha256(), reparsed.sha256());
    }

    #[test]
    fn duplicate_or_missing_specials_rejected() {
        assert!(Vocabulary::from_text("[PAD]\n[PAD]\n").is_err());
        assert!(Vocabulary::from_text("[PAD]\n[UNK]\n").is_err());
        let mut lines: Vec<&str> = SPECIAL_TOKENS.to_vec();
        lines.rotate_left(1); // [PAD] no longer id 0
        assert!(Vocabulary::from_text(&lines.join("\n")).is_err());
    }
}
