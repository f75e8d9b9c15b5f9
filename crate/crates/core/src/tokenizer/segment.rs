//! Rule-based sentence splitter.
//!
//! Splits on sentence-final `.`, `!`, or `?` followed by whitespace and an
//! uppercase letter. A fixed abbreviation stop-list suppresses splits after
//! common titles, so "Dr. Smith called." stays one segment. Concatenating
//! the segments reproduces the input modulo whitespace.

/// Tokens (lowercased, final period stripped) that never end a sentence.
const ABBREVIATIONS: &[&str] = &["dr", "mr", "mrs", "ms", "st", "e.g", "i.e", "etc"];

pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut segments = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '.' || c == '!' || c == '?' {
            let mut j = i + 1;
            let mut saw_whitespace = false;
            while j < chars.len() && chars[j].is_whitespace() {
                saw_whitespace = true;
                j += 1;
            }
            let next_is_upper = j < chars.len() && chars[j].is_uppercase();
            let abbreviated = c == '.' && is_abbreviation(&chars, i);
            if saw_whitespace && next_is_upper && !abbreviated {
                let segment: String = chars[start..=i].iter().collect();
                let segment = segment.trim();
                if !segment.is_empty() {
                    segments.push(segment.to_string());
                }
                start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        segments.push(tail.to_string());
    }
    segments
}

/// Looks at the whitespace-delimited token ending at the period `chars[dot]`.
fn is_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut begin = dot;
    while begin > 0 && !chars[begin - 1].is_whitespace() {
        begin -= 1;
    }
    if begin == dot {
        return false;
    }
    let word: String = chars[begin..dot].iter().collect::<String>().to_lowercase();
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.contains(&word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_terminal_punctuation_before_uppercase() {
        assert_eq!(segment_sentences("Hi. Thanks!"), vec!["Hi.", "Thanks!"]);
    }

    #[test]
    fn empty_input_yields_no_segments() {
        assert!(segment_sentences("").is_empty());
        assert!(segment_sentences("   \n ").is_empty());
    }

    #[test]
    fn abbreviations_suppress_the_split() {
        assert_eq!(segment_sentences("Dr. Smith called."), vec!["Dr. Smith called."]);
        assert_eq!(
            segment_sentences("See Mrs. Jones today. Thanks a lot."),
            vec!["See Mrs. Jones today.", "Thanks a lot."]
        );
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(
            segment_sentences("The lab opens at 8 a.m. and closes at noon."),
            vec!["The lab opens at 8 a.m. and closes at noon."]
        );
    }

    #[test]
    fn question_and_exclamation_split_too() {
        assert_eq!(
            segment_sentences("Can you help? I need a refill! Call me."),
            vec!["Can you help?", "I need a refill!", "Call me."]
        );
    }

    #[test]
    fn concatenation_preserves_input_modulo_whitespace() {
        let inputs = [
            "Hi. Thanks! Dr. Lee is great. Bye",
            "One sentence only",
            "Weird   spacing.  Next one!",
        ];
        for input in inputs {
            let joined: String =
                segment_sentences(input).concat().chars().filter(|c| !c.is_whitespace()).collect();
            let original: String = input.chars().filter(|c| !c.is_whitespace()).collect();
            assert_eq!(joined, original, "for {input:?}");
        }
    }
}
