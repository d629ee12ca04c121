//! Approximate tokenizer used for bottleneck budgets.
//!
//! A token is a maximal run of non-whitespace characters, except that each
//! of `. , ; : ! ?` is a token on its own. Remote models tokenize
//! differently; budgets are enforced with this count after generation.

use std::ops::Range;

pub trait Tokenizer: Send + Sync {
    /// Byte ranges of the tokens in `text`, in order.
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }

    /// Longest prefix of `text` holding at most `budget` tokens.
    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str {
        let spans = self.spans(text);
        if spans.len() <= budget {
            text
        } else if budget == 0 {
            ""
        } else {
            &text[..spans[budget - 1].end]
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ApproxTokenizer;

const PUNCT: [char; 6] = ['.', ',', ';', ':', '!', '?'];

impl Tokenizer for ApproxTokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() || PUNCT.contains(&c) {
                if let Some(s) = start.take() {
                    spans.push(s..i);
                }
                if !c.is_whitespace() {
                    spans.push(i..i + c.len_utf8());
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }
}

pub fn count_tokens(text: &str) -> usize {
    ApproxTokenizer.count(text)
}

pub fn truncate_to_budget(text: &str, budget: usize) -> &str {
    ApproxTokenizer.truncate(text, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("Student masters addition."), 4);
        assert_eq!(count_tokens("a, b"), 3);
        assert_eq!(count_tokens("  spaced\tout\n"), 2);
        assert_eq!(count_tokens("0.05"), 3);
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_to_budget("one two three", 2), "one two");
        assert_eq!(truncate_to_budget("one two three", 5), "one two three");
        assert_eq!(truncate_to_budget("a, b", 2), "a,");
        assert_eq!(truncate_to_budget("a b", 0), "");
    }

    proptest! {
        #[test]
        fn concatenation_is_additive(a in "[a-z .,;:!?]{0,40}", b in "[a-z .,;:!?]{0,40}") {
            prop_assert_eq!(count_tokens(&format!("{a} {b}")), count_tokens(&a) + count_tokens(&b));
        }

        #[test]
        fn truncation_is_monotone(text in "[a-zé .,;\n]{0,80}", b1 in 0usize..30, b2 in 0usize..30) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let short = truncate_to_budget(&text, lo);
            let long = truncate_to_budget(&text, hi);
            prop_assert!(count_tokens(short) <= lo);
            prop_assert!(count_tokens(short) <= count_tokens(long));
            prop_assert!(long.starts_with(short));
        }
    }
}
