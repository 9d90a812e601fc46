//! Sentence-level BLEU over punctuation-aware tokens.
//!
//! Score = BP · exp(mean over n of ln pₙ), with clipped n-gram precisions pₙ
//! and brevity penalty BP = exp(1 − r/c) when the candidate is shorter than
//! the reference. The mean runs over n = 1..=min(max_n, |c|, |r|) so that
//! short sequences are not scored zero only for lacking long n-grams.

use std::collections::HashMap;

/// Numerator used in place of a zero match count when smoothing is enabled.
pub const SMOOTHING_EPSILON: f64 = 1e-9;

const SPLIT_CHARS: &[char] = &['{', '}', '[', ']', ':', ',', '"', '=', ';'];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    /// Empty tokens are dropped.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tokens: tokens.into_iter().map(Into::into).filter(|t| !t.is_empty()).collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BleuError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("max_n must be at least 1")]
    InvalidOrder,
    #[error("no pairs to average")]
    NoPairs,
}

/// Splits on whitespace, then isolates each of `{ } [ ] : , " = ;`.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, ch) in word.char_indices() {
            if SPLIT_CHARS.contains(&ch) {
                if start < i {
                    tokens.push(word[start..i].to_string());
                }
                tokens.push(ch.to_string());
                start = i + ch.len_utf8();
            }
        }
        if start < word.len() {
            tokens.push(word[start..].to_string());
        }
    }
    TokenSequence { tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: false,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

pub fn sentence_bleu(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    config: BleuConfig,
) -> Result<f64, BleuError> {
    if config.max_n == 0 {
        return Err(BleuError::InvalidOrder);
    }
    if reference.is_empty() {
        return Err(BleuError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let (c, r) = (candidate.len(), reference.len());
    let order = config.max_n.min(c).min(r);

    let mut log_sum = 0.0;
    for n in 1..=order {
        let cand = ngram_counts(candidate.tokens(), n);
        let refc = ngram_counts(reference.tokens(), n);
        let total = c - n + 1;
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let numerator = if matched == 0 {
            if !config.smoothing {
                return Ok(0.0);
            }
            SMOOTHING_EPSILON
        } else {
            matched as f64
        };
        log_sum += (numerator / total as f64).ln();
    }
    let precision = (log_sum / order as f64).exp();
    let brevity = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(brevity * precision)
}

/// Mean of default-configured sentence BLEU over tokenized `(candidate, reference)` pairs.
pub fn average_bleu<C, R>(pairs: &[(C, R)]) -> Result<f64, BleuError>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(BleuError::NoPairs);
    }
    let mut sum = 0.0;
    for (c, r) in pairs {
        sum += sentence_bleu(&tokenize(c.as_ref()), &tokenize(r.as_ref()), BleuConfig::default())?;
    }
    Ok(sum / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TokenSequence {
        TokenSequence::new(s.split_whitespace())
    }

    #[test]
    fn tokenize_isolates_json_punctuation() {
        assert_eq!(
            tokenize(r#"{"name": "navigate"}"#).tokens(),
            &["{", "\"", "name", "\"", ":", "\"", "navigate", "\"", "}"]
        );
        assert_eq!(tokenize("scan").tokens(), &["scan"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("[x=1;").tokens(), &["[", "x", "=", "1", ";"]);
    }

    #[test]
    fn identity_and_disjoint() {
        let x = seq("navigate to the main hall");
        assert_eq!(sentence_bleu(&x, &x, BleuConfig::default()).unwrap(), 1.0);
        assert_eq!(sentence_bleu(&seq("a b c d"), &x, BleuConfig::default()).unwrap(), 0.0);
        assert_eq!(sentence_bleu(&seq("scan"), &seq("scan"), BleuConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn four_gram_miss() {
        let c = seq("navigate to the hall");
        let r = seq("navigate to the main hall");
        assert_eq!(sentence_bleu(&c, &r, BleuConfig::default()).unwrap(), 0.0);
        let smoothed = sentence_bleu(&c, &r, BleuConfig { max_n: 4, smoothing: true }).unwrap();
        // p = (4/4, 2/3, 1/2, 1e-9/1), BP = exp(1 - 5/4)
        let expected = ((1.0f64 * (2.0 / 3.0) * 0.5 * 1e-9).powf(0.25)) * (-0.25f64).exp();
        assert!((smoothed - expected).abs() < 1e-15, "{smoothed} vs {expected}");
        assert!(smoothed > 0.0);
    }

    #[test]
    fn errors_and_empty_candidate() {
        let r = seq("a b");
        assert_eq!(sentence_bleu(&TokenSequence::default(), &r, BleuConfig::default()), Ok(0.0));
        assert_eq!(sentence_bleu(&r, &TokenSequence::default(), BleuConfig::default()), Err(BleuError::EmptyReference));
        assert_eq!(sentence_bleu(&r, &r, BleuConfig { max_n: 0, smoothing: false }), Err(BleuError::InvalidOrder));
        assert_eq!(average_bleu::<&str, &str>(&[]), Err(BleuError::NoPairs));
    }

    #[test]
    fn averages() {
        assert_eq!(average_bleu(&[("a b c", "a b c"), ("x y", "x y")]).unwrap(), 1.0);
        assert_eq!(average_bleu(&[("a b c", "a b c"), ("q", "a b c")]).unwrap(), 0.5);
    }

    #[test]
    fn truncation_lowers_score() {
        let r = seq("one two three four five six");
        let full = sentence_bleu(&r, &r, BleuConfig::default()).unwrap();
        let mut prev = full;
        for m in (1..r.len()).rev() {
            let c = TokenSequence::new(r.tokens()[..m].iter().cloned());
            let s = sentence_bleu(&c, &r, BleuConfig::default()).unwrap();
            assert!(s < prev, "len {m}: {s} !< {prev}");
            prev = s;
        }
    }
}
