//! Text perturbations (synonym replacement, random insertion, random swap,
//! random deletion) and prompt-fragility sweeps built on them.
//!
//! Text is split into units: each `[x=…; y=…; yaw=…]` marker is one unit,
//! everything else splits on whitespace. Operations move, drop or add whole
//! units, so a marker is either kept intact or removed, never altered.
//! Perturbed output joins units with single spaces.
//!
//! For magnitude `m > 0` and `w` units, the three count-based operations
//! touch `n = max(1, round(m·w))` units; deletion drops each unit with
//! probability `m` and always keeps at least one. Magnitude 0 returns the
//! input unchanged for every kind.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::command::marker_spans;
use crate::prompt::{render_examples_with, BlockKind, PromptDesign};
use crate::provider::CompletionProvider;
use crate::search::{evaluate_item, evaluate_prompt, parallel_map, SearchError, SearchOptions, ValidationItem};

/// Magnitudes of the default sweep grid.
pub const DEFAULT_MAGNITUDES: [f64; 4] = [0.05, 0.1, 0.2, 0.4];
/// Compositional policies above this magnitude draw a warning.
pub const COMPOSITIONAL_MAGNITUDE_CAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    SynonymReplacement,
    RandomInsertion,
    RandomSwap,
    RandomDeletion,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 4] = [
        AugmentationKind::SynonymReplacement,
        AugmentationKind::RandomInsertion,
        AugmentationKind::RandomSwap,
        AugmentationKind::RandomDeletion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationKind::SynonymReplacement => "synonym_replacement",
            AugmentationKind::RandomInsertion => "random_insertion",
            AugmentationKind::RandomSwap => "random_swap",
            AugmentationKind::RandomDeletion => "random_deletion",
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AugmentationKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AugmentError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationOp {
    pub kind: AugmentationKind,
    pub magnitude: f64,
}

impl AugmentationOp {
    pub fn new(kind: AugmentationKind, magnitude: f64) -> Result<Self, AugmentError> {
        if !(0.0..=1.0).contains(&magnitude) {
            return Err(AugmentError::Magnitude(magnitude));
        }
        Ok(Self { kind, magnitude })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub ops: Vec<AugmentationOp>,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn new(ops: Vec<AugmentationOp>, seed: u64) -> Result<Self, AugmentError> {
        if ops.is_empty() {
            return Err(AugmentError::EmptyPolicy);
        }
        if let Some(op) = ops.iter().find(|o| !(0.0..=1.0).contains(&o.magnitude)) {
            return Err(AugmentError::Magnitude(op.magnitude));
        }
        Ok(Self { ops, seed })
    }

    /// SHA-256 over the policy's JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("policy serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Kinds joined with `+`, e.g. `random_swap+random_deletion`.
    pub fn kind_label(&self) -> String {
        self.ops.iter().map(|o| o.kind.as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn magnitude_label(&self) -> String {
        self.ops.iter().map(|o| o.magnitude.to_string()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("magnitude {0} is outside [0, 1]")]
    Magnitude(f64),
    #[error("policy has no operations")]
    EmptyPolicy,
    #[error("{0} needs a non-empty lexicon")]
    EmptyLexicon(AugmentationKind),
    #[error("unknown augmentation kind `{0}`")]
    UnknownKind(String),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("trials must be at least 1")]
    NoTrials,
}

/// Synonyms keyed by lowercase word sequences; multi-word keys such as
/// `move forward` match as phrases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<Vec<String>, Vec<String>>,
    longest_key: usize,
}

impl Lexicon {
    /// Parses `word<TAB>syn1,syn2,...` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, AugmentError> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: &str| AugmentError::Lexicon {
                line: i + 1,
                message: message.to_string(),
            };
            let (key, syns) = line.split_once('\t').ok_or_else(|| err("expected word<TAB>synonyms"))?;
            let syns: Vec<String> = syns
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if key.trim().is_empty() || syns.is_empty() {
                return Err(err("empty word or synonym list"));
            }
            lex.insert(key, syns);
        }
        Ok(lex)
    }

    pub fn insert(&mut self, key: &str, synonyms: Vec<String>) {
        let key: Vec<String> = key.split_whitespace().map(str::to_lowercase).collect();
        self.longest_key = self.longest_key.max(key.len());
        self.entries.entry(key).or_default().extend(synonyms);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn synonyms(&self, phrase: &str) -> Option<&[String]> {
        let key: Vec<String> = phrase.split_whitespace().map(str::to_lowercase).collect();
        self.entries.get(&key).map(Vec::as_slice)
    }
}

/// Lowercase stopwords, never chosen for replacement or as insertion sources.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Unit {
    text: String,
    marker: bool,
}

fn split_units(text: &str) -> Vec<Unit> {
    let mut units = Vec::new();
    let words = |s: &str, units: &mut Vec<Unit>| {
        units.extend(s.split_whitespace().map(|w| Unit {
            text: w.to_string(),
            marker: false,
        }))
    };
    let mut pos = 0;
    for span in marker_spans(text) {
        words(&text[pos..span.start], &mut units);
        units.push(Unit {
            text: text[span.clone()].to_string(),
            marker: true,
        });
        pos = span.end;
    }
    words(&text[pos..], &mut units);
    units
}

fn join_units(units: &[Unit]) -> String {
    units.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join(" ")
}

/// Number of units a text splits into (markers count as one).
pub fn unit_count(text: &str) -> usize {
    split_units(text).len()
}

/// Word with surrounding punctuation removed, lowercased, for lexicon lookup.
fn bare(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// A matched lexicon phrase: unit range and its key.
struct PhraseMatch {
    start: usize,
    len: usize,
    key: Vec<String>,
}

/// Applies perturbations using a lexicon and stopword list.
#[derive(Debug, Clone, Default)]
pub struct Augmenter {
    pub lexicon: Lexicon,
    pub stopwords: Stopwords,
}

impl Augmenter {
    pub fn new(lexicon: Lexicon, stopwords: Stopwords) -> Self {
        Self { lexicon, stopwords }
    }

    /// The lexicon and stopword list shipped with the crate.
    pub fn bundled() -> Self {
        Self::new(
            Lexicon::parse(crate::library::LEXICON).expect("bundled lexicon is valid"),
            Stopwords::parse(crate::library::STOPWORDS),
        )
    }

    /// Non-overlapping lexicon phrases, longest match first, left to right.
    /// Phrases made only of stopwords are skipped.
    fn phrase_matches(&self, units: &[Unit]) -> Vec<PhraseMatch> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < units.len() {
            let mut found = None;
            let max = self.lexicon.longest_key.min(units.len() - i);
            for len in (1..=max).rev() {
                let window = &units[i..i + len];
                if window.iter().any(|u| u.marker) {
                    continue;
                }
                let key: Vec<String> = window.iter().map(|u| bare(&u.text)).collect();
                if key.iter().all(|w| self.stopwords.contains(w)) {
                    continue;
                }
                if self.lexicon.entries.contains_key(&key) {
                    found = Some(PhraseMatch { start: i, len, key });
                    break;
                }
            }
            match found {
                Some(m) => {
                    i += m.len;
                    out.push(m);
                }
                None => i += 1,
            }
        }
        out
    }

    fn pick_synonym<R: Rng + ?Sized>(&self, key: &[String], rng: &mut R) -> String {
        self.lexicon.entries[key].choose(rng).expect("lexicon entries are non-empty").clone()
    }

    /// Applies one operation. The same text, op and generator state always
    /// give the same output.
    pub fn apply_op<R: Rng + ?Sized>(&self, text: &str, op: &AugmentationOp, rng: &mut R) -> Result<String, AugmentError> {
        if !(0.0..=1.0).contains(&op.magnitude) {
            return Err(AugmentError::Magnitude(op.magnitude));
        }
        let needs_lexicon = matches!(op.kind, AugmentationKind::SynonymReplacement | AugmentationKind::RandomInsertion);
        if needs_lexicon && self.lexicon.is_empty() {
            return Err(AugmentError::EmptyLexicon(op.kind));
        }
        if op.magnitude == 0.0 {
            return Ok(text.to_string());
        }
        let mut units = split_units(text);
        if units.is_empty() {
            return Ok(text.to_string());
        }
        let n = ((op.magnitude * units.len() as f64).round() as usize).max(1);
        match op.kind {
            AugmentationKind::SynonymReplacement => self.replace(&mut units, n, rng),
            AugmentationKind::RandomInsertion => self.insert(&mut units, n, rng),
            AugmentationKind::RandomSwap => swap(&mut units, n, rng),
            AugmentationKind::RandomDeletion => delete(&mut units, op.magnitude, rng),
        }
        Ok(join_units(&units))
    }

    fn replace<R: Rng + ?Sized>(&self, units: &mut Vec<Unit>, n: usize, rng: &mut R) {
        let mut matches = self.phrase_matches(units);
        matches.shuffle(rng);
        matches.truncate(n);
        // Replace right to left so earlier ranges stay valid.
        matches.sort_by_key(|m| std::cmp::Reverse(m.start));
        for m in matches {
            let synonym = self.pick_synonym(&m.key, rng);
            let first = &units[m.start].text;
            let last = &units[m.start + m.len - 1].text;
            let lead: String = first.chars().take_while(|c| !c.is_alphanumeric()).collect();
            let trail: String = {
                let t: Vec<char> = last.chars().rev().take_while(|c| !c.is_alphanumeric()).collect();
                t.into_iter().rev().collect()
            };
            let replacement = format!("{lead}{synonym}{trail}");
            let new_units = replacement.split_whitespace().map(|w| Unit {
                text: w.to_string(),
                marker: false,
            });
            units.splice(m.start..m.start + m.len, new_units);
        }
    }

    fn insert<R: Rng + ?Sized>(&self, units: &mut Vec<Unit>, n: usize, rng: &mut R) {
        for _ in 0..n {
            let matches = self.phrase_matches(units);
            let Some(m) = matches.choose(rng) else { return };
            let synonym = self.pick_synonym(&m.key, rng);
            let at = rng.gen_range(0..=units.len());
            let new_units: Vec<Unit> = synonym
                .split_whitespace()
                .map(|w| Unit {
                    text: w.to_string(),
                    marker: false,
                })
                .collect();
            units.splice(at..at, new_units);
        }
    }

    /// Applies the policy's operations in order from one generator seeded
    /// with `policy.seed`.
    pub fn apply_policy(&self, text: &str, policy: &AugmentationPolicy) -> Result<String, AugmentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        self.apply_ops(text, &policy.ops, &mut rng)
    }

    fn apply_ops<R: Rng + ?Sized>(&self, text: &str, ops: &[AugmentationOp], rng: &mut R) -> Result<String, AugmentError> {
        let mut out = text.to_string();
        for op in ops {
            out = self.apply_op(&out, op, rng)?;
        }
        Ok(out)
    }

    /// Renders the design's examples with every visual, language and
    /// rationale line perturbed by the policy. Graph blocks are untouched.
    /// One generator, seeded by the policy, runs across all lines in order.
    pub fn perturb_design(&self, design: &PromptDesign, policy: &AugmentationPolicy) -> Result<String, AugmentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        let mut error = None;
        let text = render_examples_with(design, |kind, line| {
            if kind == BlockKind::Graph || error.is_some() {
                return line.to_string();
            }
            match self.apply_ops(line, &policy.ops, &mut rng) {
                Ok(s) => s,
                Err(e) => {
                    error = Some(e);
                    line.to_string()
                }
            }
        });
        match error {
            Some(e) => Err(e),
            None => Ok(text),
        }
    }
}

fn swap<R: Rng + ?Sized>(units: &mut [Unit], n: usize, rng: &mut R) {
    if units.len() < 2 {
        return;
    }
    for _ in 0..n {
        let i = rng.gen_range(0..units.len());
        let mut j = rng.gen_range(0..units.len() - 1);
        if j >= i {
            j += 1;
        }
        units.swap(i, j);
    }
}

fn delete<R: Rng + ?Sized>(units: &mut Vec<Unit>, p: f64, rng: &mut R) {
    if units.len() <= 1 {
        return;
    }
    let original = std::mem::take(units);
    let keep: Vec<bool> = original.iter().map(|_| !rng.gen_bool(p)).collect();
    if keep.iter().any(|&k| k) {
        *units = original.into_iter().zip(keep).filter_map(|(u, k)| k.then_some(u)).collect();
    } else {
        let i = rng.gen_range(0..original.len());
        *units = vec![original[i].clone()];
    }
}

/// One-op convenience using a fresh generator seeded with `seed`.
pub fn apply_op(augmenter: &Augmenter, text: &str, op: &AugmentationOp, seed: u64) -> Result<String, AugmentError> {
    augmenter.apply_op(text, op, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Four kinds × the given magnitudes, kind-major.
pub fn op_grid(magnitudes: &[f64]) -> Result<Vec<AugmentationOp>, AugmentError> {
    AugmentationKind::ALL
        .iter()
        .flat_map(|&k| magnitudes.iter().map(move |&m| AugmentationOp::new(k, m)))
        .collect()
}

pub fn default_grid() -> Vec<AugmentationOp> {
    op_grid(&DEFAULT_MAGNITUDES).expect("default magnitudes are in range")
}

/// Ordered pairs of distinct grid entries.
pub fn compositional_recipes(grid: &[AugmentationOp]) -> Vec<Vec<AugmentationOp>> {
    let mut out = Vec::new();
    for (i, a) in grid.iter().enumerate() {
        for (j, b) in grid.iter().enumerate() {
            if i != j {
                out.push(vec![*a, *b]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragilityRecord {
    pub policy: AugmentationPolicy,
    pub trial: u64,
    /// SHA-256 of the perturbed example text.
    pub perturbed_prompt_digest: String,
    pub average_bleu: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SweepError {
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Sweep configuration; `base_seed + trial` seeds each trial's policy.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub trials: u64,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { trials: 3, base_seed: 0 }
    }
}

/// Average BLEU of the unperturbed design.
pub fn baseline_score<P>(
    base: &PromptDesign,
    items: &[ValidationItem],
    provider: &P,
    opts: &SearchOptions,
) -> Result<f64, SearchError>
where
    P: CompletionProvider + ?Sized,
{
    evaluate_prompt(base, items, provider, opts).map(|(_, avg)| avg)
}

/// Evaluates each recipe (a list of operations applied in order) for each
/// trial. Records come out recipe-major, then by trial.
pub fn sweep_recipes<P>(
    base: &PromptDesign,
    recipes: &[Vec<AugmentationOp>],
    config: &SweepConfig,
    items: &[ValidationItem],
    augmenter: &Augmenter,
    provider: &P,
    opts: &SearchOptions,
) -> Result<Vec<FragilityRecord>, SweepError>
where
    P: CompletionProvider + ?Sized,
{
    if config.trials == 0 {
        return Err(AugmentError::NoTrials.into());
    }
    if items.is_empty() {
        return Err(SearchError::NoItems.into());
    }
    base.validate().map_err(SearchError::from)?;
    if recipes
        .iter()
        .any(|r| r.len() > 1 && r.iter().any(|o| o.magnitude >= COMPOSITIONAL_MAGNITUDE_CAP))
    {
        log::warn!(
            "compositional policies with magnitudes of {COMPOSITIONAL_MAGNITUDE_CAP} or more tend to destroy prompts"
        );
    }
    let mut jobs = Vec::new();
    for ops in recipes {
        for t in 0..config.trials {
            let policy = AugmentationPolicy::new(ops.clone(), config.base_seed.wrapping_add(t))?;
            let text = augmenter.perturb_design(base, &policy)?;
            jobs.push((policy, t, text));
        }
    }
    let total = jobs.len();
    let records = parallel_map(total, opts.workers, opts.cancel.as_deref(), |j| {
        let (policy, trial, text) = &jobs[j];
        let sum: f64 = items.iter().map(|item| evaluate_item(text, item, provider, opts).bleu).sum();
        FragilityRecord {
            policy: policy.clone(),
            trial: *trial,
            perturbed_prompt_digest: hex::encode(Sha256::digest(text.as_bytes())),
            average_bleu: sum / items.len() as f64,
        }
    })
    .map_err(|completed| SearchError::Cancelled { completed, total })?;
    Ok(records)
}

/// Single-operation sweep: one record per grid op and trial.
pub fn fragility_sweep<P>(
    base: &PromptDesign,
    grid: &[AugmentationOp],
    config: &SweepConfig,
    items: &[ValidationItem],
    augmenter: &Augmenter,
    provider: &P,
    opts: &SearchOptions,
) -> Result<Vec<FragilityRecord>, SweepError>
where
    P: CompletionProvider + ?Sized,
{
    let recipes: Vec<Vec<AugmentationOp>> = grid.iter().map(|op| vec![*op]).collect();
    sweep_recipes(base, &recipes, config, items, augmenter, provider, opts)
}

/// Sweep over ordered pairs of distinct grid operations.
pub fn compositional_sweep<P>(
    base: &PromptDesign,
    grid: &[AugmentationOp],
    config: &SweepConfig,
    items: &[ValidationItem],
    augmenter: &Augmenter,
    provider: &P,
    opts: &SearchOptions,
) -> Result<Vec<FragilityRecord>, SweepError>
where
    P: CompletionProvider + ?Sized,
{
    sweep_recipes(base, &compositional_recipes(grid), config, items, augmenter, provider, opts)
}

/// CSV with columns `kind, magnitude, trial, policy_digest, avg_bleu`.
/// Multi-op policies join kinds and magnitudes with `+`.
pub fn write_sweep_csv<W: Write>(records: &[FragilityRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "magnitude", "trial", "policy_digest", "avg_bleu"])?;
    for r in records {
        w.write_record([
            r.policy.kind_label(),
            r.policy.magnitude_label(),
            r.trial.to_string(),
            r.policy.digest(),
            r.average_bleu.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Population variance of the records' scores.
pub fn score_variance(records: &[FragilityRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.average_bleu).sum::<f64>() / n;
    records.iter().map(|r| (r.average_bleu - mean).powi(2)).sum::<f64>() / n
}
