//! Exhaustive search over ordered example permutations, scored by BLEU on a
//! validation set.
//!
//! Every prompt design is combined with every validation command; the
//! completion's UMRF text is scored against the canonical serialization of
//! the item's reference graph. Per-item failures become zero-score records so
//! that one bad response never aborts a long search.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};

use crate::bleu::{sentence_bleu, tokenize, BleuConfig};
use crate::command::{render_command, MultimodalCommand};
use crate::prompt::{
    estimate_tokens, render_examples_with, render_query, FewShotExample, OrderingFlag, PromptBudget, PromptDesign,
    PromptError, PromptStructure,
};
use crate::provider::{CompletionProvider, CompletionRequest, DEFAULT_FAN_OUT, DEFAULT_MAX_TOKENS, DEFAULT_MODEL};
use crate::umrf::{parse_graph_with, to_canonical_string, validate_graph, InvalidGraph, ParseMode, UmrfGraph};

pub const DEFAULT_TOP_N: usize = 10;

/// A validation command with its ground-truth graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationItem {
    pub command: MultimodalCommand,
    pub reference_graph: UmrfGraph,
}

impl ValidationItem {
    pub fn new(command: MultimodalCommand, reference_graph: UmrfGraph) -> Result<Self, InvalidGraph> {
        let violations = validate_graph(&reference_graph);
        if !violations.is_empty() {
            return Err(InvalidGraph(violations));
        }
        Ok(Self {
            command,
            reference_graph,
        })
    }

    /// Canonical serialization of the reference graph, the BLEU reference.
    pub fn reference_text(&self) -> String {
        to_canonical_string(&self.reference_graph)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub prompt_index: usize,
    pub prompt_structure: PromptStructure,
    pub item_index: usize,
    pub bleu: f64,
    /// Candidate UMRF text extracted from the completion.
    pub completion: String,
    pub parse_ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptScore {
    pub prompt_index: usize,
    pub structure: PromptStructure,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    /// Sorted by (prompt_index, item_index).
    pub records: Vec<EvalRecord>,
    /// One entry per prompt, by prompt_index.
    pub averages: Vec<PromptScore>,
    /// Prompt indices by non-increasing average, ties by prompt_index.
    pub ranking: Vec<usize>,
    pub total_prompts: usize,
    pub elapsed: Duration,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SearchError {
    #[error("k must be between 1 and the pool size {pool}, got {k}")]
    InvalidK { k: usize, pool: usize },
    #[error("validation set is empty")]
    NoItems,
    #[error("pool lists example {example_id}{flag} more than once")]
    DuplicatePoolEntry { example_id: u32, flag: OrderingFlag },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cancelled after {completed} of {total} evaluations")]
    Cancelled { completed: usize, total: usize },
}

/// Request settings and execution knobs shared by searches and sweeps.
#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Option<Vec<String>>,
    pub budget: PromptBudget,
    /// Concurrent provider calls.
    pub workers: usize,
    pub top_n: usize,
    /// When set, workers stop picking up new evaluations and the search
    /// returns [`SearchError::Cancelled`]. Completed responses stay cached.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            model_id: DEFAULT_MODEL.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            stop: None,
            budget: PromptBudget::default(),
            workers: DEFAULT_FAN_OUT,
            top_n: DEFAULT_TOP_N,
            cancel: None,
        }
    }
}

impl SearchOptions {
    fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest {
            prompt,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            stop: self.stop.clone(),
            model_id: self.model_id.clone(),
        }
    }

    fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst))
    }
}

/// All ordered k-permutations of pool indices, lexicographic.
pub fn index_permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(n, k, used, cur, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    if k <= n {
        go(n, k, &mut vec![false; n], &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Every ordered k-permutation of the pool as a prompt design, in
/// lexicographic order of pool indices.
pub fn enumerate_prompts(
    pool: &[(FewShotExample, OrderingFlag)],
    k: usize,
    include_cot: bool,
) -> Result<Vec<PromptDesign>, SearchError> {
    if k == 0 || k > pool.len() {
        return Err(SearchError::InvalidK { k, pool: pool.len() });
    }
    let mut seen = std::collections::HashSet::new();
    for (e, f) in pool {
        if !seen.insert((e.example_id, *f)) {
            return Err(SearchError::DuplicatePoolEntry {
                example_id: e.example_id,
                flag: *f,
            });
        }
    }
    Ok(index_permutations(pool.len(), k)
        .into_iter()
        .map(|idx| PromptDesign {
            examples: idx.into_iter().map(|i| pool[i].clone()).collect(),
            include_cot,
        })
        .collect())
}

/// The example part of a design's prompt, shared by all queries.
pub fn design_text(design: &PromptDesign) -> String {
    render_examples_with(design, |_, t| t.to_string())
}

/// Outcome of one (examples, item) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutcome {
    pub bleu: f64,
    pub completion: String,
    pub parse_ok: bool,
    pub error: Option<String>,
}

impl ItemOutcome {
    fn failed(error: String) -> Self {
        Self {
            bleu: 0.0,
            completion: String::new(),
            parse_ok: false,
            error: Some(error),
        }
    }
}

/// Scores a completion's candidate text against a reference.
pub fn score_candidate(candidate: &str, reference: &str) -> f64 {
    sentence_bleu(&tokenize(candidate), &tokenize(reference), BleuConfig::default())
        .expect("canonical reference text is never empty")
}

/// Prompts the provider with `examples_text` followed by the item's command
/// and scores the result.
pub fn evaluate_item<P>(examples_text: &str, item: &ValidationItem, provider: &P, opts: &SearchOptions) -> ItemOutcome
where
    P: CompletionProvider + ?Sized,
{
    let mut prompt = String::with_capacity(examples_text.len() + 128);
    prompt.push_str(examples_text);
    prompt.push_str(&render_query(&item.command));
    let estimated = estimate_tokens(&prompt);
    if estimated > opts.budget.prompt_limit() {
        return ItemOutcome::failed(format!(
            "prompt needs ~{estimated} tokens but only {} fit",
            opts.budget.prompt_limit()
        ));
    }
    let req = opts.request(prompt);
    match provider.complete(&req) {
        Ok(result) => {
            let candidate = crate::prompt::extract_candidate(&result.text, req.stop_sequences());
            let parse_ok = parse_graph_with(&candidate, ParseMode::Lenient).is_ok();
            ItemOutcome {
                bleu: score_candidate(&candidate, &item.reference_text()),
                completion: candidate,
                parse_ok,
                error: result.warning,
            }
        }
        Err(e) => {
            log::warn!("item {}: {e}", render_command(&item.command));
            ItemOutcome::failed(e.to_string())
        }
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

/// Runs `f` over `0..n` on up to `workers` threads, results in index order.
/// Returns the number of finished units if `cancel` fires first.
pub(crate) fn parallel_map<T, F>(n: usize, workers: usize, cancel: Option<&AtomicBool>, f: F) -> Result<Vec<T>, usize>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let stop = || cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                if stop() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    let slots = slots.into_inner().expect("result slots poisoned");
    let done = slots.iter().filter(|s| s.is_some()).count();
    if done < n {
        return Err(done);
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

/// Evaluates one design against every item, sequentially.
pub fn evaluate_prompt<P>(
    design: &PromptDesign,
    items: &[ValidationItem],
    provider: &P,
    opts: &SearchOptions,
) -> Result<(Vec<EvalRecord>, f64), SearchError>
where
    P: CompletionProvider + ?Sized,
{
    if items.is_empty() {
        return Err(SearchError::NoItems);
    }
    design.validate()?;
    let text = design_text(design);
    let structure = design.structure();
    let records: Vec<EvalRecord> = items
        .iter()
        .enumerate()
        .map(|(i, item)| to_record(0, &structure, i, evaluate_item(&text, item, provider, opts)))
        .collect();
    let avg = mean(records.iter().map(|r| r.bleu));
    Ok((records, avg))
}

fn to_record(prompt_index: usize, structure: &PromptStructure, item_index: usize, o: ItemOutcome) -> EvalRecord {
    EvalRecord {
        prompt_index,
        prompt_structure: structure.clone(),
        item_index,
        bleu: o.bleu,
        completion: o.completion,
        parse_ok: o.parse_ok,
        error: o.error,
    }
}

/// Evaluates every design against every item and ranks designs by average BLEU.
pub fn search_designs<P>(
    designs: &[PromptDesign],
    items: &[ValidationItem],
    provider: &P,
    opts: &SearchOptions,
) -> Result<SearchReport, SearchError>
where
    P: CompletionProvider + ?Sized,
{
    if items.is_empty() {
        return Err(SearchError::NoItems);
    }
    for d in designs {
        d.validate()?;
    }
    let started = Instant::now();
    let texts: Vec<String> = designs.iter().map(design_text).collect();
    let structures: Vec<PromptStructure> = designs.iter().map(PromptDesign::structure).collect();
    let total = designs.len() * items.len();
    let records = parallel_map(total, opts.workers, opts.cancel.as_deref(), |u| {
        let (p, i) = (u / items.len(), u % items.len());
        to_record(p, &structures[p], i, evaluate_item(&texts[p], &items[i], provider, opts))
    })
    .map_err(|completed| SearchError::Cancelled { completed, total })?;
    if opts.cancelled() {
        return Err(SearchError::Cancelled { completed: total, total });
    }
    Ok(assemble(records, structures, items.len(), started.elapsed()))
}

fn assemble(records: Vec<EvalRecord>, structures: Vec<PromptStructure>, n_items: usize, elapsed: Duration) -> SearchReport {
    let averages: Vec<PromptScore> = structures
        .into_iter()
        .enumerate()
        .map(|(p, structure)| PromptScore {
            prompt_index: p,
            structure,
            average: mean(records[p * n_items..(p + 1) * n_items].iter().map(|r| r.bleu)),
        })
        .collect();
    let mut ranking: Vec<usize> = (0..averages.len()).collect();
    ranking.sort_by(|&a, &b| averages[b].average.total_cmp(&averages[a].average).then(a.cmp(&b)));
    SearchReport {
        total_prompts: averages.len(),
        records,
        averages,
        ranking,
        elapsed,
    }
}

/// Enumerates every k-permutation of the pool and evaluates them all.
pub fn exhaustive_search<P>(
    pool: &[(FewShotExample, OrderingFlag)],
    k: usize,
    items: &[ValidationItem],
    provider: &P,
    opts: &SearchOptions,
) -> Result<SearchReport, SearchError>
where
    P: CompletionProvider + ?Sized,
{
    let designs = enumerate_prompts(pool, k, true)?;
    search_designs(&designs, items, provider, opts)
}

impl SearchReport {
    /// The best `n` prompts in ranking order.
    pub fn top(&self, n: usize) -> Vec<&PromptScore> {
        self.ranking.iter().take(n).map(|&i| &self.averages[i]).collect()
    }

    pub fn write_records_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["prompt_index", "structure", "item_index", "bleu", "parse_ok", "error", "completion"])?;
        for r in &self.records {
            w.write_record([
                r.prompt_index.to_string(),
                r.prompt_structure.to_string(),
                r.item_index.to_string(),
                r.bleu.to_string(),
                r.parse_ok.to_string(),
                r.error.clone().unwrap_or_default(),
                r.completion.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary without timing information, so reruns compare byte-for-byte.
    pub fn summary_json(&self, top_n: usize) -> Value {
        let n_items = self.records.len().checked_div(self.total_prompts).unwrap_or(0);
        let mean_all = mean(self.averages.iter().map(|a| a.average));
        json!({
            "total_prompts": self.total_prompts,
            "items": n_items,
            "records": self.records.len(),
            "parse_ok": self.records.iter().filter(|r| r.parse_ok).count(),
            "errors": self.records.iter().filter(|r| r.error.is_some()).count(),
            "mean_average_bleu": mean_all,
            "top": self.top(top_n),
            "ranking": self.ranking,
        })
    }

    pub fn write_prompts_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for a in &self.averages {
            serde_json::to_writer(&mut out, a)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `records.csv`, `summary.json` and `prompts.jsonl` into `dir`.
    pub fn write_to_dir(&self, dir: &Path, top_n: usize) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv_buf = Vec::new();
        self.write_records_csv(&mut csv_buf).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("records.csv"), csv_buf)?;
        let mut summary = serde_json::to_string_pretty(&self.summary_json(top_n))?;
        summary.push('\n');
        std::fs::write(dir.join("summary.json"), summary)?;
        let mut prompts = Vec::new();
        self.write_prompts_jsonl(&mut prompts)?;
        std::fs::write(dir.join("prompts.jsonl"), prompts)?;
        Ok(())
    }
}
