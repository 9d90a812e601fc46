//! The `umrf-forge` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error (invalid graph, provider
//! failure, unparseable completion, …), 2 on a usage error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::augment::{
    baseline_score, compositional_recipes, op_grid, sweep_recipes, write_sweep_csv, AugmentationKind, AugmentationOp,
    Augmenter, Lexicon, Stopwords, SweepConfig, DEFAULT_MAGNITUDES,
};
use crate::command::{parse_command, render_command};
use crate::engine::{execute_graph, ground_graph, merge_registry, parse_registry, WorldState, DEFAULT_MAX_STEPS};
use crate::library::{self, LibraryEntry};
use crate::prompt::{build_prompt, extract_candidate, OrderingFlag, PromptDesign, PromptStructure};
use crate::provider::{
    CachedProvider, CompletionProvider, CompletionRequest, HttpProvider, HttpTransport, MockProvider, ProviderConfig,
    CACHE_DIR_ENV, DEFAULT_FAN_OUT, DEFAULT_MODEL,
};
use crate::search::{design_text, enumerate_prompts, search_designs, SearchOptions, SearchReport, ValidationItem};
use crate::similarity::{
    similarity_report, similarity_summary, write_similarity_csv, EmbeddingProvider, HttpEmbedder, OfflineEmbedder,
    DEFAULT_EMBEDDING_MODEL,
};
use crate::umrf::{parse_graph_with, serialize_graph, validate_graph, ParseMode, UmrfGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    Offline,
    Http,
}

#[derive(Debug, Parser)]
#[command(name = "umrf-forge", version, about = "Decode operator commands into UMRF task graphs and study prompt quality")]
pub struct Cli {
    /// Machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    /// Completion backend.
    #[arg(long, global = true, value_enum, default_value_t = ProviderKind::Mock)]
    provider: ProviderKind,
    /// Completion cache directory (temperature-0 requests only).
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    /// Reports go to a timestamped subdirectory here, with a `latest` link.
    #[arg(long, global = true, default_value = "runs")]
    output_dir: PathBuf,
    /// Seed for perturbations.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Completion model identifier.
    #[arg(long, global = true, default_value = DEFAULT_MODEL)]
    model: String,
    /// Concurrent provider requests.
    #[arg(long, global = true, default_value_t = DEFAULT_FAN_OUT)]
    workers: usize,
    /// HTTP request rate limit.
    #[arg(long, global = true)]
    requests_per_minute: Option<f64>,
    /// Leave chain-of-thought rationales out of prompts.
    #[arg(long, global = true)]
    no_cot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a command into a validated UMRF graph.
    Parse {
        command: String,
        /// Example library (JSON lines); defaults to the bundled demo examples.
        #[arg(long)]
        examples: Option<PathBuf>,
    },
    /// Check a UMRF file and list violations.
    Validate {
        file: PathBuf,
        /// Accept unknown fields.
        #[arg(long)]
        lenient: bool,
    },
    /// Ground and simulate a UMRF file, printing the trace as JSON lines.
    Exec {
        file: PathBuf,
        /// Extra action specs (JSON array) merged over the built-ins.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: usize,
        /// Write the trace here instead of standard output.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Evaluate every k-permutation of an example pool on a validation set.
    Search {
        /// Example pool (JSON lines); defaults to the bundled example types.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Validation set (JSON lines); defaults to the bundled set.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Number of best prompts to report.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Measure how text perturbations of the examples change the score.
    Perturb {
        /// Example library; defaults to the bundled demo examples.
        #[arg(long)]
        examples: Option<PathBuf>,
        /// Prompt structure such as `1L+2L+3L`; defaults to every example, language first.
        #[arg(long)]
        structure: Option<String>,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Synonym lexicon (`word<TAB>syn1,syn2`).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Stopword list, one per line.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        trials: u64,
        #[arg(long, value_delimiter = ',')]
        magnitudes: Vec<f64>,
        /// Operation kinds (default: all four).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        /// Apply ordered pairs of grid operations instead of single ones.
        #[arg(long)]
        compositional: bool,
    },
    /// Compare prompt embeddings with a reference corpus and correlate with scores.
    Similarity {
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Reference corpus, one document per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EmbedderKind::Offline)]
        embedder: EmbedderKind,
    },
    /// Read one command per line and decode each.
    Repl {
        #[arg(long)]
        examples: Option<PathBuf>,
    },
}

/// Runs the CLI against the process's standard streams.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    run_with(argv, &mut input, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Runs the CLI with injected streams.
pub fn run_with<I, S>(argv: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut ctx = Ctx { cli: &cli, out, err };
    match ctx.dispatch(input) {
        Ok(code) => code,
        Err(e) => {
            if cli.json {
                let _ = writeln!(ctx.out, "{}", json!({ "ok": false, "error": format!("{e:#}") }));
            }
            let _ = writeln!(ctx.err, "error: {e:#}");
            1
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

/// Mock fixture: bundled commands plus every command in the loaded files.
fn fixture(entries: &[LibraryEntry], items: &[ValidationItem]) -> std::collections::BTreeMap<String, String> {
    let mut f = library::default_mock_fixture();
    for e in entries {
        f.insert(
            render_command(&e.example.query_form()),
            crate::umrf::to_canonical_string(&e.example.umrf_output),
        );
    }
    for i in items {
        f.insert(render_command(&i.command), i.reference_text());
    }
    f
}

fn load_library(path: Option<&Path>, bundled: &str) -> anyhow::Result<Vec<LibraryEntry>> {
    Ok(match path {
        Some(p) => library::load_example_library(p)?,
        None => library::parse_example_library(bundled)?,
    })
}

fn load_items(path: Option<&Path>) -> anyhow::Result<Vec<ValidationItem>> {
    Ok(match path {
        Some(p) => library::load_validation_set(p)?,
        None => library::validation_items(),
    })
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Creates `<output_dir>/<UTC timestamp>-<label>` and points `latest` at it.
pub fn create_run_dir(output_dir: &Path, label: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(output_dir)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let mut name = format!("{stamp}-{label}");
    let mut n = 1;
    while output_dir.join(&name).exists() {
        name = format!("{stamp}-{label}-{n}");
        n += 1;
    }
    let dir = output_dir.join(&name);
    std::fs::create_dir(&dir)?;
    let latest = output_dir.join("latest");
    if latest.symlink_metadata().is_ok() {
        std::fs::remove_file(&latest)?;
    }
    #[cfg(unix)]
    std::os::unix::fs::symlink(&name, &latest)?;
    #[cfg(not(unix))]
    std::fs::write(&latest, &name)?;
    Ok(dir)
}

impl Ctx<'_> {
    fn dispatch(&mut self, input: &mut dyn BufRead) -> anyhow::Result<i32> {
        let cli = self.cli;
        match &cli.command {
            Command::Parse { command, examples } => {
                let entries = load_library(examples.as_deref(), library::DEMO_EXAMPLES)?;
                let provider = self.provider(fixture(&entries, &[]))?;
                self.parse_one(command, &entries, provider.as_ref())
            }
            Command::Validate { file, lenient } => self.validate(file, *lenient),
            Command::Exec {
                file,
                registry,
                max_steps,
                trace_out,
            } => self.exec(file, registry.as_deref(), *max_steps, trace_out.as_deref()),
            Command::Search {
                pool,
                k,
                validation,
                top,
            } => {
                let (report, _) = self.search(pool.as_deref(), *k, validation.as_deref())?;
                let dir = create_run_dir(&cli.output_dir, "search")?;
                report.write_to_dir(&dir, *top)?;
                if cli.json {
                    let mut summary = report.summary_json(*top);
                    summary["output_dir"] = json!(dir);
                    writeln!(self.out, "{}", serde_json::to_string_pretty(&summary)?)?;
                } else {
                    writeln!(self.out, "{} prompts, {} records -> {}", report.total_prompts, report.records.len(), dir.display())?;
                    for (rank, s) in report.top(*top).iter().enumerate() {
                        writeln!(self.out, "{:>3}. prompt {:>4}  {:<12} {:.4}", rank + 1, s.prompt_index, s.structure.to_string(), s.average)?;
                    }
                }
                Ok(0)
            }
            Command::Perturb {
                examples,
                structure,
                validation,
                lexicon,
                stopwords,
                trials,
                magnitudes,
                kinds,
                compositional,
            } => {
                let entries = load_library(examples.as_deref(), library::DEMO_EXAMPLES)?;
                let design = self.base_design(&entries, structure.as_deref())?;
                let items = load_items(validation.as_deref())?;
                let augmenter = Augmenter::new(
                    match lexicon {
                        Some(p) => Lexicon::parse(&read(p)?)?,
                        None => Lexicon::parse(library::LEXICON)?,
                    },
                    Stopwords::parse(&match stopwords {
                        Some(p) => read(p)?,
                        None => library::STOPWORDS.to_string(),
                    }),
                );
                let mags = if magnitudes.is_empty() { DEFAULT_MAGNITUDES.to_vec() } else { magnitudes.clone() };
                let grid: Vec<AugmentationOp> = if kinds.is_empty() {
                    op_grid(&mags)?
                } else {
                    let kinds = kinds.iter().map(|k| k.parse()).collect::<Result<Vec<AugmentationKind>, _>>()?;
                    kinds
                        .iter()
                        .flat_map(|&k| mags.iter().map(move |&m| AugmentationOp::new(k, m)))
                        .collect::<Result<_, _>>()?
                };
                let recipes = if *compositional {
                    compositional_recipes(&grid)
                } else {
                    grid.iter().map(|o| vec![*o]).collect()
                };
                let provider = self.provider(fixture(&entries, &items))?;
                let opts = self.search_options();
                let baseline = baseline_score(&design, &items, provider.as_ref(), &opts)?;
                let config = SweepConfig {
                    trials: *trials,
                    base_seed: cli.seed,
                };
                let records = sweep_recipes(&design, &recipes, &config, &items, &augmenter, provider.as_ref(), &opts)?;
                let dir = create_run_dir(&cli.output_dir, "perturb")?;
                let mut buf = Vec::new();
                write_sweep_csv(&records, &mut buf)?;
                std::fs::write(dir.join("sweep.csv"), buf)?;
                let summary = json!({
                    "structure": design.structure(),
                    "baseline_bleu": baseline,
                    "records": records.len(),
                    "trials": trials,
                    "seed": cli.seed,
                    "compositional": compositional,
                    "variance": crate::augment::score_variance(&records),
                });
                std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
                if cli.json {
                    let mut s = summary;
                    s["output_dir"] = json!(dir);
                    writeln!(self.out, "{}", serde_json::to_string_pretty(&s)?)?;
                } else {
                    writeln!(self.out, "baseline {baseline:.4}; {} records -> {}", records.len(), dir.display())?;
                }
                Ok(0)
            }
            Command::Similarity {
                pool,
                k,
                validation,
                corpus,
                embedder,
            } => {
                let (report, designs) = self.search(pool.as_deref(), *k, validation.as_deref())?;
                let prompts: Vec<(String, f64)> = designs
                    .iter()
                    .zip(&report.averages)
                    .map(|(d, s)| (design_text(d), s.average))
                    .collect();
                let corpus = match corpus {
                    Some(p) => library::parse_corpus(&read(p)?),
                    None => library::corpus(),
                };
                let embedder: Box<dyn EmbeddingProvider> = match embedder {
                    EmbedderKind::Offline => Box::new(OfflineEmbedder::default()),
                    EmbedderKind::Http => Box::new(HttpEmbedder::new(
                        HttpTransport::new(self.provider_config())?,
                        DEFAULT_EMBEDDING_MODEL,
                        cli.cache_dir.clone(),
                    )),
                };
                let records = similarity_report(&prompts, &corpus, embedder.as_ref())?;
                let summary = similarity_summary(&records, embedder.id());
                let dir = create_run_dir(&cli.output_dir, "similarity")?;
                let mut buf = Vec::new();
                write_similarity_csv(&records, &mut buf)?;
                std::fs::write(dir.join("similarity.csv"), buf)?;
                std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
                if cli.json {
                    let mut s = summary;
                    s["output_dir"] = json!(dir);
                    writeln!(self.out, "{}", serde_json::to_string_pretty(&s)?)?;
                } else {
                    writeln!(self.out, "{} prompts -> {}", records.len(), dir.display())?;
                    writeln!(self.out, "pearson(max_sim, score): {}", summary["pearson_max_similarity"])?;
                    writeln!(self.out, "pearson(mean_sim, score): {}", summary["pearson_mean_similarity"])?;
                }
                Ok(0)
            }
            Command::Repl { examples } => {
                let entries = load_library(examples.as_deref(), library::DEMO_EXAMPLES)?;
                let provider = self.provider(fixture(&entries, &[]))?;
                let mut line = String::new();
                loop {
                    line.clear();
                    if input.read_line(&mut line)? == 0 {
                        break;
                    }
                    let cmd = line.trim();
                    if cmd.is_empty() {
                        continue;
                    }
                    if cmd == ":q" || cmd == ":quit" {
                        break;
                    }
                    if let Err(e) = self.parse_one(cmd, &entries, provider.as_ref()) {
                        writeln!(self.err, "error: {e:#}")?;
                    }
                }
                Ok(0)
            }
        }
    }

    fn provider_config(&self) -> ProviderConfig {
        let mut cfg = ProviderConfig::from_env();
        if let Some(rpm) = self.cli.requests_per_minute {
            cfg.requests_per_minute = rpm;
        }
        cfg
    }

    fn provider(&self, fixture: std::collections::BTreeMap<String, String>) -> anyhow::Result<Box<dyn CompletionProvider>> {
        let base: Box<dyn CompletionProvider> = match self.cli.provider {
            ProviderKind::Mock => Box::new(MockProvider::new(fixture)),
            ProviderKind::Http => Box::new(HttpProvider::new(self.provider_config())?),
        };
        Ok(match &self.cli.cache_dir {
            Some(dir) => Box::new(CachedProvider::new(base, dir).with_context(|| format!("cache dir {}", dir.display()))?),
            None => base,
        })
    }

    fn search_options(&self) -> SearchOptions {
        SearchOptions {
            model_id: self.cli.model.clone(),
            workers: self.cli.workers.max(1),
            ..SearchOptions::default()
        }
    }

    fn default_design(&self, entries: &[LibraryEntry]) -> PromptDesign {
        let mut examples: Vec<_> = entries
            .iter()
            .map(|e| (e.example.clone(), e.flag.unwrap_or(OrderingFlag::LanguageFirst)))
            .collect();
        examples.sort_by_key(|(e, _)| e.example_id);
        PromptDesign {
            examples,
            include_cot: !self.cli.no_cot,
        }
    }

    fn base_design(&self, entries: &[LibraryEntry], structure: Option<&str>) -> anyhow::Result<PromptDesign> {
        let Some(s) = structure else { return Ok(self.default_design(entries)) };
        let structure: PromptStructure = s.parse().map_err(|e| anyhow!("bad structure `{s}`: {e}"))?;
        let examples = structure
            .0
            .iter()
            .map(|(id, flag)| {
                entries
                    .iter()
                    .find(|e| e.example.example_id == *id)
                    .map(|e| (e.example.clone(), *flag))
                    .ok_or_else(|| anyhow!("no example with id {id}"))
            })
            .collect::<anyhow::Result<_>>()?;
        let design = PromptDesign {
            examples,
            include_cot: !self.cli.no_cot,
        };
        design.validate()?;
        Ok(design)
    }

    fn search(
        &mut self,
        pool: Option<&Path>,
        k: usize,
        validation: Option<&Path>,
    ) -> anyhow::Result<(SearchReport, Vec<PromptDesign>)> {
        let entries = load_library(pool, library::EXAMPLE_TYPES)?;
        let items = load_items(validation)?;
        let provider = self.provider(fixture(&entries, &items))?;
        let designs = enumerate_prompts(&library::expand_pool(&entries), k, !self.cli.no_cot)?;
        let report = search_designs(&designs, &items, provider.as_ref(), &self.search_options())?;
        log::info!("search finished in {:.1}s", report.elapsed.as_secs_f64());
        Ok((report, designs))
    }

    /// Decodes one command; prints the canonical graph or an error report.
    fn parse_one(&mut self, command: &str, entries: &[LibraryEntry], provider: &dyn CompletionProvider) -> anyhow::Result<i32> {
        let query = parse_command(command)?;
        let spec = self.default_design(entries).with_query(query);
        let prompt = build_prompt(&spec)?;
        let mut req = CompletionRequest::new(prompt.text);
        req.model_id = self.cli.model.clone();
        let result = provider.complete(&req)?;
        let candidate = extract_candidate(&result.text, req.stop_sequences());
        match decode(&candidate) {
            Ok(graph) => {
                let text = serialize_graph(&graph).expect("validated graph serializes");
                if self.cli.json {
                    writeln!(self.out, "{}", json!({ "ok": true, "command": command, "umrf": serde_json::from_str::<Value>(&text)? }))?;
                } else {
                    writeln!(self.out, "{text}")?;
                }
                Ok(0)
            }
            Err(problem) => {
                if self.cli.json {
                    writeln!(
                        self.out,
                        "{}",
                        json!({ "ok": false, "command": command, "error": problem, "raw_completion": result.text })
                    )?;
                } else {
                    writeln!(self.err, "error: provider output is not a valid UMRF graph: {problem}")?;
                    writeln!(self.err, "--- raw completion ---\n{}\n---", result.text)?;
                }
                Ok(1)
            }
        }
    }

    fn validate(&mut self, file: &Path, lenient: bool) -> anyhow::Result<i32> {
        let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
        let graph = parse_graph_with(&read(file)?, mode)?;
        let violations = validate_graph(&graph);
        if self.cli.json {
            writeln!(self.out, "{}", json!({ "valid": violations.is_empty(), "violations": violations }))?;
        } else if violations.is_empty() {
            writeln!(self.out, "ok: {} ({} actions)", graph.graph_name, graph.nodes.len())?;
        } else {
            for v in &violations {
                writeln!(self.out, "{v}")?;
            }
        }
        Ok(if violations.is_empty() { 0 } else { 1 })
    }

    fn exec(&mut self, file: &Path, registry: Option<&Path>, max_steps: usize, trace_out: Option<&Path>) -> anyhow::Result<i32> {
        let graph = parse_graph_with(&read(file)?, ParseMode::Strict)?;
        let extra = match registry {
            Some(p) => parse_registry(&read(p)?).with_context(|| format!("registry {}", p.display()))?,
            None => Vec::new(),
        };
        let plan = match ground_graph(&graph, &merge_registry(extra)) {
            Ok(p) => p,
            Err(violations) => {
                if self.cli.json {
                    writeln!(self.out, "{}", json!({ "ok": false, "violations": violations }))?;
                } else {
                    for v in &violations {
                        writeln!(self.out, "{v}")?;
                    }
                }
                return Ok(1);
            }
        };
        let trace = execute_graph(&plan, WorldState::default(), max_steps);
        if let Some(path) = trace_out {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            trace.write_jsonl(&mut f)?;
            f.flush()?;
        }
        if self.cli.json {
            writeln!(
                self.out,
                "{}",
                json!({
                    "ok": true,
                    "events": trace.events,
                    "final_state": trace.final_state,
                    "truncated": trace.truncated,
                })
            )?;
        } else if trace_out.is_none() {
            trace.write_jsonl(&mut *self.out)?;
        } else {
            writeln!(self.out, "{} steps: {}", trace.events.len(), trace.actions().join(" -> "))?;
        }
        Ok(0)
    }
}

/// Lenient parse plus validation of a provider's candidate text.
fn decode(candidate: &str) -> Result<UmrfGraph, String> {
    if candidate.trim().is_empty() {
        return Err("completion is empty".to_string());
    }
    let graph = parse_graph_with(candidate, ParseMode::Lenient).map_err(|e| e.to_string())?;
    let violations = validate_graph(&graph);
    if let Some(v) = violations.first() {
        return Err(format!("{} violation(s), first: {v}", violations.len()));
    }
    Ok(graph)
}
