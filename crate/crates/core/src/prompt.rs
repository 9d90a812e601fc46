//! Few-shot prompt assembly.
//!
//! A prompt is the rendered examples, in order, followed by the query command
//! and the cue line [`CUE`]. Each example renders as a visual-cue line, a
//! natural-language line (their order set by [`OrderingFlag`]), an optional
//! rationale line and the canonical UMRF document, then one blank line.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::command::{render_command, MultimodalCommand};
use crate::umrf::{to_canonical_string, UmrfGraph};

/// Line after which the provider is expected to emit the UMRF document.
pub const CUE: &str = "UMRF:";

/// Context window of the default completion model, in tokens.
pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 4097;

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub example_id: u32,
    /// Markers with their referent text. `None` for commands without markers.
    pub visual_cue: Option<MultimodalCommand>,
    pub nl_command: String,
    pub cot_rationale: Option<String>,
    pub umrf_output: UmrfGraph,
    /// The fused operator command this example was taken from, when known.
    pub input: Option<MultimodalCommand>,
}

impl FewShotExample {
    /// The command as an operator would send it: `input` if recorded,
    /// otherwise the natural-language text followed by the visual cue.
    pub fn query_form(&self) -> MultimodalCommand {
        if let Some(c) = &self.input {
            return c.clone();
        }
        let text = match &self.visual_cue {
            Some(v) => format!("{} {}", self.nl_command, render_command(v)),
            None => self.nl_command.clone(),
        };
        crate::command::parse_command(&text).expect("example fields form a valid command")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrderingFlag {
    #[serde(rename = "V")]
    VisualFirst,
    #[serde(rename = "L")]
    LanguageFirst,
}

impl OrderingFlag {
    pub fn letter(self) -> char {
        match self {
            OrderingFlag::VisualFirst => 'V',
            OrderingFlag::LanguageFirst => 'L',
        }
    }

    pub fn from_letter(s: &str) -> Option<Self> {
        match s {
            "V" | "v" => Some(OrderingFlag::VisualFirst),
            "L" | "l" => Some(OrderingFlag::LanguageFirst),
            _ => None,
        }
    }
}

impl fmt::Display for OrderingFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Ordered `(example_id, flag)` list, e.g. `5L+4V`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PromptStructure(pub Vec<(u32, OrderingFlag)>);

impl From<PromptStructure> for String {
    fn from(s: PromptStructure) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for PromptStructure {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for PromptStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(id, fl)| format!("{id}{fl}")).collect();
        f.write_str(&parts.join("+"))
    }
}

impl std::str::FromStr for PromptStructure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(['+', ','])
            .map(|part| {
                let part = part.trim();
                let (digits, flag) = part.split_at(part.len().saturating_sub(1));
                let id = digits.parse::<u32>().map_err(|_| format!("bad example id in `{part}`"))?;
                let flag = OrderingFlag::from_letter(flag).ok_or_else(|| format!("bad flag in `{part}`"))?;
                Ok((id, flag))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(PromptStructure)
    }
}

/// The prompt function configuration: which examples, in which order and
/// orientation. Combined with a query it becomes a [`PromptSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDesign {
    pub examples: Vec<(FewShotExample, OrderingFlag)>,
    pub include_cot: bool,
}

impl PromptDesign {
    pub fn new(examples: Vec<(FewShotExample, OrderingFlag)>) -> Self {
        Self {
            examples,
            include_cot: true,
        }
    }

    pub fn structure(&self) -> PromptStructure {
        PromptStructure(self.examples.iter().map(|(e, f)| (e.example_id, *f)).collect())
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.examples.is_empty() {
            return Err(PromptError::NoExamples);
        }
        let mut seen = HashSet::new();
        for (e, f) in &self.examples {
            if !seen.insert((e.example_id, *f)) {
                return Err(PromptError::DuplicateExample {
                    example_id: e.example_id,
                    flag: *f,
                });
            }
        }
        Ok(())
    }

    pub fn with_query(&self, query: MultimodalCommand) -> PromptSpec {
        PromptSpec {
            design: self.clone(),
            query,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub design: PromptDesign,
    pub query: MultimodalCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptBudget {
    pub max_context_tokens: usize,
    /// Tokens kept free for the completion.
    pub completion_tokens: usize,
}

impl PromptBudget {
    pub fn prompt_limit(&self) -> usize {
        self.max_context_tokens.saturating_sub(self.completion_tokens)
    }
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            completion_tokens: crate::provider::DEFAULT_MAX_TOKENS as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub text: String,
    /// Approximate token count (characters / 4, rounded up).
    pub estimated_tokens: usize,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt needs at least one example")]
    NoExamples,
    #[error("example {example_id}{flag} appears twice")]
    DuplicateExample { example_id: u32, flag: OrderingFlag },
    #[error("prompt needs ~{estimated} tokens but only {limit} fit; drop trailing examples {}", PromptStructure(.drop.clone()))]
    OverBudget {
        estimated: usize,
        limit: usize,
        drop: Vec<(u32, OrderingFlag)>,
    },
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Which part of an example a rendered line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Visual,
    Language,
    Rationale,
    Graph,
}

/// The lines of one example in render order.
pub fn example_blocks(ex: &FewShotExample, flag: OrderingFlag, include_cot: bool) -> Vec<(BlockKind, String)> {
    let visual = ex.visual_cue.as_ref().map(|v| (BlockKind::Visual, render_command(v)));
    let language = Some((BlockKind::Language, ex.nl_command.clone()));
    let (first, second) = match flag {
        OrderingFlag::VisualFirst => (visual, language),
        OrderingFlag::LanguageFirst => (language, visual),
    };
    let rationale = ex
        .cot_rationale
        .as_ref()
        .filter(|_| include_cot)
        .map(|r| (BlockKind::Rationale, r.clone()));
    let graph = Some((BlockKind::Graph, to_canonical_string(&ex.umrf_output)));
    [first, second, rationale, graph].into_iter().flatten().collect()
}

pub fn render_example(ex: &FewShotExample, flag: OrderingFlag, include_cot: bool) -> String {
    render_blocks(example_blocks(ex, flag, include_cot).into_iter().map(|(_, t)| t))
}

fn render_blocks(lines: impl Iterator<Item = String>) -> String {
    let mut out = lines.collect::<Vec<_>>().join("\n");
    out.push_str("\n\n");
    out
}

/// Renders every example, passing each line through `transform` first.
pub fn render_examples_with<F>(design: &PromptDesign, mut transform: F) -> String
where
    F: FnMut(BlockKind, &str) -> String,
{
    design
        .examples
        .iter()
        .map(|(ex, flag)| {
            render_blocks(
                example_blocks(ex, *flag, design.include_cot)
                    .into_iter()
                    .map(|(kind, text)| transform(kind, &text)),
            )
        })
        .collect()
}

pub fn render_query(query: &MultimodalCommand) -> String {
    format!("{}\n{CUE}\n", render_command(query))
}

pub fn build_prompt(spec: &PromptSpec) -> Result<BuiltPrompt, PromptError> {
    build_prompt_with_budget(spec, PromptBudget::default())
}

pub fn build_prompt_with_budget(spec: &PromptSpec, budget: PromptBudget) -> Result<BuiltPrompt, PromptError> {
    spec.design.validate()?;
    let rendered: Vec<String> = spec
        .design
        .examples
        .iter()
        .map(|(ex, f)| render_example(ex, *f, spec.design.include_cot))
        .collect();
    let query = render_query(&spec.query);
    let text: String = rendered.iter().map(String::as_str).chain([query.as_str()]).collect();
    let estimated = estimate_tokens(&text);
    let limit = budget.prompt_limit();
    if estimated > limit {
        // Longest prefix of examples that still fits.
        let mut chars = query.chars().count();
        let mut keep = 0;
        for r in &rendered {
            let next = chars + r.chars().count();
            if next.div_ceil(4) > limit {
                break;
            }
            chars = next;
            keep += 1;
        }
        let drop = spec.design.examples[keep..]
            .iter()
            .map(|(e, f)| (e.example_id, *f))
            .collect();
        return Err(PromptError::OverBudget {
            estimated,
            limit,
            drop,
        });
    }
    Ok(BuiltPrompt {
        text,
        estimated_tokens: estimated,
    })
}

/// Pulls the UMRF document out of a completion: the text after the last cue
/// line (or from the start if there is none), up to the first blank line or
/// stop sequence, trimmed.
pub fn extract_candidate(completion: &str, stop: &[String]) -> String {
    let mut body = completion;
    let mut offset = 0;
    for line in completion.split_inclusive('\n') {
        offset += line.len();
        if line.trim() == CUE {
            body = &completion[offset..];
        }
    }
    let mut end = body.len();
    for s in stop.iter().filter(|s| !s.is_empty()) {
        if let Some(i) = body.find(s.as_str()) {
            end = end.min(i);
        }
    }
    let body = &body[..end];
    let mut out_end = body.len();
    let mut seen_content = false;
    let mut pos = 0;
    for line in body.split_inclusive('\n') {
        if line.trim().is_empty() {
            if seen_content {
                out_end = pos;
                break;
            }
        } else {
            seen_content = true;
        }
        pos += line.len();
    }
    body[..out_end].trim().to_string()
}
