//! Few-shot decoding of multimodal operator commands into UMRF task graphs,
//! with tools to measure how prompt design and prompt noise affect decoding
//! quality.
//!
//! * [`umrf`] — parse, validate, serialize and order UMRF task graphs.
//! * [`command`] — operator commands with embedded `[x=…; y=…; yaw=…]` markers.
//! * [`prompt`] — few-shot prompt assembly.
//! * [`bleu`] — sentence BLEU for scoring decoded graphs.
//! * [`provider`] — completion backends: HTTP, cache, deterministic mock.
//! * [`library`] — example/validation file formats and bundled data.
//! * [`search`] — exhaustive permutation search over example orderings.
//! * [`augment`] — text perturbations and prompt-fragility sweeps.
//! * [`similarity`] — embedding similarity against a reference corpus.
//! * [`engine`] — simulated grounding and execution of task graphs.
//! * [`cli`] — the `umrf-forge` command line.

pub mod augment;
pub mod bleu;
pub mod cli;
pub mod command;
pub mod engine;
pub mod library;
pub mod prompt;
pub mod provider;
pub mod search;
pub mod similarity;
pub mod umrf;
