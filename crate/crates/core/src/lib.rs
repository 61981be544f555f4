//! Toolkit for CWE-level software vulnerability identification with LLMs.
//!
//! The crate is organised as a chain of pure stages that communicate through
//! JSONL files:
//!
//! * [`corpus`]: labeled C/C++ samples, the label set, seeded stratified splits
//! * [`preprocess`]: comment stripping and whitespace normalization
//! * [`prompt`]: hard/soft/mixed prompt construction with expected responses
//! * [`backend`]: OpenAI-compatible HTTP client and a deterministic replay backend
//! * [`textsim`]: BLEU and the description matcher that maps model text to a label
//! * [`taxonomy`]: CWE ChildOf graph and hierarchical distances
//! * [`eval`]: confusion matrix, balanced accuracy, macro-F1, FNR/FPR, error-by-distance
//! * [`cost`]: GPU/API cost and forward-pass FLOPs/MACs estimates
//! * [`pipeline`]: manifest-driven execution of the whole chain with `--resume`

pub mod backend;
pub mod corpus;
pub mod cost;
pub mod eval;
pub mod jsonl;
pub mod pipeline;
pub mod preprocess;
pub mod prompt;
pub mod rng;
pub mod taxonomy;
pub mod textsim;

pub use corpus::{CodeSample, CweId, Dataset, Label, LabelSet};
pub use taxonomy::CweTaxonomy;

/// Version recorded in run logs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
