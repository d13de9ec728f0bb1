//! Instruction template expansion: placeholder-safe LLM rewriting,
//! post-filtering, diversity-aware template sampling and dataset building.

pub mod cli;
pub mod dataset;
pub mod expand;
pub mod filter;
pub mod io;
pub mod llm;
pub mod manifest;
pub mod ppg;
pub mod sampler;
pub mod seed;
pub mod stats;
pub mod template;

pub use dataset::{build_dataset, BuildConfig, BuildReport, DatasetRecord};
pub use expand::{Expander, ExpansionConfig, ExpansionMode, ExpansionOutcome, GenerationCandidate, Verdict};
pub use filter::{run_pipeline, FilterConfig, FilterReport};
pub use llm::{ChatBackend, ChatRequest, Gateway, GuidingInstruction, LlmError, MockBackend};
pub use ppg::{check_placeholder_match, mask_placeholders, restore_placeholders, MaskMap, MatchMode};
pub use sampler::{build_distribution, Embedder, EpsilonMode, StubEmbedder, TaskPool, TemplateSampler};
pub use stats::{corpus_stats, pearson, CorpusStats};
pub use template::{InstanceRecord, InstructionTemplate, Origin, PlaceholderExpr, TemplateError};
