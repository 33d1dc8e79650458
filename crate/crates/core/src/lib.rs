//! Fairness auditing for LLM-backed recommenders.
//!
//! Prompts are rendered from anchors and sensitive attribute values, sent
//! through a [`gateway::Gateway`], parsed into ranked lists and compared with
//! the neutral baseline. Per-value similarity means are reduced to disparity
//! statistics (SNSR, SNSV, PAFS), and repeated sampling yields a
//! per-prompt predictive entropy.

pub mod catalog;
pub mod fairness;
pub mod gateway;
pub mod hashing;
pub mod metrics;
pub mod parser;
pub mod prompt;
pub mod runner;
pub mod uncertainty;

pub use catalog::{
    AnchorRecord, AnchorSet, ArticleMode, AttributeRegistry, CatalogError, Domain,
    PersonalityProfileSet, SensitiveAttribute,
};
pub use fairness::{
    AggregationMode, AttributeSummary, ExclusionReason, FairnessError, FairnessSummary, ScoreKind,
    SimilarityRow, SimilarityTable,
};
pub use gateway::{
    Completion, Gateway, GatewayError, MockModelConfig, ProviderConfig, ProviderKind,
};
pub use metrics::{MetricKind, SimilarityScore};
pub use parser::{ParseError, ParseReport, RankedList};
pub use prompt::{
    AttrValue, BatchConfig, Condition, Language, Perturbation, PromptBatch, PromptInstance,
};
pub use runner::{run_audit, RunConfig, RunError, RunManifest, RunReport};
pub use uncertainty::{EntropyReport, SampleSet, UncertaintyError};
