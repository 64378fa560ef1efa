//! Building blocks for a reasoning-augmented information extraction pipeline.
//!
//! The crate covers unified schemas and extraction records, a caching
//! generator gateway, strategy generation and selection for reasoning data,
//! dataset curation and rendering, rule-based rewards, group-relative
//! advantage computation, and micro-F1 scoring for NER, RE and EE.

pub mod config;
pub mod dataset;
pub mod forge;
pub mod gateway;
pub mod grpo;
pub mod jsonl;
pub mod prompts;
pub mod records;
pub mod reward;
pub mod schema;
pub mod scorer;
pub mod text;

pub use config::PipelineConfig;
pub use dataset::{CorpusRecord, ReasoningInstance, Route, SftSample};
pub use forge::{ForgeConfig, Paradigm, ReasoningTrace, Strategy};
pub use gateway::{Gateway, GatewayConfig, GenerationRequest, GenerationResponse, Purpose};
pub use grpo::{DynamicsLog, GroupSample, GrpoConfig, PolicyAdapter};
pub use prompts::PromptTemplates;
pub use records::{CanonicalSet, ExtractionRecord, LabeledExample, ReasoningOutput};
pub use reward::{RewardBreakdown, RewardConfig, RewardMode};
pub use schema::{EeSubtask, SchemaClass, TaskKind, UnifiedSchema, ValidationReport};
pub use scorer::{MatchCounts, MetricRow, Metrics};
