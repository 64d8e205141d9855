//! Pairwise comparison backend: prompt templates, engines, reply parsing and
//! the response cache.

pub mod cache;
pub mod engine;
pub mod http;
pub mod mock;
pub mod parse;
pub mod template;

pub use cache::{cache_key, prompt_digest, CacheRecord, ResponseCache};
pub use engine::{
    Backend, BackendError, ComparisonEngine, ComparisonOutcome, EngineError, EngineRequest,
    ImageRef, RequestKind, RetryPolicy,
};
pub use http::{HttpConfig, HttpEngine};
pub use mock::{
    mock_compare, mock_draw, mock_vote, MockAdjudicator, MockEngine, MockFixture, RoleReliability,
};
pub use parse::{
    format_comparison_response, parse_comparison_response, parse_final_answer, parse_pair_answers,
    EvidenceRecord, ParseStatus, ParsedComparison,
};
pub use template::{PromptTemplate, TemplateError, TemplateName, Templates};
