use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::{cache_key, prompt_digest, CacheError, ResponseCache};
use super::parse::{parse_comparison_response, EvidenceRecord, ParseStatus};
use super::template::{TemplateError, Templates};
use crate::answer::Answer;
use crate::triad::{QueryContext, Role, TriadMember};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: Option<PathBuf>,
}

impl ImageRef {
    pub fn id_only(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestKind {
    Pairwise {
        query_id: String,
        reference_id: String,
        role: Role,
    },
    Aggregate {
        query_id: String,
    },
    PairAdjudication {
        pair_id: String,
        image_1: String,
        image_2: String,
    },
}

impl RequestKind {
    /// `(query_id, reference_id)` components of the cache key.
    pub fn cache_ids(&self) -> (&str, &str) {
        match self {
            RequestKind::Pairwise {
                query_id,
                reference_id,
                ..
            } => (query_id, reference_id),
            RequestKind::Aggregate { query_id } => (query_id, "aggregate_decision"),
            RequestKind::PairAdjudication { pair_id, .. } => (pair_id, "pair_adjudicator"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineRequest {
    pub kind: RequestKind,
    pub prompt: String,
    /// Images in prompt order; empty for text-only requests.
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed engine reply: {0}")]
    BadReply(String),
    #[error("engine configuration: {0}")]
    Config(String),
    #[error("query {0:?} is not in the mock fixture")]
    UnknownQuery(String),
}

impl EngineError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EngineError::Transport(_) | EngineError::BadReply(_) => true,
            EngineError::Http { status, .. } => *status == 429 || *status >= 500,
            EngineError::Config(_) | EngineError::UnknownQuery(_) => false,
        }
    }
}

/// A model that answers rendered prompts, optionally with images.
pub trait ComparisonEngine: Send + Sync {
    fn complete(&self, request: &EngineRequest) -> Result<String, EngineError>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            initial_backoff: Duration::ZERO,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("replay cache has no entry for query {query_id:?} / reference {reference_id:?}")]
    ReplayMiss {
        query_id: String,
        reference_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub reference_id: String,
    pub role: Role,
    pub vote: Answer,
    pub confidence: u32,
    pub evidence: EvidenceRecord,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_error: Option<String>,
}

/// Engine plus templates, response cache and retry policy.
pub struct Backend {
    engine: Arc<dyn ComparisonEngine>,
    pub templates: Templates,
    cache: Arc<ResponseCache>,
    pub retry: RetryPolicy,
    /// When set, pairwise comparisons must come from the cache.
    pub replay_only: bool,
    engine_calls: AtomicU64,
    failures: std::sync::Mutex<Vec<String>>,
}

impl Backend {
    pub fn new(engine: Arc<dyn ComparisonEngine>, cache: Arc<ResponseCache>) -> Self {
        Self {
            engine,
            templates: Templates::builtin(),
            cache,
            retry: RetryPolicy::default(),
            replay_only: false,
            engine_calls: AtomicU64::new(0),
            failures: Default::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn engine_name(&self) -> &str {
        self.engine.name()
    }

    pub fn engine_calls(&self) -> u64 {
        self.engine_calls.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn failure_log(&self) -> Vec<String> {
        self.failures.lock().unwrap().clone()
    }

    /// Cache lookup, then engine call with bounded retries. The inner result is
    /// the engine's final answer; the outer error is a replay miss or cache I/O.
    pub fn complete(
        &self,
        request: &EngineRequest,
    ) -> Result<Result<String, EngineError>, BackendError> {
        let (qid, rid) = request.kind.cache_ids();
        let digest = prompt_digest(&request.prompt);
        let key = cache_key(qid, rid, &digest);
        if let Some(raw) = self.cache.get(&key) {
            return Ok(Ok(raw));
        }
        if self.replay_only && matches!(request.kind, RequestKind::Pairwise { .. }) {
            return Err(BackendError::ReplayMiss {
                query_id: qid.to_string(),
                reference_id: rid.to_string(),
            });
        }
        let mut backoff = self.retry.initial_backoff;
        let mut last_err = EngineError::Transport("no attempt made".into());
        for attempt in 1..=self.retry.attempts.max(1) {
            self.engine_calls.fetch_add(1, Ordering::Relaxed);
            match self.engine.complete(request) {
                Ok(raw) => {
                    self.cache.insert(qid, rid, &digest, &raw)?;
                    return Ok(Ok(raw));
                }
                Err(e) => {
                    let retry = e.is_retryable() && attempt < self.retry.attempts;
                    last_err = e;
                    if !retry {
                        break;
                    }
                    if !backoff.is_zero() {
                        std::thread::sleep(backoff);
                    }
                    backoff *= 2;
                }
            }
        }
        self.failures
            .lock()
            .unwrap()
            .push(format!("{qid}/{rid}: {last_err}"));
        Ok(Err(last_err))
    }

    /// Renders the pairwise prompt for `reference`, runs it, and parses the reply.
    ///
    /// Only the question and options are bound; captions never reach the prompt.
    pub fn compare(
        &self,
        ctx: &QueryContext,
        query_image: &ImageRef,
        reference: &TriadMember,
    ) -> Result<ComparisonOutcome, BackendError> {
        let prompt = self.render_pairwise(ctx)?;
        let request = EngineRequest {
            kind: RequestKind::Pairwise {
                query_id: ctx.query_id.clone(),
                reference_id: reference.entry.id.clone(),
                role: reference.role,
            },
            prompt,
            images: vec![
                query_image.clone(),
                ImageRef::id_only(reference.entry.id.clone()),
            ],
        };
        let outcome = match self.complete(&request)? {
            Ok(raw) => {
                let p = parse_comparison_response(&raw);
                ComparisonOutcome {
                    reference_id: reference.entry.id.clone(),
                    role: reference.role,
                    vote: p.vote,
                    confidence: p.confidence,
                    evidence: p.evidence,
                    parse_status: p.status,
                    engine_error: None,
                }
            }
            Err(e) => ComparisonOutcome {
                reference_id: reference.entry.id.clone(),
                role: reference.role,
                vote: Answer::Abstain,
                confidence: 0,
                evidence: EvidenceRecord::default(),
                parse_status: ParseStatus::Failed,
                engine_error: Some(e.to_string()),
            },
        };
        Ok(outcome)
    }

    pub fn render_pairwise(&self, ctx: &QueryContext) -> Result<String, TemplateError> {
        let bindings: BTreeMap<&str, String> = [
            ("q", ctx.question_text.clone()),
            ("a", ctx.option_a.clone()),
            ("b", ctx.option_b.clone()),
        ]
        .into_iter()
        .collect();
        self.templates.pairwise.render(&bindings)
    }
}
