//! Per-pair orchestration: triads, comparisons and decisions for both images,
//! then the pair-level adjudicator when the two outcomes collapse or are
//! ambiguous.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::answer::{Answer, Label};
use crate::bank::{Embedding, ReferenceBank};
use crate::comparison::{
    parse_pair_answers, Backend, BackendError, ComparisonOutcome, EngineRequest, ImageRef,
    ParseStatus, RequestKind,
};
use crate::decision::{
    aggregate_filtered, filter_votes, resolve, text_adjudicate, AggregateState, Branch, Decision,
    Thresholds,
};
use crate::triad::{FallbackTag, QueryContext, Role, Selector, Triad, TriadError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pair {pair_id}: {source}")]
    Triad {
        pair_id: String,
        #[source]
        source: TriadError,
    },
    #[error("pair {pair_id}: {source}")]
    Backend {
        pair_id: String,
        #[source]
        source: BackendError,
    },
    #[error("pair {pair_id}: {reason}")]
    InvalidPair { pair_id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryImage {
    pub id: String,
    pub path: Option<PathBuf>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub pair_id: String,
    pub category: String,
    pub question: String,
    pub option_a: String,
    pub option_b: String,
    pub image_1: QueryImage,
    pub image_2: QueryImage,
    pub answer_1: Label,
    pub answer_2: Label,
}

impl ConfusionPair {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: &str| PipelineError::InvalidPair {
            pair_id: self.pair_id.clone(),
            reason: reason.into(),
        };
        if self.pair_id.is_empty() {
            return Err(bad("empty pair_id"));
        }
        if self.image_1.id.is_empty() || self.image_2.id.is_empty() {
            return Err(bad("empty image id"));
        }
        if self.image_1.id == self.image_2.id {
            return Err(bad("image_1 and image_2 share an id"));
        }
        Ok(())
    }

    pub fn images(&self) -> [(&QueryImage, Label); 2] {
        [
            (&self.image_1, self.answer_1),
            (&self.image_2, self.answer_2),
        ]
    }

    pub fn context(&self, image: &QueryImage) -> QueryContext {
        QueryContext {
            query_id: image.id.clone(),
            query_embedding: image.embedding.clone(),
            question_text: self.question.clone(),
            option_a: self.option_a.clone(),
            option_b: self.option_b.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMember {
    pub reference_id: String,
    pub doc_id: String,
    pub role: Role,
    pub rank: usize,
    pub similarity: f64,
    pub fallback_applied: Vec<FallbackTag>,
}

/// One stage of a pair run. Serialized one object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Triad {
        pair_id: String,
        image_id: String,
        modality: Option<String>,
        pool_size: usize,
        members: Vec<TraceMember>,
        fallbacks: Vec<FallbackTag>,
    },
    Comparison {
        pair_id: String,
        image_id: String,
        reference_id: String,
        role: Role,
        vote: Answer,
        confidence: u32,
        parse_status: ParseStatus,
        engine_error: Option<String>,
    },
    Decision {
        pair_id: String,
        image_id: String,
        thresholds: Thresholds,
        w_a: u32,
        w_b: u32,
        total_w: u32,
        margin: u32,
        kept: usize,
        discarded: usize,
        branch: Branch,
        label: Answer,
        posterior: Option<f64>,
    },
    PairAdjudication {
        pair_id: String,
        before: [Answer; 2],
        after: [Answer; 2],
        failed: bool,
    },
    Final {
        pair_id: String,
        category: String,
        image_ids: [String; 2],
        finals: [Answer; 2],
        truths: [Label; 2],
        adjudicated: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub decision_1: Decision,
    pub decision_2: Decision,
    pub posterior_1: Option<f64>,
    pub posterior_2: Option<f64>,
    pub adjudicated: bool,
    pub final_1: Answer,
    pub final_2: Answer,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

/// `w_a / (w_a + w_b)`, `None` at zero mass.
pub fn soft_posterior(agg: &AggregateState) -> Option<f64> {
    agg.soft_posterior()
}

fn ambiguous(posterior: Option<f64>, delta: f64) -> bool {
    posterior.is_none_or(|p| (p - 0.5).abs() < delta)
}

/// True when both finals commit to the same option or either image is ambiguous.
pub fn needs_pair_adjudication(
    final_1: Answer,
    final_2: Answer,
    posterior_1: Option<f64>,
    posterior_2: Option<f64>,
    delta: f64,
) -> bool {
    let collapsed = final_1 == final_2 && !final_1.is_abstain();
    collapsed || ambiguous(posterior_1, delta) || ambiguous(posterior_2, delta)
}

/// Evidence summary for one image, role-ordered. Built from model replies
/// only, so bank captions never appear.
pub fn render_meta(outcomes: &[ComparisonOutcome]) -> String {
    let mut sorted: Vec<&ComparisonOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.role);
    let joined = |items: &[String]| {
        if items.is_empty() {
            "(none)".to_string()
        } else {
            items.join("; ")
        }
    };
    let parts: Vec<String> = sorted
        .iter()
        .map(|o| {
            format!(
                "[{}] vote {} (confidence {}); findings: {}; differences: {}; key evidence: {}",
                o.role.as_str(),
                o.vote.token(),
                o.confidence,
                joined(&o.evidence.findings),
                joined(&o.evidence.differences),
                if o.evidence.key_evidence.is_empty() {
                    "(none)"
                } else {
                    &o.evidence.key_evidence
                }
            )
        })
        .collect();
    if parts.is_empty() {
        "(no comparisons)".to_string()
    } else {
        parts.join(" | ")
    }
}

pub fn render_pred(final_1: Answer, final_2: Answer) -> String {
    if final_1 == final_2 {
        final_1.token().to_string()
    } else {
        format!("Image1: {}, Image2: {}", final_1.token(), final_2.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAdjudication {
    pub finals: (Answer, Answer),
    pub failed: bool,
}

/// Runs the pair adjudicator. On engine failure or an unparseable reply,
/// differing finals are kept and identical finals become abstentions.
pub fn pair_adjudicate(
    backend: &Backend,
    pair: &ConfusionPair,
    outcomes_1: &[ComparisonOutcome],
    outcomes_2: &[ComparisonOutcome],
    preds: (Answer, Answer),
) -> Result<PairAdjudication, BackendError> {
    let bindings: BTreeMap<&str, String> = [
        ("q", pair.question.clone()),
        ("a", pair.option_a.clone()),
        ("b", pair.option_b.clone()),
        ("meta1", render_meta(outcomes_1)),
        ("meta2", render_meta(outcomes_2)),
        ("pred", render_pred(preds.0, preds.1)),
    ]
    .into_iter()
    .collect();
    let prompt = backend.templates.pair_adjudicator.render(&bindings)?;
    let image = |img: &QueryImage| ImageRef {
        id: img.id.clone(),
        path: img.path.clone(),
    };
    let request = EngineRequest {
        kind: RequestKind::PairAdjudication {
            pair_id: pair.pair_id.clone(),
            image_1: pair.image_1.id.clone(),
            image_2: pair.image_2.id.clone(),
        },
        prompt,
        images: vec![image(&pair.image_1), image(&pair.image_2)],
    };
    let parsed = backend
        .complete(&request)?
        .ok()
        .and_then(|raw| parse_pair_answers(&raw));
    Ok(match parsed {
        Some(finals) => PairAdjudication {
            finals,
            failed: false,
        },
        None if preds.0 != preds.1 => PairAdjudication {
            finals: preds,
            failed: true,
        },
        None => PairAdjudication {
            finals: (Answer::Abstain, Answer::Abstain),
            failed: true,
        },
    })
}

struct ImageRun {
    triad: Triad,
    outcomes: Vec<ComparisonOutcome>,
    decision: Decision,
    posterior: Option<f64>,
}

fn run_image(
    config: &PipelineConfig,
    bank: &ReferenceBank,
    selector: &Selector,
    backend: &Backend,
    pair: &ConfusionPair,
    image: &QueryImage,
) -> Result<ImageRun, PipelineError> {
    let ctx = pair.context(image);
    let triad = selector
        .select_triad(bank, &ctx)
        .map_err(|source| PipelineError::Triad {
            pair_id: pair.pair_id.clone(),
            source,
        })?;
    let be = |source| PipelineError::Backend {
        pair_id: pair.pair_id.clone(),
        source,
    };
    let query_image = ImageRef {
        id: image.id.clone(),
        path: image.path.clone(),
    };
    let outcomes = triad
        .members
        .iter()
        .map(|m| backend.compare(&ctx, &query_image, m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(be)?;
    let agg = aggregate_filtered(filter_votes(&outcomes, config.thresholds.p));
    let decision = resolve(&agg, &config.thresholds, |agg| {
        text_adjudicate(backend, &ctx, &outcomes, agg).map(|d| d.label)
    })
    .map_err(be)?;
    let posterior = soft_posterior(&agg);
    Ok(ImageRun {
        triad,
        outcomes,
        decision,
        posterior,
    })
}

fn image_events(pair_id: &str, image_id: &str, run: &ImageRun, thr: Thresholds) -> Vec<TraceEvent> {
    let t = &run.triad;
    let mut events = vec![TraceEvent::Triad {
        pair_id: pair_id.to_string(),
        image_id: image_id.to_string(),
        modality: t.modality.clone(),
        pool_size: t.pool_size,
        members: t
            .members
            .iter()
            .map(|m| TraceMember {
                reference_id: m.entry.id.clone(),
                doc_id: m.entry.doc_id.clone(),
                role: m.role,
                rank: m.rank,
                similarity: m.similarity_to_query,
                fallback_applied: m.fallback_applied.clone(),
            })
            .collect(),
        fallbacks: t.fallbacks.clone(),
    }];
    events.extend(run.outcomes.iter().map(|o| TraceEvent::Comparison {
        pair_id: pair_id.to_string(),
        image_id: image_id.to_string(),
        reference_id: o.reference_id.clone(),
        role: o.role,
        vote: o.vote,
        confidence: o.confidence,
        parse_status: o.parse_status,
        engine_error: o.engine_error.clone(),
    }));
    let agg = &run.decision.aggregate;
    events.push(TraceEvent::Decision {
        pair_id: pair_id.to_string(),
        image_id: image_id.to_string(),
        thresholds: thr,
        w_a: agg.w_a,
        w_b: agg.w_b,
        total_w: agg.total_w,
        margin: agg.margin,
        kept: agg.kept_votes.len(),
        discarded: agg.discarded.len(),
        branch: run.decision.branch,
        label: run.decision.label,
        posterior: run.posterior,
    });
    events
}

/// Full flow for one pair. The two images run concurrently.
pub fn run_pair(
    config: &PipelineConfig,
    bank: &ReferenceBank,
    selector: &Selector,
    backend: &Backend,
    pair: &ConfusionPair,
) -> Result<PairResult, PipelineError> {
    pair.validate()?;
    let (r1, r2) = rayon::join(
        || run_image(config, bank, selector, backend, pair, &pair.image_1),
        || run_image(config, bank, selector, backend, pair, &pair.image_2),
    );
    let (r1, r2) = (r1?, r2?);
    let thr = config.thresholds;
    let mut trace = image_events(&pair.pair_id, &pair.image_1.id, &r1, thr);
    trace.extend(image_events(&pair.pair_id, &pair.image_2.id, &r2, thr));

    let before = (r1.decision.label, r2.decision.label);
    let adjudicated =
        needs_pair_adjudication(before.0, before.1, r1.posterior, r2.posterior, thr.delta);
    let (final_1, final_2) = if adjudicated {
        let adj = pair_adjudicate(backend, pair, &r1.outcomes, &r2.outcomes, before).map_err(
            |source| PipelineError::Backend {
                pair_id: pair.pair_id.clone(),
                source,
            },
        )?;
        trace.push(TraceEvent::PairAdjudication {
            pair_id: pair.pair_id.clone(),
            before: [before.0, before.1],
            after: [adj.finals.0, adj.finals.1],
            failed: adj.failed,
        });
        adj.finals
    } else {
        before
    };
    trace.push(TraceEvent::Final {
        pair_id: pair.pair_id.clone(),
        category: pair.category.clone(),
        image_ids: [pair.image_1.id.clone(), pair.image_2.id.clone()],
        finals: [final_1, final_2],
        truths: [pair.answer_1, pair.answer_2],
        adjudicated,
    });

    Ok(PairResult {
        pair_id: pair.pair_id.clone(),
        decision_1: r1.decision,
        decision_2: r2.decision,
        posterior_1: r1.posterior,
        posterior_2: r2.posterior,
        adjudicated,
        final_1,
        final_2,
        trace,
    })
}

/// Runs every pair on the current rayon pool; results keep dataset order.
pub fn run_pairs(
    config: &PipelineConfig,
    bank: &ReferenceBank,
    selector: &Selector,
    backend: &Backend,
    pairs: &[ConfusionPair],
) -> Result<Vec<PairResult>, PipelineError> {
    pairs
        .par_iter()
        .map(|p| run_pair(config, bank, selector, backend, p))
        .collect()
}

/// Trace as JSON Lines.
pub fn trace_jsonl<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn trace_digest<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> String {
    hex::encode(Sha256::digest(trace_jsonl(events).as_bytes()))
}
