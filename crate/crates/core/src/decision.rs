//! Confidence-filtered vote aggregation and the mass/margin decision rule.
//!
//! Votes with confidence `>= p` are kept and summed per option as exact
//! integers. With total mass `W = W_A + W_B` and margin `M = |W_A - W_B|`:
//! abstain if `W < t`; take the heavier option if `W >= t` and `M >= m`;
//! otherwise defer to the text adjudicator. Exact ties always defer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{Answer, Label};
use crate::comparison::{
    parse_final_answer, Backend, BackendError, ComparisonOutcome, EngineRequest, ParseStatus,
    RequestKind,
};
use crate::triad::{QueryContext, Role};

#[derive(Debug, Error, PartialEq)]
#[error("invalid threshold {name} = {value}: {reason}")]
pub struct ThresholdError {
    pub name: &'static str,
    pub value: f64,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Per-comparison confidence floor, `[0, 100]`.
    pub p: f64,
    /// Total-mass floor.
    pub t: f64,
    /// Margin floor.
    pub m: f64,
    /// Half-width of the ambiguity band around a posterior of 0.5.
    pub delta: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            p: 50.0,
            t: 50.0,
            m: 30.0,
            delta: 0.10,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        let check = |name, value: f64, ok: bool, reason| {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(ThresholdError {
                    name,
                    value,
                    reason,
                })
            }
        };
        check(
            "p",
            self.p,
            (0.0..=100.0).contains(&self.p),
            "must lie in [0, 100]",
        )?;
        check("t", self.t, self.t >= 0.0, "must be >= 0")?;
        check("m", self.m, self.m >= 0.0, "must be >= 0")?;
        check(
            "delta",
            self.delta,
            (0.0..=0.5).contains(&self.delta),
            "must lie in [0, 0.5]",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptVote {
    pub reference_id: String,
    pub role: Role,
    pub vote: Label,
    pub confidence: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Abstained,
    BelowP,
    ParseFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedVote {
    pub reference_id: String,
    pub role: Role,
    pub vote: Answer,
    pub confidence: u32,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredVotes {
    pub kept: Vec<KeptVote>,
    pub discarded: Vec<DiscardedVote>,
}

pub fn filter_votes(outcomes: &[ComparisonOutcome], p: f64) -> FilteredVotes {
    let mut out = FilteredVotes::default();
    for o in outcomes {
        let reason = if o.parse_status == ParseStatus::Failed {
            Some(DiscardReason::ParseFailed)
        } else if o.vote.is_abstain() {
            Some(DiscardReason::Abstained)
        } else if f64::from(o.confidence) < p {
            Some(DiscardReason::BelowP)
        } else {
            None
        };
        match (reason, o.vote.label()) {
            (None, Some(vote)) => out.kept.push(KeptVote {
                reference_id: o.reference_id.clone(),
                role: o.role,
                vote,
                confidence: o.confidence,
            }),
            (reason, _) => out.discarded.push(DiscardedVote {
                reference_id: o.reference_id.clone(),
                role: o.role,
                vote: o.vote,
                confidence: o.confidence,
                reason: reason.unwrap_or(DiscardReason::Abstained),
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateState {
    pub w_a: u32,
    pub w_b: u32,
    pub total_w: u32,
    pub margin: u32,
    /// `w_a - w_b`.
    pub signed_score: i64,
    pub kept_votes: Vec<KeptVote>,
    pub discarded: Vec<DiscardedVote>,
}

impl AggregateState {
    /// `W_A / (W_A + W_B)`, undefined at zero mass.
    pub fn soft_posterior(&self) -> Option<f64> {
        (self.total_w > 0).then(|| f64::from(self.w_a) / f64::from(self.total_w))
    }
}

pub fn aggregate_weights(kept: &[KeptVote]) -> AggregateState {
    let sum = |l: Label| {
        kept.iter()
            .filter(|v| v.vote == l)
            .map(|v| v.confidence)
            .sum::<u32>()
    };
    let (w_a, w_b) = (sum(Label::A), sum(Label::B));
    AggregateState {
        w_a,
        w_b,
        total_w: w_a + w_b,
        margin: w_a.abs_diff(w_b),
        signed_score: i64::from(w_a) - i64::from(w_b),
        kept_votes: kept.to_vec(),
        discarded: Vec::new(),
    }
}

pub fn aggregate_filtered(filtered: FilteredVotes) -> AggregateState {
    AggregateState {
        discarded: filtered.discarded,
        ..aggregate_weights(&filtered.kept)
    }
}

/// `sum(alpha_i * z_i)` with `z = +1` for A and `-1` for B.
pub fn signed_score(kept: &[KeptVote]) -> i64 {
    kept.iter()
        .map(|v| match v.vote {
            Label::A => i64::from(v.confidence),
            Label::B => -i64::from(v.confidence),
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    InsufficientMass,
    MarginWin,
    TextAdjudicated,
    AdjudicatorAbstain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub label: Answer,
    pub branch: Branch,
    pub aggregate: AggregateState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ruling {
    Decided(Decision),
    /// Enough mass but not decisive; the text adjudicator must rule.
    NeedsAdjudication(AggregateState),
}

pub fn decide(agg: &AggregateState, thresholds: &Thresholds) -> Ruling {
    if f64::from(agg.total_w) < thresholds.t {
        return Ruling::Decided(Decision {
            label: Answer::Abstain,
            branch: Branch::InsufficientMass,
            aggregate: agg.clone(),
        });
    }
    if agg.w_a != agg.w_b && f64::from(agg.margin) >= thresholds.m {
        let label = if agg.w_a > agg.w_b {
            Answer::A
        } else {
            Answer::B
        };
        return Ruling::Decided(Decision {
            label,
            branch: Branch::MarginWin,
            aggregate: agg.clone(),
        });
    }
    Ruling::NeedsAdjudication(agg.clone())
}

/// Applies `decide`, handing undecided cases to `adjudicate`.
pub fn resolve<E>(
    agg: &AggregateState,
    thresholds: &Thresholds,
    adjudicate: impl FnOnce(&AggregateState) -> Result<Answer, E>,
) -> Result<Decision, E> {
    match decide(agg, thresholds) {
        Ruling::Decided(d) => Ok(d),
        Ruling::NeedsAdjudication(agg) => {
            let label = adjudicate(&agg)?;
            Ok(adjudicated(label, agg))
        }
    }
}

fn adjudicated(label: Answer, aggregate: AggregateState) -> Decision {
    let branch = if label.is_abstain() {
        Branch::AdjudicatorAbstain
    } else {
        Branch::TextAdjudicated
    };
    Decision {
        label,
        branch,
        aggregate,
    }
}

/// One line per comparison, in role order.
pub fn render_votes(outcomes: &[ComparisonOutcome]) -> String {
    let mut sorted: Vec<&ComparisonOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| {
        a.role
            .cmp(&b.role)
            .then_with(|| a.reference_id.cmp(&b.reference_id))
    });
    sorted
        .iter()
        .map(|o| {
            let key = if o.evidence.key_evidence.is_empty() {
                "(none)"
            } else {
                o.evidence.key_evidence.as_str()
            };
            format!(
                "- {}: vote {}, confidence {}; key evidence: {}",
                o.role.as_str(),
                o.vote.token(),
                o.confidence,
                key
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the text-only aggregation prompt. Engine failures and unparseable
/// replies become an adjudicator abstention.
pub fn text_adjudicate(
    backend: &Backend,
    ctx: &QueryContext,
    outcomes: &[ComparisonOutcome],
    agg: &AggregateState,
) -> Result<Decision, BackendError> {
    let bindings: BTreeMap<&str, String> = [
        ("n", outcomes.len().to_string()),
        ("q", ctx.question_text.clone()),
        ("a", ctx.option_a.clone()),
        ("b", ctx.option_b.clone()),
        ("votes", render_votes(outcomes)),
    ]
    .into_iter()
    .collect();
    let prompt = backend.templates.aggregate.render(&bindings)?;
    let request = EngineRequest {
        kind: RequestKind::Aggregate {
            query_id: ctx.query_id.clone(),
        },
        prompt,
        images: Vec::new(),
    };
    let label = match backend.complete(&request)? {
        Ok(raw) => parse_final_answer(&raw).unwrap_or(Answer::Abstain),
        Err(_) => Answer::Abstain,
    };
    Ok(adjudicated(label, agg.clone()))
}
