//! Deterministic test double for the comparison engine.
//!
//! Each pairwise reply is drawn from a counter-based generator keyed by
//! `(seed, query_id, reference_id)`: SHA-256 over
//! `"ctriad-mock/v1" || seed (u64 LE) || len(query_id) (u32 LE) || query_id || len(reference_id) (u32 LE) || reference_id`.
//! Bytes 0..8 (u64 LE, top 53 bits) give a uniform `u` in `[0, 1)`; the vote is
//! correct iff `u < q_role`. Bytes 8..16 (u64 LE) modulo the range width give the
//! confidence offset from `c_lo`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::engine::{ComparisonEngine, EngineError, EngineRequest, RequestKind};
use super::parse::{format_comparison_response, EvidenceRecord};
use crate::answer::{Answer, Label};
use crate::triad::Role;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleReliability {
    pub anchor: f64,
    pub hard_negative: f64,
    pub boundary_probe: f64,
}

impl RoleReliability {
    pub fn uniform(q: f64) -> Self {
        Self {
            anchor: q,
            hard_negative: q,
            boundary_probe: q,
        }
    }

    pub fn for_role(&self, role: Role) -> f64 {
        match role {
            Role::Anchor => self.anchor,
            Role::HardNegative => self.hard_negative,
            Role::BoundaryProbe => self.boundary_probe,
        }
    }
}

/// How the mock answers the two adjudication prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockAdjudicator {
    /// Always `Final Answer: -`.
    #[default]
    Abstain,
    /// Answers with the fixture label.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    /// Query image id → correct option.
    pub labels: BTreeMap<String, Label>,
    pub reliability: RoleReliability,
    /// Inclusive `[c_lo, c_hi]`.
    pub confidence_range: [u32; 2],
    #[serde(default)]
    pub adjudicator: MockAdjudicator,
}

impl MockFixture {
    pub fn validate(&self) -> Result<(), EngineError> {
        let [lo, hi] = self.confidence_range;
        if lo > hi || hi > 100 {
            return Err(EngineError::Config(format!(
                "confidence range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 100"
            )));
        }
        let r = self.reliability;
        if [r.anchor, r.hard_negative, r.boundary_probe]
            .iter()
            .any(|q| !(0.0..=1.0).contains(q))
        {
            return Err(EngineError::Config("reliability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn label(&self, query_id: &str) -> Result<Label, EngineError> {
        self.labels
            .get(query_id)
            .copied()
            .ok_or_else(|| EngineError::UnknownQuery(query_id.to_string()))
    }
}

/// Raw keyed draw: `(u, confidence_bits)`.
pub fn mock_draw(seed: u64, query_id: &str, reference_id: &str) -> (f64, u64) {
    let mut h = Sha256::new();
    h.update(b"ctriad-mock/v1");
    h.update(seed.to_le_bytes());
    h.update((query_id.len() as u32).to_le_bytes());
    h.update(query_id.as_bytes());
    h.update((reference_id.len() as u32).to_le_bytes());
    h.update(reference_id.as_bytes());
    let d = h.finalize();
    let a = u64::from_le_bytes(d[0..8].try_into().unwrap());
    let b = u64::from_le_bytes(d[8..16].try_into().unwrap());
    ((a >> 11) as f64 / (1u64 << 53) as f64, b)
}

/// Vote and confidence the mock assigns to one comparison.
pub fn mock_vote(
    fixture: &MockFixture,
    seed: u64,
    query_id: &str,
    reference_id: &str,
    role: Role,
) -> Result<(Label, u32), EngineError> {
    let truth = fixture.label(query_id)?;
    let (u, bits) = mock_draw(seed, query_id, reference_id);
    let vote = if u < fixture.reliability.for_role(role) {
        truth
    } else {
        truth.other()
    };
    let [lo, hi] = fixture.confidence_range;
    let confidence = lo + (bits % u64::from(hi - lo + 1)) as u32;
    Ok((vote, confidence))
}

/// A syntactically complete pairwise reply for one comparison.
pub fn mock_compare(
    fixture: &MockFixture,
    seed: u64,
    query_id: &str,
    reference_id: &str,
    role: Role,
) -> Result<String, EngineError> {
    let (vote, confidence) = mock_vote(fixture, seed, query_id, reference_id, role)?;
    let evidence = EvidenceRecord {
        modality_anatomy: format!("synthetic modality, anatomy of {query_id}"),
        findings: (1..=3)
            .map(|i| format!("finding {i} in {query_id}"))
            .collect(),
        differences: vec![
            format!("{query_id} differs from {reference_id} in texture"),
            format!("{query_id} differs from {reference_id} in extent"),
        ],
        key_evidence: format!("feature favouring option {vote} in {query_id}"),
        raw_response: String::new(),
    };
    Ok(format_comparison_response(
        vote.into(),
        confidence,
        &evidence,
    ))
}

#[derive(Debug, Clone)]
pub struct MockEngine {
    pub fixture: MockFixture,
    pub seed: u64,
}

impl MockEngine {
    pub fn new(fixture: MockFixture, seed: u64) -> Result<Self, EngineError> {
        fixture.validate()?;
        Ok(Self { fixture, seed })
    }
}

impl ComparisonEngine for MockEngine {
    fn complete(&self, request: &EngineRequest) -> Result<String, EngineError> {
        match &request.kind {
            RequestKind::Pairwise {
                query_id,
                reference_id,
                role,
            } => mock_compare(&self.fixture, self.seed, query_id, reference_id, *role),
            RequestKind::Aggregate { query_id } => {
                let ans = match self.fixture.adjudicator {
                    MockAdjudicator::Abstain => Answer::Abstain,
                    MockAdjudicator::Truth => self.fixture.label(query_id)?.into(),
                };
                Ok(format!("Final Answer: {ans}\n"))
            }
            RequestKind::PairAdjudication {
                image_1, image_2, ..
            } => {
                let (a1, a2) = match self.fixture.adjudicator {
                    MockAdjudicator::Abstain => (Answer::Abstain, Answer::Abstain),
                    MockAdjudicator::Truth => (
                        self.fixture.label(image_1)?.into(),
                        self.fixture.label(image_2)?.into(),
                    ),
                };
                Ok(format!(
                    "Visual assessment Image 1: synthetic\nVisual assessment Image 2: synthetic\n\n\
                     Do observed differences justify different answers? {}\n\n\
                     Final Answer Image1: {a1}\nFinal Answer Image2: {a2}\n",
                    if a1 != a2 { "Yes" } else { "No" }
                ))
            }
        }
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::parse::{parse_comparison_response, ParseStatus};

    fn fixture(q: f64) -> MockFixture {
        MockFixture {
            labels: [("q1".to_string(), Label::A), ("q2".to_string(), Label::B)].into(),
            reliability: RoleReliability::uniform(q),
            confidence_range: [40, 95],
            adjudicator: MockAdjudicator::Abstain,
        }
    }

    #[test]
    fn degenerate_reliabilities() {
        for r in 0..50 {
            let rid = format!("r{r}");
            let (v, c) = mock_vote(&fixture(1.0), 7, "q1", &rid, Role::Anchor).unwrap();
            assert_eq!(v, Label::A);
            assert!((40..=95).contains(&c));
            let (v, _) = mock_vote(&fixture(0.0), 7, "q2", &rid, Role::BoundaryProbe).unwrap();
            assert_eq!(v, Label::A);
        }
    }

    #[test]
    fn replies_are_keyed_and_parse_cleanly() {
        let f = fixture(0.5);
        let a = mock_compare(&f, 7, "q1", "r1", Role::Anchor).unwrap();
        let b = mock_compare(&f, 7, "q1", "r1", Role::Anchor).unwrap();
        assert_eq!(a, b);
        let p = parse_comparison_response(&a);
        assert_eq!(p.status, ParseStatus::Ok);
        let (v, c) = mock_vote(&f, 7, "q1", "r1", Role::Anchor).unwrap();
        assert_eq!((p.vote, p.confidence), (v.into(), c));
        // different seeds give different streams
        let draws: std::collections::HashSet<u64> =
            (0..20).map(|s| mock_draw(s, "q1", "r1").1).collect();
        assert_eq!(draws.len(), 20);
    }

    #[test]
    fn unknown_query_is_an_error() {
        assert!(matches!(
            mock_compare(&fixture(0.5), 1, "nope", "r", Role::Anchor),
            Err(EngineError::UnknownQuery(_))
        ));
    }

    #[test]
    fn fixture_validation() {
        let mut f = fixture(0.5);
        f.confidence_range = [90, 10];
        assert!(MockEngine::new(f, 0).is_err());
        let mut f = fixture(1.5);
        f.confidence_range = [0, 100];
        assert!(MockEngine::new(f, 0).is_err());
    }
}
