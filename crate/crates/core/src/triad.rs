//! Contrastive triad selection: anchor, hard negative and boundary probe.
//!
//! Selection runs over a modality-gated pool ranked by similarity to the query.
//! Hard negatives come from a mid-similarity rank band and minimise the absolute
//! cosine to the anchor; boundary probes come from a wider band and maximise
//! `(overlap + 1) * s(query, r) * (1 - s(r, anchor))`. Members prefer distinct
//! source documents; when a band has no usable candidate it is widened.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::bank::{
    cosine_unchecked, rank_entries, BankEntry, BankError, Embedding, Ranked, ReferenceBank,
};

const BUILTIN_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const BUILTIN_MODALITIES: &str = include_str!("../data/modality_keywords.txt");

#[derive(Debug, Error)]
pub enum TriadError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("invalid query {query_id:?}: {reason}")]
    InvalidQuery { query_id: String, reason: String },
    #[error("invalid rank band [{0}, {1}]")]
    BadBand(usize, usize),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("candidate pool exhausted: no entry left to select")]
    PoolExhausted,
    #[error("modality table line {line}: {reason}")]
    BadModalityTable { line: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct QueryContext {
    pub query_id: String,
    pub query_embedding: Embedding,
    pub question_text: String,
    pub option_a: String,
    pub option_b: String,
}

impl QueryContext {
    pub fn validate(&self) -> Result<(), TriadError> {
        let bad = |reason: &str| TriadError::InvalidQuery {
            query_id: self.query_id.clone(),
            reason: reason.into(),
        };
        if self.question_text.trim().is_empty() {
            return Err(bad("empty question text"));
        }
        if self.option_a == self.option_b {
            return Err(bad("option_a equals option_b"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Anchor,
    HardNegative,
    BoundaryProbe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Anchor => "anchor",
            Role::HardNegative => "hard_negative",
            Role::BoundaryProbe => "boundary_probe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackTag {
    /// No caption matched the detected modality; the whole bank was used.
    ModalityGateEmpty,
    /// The rank band was widened to find a candidate.
    BandExpanded,
    /// No band candidate came from a new document.
    DocumentRelaxed,
    /// The pool held fewer than three usable entries.
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub kappa: u32,
    pub s_xr: f64,
    pub s_rr1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TriadMember {
    #[serde(serialize_with = "entry_ref")]
    pub entry: BankEntry,
    pub role: Role,
    pub similarity_to_query: f64,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_breakdown: Option<ScoreBreakdown>,
    pub fallback_applied: Vec<FallbackTag>,
}

// Captions stay out of every serialized triad.
fn entry_ref<S: Serializer>(e: &BankEntry, s: S) -> Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Ref<'a> {
        id: &'a str,
        doc_id: &'a str,
    }
    Ref {
        id: &e.id,
        doc_id: &e.doc_id,
    }
    .serialize(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct Triad {
    pub query_id: String,
    pub modality: Option<String>,
    pub pool_size: usize,
    pub members: Vec<TriadMember>,
    pub fallbacks: Vec<FallbackTag>,
}

impl Triad {
    pub fn member(&self, role: Role) -> Option<&TriadMember> {
        self.members.iter().find(|m| m.role == role)
    }
}

/// Inclusive, 1-indexed rank interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBand {
    pub lo: usize,
    pub hi: usize,
}

impl RankBand {
    pub fn new(lo: usize, hi: usize) -> Result<Self, TriadError> {
        if lo == 0 || lo > hi {
            return Err(TriadError::BadBand(lo, hi));
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub band_hard_negative: RankBand,
    pub band_boundary_probe: RankBand,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            band_hard_negative: RankBand { lo: 20, hi: 200 },
            band_boundary_probe: RankBand { lo: 200, hi: 1000 },
        }
    }
}

#[derive(Debug, Clone)]
struct Keyword {
    text: String,
    prefix: bool,
}

impl Keyword {
    fn occurs_in(&self, lowered: &str) -> bool {
        lowered.match_indices(self.text.as_str()).any(|(i, m)| {
            let before_ok = lowered[..i]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric());
            let after_ok = self.prefix
                || lowered[i + m.len()..]
                    .chars()
                    .next()
                    .is_none_or(|c| !c.is_alphanumeric());
            before_ok && after_ok
        })
    }
}

/// Ordered modality → keyword table.
#[derive(Debug, Clone)]
pub struct ModalityTable {
    rows: Vec<(String, Vec<Keyword>)>,
}

impl ModalityTable {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_MODALITIES).expect("builtin modality table parses")
    }

    pub fn from_file(path: &Path) -> Result<Self, TriadError> {
        let text = std::fs::read_to_string(path).map_err(|source| TriadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TriadError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| TriadError::BadModalityTable {
                line: i + 1,
                reason: reason.into(),
            };
            let (name, kws) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let name = name.trim().to_uppercase();
            if name.is_empty() {
                return Err(bad("empty modality name"));
            }
            let keywords: Vec<Keyword> = kws
                .split(',')
                .map(str::trim)
                .filter(|k| !k.is_empty())
                .map(|k| {
                    let lowered = k.to_lowercase();
                    match lowered.strip_suffix('*') {
                        Some(stem) => Keyword {
                            text: stem.to_string(),
                            prefix: true,
                        },
                        None => Keyword {
                            text: lowered,
                            prefix: false,
                        },
                    }
                })
                .collect();
            if keywords.is_empty() || keywords.iter().any(|k| k.text.is_empty()) {
                return Err(bad("no keywords"));
            }
            rows.push((name, keywords));
        }
        Ok(Self { rows })
    }

    /// First modality in table order with a keyword in `text`.
    pub fn detect(&self, text: &str) -> Option<&str> {
        let lowered = text.to_lowercase();
        self.rows
            .iter()
            .find(|(_, kws)| kws.iter().any(|k| k.occurs_in(&lowered)))
            .map(|(name, _)| name.as_str())
    }

    pub fn mentions(&self, modality: &str, text: &str) -> bool {
        let lowered = text.to_lowercase();
        self.rows
            .iter()
            .filter(|(name, _)| name.eq_ignore_ascii_case(modality))
            .any(|(_, kws)| kws.iter().any(|k| k.occurs_in(&lowered)))
    }
}

#[derive(Debug, Clone)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_STOPWORDS)
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

fn content_tokens(text: &str, stopwords: &Stopwords) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !stopwords.contains(t))
        .collect()
}

/// Number of distinct non-stopword tokens shared by `caption` and `question`.
pub fn lexical_overlap(caption: &str, question: &str, stopwords: &Stopwords) -> u32 {
    let c = content_tokens(caption, stopwords);
    let q = content_tokens(question, stopwords);
    c.intersection(&q).count() as u32
}

pub fn boundary_probe_score(kappa: u32, s_xr: f64, s_rr1: f64) -> f64 {
    (f64::from(kappa) + 1.0) * s_xr * (1.0 - s_rr1)
}

#[derive(Debug, Clone)]
pub struct GatedPool<'a> {
    pub entries: Vec<&'a BankEntry>,
    pub gate_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Selector {
    pub modalities: ModalityTable,
    pub stopwords: Stopwords,
    pub config: SelectionConfig,
}

impl Default for Selector {
    fn default() -> Self {
        Self::new(SelectionConfig::default())
    }
}

impl Selector {
    pub fn new(config: SelectionConfig) -> Self {
        Self {
            modalities: ModalityTable::builtin(),
            stopwords: Stopwords::builtin(),
            config,
        }
    }

    pub fn detect_modality(
        &self,
        question: &str,
        option_a: &str,
        option_b: &str,
    ) -> Option<String> {
        let joined = format!("{question}\n{option_a}\n{option_b}");
        self.modalities.detect(&joined).map(str::to_owned)
    }

    pub fn gate_candidates<'a>(
        &self,
        bank: &'a ReferenceBank,
        modality: Option<&str>,
    ) -> GatedPool<'a> {
        let all = || bank.entries().iter().collect::<Vec<_>>();
        let Some(m) = modality else {
            return GatedPool {
                entries: all(),
                gate_fallback: false,
            };
        };
        let gated: Vec<&BankEntry> = bank
            .entries()
            .iter()
            .filter(|e| self.modalities.mentions(m, &e.caption))
            .collect();
        if gated.is_empty() {
            GatedPool {
                entries: all(),
                gate_fallback: true,
            }
        } else {
            GatedPool {
                entries: gated,
                gate_fallback: false,
            }
        }
    }

    pub fn lexical_overlap(&self, caption: &str, question: &str) -> u32 {
        lexical_overlap(caption, question, &self.stopwords)
    }

    pub fn select_boundary_probe(
        &self,
        ranked: &[Ranked<'_>],
        selected: &[TriadMember],
        ctx: &QueryContext,
        band: RankBand,
    ) -> Result<TriadMember, TriadError> {
        let anchor = selected
            .iter()
            .find(|m| m.role == Role::Anchor)
            .ok_or(TriadError::PoolExhausted)?;
        let score_of = |r: &Ranked<'_>| {
            let kappa = self.lexical_overlap(&r.entry.caption, &ctx.question_text);
            let s_rr1 = cosine_unchecked(&r.entry.embedding, &anchor.entry.embedding);
            ScoreBreakdown {
                kappa,
                s_xr: r.similarity,
                s_rr1,
                score: boundary_probe_score(kappa, r.similarity, s_rr1),
            }
        };
        let (pick, tags) = pick_in_band(ranked, band, selected, |r| -score_of(r).score)
            .ok_or(TriadError::PoolExhausted)?;
        Ok(TriadMember {
            entry: pick.entry.clone(),
            role: Role::BoundaryProbe,
            similarity_to_query: pick.similarity,
            rank: pick.rank,
            score_breakdown: Some(score_of(&pick)),
            fallback_applied: tags,
        })
    }

    pub fn select_triad(
        &self,
        bank: &ReferenceBank,
        ctx: &QueryContext,
    ) -> Result<Triad, TriadError> {
        ctx.validate()?;
        if bank.is_empty() {
            return Err(TriadError::EmptyPool);
        }
        let modality = self.detect_modality(&ctx.question_text, &ctx.option_a, &ctx.option_b);
        let pool = self.gate_candidates(bank, modality.as_deref());
        let ranked = rank_entries(&pool.entries, &ctx.query_embedding)?;

        let mut fallbacks = Vec::new();
        if pool.gate_fallback {
            fallbacks.push(FallbackTag::ModalityGateEmpty);
        }
        let mut members = vec![select_anchor(&ranked)?];

        match select_hard_negative(&ranked, &members[0], self.config.band_hard_negative) {
            Ok(m) => members.push(m),
            Err(TriadError::PoolExhausted) => fallbacks.push(FallbackTag::Degraded),
            Err(e) => return Err(e),
        }
        if members.len() == 2 {
            match self.select_boundary_probe(
                &ranked,
                &members,
                ctx,
                self.config.band_boundary_probe,
            ) {
                Ok(m) => members.push(m),
                Err(TriadError::PoolExhausted) => fallbacks.push(FallbackTag::Degraded),
                Err(e) => return Err(e),
            }
        }

        Ok(Triad {
            query_id: ctx.query_id.clone(),
            modality,
            pool_size: ranked.len(),
            members,
            fallbacks,
        })
    }
}

pub fn select_anchor(ranked: &[Ranked<'_>]) -> Result<TriadMember, TriadError> {
    let top = ranked.first().ok_or(TriadError::EmptyPool)?;
    Ok(TriadMember {
        entry: top.entry.clone(),
        role: Role::Anchor,
        similarity_to_query: top.similarity,
        rank: top.rank,
        score_breakdown: None,
        fallback_applied: Vec::new(),
    })
}

pub fn select_hard_negative(
    ranked: &[Ranked<'_>],
    anchor: &TriadMember,
    band: RankBand,
) -> Result<TriadMember, TriadError> {
    let selected = std::slice::from_ref(anchor);
    let (pick, tags) = pick_in_band(ranked, band, selected, |r| {
        cosine_unchecked(&r.entry.embedding, &anchor.entry.embedding).abs()
    })
    .ok_or(TriadError::PoolExhausted)?;
    Ok(TriadMember {
        entry: pick.entry.clone(),
        role: Role::HardNegative,
        similarity_to_query: pick.similarity,
        rank: pick.rank,
        score_breakdown: None,
        fallback_applied: tags,
    })
}

/// Picks the candidate minimising `cost` within `band`, ties to the smaller id.
///
/// The band is clamped to the pool and, when it holds no unselected entry,
/// widened to `[max(2, ceil(lo/2)), min(P, 2*hi)]` until a candidate appears or
/// the whole pool has been searched. Within the band, entries from documents not
/// yet used are preferred.
fn pick_in_band<'a>(
    ranked: &[Ranked<'a>],
    band: RankBand,
    selected: &[TriadMember],
    cost: impl Fn(&Ranked<'a>) -> f64,
) -> Option<(Ranked<'a>, Vec<FallbackTag>)> {
    let pool = ranked.len();
    let is_selected = |r: &Ranked<'_>| selected.iter().any(|m| m.entry.id == r.entry.id);
    let (mut lo, mut hi) = (band.lo, band.hi.min(pool));
    let mut tags = Vec::new();

    let candidates: Vec<&Ranked<'a>> = loop {
        let found: Vec<&Ranked<'a>> = if lo <= hi {
            ranked[lo - 1..hi]
                .iter()
                .filter(|r| !is_selected(r))
                .collect()
        } else {
            Vec::new()
        };
        if !found.is_empty() {
            break found;
        }
        if lo <= 2 && hi >= pool {
            return None;
        }
        lo = lo.div_ceil(2).max(2);
        hi = hi.saturating_mul(2).min(pool);
        if !tags.contains(&FallbackTag::BandExpanded) {
            tags.push(FallbackTag::BandExpanded);
        }
    };

    let used_docs: HashSet<&str> = selected.iter().map(|m| m.entry.doc_id.as_str()).collect();
    let fresh: Vec<&Ranked<'a>> = candidates
        .iter()
        .copied()
        .filter(|r| !used_docs.contains(r.entry.doc_id.as_str()))
        .collect();
    let eligible = if fresh.is_empty() {
        tags.push(FallbackTag::DocumentRelaxed);
        candidates
    } else {
        fresh
    };

    eligible
        .into_iter()
        .map(|r| (r, cost(r)))
        .min_by(|(ra, ca), (rb, cb)| ca.total_cmp(cb).then_with(|| ra.entry.id.cmp(&rb.entry.id)))
        .map(|(r, _)| (*r, tags))
}

impl PartialEq for TriadMember {
    fn eq(&self, other: &Self) -> bool {
        self.entry.id == other.entry.id
            && self.role == other.role
            && self.rank == other.rank
            && self.fallback_applied == other.fallback_applied
    }
}
