//! Parsing of model replies in the fixed output formats, plus the inverse
//! formatter used by the mock engine.

use serde::{Deserialize, Serialize};

use crate::answer::Answer;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub modality_anatomy: String,
    pub findings: Vec<String>,
    pub differences: Vec<String>,
    pub key_evidence: String,
    pub raw_response: String,
}

impl EvidenceRecord {
    pub fn is_complete(&self) -> bool {
        !self.modality_anatomy.is_empty()
            && self.findings.len() == 3
            && (2..=4).contains(&self.differences.len())
            && !self.key_evidence.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Degraded,
    Failed,
}

/// Vote, confidence and evidence extracted from one pairwise reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedComparison {
    pub vote: Answer,
    pub confidence: u32,
    pub evidence: EvidenceRecord,
    pub status: ParseStatus,
}

/// Strips markdown decoration and returns the value of `name:` if the line is
/// that field. Names compare case-insensitively with spaces ignored.
fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let line = line
        .trim()
        .trim_start_matches(['*', '#', '_', '`', '>', ' ']);
    let colon = line.find(':')?;
    let key: String = line[..colon]
        .trim_end_matches(['*', '_', '`'])
        .chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    let want: String = name
        .chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    (key == want).then(|| line[colon + 1..].trim_start_matches(['*', '_', '`']).trim())
}

fn answer_token(value: &str) -> Option<Answer> {
    let tok = value
        .split_whitespace()
        .next()?
        .trim_matches(|c: char| "*_`'\"()[]<>.,:;".contains(c));
    match tok {
        "A" | "a" => Some(Answer::A),
        "B" | "b" => Some(Answer::B),
        "-" | "\u{2013}" | "\u{2014}" | "\u{2212}" | "\u{22a5}" => Some(Answer::Abstain),
        t if t.eq_ignore_ascii_case("abstain") => Some(Answer::Abstain),
        _ => None,
    }
}

fn confidence_value(value: &str) -> Option<u32> {
    let start = value.find(|c: char| c.is_ascii_digit())?;
    let digits: &str = &value[start..];
    let end = digits
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(digits.len());
    if value[..start].trim_end().ends_with('-') {
        return Some(0);
    }
    let n = digits[..end].parse::<u64>().unwrap_or(u64::MAX);
    Some(n.min(100) as u32)
}

fn strip_bullet(line: &str) -> &str {
    let l = line.trim();
    let l = l
        .strip_prefix("- ")
        .or_else(|| l.strip_prefix("* "))
        .or_else(|| l.strip_prefix("\u{2022} "))
        .unwrap_or(l);
    // "1." / "1)" enumerations
    let digits = l.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim();
        }
    }
    l.trim()
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Findings,
    Differences,
}

/// Parses a pairwise comparison reply. Never panics; failures are encoded in
/// the returned status (`Failed` always carries an abstain vote and zero confidence).
pub fn parse_comparison_response(text: &str) -> ParsedComparison {
    let mut vote = None;
    let mut confidence = None;
    let mut ev = EvidenceRecord {
        raw_response: text.to_string(),
        ..Default::default()
    };
    let mut section = Section::None;

    for line in text.lines() {
        if let Some(v) = field(line, "Answer") {
            vote = Some(answer_token(v));
            section = Section::None;
        } else if let Some(v) = field(line, "Confidence") {
            confidence = Some(confidence_value(v));
            section = Section::None;
        } else if let Some(v) = field(line, "Modality and Anatomy") {
            ev.modality_anatomy = v.to_string();
            section = Section::None;
        } else if let Some(v) = field(line, "QUERY Findings") {
            ev.findings.clear();
            if !v.is_empty() {
                ev.findings.push(strip_bullet(v).to_string());
            }
            section = Section::Findings;
        } else if let Some(v) = field(line, "Differences vs REFERENCE") {
            ev.differences.clear();
            if !v.is_empty() {
                ev.differences.push(strip_bullet(v).to_string());
            }
            section = Section::Differences;
        } else if let Some(v) = field(line, "Key evidence") {
            ev.key_evidence = v.to_string();
            section = Section::None;
        } else {
            let item = strip_bullet(line);
            if item.is_empty() {
                continue;
            }
            match section {
                Section::Findings => ev.findings.push(item.to_string()),
                Section::Differences => ev.differences.push(item.to_string()),
                Section::None => {}
            }
        }
    }

    // the last Answer line decides, even when it is malformed
    match vote.flatten() {
        None => ParsedComparison {
            vote: Answer::Abstain,
            confidence: 0,
            evidence: ev,
            status: ParseStatus::Failed,
        },
        Some(vote) => {
            let conf = confidence.flatten();
            let status = if conf.is_some() && ev.is_complete() {
                ParseStatus::Ok
            } else {
                ParseStatus::Degraded
            };
            ParsedComparison {
                vote,
                confidence: conf.unwrap_or(0),
                evidence: ev,
                status,
            }
        }
    }
}

/// Last `Final Answer:` line of an aggregation reply.
pub fn parse_final_answer(text: &str) -> Option<Answer> {
    text.lines()
        .filter_map(|l| field(l, "Final Answer"))
        .next_back()
        .and_then(answer_token)
}

/// `Final Answer Image1:` / `Final Answer Image2:` of a pair adjudication reply.
pub fn parse_pair_answers(text: &str) -> Option<(Answer, Answer)> {
    let last = |name: &str| {
        text.lines()
            .filter_map(|l| field(l, name))
            .next_back()
            .and_then(answer_token)
    };
    Some((last("Final Answer Image1")?, last("Final Answer Image2")?))
}

/// Renders a reply in the exact pairwise output format.
pub fn format_comparison_response(
    vote: Answer,
    confidence: u32,
    evidence: &EvidenceRecord,
) -> String {
    let mut out = format!(
        "Modality and Anatomy: {}\n\nQUERY Findings:\n\n",
        evidence.modality_anatomy
    );
    for f in &evidence.findings {
        out.push_str(f);
        out.push_str("\n\n");
    }
    out.push_str("Differences vs REFERENCE:\n\n");
    for d in &evidence.differences {
        out.push_str(d);
        out.push_str("\n\n");
    }
    out.push_str(&format!(
        "Answer: {}\n\nConfidence: {}\n\nKey evidence: {}\n",
        vote.token(),
        confidence,
        evidence.key_evidence
    ));
    out
}
