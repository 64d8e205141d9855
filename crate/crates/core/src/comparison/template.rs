//! Prompt templates with a closed placeholder set.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PLACEHOLDERS: [&str; 8] = ["q", "a", "b", "n", "votes", "meta1", "meta2", "pred"];

const PAIRWISE: &str = include_str!("../../templates/pairwise_discriminate.txt");
const AGGREGATE: &str = include_str!("../../templates/aggregate_decision.txt");
const PAIR_ADJUDICATOR: &str = include_str!("../../templates/pair_adjudicator.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder {
        template: TemplateName,
        name: String,
    },
    #[error("no binding for placeholder {{{name}}} in template {template}")]
    MissingBinding {
        template: TemplateName,
        name: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    PairwiseDiscriminate,
    AggregateDecision,
    PairAdjudicator,
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateName::PairwiseDiscriminate => "pairwise_discriminate",
            TemplateName::AggregateDecision => "aggregate_decision",
            TemplateName::PairAdjudicator => "pair_adjudicator",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Text(usize, usize),
    Slot(usize, usize),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    name: TemplateName,
    body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parses `body`; `{ident}` is a placeholder, any other brace is literal.
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let mut pieces = Vec::new();
        let bytes = body.as_bytes();
        let (mut i, mut text_start) = (0, 0);
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let ident_len = bytes[i + 1..]
                    .iter()
                    .take_while(|c| c.is_ascii_alphanumeric() || **c == b'_')
                    .count();
                let close = i + 1 + ident_len;
                if ident_len > 0 && bytes.get(close) == Some(&b'}') {
                    let ident = &body[i + 1..close];
                    if !PLACEHOLDERS.contains(&ident) {
                        return Err(TemplateError::UnknownPlaceholder {
                            template: name,
                            name: ident.to_string(),
                        });
                    }
                    if text_start < i {
                        pieces.push(Piece::Text(text_start, i));
                    }
                    pieces.push(Piece::Slot(i + 1, close));
                    i = close + 1;
                    text_start = i;
                    continue;
                }
            }
            i += 1;
        }
        if text_start < bytes.len() {
            pieces.push(Piece::Text(text_start, bytes.len()));
        }
        Ok(Self { name, body, pieces })
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match *p {
            Piece::Slot(s, e) => Some(&self.body[s..e]),
            Piece::Text(..) => None,
        })
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }

    /// Single-pass substitution: binding values are never re-scanned.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        for p in &self.pieces {
            match *p {
                Piece::Text(s, e) => out.push_str(&self.body[s..e]),
                Piece::Slot(s, e) => {
                    let key = &self.body[s..e];
                    let value = bindings
                        .get(key)
                        .ok_or_else(|| TemplateError::MissingBinding {
                            template: self.name,
                            name: key.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// The three shipped templates.
#[derive(Debug, Clone)]
pub struct Templates {
    pub pairwise: PromptTemplate,
    pub aggregate: PromptTemplate,
    pub pair_adjudicator: PromptTemplate,
}

impl Templates {
    pub fn builtin() -> Self {
        let load = |name, body: &str| {
            PromptTemplate::new(name, body.strip_suffix('\n').unwrap_or(body))
                .expect("builtin template is valid")
        };
        Self {
            pairwise: load(TemplateName::PairwiseDiscriminate, PAIRWISE),
            aggregate: load(TemplateName::AggregateDecision, AGGREGATE),
            pair_adjudicator: load(TemplateName::PairAdjudicator, PAIR_ADJUDICATOR),
        }
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        [&self.pairwise, &self.aggregate, &self.pair_adjudicator]
            .into_iter()
            .map(|t| (t.name().to_string(), t.sha256()))
            .collect()
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}
