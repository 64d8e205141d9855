use std::fmt;

use serde::{Deserialize, Serialize};

/// A committed answer option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
}

impl Label {
    pub fn other(self) -> Self {
        match self {
            Label::A => Label::B,
            Label::B => Label::A,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" => Some(Label::A),
            "B" => Some(Label::B),
            _ => None,
        }
    }
}

/// An answer that may abstain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Answer {
    A,
    B,
    #[serde(rename = "abstain")]
    Abstain,
}

impl Answer {
    pub fn label(self) -> Option<Label> {
        match self {
            Answer::A => Some(Label::A),
            Answer::B => Some(Label::B),
            Answer::Abstain => None,
        }
    }

    pub fn is_abstain(self) -> bool {
        self == Answer::Abstain
    }

    /// The token used in prompt output formats: `A`, `B` or `-`.
    pub fn token(self) -> &'static str {
        match self {
            Answer::A => "A",
            Answer::B => "B",
            Answer::Abstain => "-",
        }
    }
}

impl From<Label> for Answer {
    fn from(l: Label) -> Self {
        match l {
            Label::A => Answer::A,
            Label::B => Answer::B,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(Answer::from(*self).token())
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}
