//! Contrastive triad reference selection and confidence-weighted pairwise
//! inference with abstention, for two-image multiple-choice questions.
//!
//! Pipeline per query image: select an anchor, a hard negative and a boundary
//! probe from a reference bank ([`triad`]), compare the query against each
//! ([`comparison`]), aggregate the confident votes and decide or abstain
//! ([`decision`]), then reconcile the two images of a pair ([`pair`]).
//! [`eval`] scores runs and replays them across thresholds.

pub mod answer;
pub mod bank;
pub mod cli;
pub mod comparison;
pub mod decision;
pub mod eval;
pub mod pair;
pub mod synthetic;
pub mod triad;

pub use answer::{Answer, Label};
pub use bank::{cosine_similarity, deduplicate, load_bank, BankEntry, Embedding, ReferenceBank};
pub use decision::{Decision, Thresholds};
pub use eval::{compute_metrics, load_dataset, MetricsReport};
pub use pair::{run_pair, ConfusionPair, PairResult};
pub use triad::{QueryContext, Selector, Triad};
