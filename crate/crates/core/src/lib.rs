//! Semantic-uncertainty engine for generative-model outputs.
//!
//! Pipeline: sample M generations per context through a completion
//! backend, cluster them by semantic equivalence, and score the cluster
//! structure with a family of semantic-entropy estimators. For long-form
//! reports, each sentence is converted into binary VQA probes whose answer
//! consistency yields a per-sentence entropy and a three-level reliability
//! index. A DPO preference kernel and an AUROC evaluation harness round
//! out the toolkit.

pub mod clustering;
pub mod config;
pub mod dpo;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod logmath;
pub mod report;
pub mod schema;
pub mod text;

pub mod cli;

pub use error::{Result, UqError};
