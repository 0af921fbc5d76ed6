//! Deterministic scripted backend for tests and offline runs.
//!
//! The fixture is a JSON file keyed by (context id, query); a request for
//! sample index `i` returns entry `i % len` of the matching script, so two
//! identical calls always produce identical output. `"*"` works as a
//! wildcard for either key component (query wildcard first, then context
//! wildcard) which keeps fixtures small when every probe of a context
//! shares one script.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::schema::SCHEMA_VERSION;

use super::backend::{BackendKind, Completion, CompletionBackend, CompletionRequest, FinishReason};

/// One scripted completion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockSample {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    pub context_id: String,
    pub query: String,
    pub samples: Vec<MockSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockFixture {
    pub schema: String,
    pub entries: Vec<MockEntry>,
}

impl MockFixture {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        MockFixture {
            schema: SCHEMA_VERSION.to_string(),
            entries,
        }
    }
}

pub struct MockBackend {
    scripts: HashMap<(String, String), Vec<MockSample>>,
}

impl MockBackend {
    pub fn from_fixture(fixture: MockFixture) -> Result<Self> {
        if fixture.schema != SCHEMA_VERSION {
            return Err(UqError::InvalidInput(format!(
                "mock fixture schema {:?}, expected {SCHEMA_VERSION:?}",
                fixture.schema
            )));
        }
        let mut scripts = HashMap::new();
        for entry in fixture.entries {
            if entry.samples.is_empty() {
                return Err(UqError::InvalidInput(format!(
                    "mock entry ({}, {}) has no samples",
                    entry.context_id, entry.query
                )));
            }
            scripts.insert((entry.context_id, entry.query), entry.samples);
        }
        Ok(MockBackend { scripts })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)?;
        let fixture: MockFixture = serde_json::from_str(&data)?;
        Self::from_fixture(fixture)
    }

    fn lookup(&self, context_id: &str, query: &str) -> Option<&Vec<MockSample>> {
        self.scripts
            .get(&(context_id.to_string(), query.to_string()))
            .or_else(|| self.scripts.get(&(context_id.to_string(), "*".to_string())))
            .or_else(|| self.scripts.get(&("*".to_string(), "*".to_string())))
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let script = self.lookup(&request.context_id, &request.query).ok_or_else(|| {
            UqError::BackendUnavailable(format!(
                "mock fixture has no entry for context {:?} query {:?}",
                request.context_id, request.query
            ))
        })?;
        let sample = &script[request.sample_index % script.len()];
        Ok(Completion {
            text: sample.text.clone(),
            token_logprobs: sample.token_logprobs.clone(),
            finish_reason: FinishReason::Stop,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }
}
