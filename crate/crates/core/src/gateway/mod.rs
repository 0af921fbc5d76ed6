//! Sampling gateway: talks to a completion backend, draws M generations
//! per context, generates binary VQA probes for report sentences, and
//! collects probe answers.
//!
//! Every operation either returns a complete result (exactly `m` samples)
//! or an error — never a partial set. Requests run on a bounded worker
//! pool and results are re-sorted by request index, so output order is
//! deterministic regardless of completion arrival.

mod backend;
mod mock;

pub use backend::{
    BackendKind, Completion, CompletionBackend, CompletionRequest, FinishReason, HttpBackend,
    RetryPolicy, ENV_API_BASE, ENV_API_KEY,
};
pub use mock::{MockBackend, MockEntry, MockFixture, MockSample};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::text::AnswerLabel;

/// A probe context: the query (plus optional image reference) a backend is
/// asked about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeContext {
    pub id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl ProbeContext {
    pub fn new(id: impl Into<String>, query: impl Into<String>) -> Self {
        ProbeContext {
            id: id.into(),
            query: query.into(),
            image_ref: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(UqError::InvalidInput("context id is empty".into()));
        }
        if self.query.is_empty() {
            return Err(UqError::InvalidInput(format!(
                "context {:?} has an empty query",
                self.id
            )));
        }
        Ok(())
    }
}

/// One sampled generation with its per-token natural-log probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub finish_reason: FinishReason,
}

impl GenerationSample {
    /// Sequence log-probability: sum of token log-probs (the literal
    /// product form). `None` when the backend supplied no log-probs.
    pub fn sequence_logprob(&self) -> Option<f64> {
        if self.token_logprobs.is_empty() {
            None
        } else {
            Some(self.token_logprobs.iter().sum())
        }
    }

    /// Mean token log-prob, for the optional length-normalized mode.
    pub fn mean_token_logprob(&self) -> Option<f64> {
        self.sequence_logprob()
            .map(|s| s / self.token_logprobs.len() as f64)
    }
}

/// Sampling knobs; defaults follow the reference setup (temperature 1.0,
/// top-p 0.9).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Samples per context.
    pub m: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 0.9,
            max_tokens: 256,
            m: 10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(UqError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p.is_finite() && self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(UqError::InvalidConfig(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(UqError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        if self.m == 0 {
            return Err(UqError::InvalidConfig("m must be >= 1".into()));
        }
        Ok(())
    }
}

/// A context plus its M sampled generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub context: ProbeContext,
    pub samples: Vec<GenerationSample>,
    pub sampling_config: SamplingConfig,
}

/// Expected answer of a binary probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedAnswer {
    Yes,
    No,
}

impl ExpectedAnswer {
    pub fn as_label(&self) -> AnswerLabel {
        match self {
            ExpectedAnswer::Yes => AnswerLabel::Yes,
            ExpectedAnswer::No => AnswerLabel::No,
        }
    }
}

/// A binary VQA probe derived from one report sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQAProbe {
    pub question: String,
    pub expected_answer: ExpectedAnswer,
    pub source_sentence_index: usize,
}

/// Gateway-wide options.
#[derive(Debug, Clone, Copy)]
pub struct GatewayOptions {
    /// Reject samples without token log-probs. On by default; the
    /// likelihood-based estimators need them.
    pub require_logprobs: bool,
    /// Max in-flight requests.
    pub parallelism: usize,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            require_logprobs: true,
            parallelism: 8,
        }
    }
}

/// Deterministic fallback probe for a sentence, used with the mock backend
/// and whenever a live backend returns malformed probe output.
pub fn template_probe(sentence: &str, sentence_index: usize) -> VQAProbe {
    VQAProbe {
        question: format!(
            "According to the image, is the following statement true: {}?",
            sentence.trim().trim_end_matches(['.', ';'])
        ),
        expected_answer: ExpectedAnswer::Yes,
        source_sentence_index: sentence_index,
    }
}

/// Draw `config.m` generations for one context.
pub fn sample_generations(
    context: &ProbeContext,
    config: &SamplingConfig,
    backend: &dyn CompletionBackend,
    options: &GatewayOptions,
) -> Result<SampleSet> {
    context.validate()?;
    config.validate()?;
    let requests: Vec<CompletionRequest> = (0..config.m as usize)
        .map(|i| CompletionRequest {
            context_id: context.id.clone(),
            query: context.query.clone(),
            image_ref: context.image_ref.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
            sample_index: i,
        })
        .collect();
    let completions = run_parallel(backend, &requests, options.parallelism);
    let mut samples = Vec::with_capacity(completions.len());
    for completion in completions {
        samples.push(validate_sample(completion?, options.require_logprobs)?);
    }
    Ok(SampleSet {
        context: context.clone(),
        samples,
        sampling_config: *config,
    })
}

/// Generate `m` binary VQA probes for one report sentence.
///
/// Live backends are asked for `Q: ... || A: yes|no` lines; any shortfall
/// (mock backend, malformed lines, wrong count) is filled with the
/// deterministic template probe.
pub fn generate_probes(
    sentence: &str,
    sentence_index: usize,
    m: u32,
    backend: &dyn CompletionBackend,
) -> Result<Vec<VQAProbe>> {
    if sentence.trim().is_empty() {
        return Err(UqError::EmptySentence);
    }
    if m == 0 {
        return Err(UqError::InvalidConfig("probe count must be >= 1".into()));
    }
    let mut probes = Vec::with_capacity(m as usize);
    if backend.kind() != BackendKind::Mock {
        let request = CompletionRequest {
            context_id: format!("probe-gen:{sentence_index}"),
            query: probe_generation_prompt(sentence, m),
            image_ref: None,
            temperature: 0.2,
            top_p: 0.9,
            max_tokens: 1024,
            sample_index: 0,
        };
        let completion = backend.complete(&request)?;
        probes = parse_probe_lines(&completion.text, sentence_index, m as usize);
    }
    while probes.len() < m as usize {
        probes.push(template_probe(sentence, sentence_index));
    }
    Ok(probes)
}

/// Collect `config.m` sampled answers for one probe.
pub fn answer_probe(
    probe: &VQAProbe,
    context: &ProbeContext,
    config: &SamplingConfig,
    backend: &dyn CompletionBackend,
    options: &GatewayOptions,
) -> Result<SampleSet> {
    answer_probe_at(probe, context, config, backend, options, 0)
}

/// As [`answer_probe`], with sample indices offset by `base_index`.
///
/// Probes of one sentence often share identical question text (the
/// template fallback); distinct offsets keep their scripted mock answers
/// independent.
pub fn answer_probe_at(
    probe: &VQAProbe,
    context: &ProbeContext,
    config: &SamplingConfig,
    backend: &dyn CompletionBackend,
    options: &GatewayOptions,
    base_index: usize,
) -> Result<SampleSet> {
    context.validate()?;
    config.validate()?;
    if probe.question.is_empty() {
        return Err(UqError::InvalidInput("probe question is empty".into()));
    }
    let requests: Vec<CompletionRequest> = (0..config.m as usize)
        .map(|i| CompletionRequest {
            context_id: context.id.clone(),
            query: probe.question.clone(),
            image_ref: context.image_ref.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
            sample_index: base_index + i,
        })
        .collect();
    let completions = run_parallel(backend, &requests, options.parallelism);
    let mut samples = Vec::with_capacity(completions.len());
    for completion in completions {
        samples.push(validate_sample(completion?, options.require_logprobs)?);
    }
    let mut probe_context = context.clone();
    probe_context.query = probe.question.clone();
    Ok(SampleSet {
        context: probe_context,
        samples,
        sampling_config: *config,
    })
}

fn probe_generation_prompt(sentence: &str, m: u32) -> String {
    format!(
        "Generate {m} yes/no verification questions for this sentence from a medical report. \
         Each question must be answerable from the image alone, and the sentence must entail \
         the expected answer. Respond with exactly {m} lines, each formatted as: \
         Q: <question> || A: <yes|no>\nSentence: {sentence}"
    )
}

fn parse_probe_lines(text: &str, sentence_index: usize, limit: usize) -> Vec<VQAProbe> {
    let mut probes = Vec::new();
    for line in text.lines() {
        if probes.len() >= limit {
            break;
        }
        let line = line.trim();
        let Some(rest) = line.strip_prefix("Q:").map(str::trim) else {
            continue;
        };
        let Some((question, answer)) = rest.split_once("|| A:").or_else(|| rest.split_once("A:"))
        else {
            continue;
        };
        let question = question.trim().trim_end_matches("||").trim();
        if question.is_empty() {
            continue;
        }
        let expected = match crate::text::normalize_answer(answer) {
            AnswerLabel::Yes => ExpectedAnswer::Yes,
            AnswerLabel::No => ExpectedAnswer::No,
            AnswerLabel::Unknown => continue,
        };
        probes.push(VQAProbe {
            question: question.to_string(),
            expected_answer: expected,
            source_sentence_index: sentence_index,
        });
    }
    probes
}

fn validate_sample(completion: Completion, require_logprobs: bool) -> Result<GenerationSample> {
    let token_logprobs = match completion.token_logprobs {
        Some(lps) => {
            if lps.iter().any(|lp| !lp.is_finite() || *lp > 0.0) {
                return Err(UqError::LogprobsMissing);
            }
            lps
        }
        None if require_logprobs => return Err(UqError::LogprobsMissing),
        None => Vec::new(),
    };
    let finish_reason = if completion.text.is_empty() {
        FinishReason::Error
    } else {
        completion.finish_reason
    };
    Ok(GenerationSample {
        text: completion.text,
        token_logprobs,
        finish_reason,
    })
}

/// Run requests on a bounded worker pool; results come back in request
/// order.
fn run_parallel(
    backend: &dyn CompletionBackend,
    requests: &[CompletionRequest],
    parallelism: usize,
) -> Vec<Result<Completion>> {
    let n = requests.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = parallelism.clamp(1, n);
    if workers == 1 {
        return requests.iter().map(|r| backend.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Completion>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = backend.complete(&requests[i]);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}
