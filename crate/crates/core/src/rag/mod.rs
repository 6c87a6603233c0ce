//! Retrieval-grounded generation: evidence rendering, context assembly and
//! generation backends.
//!
//! Rendered context layout:
//!
//! ```text
//! PROMPT:
//! <system prompt>
//! EVIDENCE:
//! [1] (score=0.912345, style=image, id=doc-7, subject=physics) content on one line
//! [2] (...) ...
//! QUERY:
//! <query text>
//! ```
//!
//! Body lines equal to a section header are prefixed with a backslash so
//! every header appears exactly once.

mod backend;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::{Payload, Query};
use crate::http::RetryPolicy;
use crate::pipeline::{Retriever, Stage, StageError};
use crate::vecindex::{EvidenceSet, VecIndex};

pub use backend::{
    BackendFailure, ChatCompletionsBackend, EchoBackend, GenerationBackend, Usage, ENV_API_KEY, ENV_ENDPOINT,
    ENV_MODEL,
};

pub const PROMPT_HEADER: &str = "PROMPT:";
pub const EVIDENCE_HEADER: &str = "EVIDENCE:";
pub const QUERY_HEADER: &str = "QUERY:";

const DEFAULT_PROMPT: &str = "You are a professional STEM educator. Answer the question using the numbered \
evidence below, cite evidence by its rank in brackets, and say so when the evidence does not cover the question.";

#[derive(Debug, Error)]
pub enum RagError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("system prompt is empty")]
    EmptyPrompt,
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("generation backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { message: String, attempts: u32 },
    #[error("generation backend rejected the request with status {status}: {body}")]
    BackendRejected { status: u16, body: String },
    #[error("generation backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
}

/// Instruction text placed in the PROMPT section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrompt {
    pub id: String,
    pub version: u32,
    pub text: String,
}

impl SystemPrompt {
    pub fn new(id: impl Into<String>, version: u32, text: impl Into<String>) -> Result<Self, RagError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RagError::EmptyPrompt);
        }
        Ok(Self {
            id: id.into(),
            version,
            text,
        })
    }

    pub fn educator() -> Self {
        Self {
            id: "stem-educator".into(),
            version: 1,
            text: DEFAULT_PROMPT.into(),
        }
    }
}

impl Default for SystemPrompt {
    fn default() -> Self {
        Self::educator()
    }
}

/// Generation-side settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RagConfig {
    pub k: usize,
    /// Maximum characters of the EVIDENCE body.
    pub char_budget: usize,
    pub timeout_ms: u64,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Overrides the default educator prompt.
    pub system_prompt: Option<String>,
}

impl Default for RagConfig {
    fn default() -> Self {
        Self {
            k: 5,
            char_budget: 4_000,
            timeout_ms: 30_000,
            temperature: 0.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            system_prompt: None,
        }
    }
}

impl RagConfig {
    pub fn prompt(&self) -> Result<SystemPrompt, RagError> {
        match &self.system_prompt {
            Some(t) => SystemPrompt::new("custom", 1, t.clone()),
            None => Ok(SystemPrompt::educator()),
        }
    }
}

/// One evidence line as rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedEvidence {
    pub rank: usize,
    pub id: String,
    pub line: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub prompt_section: String,
    pub evidence_section: Vec<RenderedEvidence>,
    pub query_section: String,
    pub rendered: String,
    /// No evidence was available or none fit the budget.
    pub degraded: bool,
    /// Items left out by the character budget.
    pub dropped: usize,
}

impl GenerationContext {
    /// Everything after the PROMPT section, sent as the user message.
    pub fn user_message(&self) -> String {
        let mut out = String::from(EVIDENCE_HEADER);
        out.push('\n');
        for e in &self.evidence_section {
            out.push_str(&e.line);
            out.push('\n');
        }
        out.push_str(QUERY_HEADER);
        out.push('\n');
        out.push_str(&self.query_section);
        out
    }

    pub fn evidence_ids(&self) -> Vec<&str> {
        self.evidence_section.iter().map(|e| e.id.as_str()).collect()
    }
}

fn escape_body(text: &str) -> String {
    text.lines()
        .map(|l| {
            let t = l.trim_end();
            if t == PROMPT_HEADER || t == EVIDENCE_HEADER || t == QUERY_HEADER || t.starts_with('\\') {
                format!("\\{l}")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn query_text(q: &Query) -> Result<String, RagError> {
    let text = match &q.payload {
        Payload::Text(t) => t.clone(),
        Payload::Bytes(b) => match std::str::from_utf8(b) {
            Ok(t) => t.to_string(),
            Err(_) => format!("<{} payload, {} bytes>", q.style, b.len()),
        },
    };
    if text.trim().is_empty() {
        return Err(RagError::EmptyQuery);
    }
    Ok(text)
}

/// Renders one evidence line.
pub fn render_evidence_line(rank: usize, score: f64, style: &str, id: &str, meta: &[(&str, &str)], content: &str) -> String {
    let mut head = format!("[{rank}] (score={score:.6}, style={style}, id={}", one_line(id));
    for (k, v) in meta {
        head.push_str(&format!(", {}={}", one_line(k), one_line(v)));
    }
    format!("{head}) {}", one_line(content))
}

/// Deterministic context assembly. Evidence is kept in rank order while the
/// EVIDENCE body (lines plus newlines) stays within `char_budget`; the first
/// item that does not fit and everything after it are dropped.
pub fn build_context(
    prompt: &SystemPrompt,
    ev: &EvidenceSet,
    q: &Query,
    char_budget: usize,
) -> Result<GenerationContext, RagError> {
    let query_section = escape_body(&query_text(q)?);
    let prompt_section = escape_body(&prompt.text);
    let mut evidence_section = Vec::new();
    let mut used = 0;
    for e in &ev.items {
        let meta: Vec<(&str, &str)> = e.item.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let line = render_evidence_line(e.rank, e.score, e.item.style.as_str(), &e.item.id, &meta, &e.item.content);
        let cost = line.chars().count() + 1;
        if used + cost > char_budget {
            break;
        }
        used += cost;
        evidence_section.push(RenderedEvidence {
            rank: e.rank,
            id: e.item.id.clone(),
            line,
        });
    }
    let dropped = ev.items.len() - evidence_section.len();
    let mut rendered = format!("{PROMPT_HEADER}\n{prompt_section}\n{EVIDENCE_HEADER}\n");
    for e in &evidence_section {
        rendered.push_str(&e.line);
        rendered.push('\n');
    }
    rendered.push_str(QUERY_HEADER);
    rendered.push('\n');
    rendered.push_str(&query_section);
    Ok(GenerationContext {
        degraded: evidence_section.is_empty(),
        prompt_section,
        evidence_section,
        query_section,
        rendered,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub backend: String,
    pub attempts: u32,
    pub latency: Duration,
    pub usage: Option<Usage>,
}

/// Calls `backend` under `policy`: transport failures and timeouts are
/// retried with exponential backoff, rejections are returned at once.
pub fn generate(
    ctx: &GenerationContext,
    backend: &dyn GenerationBackend,
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> Result<GenerationResult, RagError> {
    use crate::http::{retry, Attempt};
    let start = Instant::now();
    let out = retry(policy, sleep, |_| {
        backend.generate_once(ctx).map_err(|f| match f {
            BackendFailure::Transient(_) | BackendFailure::Timeout => Attempt::Transient(f),
            _ => Attempt::Permanent(f),
        })
    });
    match out {
        Ok(((text, usage), attempts)) => Ok(GenerationResult {
            text,
            backend: backend.id().to_string(),
            attempts,
            latency: start.elapsed(),
            usage,
        }),
        Err((f, attempts)) => Err(match f {
            BackendFailure::Transient(message) => RagError::BackendUnavailable { message, attempts },
            BackendFailure::Timeout => RagError::Timeout { attempts },
            BackendFailure::Rejected { status, body } => RagError::BackendRejected { status, body },
            BackendFailure::Malformed(m) => RagError::MalformedResponse(m),
        }),
    }
}

/// A failure of [`answer`], tagged with its stage.
#[derive(Debug, Error)]
pub enum AnswerError {
    #[error(transparent)]
    Pipeline(#[from] StageError),
    #[error("stage=context: {0}")]
    Context(#[source] RagError),
    #[error("stage=generation: {0}")]
    Generation(#[source] RagError),
}

impl AnswerError {
    pub fn stage(&self) -> Stage {
        match self {
            AnswerError::Pipeline(e) => e.stage(),
            AnswerError::Context(_) | AnswerError::Generation(_) => Stage::Generation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Answer {
    pub result: GenerationResult,
    pub evidence: EvidenceSet,
    pub context: GenerationContext,
}

/// Retrieve → build context → generate.
pub fn answer(
    q: &Query,
    retriever: &Retriever,
    index: &VecIndex,
    prompt: &SystemPrompt,
    cfg: &RagConfig,
    backend: &dyn GenerationBackend,
    sleep: &dyn Fn(Duration),
) -> Result<Answer, AnswerError> {
    query_text(q).map_err(AnswerError::Context)?;
    let evidence = retriever.retrieve(q, index, cfg.k)?;
    let context = build_context(prompt, &evidence, q, cfg.char_budget).map_err(AnswerError::Context)?;
    let result = generate(&context, backend, &cfg.retry, sleep).map_err(AnswerError::Generation)?;
    Ok(Answer {
        result,
        evidence,
        context,
    })
}
