//! The actor: runs one interaction episode per task sample.
//!
//! Round one sends the filled prompt; after every model answer a feedback
//! generator either stops the episode or returns commentary that is shown
//! to the model in the next round. Everything exchanged is recorded
//! verbatim in a [`Transcript`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Gateway, GatewayError, Role, SamplingParams};
use crate::prompt::{PromptDocument, SegmentKind};
use crate::templates::{REFLECTION_SYSTEM, REFLECTION_USER_HEADER};
use crate::toy::{parse_toy_answer, toy_check, ToySample, PLAN_MARKER};

pub const DEFAULT_MAX_ROUNDS: u32 = 3;
pub const DEFAULT_FINISH_MARKER: &str = "[FINISH]";
pub const DEFAULT_THINK_OPEN: &str = "<think>";
pub const DEFAULT_THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    #[serde(default)]
    pub slot_values: BTreeMap<String, String>,
    /// Structured form for the built-in toy task, when the sample is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySample>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed dataset {path}: {source}")]
    Format {
        path: String,
        source: serde_json::Error,
    },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("sample id {0:?} is empty or not usable as a file name")]
    BadId(String),
}

pub fn validate_samples(samples: &[TaskSample]) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for s in samples {
        let bad = s.id.is_empty()
            || s.id.starts_with('.')
            || s.id.chars().any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)));
        if bad {
            return Err(DatasetError::BadId(s.id.clone()));
        }
        if !seen.insert(s.id.as_str()) {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
    }
    Ok(())
}

/// Loads a JSON array of samples (`id`, `slot_values`, optional `toy`).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskSample>, DatasetError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let samples: Vec<TaskSample> =
        serde_json::from_str(&text).map_err(|source| DatasetError::Format { path: shown, source })?;
    validate_samples(&samples)?;
    Ok(samples)
}

fn slot_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"))
}

/// Slot names referenced by the prompt's task-slot segments.
pub fn task_slots(prompt: &PromptDocument) -> BTreeSet<String> {
    prompt
        .segments_of(SegmentKind::TaskSlot)
        .flat_map(|s| slot_pattern().captures_iter(s.text()).map(|c| c[1].to_string()))
        .collect()
}

/// Renders the prompt with `{slot}` placeholders replaced by the sample's
/// values. Every task-slot placeholder must have a value; placeholders
/// elsewhere are replaced only when the sample provides them.
pub fn fill_slots(prompt: &PromptDocument, sample: &TaskSample) -> Result<String, EpisodeError> {
    if let Some(missing) = task_slots(prompt)
        .into_iter()
        .find(|s| !sample.slot_values.contains_key(s))
    {
        return Err(EpisodeError::SlotMissing {
            sample_id: sample.id.clone(),
            slot: missing,
        });
    }
    let rendered = prompt.render();
    Ok(slot_pattern()
        .replace_all(&rendered, |c: &regex::Captures<'_>| {
            sample
                .slot_values
                .get(&c[1])
                .cloned()
                .unwrap_or_else(|| c[0].to_string())
        })
        .into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptRole {
    System,
    User,
    Assistant,
    Feedback,
}

impl TranscriptRole {
    /// Feedback goes over the wire as a user message.
    pub fn wire_role(self) -> Role {
        match self {
            TranscriptRole::System => Role::System,
            TranscriptRole::User | TranscriptRole::Feedback => Role::User,
            TranscriptRole::Assistant => Role::Assistant,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TranscriptRole::System => "system",
            TranscriptRole::User => "user",
            TranscriptRole::Assistant => "assistant",
            TranscriptRole::Feedback => "feedback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptMessage {
    pub role: TranscriptRole,
    pub content: String,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    FinishedByAgent,
    MaxRoundsExhausted,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub sample_id: String,
    pub messages: Vec<TranscriptMessage>,
    pub rounds_used: u32,
    pub terminal: Terminal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Transcript {
    fn new(sample_id: &str) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            messages: Vec::new(),
            rounds_used: 0,
            terminal: Terminal::Error,
            error: None,
        }
    }

    fn failed(sample_id: &str, error: &EpisodeError) -> Self {
        let mut t = Self::new(sample_id);
        t.error = Some(error.to_string());
        t
    }

    pub fn last_assistant(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == TranscriptRole::Assistant)
            .map(|m| m.content.as_str())
    }

    /// Role-labelled plain-text rendering used in summarizer and reflection
    /// requests.
    pub fn render_conversation(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&format!("[{} | round {}]\n{}\n", m.role.as_str(), m.round, m.content));
        }
        out
    }

    fn wire_messages(&self) -> Vec<ChatMessage> {
        self.messages
            .iter()
            .map(|m| ChatMessage {
                role: m.role.wire_role(),
                content: m.content.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feedback {
    pub text: String,
    pub decision: Decision,
}

impl Feedback {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            decision: Decision::Stop,
        }
    }

    pub fn continue_with(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            decision: Decision::Continue,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeedbackError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no reasoning span delimited by {open:?} and {close:?}; is the actor a reasoning model?")]
    NoThinkSpan { open: String, close: String },
    #[error("transcript has no assistant message")]
    NoAssistantMessage,
    #[error("no rule checker data for sample {0}")]
    UnknownSample(String),
}

/// Produces commentary on an episode so far. Must terminate and must not
/// rely on ground-truth answers.
pub trait FeedbackGenerator: Send + Sync {
    fn feedback(&self, transcript: &Transcript) -> Result<Feedback, FeedbackError>;
}

/// Stops after the first answer; used for feedback-free evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFeedback;

impl FeedbackGenerator for NoFeedback {
    fn feedback(&self, _: &Transcript) -> Result<Feedback, FeedbackError> {
        Ok(Feedback::stop(""))
    }
}

/// Self-reflection through the gateway: the model reviews the episode and
/// signals completion with a finish marker.
pub struct ReflexionFeedback<'a> {
    gateway: &'a Gateway,
    params: SamplingParams,
    finish_marker: String,
}

impl<'a> ReflexionFeedback<'a> {
    pub fn new(gateway: &'a Gateway, params: SamplingParams, finish_marker: impl Into<String>) -> Self {
        Self {
            gateway,
            params,
            finish_marker: finish_marker.into(),
        }
    }
}

impl FeedbackGenerator for ReflexionFeedback<'_> {
    fn feedback(&self, transcript: &Transcript) -> Result<Feedback, FeedbackError> {
        if transcript.last_assistant().is_none() {
            return Err(FeedbackError::NoAssistantMessage);
        }
        let request = self.params.request(vec![
            ChatMessage::system(REFLECTION_SYSTEM.replace("{finish_marker}", &self.finish_marker)),
            ChatMessage::user(format!(
                "{REFLECTION_USER_HEADER}\n\n{}",
                transcript.render_conversation()
            )),
        ]);
        let text = self.gateway.complete(&request)?.content;
        Ok(if text.contains(&self.finish_marker) {
            Feedback::stop(text)
        } else {
            Feedback::continue_with(text)
        })
    }
}

/// Uses the reasoning span of a reasoning model's own answer as feedback.
/// Always stops: such models correct themselves inside a single answer.
#[derive(Debug, Clone)]
pub struct ThinkTraceFeedback {
    open: String,
    close: String,
}

impl Default for ThinkTraceFeedback {
    fn default() -> Self {
        Self::new(DEFAULT_THINK_OPEN, DEFAULT_THINK_CLOSE)
    }
}

impl ThinkTraceFeedback {
    pub fn new(open: impl Into<String>, close: impl Into<String>) -> Self {
        Self {
            open: open.into(),
            close: close.into(),
        }
    }

    pub fn extract<'t>(&self, text: &'t str) -> Option<&'t str> {
        let start = text.find(&self.open)? + self.open.len();
        let len = text[start..].find(&self.close)?;
        Some(text[start..start + len].trim())
    }
}

impl FeedbackGenerator for ThinkTraceFeedback {
    fn feedback(&self, transcript: &Transcript) -> Result<Feedback, FeedbackError> {
        let last = transcript
            .last_assistant()
            .ok_or(FeedbackError::NoAssistantMessage)?;
        let span = self.extract(last).ok_or_else(|| FeedbackError::NoThinkSpan {
            open: self.open.clone(),
            close: self.close.clone(),
        })?;
        Ok(Feedback::stop(span))
    }
}

/// Deterministic rule checker for the toy task, in the role of an external
/// error message (like a failing compiler).
#[derive(Debug, Clone, Default)]
pub struct RuleCheckFeedback {
    samples: HashMap<String, ToySample>,
}

impl RuleCheckFeedback {
    pub fn new<'s>(samples: impl IntoIterator<Item = &'s TaskSample>) -> Self {
        Self {
            samples: samples
                .into_iter()
                .filter_map(|s| s.toy.clone().map(|t| (s.id.clone(), t)))
                .collect(),
        }
    }
}

impl FeedbackGenerator for RuleCheckFeedback {
    fn feedback(&self, transcript: &Transcript) -> Result<Feedback, FeedbackError> {
        let sample = self
            .samples
            .get(&transcript.sample_id)
            .ok_or_else(|| FeedbackError::UnknownSample(transcript.sample_id.clone()))?;
        let last = transcript
            .last_assistant()
            .ok_or(FeedbackError::NoAssistantMessage)?;
        match parse_toy_answer(last, sample) {
            Err(e) => Ok(Feedback::continue_with(format!(
                "Your answer could not be read ({}). End your answer with a line \"{PLAN_MARKER}\" followed by one line per day in the form \"Day k: <activity id>\".",
                e.0
            ))),
            Ok(answer) => {
                let check = toy_check(&answer, sample);
                Ok(match check.messages.into_iter().next() {
                    Some(msg) => Feedback::continue_with(msg),
                    None => Feedback::stop("All rules are satisfied."),
                })
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EpisodeError {
    #[error("sample {sample_id} has no value for slot {{{slot}}}")]
    SlotMissing { sample_id: String, slot: String },
    #[error("gateway error in episode {}: {source}", transcript.sample_id)]
    Gateway {
        source: GatewayError,
        transcript: Box<Transcript>,
    },
    #[error("feedback error in episode {}: {source}", transcript.sample_id)]
    Feedback {
        source: FeedbackError,
        transcript: Box<Transcript>,
    },
}

impl EpisodeError {
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(
            self,
            EpisodeError::Gateway {
                source: GatewayError::BudgetExhausted { .. },
                ..
            } | EpisodeError::Feedback {
                source: FeedbackError::Gateway(GatewayError::BudgetExhausted { .. }),
                ..
            }
        )
    }

    /// The partial transcript, when the episode got far enough to have one.
    pub fn transcript(&self) -> Option<&Transcript> {
        match self {
            EpisodeError::SlotMissing { .. } => None,
            EpisodeError::Gateway { transcript, .. } | EpisodeError::Feedback { transcript, .. } => {
                Some(transcript)
            }
        }
    }
}

#[derive(Debug, Error)]
#[error("every episode in the batch failed; first error: {}", .0[0])]
pub struct BatchError(pub Vec<EpisodeError>);

/// One transcript per sample (in sample order) plus the episode errors
/// behind any `Terminal::Error` transcripts.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub transcripts: Vec<Transcript>,
    pub errors: Vec<EpisodeError>,
}

pub struct Actor<'a> {
    gateway: &'a Gateway,
    params: SamplingParams,
}

impl<'a> Actor<'a> {
    pub fn new(gateway: &'a Gateway, params: SamplingParams) -> Self {
        Self { gateway, params }
    }

    pub fn run_episode(
        &self,
        prompt: &PromptDocument,
        sample: &TaskSample,
        fg: &dyn FeedbackGenerator,
        max_rounds: u32,
    ) -> Result<Transcript, EpisodeError> {
        let first = fill_slots(prompt, sample)?;
        self.run_episode_from(first, &sample.id, fg, max_rounds)
    }

    /// Runs an episode whose first user message is already rendered.
    pub fn run_episode_from(
        &self,
        first_message: String,
        sample_id: &str,
        fg: &dyn FeedbackGenerator,
        max_rounds: u32,
    ) -> Result<Transcript, EpisodeError> {
        let max_rounds = max_rounds.max(1);
        let mut t = Transcript::new(sample_id);
        t.messages.push(TranscriptMessage {
            role: TranscriptRole::User,
            content: first_message,
            round: 1,
        });
        for round in 1..=max_rounds {
            let response = match self.gateway.complete(&self.params.request(t.wire_messages())) {
                Ok(r) => r,
                Err(source) => {
                    t.terminal = Terminal::Error;
                    t.error = Some(source.to_string());
                    return Err(EpisodeError::Gateway {
                        source,
                        transcript: Box::new(t),
                    });
                }
            };
            t.messages.push(TranscriptMessage {
                role: TranscriptRole::Assistant,
                content: response.content,
                round,
            });
            t.rounds_used = round;

            let fb = match fg.feedback(&t) {
                Ok(fb) => fb,
                Err(source) => {
                    t.terminal = Terminal::Error;
                    t.error = Some(source.to_string());
                    return Err(EpisodeError::Feedback {
                        source,
                        transcript: Box::new(t),
                    });
                }
            };
            if fb.decision == Decision::Stop {
                t.terminal = Terminal::FinishedByAgent;
                return Ok(t);
            }
            t.messages.push(TranscriptMessage {
                role: TranscriptRole::Feedback,
                content: fb.text,
                round,
            });
        }
        t.terminal = Terminal::MaxRoundsExhausted;
        Ok(t)
    }

    pub fn collect_batch(
        &self,
        prompt: &PromptDocument,
        samples: &[TaskSample],
        fg: &dyn FeedbackGenerator,
        max_rounds: u32,
        parallelism: usize,
    ) -> Result<BatchOutput, BatchError> {
        self.collect_batch_with(prompt, samples, fg, max_rounds, parallelism, &|_, _| {})
    }

    /// Like [`Actor::collect_batch`]; `on_done` sees every finished
    /// transcript (including failed ones, with their error) as soon as its
    /// episode ends.
    pub fn collect_batch_with(
        &self,
        prompt: &PromptDocument,
        samples: &[TaskSample],
        fg: &dyn FeedbackGenerator,
        max_rounds: u32,
        parallelism: usize,
        on_done: &(dyn Fn(&Transcript, Option<&EpisodeError>) + Sync),
    ) -> Result<BatchOutput, BatchError> {
        let run = |s: &TaskSample| {
            let outcome = self.run_episode(prompt, s, fg, max_rounds);
            let transcript = match &outcome {
                Ok(t) => t.clone(),
                Err(e) => e.transcript().cloned().unwrap_or_else(|| Transcript::failed(&s.id, e)),
            };
            on_done(&transcript, outcome.as_ref().err());
            (transcript, outcome.err())
        };
        let results: Vec<(Transcript, Option<EpisodeError>)> = par_map(samples, parallelism, run);

        let mut transcripts = Vec::with_capacity(results.len());
        let mut errors = Vec::new();
        for (t, e) in results {
            transcripts.push(t);
            errors.extend(e);
        }
        if !samples.is_empty() && errors.len() == samples.len() {
            return Err(BatchError(errors));
        }
        Ok(BatchOutput { transcripts, errors })
    }
}

/// Maps `f` over `items` on up to `parallelism` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if parallelism <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("cannot build worker pool ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}
