//! Condenses a batch of transcripts into one focus point.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{Terminal, Transcript};
use crate::gateway::{ChatMessage, Gateway, GatewayError, SamplingParams};
use crate::prompt::PromptDocument;
use crate::templates::{
    CHAT_HISTORY_SLOT, CONCLUSION_MARKER, SUMMARIZER_PROMPT_HEADER, SUMMARIZER_RETRY_NOTE,
    SUMMARIZER_SYSTEM, SUMMARIZER_USER,
};

pub const DEFAULT_TRANSCRIPT_BUDGET: usize = 60_000;

/// How far into the conclusion the case keywords are looked for.
const CLASSIFY_WINDOW: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusCase {
    FailureReason,
    HelpfulThought,
    NoGeneralReason,
}

impl FocusCase {
    pub fn as_str(self) -> &'static str {
        match self {
            FocusCase::FailureReason => "failure_reason",
            FocusCase::HelpfulThought => "helpful_thought",
            FocusCase::NoGeneralReason => "no_general_reason",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusPoint {
    pub case: FocusCase,
    pub text: String,
    pub raw_output: String,
    pub epoch: u32,
    pub batch_index: u32,
}

impl FocusPoint {
    pub fn no_general_reason(epoch: u32, batch_index: u32) -> Self {
        Self {
            case: FocusCase::NoGeneralReason,
            text: String::new(),
            raw_output: String::new(),
            epoch,
            batch_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conclusion {
    pub case: FocusCase,
    pub text: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("output has no {marker:?} line")]
pub struct MarkerAbsent {
    pub marker: &'static str,
}

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("cannot summarize an empty batch")]
    EmptyBatch,
    #[error("summarizer output has no conclusion line after a retry")]
    MissingConclusionMarker { raw: String },
    #[error("summarizer conclusion is empty after a retry")]
    EmptyConclusion { raw: String },
    #[error("summarizer conclusion still mentions concrete details after a retry: {text}")]
    ScenarioDetails { text: String, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Returns the single line after the last conclusion marker and its case.
pub fn parse_conclusion(raw: &str) -> Result<Conclusion, MarkerAbsent> {
    let pos = raw.rfind(CONCLUSION_MARKER).ok_or(MarkerAbsent {
        marker: CONCLUSION_MARKER,
    })?;
    let rest = &raw[pos + CONCLUSION_MARKER.len()..];
    let line = rest.lines().next().unwrap_or("").trim();
    let case = classify_conclusion(line);
    let text = if case == FocusCase::NoGeneralReason {
        String::new()
    } else {
        line.to_string()
    };
    Ok(Conclusion { case, text })
}

pub fn classify_conclusion(text: &str) -> FocusCase {
    let head: String = text.to_lowercase().chars().take(CLASSIFY_WINDOW).collect();
    if head.contains("no general reason") {
        return FocusCase::NoGeneralReason;
    }
    const THOUGHT: [&str; 3] = ["thought", "helpful", "focus on"];
    const NEGATIVE: [&str; 8] = ["fail", "error", "mistake", "ignor", "not ", "n't", "miss", "wrong"];
    if THOUGHT.iter().any(|k| head.contains(k)) && !NEGATIVE.iter().any(|k| head.contains(k)) {
        FocusCase::HelpfulThought
    } else {
        FocusCase::FailureReason
    }
}

fn detail_patterns() -> &'static [Regex] {
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        [
            r"[$€£¥]\s?\d",
            r"(?i)\d[\d,.]*\s?(dollars?|usd|eur|euros?|gbp)\b",
            r"\b\d{4}-\d{1,2}-\d{1,2}\b",
            r"\b\d{1,2}/\d{1,2}(/\d{2,4})?\b",
            r"(?i)\b(jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]*\.?\s+\d{1,2}\b",
            r"(?i)\b\d{1,2}\s+(jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]*\b",
            r"\b\d{1,2}:\d{2}\b",
            r"(?i)\b\d{1,2}\s?(am|pm)\b",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("static regex"))
        .collect()
    })
}

/// True when the text carries scenario-specific prices, dates or times.
pub fn has_scenario_details(text: &str) -> bool {
    detail_patterns().iter().any(|re| re.is_match(text))
}

fn transcript_header(index: usize, t: &Transcript) -> String {
    let terminal = match t.terminal {
        Terminal::FinishedByAgent => "finished",
        Terminal::MaxRoundsExhausted => "round limit reached",
        Terminal::Error => "error",
    };
    format!(
        "### Transcript {} (sample {}, {} rounds, {terminal})\n",
        index + 1,
        t.sample_id,
        t.rounds_used
    )
}

fn take_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn last_chars(s: &str, n: usize) -> &str {
    let len = s.chars().count();
    if n >= len {
        return s;
    }
    match s.char_indices().nth(len - n) {
        Some((i, _)) => &s[i..],
        None => "",
    }
}

fn sentinel(omitted: usize) -> String {
    format!("\n[... {omitted} characters omitted ...]\n")
}

/// Keeps the head and tail halves of `text` around a sentinel so that the
/// result has at most `limit` characters.
fn truncate_middle(text: &str, limit: usize) -> String {
    let len = text.chars().count();
    if len <= limit {
        return text.to_string();
    }
    let reserve = sentinel(len).chars().count();
    if limit <= reserve + 1 {
        return take_chars(text, limit).to_string();
    }
    let keep = limit - reserve;
    let head = keep.div_ceil(2);
    let tail = keep - head;
    format!(
        "{}{}{}",
        take_chars(text, head),
        sentinel(len - keep),
        last_chars(text, tail)
    )
}

/// Serializes transcripts under sample-id headers in input order. When the
/// result would exceed `budget` characters, transcript bodies are shortened
/// from the middle, sharing the budget as evenly as their lengths allow.
pub fn serialize_transcripts(transcripts: &[Transcript], budget: usize) -> String {
    let blocks: Vec<(String, String)> = transcripts
        .iter()
        .enumerate()
        .map(|(i, t)| (transcript_header(i, t), t.render_conversation()))
        .collect();
    let join = |bodies: &[String]| {
        blocks
            .iter()
            .zip(bodies)
            .map(|((h, _), b)| format!("{h}{b}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let bodies: Vec<String> = blocks.iter().map(|(_, b)| b.clone()).collect();
    let full = join(&bodies);
    if full.chars().count() <= budget {
        return full;
    }

    let fixed: usize =
        blocks.iter().map(|(h, _)| h.chars().count()).sum::<usize>() + blocks.len().saturating_sub(1);
    if fixed >= budget {
        return take_chars(&full, budget).to_string();
    }
    let mut remaining = budget - fixed;
    let lengths: Vec<usize> = bodies.iter().map(|b| b.chars().count()).collect();
    let mut order: Vec<usize> = (0..bodies.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut limits = vec![0; bodies.len()];
    for (done, &i) in order.iter().enumerate() {
        let share = remaining / (order.len() - done);
        limits[i] = lengths[i].min(share);
        remaining -= limits[i];
    }
    let shortened: Vec<String> = bodies
        .iter()
        .zip(&limits)
        .map(|(b, &l)| truncate_middle(b, l))
        .collect();
    join(&shortened)
}

pub struct Summarizer<'a> {
    gateway: &'a Gateway,
    params: SamplingParams,
    budget: usize,
}

impl<'a> Summarizer<'a> {
    pub fn new(gateway: &'a Gateway, params: SamplingParams) -> Self {
        Self {
            gateway,
            params,
            budget: DEFAULT_TRANSCRIPT_BUDGET,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget.max(1);
        self
    }

    pub fn user_message(&self, transcripts: &[Transcript], prompt: &PromptDocument) -> String {
        let history = serialize_transcripts(transcripts, self.budget);
        format!(
            "{SUMMARIZER_PROMPT_HEADER}\n\n{}\n\n{}",
            prompt.render(),
            SUMMARIZER_USER.replace(CHAT_HISTORY_SLOT, &history)
        )
    }

    pub fn summarize_batch(
        &self,
        transcripts: &[Transcript],
        prompt: &PromptDocument,
        epoch: u32,
        batch_index: u32,
    ) -> Result<FocusPoint, SummarizerError> {
        if transcripts.is_empty() {
            return Err(SummarizerError::EmptyBatch);
        }
        let mut messages = vec![
            ChatMessage::system(SUMMARIZER_SYSTEM),
            ChatMessage::user(self.user_message(transcripts, prompt)),
        ];
        let mut attempt = 0;
        loop {
            attempt += 1;
            let raw = self.gateway.complete(&self.params.request(messages.clone()))?.content;
            let failure = match parse_conclusion(&raw) {
                Err(_) => SummarizerError::MissingConclusionMarker { raw: raw.clone() },
                Ok(c) if c.case != FocusCase::NoGeneralReason && c.text.is_empty() => {
                    SummarizerError::EmptyConclusion { raw: raw.clone() }
                }
                Ok(c) if has_scenario_details(&c.text) => SummarizerError::ScenarioDetails {
                    text: c.text,
                    raw: raw.clone(),
                },
                Ok(c) => {
                    return Ok(FocusPoint {
                        case: c.case,
                        text: c.text,
                        raw_output: raw,
                        epoch,
                        batch_index,
                    })
                }
            };
            if attempt == 2 {
                return Err(failure);
            }
            log::warn!("summarizer output rejected ({failure}); retrying once");
            messages.push(ChatMessage::assistant(raw));
            messages.push(ChatMessage::user(SUMMARIZER_RETRY_NOTE));
        }
    }
}
