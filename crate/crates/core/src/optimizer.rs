//! Turns a prompt and a focus point into an updated prompt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Gateway, GatewayError, SamplingParams};
use crate::guardrails::{GuardReport, Guardrails, ReviewError, Verdict};
use crate::prompt::{classify_step_edit, PromptDocument, StepEdit};
use crate::summarizer::{FocusCase, FocusPoint, MarkerAbsent};
use crate::templates::{FINAL_PROMPT_MARKER, OPTIMIZER_RETRY_NOTE, OPTIMIZER_SYSTEM, OPTIMIZER_USER};

pub const DEFAULT_OPTIMIZER_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptUpdate {
    pub focus: FocusPoint,
    /// Every optimizer output of this update, in order.
    pub raw_outputs: Vec<String>,
    pub new_prompt: PromptDocument,
    pub changed: bool,
    pub placement: Option<StepEdit>,
    pub verdict: Verdict,
}

impl PromptUpdate {
    pub fn identity(prompt: &PromptDocument, focus: FocusPoint) -> Self {
        Self {
            focus,
            raw_outputs: Vec::new(),
            new_prompt: prompt.clone(),
            changed: false,
            placement: None,
            verdict: Verdict::Accepted,
        }
    }

    pub fn raw_output(&self) -> &str {
        self.raw_outputs.last().map(String::as_str).unwrap_or("")
    }

    pub fn multi_edit(&self) -> bool {
        self.placement == Some(StepEdit::ReplaceBlock)
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("prompt has no step-by-step instructions to optimize")]
    NoStepInstructions,
    #[error("optimizer output has no final-prompt marker after {attempts} attempts")]
    MissingFinalMarker { attempts: u32, raw_outputs: Vec<String> },
    #[error("optimizer output rejected after {attempts} attempts: {}", report.describe())]
    GuardrailRejection {
        attempts: u32,
        report: GuardReport,
        raw_outputs: Vec<String>,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Everything after the last final-prompt marker, minus one leading newline.
pub fn parse_final_prompt(raw: &str) -> Result<String, MarkerAbsent> {
    let pos = raw.rfind(FINAL_PROMPT_MARKER).ok_or(MarkerAbsent {
        marker: FINAL_PROMPT_MARKER,
    })?;
    let rest = &raw[pos + FINAL_PROMPT_MARKER.len()..];
    let rest = rest
        .strip_prefix("\r\n")
        .or_else(|| rest.strip_prefix('\n'))
        .unwrap_or(rest);
    Ok(rest.to_string())
}

/// Step-level placement of the change between two prompts; `None` when
/// their step lists are equal.
pub fn classify_placement(old: &PromptDocument, new: &PromptDocument) -> Option<StepEdit> {
    match (old.steps(), new.steps()) {
        (Some(a), Some(b)) => classify_step_edit(&a, &b),
        (None, None) => None,
        _ => Some(StepEdit::ReplaceBlock),
    }
}

enum Failure {
    Marker,
    Rejected(GuardReport),
}

pub struct Optimizer<'a> {
    gateway: &'a Gateway,
    params: SamplingParams,
    repair_params: SamplingParams,
    guards: &'a Guardrails,
    retries: u32,
}

impl<'a> Optimizer<'a> {
    pub fn new(gateway: &'a Gateway, params: SamplingParams, guards: &'a Guardrails) -> Self {
        Self {
            gateway,
            repair_params: params.clone(),
            params,
            guards,
            retries: DEFAULT_OPTIMIZER_RETRIES,
        }
    }

    /// Sampling parameters for template-repair calls.
    pub fn with_repair_params(mut self, params: SamplingParams) -> Self {
        self.repair_params = params;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn optimize(&self, prompt: &PromptDocument, focus: &FocusPoint) -> Result<PromptUpdate, OptimizerError> {
        if !prompt.has_step_instructions() {
            return Err(OptimizerError::NoStepInstructions);
        }
        if focus.case == FocusCase::NoGeneralReason {
            return Ok(PromptUpdate::identity(prompt, focus.clone()));
        }

        let user = OPTIMIZER_USER
            .replace("{prompt}", &prompt.render())
            .replace("{focus}", &focus.text);
        let mut messages = vec![ChatMessage::system(OPTIMIZER_SYSTEM), ChatMessage::user(user)];
        let mut raw_outputs = Vec::new();
        let attempts = self.retries + 1;
        let mut failure = Failure::Marker;

        for attempt in 1..=attempts {
            let raw = self.gateway.complete(&self.params.request(messages.clone()))?.content;
            raw_outputs.push(raw.clone());

            let problems = match parse_final_prompt(&raw) {
                Err(_) => {
                    failure = Failure::Marker;
                    format!("it does not contain the line \"{}\"", FINAL_PROMPT_MARKER.trim_end())
                }
                Ok(candidate) => match self.guards.review(prompt, &candidate, self.gateway, &self.repair_params) {
                    Ok((doc, report)) => {
                        return Ok(self.finish(prompt, doc, report.verdict, focus, raw_outputs));
                    }
                    Err(ReviewError::Gateway(e)) => return Err(e.into()),
                    Err(ReviewError::Rejected(report)) => {
                        let text = report.describe();
                        failure = Failure::Rejected(report);
                        text
                    }
                },
            };
            if attempt < attempts {
                log::warn!("optimizer attempt {attempt} unusable: {problems}");
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(OPTIMIZER_RETRY_NOTE.replace("{problems}", &problems)));
            }
        }
        Err(match failure {
            Failure::Marker => OptimizerError::MissingFinalMarker { attempts, raw_outputs },
            Failure::Rejected(report) => OptimizerError::GuardrailRejection {
                attempts,
                report,
                raw_outputs,
            },
        })
    }

    fn finish(
        &self,
        old: &PromptDocument,
        candidate: PromptDocument,
        verdict: Verdict,
        focus: &FocusPoint,
        raw_outputs: Vec<String>,
    ) -> PromptUpdate {
        match classify_placement(old, &candidate) {
            None => PromptUpdate {
                raw_outputs,
                verdict,
                ..PromptUpdate::identity(old, focus.clone())
            },
            Some(edit) => PromptUpdate {
                focus: focus.clone(),
                raw_outputs,
                new_prompt: candidate.with_parent(old),
                changed: true,
                placement: Some(edit),
                verdict,
            },
        }
    }
}
