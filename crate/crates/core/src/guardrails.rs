//! Validation and repair of optimizer output.

use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Gateway, GatewayError, SamplingParams};
use crate::prompt::{PromptDocument, PromptError, SegmentKind, Segmenter};
use crate::templates::{REPAIR_RETRY_NOTE, REPAIR_SYSTEM, REPAIR_USER};

pub const DEFAULT_PLACEHOLDER_PATTERNS: [&str; 4] = [
    r"(?i)<[^<>\n]*original prompt[^<>\n]*>",
    r"<Examples[^<>\n]*>",
    "\u{27e8}[^\u{27e8}\u{27e9}\n]*\u{27e9}",
    r"\{Example[^{}\n]*\}",
];

pub const DEFAULT_REPAIR_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    /// Extra placeholder regexes, added to the defaults.
    pub placeholder_patterns: Vec<String>,
    pub repair_attempts: u32,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            placeholder_patterns: Vec::new(),
            repair_attempts: DEFAULT_REPAIR_ATTEMPTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    PlaceholderFound,
    ExamplesMutated,
    FormatMutated,
    RequiredTokenMissing,
    /// The candidate has no step-by-step block left.
    StepsMissing,
    /// A preamble or task-slot segment changed.
    OtherSegmentMutated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Repaired,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardReport {
    pub verdict: Verdict,
    pub violations: Vec<Violation>,
    pub repaired_prompt: Option<PromptDocument>,
}

impl GuardReport {
    pub fn accepted() -> Self {
        Self {
            verdict: Verdict::Accepted,
            violations: Vec::new(),
            repaired_prompt: None,
        }
    }

    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            verdict: if violations.is_empty() {
                Verdict::Accepted
            } else {
                Verdict::Rejected
            },
            violations,
            repaired_prompt: None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }

    pub fn merge(mut self, other: GuardReport) -> GuardReport {
        self.violations.extend(other.violations);
        GuardReport::from_violations(self.violations)
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    /// One-line summary of the violations, used in retry notes and logs.
    pub fn describe(&self) -> String {
        self.violations
            .iter()
            .map(Violation::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, Clone)]
pub struct PlaceholderDetector {
    patterns: Vec<Regex>,
}

impl Default for PlaceholderDetector {
    fn default() -> Self {
        Self::new(&[]).expect("default patterns compile")
    }
}

impl PlaceholderDetector {
    pub fn new(extra: &[String]) -> Result<Self, PromptError> {
        let patterns = DEFAULT_PLACEHOLDER_PATTERNS
            .iter()
            .map(|p| p.to_string())
            .chain(extra.iter().cloned())
            .map(|p| {
                Regex::new(&p).map_err(|e| PromptError::BadPattern {
                    pattern: p.clone(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }

    /// Byte spans of all placeholder matches, sorted and merged.
    pub fn detect(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans: Vec<Range<usize>> = self
            .patterns
            .iter()
            .flat_map(|re| re.find_iter(text).map(|m| m.range()))
            .collect();
        spans.sort_by_key(|r| (r.start, r.end));
        let mut merged: Vec<Range<usize>> = Vec::new();
        for s in spans {
            match merged.last_mut() {
                Some(last) if s.start < last.end => last.end = last.end.max(s.end),
                _ => merged.push(s),
            }
        }
        merged
    }

    /// Like [`detect`](Self::detect) but ignores text that already occurs
    /// in `original`, so placeholder-like wording of the original prompt
    /// itself is not treated as a holder.
    pub fn detect_new(&self, text: &str, original: &str) -> Vec<Range<usize>> {
        self.detect(text)
            .into_iter()
            .filter(|r| !original.contains(&text[r.clone()]))
            .collect()
    }
}

/// Placeholder spans using the default pattern set.
pub fn detect_placeholders(text: &str) -> Vec<Range<usize>> {
    PlaceholderDetector::default().detect(text)
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("template repair failed after {attempts} attempts")]
    RepairFailed { attempts: u32, last_output: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn repair_ok(detector: &PlaceholderDetector, output: &str, original: &PromptDocument) -> bool {
    let rendered = original.render();
    detector.detect_new(output, &rendered).is_empty()
        && original
            .segments_of(SegmentKind::Examples)
            .all(|s| output.contains(s.text().trim_end()))
}

/// Asks the template-replacer model to fill placeholders in `candidate` with
/// the original text. The output must be free of placeholders and contain
/// every original examples segment verbatim.
pub fn repair_placeholders(
    gateway: &Gateway,
    params: &SamplingParams,
    detector: &PlaceholderDetector,
    candidate: &str,
    original: &PromptDocument,
    attempts: u32,
) -> Result<String, RepairError> {
    let attempts = attempts.max(1);
    let user = REPAIR_USER
        .replace("{original}", &original.render())
        .replace("{candidate}", candidate);
    let mut messages = vec![ChatMessage::system(REPAIR_SYSTEM), ChatMessage::user(user)];
    let mut last_output = String::new();
    for attempt in 1..=attempts {
        last_output = gateway.complete(&params.request(messages.clone()))?.content;
        if repair_ok(detector, &last_output, original) {
            return Ok(last_output);
        }
        if attempt < attempts {
            log::warn!("template repair attempt {attempt} left placeholders or lost examples");
            messages.push(ChatMessage::assistant(last_output.clone()));
            messages.push(ChatMessage::user(REPAIR_RETRY_NOTE));
        }
    }
    Err(RepairError::RepairFailed {
        attempts,
        last_output,
    })
}

/// Character range `[start, end)` of `old` that differs from `new` after
/// removing their common prefix and suffix.
fn differing_range(old: &str, new: &str) -> Range<usize> {
    let a: Vec<char> = old.chars().collect();
    let b: Vec<char> = new.chars().collect();
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    prefix..a.len() - suffix
}

fn snippet(s: &str, range: Range<usize>) -> String {
    let text: String = s.chars().skip(range.start).take(range.len().min(40)).collect();
    format!("{text:?}")
}

fn compare_kinds(
    old: &PromptDocument,
    new: &PromptDocument,
    kinds: &[SegmentKind],
    kind_of: impl Fn(SegmentKind) -> ViolationKind,
) -> Vec<Violation> {
    let pick = |d: &PromptDocument| -> Vec<(SegmentKind, String)> {
        d.segments()
            .iter()
            .filter(|s| kinds.contains(&s.kind()))
            .map(|s| (s.kind(), s.text().trim_end().to_string()))
            .collect()
    };
    let (a, b) = (pick(old), pick(new));
    let mut out = Vec::new();
    for (i, (kind, text)) in a.iter().enumerate() {
        match b.get(i) {
            None => out.push(Violation {
                kind: kind_of(*kind),
                detail: format!("{} segment {} is missing", kind.as_str(), i + 1),
            }),
            Some((k2, t2)) if k2 != kind => out.push(Violation {
                kind: kind_of(*kind),
                detail: format!("{} segment {} was replaced by segment kind {}", kind.as_str(), i + 1, k2.as_str()),
            }),
            Some((_, t2)) if t2 != text => {
                let r = differing_range(text, t2);
                let r_new = differing_range(t2, text);
                out.push(Violation {
                    kind: kind_of(*kind),
                    detail: format!(
                        "{} segment {} differs at characters {}..{}: {} became {}",
                        kind.as_str(),
                        i + 1,
                        r.start,
                        r.end,
                        snippet(text, r.clone()),
                        snippet(t2, r_new)
                    ),
                });
            }
            Some(_) => {}
        }
    }
    for (i, (kind, _)) in b.iter().enumerate().skip(a.len()) {
        out.push(Violation {
            kind: kind_of(*kind),
            detail: format!("unexpected extra {} segment {}", kind.as_str(), i + 1),
        });
    }
    out
}

/// Checks that every examples and format segment of `old` reappears, in
/// order and unchanged, in `new`. Trailing whitespace at a segment end is
/// layout and is not compared.
pub fn verify_protected(old: &PromptDocument, new: &PromptDocument) -> GuardReport {
    GuardReport::from_violations(compare_kinds(
        old,
        new,
        &[SegmentKind::Examples, SegmentKind::FormatRequirements],
        |k| match k {
            SegmentKind::Examples => ViolationKind::ExamplesMutated,
            _ => ViolationKind::FormatMutated,
        },
    ))
}

/// Checks the unprotected non-step segments (preamble, task slot), which an
/// optimizer update must also leave alone.
pub fn verify_unchanged_context(old: &PromptDocument, new: &PromptDocument) -> GuardReport {
    GuardReport::from_violations(compare_kinds(
        old,
        new,
        &[SegmentKind::Preamble, SegmentKind::TaskSlot],
        |_| ViolationKind::OtherSegmentMutated,
    ))
}

/// Case-sensitive presence check for each token in the rendered prompt.
pub fn verify_required_tokens(new: &PromptDocument, tokens: &[String]) -> GuardReport {
    let rendered = new.render();
    GuardReport::from_violations(
        tokens
            .iter()
            .filter(|t| !rendered.contains(t.as_str()))
            .map(|t| Violation {
                kind: ViolationKind::RequiredTokenMissing,
                detail: t.clone(),
            })
            .collect(),
    )
}

/// The full check applied to an optimizer candidate.
pub struct Guardrails {
    pub segmenter: Segmenter,
    pub detector: PlaceholderDetector,
    pub required_tokens: Vec<String>,
    pub repair_attempts: u32,
}

impl Guardrails {
    pub fn new(segmenter: Segmenter, config: &GuardConfig, required_tokens: Vec<String>) -> Result<Self, PromptError> {
        Ok(Self {
            segmenter,
            detector: PlaceholderDetector::new(&config.placeholder_patterns)?,
            required_tokens,
            repair_attempts: config.repair_attempts,
        })
    }

    /// Structural checks on an already placeholder-free candidate. On
    /// success returns `old` with only its step text replaced, so every other
    /// segment stays byte-identical.
    pub fn check(&self, old: &PromptDocument, candidate: &str) -> Result<PromptDocument, GuardReport> {
        let holders = self.detector.detect_new(candidate, &old.render());
        if !holders.is_empty() {
            return Err(GuardReport::from_violations(
                holders
                    .into_iter()
                    .map(|r| Violation {
                        kind: ViolationKind::PlaceholderFound,
                        detail: format!("{:?} at bytes {}..{}", &candidate[r.clone()], r.start, r.end),
                    })
                    .collect(),
            ));
        }
        let new = match self.segmenter.parse(candidate) {
            Ok(doc) => doc,
            Err(e) => {
                return Err(GuardReport::from_violations(vec![Violation {
                    kind: ViolationKind::StepsMissing,
                    detail: format!("candidate cannot be segmented: {e}"),
                }]))
            }
        };
        let mut report = verify_protected(old, &new)
            .merge(verify_unchanged_context(old, &new))
            .merge(verify_required_tokens(&new, &self.required_tokens));
        let new_steps = new.step_segment().map(|s| s.text().to_string());
        if new_steps.is_none() {
            report = report.merge(GuardReport::from_violations(vec![Violation {
                kind: ViolationKind::StepsMissing,
                detail: "candidate has no step-by-step instructions".into(),
            }]));
        }
        if !report.is_accepted() {
            return Err(report);
        }
        let old_steps = old.step_segment().map(|s| s.text()).unwrap_or("");
        let trailing = &old_steps[old_steps.trim_end().len()..];
        let step_text = format!("{}{trailing}", new_steps.unwrap_or_default().trim_end());
        old.replace_step_text(&step_text).ok_or_else(|| {
            GuardReport::from_violations(vec![Violation {
                kind: ViolationKind::StepsMissing,
                detail: "original prompt has no step-by-step instructions".into(),
            }])
        })
    }

    /// Repairs placeholders through the gateway when needed, then runs
    /// [`check`](Self::check). The returned report is `Accepted` or
    /// `Repaired`; a rejection carries the violations.
    pub fn review(
        &self,
        old: &PromptDocument,
        candidate: &str,
        gateway: &Gateway,
        params: &SamplingParams,
    ) -> Result<(PromptDocument, GuardReport), ReviewError> {
        let has_holders = !self.detector.detect_new(candidate, &old.render()).is_empty();
        if !has_holders {
            let doc = self.check(old, candidate).map_err(ReviewError::Rejected)?;
            return Ok((doc, GuardReport::accepted()));
        }
        let repaired = match repair_placeholders(gateway, params, &self.detector, candidate, old, self.repair_attempts) {
            Ok(text) => text,
            Err(RepairError::Gateway(e)) => return Err(ReviewError::Gateway(e)),
            Err(RepairError::RepairFailed { attempts, .. }) => {
                return Err(ReviewError::Rejected(GuardReport::from_violations(vec![Violation {
                    kind: ViolationKind::PlaceholderFound,
                    detail: format!("placeholders remain after {attempts} repair attempts"),
                }])))
            }
        };
        let doc = self.check(old, &repaired).map_err(ReviewError::Rejected)?;
        Ok((
            doc.clone(),
            GuardReport {
                verdict: Verdict::Repaired,
                violations: Vec::new(),
                repaired_prompt: Some(doc),
            },
        ))
    }
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("candidate rejected: {}", .0.describe())]
    Rejected(GuardReport),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}
