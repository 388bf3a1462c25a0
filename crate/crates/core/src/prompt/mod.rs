//! Structured prompt documents.
//!
//! A prompt is held as an ordered list of segments whose texts concatenate
//! back to the original bytes. Exactly one segment (the step instructions) is
//! meant to be edited by the optimizer; examples and format requirements are
//! protected and must survive every edit byte-for-byte.

mod diff;
mod parse;
mod steps;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diff::{diff_prompts, SegmentDiff, SegmentStatus, StepEdit, StructuredDiff};
pub use parse::{parse_prompt, SegmentationConfig, Segmenter};
pub use steps::{classify_step_edit, Step, StepList};

use crate::templates::DEFAULT_STEP_INSTRUCTIONS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("segmentation markers overlap on line {line}: {first} and {second}")]
    OverlappingMarkers {
        line: usize,
        first: String,
        second: String,
    },
    #[error("invalid marker pattern {pattern:?}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error("prompt already contains step instructions")]
    AlreadyStructured,
    #[error("prompt has {0} step-instruction segments, at most one is allowed")]
    MultipleStepSegments(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Preamble,
    StepInstructions,
    Examples,
    FormatRequirements,
    TaskSlot,
}

impl SegmentKind {
    /// Examples and format requirements are byte-protected; nothing else is.
    pub fn is_protected(self) -> bool {
        matches!(self, SegmentKind::Examples | SegmentKind::FormatRequirements)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::Preamble => "preamble",
            SegmentKind::StepInstructions => "step_instructions",
            SegmentKind::Examples => "examples",
            SegmentKind::FormatRequirements => "format_requirements",
            SegmentKind::TaskSlot => "task_slot",
        }
    }
}

impl std::fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegment {
    kind: SegmentKind,
    text: String,
    protected: bool,
}

impl PromptSegment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
            protected: kind.is_protected(),
        }
    }

    pub fn kind(&self) -> SegmentKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn protected(&self) -> bool {
        self.protected
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    segments: Vec<PromptSegment>,
    version: u32,
    parent_version: Option<u32>,
}

impl PromptDocument {
    /// Builds a version-0 document.
    pub fn new(segments: Vec<PromptSegment>) -> Result<Self, PromptError> {
        let steps = segments
            .iter()
            .filter(|s| s.kind == SegmentKind::StepInstructions)
            .count();
        if steps > 1 {
            return Err(PromptError::MultipleStepSegments(steps));
        }
        Ok(Self {
            segments,
            version: 0,
            parent_version: None,
        })
    }

    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
            version: 0,
            parent_version: None,
        }
    }

    pub fn segments(&self) -> &[PromptSegment] {
        &self.segments
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn parent_version(&self) -> Option<u32> {
        self.parent_version
    }

    /// Re-labels this document as the successor of `parent`.
    pub fn with_parent(mut self, parent: &PromptDocument) -> Self {
        self.version = parent.version + 1;
        self.parent_version = Some(parent.version);
        self
    }

    /// Re-labels this document with an explicit version number, keeping the
    /// lineage invariant (`parent = version - 1`).
    pub fn with_version(mut self, version: u32) -> Self {
        self.version = version;
        self.parent_version = version.checked_sub(1);
        self
    }

    pub fn render(&self) -> String {
        render_prompt(self)
    }

    pub fn has_step_instructions(&self) -> bool {
        has_step_instructions(self)
    }

    pub fn step_segment(&self) -> Option<&PromptSegment> {
        self.segments
            .iter()
            .find(|s| s.kind == SegmentKind::StepInstructions)
    }

    pub fn steps(&self) -> Option<StepList> {
        self.step_segment().map(|s| StepList::parse(s.text()))
    }

    pub fn segments_of(&self, kind: SegmentKind) -> impl Iterator<Item = &PromptSegment> {
        self.segments.iter().filter(move |s| s.kind == kind)
    }

    /// Returns a copy with the step-instruction segment text replaced.
    /// `None` when the document has no such segment.
    pub fn replace_step_text(&self, text: &str) -> Option<PromptDocument> {
        let idx = self
            .segments
            .iter()
            .position(|s| s.kind == SegmentKind::StepInstructions)?;
        let mut out = self.clone();
        out.segments[idx] = PromptSegment::new(SegmentKind::StepInstructions, text);
        Some(out)
    }
}

pub fn render_prompt(doc: &PromptDocument) -> String {
    doc.segments.iter().map(|s| s.text.as_str()).collect()
}

pub fn has_step_instructions(doc: &PromptDocument) -> bool {
    doc.step_segment().is_some()
}

/// Adds the engine's two default steps (analysis, then solution) to a prompt
/// that has none.
///
/// The new segment goes immediately before the first examples segment. With
/// no examples it goes before the task slot, and with neither at the end.
/// Every existing segment is kept byte-identical; when the preceding text
/// does not end in a newline the inserted segment starts with a paragraph
/// break so the block still begins on its own line.
pub fn inject_default_steps(doc: &PromptDocument) -> Result<PromptDocument, PromptError> {
    if has_step_instructions(doc) {
        return Err(PromptError::AlreadyStructured);
    }
    let insert_at = doc
        .segments
        .iter()
        .position(|s| s.kind == SegmentKind::Examples)
        .or_else(|| {
            doc.segments
                .iter()
                .position(|s| s.kind == SegmentKind::TaskSlot)
        })
        .unwrap_or(doc.segments.len());

    let preceding: String = doc.segments[..insert_at]
        .iter()
        .map(|s| s.text.as_str())
        .collect();
    let mut text = String::new();
    if !preceding.is_empty() && !preceding.ends_with('\n') {
        text.push_str("\n\n");
    }
    text.push_str(DEFAULT_STEP_INSTRUCTIONS);

    let mut out = doc.clone();
    out.segments
        .insert(insert_at, PromptSegment::new(SegmentKind::StepInstructions, text));
    Ok(out)
}
