use serde::{Deserialize, Serialize};

use super::steps::{classify_step_edit, StepList};
use super::{PromptDocument, SegmentKind};

/// A single step-level change inside the step-instruction segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEdit {
    /// A new step was placed before the (1-based) step `k` of the old list.
    InsertBefore(usize),
    /// Step `k` was rewritten.
    ReplaceStep(usize),
    AppendStep,
    /// The change is not a single insert/replace/append; the whole block was
    /// rewritten.
    ReplaceBlock,
}

impl std::fmt::Display for StepEdit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepEdit::InsertBefore(k) => write!(f, "InsertBefore({k})"),
            StepEdit::ReplaceStep(k) => write!(f, "ReplaceStep({k})"),
            StepEdit::AppendStep => f.write_str("AppendStep"),
            StepEdit::ReplaceBlock => f.write_str("ReplaceBlock"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    Identical,
    Modified,
    Added,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentDiff {
    pub kind: SegmentKind,
    pub status: SegmentStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_edits: Vec<StepEdit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuredDiff {
    pub entries: Vec<SegmentDiff>,
}

impl StructuredDiff {
    pub fn is_identical(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.status == SegmentStatus::Identical)
    }

    /// Kinds of every entry that is not `Identical`.
    pub fn changed_kinds(&self) -> Vec<SegmentKind> {
        self.entries
            .iter()
            .filter(|e| e.status != SegmentStatus::Identical)
            .map(|e| e.kind)
            .collect()
    }

    pub fn step_edits(&self) -> Vec<StepEdit> {
        self.entries
            .iter()
            .flat_map(|e| e.step_edits.iter().copied())
            .collect()
    }
}

impl std::fmt::Display for StructuredDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            let status = match e.status {
                SegmentStatus::Identical => "identical",
                SegmentStatus::Modified => "modified",
                SegmentStatus::Added => "added",
                SegmentStatus::Removed => "removed",
            };
            write!(f, "{:<20} {status}", e.kind.as_str())?;
            for edit in &e.step_edits {
                write!(f, " {edit}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Segment-aware diff.
///
/// Segments are aligned by a longest common subsequence over their kinds;
/// aligned pairs are `Identical` or `Modified`, the rest `Removed` (only in
/// `a`) or `Added` (only in `b`). Two documents that render to the same text
/// always diff as all-identical, whatever their segmentation.
pub fn diff_prompts(a: &PromptDocument, b: &PromptDocument) -> StructuredDiff {
    if a.render() == b.render() {
        return StructuredDiff {
            entries: b
                .segments()
                .iter()
                .map(|s| SegmentDiff {
                    kind: s.kind(),
                    status: SegmentStatus::Identical,
                    step_edits: Vec::new(),
                })
                .collect(),
        };
    }

    let sa = a.segments();
    let sb = b.segments();
    let (n, m) = (sa.len(), sb.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if sa[i].kind() == sb[j].kind() {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }

    let mut entries = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && sa[i].kind() == sb[j].kind() {
            let same = sa[i].text() == sb[j].text();
            let mut step_edits = Vec::new();
            if !same && sa[i].kind() == SegmentKind::StepInstructions {
                let old = StepList::parse(sa[i].text());
                let new = StepList::parse(sb[j].text());
                // whitespace-only changes still count as a block rewrite
                step_edits.push(classify_step_edit(&old, &new).unwrap_or(StepEdit::ReplaceBlock));
            }
            entries.push(SegmentDiff {
                kind: sa[i].kind(),
                status: if same {
                    SegmentStatus::Identical
                } else {
                    SegmentStatus::Modified
                },
                step_edits,
            });
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            entries.push(SegmentDiff {
                kind: sb[j].kind(),
                status: SegmentStatus::Added,
                step_edits: Vec::new(),
            });
            j += 1;
        } else {
            entries.push(SegmentDiff {
                kind: sa[i].kind(),
                status: SegmentStatus::Removed,
                step_edits: Vec::new(),
            });
            i += 1;
        }
    }
    StructuredDiff { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{parse_prompt, PromptSegment, SegmentationConfig};

    const DOC: &str = "Role.\n\nSolve it step by step:\n1. analyze\n2. solve\n\nHere are two examples:\nex\nHere is the task.\n{q}\n";

    fn parse(s: &str) -> PromptDocument {
        parse_prompt(s, &SegmentationConfig::default()).unwrap()
    }

    #[test]
    fn self_diff_is_identical() {
        let d = parse(DOC);
        let diff = diff_prompts(&d, &d);
        assert!(diff.is_identical());
        assert_eq!(diff.entries.len(), d.segments().len());
    }

    #[test]
    fn single_step_change_is_replace() {
        let a = parse(DOC);
        let b = parse(&DOC.replace("2. solve", "2. solve and check the result"));
        let diff = diff_prompts(&a, &b);
        assert_eq!(diff.changed_kinds(), [SegmentKind::StepInstructions]);
        assert_eq!(diff.step_edits(), [StepEdit::ReplaceStep(2)]);
    }

    #[test]
    fn added_and_removed_segments() {
        let a = PromptDocument::new(vec![PromptSegment::new(SegmentKind::Preamble, "p\n")]).unwrap();
        let b = PromptDocument::new(vec![
            PromptSegment::new(SegmentKind::Preamble, "p\n"),
            PromptSegment::new(SegmentKind::StepInstructions, "1. x\n"),
        ])
        .unwrap();
        let d = diff_prompts(&a, &b);
        assert_eq!(d.entries[1].status, SegmentStatus::Added);
        let d = diff_prompts(&b, &a);
        assert_eq!(d.entries[1].status, SegmentStatus::Removed);
    }

    #[test]
    fn same_render_different_split_is_identical() {
        let a = PromptDocument::new(vec![PromptSegment::new(SegmentKind::Preamble, "ab")]).unwrap();
        let b = PromptDocument::new(vec![
            PromptSegment::new(SegmentKind::Preamble, "a"),
            PromptSegment::new(SegmentKind::Preamble, "b"),
        ])
        .unwrap();
        assert!(diff_prompts(&a, &b).is_identical());
    }
}
