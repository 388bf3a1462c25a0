use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{PromptDocument, PromptError, PromptSegment, SegmentKind};

/// Line-level boundary patterns used to recover prompt structure.
///
/// Every pattern is a regular expression matched against a single line with
/// its line terminator removed. Within one list the first matching pattern
/// wins; a line matching patterns from two different boundary lists is a
/// configuration error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub examples_open: Vec<String>,
    /// A matching line is the last line of the examples block. Examples also
    /// end right before a task-slot line.
    pub examples_close: Vec<String>,
    pub task_open: Vec<String>,
    pub format_open: Vec<String>,
    /// Lines that introduce a step-by-step block. Numbered lines (`1.`)
    /// always start a block as well.
    pub steps_intro: Vec<String>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            examples_open: vec![
                r"\*{5} Example \*{5}".into(),
                r"^\s*Here are two examples".into(),
                r"^\s*Here is one example".into(),
            ],
            examples_close: vec![r"\*{5} Example Ends \*{5}".into()],
            task_open: vec![r"^\s*Here is the task".into(), r"^\s*Given information:".into()],
            format_open: vec![
                r"^\s*Your response should".into(),
                r"^\s*Output format:".into(),
                r"^\s*You must adhere to the format".into(),
            ],
            steps_intro: vec![
                r"(?i)step by step".into(),
                r"(?i)step-by-step".into(),
                r"(?i)one by one".into(),
            ],
        }
    }
}

impl SegmentationConfig {
    pub fn compile(&self) -> Result<Segmenter, PromptError> {
        fn set(patterns: &[String]) -> Result<Vec<Regex>, PromptError> {
            patterns
                .iter()
                .map(|p| {
                    Regex::new(p).map_err(|e| PromptError::BadPattern {
                        pattern: p.clone(),
                        reason: e.to_string(),
                    })
                })
                .collect()
        }
        Ok(Segmenter {
            examples_open: set(&self.examples_open)?,
            examples_close: set(&self.examples_close)?,
            task_open: set(&self.task_open)?,
            format_open: set(&self.format_open)?,
            steps_intro: set(&self.steps_intro)?,
            numbered: Regex::new(r"^\s*\d+\.\s").expect("static regex"),
            step_continuation: Regex::new(r"^(\s|[-•*]\s|[a-z][.)]\s|\d+\.\s)")
                .expect("static regex"),
        })
    }
}

/// Compiled form of a [`SegmentationConfig`].
#[derive(Debug, Clone)]
pub struct Segmenter {
    examples_open: Vec<Regex>,
    examples_close: Vec<Regex>,
    task_open: Vec<Regex>,
    format_open: Vec<Regex>,
    steps_intro: Vec<Regex>,
    numbered: Regex,
    step_continuation: Regex,
}

#[derive(Debug, Default, Clone, Copy)]
struct LineMarks {
    examples_open: bool,
    examples_close: bool,
    task_open: bool,
    format_open: bool,
    step_start: bool,
    blank: bool,
    step_like: bool,
}

impl LineMarks {
    fn any_open(&self) -> bool {
        self.examples_open || self.task_open || self.format_open
    }
}

fn strip_terminator(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

impl Segmenter {
    fn first_match<'a>(set: &'a [Regex], line: &str) -> Option<&'a Regex> {
        set.iter().find(|r| r.is_match(line))
    }

    fn mark(&self, line_no: usize, raw_line: &str) -> Result<LineMarks, PromptError> {
        let line = strip_terminator(raw_line);
        let hits = [
            Self::first_match(&self.examples_open, line),
            Self::first_match(&self.examples_close, line),
            Self::first_match(&self.task_open, line),
            Self::first_match(&self.format_open, line),
        ];
        let mut matched = hits.iter().flatten();
        if let (Some(first), Some(second)) = (matched.next(), matched.next()) {
            return Err(PromptError::OverlappingMarkers {
                line: line_no + 1,
                first: first.as_str().to_string(),
                second: second.as_str().to_string(),
            });
        }
        let numbered = self.numbered.is_match(line);
        Ok(LineMarks {
            examples_open: hits[0].is_some(),
            examples_close: hits[1].is_some(),
            task_open: hits[2].is_some(),
            format_open: hits[3].is_some(),
            step_start: numbered || Self::first_match(&self.steps_intro, line).is_some(),
            blank: line.trim().is_empty(),
            step_like: self.step_continuation.is_match(line),
        })
    }

    /// Splits `raw` into segments; every byte lands in exactly one segment.
    pub fn parse(&self, raw: &str) -> Result<PromptDocument, PromptError> {
        if raw.is_empty() {
            return Err(PromptError::EmptyPrompt);
        }
        let lines: Vec<&str> = raw.split_inclusive('\n').collect();
        let marks = lines
            .iter()
            .enumerate()
            .map(|(i, l)| self.mark(i, l))
            .collect::<Result<Vec<_>, _>>()?;
        let n = lines.len();
        let text_of = |from: usize, to: usize| lines[from..to].concat();

        let mut segments = Vec::new();
        let mut free_start: Option<usize> = None;
        let mut steps_seen = false;
        let mut i = 0;

        let flush = |segments: &mut Vec<PromptSegment>, free: &mut Option<usize>, upto: usize| {
            if let Some(start) = free.take() {
                segments.push(PromptSegment::new(SegmentKind::Preamble, text_of(start, upto)));
            }
        };

        while i < n {
            let m = marks[i];
            if m.examples_open {
                flush(&mut segments, &mut free_start, i);
                let mut end = n;
                for (j, mj) in marks.iter().enumerate().skip(i + 1) {
                    if mj.examples_close {
                        end = j + 1;
                        break;
                    }
                    if mj.task_open {
                        end = j;
                        break;
                    }
                }
                segments.push(PromptSegment::new(SegmentKind::Examples, text_of(i, end)));
                i = end;
            } else if m.task_open {
                flush(&mut segments, &mut free_start, i);
                let end = (i + 1..n)
                    .find(|&j| marks[j].examples_open || marks[j].format_open)
                    .unwrap_or(n);
                segments.push(PromptSegment::new(SegmentKind::TaskSlot, text_of(i, end)));
                i = end;
            } else if m.format_open {
                flush(&mut segments, &mut free_start, i);
                let end = self.paragraph_end(&marks, i, |_| false);
                segments.push(PromptSegment::new(
                    SegmentKind::FormatRequirements,
                    text_of(i, end),
                ));
                i = end;
            } else if m.step_start && !steps_seen {
                flush(&mut segments, &mut free_start, i);
                let end = self.paragraph_end(&marks, i, |mj| mj.step_like);
                segments.push(PromptSegment::new(
                    SegmentKind::StepInstructions,
                    text_of(i, end),
                ));
                steps_seen = true;
                i = end;
            } else {
                free_start.get_or_insert(i);
                i += 1;
            }
        }
        flush(&mut segments, &mut free_start, n);
        PromptDocument::new(segments)
    }

    /// End (exclusive) of a block starting at `start`: the block keeps
    /// consecutive non-blank lines and trailing blank lines, and continues
    /// past a blank line only into lines accepted by `continues`. Any
    /// boundary marker ends it.
    fn paragraph_end(
        &self,
        marks: &[LineMarks],
        start: usize,
        continues: impl Fn(&LineMarks) -> bool,
    ) -> usize {
        let mut prev_blank = false;
        for (j, mj) in marks.iter().enumerate().skip(start + 1) {
            if mj.any_open() {
                return j;
            }
            if mj.blank {
                prev_blank = true;
                continue;
            }
            if prev_blank && !continues(mj) {
                return j;
            }
            prev_blank = false;
        }
        marks.len()
    }
}

/// Parses raw prompt text into a structured document.
pub fn parse_prompt(raw: &str, markers: &SegmentationConfig) -> Result<PromptDocument, PromptError> {
    markers.compile()?.parse(raw)
}
