use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::diff::StepEdit;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position in the list.
    pub index: usize,
    pub text: String,
}

/// The steps of a step-instruction segment.
///
/// Numbered items (`1.`, `2.`, ...) are the steps; lines before the first
/// numbered item are the block's lead-in. A block without numbered items
/// treats each paragraph as one step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepList {
    pub lead_in: String,
    pub steps: Vec<Step>,
}

fn numbered() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\.\s+").expect("static regex"))
}

impl StepList {
    pub fn parse(text: &str) -> Self {
        let mut lead_in = String::new();
        let mut bodies: Vec<String> = Vec::new();
        let has_numbers = text.lines().any(|l| numbered().is_match(l));

        if has_numbers {
            for line in text.lines() {
                if let Some(m) = numbered().find(line) {
                    bodies.push(line[m.end()..].to_string());
                } else if let Some(last) = bodies.last_mut() {
                    last.push('\n');
                    last.push_str(line);
                } else {
                    lead_in.push_str(line);
                    lead_in.push('\n');
                }
            }
        } else {
            let mut current = String::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    if !current.is_empty() {
                        bodies.push(std::mem::take(&mut current));
                    }
                } else {
                    if !current.is_empty() {
                        current.push('\n');
                    }
                    current.push_str(line);
                }
            }
            if !current.is_empty() {
                bodies.push(current);
            }
        }

        let steps = bodies
            .into_iter()
            .map(|b| b.trim().to_string())
            .filter(|b| !b.is_empty())
            .enumerate()
            .map(|(i, text)| Step { index: i + 1, text })
            .collect();
        Self {
            lead_in: lead_in.trim().to_string(),
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Describes how `new` differs from `old` as a single step-level edit.
///
/// Returns `None` when the two lists are equal. Anything that is not one
/// insertion, one append or one replacement (including a changed lead-in)
/// comes back as [`StepEdit::ReplaceBlock`].
pub fn classify_step_edit(old: &StepList, new: &StepList) -> Option<StepEdit> {
    if old == new {
        return None;
    }
    if old.lead_in != new.lead_in {
        return Some(StepEdit::ReplaceBlock);
    }
    let a = old.texts();
    let b = new.texts();
    if b.len() == a.len() + 1 {
        // first position where the lists diverge is the inserted step
        let k = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
        if a[k..] == b[k + 1..] {
            return Some(if k == a.len() {
                StepEdit::AppendStep
            } else {
                StepEdit::InsertBefore(k + 1)
            });
        }
    } else if b.len() == a.len() {
        let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        if let [k] = differing[..] {
            return Some(StepEdit::ReplaceStep(k + 1));
        }
    }
    Some(StepEdit::ReplaceBlock)
}
