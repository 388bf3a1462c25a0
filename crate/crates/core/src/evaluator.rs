//! Test-time evaluation with a deterministic checker.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{fill_slots, par_map, Actor, EpisodeError, FeedbackGenerator, NoFeedback, TaskSample};
use crate::prompt::PromptDocument;
use crate::toy::{parse_toy_answer, toy_check, ToyAnswer, UnparseableAnswer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub pass: bool,
    pub violated: Vec<String>,
}

/// Task-specific glue between prompts, model answers and a checker.
///
/// `check` must be pure and deterministic, and `parse_answer` must not
/// consult the checker.
pub trait TaskAdapter: Send + Sync {
    type Answer;

    fn fill(&self, prompt: &PromptDocument, sample: &TaskSample) -> Result<String, EpisodeError> {
        fill_slots(prompt, sample)
    }

    fn parse_answer(&self, text: &str, sample: &TaskSample) -> Result<Self::Answer, UnparseableAnswer>;

    fn check(&self, answer: &Self::Answer, sample: &TaskSample) -> CheckOutcome;
}

/// The built-in trip planning task.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyAdapter;

impl TaskAdapter for ToyAdapter {
    type Answer = ToyAnswer;

    fn parse_answer(&self, text: &str, sample: &TaskSample) -> Result<ToyAnswer, UnparseableAnswer> {
        let toy = sample
            .toy
            .as_ref()
            .ok_or_else(|| UnparseableAnswer(format!("sample {} is not a toy task sample", sample.id)))?;
        parse_toy_answer(text, toy)
    }

    fn check(&self, answer: &ToyAnswer, sample: &TaskSample) -> CheckOutcome {
        match &sample.toy {
            Some(toy) => {
                let c = toy_check(answer, toy);
                CheckOutcome {
                    pass: c.pass,
                    violated: c.violated.iter().map(|r| r.id().to_string()).collect(),
                }
            }
            None => CheckOutcome {
                pass: false,
                violated: vec!["not_a_toy_sample".into()],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub pass: bool,
    pub delivered: bool,
    pub violated: Vec<String>,
    pub rounds_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by sample id.
    pub per_sample: Vec<SampleResult>,
    pub passed: usize,
    pub delivered: usize,
    pub total: usize,
    pub pass_rate: f64,
    pub delivery_rate: f64,
}

fn rate(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        n as f64 / total as f64
    }
}

impl EvalReport {
    pub fn from_results(mut per_sample: Vec<SampleResult>) -> Self {
        per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let passed = per_sample.iter().filter(|r| r.pass).count();
        let delivered = per_sample.iter().filter(|r| r.delivered).count();
        let total = per_sample.len();
        Self {
            per_sample,
            passed,
            delivered,
            total,
            pass_rate: rate(passed, total),
            delivery_rate: rate(delivered, total),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "pass", "delivered", "violated", "rounds_used", "error"])?;
        for r in &self.per_sample {
            w.write_record([
                r.sample_id.as_str(),
                if r.pass { "1" } else { "0" },
                if r.delivered { "1" } else { "0" },
                &r.violated.join(";"),
                &r.rounds_used.to_string(),
                r.error.as_deref().unwrap_or(""),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `{stem}.json` and `{stem}.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        let csv = self.to_csv().map_err(std::io::Error::other)?;
        std::fs::write(dir.join(format!("{stem}.csv")), csv)
    }
}

/// Runs one episode per sample and checks the final answer. With no
/// feedback generator every episode is a single round. Sample failures are
/// recorded as undelivered; evaluation itself does not fail.
pub fn evaluate<A: TaskAdapter>(
    actor: &Actor<'_>,
    prompt: &PromptDocument,
    samples: &[TaskSample],
    adapter: &A,
    fg: Option<&dyn FeedbackGenerator>,
    max_rounds: u32,
    parallelism: usize,
) -> EvalReport {
    let (fg, max_rounds): (&dyn FeedbackGenerator, u32) = match fg {
        Some(fg) => (fg, max_rounds),
        None => (&NoFeedback, 1),
    };
    let results = par_map(samples, parallelism, |sample| {
        let failed = |error: String, rounds_used| SampleResult {
            sample_id: sample.id.clone(),
            pass: false,
            delivered: false,
            violated: Vec::new(),
            rounds_used,
            error: Some(error),
        };
        let first = match adapter.fill(prompt, sample) {
            Ok(text) => text,
            Err(e) => return failed(e.to_string(), 0),
        };
        let transcript = match actor.run_episode_from(first, &sample.id, fg, max_rounds) {
            Ok(t) => t,
            Err(e) => {
                let rounds = e.transcript().map(|t| t.rounds_used).unwrap_or(0);
                return failed(e.to_string(), rounds);
            }
        };
        let text = transcript.last_assistant().unwrap_or("");
        match adapter.parse_answer(text, sample) {
            Err(e) => failed(format!("unparseable answer: {}", e.0), transcript.rounds_used),
            Ok(answer) => {
                let outcome = adapter.check(&answer, sample);
                SampleResult {
                    sample_id: sample.id.clone(),
                    pass: outcome.pass,
                    delivered: true,
                    violated: outcome.violated,
                    rounds_used: transcript.rounds_used,
                    error: None,
                }
            }
        }
    });
    EvalReport::from_results(results)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("reports cover different samples (only in first: {only_a:?}, only in second: {only_b:?})")]
pub struct SampleMismatch {
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub sample_id: String,
    pub before: bool,
    pub after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub pass_rate_delta: f64,
    pub delivery_rate_delta: f64,
    pub flips: Vec<Flip>,
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<RunComparison, SampleMismatch> {
    let ids_a: BTreeSet<&str> = a.per_sample.iter().map(|r| r.sample_id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.per_sample.iter().map(|r| r.sample_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(SampleMismatch {
            only_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
            only_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
        });
    }
    let flips = a
        .per_sample
        .iter()
        .filter_map(|ra| {
            let rb = b.per_sample.iter().find(|r| r.sample_id == ra.sample_id)?;
            (ra.pass != rb.pass).then(|| Flip {
                sample_id: ra.sample_id.clone(),
                before: ra.pass,
                after: rb.pass,
            })
        })
        .collect();
    Ok(RunComparison {
        pass_rate_delta: b.pass_rate - a.pass_rate,
        delivery_rate_delta: b.delivery_rate - a.delivery_rate,
        flips,
    })
}
