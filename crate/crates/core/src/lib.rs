//! Prompt optimization for LLM agents without a solution checker.
//!
//! The engine runs an act / summarize / optimize loop over batches of
//! interaction transcripts and only ever edits the step-by-step instruction
//! segment of a prompt. See the crate README for the command-line tool.

pub mod prompt;
pub mod templates;
pub mod gateway;
pub mod actor;
pub mod toy;
pub mod summarizer;
pub mod guardrails;
pub mod optimizer;
pub mod evaluator;
pub mod config;
pub mod trainer;
pub mod cli;
