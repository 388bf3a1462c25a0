//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the requested
//! operation fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::actor::{load_dataset, Actor, TaskSample};
use crate::config::{BackendKind, RunConfig, TaskKind};
use crate::evaluator::{evaluate, EvalReport, ToyAdapter};
use crate::gateway::{load_script, Script};
use crate::prompt::{diff_prompts, SegmentStatus};
use crate::toy::generate_toy_samples;
use crate::trainer::{self, TrainError, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUN: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "reprompt", version, about = "Optimize the step-by-step instructions of an agent prompt from its own transcripts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Http,
    Scripted,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Http => BackendKind::Http,
            BackendArg::Scripted => BackendKind::Scripted,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct BackendArgs {
    /// Overrides gateway.backend.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Script file for the scripted backend; overrides gateway.script.
    #[arg(long)]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a new training run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Initial prompt text file.
        #[arg(long)]
        prompt: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Training set; overrides train.dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Evaluate a prompt on a test set with the built-in toy checker.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long = "test-set")]
        test_set: PathBuf,
        /// Single-round episodes without feedback.
        #[arg(long)]
        no_feedback: bool,
        #[arg(long, default_value_t = 1)]
        trials: u32,
        /// Directory for the per-trial reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Continue an interrupted run.
    Resume {
        run_dir: PathBuf,
        /// Calls allowed in total, counting those already made.
        #[arg(long)]
        call_budget: Option<u64>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Print the version history of a run.
    Inspect { run_dir: PathBuf },
    /// Print the structured difference between two prompt files.
    Diff {
        old: PathBuf,
        new: PathBuf,
        /// Config whose segmentation rules to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write seed-generated toy task samples as a dataset file.
    ToyData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "toy")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure reported to the user with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct RunFailure(String);

fn fail(e: impl std::fmt::Display) -> RunFailure {
    RunFailure(e.to_string())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    use clap::CommandFactory;
                    let _ = writeln!(err, "{text}");
                    let _ = write!(err, "{}", Cli::command().render_help());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUN
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), RunFailure> {
    match command {
        Command::Train {
            config,
            prompt,
            out: run_dir,
            dataset,
            backend,
        } => cmd_train(&config, &prompt, &run_dir, dataset, backend, out),
        Command::Eval {
            config,
            prompt,
            test_set,
            no_feedback,
            trials,
            out: report_dir,
            backend,
        } => cmd_eval(&config, &prompt, &test_set, no_feedback, trials, report_dir.as_deref(), backend, out),
        Command::Resume {
            run_dir,
            call_budget,
            backend,
        } => cmd_resume(&run_dir, call_budget, backend, out),
        Command::Inspect { run_dir } => cmd_inspect(&run_dir, out),
        Command::Diff { old, new, config } => cmd_diff(&old, &new, config.as_deref(), out),
        Command::ToyData {
            seed,
            count,
            prefix,
            out: path,
        } => {
            let samples: Vec<TaskSample> = generate_toy_samples(seed, count, &prefix)
                .iter()
                .map(|s| s.to_task_sample())
                .collect();
            let text = serde_json::to_string_pretty(&samples).map_err(fail)?;
            write_file(&path, &(text + "\n"))?;
            writeln!(out, "wrote {count} toy samples to {}", path.display()).map_err(fail)
        }
    }
}

fn read_file(path: &Path) -> Result<String, RunFailure> {
    std::fs::read_to_string(path).map_err(|e| RunFailure(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), RunFailure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| RunFailure(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| RunFailure(format!("cannot write {}: {e}", path.display())))
}

/// The config as written (kept in the run snapshot) and with its paths
/// resolved against the config's directory (used for reading).
fn load_config(path: &Path) -> Result<(RunConfig, RunConfig), RunFailure> {
    let resolved = RunConfig::load(path).map_err(fail)?;
    let written = RunConfig::parse(&read_file(path)?).map_err(fail)?;
    Ok((written, resolved))
}

fn apply_backend(cfg: &mut RunConfig, args: &BackendArgs) {
    if let Some(b) = args.backend {
        cfg.gateway.backend = b.into();
    }
    if let Some(s) = &args.script {
        cfg.gateway.script = Some(s.clone());
    }
}

fn load_script_for(cfg: &RunConfig) -> Result<Option<Script>, RunFailure> {
    match (cfg.gateway.backend, &cfg.gateway.script) {
        (BackendKind::Scripted, Some(path)) => load_script(path).map(Some).map_err(fail),
        (BackendKind::Scripted, None) => Err(RunFailure(
            "the scripted backend needs gateway.script or --script".into(),
        )),
        (BackendKind::Http, _) => Ok(None),
    }
}

fn report_outcome(outcome: &TrainOutcome, run_dir: &Path, out: &mut dyn Write) -> Result<(), RunFailure> {
    let s = &outcome.state;
    let last = s.prompt_versions.len().saturating_sub(1);
    writeln!(
        out,
        "run {}: {} prompt versions, {} episodes, {} gateway calls{}",
        s.run_id,
        s.prompt_versions.len(),
        s.episodes_run,
        s.gateway_calls,
        if s.converged { ", converged" } else { "" }
    )
    .map_err(fail)?;
    writeln!(out, "final prompt: {}", run_dir.join(format!("prompts/v{last}.txt")).display()).map_err(fail)
}

fn finish_training(
    result: Result<TrainOutcome, TrainError>,
    run_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), RunFailure> {
    match result {
        Ok(outcome) => report_outcome(&outcome, run_dir, out),
        Err(TrainError::BudgetExhausted { calls, .. }) => Err(RunFailure(format!(
            "call budget exhausted after {calls} gateway calls; continue with `reprompt resume {}`",
            run_dir.display()
        ))),
        Err(e) => Err(fail(e)),
    }
}

fn cmd_train(
    config: &Path,
    prompt: &Path,
    run_dir: &Path,
    dataset: Option<PathBuf>,
    backend: BackendArgs,
    out: &mut dyn Write,
) -> Result<(), RunFailure> {
    let (mut written, mut resolved) = load_config(config)?;
    for cfg in [&mut written, &mut resolved] {
        apply_backend(cfg, &backend);
        if let Some(d) = &dataset {
            cfg.train.dataset = Some(d.clone());
        }
    }
    let dataset_path = resolved
        .train
        .dataset
        .clone()
        .ok_or_else(|| RunFailure("no training set: set train.dataset or pass --dataset".into()))?;
    let samples = load_dataset(&dataset_path).map_err(fail)?;
    let initial = read_file(prompt)?;
    let script = load_script_for(&resolved)?;
    let gateway = resolved.build_gateway(script.clone()).map_err(fail)?;
    let result = trainer::train(written, &samples, &initial, script, &gateway, run_dir);
    finish_training(result, run_dir, out)
}

fn cmd_resume(
    run_dir: &Path,
    call_budget: Option<u64>,
    backend: BackendArgs,
    out: &mut dyn Write,
) -> Result<(), RunFailure> {
    let snapshot = trainer::load_run(run_dir).map_err(fail)?;
    let mut cfg = snapshot.meta.config.clone();
    apply_backend(&mut cfg, &backend);
    let script = match (cfg.gateway.backend, &backend.script) {
        (BackendKind::Scripted, Some(path)) => Some(load_script(path).map_err(fail)?),
        (BackendKind::Scripted, None) => Some(
            snapshot
                .meta
                .script
                .clone()
                .ok_or_else(|| RunFailure("the run has no stored script; pass --script".into()))?,
        ),
        (BackendKind::Http, _) => None,
    };
    let gateway = cfg.build_gateway(script).map_err(fail)?;
    let result = trainer::resume(run_dir, &gateway, call_budget);
    finish_training(result, run_dir, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &Path,
    prompt: &Path,
    test_set: &Path,
    no_feedback: bool,
    trials: u32,
    report_dir: Option<&Path>,
    backend: BackendArgs,
    out: &mut dyn Write,
) -> Result<(), RunFailure> {
    let (_, mut cfg) = load_config(config)?;
    apply_backend(&mut cfg, &backend);
    if cfg.task.kind != TaskKind::Toy {
        return Err(RunFailure(
            "eval needs a task with a built-in checker; set task.kind = \"toy\"".into(),
        ));
    }
    if trials == 0 {
        return Err(RunFailure("--trials must be positive".into()));
    }
    let samples = load_dataset(test_set).map_err(fail)?;
    let segmenter = cfg.task.segmentation.compile().map_err(fail)?;
    let (doc, _) = trainer::structure_prompt(&read_file(prompt)?, &segmenter).map_err(fail)?;
    let gateway = cfg.build_gateway(load_script_for(&cfg)?).map_err(fail)?;
    let actor = Actor::new(&gateway, cfg.sampling(&cfg.train.models.actor));
    let fg = (!no_feedback).then(|| trainer::build_feedback(&cfg, &gateway, &samples));

    let mut reports: Vec<EvalReport> = Vec::new();
    for trial in 1..=trials {
        let report = evaluate(
            &actor,
            &doc,
            &samples,
            &ToyAdapter,
            fg.as_deref(),
            cfg.train.max_rounds,
            cfg.train.parallelism,
        );
        if let Some(dir) = report_dir {
            report.write(dir, &format!("eval_trial{trial}")).map_err(fail)?;
        }
        reports.push(report);
    }

    writeln!(out, "{:<8} {:>8} {:>10} {:>10} {:>14}", "trial", "samples", "passed", "pass_rate", "delivery_rate")
        .map_err(fail)?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            out,
            "{:<8} {:>8} {:>10} {:>10.3} {:>14.3}",
            i + 1,
            r.total,
            r.passed,
            r.pass_rate,
            r.delivery_rate
        )
        .map_err(fail)?;
    }
    if reports.len() > 1 {
        let best = reports
            .iter()
            .max_by(|a, b| a.pass_rate.total_cmp(&b.pass_rate))
            .expect("at least one trial");
        let mean = reports.iter().map(|r| r.pass_rate).sum::<f64>() / reports.len() as f64;
        writeln!(out, "mean pass_rate {mean:.3}, best {:.3}", best.pass_rate).map_err(fail)?;
    }
    Ok(())
}

fn cmd_inspect(run_dir: &Path, out: &mut dyn Write) -> Result<(), RunFailure> {
    let snapshot = trainer::load_run(run_dir).map_err(fail)?;
    let state = snapshot.state();
    writeln!(
        out,
        "run {} | epoch {} batch {} next | {} episodes, {} calls{}",
        state.run_id,
        state.epoch,
        state.batch_index,
        state.episodes_run,
        state.gateway_calls,
        if state.converged { " | converged" } else { "" }
    )
    .map_err(fail)?;
    for (record, _) in &snapshot.versions {
        let at = match (record.epoch, record.batch) {
            (Some(e), Some(b)) => format!("epoch {e} batch {b}"),
            _ => "initial".to_string(),
        };
        let placement = match record.placement {
            Some(p) if record.multi_edit => format!("{p} (multi-edit)"),
            Some(p) => p.to_string(),
            None if record.injected_steps => "default steps injected".to_string(),
            None => "-".to_string(),
        };
        writeln!(out, "v{} {} {} | {}", record.version, &record.hash[..12], at, placement).map_err(fail)?;
        if let Some(case) = record.focus_case {
            writeln!(out, "    focus ({case:?}): {}", record.focus_text).map_err(fail)?;
        }
        if let Some(v) = record.verdict {
            writeln!(out, "    guard verdict: {v:?}").map_err(fail)?;
        }
    }
    for entry in snapshot.cursor.iter().filter(|e| e.error.is_some()) {
        writeln!(
            out,
            "skipped epoch {} batch {}: {}",
            entry.epoch,
            entry.batch,
            entry.error.as_deref().unwrap_or("")
        )
        .map_err(fail)?;
    }
    Ok(())
}

fn cmd_diff(old: &Path, new: &Path, config: Option<&Path>, out: &mut dyn Write) -> Result<(), RunFailure> {
    let segmentation = match config {
        Some(path) => load_config(path)?.1.task.segmentation,
        None => Default::default(),
    };
    let segmenter = segmentation.compile().map_err(fail)?;
    let a = segmenter.parse(&read_file(old)?).map_err(fail)?;
    let b = segmenter.parse(&read_file(new)?).map_err(fail)?;
    let diff = diff_prompts(&a, &b);
    if diff.is_identical() {
        return writeln!(out, "identical").map_err(fail);
    }
    for entry in &diff.entries {
        let status = match entry.status {
            SegmentStatus::Identical => "identical",
            SegmentStatus::Modified => "modified",
            SegmentStatus::Added => "added",
            SegmentStatus::Removed => "removed",
        };
        write!(out, "{:<20} {status}", entry.kind.as_str()).map_err(fail)?;
        if !entry.step_edits.is_empty() {
            let edits: Vec<String> = entry.step_edits.iter().map(|e| e.to_string()).collect();
            write!(out, " {}", edits.join(", ")).map_err(fail)?;
        }
        writeln!(out).map_err(fail)?;
    }
    Ok(())
}
