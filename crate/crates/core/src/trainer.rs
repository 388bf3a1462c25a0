//! The training loop and its on-disk run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.meta                         config snapshot, run id, samples, script
//! prompts/v{N}.txt                 rendered prompt of version N
//! prompts/v{N}.meta                hashes, placement, focus text, step text
//! transcripts/e{E}/b{B}/{id}.txt   one transcript per episode
//! focus/e{E}_b{B}.txt              focus point of a batch
//! optimizer_raw/e{E}_b{B}.txt      optimizer outputs and outcome of a batch
//! state.cursor                     one line per finished batch
//! ```
//!
//! Every file is created once and never rewritten; `state.cursor` only
//! grows. Epoch and batch numbers start at 0.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actor::{
    Actor, EpisodeError, FeedbackGenerator, NoFeedback, ReflexionFeedback, RuleCheckFeedback, TaskSample,
    Terminal, ThinkTraceFeedback, Transcript,
};
use crate::config::{ConfigError, FeedbackKind, RunConfig};
use crate::gateway::{Gateway, GatewayError, Script};
use crate::guardrails::{Guardrails, Verdict};
use crate::optimizer::{Optimizer, OptimizerError};
use crate::prompt::{inject_default_steps, PromptDocument, PromptError, Segmenter, StepEdit};
use crate::summarizer::{FocusCase, FocusPoint, Summarizer, SummarizerError};

pub const RUN_META: &str = "run.meta";
pub const CURSOR_FILE: &str = "state.cursor";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("run directory {0} already exists and is not empty")]
    RunExists(String),
    #[error("corrupt run: {0}")]
    CorruptRun(String),
    #[error("call budget exhausted after {calls} gateway calls; resume the run to continue")]
    BudgetExhausted { calls: u64, state: Box<RunState> },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub config: RunConfig,
    /// The prompt as given, before any step injection.
    pub initial_prompt: String,
    /// Training samples in dataset order.
    pub samples: Vec<TaskSample>,
    /// Script of a scripted run, so the run can be replayed from its
    /// directory alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version: u32,
    pub hash: String,
    pub parent_hash: Option<String>,
    pub placement: Option<StepEdit>,
    pub multi_edit: bool,
    pub focus_case: Option<FocusCase>,
    pub focus_text: String,
    pub epoch: Option<u32>,
    pub batch: Option<u32>,
    pub verdict: Option<Verdict>,
    /// Version 0 only: whether the default steps were injected.
    #[serde(default)]
    pub injected_steps: bool,
    /// Step-instruction text of this version, enough to rebuild it from its
    /// parent.
    pub step_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchOutcome {
    Updated,
    Unchanged,
    Skipped,
}

/// One line of `state.cursor`; counters are cumulative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CursorEntry {
    pub epoch: u32,
    pub batch: u32,
    pub outcome: BatchOutcome,
    pub version: u32,
    pub episodes: u64,
    pub calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    /// Next epoch to run.
    pub epoch: u32,
    /// Next batch to run within `epoch`.
    pub batch_index: u32,
    pub prompt_versions: Vec<VersionRecord>,
    pub converged: bool,
    pub episodes_run: u64,
    pub gateway_calls: u64,
    /// Per finished epoch: whether any batch changed the prompt.
    pub epoch_changed: Vec<bool>,
    pub skipped_batches: u32,
}

/// True iff the last `patience` finished epochs changed nothing.
pub fn check_convergence(state: &RunState, patience: u32) -> bool {
    let p = patience as usize;
    p > 0 && state.epoch_changed.len() >= p && state.epoch_changed[state.epoch_changed.len() - p..].iter().all(|c| !c)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_prompt: PromptDocument,
    pub state: RunState,
}

/// Picks the training samples named by the config: an explicit id list, or
/// the first `sample_limit`, or all.
pub fn select_samples(all: &[TaskSample], cfg: &RunConfig) -> Result<Vec<TaskSample>, ConfigError> {
    if let Some(ids) = &cfg.train.sample_ids {
        let by_id: BTreeMap<&str, &TaskSample> = all.iter().map(|s| (s.id.as_str(), s)).collect();
        return ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| ConfigError::Invalid(format!("train.sample_ids names unknown sample {id}")))
            })
            .collect();
    }
    let n = cfg.train.sample_limit.unwrap_or(all.len()).min(all.len());
    Ok(all[..n].to_vec())
}

pub fn build_feedback<'a>(
    cfg: &RunConfig,
    gateway: &'a Gateway,
    samples: &[TaskSample],
) -> Box<dyn FeedbackGenerator + 'a> {
    let f = &cfg.train.feedback;
    match f.kind {
        FeedbackKind::None => Box::new(NoFeedback),
        FeedbackKind::Reflexion => Box::new(ReflexionFeedback::new(
            gateway,
            cfg.sampling(&cfg.train.models.reflection),
            f.finish_marker.clone(),
        )),
        FeedbackKind::ThinkTrace => Box::new(ThinkTraceFeedback::new(f.think_open.clone(), f.think_close.clone())),
        FeedbackKind::RuleCheck => Box::new(RuleCheckFeedback::new(samples)),
    }
}

fn run_id(config: &RunConfig, initial_prompt: &str, samples: &[TaskSample]) -> String {
    let samples = serde_json::to_string(samples).expect("samples serialize");
    sha256_hex(&format!("{}\n{initial_prompt}\n{samples}", config.to_toml()))[..16].to_string()
}

/// Parses the raw prompt and injects the default steps when it has none.
pub fn structure_prompt(raw: &str, segmenter: &Segmenter) -> Result<(PromptDocument, bool), PromptError> {
    let doc = segmenter.parse(raw)?;
    if doc.has_step_instructions() {
        Ok((doc, false))
    } else {
        Ok((inject_default_steps(&doc)?, true))
    }
}

struct RunDir {
    root: PathBuf,
    writer: Mutex<()>,
}

impl RunDir {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates `rel` with `contents`. An existing file with the same
    /// contents is accepted (a resumed batch re-deriving an artifact); any
    /// other existing content is corruption.
    fn write_new(&self, rel: &str, contents: &str) -> Result<(), TrainError> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => f.write_all(contents.as_bytes()).map_err(io_err(&path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let existing = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                if existing == contents {
                    Ok(())
                } else {
                    Err(TrainError::CorruptRun(format!("{rel} exists with different contents")))
                }
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn append_cursor(&self, entry: &CursorEntry) -> Result<(), TrainError> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path(CURSOR_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let line = serde_json::to_string(entry).expect("cursor entry serializes");
        writeln!(f, "{line}").map_err(io_err(&path))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<Option<T>, TrainError> {
        let path = self.path(rel);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| TrainError::CorruptRun(format!("{rel}: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

fn transcript_rel(epoch: u32, batch: u32, id: &str) -> String {
    format!("transcripts/e{epoch}/b{batch}/{id}.txt")
}

fn focus_rel(epoch: u32, batch: u32) -> String {
    format!("focus/e{epoch}_b{batch}.txt")
}

fn optimizer_rel(epoch: u32, batch: u32) -> String {
    format!("optimizer_raw/e{epoch}_b{batch}.txt")
}

fn version_rel(version: u32, ext: &str) -> String {
    format!("prompts/v{version}.{ext}")
}

/// Persisted outcome of one optimize call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct OptimizerRecord {
    raw_outputs: Vec<String>,
    changed: bool,
    placement: Option<StepEdit>,
    verdict: Option<Verdict>,
    step_text: Option<String>,
    error: Option<String>,
}

/// A loaded and verified run directory.
#[derive(Debug, Clone)]
pub struct RunSnapshot {
    pub meta: RunMeta,
    pub versions: Vec<(VersionRecord, PromptDocument)>,
    pub cursor: Vec<CursorEntry>,
}

impl RunSnapshot {
    pub fn state(&self) -> RunState {
        let cfg = &self.meta.config.train;
        let batches = batches_per_epoch(self.meta.samples.len(), cfg.batch_size);
        let mut epoch_changed = Vec::new();
        let mut current = false;
        for entry in &self.cursor {
            current |= entry.outcome == BatchOutcome::Updated;
            if entry.batch + 1 == batches {
                epoch_changed.push(current);
                current = false;
            }
        }
        let (epoch, batch_index) = match self.cursor.last() {
            None => (0, 0),
            Some(e) if e.batch + 1 == batches => (e.epoch + 1, 0),
            Some(e) => (e.epoch, e.batch + 1),
        };
        let current_version = self.cursor.last().map(|e| e.version).unwrap_or(0) as usize;
        let mut state = RunState {
            run_id: self.meta.run_id.clone(),
            epoch,
            batch_index,
            prompt_versions: self.versions[..=current_version].iter().map(|(r, _)| r.clone()).collect(),
            converged: false,
            episodes_run: self.cursor.last().map(|e| e.episodes).unwrap_or(0),
            gateway_calls: self.cursor.last().map(|e| e.calls).unwrap_or(0),
            epoch_changed,
            skipped_batches: self.cursor.iter().filter(|e| e.outcome == BatchOutcome::Skipped).count() as u32,
        };
        state.converged = check_convergence(&state, cfg.convergence_patience);
        state
    }

    pub fn current_prompt(&self) -> &PromptDocument {
        let v = self.cursor.last().map(|e| e.version).unwrap_or(0) as usize;
        &self.versions[v].1
    }
}

pub fn batches_per_epoch(samples: usize, batch_size: usize) -> u32 {
    samples.div_ceil(batch_size.max(1)) as u32
}

/// Reads a run directory and verifies its version chain: each file's hash,
/// each parent hash, and that every version is its parent with only the
/// recorded step text replaced.
pub fn load_run(run_dir: &Path) -> Result<RunSnapshot, TrainError> {
    let dir = RunDir {
        root: run_dir.to_path_buf(),
        writer: Mutex::new(()),
    };
    let meta: RunMeta = dir
        .read_json(RUN_META)?
        .ok_or_else(|| TrainError::CorruptRun(format!("{} has no {RUN_META}", run_dir.display())))?;
    let segmenter = meta.config.task.segmentation.compile()?;

    let mut versions: Vec<(VersionRecord, PromptDocument)> = Vec::new();
    for n in 0.. {
        let txt_path = dir.path(&version_rel(n, "txt"));
        let text = match std::fs::read_to_string(&txt_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => break,
            Err(e) => return Err(io_err(&txt_path)(e)),
        };
        let record: VersionRecord = dir
            .read_json(&version_rel(n, "meta"))?
            .ok_or_else(|| TrainError::CorruptRun(format!("prompts/v{n}.meta is missing")))?;
        let bad = |what: &str| TrainError::CorruptRun(format!("prompt version {n}: {what}"));
        if record.version != n {
            return Err(bad("version number does not match its file name"));
        }
        if sha256_hex(&text) != record.hash {
            return Err(bad("hash does not match the prompt text"));
        }
        let doc = match versions.last() {
            None => {
                if record.parent_hash.is_some() {
                    return Err(bad("version 0 has a parent"));
                }
                let (doc, _) = structure_prompt(&meta.initial_prompt, &segmenter)?;
                doc
            }
            Some((prev, prev_doc)) => {
                if record.parent_hash.as_deref() != Some(prev.hash.as_str()) {
                    return Err(bad("parent hash does not match the previous version"));
                }
                let step = record.step_text.as_deref().ok_or_else(|| bad("no step text recorded"))?;
                prev_doc
                    .replace_step_text(step)
                    .ok_or_else(|| bad("parent has no step instructions"))?
                    .with_parent(prev_doc)
            }
        };
        if doc.render() != text {
            return Err(bad("replaying the recorded edit does not reproduce the prompt"));
        }
        versions.push((record, doc));
    }
    if versions.is_empty() {
        return Err(TrainError::CorruptRun("no prompt versions".into()));
    }

    let cursor_path = dir.path(CURSOR_FILE);
    let cursor_text = match std::fs::read_to_string(&cursor_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(&cursor_path)(e)),
    };
    let mut cursor = Vec::new();
    for (i, line) in cursor_text.lines().enumerate() {
        let entry: CursorEntry = serde_json::from_str(line)
            .map_err(|e| TrainError::CorruptRun(format!("{CURSOR_FILE} line {}: {e}", i + 1)))?;
        if entry.version as usize >= versions.len() {
            return Err(TrainError::CorruptRun(format!(
                "{CURSOR_FILE} line {} refers to missing prompt version {}",
                i + 1,
                entry.version
            )));
        }
        cursor.push(entry);
    }
    Ok(RunSnapshot { meta, versions, cursor })
}

/// Starts a new run in `run_dir`, which must be absent or empty.
pub fn train(
    config: RunConfig,
    dataset: &[TaskSample],
    initial_prompt: &str,
    script: Option<Script>,
    gateway: &Gateway,
    run_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let samples = select_samples(dataset, &config)?;
    config.validate_for_samples(samples.len())?;
    crate::actor::validate_samples(&samples).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let segmenter = config.task.segmentation.compile()?;
    let (v0, injected) = structure_prompt(initial_prompt, &segmenter)?;

    if run_dir.exists() {
        let mut entries = std::fs::read_dir(run_dir).map_err(io_err(run_dir))?;
        if entries.next().is_some() {
            return Err(TrainError::RunExists(run_dir.display().to_string()));
        }
    }
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let dir = RunDir {
        root: run_dir.to_path_buf(),
        writer: Mutex::new(()),
    };
    let meta = RunMeta {
        run_id: run_id(&config, initial_prompt, &samples),
        config,
        initial_prompt: initial_prompt.to_string(),
        samples,
        script,
    };
    dir.write_new(RUN_META, &json(&meta))?;
    let rendered = v0.render();
    let record = VersionRecord {
        version: 0,
        hash: sha256_hex(&rendered),
        parent_hash: None,
        placement: None,
        multi_edit: false,
        focus_case: None,
        focus_text: String::new(),
        epoch: None,
        batch: None,
        verdict: None,
        injected_steps: injected,
        step_text: v0.step_segment().map(|s| s.text().to_string()),
    };
    dir.write_new(&version_rel(0, "txt"), &rendered)?;
    dir.write_new(&version_rel(0, "meta"), &json(&record))?;
    log::info!("run {} started in {}", meta.run_id, run_dir.display());

    let snapshot = RunSnapshot {
        meta,
        versions: vec![(record, v0)],
        cursor: Vec::new(),
    };
    run_loop(&dir, snapshot, gateway)
}

/// Continues a run from its last finished batch. Finished episodes,
/// focus points and optimizer outputs on disk are reused, not recomputed.
pub fn resume(run_dir: &Path, gateway: &Gateway, call_budget: Option<u64>) -> Result<TrainOutcome, TrainError> {
    let mut snapshot = load_run(run_dir)?;
    if call_budget.is_some() {
        snapshot.meta.config.train.call_budget = call_budget;
    }
    let dir = RunDir {
        root: run_dir.to_path_buf(),
        writer: Mutex::new(()),
    };
    run_loop(&dir, snapshot, gateway)
}

enum BatchFailure {
    Budget,
    Skip(String),
}

struct Loop<'a> {
    dir: &'a RunDir,
    cfg: &'a RunConfig,
    gateway: &'a Gateway,
    guards: Guardrails,
    fg: Box<dyn FeedbackGenerator + 'a>,
}

fn run_loop(dir: &RunDir, snapshot: RunSnapshot, gateway: &Gateway) -> Result<TrainOutcome, TrainError> {
    let mut state = snapshot.state();
    let mut current = snapshot.current_prompt().clone();
    let mut versions: Vec<(VersionRecord, PromptDocument)> =
        snapshot.versions[..state.prompt_versions.len()].to_vec();
    let cfg = &snapshot.meta.config;
    let samples = &snapshot.meta.samples;
    let t = &cfg.train;

    let base_calls = state.gateway_calls;
    let start_calls = gateway.calls();
    if let Some(budget) = t.call_budget {
        gateway.set_call_limit(Some(start_calls + budget.saturating_sub(base_calls)));
    }
    let lp = Loop {
        dir,
        cfg,
        gateway,
        guards: Guardrails::new(cfg.task.segmentation.compile()?, &cfg.guards, cfg.task.required_tokens.clone())?,
        fg: build_feedback(cfg, gateway, samples),
    };
    let batches = batches_per_epoch(samples.len(), t.batch_size);

    while !state.converged && state.epoch < t.epochs {
        let epoch = state.epoch;
        let order = epoch_order(samples.len(), epoch, cfg);
        let mut changed_this_epoch = snapshot
            .cursor
            .iter()
            .any(|e| e.epoch == epoch && e.outcome == BatchOutcome::Updated);
        for batch in state.batch_index..batches {
            let lo = batch as usize * t.batch_size;
            let hi = (lo + t.batch_size).min(samples.len());
            let members: Vec<TaskSample> = order[lo..hi].iter().map(|&i| samples[i].clone()).collect();
            let calls_now = || base_calls + gateway.calls() - start_calls;

            let (outcome, error, episodes) = match lp.run_batch(epoch, batch, &current, &members) {
                Ok(Some((record, doc))) => {
                    versions.push((record.clone(), doc.clone()));
                    state.prompt_versions.push(record);
                    current = doc;
                    (BatchOutcome::Updated, None, members.len())
                }
                Ok(None) => (BatchOutcome::Unchanged, None, members.len()),
                Err((BatchFailure::Skip(msg), episodes)) => {
                    log::warn!("epoch {epoch} batch {batch} skipped: {msg}");
                    state.skipped_batches += 1;
                    (BatchOutcome::Skipped, Some(msg), episodes)
                }
                Err((BatchFailure::Budget, _)) => {
                    state.gateway_calls = calls_now();
                    return Err(TrainError::BudgetExhausted {
                        calls: state.gateway_calls,
                        state: Box::new(state),
                    });
                }
            };
            changed_this_epoch |= outcome == BatchOutcome::Updated;
            state.episodes_run += episodes as u64;
            state.gateway_calls = calls_now();
            dir.append_cursor(&CursorEntry {
                epoch,
                batch,
                outcome,
                version: current.version(),
                episodes: state.episodes_run,
                calls: state.gateway_calls,
                error,
            })?;
            state.batch_index = batch + 1;
            log::info!("epoch {epoch} batch {batch}: {outcome:?}, prompt v{}", current.version());
        }
        state.epoch_changed.push(changed_this_epoch);
        state.epoch += 1;
        state.batch_index = 0;
        state.converged = check_convergence(&state, t.convergence_patience);
        if state.converged {
            log::info!("converged after epoch {epoch}");
        }
    }
    Ok(TrainOutcome {
        final_prompt: current,
        state,
    })
}

/// Sample order for one epoch: dataset order, or a seeded shuffle.
fn epoch_order(n: usize, epoch: u32, cfg: &RunConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.train.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
    }
    order
}

type BatchResult = Result<Option<(VersionRecord, PromptDocument)>, (BatchFailure, usize)>;

impl Loop<'_> {
    fn run_batch(&self, epoch: u32, batch: u32, current: &PromptDocument, members: &[TaskSample]) -> BatchResult {
        let t = &self.cfg.train;
        let io = |e: TrainError, n| (BatchFailure::Skip(e.to_string()), n);

        // Act: reuse transcripts already on disk.
        let mut done: BTreeMap<String, Transcript> = BTreeMap::new();
        for s in members {
            if let Some(tr) = self.dir.read_json::<Transcript>(&transcript_rel(epoch, batch, &s.id)).map_err(|e| io(e, 0))? {
                done.insert(s.id.clone(), tr);
            }
        }
        let todo: Vec<TaskSample> = members.iter().filter(|s| !done.contains_key(&s.id)).cloned().collect();
        let write_error = Mutex::new(None);
        let on_done = |tr: &Transcript, err: Option<&EpisodeError>| {
            if err.is_some_and(EpisodeError::is_budget_exhausted) {
                return;
            }
            if let Err(e) = self.dir.write_new(&transcript_rel(epoch, batch, &tr.sample_id), &json(tr)) {
                *write_error.lock().unwrap_or_else(|p| p.into_inner()) = Some(e.to_string());
            }
        };
        let actor = Actor::new(self.gateway, self.cfg.sampling(&t.models.actor));
        let n = members.len();
        if !todo.is_empty() {
            let (transcripts, errors) =
                match actor.collect_batch_with(current, &todo, self.fg.as_ref(), t.max_rounds, t.parallelism, &on_done) {
                    Ok(out) => (out.transcripts, out.errors),
                    Err(e) => (Vec::new(), e.0),
                };
            if errors.iter().any(EpisodeError::is_budget_exhausted) {
                return Err((BatchFailure::Budget, 0));
            }
            if let Some(msg) = write_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
                return Err((BatchFailure::Skip(msg), n));
            }
            for tr in transcripts {
                done.insert(tr.sample_id.clone(), tr);
            }
        }
        let usable: Vec<Transcript> = members
            .iter()
            .filter_map(|s| done.get(&s.id))
            .filter(|tr| tr.terminal != Terminal::Error)
            .cloned()
            .collect();
        if usable.is_empty() {
            return Err((BatchFailure::Skip("every episode in the batch failed".into()), n));
        }

        // Summarize.
        let focus_rel = focus_rel(epoch, batch);
        let focus = match self.dir.read_json::<FocusPoint>(&focus_rel).map_err(|e| io(e, n))? {
            Some(f) => f,
            None => {
                let summarizer = Summarizer::new(self.gateway, self.cfg.sampling(&t.models.summarizer))
                    .with_budget(t.transcript_budget);
                match summarizer.summarize_batch(&usable, current, epoch, batch) {
                    Ok(f) => {
                        self.dir.write_new(&focus_rel, &json(&f)).map_err(|e| io(e, n))?;
                        f
                    }
                    Err(SummarizerError::Gateway(GatewayError::BudgetExhausted { .. })) => {
                        return Err((BatchFailure::Budget, n))
                    }
                    Err(e) => return Err((BatchFailure::Skip(format!("summarizer: {e}")), n)),
                }
            }
        };

        // Optimize.
        let opt_rel = optimizer_rel(epoch, batch);
        let record = match self.dir.read_json::<OptimizerRecord>(&opt_rel).map_err(|e| io(e, n))? {
            Some(r) => r,
            None => {
                let optimizer = Optimizer::new(self.gateway, self.cfg.sampling(&t.models.optimizer), &self.guards)
                    .with_repair_params(self.cfg.sampling(&t.models.repair))
                    .with_retries(t.optimizer_retries);
                let record = match optimizer.optimize(current, &focus) {
                    Ok(u) => OptimizerRecord {
                        raw_outputs: u.raw_outputs.clone(),
                        changed: u.changed,
                        placement: u.placement,
                        verdict: Some(u.verdict),
                        step_text: u.new_prompt.step_segment().map(|s| s.text().to_string()),
                        error: None,
                    },
                    Err(OptimizerError::Gateway(GatewayError::BudgetExhausted { .. })) => {
                        return Err((BatchFailure::Budget, n))
                    }
                    Err(e) => {
                        let raw_outputs = match &e {
                            OptimizerError::MissingFinalMarker { raw_outputs, .. }
                            | OptimizerError::GuardrailRejection { raw_outputs, .. } => raw_outputs.clone(),
                            _ => Vec::new(),
                        };
                        OptimizerRecord {
                            raw_outputs,
                            changed: false,
                            placement: None,
                            verdict: Some(Verdict::Rejected),
                            step_text: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                self.dir.write_new(&opt_rel, &json(&record)).map_err(|e| io(e, n))?;
                record
            }
        };
        if let Some(err) = record.error {
            return Err((BatchFailure::Skip(format!("optimizer: {err}")), n));
        }
        if !record.changed {
            return Ok(None);
        }

        let step_text = record.step_text.unwrap_or_default();
        let doc = current
            .replace_step_text(&step_text)
            .ok_or_else(|| (BatchFailure::Skip("prompt lost its step instructions".into()), n))?
            .with_parent(current);
        let rendered = doc.render();
        let version = VersionRecord {
            version: doc.version(),
            hash: sha256_hex(&rendered),
            parent_hash: Some(sha256_hex(&current.render())),
            placement: record.placement,
            multi_edit: record.placement == Some(StepEdit::ReplaceBlock),
            focus_case: Some(focus.case),
            focus_text: focus.text.clone(),
            epoch: Some(epoch),
            batch: Some(batch),
            verdict: record.verdict,
            injected_steps: false,
            step_text: Some(step_text),
        };
        self.dir
            .write_new(&version_rel(version.version, "txt"), &rendered)
            .map_err(|e| io(e, n))?;
        self.dir
            .write_new(&version_rel(version.version, "meta"), &json(&version))
            .map_err(|e| io(e, n))?;
        Ok(Some((version, doc)))
    }
}
