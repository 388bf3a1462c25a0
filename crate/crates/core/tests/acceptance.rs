//! Acceptance checks, one PASS/FAIL line each. Built with `harness = false`
//! so the lines are always printed; the process fails if any check fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use reprompt::actor::{Actor, TaskSample};
use reprompt::config::{FeedbackKind, RunConfig};
use reprompt::evaluator::{evaluate, ToyAdapter};
use reprompt::gateway::{Gateway, Role, Script, ScriptEntry, SamplingParams};
use reprompt::guardrails::{GuardConfig, Guardrails, Verdict, ViolationKind};
use reprompt::optimizer::{Optimizer, OptimizerError};
use reprompt::prompt::{SegmentKind, SegmentationConfig, PromptDocument};
use reprompt::summarizer::{FocusCase, FocusPoint};
use reprompt::templates::{CONCLUSION_MARKER, FINAL_PROMPT_MARKER};
use reprompt::toy::{generate_toy_samples, toy_check, ToyRule, ToySample};
use reprompt::trainer::{load_run, train};

/// Wall-clock limit for the golden run.
const GOLDEN_WALL_LIMIT: Duration = Duration::from_secs(5);
/// Adversarial optimizer cases in the protected-section suite.
const PROTECTED_CASES: usize = 20;
/// Optimizer retries allowed per update.
const OPTIMIZER_RETRIES: u32 = 3;
const IDENTITY_PROMPTS: usize = 50;
const BUDGET_SAMPLE_COUNTS: [usize; 5] = [1, 2, 5, 10, 25];
const BUDGET_EPISODES: u64 = 50;
const CONVERGENCE_PATIENCES: [u32; 3] = [1, 2, 3];
const TOY_EVAL_SAMPLES: usize = 20;
const TOY_PASS_BEFORE_MAX: f64 = 0.40;
const TOY_PASS_AFTER_MIN: f64 = 0.90;
const ORACLE_SAMPLES: usize = 1000;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = reprompt::cli::run(std::iter::once("reprompt").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err))
}

fn golden_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = stage_golden(tmp.path());
    let run = tmp.path().join("run");
    let start = Instant::now();
    let (code, output) = run_cli(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--prompt",
        tmp.path().join("prompt.txt").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let wall = start.elapsed();
    ensure(code == 0, format!("train exited {code}: {output}"))?;
    let final_prompt = std::fs::read_to_string(run.join("prompts/v2.txt")).map_err(|e| e.to_string())?;
    ensure(final_prompt == read_fixture("golden/final_prompt.txt"), "final prompt differs from the golden fixture")?;
    let expected = parse_manifest(&read_fixture("golden/manifest.txt"));
    let actual = manifest(&run);
    ensure(actual == expected, "run directory differs from the golden manifest")?;
    ensure(wall < GOLDEN_WALL_LIMIT, format!("took {wall:?}"))?;
    Ok(format!("{} files match, wall {:.0?}", actual.len(), wall))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Expect {
    Repaired,
    Violation(ViolationKind),
    NoMarker,
}

struct ProtectedCase {
    name: &'static str,
    expect: Expect,
    optimizer_output: String,
    /// Template-replacer reply, for cases that contain placeholders.
    repair_output: Option<String>,
}

fn pddl_cases() -> (String, Vec<ProtectedCase>) {
    let v0 = read_fixture("prompts/pddl_action_v0.txt");
    let v1 = read_fixture("prompts/pddl_action_v1.txt");
    let fin = |p: &str| format!("Analysis of the options.\n{FINAL_PROMPT_MARKER}\n{p}");
    let examples_start = v1.find("Here are two examples").unwrap();
    let examples_end = v1.find("Here is the task.").unwrap();
    let examples = &v1[examples_start..examples_end];
    let with_examples = |replacement: &str| format!("{}{replacement}{}", &v1[..examples_start], &v1[examples_end..]);
    let holder = |h: &str| with_examples(&format!("{h}\n\n"));
    let case = |name, kind, text: String| ProtectedCase {
        name,
        expect: Expect::Violation(kind),
        optimizer_output: fin(&text),
        repair_output: None,
    };
    let repaired = |name, expect, text: String, reply: String| ProtectedCase {
        name,
        expect,
        optimizer_output: fin(&text),
        repair_output: Some(reply),
    };
    let second_example = examples.find("Action: This action enables the robot to pick up").unwrap();
    let cases = vec![
        case("example predicate renamed", ViolationKind::ExamplesMutated, v1.replacen("(robot-holding ?x)\n)", "(robot-holds ?x)\n)", 1)),
        case("second example dropped", ViolationKind::ExamplesMutated, with_examples(&examples[..second_example])),
        case("example indentation changed", ViolationKind::ExamplesMutated, with_examples(&examples.replace("    (", "  ("))),
        case("examples elided with ellipsis", ViolationKind::ExamplesMutated, with_examples("Here are two examples from the classical BlocksWorld domain for demonstrating the output format.\n\n[...]\n\n")),
        case("format keyword lowercased", ViolationKind::FormatMutated, v1.replacen("\"Preconditions:\"", "\"preconditions:\"", 1)),
        case("example keyword lowercased", ViolationKind::ExamplesMutated, v1.replace("Preconditions:\n", "preconditions:\n")),
        case("keyword lowercased everywhere", ViolationKind::RequiredTokenMissing, v1.replace("Preconditions:", "preconditions:")),
        case("format requirement reworded", ViolationKind::FormatMutated, v1.replace("in this order, exactly as", "in any order, roughly as")),
        case("format requirement deleted", ViolationKind::FormatMutated, {
            let a = v1.find("Your response should").unwrap();
            let b = v1[a..].find("\n\n").unwrap() + a + 2;
            format!("{}{}", &v1[..a], &v1[b..])
        }),
        repaired("original-prompt placeholder", Expect::Repaired, holder("<Examples from the original prompt>"), v1.clone()),
        repaired("prompt-start placeholder", Expect::Repaired, holder("<Original Prompt Start>"), v1.clone()),
        repaired("angle-bracket placeholder", Expect::Repaired, holder("⟨ Original Prompt Start ⟩"), v1.clone()),
        repaired("braced example placeholder", Expect::Repaired, holder("{Example content}"), v1.clone()),
        repaired("bare examples placeholder", Expect::Repaired, holder("<Examples>"), v1.clone()),
        repaired("placeholder left by repair", Expect::Violation(ViolationKind::PlaceholderFound), holder("<Examples>"), holder("<Examples>")),
        repaired("repair drops the examples", Expect::Violation(ViolationKind::PlaceholderFound), holder("{Example content}"), with_examples("")),
        repaired("repair mutates the examples", Expect::Violation(ViolationKind::PlaceholderFound), holder("<Examples from the original prompt>"), v1.replace("(block-clear ?x)", "(clear ?x)")),
        ProtectedCase {
            name: "final marker missing",
            expect: Expect::NoMarker,
            optimizer_output: format!("Here is my improved prompt:\n{v1}"),
            repair_output: None,
        },
        case("prompt truncated after the steps", ViolationKind::RequiredTokenMissing, v1[..v1.find("Your response should").unwrap()].to_string()),
        case("task section changed", ViolationKind::OtherSegmentMutated, v1.replace("Action: {action_desc}", "Action to define: {action_desc}")),
    ];
    (v0, cases)
}

fn protected_suite() -> Outcome {
    let (v0_text, cases) = pddl_cases();
    ensure(cases.len() == PROTECTED_CASES, format!("{} cases", cases.len()))?;
    let seg = SegmentationConfig::default().compile().unwrap();
    let v0 = seg.parse(&v0_text).map_err(|e| e.to_string())?;
    let guards = Guardrails::new(seg.clone(), &GuardConfig::default(), vec!["Preconditions:".into()]).unwrap();
    let protected_text = |doc: &PromptDocument| -> Vec<String> {
        doc.segments()
            .iter()
            .filter(|s| matches!(s.kind(), SegmentKind::Examples | SegmentKind::FormatRequirements))
            .map(|s| s.text().to_string())
            .collect()
    };
    let focus = FocusPoint {
        case: FocusCase::FailureReason,
        text: "Preconditions that follow from the domain are missed.".into(),
        raw_output: String::new(),
        epoch: 0,
        batch_index: 0,
    };
    let (mut repaired, mut rejected) = (0, 0);
    for c in &cases {
        let mut entries = vec![ScriptEntry::new(["You are a prompt optimizer"], c.optimizer_output.clone())];
        if let Some(reply) = &c.repair_output {
            entries.push(ScriptEntry::new(["You are a template replacer"], reply.clone()));
        }
        let gw = Gateway::scripted(Script::new(entries).unwrap());
        let opt = Optimizer::new(&gw, SamplingParams::new("m"), &guards).with_retries(OPTIMIZER_RETRIES);
        match opt.optimize(&v0, &focus) {
            Ok(update) => {
                ensure(c.expect == Expect::Repaired, format!("{}: expected {:?}, got {:?}", c.name, c.expect, update.verdict))?;
                ensure(update.verdict == Verdict::Repaired, format!("{}: verdict {:?}", c.name, update.verdict))?;
                ensure(
                    protected_text(&update.new_prompt) == protected_text(&v0),
                    format!("{}: protected segments changed", c.name),
                )?;
                ensure(update.raw_outputs.len() as u32 <= OPTIMIZER_RETRIES + 1, format!("{}: too many attempts", c.name))?;
                repaired += 1;
            }
            Err(OptimizerError::GuardrailRejection { attempts, report, .. }) => {
                let Expect::Violation(kind) = c.expect else {
                    return Err(format!("{}: expected {:?}, rejected with {}", c.name, c.expect, report.describe()));
                };
                ensure(report.has(kind), format!("{}: no {kind:?} in {}", c.name, report.describe()))?;
                ensure(attempts == OPTIMIZER_RETRIES + 1, format!("{}: {attempts} attempts", c.name))?;
                rejected += 1;
            }
            Err(OptimizerError::MissingFinalMarker { attempts, .. }) => {
                ensure(c.expect == Expect::NoMarker, format!("{}: unexpected missing marker", c.name))?;
                ensure(attempts == OPTIMIZER_RETRIES + 1, format!("{}: {attempts} attempts", c.name))?;
                rejected += 1;
            }
            Err(e) => return Err(format!("{}: {e}", c.name)),
        }
    }
    Ok(format!("{} cases: {repaired} repaired, {rejected} rejected, 0 accepted", cases.len()))
}

const WORDS: [&str; 12] = [
    "plan", "check", "route", "budget", "careful", "each", "answer", "task", "option", "review", "list", "verify",
];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(3..10);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let mut s = words.join(" ");
    s.push('.');
    s
}

fn random_prompt(rng: &mut ChaCha8Rng) -> String {
    let mut p = format!("You are an assistant. {}\n\n", random_sentence(rng));
    p.push_str("Work through it step by step:\n");
    for i in 1..=rng.gen_range(1..6) {
        p.push_str(&format!("{i}. {}\n", random_sentence(rng)));
    }
    p.push('\n');
    if rng.gen_bool(0.5) {
        p.push_str(&format!("Your response should {}\n\n", random_sentence(rng)));
    }
    if rng.gen_bool(0.7) {
        p.push_str("***** Example *****\n");
        for _ in 0..rng.gen_range(1..4) {
            p.push_str(&format!("{}\n", random_sentence(rng)));
        }
        p.push_str("***** Example Ends *****\n\n");
    }
    p.push_str("Here is the task.\n{task}");
    if rng.gen_bool(0.5) {
        p.push('\n');
    }
    p
}

fn identity_on_no_signal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seg = SegmentationConfig::default().compile().unwrap();
    let guards = Guardrails::new(seg.clone(), &GuardConfig::default(), Vec::new()).unwrap();
    let gw = Gateway::scripted(Script::default());
    let opt = Optimizer::new(&gw, SamplingParams::new("m"), &guards);
    for i in 0..IDENTITY_PROMPTS {
        let text = random_prompt(&mut rng);
        let doc = seg.parse(&text).map_err(|e| e.to_string())?;
        ensure(doc.has_step_instructions(), format!("prompt {i} has no steps"))?;
        let focus = FocusPoint {
            case: FocusCase::NoGeneralReason,
            text: String::new(),
            raw_output: format!("{CONCLUSION_MARKER}There is no general reason."),
            epoch: 0,
            batch_index: 0,
        };
        let update = opt.optimize(&doc, &focus).map_err(|e| e.to_string())?;
        ensure(update.new_prompt.render() == text, format!("prompt {i} changed"))?;
        ensure(!update.changed, format!("prompt {i} marked changed"))?;
    }
    ensure(gw.calls() == 0, format!("{} gateway calls", gw.calls()))?;
    Ok(format!("{IDENTITY_PROMPTS} prompts unchanged, 0 gateway calls"))
}

/// Actor answers every trip carefully in one round; the summarizer always
/// reports a failure reason; the optimizer hands back the prompt unchanged.
fn identity_run_script(samples: &[ToySample], prompt: &str) -> Script {
    let mut entries: Vec<ScriptEntry> = samples
        .iter()
        .map(|s| {
            ScriptEntry::new([format!("Trip id: {}\n", s.id)], answer(s, &careful_plan(s), "Done."))
                .with_roles(&[Role::User])
        })
        .collect();
    entries.push(ScriptEntry::new(
        ["You are a summarizer"],
        format!("Analysis.\n{CONCLUSION_MARKER}{FOCUS_BUDGET}"),
    ));
    entries.push(ScriptEntry::new(
        ["You are a prompt optimizer"],
        format!("No change needed.\n{FINAL_PROMPT_MARKER}\n{prompt}"),
    ));
    Script::new(entries).unwrap()
}

fn identity_config(samples: usize, epochs: u32, patience: u32) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = samples.min(5);
    cfg.train.epochs = epochs;
    cfg.train.max_rounds = 1;
    cfg.train.convergence_patience = patience;
    cfg.train.feedback.kind = FeedbackKind::None;
    cfg
}

fn budget_exactness() -> Outcome {
    let prompt = toy_prompt();
    let mut seen = Vec::new();
    for n in BUDGET_SAMPLE_COUNTS {
        let samples = generate_toy_samples(3, n, "budget");
        let epochs = (BUDGET_EPISODES / n as u64) as u32;
        let mut cfg = identity_config(n, epochs, epochs + 1);
        cfg.train.episode_budget = Some(BUDGET_EPISODES);
        let script = identity_run_script(&samples, &prompt);
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = train(cfg, &task_samples(&samples), &prompt, None, &Gateway::scripted(script), &tmp.path().join("r"))
            .map_err(|e| format!("{n} samples: {e}"))?;
        ensure(
            out.state.episodes_run == BUDGET_EPISODES,
            format!("{n} samples x {epochs} epochs ran {} episodes", out.state.episodes_run),
        )?;
        ensure(out.state.prompt_versions.len() == 1, format!("{n} samples: prompt changed"))?;
        seen.push(format!("{n}x{epochs}"));
    }
    Ok(format!("{BUDGET_EPISODES} episodes for {}", seen.join(", ")))
}

fn convergence() -> Outcome {
    let prompt = toy_prompt();
    let samples = generate_toy_samples(5, 4, "conv");
    let mut seen = Vec::new();
    for patience in CONVERGENCE_PATIENCES {
        let cfg = identity_config(samples.len(), 10, patience);
        let script = identity_run_script(&samples, &prompt);
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = train(cfg, &task_samples(&samples), &prompt, None, &Gateway::scripted(script), &tmp.path().join("r"))
            .map_err(|e| e.to_string())?;
        ensure(out.state.converged, format!("patience {patience}: not converged"))?;
        ensure(out.state.epoch == patience, format!("patience {patience}: stopped after {} epochs", out.state.epoch))?;
        ensure(out.state.prompt_versions.len() == 1, format!("patience {patience}: {} versions", out.state.prompt_versions.len()))?;
        seen.push(format!("patience {patience} -> {} epochs", out.state.epoch));
    }
    Ok(seen.join(", "))
}

fn toy_improvement() -> Outcome {
    let v0 = toy_prompt();
    let train_set = train_samples();
    let mut cfg = RunConfig::parse(&read_fixture(GOLDEN_CONFIG)).map_err(|e| e.to_string())?;
    cfg.train.epochs = 1;
    cfg.train.episode_budget = None;
    let script = golden_script(&v0, &train_set);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trained = train(cfg, &task_samples(&train_set), &v0, None, &Gateway::scripted(script), &tmp.path().join("r"))
        .map_err(|e| e.to_string())?;
    ensure(trained.final_prompt.render().contains(BUDGET_STEP), "training did not add the budget step")?;

    let eval = eval_samples();
    ensure(eval.len() == TOY_EVAL_SAMPLES, "eval set size")?;
    let tasks: Vec<TaskSample> = task_samples(&eval);
    let seg = SegmentationConfig::default().compile().unwrap();
    let before_doc = seg.parse(&v0).map_err(|e| e.to_string())?;
    let rate = |doc: &PromptDocument| {
        let gw = Gateway::scripted(eval_script(&eval));
        let actor = Actor::new(&gw, SamplingParams::new("m"));
        evaluate(&actor, doc, &tasks, &ToyAdapter, None, 1, 1)
    };
    let before = rate(&before_doc);
    let after = rate(&trained.final_prompt);
    // Cross-check the reported passes against the brute-force oracle.
    for (report, blind) in [(&before, true), (&after, false)] {
        for (r, s) in report.per_sample.iter().zip(&eval) {
            let plan = if blind { blind_plan(s) } else { careful_plan(s) };
            let ok = if blind { !blind_over_budget(s) } else { careful_within_budget(s) };
            ensure(r.sample_id == s.id && r.pass == ok, format!("{}: report disagrees with oracle for plan {plan:?}", s.id))?;
        }
    }
    ensure(before.pass_rate <= TOY_PASS_BEFORE_MAX, format!("pass rate before {:.2}", before.pass_rate))?;
    ensure(after.pass_rate >= TOY_PASS_AFTER_MIN, format!("pass rate after {:.2}", after.pass_rate))?;
    Ok(format!("pass rate {:.2} -> {:.2} on {} held-out trips", before.pass_rate, after.pass_rate, eval.len()))
}

/// Independent rule evaluation for one plan: total cost and each move.
fn oracle(s: &ToySample, plan: &[usize]) -> (bool, Vec<ToyRule>) {
    let mut total = 0u32;
    let mut route_ok = true;
    for (d, &i) in plan.iter().enumerate() {
        total += s.options[d][i].cost;
        if d > 0 {
            let from = &s.options[d - 1][plan[d - 1]].city;
            let to = &s.options[d][i].city;
            if from != to && !s.routes.contains(&(from.clone(), to.clone())) {
                route_ok = false;
            }
        }
    }
    let mut violated = Vec::new();
    if total > s.budget {
        violated.push(ToyRule::Budget);
    }
    if !route_ok {
        violated.push(ToyRule::Route);
    }
    (violated.is_empty(), violated)
}

fn oracle_agreement() -> Outcome {
    let samples = generate_toy_samples(99, ORACLE_SAMPLES, "oracle");
    let mut plans = 0usize;
    let mut disagreements = 0usize;
    let mut feasible_samples = 0usize;
    for s in &samples {
        let mut any = false;
        // odometer over all option combinations
        let mut idx = vec![0usize; s.days];
        'plans: loop {
            let check = toy_check(&s.answer_for(&idx), s);
            let (pass, violated) = oracle(s, &idx);
            if check.pass != pass || check.violated != violated {
                disagreements += 1;
            }
            any |= pass;
            plans += 1;
            for d in (0..s.days).rev() {
                idx[d] += 1;
                if idx[d] < s.options[d].len() {
                    continue 'plans;
                }
                idx[d] = 0;
            }
            break;
        }
        feasible_samples += any as usize;
    }
    ensure(disagreements == 0, format!("{disagreements} disagreements over {plans} plans"))?;
    ensure(feasible_samples == ORACLE_SAMPLES, "a generated sample has no feasible plan")?;
    Ok(format!("0 disagreements over {plans} plans of {ORACLE_SAMPLES} samples"))
}

fn round_trip_and_lineage() -> Outcome {
    let seg = SegmentationConfig::default().compile().unwrap();
    let mut files: Vec<_> = std::fs::read_dir(fixtures().join("prompts"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    files.push(fixtures().join("golden/final_prompt.txt"));
    files.sort();
    for path in &files {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let doc = seg.parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(doc.render() == text, format!("{} does not round-trip", path.display()))?;
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = stage_golden(tmp.path());
    let run = tmp.path().join("run");
    let (code, output) = run_cli(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--prompt",
        tmp.path().join("prompt.txt").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    ensure(code == 0, output)?;
    let snap = load_run(&run).map_err(|e| e.to_string())?;
    // Replay each recorded step text onto its parent and hash independently.
    let mut parent = toy_prompt();
    for (record, _) in &snap.versions {
        let text = match &record.step_text {
            Some(step) if record.version > 0 => {
                let doc = seg.parse(&parent).map_err(|e| e.to_string())?;
                let old = doc.step_segment().ok_or("parent has no steps")?.text().to_string();
                parent.replacen(&old, step, 1)
            }
            _ => parent.clone(),
        };
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        ensure(hash == record.hash, format!("v{} hash mismatch after replay", record.version))?;
        ensure(record.version == 0 || record.placement.is_some(), format!("v{} has no placement", record.version))?;
        parent = text;
    }
    Ok(format!("{} fixture prompts round-trip, {} versions replayed", files.len(), snap.versions.len()))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("golden end-to-end run", golden_end_to_end),
        ("protected-section suite", protected_suite),
        ("identity on no signal", identity_on_no_signal),
        ("episode budget exactness", budget_exactness),
        ("convergence semantics", convergence),
        ("toy task improvement", toy_improvement),
        ("toy checker oracle agreement", oracle_agreement),
        ("round trip and lineage replay", round_trip_and_lineage),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
