//! Shared helpers for the integration tests: fixture paths, the toy prompt
//! edits and the scripted model behaviour used by the golden run.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use reprompt::actor::TaskSample;
use reprompt::gateway::{Role, Script, ScriptEntry};
use reprompt::templates::{CONCLUSION_MARKER, FINAL_PROMPT_MARKER};
use reprompt::toy::{generate_toy_samples, ToyAnswer, ToySample};

pub const BUDGET_STEP: &str =
    "Add up the costs of the chosen activities and check that the total is within the budget.";
pub const BUDGET_ANCHOR: &str = "Add up the costs";
pub const ROUTE_STEP_OLD: &str =
    "Pick one activity per day so that every change of city is an allowed move.";
pub const ROUTE_STEP_NEW: &str = "Pick one activity per day so that every change of city is an allowed move, and check every move again after changing any activity.";
pub const ROUTE_ANCHOR: &str = "check every move again";

pub const FOCUS_BUDGET: &str = "The main reason for failure is that the total cost of the chosen activities is never compared with the budget before answering.";
pub const FOCUS_ROUTE: &str = "A helpful thought is to focus on the moves between consecutive days again once the costs are settled.";

pub const TRAIN_SEED: u64 = 11;
pub const EVAL_SEED: u64 = 2024;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn read_fixture(rel: &str) -> String {
    let path = fixtures().join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn toy_prompt() -> String {
    read_fixture("prompts/toy_trip_planner.txt")
}

/// Renumbers the `N. ` items of a plain numbered list.
fn numbered(items: &[&str]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}\n", i + 1))
        .collect()
}

fn toy_steps(v0: &str) -> (usize, usize) {
    let start = v0.find("1. Read the options").expect("toy prompt has numbered steps");
    let end = v0[start..].find("\n\n").map(|e| start + e + 1).expect("steps end with a blank line");
    (start, end)
}

fn with_steps(v0: &str, items: &[&str]) -> String {
    let (start, end) = toy_steps(v0);
    format!("{}{}{}", &v0[..start], numbered(items), &v0[end..])
}

/// The toy prompt with the budget check inserted before the last step.
pub fn prompt_v1(v0: &str) -> String {
    with_steps(
        v0,
        &["Read the options for every day.", ROUTE_STEP_OLD, BUDGET_STEP, "Write the plan in the required format."],
    )
}

/// `prompt_v1` with the route step rewritten.
pub fn prompt_v2(v0: &str) -> String {
    with_steps(
        v0,
        &["Read the options for every day.", ROUTE_STEP_NEW, BUDGET_STEP, "Write the plan in the required format."],
    )
}

/// `text` with the example lines between the example markers replaced by a
/// placeholder.
pub fn with_examples_placeholder(text: &str) -> String {
    let open = "***** Example *****\n";
    let close = "***** Example Ends *****";
    let a = text.find(open).expect("examples open") + open.len();
    let b = text.find(close).expect("examples close");
    format!("{}<Examples from the original prompt>\n{}", &text[..a], &text[b..])
}

fn plan_cost(s: &ToySample, plan: &[usize]) -> u32 {
    plan.iter().enumerate().map(|(d, &i)| s.options[d][i].cost).sum()
}

fn route_valid(s: &ToySample, plan: &[usize]) -> bool {
    plan.windows(2).enumerate().all(|(d, w)| {
        let a = &s.options[d][w[0]].city;
        let b = &s.options[d + 1][w[1]].city;
        a == b || s.routes.iter().any(|(x, y)| x == a && y == b)
    })
}

/// All route-valid plans by nested enumeration over every day's options.
fn route_valid_plans(s: &ToySample) -> Vec<Vec<usize>> {
    let mut plans: Vec<Vec<usize>> = vec![vec![]];
    for day in &s.options {
        let mut next = Vec::new();
        for p in &plans {
            for i in 0..day.len() {
                let mut q = p.clone();
                q.push(i);
                next.push(q);
            }
        }
        plans = next;
    }
    plans.into_iter().filter(|p| route_valid(s, p)).collect()
}

/// What a budget-blind planner picks: the most expensive plan that keeps
/// to the allowed moves.
pub fn blind_plan(s: &ToySample) -> Vec<usize> {
    route_valid_plans(s)
        .into_iter()
        .rev()
        .max_by_key(|p| plan_cost(s, p))
        .expect("a route-valid plan exists")
}

/// The cheapest plan that keeps to the allowed moves.
pub fn careful_plan(s: &ToySample) -> Vec<usize> {
    route_valid_plans(s)
        .into_iter()
        .min_by_key(|p| plan_cost(s, p))
        .expect("a route-valid plan exists")
}

pub fn blind_over_budget(s: &ToySample) -> bool {
    plan_cost(s, &blind_plan(s)) > s.budget
}

pub fn careful_within_budget(s: &ToySample) -> bool {
    plan_cost(s, &careful_plan(s)) <= s.budget
}

pub fn answer(s: &ToySample, plan: &[usize], lead: &str) -> String {
    let activities = plan.iter().enumerate().map(|(d, &i)| s.options[d][i].id.clone()).collect();
    format!("{lead}\n{}", ToyAnswer { activities }.render())
}

/// The three training samples of the golden run: the first generated
/// samples on which the budget-blind plan breaks the budget.
pub fn train_samples() -> Vec<ToySample> {
    generate_toy_samples(TRAIN_SEED, 30, "toy-train")
        .into_iter()
        .filter(blind_over_budget)
        .take(3)
        .collect()
}

pub fn eval_samples() -> Vec<ToySample> {
    generate_toy_samples(EVAL_SEED, 20, "toy-eval")
}

pub fn task_samples(samples: &[ToySample]) -> Vec<TaskSample> {
    samples.iter().map(ToySample::to_task_sample).collect()
}

fn trip_anchor(s: &ToySample) -> String {
    format!("Trip id: {}\n", s.id)
}

/// Actor entries for one sample: budget-blind without the budget step,
/// a corrected answer after budget feedback, careful with the step.
fn actor_entries(s: &ToySample, with_feedback_round: bool) -> Vec<ScriptEntry> {
    let id = trip_anchor(s);
    let mut entries = vec![
        ScriptEntry::new([id.clone()], answer(s, &blind_plan(s), "I picked the activities I like best."))
            .excluding([BUDGET_ANCHOR])
            .with_roles(&[Role::User]),
        ScriptEntry::new(
            [BUDGET_ANCHOR.to_string(), id.clone()],
            answer(s, &careful_plan(s), "I added up the costs and kept the total within the budget."),
        )
        .with_roles(&[Role::User]),
    ];
    if with_feedback_round {
        entries.push(
            ScriptEntry::new(
                [id, "budget exceeded".to_string()],
                answer(s, &careful_plan(s), "Switching to cheaper activities."),
            )
            .with_roles(&[Role::User, Role::Assistant, Role::User]),
        );
    }
    entries
}

fn optimizer_output(analysis: &str, prompt: &str) -> String {
    format!("{analysis}\n\n{FINAL_PROMPT_MARKER}\n{prompt}")
}

/// Script of the golden run: two epochs of one batch each over
/// `train_samples()`, starting from the toy prompt.
pub fn golden_script(v0: &str, samples: &[ToySample]) -> Script {
    let v1 = prompt_v1(v0);
    let v2 = prompt_v2(v0);
    let mut entries: Vec<ScriptEntry> = samples.iter().flat_map(|s| actor_entries(s, true)).collect();
    entries.push(
        ScriptEntry::new(
            ["You are a summarizer"],
            format!("Every episode first broke the budget and was only fixed after feedback.\n{CONCLUSION_MARKER}{FOCUS_BUDGET}"),
        )
        .excluding([BUDGET_ANCHOR]),
    );
    entries.push(
        ScriptEntry::new(
            ["You are a summarizer", BUDGET_ANCHOR],
            format!("All episodes passed in the first round.\n{CONCLUSION_MARKER}{FOCUS_ROUTE}"),
        ),
    );
    entries.push(
        ScriptEntry::new(
            ["You are a prompt optimizer"],
            optimizer_output(
                "1. Options: check the budget at the end, or keep a running total.\n2. A final total check is the most direct fix.\n3. It belongs right before the plan is written.",
                &with_examples_placeholder(&v1),
            ),
        )
        .excluding([BUDGET_ANCHOR]),
    );
    entries.push(ScriptEntry::new(
        ["You are a prompt optimizer", BUDGET_ANCHOR],
        optimizer_output(
            "1. Options: re-check moves after each change.\n2. This extends the route step.\n3. It replaces step 2.",
            &v2,
        ),
    ));
    entries.push(ScriptEntry::new(["You are a template replacer"], v1));
    Script::new(entries).expect("golden script is unambiguous")
}

/// Script for held-out evaluation: the same actor behaviour, single round.
pub fn eval_script(samples: &[ToySample]) -> Script {
    Script::new(samples.iter().flat_map(|s| actor_entries(s, false)).collect()).expect("eval script is unambiguous")
}

pub const GOLDEN_CONFIG: &str = "golden/run.toml";

/// Every file below `root` with its sha256, sorted by relative path.
pub fn manifest(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                let text = std::fs::read_to_string(&path).unwrap();
                out.insert(rel, reprompt::trainer::sha256_hex(&text));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn render_manifest(m: &BTreeMap<String, String>) -> String {
    m.iter().map(|(path, hash)| format!("{hash}  {path}\n")).collect()
}

pub fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (hash, path) = l.split_once("  ").expect("manifest line is `hash  path`");
            (path.to_string(), hash.to_string())
        })
        .collect()
}

/// Copies the golden config, script and training set into `dir` and
/// returns the config path there.
pub fn stage_golden(dir: &Path) -> PathBuf {
    for name in ["run.toml", "script.toml", "train.json"] {
        std::fs::copy(fixtures().join("golden").join(name), dir.join(name)).unwrap();
    }
    std::fs::copy(fixtures().join("prompts/toy_trip_planner.txt"), dir.join("prompt.txt")).unwrap();
    dir.join("run.toml")
}
