//! Built-in toy planning task.
//!
//! A trip has one to three days; each day offers a few activities with a
//! cost and a city. A plan picks one activity per day and passes when its
//! total cost fits the budget and every change of city between consecutive
//! days is an allowed move. Staying in the same city is always allowed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::actor::TaskSample;

/// Slot the trip description is filled into.
pub const TRIP_SLOT: &str = "trip";
/// Literal line that precedes the plan in an answer.
pub const PLAN_MARKER: &str = "PLAN:";

const CITIES: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyOption {
    pub id: String,
    pub cost: u32,
    pub city: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySample {
    pub id: String,
    pub days: usize,
    pub budget: u32,
    /// `options[d]` are the choices for day `d + 1`.
    pub options: Vec<Vec<ToyOption>>,
    /// Allowed moves between two different cities.
    pub routes: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToyRule {
    Budget,
    Route,
}

impl ToyRule {
    pub fn id(self) -> &'static str {
        match self {
            ToyRule::Budget => "budget",
            ToyRule::Route => "route",
        }
    }
}

/// One chosen activity id per day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyAnswer {
    pub activities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCheck {
    pub pass: bool,
    pub violated: Vec<ToyRule>,
    pub total_cost: u32,
    /// Messages in rule order, one per violated rule.
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable answer: {0}")]
pub struct UnparseableAnswer(pub String);

impl ToySample {
    pub fn move_allowed(&self, from: &str, to: &str) -> bool {
        from == to || self.routes.iter().any(|(a, b)| a == from && b == to)
    }

    fn option(&self, day: usize, id: &str) -> Option<&ToyOption> {
        self.options.get(day)?.iter().find(|o| o.id == id)
    }

    /// Human-readable task text filled into the prompt's `{trip}` slot.
    pub fn describe(&self) -> String {
        let routes = if self.routes.is_empty() {
            "none".to_string()
        } else {
            self.routes
                .iter()
                .map(|(a, b)| format!("{a}->{b}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = format!(
            "Trip id: {}\nDays: {}\nBudget: {}\nAllowed moves between different cities: {} (staying in the same city is always allowed)\n",
            self.id, self.days, self.budget, routes
        );
        for (d, opts) in self.options.iter().enumerate() {
            let list = opts
                .iter()
                .map(|o| format!("{} (cost {}, city {})", o.id, o.cost, o.city))
                .collect::<Vec<_>>()
                .join("; ");
            out.push_str(&format!("Day {} options: {}\n", d + 1, list));
        }
        out
    }

    pub fn to_task_sample(&self) -> TaskSample {
        TaskSample {
            id: self.id.clone(),
            slot_values: BTreeMap::from([(TRIP_SLOT.to_string(), self.describe())]),
            toy: Some(self.clone()),
        }
    }

    /// Every plan, as option indices per day, in lexicographic order.
    pub fn enumerate_plans(&self) -> Vec<Vec<usize>> {
        let mut plans = vec![Vec::new()];
        for opts in &self.options {
            plans = plans
                .into_iter()
                .flat_map(|p| {
                    (0..opts.len()).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        plans
    }

    pub fn answer_for(&self, plan: &[usize]) -> ToyAnswer {
        ToyAnswer {
            activities: plan
                .iter()
                .enumerate()
                .map(|(d, &i)| self.options[d][i].id.clone())
                .collect(),
        }
    }

    pub fn feasible_plans(&self) -> Vec<Vec<usize>> {
        self.enumerate_plans()
            .into_iter()
            .filter(|p| toy_check(&self.answer_for(p), self).pass)
            .collect()
    }
}

impl ToyAnswer {
    /// Answer text in the toy grammar.
    pub fn render(&self) -> String {
        let mut out = format!("{PLAN_MARKER}\n");
        for (d, id) in self.activities.iter().enumerate() {
            out.push_str(&format!("Day {}: {}\n", d + 1, id));
        }
        out
    }
}

fn day_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*Day\s+(\d+)\s*:\s*(\S+)\s*$").expect("static regex"))
}

/// Reads the plan that follows the last `PLAN:` marker and checks that it
/// names exactly one existing activity per day of `sample`.
pub fn parse_toy_answer(text: &str, sample: &ToySample) -> Result<ToyAnswer, UnparseableAnswer> {
    let pos = text
        .rfind(PLAN_MARKER)
        .ok_or_else(|| UnparseableAnswer(format!("missing \"{PLAN_MARKER}\" line")))?;
    let after = &text[pos + PLAN_MARKER.len()..];
    let mut lines = after.lines();
    let rest_of_marker_line = lines.next().unwrap_or("").trim();
    if !rest_of_marker_line.is_empty() && !day_line().is_match(rest_of_marker_line) {
        return Err(UnparseableAnswer(format!(
            "unexpected text after \"{PLAN_MARKER}\": {rest_of_marker_line}"
        )));
    }
    let mut activities = Vec::new();
    let candidates = std::iter::once(rest_of_marker_line).filter(|l| !l.is_empty()).chain(lines);
    for line in candidates {
        if line.trim().is_empty() {
            if activities.is_empty() {
                continue;
            }
            break;
        }
        let Some(caps) = day_line().captures(line) else { break };
        let day: usize = caps[1]
            .parse()
            .map_err(|_| UnparseableAnswer(format!("bad day number in {line:?}")))?;
        if day != activities.len() + 1 {
            return Err(UnparseableAnswer(format!(
                "expected Day {} but found Day {day}",
                activities.len() + 1
            )));
        }
        activities.push(caps[2].to_string());
    }
    if activities.len() != sample.days {
        return Err(UnparseableAnswer(format!(
            "plan has {} days, the trip has {}",
            activities.len(),
            sample.days
        )));
    }
    for (d, id) in activities.iter().enumerate() {
        if sample.option(d, id).is_none() {
            return Err(UnparseableAnswer(format!("day {} has no activity {id}", d + 1)));
        }
    }
    Ok(ToyAnswer { activities })
}

/// Budget and route rules for a structured answer.
pub fn toy_check(answer: &ToyAnswer, sample: &ToySample) -> ToyCheck {
    let chosen: Vec<&ToyOption> = answer
        .activities
        .iter()
        .enumerate()
        .filter_map(|(d, id)| sample.option(d, id))
        .collect();
    let total_cost: u32 = chosen.iter().map(|o| o.cost).sum();

    let mut violated = Vec::new();
    let mut messages = Vec::new();
    if total_cost > sample.budget {
        violated.push(ToyRule::Budget);
        messages.push(format!("budget exceeded by {}", total_cost - sample.budget));
    }
    if let Some((d, w)) = chosen
        .windows(2)
        .enumerate()
        .find(|(_, w)| !sample.move_allowed(&w[0].city, &w[1].city))
    {
        violated.push(ToyRule::Route);
        messages.push(format!(
            "route not allowed: day {} is in city {} and day {} is in city {}",
            d + 1,
            w[0].city,
            d + 2,
            w[1].city
        ));
    }
    ToyCheck {
        pass: violated.is_empty(),
        violated,
        total_cost,
        messages,
    }
}

/// Seed-deterministic toy samples; every generated sample has at least one
/// feasible plan.
pub fn generate_toy_samples(seed: u64, count: usize, id_prefix: &str) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|n| generate_one(&mut rng, format!("{id_prefix}-{:02}", n + 1)))
        .collect()
}

fn generate_one(rng: &mut ChaCha8Rng, id: String) -> ToySample {
    let days = rng.gen_range(1..=3usize);
    let path: Vec<&str> = (0..days).map(|_| *CITIES.choose(rng).expect("cities")).collect();

    let mut routes = BTreeSet::new();
    for w in path.windows(2) {
        if w[0] != w[1] {
            routes.insert((w[0].to_string(), w[1].to_string()));
        }
    }
    for a in CITIES {
        for b in CITIES {
            if a != b && rng.gen_bool(0.3) {
                routes.insert((a.to_string(), b.to_string()));
            }
        }
    }

    let mut options = Vec::with_capacity(days);
    let mut planned_cost = 0;
    for (d, city) in path.iter().enumerate() {
        let n = rng.gen_range(2..=5usize);
        let planned = rng.gen_range(0..n);
        let opts = (0..n)
            .map(|i| {
                let cost = 5 * rng.gen_range(2..=16u32);
                let city = if i == planned {
                    city.to_string()
                } else {
                    CITIES.choose(rng).expect("cities").to_string()
                };
                if i == planned {
                    planned_cost += cost;
                }
                ToyOption {
                    id: format!("d{}{}", d + 1, (b'a' + i as u8) as char),
                    cost,
                    city,
                }
            })
            .collect();
        options.push(opts);
    }
    let budget = planned_cost + 5 * rng.gen_range(0..=2u32);

    ToySample {
        id,
        days,
        budget,
        options,
        routes: routes.into_iter().collect(),
    }
}
