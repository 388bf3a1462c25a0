//! Deterministic scripted backend.
//!
//! A script is a list of entries; each entry matches requests by ordered
//! substring anchors over the concatenated message contents, an optional
//! exact role sequence and optional forbidden substrings. A request must
//! match exactly one entry with uses left, otherwise it is rejected.

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError, Role, Usage};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("script parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("script entries {first} and {second} have identical match fingerprints")]
    AmbiguousScript { first: usize, second: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSpec {
    /// Substrings that must all occur, in this order.
    #[serde(default)]
    pub contains: Vec<String>,
    /// Substrings none of which may occur.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    /// Exact role sequence of the request, when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<Role>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: MatchSpec,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_uses: Option<u32>,
}

impl ScriptEntry {
    pub fn new<S: Into<String>>(contains: impl IntoIterator<Item = S>, response: impl Into<String>) -> Self {
        Self {
            matcher: MatchSpec {
                contains: contains.into_iter().map(Into::into).collect(),
                ..MatchSpec::default()
            },
            response: response.into(),
            max_uses: None,
        }
    }

    pub fn excluding<S: Into<String>>(mut self, excludes: impl IntoIterator<Item = S>) -> Self {
        self.matcher.excludes = excludes.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_roles(mut self, roles: &[Role]) -> Self {
        self.matcher.roles = Some(roles.to_vec());
        self
    }

    pub fn with_max_uses(mut self, n: u32) -> Self {
        self.max_uses = Some(n);
        self
    }

    pub fn matches(&self, request: &ChatRequest) -> bool {
        if let Some(roles) = &self.matcher.roles {
            if roles.len() != request.messages.len()
                || roles.iter().zip(&request.messages).any(|(r, m)| *r != m.role)
            {
                return false;
            }
        }
        let haystack = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if self.matcher.excludes.iter().any(|x| haystack.contains(x.as_str())) {
            return false;
        }
        let mut rest = haystack.as_str();
        for needle in &self.matcher.contains {
            match rest.find(needle.as_str()) {
                Some(pos) => rest = &rest[pos + needle.len()..],
                None => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default, rename = "entry")]
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ScriptError> {
        let script = Self { entries };
        script.check_fingerprints()?;
        Ok(script)
    }

    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let script: Script = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            ScriptError::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        script.check_fingerprints()?;
        Ok(script)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }

    fn check_fingerprints(&self) -> Result<(), ScriptError> {
        for (i, a) in self.entries.iter().enumerate() {
            for (j, b) in self.entries.iter().enumerate().skip(i + 1) {
                if a.matcher == b.matcher {
                    return Err(ScriptError::AmbiguousScript {
                        first: i + 1,
                        second: j + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Reads a script file, keeping entries in file order.
pub fn load_script(path: impl AsRef<Path>) -> Result<Script, ScriptError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Script::parse(&text)
}

pub struct ScriptedBackend {
    script: Script,
    used: Vec<AtomicU32>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let used = script.entries.iter().map(|_| AtomicU32::new(0)).collect();
        Self { script, used }
    }

    /// How many times each entry has answered, in script order.
    pub fn use_counts(&self) -> Vec<u32> {
        self.used.iter().map(|u| u.load(Ordering::SeqCst)).collect()
    }

    fn has_uses_left(&self, i: usize) -> bool {
        match self.script.entries[i].max_uses {
            Some(max) => self.used[i].load(Ordering::SeqCst) < max,
            None => true,
        }
    }
}

fn preview(text: &str) -> String {
    const MAX: usize = 120;
    let tail: String = text.chars().rev().take(MAX).collect::<Vec<_>>().into_iter().rev().collect();
    tail.replace('\n', "\\n")
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let hits: Vec<usize> = (0..self.script.entries.len())
            .filter(|&i| self.has_uses_left(i) && self.script.entries[i].matches(request))
            .collect();
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let idx = match hits[..] {
            [] => {
                return Err(GatewayError::Rejected(format!(
                    "unscripted request (last message ends with \"{}\")",
                    preview(last)
                )))
            }
            [i] => i,
            _ => {
                return Err(GatewayError::Rejected(format!(
                    "ambiguous script match: entries {:?}",
                    hits.iter().map(|i| i + 1).collect::<Vec<_>>()
                )))
            }
        };
        let entry = &self.script.entries[idx];
        let claimed = self.used[idx].fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| match entry.max_uses {
            Some(max) if n >= max => None,
            _ => Some(n + 1),
        });
        if claimed.is_err() {
            return Err(GatewayError::Rejected("unscripted request (entry uses exhausted)".into()));
        }
        Ok(ChatResponse {
            content: entry.response.clone(),
            finish_reason: FinishReason::Stop,
            usage: Usage {
                prompt_units: request.messages.iter().map(|m| m.content.chars().count() as u64).sum(),
                output_units: entry.response.chars().count() as u64,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Gateway};

    fn req(msgs: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new("m", msgs)
    }

    #[test]
    fn empty_script_rejects_everything() {
        let script = Script::parse("").unwrap();
        assert!(script.entries.is_empty());
        let gw = Gateway::scripted(script);
        let err = gw.complete(&req(vec![ChatMessage::user("hello")])).unwrap_err();
        assert!(matches!(err, GatewayError::Rejected(ref d) if d.contains("unscripted request")));
    }

    #[test]
    fn file_format_round_trip_and_order() {
        let text = r#"
[[entry]]
response = "first"
[entry.match]
contains = ["alpha", "beta"]
roles = ["system", "user"]

[[entry]]
response = """
multi
line"""
max_uses = 2
[entry.match]
contains = ["gamma"]
excludes = ["delta"]
"#;
        let s = Script::parse(text).unwrap();
        assert_eq!(s.entries.len(), 2);
        assert_eq!(s.entries[0].response, "first");
        assert_eq!(s.entries[1].max_uses, Some(2));
        assert_eq!(Script::parse(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn duplicate_fingerprints_are_ambiguous() {
        let text = "[[entry]]\nresponse = \"a\"\n[entry.match]\ncontains = [\"x\"]\n\n[[entry]]\nresponse = \"b\"\n[entry.match]\ncontains = [\"x\"]\n";
        assert!(matches!(
            Script::parse(text),
            Err(ScriptError::AmbiguousScript { first: 1, second: 2 })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "[[entry]]\nresponse = \"a\"\n[entry.match]\ncontains = [\"x\"\n";
        match Script::parse(text) {
            Err(ScriptError::Parse { line, .. }) => assert!(line >= 4, "line {line}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ordered_contains_roles_and_excludes() {
        let e = ScriptEntry::new(["one", "two"], "r").with_roles(&[Role::User]);
        assert!(e.matches(&req(vec![ChatMessage::user("one then two")])));
        assert!(!e.matches(&req(vec![ChatMessage::user("two then one")])));
        assert!(!e.matches(&req(vec![ChatMessage::system("one two")])));
        let e = ScriptEntry::new(["one"], "r").excluding(["bad"]);
        assert!(!e.matches(&req(vec![ChatMessage::user("one bad")])));
    }

    #[test]
    fn lookup_is_deterministic_and_counts_uses() {
        let script = Script::new(vec![
            ScriptEntry::new(["ping"], "pong"),
            ScriptEntry::new(["once"], "only once").with_max_uses(1),
        ])
        .unwrap();
        let backend = ScriptedBackend::new(script);
        let r = req(vec![ChatMessage::user("ping")]);
        let a = backend.send(&r).unwrap();
        let b = backend.send(&r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content, "pong");
        assert_eq!(a.finish_reason, FinishReason::Stop);
        let once = req(vec![ChatMessage::user("once")]);
        assert!(backend.send(&once).is_ok());
        assert!(backend.send(&once).is_err());
        assert_eq!(backend.use_counts(), [2, 1]);
    }

    #[test]
    fn two_live_matches_are_rejected() {
        let script = Script::new(vec![
            ScriptEntry::new(["a"], "1"),
            ScriptEntry::new(["b"], "2"),
        ])
        .unwrap();
        let backend = ScriptedBackend::new(script);
        let err = backend.send(&req(vec![ChatMessage::user("a b")])).unwrap_err();
        assert!(matches!(err, GatewayError::Rejected(ref d) if d.contains("ambiguous")));
    }
}
