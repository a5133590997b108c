//! Scripted offline backend.
//!
//! Rules are tried in order; the first matching rule answers. A prompt that
//! matches no rule is a `ScriptMiss`, never a silent default.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, CompletionRequest, GatewayError};

/// Line prefix under which the candidate pool is rendered in ranking prompts.
pub const CANDIDATE_LINE_PREFIX: &str = "Candidate item set: ";

pub enum Pattern {
    Contains(String),
    /// Matched against the whole prompt.
    Anchored(Regex),
}

impl Pattern {
    pub fn contains(s: impl Into<String>) -> Self {
        Pattern::Contains(s.into())
    }

    pub fn anchored(template: &str) -> Result<Self, GatewayError> {
        Regex::new(&format!("(?s)^(?:{template})$"))
            .map(Pattern::Anchored)
            .map_err(|e| GatewayError::InvalidScript(e.to_string()))
    }

    fn matches(&self, prompt: &str) -> bool {
        match self {
            Pattern::Contains(s) => prompt.contains(s.as_str()),
            Pattern::Anchored(re) => re.is_match(prompt),
        }
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Contains(s) => write!(f, "contains({s:?})"),
            Pattern::Anchored(re) => write!(f, "anchored({:?})", re.as_str()),
        }
    }
}

type Responder = Arc<dyn Fn(&str) -> Result<String, GatewayError> + Send + Sync>;

#[derive(Clone)]
pub enum Reply {
    Text(String),
    /// A ranking answer placing the registered ground truth at this 1-based
    /// rank, other candidates in index order.
    GroundTruthAt(usize),
    Dynamic(Responder),
}

impl Reply {
    pub fn text(s: impl Into<String>) -> Self {
        Reply::Text(s.into())
    }

    pub fn dynamic(f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Reply::Dynamic(Arc::new(move |p| Ok(f(p))))
    }
}

pub struct Rule {
    pub pattern: Pattern,
    pub reply: Reply,
}

impl Rule {
    pub fn new(pattern: Pattern, reply: Reply) -> Self {
        Rule { pattern, reply }
    }
}

/// Serialized form of a mock script, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
    pub reply: ScriptReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Ranked { ground_truth_at: usize },
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GatewayError::InvalidScript(e.to_string()))
    }

    pub fn into_rules(self) -> Result<Vec<Rule>, GatewayError> {
        self.rules
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let pattern = match (r.contains, r.matches) {
                    (Some(s), None) => Pattern::Contains(s),
                    (None, Some(t)) => Pattern::anchored(&t)?,
                    _ => {
                        return Err(GatewayError::InvalidScript(format!(
                            "rule {i}: exactly one of `contains` or `matches` is required"
                        )))
                    }
                };
                let reply = match r.reply {
                    ScriptReply::Text(t) => Reply::Text(t),
                    ScriptReply::Ranked { ground_truth_at } if ground_truth_at >= 1 => {
                        Reply::GroundTruthAt(ground_truth_at)
                    }
                    ScriptReply::Ranked { .. } => {
                        return Err(GatewayError::InvalidScript(format!(
                            "rule {i}: ground_truth_at is 1-based"
                        )))
                    }
                };
                Ok(Rule::new(pattern, reply))
            })
            .collect()
    }
}

pub struct MockBackend {
    rules: Vec<Rule>,
    ground_truth: HashMap<String, (usize, usize)>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(rules: Vec<Rule>) -> Result<Self, GatewayError> {
        if rules.is_empty() {
            return Err(GatewayError::InvalidScript("script has no rules".into()));
        }
        Ok(MockBackend {
            rules,
            ground_truth: HashMap::new(),
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_script(script: MockScript) -> Result<Self, GatewayError> {
        Self::new(script.into_rules()?)
    }

    /// Registers the ground truth for a rendered candidate line
    /// (the text after `Candidate item set: `).
    pub fn register_ground_truth(
        &mut self,
        candidates: impl Into<String>,
        gt_index: usize,
        pool_size: usize,
    ) {
        self.ground_truth
            .insert(candidates.into(), (gt_index, pool_size));
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn answer(&self, prompt: &str) -> Result<String, GatewayError> {
        let rule = self
            .rules
            .iter()
            .find(|r| r.pattern.matches(prompt))
            .ok_or_else(|| GatewayError::ScriptMiss {
                excerpt: prompt.chars().take(120).collect(),
            })?;
        match &rule.reply {
            Reply::Text(t) => Ok(t.clone()),
            Reply::Dynamic(f) => f(prompt),
            Reply::GroundTruthAt(rank) => {
                let line = prompt
                    .lines()
                    .rev()
                    .find_map(|l| l.strip_prefix(CANDIDATE_LINE_PREFIX))
                    .ok_or_else(|| GatewayError::ScriptMiss {
                        excerpt: "ranking rule matched a prompt without a candidate set".into(),
                    })?;
                let &(gt, pool) =
                    self.ground_truth
                        .get(line)
                        .ok_or_else(|| GatewayError::ScriptMiss {
                            excerpt: format!("no ground truth registered for {}", excerpt(line)),
                        })?;
                Ok(ranking_with_ground_truth_at(gt, pool, *rank))
            }
        }
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(80).collect()
}

/// `[..]` answer with `gt` at 1-based `rank` (clamped to the pool), the
/// remaining indices ascending.
pub fn ranking_with_ground_truth_at(gt: usize, pool: usize, rank: usize) -> String {
    let mut order: Vec<usize> = (0..pool).filter(|&i| i != gt).collect();
    order.insert(rank.clamp(1, pool) - 1, gt);
    let body: Vec<String> = order.iter().map(|i| i.to_string()).collect();
    format!("[{}]", body.join(","))
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.answer(&request.prompt_text)
    }
}
