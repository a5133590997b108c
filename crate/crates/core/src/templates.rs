//! Prompt assets shipped with the crate, with `{placeholder}` substitution.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` needs a value for {{{name}}}")]
    MissingValue {
        template: &'static str,
        name: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    raw: &'static str,
}

macro_rules! asset {
    ($name:literal) => {
        Template {
            name: $name,
            raw: include_str!(concat!("../templates/", $name, ".txt")),
        }
    };
}

/// Zero-based ranking task description.
pub const TASK_DESCRIPTION: Template = asset!("task_description");
/// Session / candidate input block: `{session}`, `{candidates}`.
pub const INPUT_DATA: Template = asset!("input_data");
/// Failure-reason request: `{prompt}`, `{error_case}`, `{N_r}`.
pub const INFER_REASONS: Template = asset!("infer_reasons");
/// Prompt refinement request: `{prompt}`, `{error_case}`, `{reasons}`.
pub const REFINE_PROMPT: Template = asset!("refine_prompt");
/// Paraphrase request: `{refined_prompt}`.
pub const AUGMENT_PROMPT: Template = asset!("augment_prompt");
/// Meta-prompt asking for ten hybrid prompts.
pub const COMBINE_PROMPTS: Template = asset!("combine_prompts");
pub const EXPERT_ML: Template = asset!("expert_ml");
pub const EXPERT_GAMES: Template = asset!("expert_games");
pub const EXPERT_BUNDLE: Template = asset!("expert_bundle");
/// Fused prompt selected on the three-domain validation set.
pub const BEST_FUSED: Template = asset!("best_fused");

pub const ALL: [Template; 10] = [
    TASK_DESCRIPTION,
    INPUT_DATA,
    INFER_REASONS,
    REFINE_PROMPT,
    AUGMENT_PROMPT,
    COMBINE_PROMPTS,
    EXPERT_ML,
    EXPERT_GAMES,
    EXPERT_BUNDLE,
    BEST_FUSED,
];

/// Default domain experts used for fusion.
pub const DEFAULT_EXPERTS: [Template; 3] = [EXPERT_ML, EXPERT_GAMES, EXPERT_BUNDLE];

fn placeholder_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

impl Template {
    pub fn by_name(name: &str) -> Option<Template> {
        ALL.into_iter().find(|t| t.name == name)
    }

    /// Asset text without the file's trailing newline.
    pub fn text(&self) -> &'static str {
        self.raw.strip_suffix('\n').unwrap_or(self.raw)
    }

    pub fn placeholders(&self) -> BTreeSet<&'static str> {
        placeholder_pattern()
            .captures_iter(self.text())
            .map(|c| c.get(1).expect("group").as_str())
            .collect()
    }

    /// Substitutes every placeholder in a single pass; substituted values are
    /// never rescanned.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let text = self.text();
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for caps in placeholder_pattern().captures_iter(text) {
            let whole = caps.get(0).expect("match");
            let name = &caps[1];
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue {
                    template: self.name,
                    name: name.to_string(),
                })?;
            out.push_str(&text[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&text[last..]);
        Ok(out)
    }
}

/// Output-format sentence every generated ranking prompt must end with.
pub fn mandatory_suffix(pool_size: usize) -> String {
    format!(
        "Your answer should only be \"[8,1,6,...]\", give me only indices in list format, nothing else, \
         no explanations no nothing, only and only list of indices and remember to rank all {pool_size} \
         candidates in the candidate_set (I want all indices from 0 to {}).",
        pool_size.saturating_sub(1)
    )
}

/// Whether `prompt` already demands a full index ranking of the pool.
pub fn has_mandatory_suffix(prompt: &str, pool_size: usize) -> bool {
    prompt.contains(&format!("rank all {pool_size} candidates"))
        && prompt.contains(&format!("from 0 to {}", pool_size.saturating_sub(1)))
}

/// Appends the mandatory suffix when it is missing.
pub fn enforce_suffix(prompt: &str, pool_size: usize) -> String {
    let trimmed = prompt.trim_end();
    if has_mandatory_suffix(trimmed, pool_size) {
        trimmed.to_string()
    } else {
        format!("{trimmed}\n{}", mandatory_suffix(pool_size))
    }
}
