//! Single LLM-backed steps of the optimization loop.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{OptimizeError, OptimizerConfig, RewardMetric};
use crate::dataset::{render_input, EvalInstance};
use crate::evaluator::{run_instance, EvalSettings, InstanceOutcome, MissPolicy, ParseOutcome};
use crate::gateway::{Gateway, GatewayError};
use crate::templates::{enforce_suffix, AUGMENT_PROMPT, INFER_REASONS, REFINE_PROMPT};

/// A recoverable failure of one LLM step; the loop skips the expansion.
#[derive(Debug, Error)]
pub enum StepError {
    #[error("no <START>...<END> segment in the response")]
    MarkerNotFound,
    #[error("empty response")]
    EmptyResponse,
    #[error("no reasons to refine with")]
    NoReasons,
    #[error(transparent)]
    Gateway(GatewayError),
}

impl From<GatewayError> for StepError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::EmptyResponse => StepError::EmptyResponse,
            other => StepError::Gateway(other),
        }
    }
}

impl StepError {
    /// Splits recoverable step failures from gateway failures that must abort.
    pub(crate) fn into_fatal(self) -> Result<StepError, OptimizeError> {
        match self {
            StepError::Gateway(e) => Err(OptimizeError::Gateway(e)),
            other => Ok(other),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scored {
    pub reward: f64,
    pub outcomes: Vec<InstanceOutcome>,
}

fn scoring_settings(config: &OptimizerConfig) -> EvalSettings {
    let mut ks = vec![1, config.pool_size];
    ks.dedup();
    EvalSettings {
        model: config.model.clone(),
        temperature: config.temperature,
        max_output: config.max_output,
        ks,
        miss_policy: MissPolicy::Zero,
    }
}

/// Mean reward of `prompt` over `batch`: NDCG@pool_size by default, so an
/// unparseable answer contributes 0.
pub fn score_prompt(
    gateway: &Gateway,
    prompt: &str,
    batch: &[EvalInstance],
    config: &OptimizerConfig,
) -> Result<Scored, OptimizeError> {
    if batch.is_empty() {
        return Err(OptimizeError::EmptyDataset);
    }
    let settings = scoring_settings(config);
    let outcomes = gateway
        .map_bounded(batch, |inst| run_instance(gateway, &settings, prompt, inst))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let per_instance = |o: &InstanceOutcome| {
        let k = match config.reward {
            RewardMetric::Ndcg => config.pool_size,
            RewardMetric::HitAt1 => 1,
        };
        let p = o
            .metrics
            .iter()
            .find(|p| p.k == k)
            .expect("scored at this cutoff");
        match config.reward {
            RewardMetric::Ndcg => p.ndcg,
            RewardMetric::HitAt1 => p.hr,
        }
    };
    let reward = outcomes.iter().map(per_instance).sum::<f64>() / outcomes.len() as f64;
    Ok(Scored { reward, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub instance: EvalInstance,
    pub prompt_id: String,
    pub observed: ParseOutcome,
    pub gt_rank: Option<usize>,
    pub response: String,
}

/// Outcomes ranking the ground truth below `threshold`, plus every parse
/// failure, worst first. Failures count as the worst possible rank.
pub fn collect_error_cases(
    prompt_id: &str,
    batch: &[EvalInstance],
    outcomes: &[InstanceOutcome],
    threshold: usize,
    limit: Option<usize>,
) -> Vec<ErrorCase> {
    let mut cases: Vec<ErrorCase> = batch
        .iter()
        .zip(outcomes)
        .filter(|(_, o)| match o.gt_rank {
            None => true,
            Some(r) => r > threshold,
        })
        .map(|(inst, o)| ErrorCase {
            instance: inst.clone(),
            prompt_id: prompt_id.to_string(),
            observed: o.parse.clone(),
            gt_rank: o.gt_rank,
            response: o.response.clone(),
        })
        .collect();
    cases.sort_by_key(|c| std::cmp::Reverse(c.gt_rank.unwrap_or(usize::MAX)));
    if let Some(n) = limit {
        cases.truncate(n);
    }
    cases
}

/// Text substituted for `{error_case}`: the input, the model's answer and
/// where the true next item ended up.
pub fn render_error_case(case: &ErrorCase) -> String {
    let gt = case.instance.ground_truth();
    let title = serde_json::to_string(&gt.title).expect("strings serialize");
    let answer = case.response.trim();
    let verdict = match (&case.observed, case.gt_rank) {
        (_, Some(rank)) => format!("ranked {rank} of {}", case.instance.pool_size()),
        (ParseOutcome::Failed { category, detail }, None) => {
            format!("not ranked, the answer could not be parsed ({category}: {detail})")
        }
        (ParseOutcome::Valid { .. }, None) => "not ranked".to_string(),
    };
    format!(
        "{}\nModel answer: {}\nGround-truth next item: {}:{} was {}",
        render_input(&case.instance),
        if answer.is_empty() { "<empty>" } else { answer },
        case.instance.ground_truth_index(),
        title,
        verdict
    )
}

fn wrapped_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"(?s)<START>(.*?)<END>").expect("valid regex"))
}

/// Every non-empty segment between `<START>` and `<END>`, trimmed.
pub fn extract_wrapped(text: &str) -> Vec<String> {
    wrapped_pattern()
        .captures_iter(text)
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn ask(
    gateway: &Gateway,
    config: &OptimizerConfig,
    text: String,
    tag: &str,
) -> Result<String, StepError> {
    let settings = scoring_settings(config);
    Ok(gateway.complete(&settings.request(text, tag.to_string()))?)
}

pub fn infer_reasons(
    gateway: &Gateway,
    config: &OptimizerConfig,
    prompt: &str,
    case: &ErrorCase,
) -> Result<Vec<String>, StepError> {
    let request = INFER_REASONS
        .render(&[
            ("prompt", prompt),
            ("error_case", &render_error_case(case)),
            ("N_r", &config.n_reasons.to_string()),
        ])
        .expect("all placeholders supplied");
    let response = ask(gateway, config, request, "reasons")?;
    let mut reasons = extract_wrapped(&response);
    if reasons.is_empty() {
        return Err(StepError::MarkerNotFound);
    }
    reasons.truncate(config.n_reasons);
    Ok(reasons)
}

pub fn refine_prompt(
    gateway: &Gateway,
    config: &OptimizerConfig,
    prompt: &str,
    case: &ErrorCase,
    reasons: &[String],
) -> Result<String, StepError> {
    if reasons.is_empty() {
        return Err(StepError::NoReasons);
    }
    let request = REFINE_PROMPT
        .render(&[
            ("prompt", prompt),
            ("error_case", &render_error_case(case)),
            ("reasons", &reasons.join("; ")),
        ])
        .expect("all placeholders supplied");
    let response = ask(gateway, config, request, "refine")?;
    let improved = extract_wrapped(&response)
        .into_iter()
        .next()
        .ok_or(StepError::MarkerNotFound)?;
    Ok(enforce_suffix(&improved, config.pool_size))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub text: String,
    /// The variant is identical to its input.
    pub degenerate: bool,
}

pub fn augment_prompt(
    gateway: &Gateway,
    config: &OptimizerConfig,
    prompt: &str,
) -> Result<Variant, StepError> {
    let request = AUGMENT_PROMPT
        .render(&[("refined_prompt", prompt)])
        .expect("all placeholders supplied");
    let response = ask(gateway, config, request, "augment")?;
    let body = extract_wrapped(&response)
        .into_iter()
        .next()
        .unwrap_or_else(|| clean_variant(&response));
    if body.is_empty() {
        return Err(StepError::EmptyResponse);
    }
    let text = enforce_suffix(&body, config.pool_size);
    let degenerate = text == enforce_suffix(prompt, config.pool_size);
    if degenerate {
        log::warn!("augmentation returned its input unchanged");
    }
    Ok(Variant { text, degenerate })
}

/// Strips an echoed `Output:` label and wrapping quotes.
fn clean_variant(response: &str) -> String {
    let mut s = response.trim();
    if let Some(rest) = s.strip_prefix("\"Output:") {
        s = rest.trim_start();
        s = s.strip_suffix('"').unwrap_or(s);
    } else if let Some(rest) = s.strip_prefix("Output:") {
        s = rest.trim_start();
    }
    let s = s.trim();
    let unquoted = s
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s);
    unquoted.trim().to_string()
}
