//! Cross-domain fusion: merge domain-expert prompts into hybrids, optimize
//! each hybrid on one sample, and pick the winner on a disjoint sample.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{keyed_rng, EvalInstance};
use crate::evaluator::{evaluate, EvalError, EvalSettings, MissPolicy};
use crate::gateway::{Gateway, GatewayError};
use crate::optimizer::{optimize, OptimizeError, OptimizerConfig, Origin, PromptRecord};
use crate::templates::enforce_suffix;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("need at least two expert prompts, got {0}")]
    TooFewExperts(usize),
    #[error("no prompt list found in the synthesis response")]
    ListParseFailure,
    #[error("domain `{domain}` has {available} instances, {needed} needed")]
    InsufficientInstances {
        domain: String,
        available: usize,
        needed: usize,
    },
    #[error("domain `{0}` has no instance pool")]
    UnknownDomain(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub per_domain_samples: usize,
    pub hybrid_count: usize,
    /// Domains to draw from; empty means every supplied pool.
    pub domains: Vec<String>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            per_domain_samples: 15,
            hybrid_count: 10,
            domains: Vec::new(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.per_domain_samples == 0 {
            return Err(FusionError::InvalidConfig(
                "per_domain_samples must be at least 1".into(),
            ));
        }
        if self.hybrid_count == 0 {
            return Err(FusionError::InvalidConfig(
                "hybrid_count must be at least 1".into(),
            ));
        }
        self.optimizer
            .validate()
            .map_err(|e| FusionError::InvalidConfig(e.to_string()))
    }
}

/// Instances available for one domain.
#[derive(Debug, Clone)]
pub struct DomainPool {
    pub domain: String,
    pub instances: Vec<EvalInstance>,
}

/// Request text: the experts, blank-line separated, then the meta-prompt.
pub fn synthesis_request(experts: &[&str], meta_prompt: &str) -> String {
    let mut parts: Vec<&str> = experts.iter().map(|e| e.trim()).collect();
    parts.push(meta_prompt.trim());
    parts.join("\n\n")
}

pub fn synthesize_hybrids(
    gateway: &Gateway,
    experts: &[&str],
    meta_prompt: &str,
    config: &FusionConfig,
) -> Result<Vec<String>, FusionError> {
    if experts.len() < 2 {
        return Err(FusionError::TooFewExperts(experts.len()));
    }
    let settings = val_settings(config);
    let request = settings.request(
        synthesis_request(experts, meta_prompt),
        "fusion/synthesize".into(),
    );
    let response = gateway.complete(&request)?;
    let mut hybrids = parse_prompt_list(&response).ok_or(FusionError::ListParseFailure)?;
    if hybrids.len() < config.hybrid_count {
        log::warn!(
            "synthesis returned {} prompts, {} requested",
            hybrids.len(),
            config.hybrid_count
        );
    }
    hybrids.truncate(config.hybrid_count);
    Ok(hybrids
        .into_iter()
        .map(|h| enforce_suffix(&h, config.optimizer.pool_size))
        .collect())
}

/// Extracts prompt texts from a synthesis response. Tries, in order: a JSON
/// string array, one prompt per line inside the outer brackets, quoted
/// strings inside the brackets, and numbered lines.
pub fn parse_prompt_list(response: &str) -> Option<Vec<String>> {
    let nonempty = |v: Vec<String>| {
        let v: Vec<String> = v
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        (!v.is_empty()).then_some(v)
    };
    let bracketed = outer_brackets(response);
    if let Some(inner) = bracketed {
        let as_json = format!("[{inner}]");
        if let Ok(list) = serde_json::from_str::<Vec<String>>(&as_json) {
            if let Some(v) = nonempty(list) {
                return Some(v);
            }
        }
        let lines: Vec<String> = inner
            .lines()
            .map(|l| unquote(l.trim().trim_end_matches(',').trim()))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.len() >= 2 {
            return Some(lines);
        }
        let quoted: Vec<String> = quoted_pattern()
            .captures_iter(inner)
            .map(|c| c[1].replace("\\\"", "\""))
            .collect();
        if let Some(v) = nonempty(quoted) {
            return Some(v);
        }
    }
    let numbered: Vec<String> = response
        .lines()
        .filter_map(|l| numbered_pattern().captures(l).map(|c| unquote(c[1].trim())))
        .collect();
    nonempty(numbered)
}

fn outer_brackets(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (end > start).then(|| &text[start + 1..end])
}

fn unquote(s: &str) -> String {
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s)
        .to_string()
}

fn quoted_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r#""((?:[^"\\]|\\.)*)""#).expect("valid regex"))
}

fn numbered_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"^\s*\d+[.)]\s+(.+)$").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSets {
    pub d_opt: Vec<EvalInstance>,
    pub d_val: Vec<EvalInstance>,
}

/// Draws `n` instances per domain into the optimization set and `n` other
/// instances into the validation set.
pub fn sample_split(pools: &[DomainPool], n: usize, seed: u64) -> Result<SplitSets, FusionError> {
    let mut d_opt = Vec::new();
    let mut d_val = Vec::new();
    for pool in pools {
        let needed = 2 * n;
        if pool.instances.len() < needed {
            return Err(FusionError::InsufficientInstances {
                domain: pool.domain.clone(),
                available: pool.instances.len(),
                needed,
            });
        }
        let mut order: Vec<usize> = (0..pool.instances.len()).collect();
        order.shuffle(&mut keyed_rng(seed, &pool.domain));
        d_opt.extend(order[..n].iter().map(|&i| pool.instances[i].clone()));
        d_val.extend(order[n..needed].iter().map(|&i| pool.instances[i].clone()));
    }
    Ok(SplitSets { d_opt, d_val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHybrid {
    pub index: usize,
    pub hybrid_text: String,
    /// Optimized form of the hybrid, or the hybrid itself if optimization failed.
    pub prompt: PromptRecord,
    pub optimized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization_error: Option<String>,
    /// Best mean reward reached on the optimization set; not used for selection.
    pub opt_reward: Option<f64>,
    pub val_score: f64,
    pub val_hr1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub winner_index: usize,
    pub winner: PromptRecord,
    pub winner_score: f64,
    pub scored: Vec<ScoredHybrid>,
    pub d_opt_manifest: Vec<String>,
    pub d_val_manifest: Vec<String>,
    pub seed: u64,
}

impl FusionResult {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

fn val_settings(config: &FusionConfig) -> EvalSettings {
    let opt = &config.optimizer;
    let mut ks = vec![1, opt.pool_size];
    ks.dedup();
    EvalSettings {
        model: opt.model.clone(),
        temperature: opt.temperature,
        max_output: opt.max_output,
        ks,
        miss_policy: MissPolicy::Zero,
    }
}

/// Index of the highest score; the earliest index wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn select_pools(
    pools: &[DomainPool],
    config: &FusionConfig,
) -> Result<Vec<DomainPool>, FusionError> {
    if config.domains.is_empty() {
        return Ok(pools.to_vec());
    }
    config
        .domains
        .iter()
        .map(|d| {
            pools
                .iter()
                .find(|p| &p.domain == d)
                .cloned()
                .ok_or_else(|| FusionError::UnknownDomain(d.clone()))
        })
        .collect()
}

/// Optimizes each hybrid on the optimization set and scores it on the
/// validation set.
pub fn fuse_hybrids(
    gateway: &Gateway,
    hybrids: &[String],
    split: &SplitSets,
    config: &FusionConfig,
) -> Result<FusionResult, FusionError> {
    let settings = val_settings(config);
    let pool = config.optimizer.pool_size;
    let mut scored = Vec::with_capacity(hybrids.len());
    for (index, text) in hybrids.iter().enumerate() {
        let initial = PromptRecord::root(format!("h{index:02}"), text.clone(), Origin::Hybrid);
        let (prompt, optimized, optimization_error, opt_reward) =
            match optimize(gateway, initial.clone(), &split.d_opt, &config.optimizer) {
                Ok(res) => {
                    let reward = res.best_reward;
                    (res.best, true, None, Some(reward))
                }
                Err(e) => {
                    log::warn!(
                        "hybrid {index}: optimization failed, scoring unoptimized text: {e}"
                    );
                    (initial, false, Some(e.to_string()), None)
                }
            };
        let eval = evaluate(gateway, &prompt.text, &split.d_val, &settings)?;
        let at = |k: usize| {
            eval.report
                .metric(k)
                .copied()
                .expect("evaluated at this cutoff")
        };
        scored.push(ScoredHybrid {
            index,
            hybrid_text: text.clone(),
            prompt,
            optimized,
            optimization_error,
            opt_reward,
            val_score: at(pool).ndcg,
            val_hr1: at(1).hr,
        });
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.val_score).collect();
    let winner_index = argmax_first(&scores).ok_or(FusionError::ListParseFailure)?;
    Ok(FusionResult {
        winner_index,
        winner: scored[winner_index].prompt.clone(),
        winner_score: scored[winner_index].val_score,
        d_opt_manifest: split.d_opt.iter().map(EvalInstance::key).collect(),
        d_val_manifest: split.d_val.iter().map(EvalInstance::key).collect(),
        scored,
        seed: config.seed,
    })
}

/// Synthesize, split, optimize and select.
pub fn fuse(
    gateway: &Gateway,
    experts: &[&str],
    meta_prompt: &str,
    pools: &[DomainPool],
    config: &FusionConfig,
) -> Result<FusionResult, FusionError> {
    config.validate()?;
    let pools = select_pools(pools, config)?;
    let split = sample_split(&pools, config.per_domain_samples, config.seed)?;
    let opt_keys: HashSet<String> = split.d_opt.iter().map(EvalInstance::key).collect();
    debug_assert!(split.d_val.iter().all(|i| !opt_keys.contains(&i.key())));
    let hybrids = synthesize_hybrids(gateway, experts, meta_prompt, config)?;
    fuse_hybrids(gateway, &hybrids, &split, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_list() {
        let got = parse_prompt_list(r#"Sure: ["first prompt", "second, with comma"]"#).unwrap();
        assert_eq!(got, vec!["first prompt", "second, with comma"]);
    }

    #[test]
    fn one_prompt_per_line() {
        let resp = "[\nRank by recency [7,0,13,...] please,\nRank by genre,\nRank by price\n]";
        let got = parse_prompt_list(resp).unwrap();
        assert_eq!(
            got,
            vec![
                "Rank by recency [7,0,13,...] please",
                "Rank by genre",
                "Rank by price"
            ]
        );
    }

    #[test]
    fn quoted_inside_brackets() {
        let got = parse_prompt_list(r#"["a" , "b"   'c']"#).unwrap();
        assert_eq!(got, vec!["a", "b"]);
    }

    #[test]
    fn numbered_fallback() {
        let got = parse_prompt_list("Here:\n1. Rank A\n2) Rank B\n").unwrap();
        assert_eq!(got, vec!["Rank A", "Rank B"]);
    }

    #[test]
    fn prose_is_rejected() {
        assert_eq!(parse_prompt_list("I cannot help with that."), None);
    }

    #[test]
    fn argmax_prefers_earliest() {
        assert_eq!(argmax_first(&[0.2, 0.5, 0.5]), Some(1));
        assert_eq!(argmax_first(&[0.3, 0.3]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }
}
