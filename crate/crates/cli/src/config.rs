//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rankprompt_core::dataset::NegativeSampling;
use rankprompt_core::evaluator::{EvalSettings, MissPolicy, DEFAULT_MODEL};
use rankprompt_core::fusion::FusionConfig;
use rankprompt_core::gateway::{HttpConfig, DEFAULT_MAX_OUTPUT};
use rankprompt_core::optimizer::{OptimizerConfig, RewardMetric};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    Mock,
    CacheOnly,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "mock" => Ok(BackendKind::Mock),
            "cache-only" => Ok(BackendKind::CacheOnly),
            other => Err(format!(
                "unknown backend `{other}` (http, mock, cache-only)"
            )),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Mock => "mock",
            BackendKind::CacheOnly => "cache-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub n_reasons: usize,
    pub error_threshold: usize,
    pub ucb_exploration: f64,
    pub batch_size: usize,
    pub max_error_cases: usize,
    pub reward: RewardMetric,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            n_reasons: d.n_reasons,
            error_threshold: d.error_threshold,
            ucb_exploration: d.ucb_exploration,
            batch_size: d.batch_size,
            max_error_cases: d.max_error_cases,
            reward: d.reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub per_domain_samples: usize,
    pub hybrid_count: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        let d = FusionConfig::default();
        FusionSection {
            per_domain_samples: d.per_domain_samples,
            hybrid_count: d.hybrid_count,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Shared response cache (JSON lines).
    pub cache: Option<PathBuf>,
    /// Rule file for the mock backend.
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub max_output: u32,
    pub base_url: String,
    pub timeout_secs: u64,
    pub pool_size: usize,
    pub steps: usize,
    pub beam: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub parallelism: usize,
    pub miss_policy: MissPolicy,
    pub negative_sampling: NegativeSampling,
    pub optimizer: OptimizerSection,
    pub fusion: FusionSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let http = HttpConfig::default();
        RunConfig {
            backend: BackendKind::Http,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output: DEFAULT_MAX_OUTPUT,
            base_url: http.base_url,
            timeout_secs: http.timeout_secs,
            pool_size: 20,
            steps: 50,
            beam: 5,
            seed: 0,
            ks: vec![1, 5],
            parallelism: 4,
            miss_policy: MissPolicy::Zero,
            negative_sampling: NegativeSampling::Uniform,
            optimizer: OptimizerSection::default(),
            fusion: FusionSection::default(),
            paths: Paths::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub beam: Option<usize>,
    pub pool_size: Option<usize>,
    pub parallelism: Option<usize>,
    pub cache: Option<PathBuf>,
    pub miss_policy: Option<MissPolicy>,
    pub mock_script: Option<PathBuf>,
    pub base_url: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &o.$field {
                    self.$field = v.clone();
                }
            };
        }
        set!(backend);
        set!(model);
        set!(seed);
        set!(steps);
        set!(beam);
        set!(pool_size);
        set!(parallelism);
        set!(miss_policy);
        set!(base_url);
        if let Some(c) = &o.cache {
            self.paths.cache = Some(c.clone());
        }
        if let Some(m) = &o.mock_script {
            self.paths.mock_script = Some(m.clone());
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.pool_size == 0 {
            return bad("pool_size must be at least 1");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive cutoffs");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if self.backend == BackendKind::Mock && self.paths.mock_script.is_none() {
            return bad("the mock backend needs paths.mock_script or --mock-script");
        }
        if self.backend == BackendKind::CacheOnly && self.paths.cache.is_none() {
            return bad("the cache-only backend needs paths.cache or --cache");
        }
        self.optimizer_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            steps: self.steps,
            beam_width: self.beam,
            pool_size: self.pool_size,
            n_reasons: o.n_reasons,
            error_threshold: o.error_threshold,
            ucb_exploration: o.ucb_exploration,
            batch_size: o.batch_size,
            max_error_cases: o.max_error_cases,
            seed: self.seed,
            reward: o.reward,
            model: self.model.clone(),
            temperature: self.temperature,
            max_output: self.max_output,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            per_domain_samples: self.fusion.per_domain_samples,
            hybrid_count: self.fusion.hybrid_count,
            domains: Vec::new(),
            seed: self.seed,
            optimizer: self.optimizer_config(),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            model: self.model.clone(),
            temperature: self.temperature,
            max_output: self.max_output,
            ks: self.ks.clone(),
            miss_policy: self.miss_policy,
        }
    }

    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            timeout_secs: self.timeout_secs,
        }
    }
}
