//! Iterative prompt optimization: score, critique, refine, augment, and keep
//! a UCB-pruned beam of candidate prompts.

mod steps;
mod ucb;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EvalInstance;
use crate::gateway::{Gateway, GatewayError, DEFAULT_MAX_OUTPUT};

pub use steps::{
    augment_prompt, collect_error_cases, extract_wrapped, infer_reasons, refine_prompt,
    render_error_case, score_prompt, ErrorCase, Scored, StepError, Variant,
};
pub use ucb::{prune, ucb_score, ucb_select};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("optimization set is empty")]
    EmptyDataset,
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    Refined,
    Augmented,
    Hybrid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub pulls: u64,
    pub total_reward: f64,
}

impl ArmStats {
    pub fn mean(&self) -> Option<f64> {
        (self.pulls > 0).then(|| self.total_reward / self.pulls as f64)
    }

    pub fn record(&mut self, reward: f64) {
        self.pulls += 1;
        self.total_reward += reward;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub text: String,
    pub parent_id: Option<String>,
    pub origin: Origin,
    pub arm_stats: ArmStats,
}

impl PromptRecord {
    /// A root record. Panics on empty text.
    pub fn root(prompt_id: impl Into<String>, text: impl Into<String>, origin: Origin) -> Self {
        let text = text.into();
        assert!(!text.trim().is_empty(), "prompt text must be non-empty");
        PromptRecord {
            prompt_id: prompt_id.into(),
            text,
            parent_id: None,
            origin,
            arm_stats: ArmStats::default(),
        }
    }

    pub fn initial(text: impl Into<String>) -> Self {
        Self::root("p000", text, Origin::Initial)
    }

    fn child(prompt_id: String, text: String, parent: &str, origin: Origin) -> Self {
        PromptRecord {
            prompt_id,
            text,
            parent_id: Some(parent.to_string()),
            origin,
            arm_stats: ArmStats::default(),
        }
    }

    pub fn mean_reward(&self) -> Option<f64> {
        self.arm_stats.mean()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    /// NDCG at the full pool size.
    #[default]
    Ndcg,
    HitAt1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub beam_width: usize,
    pub pool_size: usize,
    pub n_reasons: usize,
    /// Outcomes ranking the ground truth below this position are errors.
    pub error_threshold: usize,
    pub ucb_exploration: f64,
    pub batch_size: usize,
    /// Error cases expanded per step, worst first.
    pub max_error_cases: usize,
    pub seed: u64,
    pub reward: RewardMetric,
    pub model: String,
    pub temperature: f64,
    pub max_output: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 50,
            beam_width: 5,
            pool_size: 20,
            n_reasons: 3,
            error_threshold: 5,
            ucb_exploration: 1.41,
            batch_size: 15,
            max_error_cases: 1,
            seed: 0,
            reward: RewardMetric::Ndcg,
            model: crate::evaluator::DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output: DEFAULT_MAX_OUTPUT,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let checks = [
            (self.steps >= 1, "steps must be at least 1"),
            (self.beam_width >= 1, "beam_width must be at least 1"),
            (self.n_reasons >= 1, "n_reasons must be at least 1"),
            (self.pool_size >= 1, "pool_size must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (
                self.max_error_cases >= 1,
                "max_error_cases must be at least 1",
            ),
            (
                self.ucb_exploration.is_finite() && self.ucb_exploration >= 0.0,
                "ucb_exploration must be finite and non-negative",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(OptimizeError::InvalidConfig(msg.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Expanded,
    NoErrors,
    ReasonsFailed,
    RefineFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamEntry {
    pub prompt_id: String,
    pub pulls: u64,
    pub mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub prompt_id: String,
    pub action: StepAction,
    pub reward: f64,
    pub batch: Vec<String>,
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub beam: Vec<BeamEntry>,
    pub best_prompt_id: String,
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    /// Snapshot of the record when it reached the highest mean reward seen.
    pub best: PromptRecord,
    pub best_reward: f64,
    pub history: Vec<StepRecord>,
    /// Every record created during the run, ordered by id.
    pub lineage: Vec<PromptRecord>,
    pub beam: Vec<PromptRecord>,
}

impl OptimizeResult {
    pub fn record(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.lineage.iter().find(|r| r.prompt_id == prompt_id)
    }
}

struct Expansion {
    action: StepAction,
    children: Vec<PromptRecord>,
    notes: Vec<String>,
}

fn expand(
    gateway: &Gateway,
    config: &OptimizerConfig,
    parent: &PromptRecord,
    case: &ErrorCase,
    next_id: &mut impl FnMut() -> String,
) -> Result<Expansion, OptimizeError> {
    let mut notes = Vec::new();
    let reasons = match infer_reasons(gateway, config, &parent.text, case) {
        Ok(r) => r,
        Err(e) => {
            let e = e.into_fatal()?;
            notes.push(format!("reasons: {e}"));
            return Ok(Expansion {
                action: StepAction::ReasonsFailed,
                children: vec![],
                notes,
            });
        }
    };
    let refined = match refine_prompt(gateway, config, &parent.text, case, &reasons) {
        Ok(t) => t,
        Err(e) => {
            let e = e.into_fatal()?;
            notes.push(format!("refine: {e}"));
            return Ok(Expansion {
                action: StepAction::RefineFailed,
                children: vec![],
                notes,
            });
        }
    };
    let refined = PromptRecord::child(next_id(), refined, &parent.prompt_id, Origin::Refined);
    let mut children = vec![];
    match augment_prompt(gateway, config, &refined.text) {
        Ok(v) => {
            if v.degenerate {
                notes.push(format!("augment: degenerate copy of {}", refined.prompt_id));
            }
            let augmented =
                PromptRecord::child(next_id(), v.text, &refined.prompt_id, Origin::Augmented);
            children.push(refined);
            children.push(augmented);
        }
        Err(e) => {
            let e = e.into_fatal()?;
            notes.push(format!("augment: {e}"));
            children.push(refined);
        }
    }
    Ok(Expansion {
        action: StepAction::Expanded,
        children,
        notes,
    })
}

/// Runs `config.steps` UCB rounds starting from `initial`, drawing each
/// round's mini-batch from `d_opt` with a seeded generator.
pub fn optimize(
    gateway: &Gateway,
    initial: PromptRecord,
    d_opt: &[EvalInstance],
    config: &OptimizerConfig,
) -> Result<OptimizeResult, OptimizeError> {
    config.validate()?;
    if d_opt.is_empty() {
        return Err(OptimizeError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let root_id = initial.prompt_id.clone();
    let mut created = 0usize;
    let mut next_id = move || {
        created += 1;
        format!("{root_id}-{created:03}")
    };

    let mut lineage: BTreeMap<String, PromptRecord> = BTreeMap::new();
    lineage.insert(initial.prompt_id.clone(), initial.clone());
    let mut beam = vec![initial];
    let mut total_pulls = 0u64;
    let mut best: Option<(PromptRecord, f64)> = None;
    let mut history = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let chosen = ucb_select(&beam, total_pulls, config.ucb_exploration);
        let amount = config.batch_size.min(d_opt.len());
        let mut picks = index::sample(&mut rng, d_opt.len(), amount).into_vec();
        picks.sort_unstable();
        let batch: Vec<EvalInstance> = picks.iter().map(|&i| d_opt[i].clone()).collect();

        let scored = score_prompt(gateway, &beam[chosen].text, &batch, config)?;
        beam[chosen].arm_stats.record(scored.reward);
        total_pulls += 1;
        let pulled = beam[chosen].clone();
        lineage.insert(pulled.prompt_id.clone(), pulled.clone());

        let mean = pulled.mean_reward().expect("just pulled");
        if best.as_ref().is_none_or(|(_, b)| mean > *b) {
            best = Some((pulled.clone(), mean));
        }

        let cases = collect_error_cases(
            &pulled.prompt_id,
            &batch,
            &scored.outcomes,
            config.error_threshold,
            Some(config.max_error_cases),
        );
        let mut action = StepAction::NoErrors;
        let mut children = Vec::new();
        let mut notes = Vec::new();
        for case in &cases {
            let exp = expand(gateway, config, &pulled, case, &mut next_id)?;
            if action != StepAction::Expanded {
                action = exp.action;
            }
            notes.extend(exp.notes);
            children.extend(exp.children);
        }
        for child in &children {
            lineage.insert(child.prompt_id.clone(), child.clone());
        }
        let child_ids = children.iter().map(|c| c.prompt_id.clone()).collect();
        beam.extend(children);
        beam = prune(beam, config.beam_width, total_pulls, config.ucb_exploration);

        let (best_record, best_reward) = best.as_ref().expect("set on first step");
        for note in &notes {
            log::info!("step {step}: {note}");
        }
        history.push(StepRecord {
            step,
            prompt_id: pulled.prompt_id.clone(),
            action,
            reward: scored.reward,
            batch: batch.iter().map(EvalInstance::key).collect(),
            children: child_ids,
            notes,
            beam: beam
                .iter()
                .map(|r| BeamEntry {
                    prompt_id: r.prompt_id.clone(),
                    pulls: r.arm_stats.pulls,
                    mean_reward: r.mean_reward(),
                })
                .collect(),
            best_prompt_id: best_record.prompt_id.clone(),
            best_reward: *best_reward,
        });
    }

    let (best, best_reward) = best.expect("steps >= 1");
    Ok(OptimizeResult {
        best,
        best_reward,
        history,
        lineage: lineage.into_values().collect(),
        beam,
    })
}

pub fn write_history(path: impl AsRef<Path>, history: &[StepRecord]) -> Result<(), OptimizeError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in history {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
