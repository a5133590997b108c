//! Runs a prompt over evaluation instances and aggregates HR@k / NDCG@k,
//! parse validity and the failure taxonomy.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_input, Domain, EvalInstance};
use crate::gateway::{text_digest, CompletionRequest, Gateway, GatewayError, DEFAULT_MAX_OUTPUT};
use crate::metrics::{aggregate, session_points, MetricPoint};
use crate::parser::{
    classify_failure, parse_ranking, rank_of, FailureCategory, ParseFailure, Ranking,
};
use crate::templates::mandatory_suffix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no instances to evaluate")]
    EmptyInput,
    #[error("reports cover different domains: {0} vs {1}")]
    DomainMismatch(String, String),
    #[error("reports use different cutoffs: {0:?} vs {1:?}")]
    CutoffMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How an unparseable answer is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissPolicy {
    /// Counted as a miss: every metric is 0 for that session.
    #[default]
    Zero,
    /// Asked once more with a format reminder; a second failure is a miss.
    RetryOnce,
    /// Left out of the metric averages.
    Exclude,
}

impl fmt::Display for MissPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MissPolicy::Zero => "zero",
            MissPolicy::RetryOnce => "retry-once",
            MissPolicy::Exclude => "exclude",
        })
    }
}

impl std::str::FromStr for MissPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(MissPolicy::Zero),
            "retry-once" => Ok(MissPolicy::RetryOnce),
            "exclude" => Ok(MissPolicy::Exclude),
            other => Err(format!(
                "unknown miss policy `{other}` (zero, retry-once, exclude)"
            )),
        }
    }
}

pub const DEFAULT_MODEL: &str = "gemini-2.0-flash";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub model: String,
    pub temperature: f64,
    pub max_output: u32,
    pub ks: Vec<usize>,
    pub miss_policy: MissPolicy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            model: DEFAULT_MODEL.into(),
            temperature: 0.0,
            max_output: DEFAULT_MAX_OUTPUT,
            ks: vec![1, 5],
            miss_policy: MissPolicy::Zero,
        }
    }
}

impl EvalSettings {
    pub fn request(&self, prompt_text: String, tag: String) -> CompletionRequest {
        CompletionRequest::new(self.model.clone(), prompt_text)
            .with_temperature(self.temperature)
            .with_max_output(self.max_output)
            .with_tag(tag)
    }
}

/// Full ranking request: the task prompt followed by the input block.
pub fn ranking_prompt(prompt: &str, instance: &EvalInstance) -> String {
    format!("{}\n\n{}", prompt.trim_end(), render_input(instance))
}

fn retry_prompt(prompt: &str, instance: &EvalInstance) -> String {
    format!(
        "{}\n\nYour previous answer could not be read. {}",
        ranking_prompt(prompt, instance),
        mandatory_suffix(instance.pool_size())
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParseOutcome {
    Valid {
        ranking: Vec<usize>,
    },
    Failed {
        category: FailureCategory,
        detail: String,
    },
}

impl ParseOutcome {
    pub fn is_valid(&self) -> bool {
        matches!(self, ParseOutcome::Valid { .. })
    }

    pub fn failure_category(&self) -> Option<FailureCategory> {
        match self {
            ParseOutcome::Failed { category, .. } => Some(*category),
            ParseOutcome::Valid { .. } => None,
        }
    }
}

/// One line of the outcome log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub instance: String,
    pub domain: Domain,
    /// SHA-256 of the answer text; absent for empty answers.
    pub response_digest: Option<String>,
    pub parse: ParseOutcome,
    pub ground_truth_index: usize,
    pub gt_rank: Option<usize>,
    pub retried: bool,
    pub metrics: Vec<MetricPoint>,
    #[serde(skip)]
    pub response: String,
}

fn parse_answer(text: &str, instance: &EvalInstance) -> Result<Ranking, ParseFailure> {
    parse_ranking(text, instance.pool_size())
        .map_err(|f| classify_failure(f, &instance.candidate_titles()))
}

fn ask(
    gateway: &Gateway,
    settings: &EvalSettings,
    prompt_text: String,
    tag: String,
) -> Result<String, GatewayError> {
    match gateway.complete(&settings.request(prompt_text, tag)) {
        Err(GatewayError::EmptyResponse) => Ok(String::new()),
        other => other,
    }
}

/// Renders, asks, parses and scores a single instance. Parse failures are
/// outcomes, not errors; only gateway failures propagate.
pub fn run_instance(
    gateway: &Gateway,
    settings: &EvalSettings,
    prompt: &str,
    instance: &EvalInstance,
) -> Result<InstanceOutcome, GatewayError> {
    let mut response = ask(
        gateway,
        settings,
        ranking_prompt(prompt, instance),
        instance.key(),
    )?;
    let mut parsed = parse_answer(&response, instance);
    let mut retried = false;
    if parsed.is_err() && settings.miss_policy == MissPolicy::RetryOnce {
        retried = true;
        response = ask(
            gateway,
            settings,
            retry_prompt(prompt, instance),
            format!("{}#retry", instance.key()),
        )?;
        parsed = parse_answer(&response, instance);
    }
    let gt = instance.ground_truth_index();
    let gt_rank = parsed.as_ref().ok().map(|r| rank_of(r, gt));
    let parse = match parsed {
        Ok(r) => ParseOutcome::Valid {
            ranking: r.order().to_vec(),
        },
        Err(f) => ParseOutcome::Failed {
            category: f.category,
            detail: f.detail,
        },
    };
    Ok(InstanceOutcome {
        instance: instance.key(),
        domain: instance.domain().clone(),
        response_digest: (!response.is_empty()).then(|| text_digest(&response)),
        parse,
        ground_truth_index: gt,
        gt_rank,
        retried,
        metrics: session_points(gt_rank, &settings.ks),
        response,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub n_sessions: usize,
    /// Sessions that entered the metric averages.
    pub n_scored: usize,
    pub metrics: Vec<MetricPoint>,
    /// Fraction of sessions with a valid ranking.
    pub valid_pct: f64,
    pub failure_histogram: BTreeMap<FailureCategory, usize>,
    pub miss_policy: MissPolicy,
}

impl EvalReport {
    /// Aggregates an outcome log. Used both at evaluation time and when
    /// re-reading a persisted log.
    pub fn from_outcomes(
        outcomes: &[InstanceOutcome],
        ks: &[usize],
        policy: MissPolicy,
    ) -> Result<Self, EvalError> {
        if outcomes.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        let mut failure_histogram = BTreeMap::new();
        for o in outcomes {
            if let Some(c) = o.parse.failure_category() {
                *failure_histogram.entry(c).or_insert(0) += 1;
            }
        }
        let scored: Vec<&[MetricPoint]> = outcomes
            .iter()
            .filter(|o| policy != MissPolicy::Exclude || o.parse.is_valid())
            .map(|o| o.metrics.as_slice())
            .collect();
        let metrics = if scored.is_empty() {
            ks.iter()
                .map(|&k| MetricPoint {
                    k,
                    hr: 0.0,
                    ndcg: 0.0,
                })
                .collect()
        } else {
            aggregate(&scored)
                .map_err(|_| {
                    EvalError::CutoffMismatch(
                        ks.to_vec(),
                        outcomes[0].metrics.iter().map(|p| p.k).collect(),
                    )
                })?
                .points
        };
        let valid = outcomes.iter().filter(|o| o.parse.is_valid()).count();
        Ok(EvalReport {
            domain: domain_label(outcomes.iter().map(|o| &o.domain)),
            n_sessions: outcomes.len(),
            n_scored: scored.len(),
            metrics,
            valid_pct: valid as f64 / outcomes.len() as f64,
            failure_histogram,
            miss_policy: policy,
        })
    }

    pub fn metric(&self, k: usize) -> Option<&MetricPoint> {
        self.metrics.iter().find(|p| p.k == k)
    }

    pub fn failures(&self) -> usize {
        self.failure_histogram.values().sum()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.metrics.iter().map(|p| p.k).collect()
    }
}

fn domain_label<'a>(domains: impl Iterator<Item = &'a Domain>) -> String {
    let mut seen: Vec<&Domain> = domains.collect();
    seen.sort();
    seen.dedup();
    match seen.as_slice() {
        [one] => one.to_string(),
        many => many
            .iter()
            .map(|d| d.as_str())
            .collect::<Vec<_>>()
            .join("+"),
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<InstanceOutcome>,
}

pub fn evaluate(
    gateway: &Gateway,
    prompt: &str,
    instances: &[EvalInstance],
    settings: &EvalSettings,
) -> Result<Evaluation, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let outcomes = gateway
        .map_bounded(instances, |inst| {
            run_instance(gateway, settings, prompt, inst)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::from_outcomes(&outcomes, &settings.ks, settings.miss_policy)?;
    Ok(Evaluation { report, outcomes })
}

pub fn write_outcome_log(
    path: impl AsRef<Path>,
    outcomes: &[InstanceOutcome],
) -> Result<(), EvalError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for o in outcomes {
        serde_json::to_writer(&mut out, o)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_outcome_log(path: impl AsRef<Path>) -> Result<Vec<InstanceOutcome>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(EvalError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: FailureCategory,
    pub count: usize,
    /// Share of this domain's failures, in percent.
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDiagnostics {
    pub domain: String,
    pub n_sessions: usize,
    pub valid: usize,
    pub invalid: usize,
    pub valid_pct: f64,
    pub invalid_pct: f64,
    pub categories: Vec<CategoryShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub domains: Vec<DomainDiagnostics>,
}

/// Validity table and failure-category breakdown, one row group per report.
pub fn diagnose(reports: &[EvalReport]) -> Diagnostics {
    let domains = reports
        .iter()
        .map(|r| {
            let invalid = r.failures();
            let valid = r.n_sessions - invalid;
            let pct = |n: usize, of: usize| {
                if of == 0 {
                    0.0
                } else {
                    100.0 * n as f64 / of as f64
                }
            };
            DomainDiagnostics {
                domain: r.domain.clone(),
                n_sessions: r.n_sessions,
                valid,
                invalid,
                valid_pct: pct(valid, r.n_sessions),
                invalid_pct: pct(invalid, r.n_sessions),
                categories: r
                    .failure_histogram
                    .iter()
                    .filter(|(_, &n)| n > 0)
                    .map(|(&category, &count)| CategoryShare {
                        category,
                        count,
                        pct: pct(count, invalid),
                    })
                    .collect(),
            }
        })
        .collect();
    Diagnostics { domains }
}

impl Diagnostics {
    /// `domain,valid_pct,category,pct` rows; a domain without failures gets
    /// a single `none` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,valid_pct,category,pct\n");
        for d in &self.domains {
            if d.categories.is_empty() {
                out.push_str(&format!(
                    "{},{:.2},none,0.00\n",
                    csv_field(&d.domain),
                    d.valid_pct
                ));
            }
            for c in &d.categories {
                out.push_str(&format!(
                    "{},{:.2},{},{:.2}\n",
                    csv_field(&d.domain),
                    d.valid_pct,
                    c.category,
                    c.pct
                ));
            }
        }
        out
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>8} {:>9}  failure breakdown",
            "domain", "valid%", "invalid%"
        )?;
        for d in &self.domains {
            let breakdown: Vec<String> = d
                .categories
                .iter()
                .map(|c| format!("{} {:.2}% ({})", c.category, c.pct, c.count))
                .collect();
            writeln!(
                f,
                "{:<16} {:>8.2} {:>9.2}  {}",
                d.domain,
                d.valid_pct,
                d.invalid_pct,
                if breakdown.is_empty() {
                    "-".to_string()
                } else {
                    breakdown.join(", ")
                }
            )?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Gain {
    /// Relative change in percent.
    Percent(f64),
    /// Baseline was zero.
    Undefined,
}

impl Gain {
    pub fn between(baseline: f64, candidate: f64) -> Gain {
        if baseline == 0.0 {
            Gain::Undefined
        } else {
            Gain::Percent((candidate - baseline) / baseline * 100.0)
        }
    }
}

impl fmt::Display for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gain::Percent(p) => write!(f, "{p:+.2}%"),
            Gain::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub gain: Gain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub domain: String,
    pub rows: Vec<GainRow>,
}

impl GainTable {
    pub fn row(&self, metric: &str) -> Option<&GainRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

impl fmt::Display for GainTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>9} {:>9} {:>10}",
            self.domain, "baseline", "ours", "gain"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>9.4} {:>9.4} {:>10}",
                r.metric,
                r.baseline,
                r.candidate,
                r.gain.to_string()
            )?;
        }
        Ok(())
    }
}

/// Relative improvement of `candidate` over `baseline` for every metric.
pub fn compare(baseline: &EvalReport, candidate: &EvalReport) -> Result<GainTable, EvalError> {
    if baseline.domain != candidate.domain {
        return Err(EvalError::DomainMismatch(
            baseline.domain.clone(),
            candidate.domain.clone(),
        ));
    }
    if baseline.ks() != candidate.ks() {
        return Err(EvalError::CutoffMismatch(baseline.ks(), candidate.ks()));
    }
    let mut rows = Vec::new();
    for (a, b) in baseline.metrics.iter().zip(&candidate.metrics) {
        rows.push(GainRow {
            metric: format!("HR@{}", a.k),
            baseline: a.hr,
            candidate: b.hr,
            gain: Gain::between(a.hr, b.hr),
        });
    }
    for (a, b) in baseline.metrics.iter().zip(&candidate.metrics) {
        rows.push(GainRow {
            metric: format!("NDCG@{}", a.k),
            baseline: a.ndcg,
            candidate: b.ndcg,
            gain: Gain::between(a.ndcg, b.ndcg),
        });
    }
    Ok(GainTable {
        domain: baseline.domain.clone(),
        rows,
    })
}
