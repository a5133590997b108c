use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rankprompt_core::dataset::{
    build_instances, chronological_split, load_sessions, write_sessions, Catalog, CorpusStats,
    DatasetError, Domain, EvalInstance, Item, Session,
};
use rankprompt_core::evaluator::{
    compare, diagnose, evaluate, write_outcome_log, EvalReport, GainTable,
};
use rankprompt_core::fusion::{fuse, DomainPool, FusionResult};
use rankprompt_core::gateway::{
    text_digest, AuditLog, Gateway, HttpBackend, MockBackend, MockScript, ResponseCache,
    RetryPolicy,
};
use rankprompt_core::optimizer::{optimize, write_history, PromptRecord, StepRecord};
use rankprompt_core::templates::{Template, COMBINE_PROMPTS, DEFAULT_EXPERTS, TASK_DESCRIPTION};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Validation,
    Test,
    All,
}

/// Instances of one domain, built from a session file.
pub struct Prepared {
    pub domain: String,
    pub stats: CorpusStats,
    pub instances: Vec<EvalInstance>,
}

pub fn prepare(path: &Path, config: &RunConfig, part: Part) -> Result<Prepared, CliError> {
    let (sessions, stats) = load_sessions(path, None).map_err(|e| match e {
        DatasetError::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
        other => other.into(),
    })?;
    let domain = sessions[0].domain.clone();
    if let Some(other) = sessions.iter().find(|s| s.domain != domain) {
        return Err(CliError::Data(format!(
            "{}: mixes domains {domain} and {}",
            path.display(),
            other.domain
        )));
    }
    let catalog = Catalog::from_sessions(&sessions);
    let chosen = match part {
        Part::All => sessions,
        _ => {
            let split = chronological_split(sessions)?;
            match part {
                Part::Train => split.train,
                Part::Validation => split.validation,
                _ => split.test,
            }
        }
    };
    let instances = build_instances(
        &chosen,
        &catalog,
        config.pool_size,
        config.seed,
        config.negative_sampling,
    )?;
    if instances.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no session with two or more items",
            path.display()
        )));
    }
    Ok(Prepared {
        domain: domain.to_string(),
        stats,
        instances,
    })
}

/// Builds the gateway for `config`. The mock backend learns the ground truth
/// of every instance in `known`.
pub fn build_gateway<'a>(
    config: &RunConfig,
    out_dir: &Path,
    known: impl IntoIterator<Item = &'a EvalInstance>,
) -> Result<Gateway, CliError> {
    let mut builder = Gateway::builder().parallelism(config.parallelism);
    match config.backend {
        BackendKind::Http => {
            builder = builder.backend(HttpBackend::from_env(
                &config.http_config(),
                RetryPolicy::default(),
            )?);
        }
        BackendKind::Mock => {
            let path = config.paths.mock_script.as_ref().expect("validated");
            let script = MockScript::load(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut mock = MockBackend::from_script(script)?;
            for inst in known {
                mock.register_ground_truth(
                    inst.candidate_line(),
                    inst.ground_truth_index(),
                    inst.pool_size(),
                );
            }
            builder = builder.shared_backend(Arc::new(mock));
        }
        BackendKind::CacheOnly => {}
    }
    if let Some(cache) = &config.paths.cache {
        builder = builder.cache(ResponseCache::open(cache)?);
    }
    let audit = out_dir.join("audit.jsonl");
    if audit.exists() {
        fs::remove_file(&audit)?;
    }
    builder = builder.audit(AuditLog::open(audit)?);
    Ok(builder.build()?)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn prompt_or_default(path: Option<&Path>, default: Template) -> Result<String, CliError> {
    match path {
        Some(p) => Ok(read_text(p)?.trim_end().to_string()),
        None => Ok(default.text().to_string()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_out(out: &Path, config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    write_json(&out.join("run_config.json"), config)
}

fn report_stats(gateway: &Gateway) {
    let s = gateway.stats();
    eprintln!(
        "backend calls: {}, cache hits: {}",
        s.backend_calls, s.cache_hits
    );
}

pub fn cmd_ingest(input: &Path, domain: &str, output: &Path) -> Result<CorpusStats, CliError> {
    #[derive(Deserialize)]
    struct Row {
        session_id: String,
        timestamp: i64,
        item_id: String,
        title: String,
    }
    let mut reader = csv::Reader::from_path(input)
        .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<(i64, Item)>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row =
            row.map_err(|e| CliError::Data(format!("{}: record {}: {e}", input.display(), i + 1)))?;
        let entry = grouped.entry(row.session_id.clone()).or_insert_with(|| {
            order.push(row.session_id.clone());
            Vec::new()
        });
        entry.push((row.timestamp, Item::new(row.item_id, row.title)));
    }
    let domain: Domain = domain.parse().expect("infallible");
    let sessions: Vec<Session> = order
        .into_iter()
        .map(|id| {
            let mut events = grouped.remove(&id).expect("grouped above");
            events.sort_by_key(|(t, _)| *t);
            Session {
                timestamp: events[0].0,
                session_id: id,
                domain: domain.clone(),
                items: events.into_iter().map(|(_, item)| item).collect(),
            }
        })
        .collect();
    if sessions.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no interactions",
            input.display()
        )));
    }
    write_sessions(output, &sessions)?;
    Ok(CorpusStats::of(&sessions))
}

#[derive(Serialize)]
struct BestPromptArtifact<'a> {
    run_config: &'a RunConfig,
    best: &'a PromptRecord,
    best_reward: f64,
    lineage: &'a [PromptRecord],
}

pub struct OptimizeOutcome {
    pub best: PromptRecord,
    pub best_reward: f64,
    pub history: Vec<StepRecord>,
}

pub fn cmd_optimize(
    config: &RunConfig,
    prompt: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<OptimizeOutcome, CliError> {
    let text = prompt_or_default(prompt, TASK_DESCRIPTION)?;
    if text.trim().is_empty() {
        return Err(CliError::Data("initial prompt is empty".into()));
    }
    let prepared = prepare(data, config, Part::Train)?;
    prepare_out(out, config)?;
    let gateway = build_gateway(config, out, &prepared.instances)?;
    let result = optimize(
        &gateway,
        PromptRecord::initial(text),
        &prepared.instances,
        &config.optimizer_config(),
    )?;
    report_stats(&gateway);

    fs::write(
        out.join("best_prompt.txt"),
        format!("{}\n", result.best.text),
    )?;
    write_json(
        &out.join("best_prompt.json"),
        &BestPromptArtifact {
            run_config: config,
            best: &result.best,
            best_reward: result.best_reward,
            lineage: &result.lineage,
        },
    )?;
    write_history(out.join("history.jsonl"), &result.history)?;
    Ok(OptimizeOutcome {
        best: result.best,
        best_reward: result.best_reward,
        history: result.history,
    })
}

#[derive(Serialize, Deserialize)]
pub struct ReportArtifact {
    pub run_config: RunConfig,
    pub prompt_digest: String,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainTable>,
}

/// Reads either a report artifact or a bare report.
pub fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let inner = value.get("report").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_evaluate(
    config: &RunConfig,
    prompt: Option<&Path>,
    data: &Path,
    part: Part,
    out: &Path,
    baseline: Option<&Path>,
) -> Result<ReportArtifact, CliError> {
    let text = prompt_or_default(prompt, TASK_DESCRIPTION)?;
    let baseline = baseline.map(load_report).transpose()?;
    let prepared = prepare(data, config, part)?;
    prepare_out(out, config)?;
    let gateway = build_gateway(config, out, &prepared.instances)?;
    let evaluation = evaluate(
        &gateway,
        &text,
        &prepared.instances,
        &config.eval_settings(),
    )?;
    report_stats(&gateway);

    let gains = baseline
        .map(|b| compare(&b, &evaluation.report))
        .transpose()?;
    write_outcome_log(out.join("outcomes.jsonl"), &evaluation.outcomes)?;
    fs::write(
        out.join("diagnostics.csv"),
        diagnose(std::slice::from_ref(&evaluation.report)).to_csv(),
    )?;
    let artifact = ReportArtifact {
        run_config: config.clone(),
        prompt_digest: text_digest(&text),
        report: evaluation.report,
        gains,
    };
    write_json(&out.join("report.json"), &artifact)?;
    Ok(artifact)
}

pub fn cmd_diagnose(reports: &[PathBuf], out: Option<&Path>) -> Result<String, CliError> {
    if reports.is_empty() {
        return Err(CliError::Config(
            "diagnose needs at least one report".into(),
        ));
    }
    let loaded = reports
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let diagnostics = diagnose(&loaded);
    if let Some(path) = out {
        fs::write(path, diagnostics.to_csv())?;
    }
    Ok(diagnostics.to_string())
}

#[derive(Serialize)]
struct FusionArtifact<'a> {
    run_config: &'a RunConfig,
    result: &'a FusionResult,
}

pub fn cmd_fuse(
    config: &RunConfig,
    experts: &[PathBuf],
    meta: Option<&Path>,
    data: &[PathBuf],
    out: &Path,
) -> Result<FusionResult, CliError> {
    let expert_texts: Vec<String> = if experts.is_empty() {
        DEFAULT_EXPERTS
            .iter()
            .map(|t| t.text().to_string())
            .collect()
    } else {
        experts
            .iter()
            .map(|p| read_text(p).map(|t| t.trim_end().to_string()))
            .collect::<Result<_, _>>()?
    };
    if expert_texts.len() < 2 {
        return Err(CliError::Config(format!(
            "fusion needs at least two expert prompts, got {}",
            expert_texts.len()
        )));
    }
    if data.len() < 2 {
        return Err(CliError::Config(format!(
            "fusion needs at least two domains, got {}",
            data.len()
        )));
    }
    let meta = prompt_or_default(meta, COMBINE_PROMPTS)?;
    let mut pools = Vec::with_capacity(data.len());
    for path in data {
        let prepared = prepare(path, config, Part::Train)?;
        if pools
            .iter()
            .any(|p: &DomainPool| p.domain == prepared.domain)
        {
            return Err(CliError::Data(format!(
                "domain {} given twice",
                prepared.domain
            )));
        }
        pools.push(DomainPool {
            domain: prepared.domain,
            instances: prepared.instances,
        });
    }
    prepare_out(out, config)?;
    let gateway = build_gateway(config, out, pools.iter().flat_map(|p| p.instances.iter()))?;
    let refs: Vec<&str> = expert_texts.iter().map(String::as_str).collect();
    let result = fuse(&gateway, &refs, &meta, &pools, &config.fusion_config())?;
    report_stats(&gateway);

    write_json(
        &out.join("fusion_result.json"),
        &FusionArtifact {
            run_config: config,
            result: &result,
        },
    )?;
    fs::write(
        out.join("best_prompt.txt"),
        format!("{}\n", result.winner.text),
    )?;
    Ok(result)
}
