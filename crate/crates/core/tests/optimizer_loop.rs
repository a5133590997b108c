use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankprompt_core::dataset::{
    build_instances, chronological_split, load_sessions, Catalog, EvalInstance, NegativeSampling,
};
use rankprompt_core::gateway::{Gateway, GatewayError, MockBackend, Pattern, Reply, Rule};
use rankprompt_core::optimizer::{
    optimize, score_prompt, ucb_select, ArmStats, OptimizeError, OptimizerConfig, Origin,
    PromptRecord, StepAction,
};

fn train_instances() -> Vec<EvalInstance> {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/sessions/games.jsonl");
    let (sessions, _) = load_sessions(path, None).unwrap();
    let catalog = Catalog::from_sessions(&sessions);
    let split = chronological_split(sessions).unwrap();
    build_instances(&split.train, &catalog, 20, 0, NegativeSampling::Uniform).unwrap()
}

fn gateway(rules: Vec<Rule>, instances: &[EvalInstance]) -> Gateway {
    let mut mock = MockBackend::new(rules).unwrap();
    for inst in instances {
        mock.register_ground_truth(
            inst.candidate_line(),
            inst.ground_truth_index(),
            inst.pool_size(),
        );
    }
    Gateway::builder()
        .backend(mock)
        .parallelism(4)
        .build()
        .unwrap()
}

fn has(s: &str) -> Pattern {
    Pattern::contains(s)
}

const REASONS: &str = "Wrap each reason with <START> and <END>";
const REFINE: &str = "please write one improved prompt";
const AUGMENT: &str = "Generate a variation of the following instruction";

fn small_config(steps: usize, beam: usize) -> OptimizerConfig {
    OptimizerConfig {
        steps,
        beam_width: beam,
        batch_size: 10,
        seed: 3,
        ..OptimizerConfig::default()
    }
}

#[test]
fn score_examples() {
    let inst = train_instances();
    let batch = &inst[..12];
    let config = small_config(1, 1);
    let perfect = gateway(
        vec![Rule::new(
            has("Candidate item set: "),
            Reply::GroundTruthAt(1),
        )],
        &inst,
    );
    assert_eq!(
        score_prompt(&perfect, "p", batch, &config).unwrap().reward,
        1.0
    );

    let junk = gateway(
        vec![Rule::new(
            has("Candidate item set: "),
            Reply::text("no idea"),
        )],
        &inst,
    );
    let scored = score_prompt(&junk, "p", batch, &config).unwrap();
    assert_eq!(scored.reward, 0.0);
    assert!(scored.outcomes.iter().all(|o| !o.parse.is_valid()));

    let third = gateway(
        vec![Rule::new(
            has("Candidate item set: "),
            Reply::GroundTruthAt(3),
        )],
        &inst,
    );
    let r = score_prompt(&third, "p", batch, &config).unwrap().reward;
    assert!((r - 1.0 / 4f64.log2()).abs() < 1e-12 && (r - 0.5).abs() < 1e-12);

    assert!(matches!(
        score_prompt(&third, "p", &[], &config),
        Err(OptimizeError::EmptyDataset)
    ));
}

fn planted_rules() -> Vec<Rule> {
    vec![
        Rule::new(
            has(REASONS),
            Reply::text("<START>It ignores recency.<END><START>It ranks by popularity.<END>"),
        ),
        Rule::new(
            has(REFINE),
            Reply::text("<START>PLANTED: rank what continues the session.<END>"),
        ),
        Rule::new(
            has(AUGMENT),
            Reply::text("Output: Order candidates by continuation of the session."),
        ),
        Rule::new(has("PLANTED"), Reply::GroundTruthAt(1)),
        Rule::new(has("Candidate item set: "), Reply::GroundTruthAt(10)),
    ]
}

#[test]
fn planted_refinement_is_returned() {
    let inst = train_instances();
    let gw = gateway(planted_rules(), &inst);
    let result = optimize(
        &gw,
        PromptRecord::initial("Rank the candidates."),
        &inst,
        &small_config(10, 5),
    )
    .unwrap();
    assert_eq!(result.best_reward, 1.0);
    assert!(result.best.text.starts_with("PLANTED"));
    assert_eq!(result.best.origin, Origin::Refined);
    assert_eq!(result.best.parent_id.as_deref(), Some("p000"));
    let first = result
        .history
        .iter()
        .position(|h| h.best_reward == 1.0)
        .unwrap();
    assert!(first < 10);
}

#[test]
fn minimal_loop_makes_one_expansion() {
    let inst = train_instances();
    let refines = Arc::new(AtomicUsize::new(0));
    let augments = Arc::new(AtomicUsize::new(0));
    let (r, a) = (refines.clone(), augments.clone());
    let rules = vec![
        Rule::new(has(REASONS), Reply::text("<START>r<END>")),
        Rule::new(
            has(REFINE),
            Reply::dynamic(move |_| {
                r.fetch_add(1, Ordering::SeqCst);
                "<START>better prompt<END>".into()
            }),
        ),
        Rule::new(
            has(AUGMENT),
            Reply::dynamic(move |_| {
                a.fetch_add(1, Ordering::SeqCst);
                "variant prompt".into()
            }),
        ),
        Rule::new(has("Candidate item set: "), Reply::GroundTruthAt(12)),
    ];
    let gw = gateway(rules, &inst);
    let result = optimize(
        &gw,
        PromptRecord::initial("Rank."),
        &inst,
        &small_config(1, 1),
    )
    .unwrap();
    assert_eq!(refines.load(Ordering::SeqCst), 1);
    assert_eq!(augments.load(Ordering::SeqCst), 1);
    assert_eq!(result.history.len(), 1);
    assert_eq!(result.history[0].children.len(), 2);
    assert_eq!(result.beam.len(), 1);
}

#[test]
fn loop_invariants_hold_across_seeds() {
    let inst = train_instances();
    for seed in 0..6 {
        let gw = gateway(planted_rules(), &inst);
        let config = OptimizerConfig {
            seed,
            ..small_config(8, 2)
        };
        let result = optimize(
            &gw,
            PromptRecord::initial("Rank the candidates."),
            &inst,
            &config,
        )
        .unwrap();
        let ids: HashMap<&str, usize> = result
            .lineage
            .iter()
            .enumerate()
            .map(|(i, r)| (r.prompt_id.as_str(), i))
            .collect();
        for rec in &result.lineage {
            assert!(!rec.text.trim().is_empty());
            match rec.origin {
                Origin::Refined | Origin::Augmented => {
                    let parent = rec.parent_id.as_deref().expect("children carry a parent");
                    assert!(
                        ids[parent] < ids[rec.prompt_id.as_str()],
                        "parent created first"
                    );
                }
                _ => assert!(rec.parent_id.is_none()),
            }
        }
        let mut last = f64::NEG_INFINITY;
        for step in &result.history {
            assert!(step.beam.len() <= config.beam_width);
            assert!(step.best_reward >= last);
            last = step.best_reward;
        }
        assert_eq!(result.best_reward, last);
    }
}

#[test]
fn same_seed_same_history() {
    let inst = train_instances();
    let run = |seed| {
        let gw = gateway(planted_rules(), &inst);
        let config = OptimizerConfig {
            seed,
            ..small_config(6, 3)
        };
        let r = optimize(
            &gw,
            PromptRecord::initial("Rank the candidates."),
            &inst,
            &config,
        )
        .unwrap();
        serde_json::to_string(&r.history).unwrap()
    };
    assert_eq!(run(21), run(21));
    assert_ne!(run(21), run(22));
}

#[test]
fn step_failures_skip_the_expansion() {
    let inst = train_instances();
    let rules = vec![
        Rule::new(has(REASONS), Reply::text("I would rather not use markers.")),
        Rule::new(has("Candidate item set: "), Reply::GroundTruthAt(10)),
    ];
    let gw = gateway(rules, &inst);
    let result = optimize(
        &gw,
        PromptRecord::initial("Rank."),
        &inst,
        &small_config(3, 2),
    )
    .unwrap();
    assert!(result
        .history
        .iter()
        .all(|h| h.action == StepAction::ReasonsFailed && h.children.is_empty()));
    assert_eq!(result.lineage.len(), 1);
}

#[test]
fn backend_outage_aborts() {
    let inst = train_instances();
    let rules = vec![Rule::new(
        has("Candidate item set: "),
        Reply::Dynamic(Arc::new(|_| {
            Err(GatewayError::BackendUnavailable {
                attempts: 5,
                reason: "down".into(),
            })
        })),
    )];
    let gw = gateway(rules, &inst);
    let err = optimize(
        &gw,
        PromptRecord::initial("Rank."),
        &inst,
        &small_config(2, 2),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        OptimizeError::Gateway(GatewayError::BackendUnavailable { .. })
    ));
}

/// Bernoulli two-arm bandit driven through `ucb_select`.
fn simulate(pulls: usize, seed: u64) -> [u64; 2] {
    let means = [0.8, 0.2];
    let mut arms: Vec<PromptRecord> = ["a", "b"]
        .iter()
        .map(|id| PromptRecord::root(*id, "arm", Origin::Initial))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..pulls {
        let i = ucb_select(&arms, t as u64, 1.41);
        let reward = if rng.gen_bool(means[i]) { 1.0 } else { 0.0 };
        arms[i].arm_stats.record(reward);
    }
    [arms[0].arm_stats.pulls, arms[1].arm_stats.pulls]
}

#[test]
fn bandit_prefers_the_better_arm() {
    for seed in 0..20 {
        let [good, bad] = simulate(500, seed);
        assert_eq!(good + bad, 500);
        assert!(good as f64 > 0.8 * 500.0, "seed {seed}: {good} of 500");
        let [_, bad] = simulate(2000, seed);
        let regret = bad as f64 * 0.6;
        assert!(regret < 0.5 * 2000.0 * 0.6, "seed {seed}: regret {regret}");
    }
    let per_pull = |n: usize| {
        (0..20)
            .map(|s| simulate(n, s)[1] as f64 / n as f64)
            .sum::<f64>()
            / 20.0
    };
    assert!(per_pull(2000) < per_pull(500));
}

#[test]
fn arm_stats_serialize() {
    let s = ArmStats {
        pulls: 2,
        total_reward: 1.5,
    };
    let text = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<ArmStats>(&text).unwrap(), s);
}
