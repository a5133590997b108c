mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fake_llm, fixture, read, sessions};

fn rankprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankprompt"))
        .args(args)
        .env_remove("LLM_API_KEY")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn mock_args<'a>(script: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec![
        "--backend",
        "mock",
        "--mock-script",
        script,
        "--seed",
        "7",
        "--steps",
        steps,
        "--beam",
        "3",
    ]
}

#[test]
fn optimize_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture("mock/optimize.json");
    let data = sessions("games");
    let before = read(&data);
    let mut args = vec!["optimize", "--data", p(&data), "--out", p(dir.path())];
    args.extend(mock_args(p(&script), "2"));
    let out = rankprompt(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("backend calls:"));
    for file in [
        "best_prompt.txt",
        "best_prompt.json",
        "history.jsonl",
        "run_config.json",
        "audit.jsonl",
    ] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let history = String::from_utf8(read(&dir.path().join("history.jsonl"))).unwrap();
    assert_eq!(history.lines().count(), 2);
    let best: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("best_prompt.json"))).unwrap();
    assert_eq!(best["run_config"]["seed"], 7);
    assert_eq!(read(&data), before, "inputs are never mutated");
}

#[test]
fn example_config_runs_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("config/mock.toml");
    let script = fixture("mock/optimize.json");
    let out = rankprompt(&[
        "optimize",
        "--config",
        p(&config),
        "--mock-script",
        p(&script),
        "--steps",
        "1",
        "--data",
        p(&sessions("ml1m")),
        "--out",
        p(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("run_config.json"))).unwrap();
    assert_eq!(run["steps"], 1);
    assert_eq!(run["beam"], 3);
    assert_eq!(run["optimizer"]["batch_size"], 15);
}

#[test]
fn cold_cache_only_run_lists_missing_digests() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let out = rankprompt(&[
        "evaluate",
        "--backend",
        "cache-only",
        "--cache",
        p(&cache),
        "--data",
        p(&sessions("games")),
        "--out",
        p(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cache miss"), "{stderr}");
    assert!(
        stderr
            .split(|c: char| !c.is_ascii_hexdigit())
            .any(|w| w.len() == 64),
        "{stderr}"
    );
}

#[test]
fn configuration_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let data = sessions("games");

    let no_script = rankprompt(&[
        "optimize",
        "--backend",
        "mock",
        "--data",
        p(&data),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(no_script.status.code(), Some(2));

    let expert = dir.path().join("expert.txt");
    std::fs::write(&expert, "Rank well.").unwrap();
    let one_expert = rankprompt(&[
        "fuse",
        "--backend",
        "mock",
        "--mock-script",
        p(&fixture("mock/fuse.json")),
        "--expert",
        p(&expert),
        "--data",
        p(&data),
        "--data",
        p(&sessions("bundle")),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(one_expert.status.code(), Some(2));

    let bad_toml = dir.path().join("bad.toml");
    std::fs::write(&bad_toml, "stepz = 3\n").unwrap();
    let unknown = rankprompt(&[
        "optimize",
        "--config",
        p(&bad_toml),
        "--data",
        p(&data),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(unknown.status.code(), Some(2));

    let missing = rankprompt(&[
        "optimize",
        "--backend",
        "mock",
        "--mock-script",
        p(&fixture("mock/optimize.json")),
        "--data",
        p(&dir.path().join("absent.jsonl")),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn evaluate_compare_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let data = sessions("bundle");
    let script = fixture("mock/optimize.json");
    let eval = |name: &str, prompt: Option<&Path>, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec![
            "evaluate",
            "--backend",
            "mock",
            "--mock-script",
            p(&script),
            "--data",
            p(&data),
        ];
        args.extend(["--out", p(&out_dir)]);
        if let Some(pr) = prompt {
            args.extend(["--prompt", p(pr)]);
        }
        args.extend(extra);
        let out = rankprompt(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        (out_dir, String::from_utf8(out.stdout).unwrap())
    };
    let (base, _) = eval("base", None, &[]);
    let better = dir.path().join("better.txt");
    std::fs::write(
        &better,
        "Rank candidates, treating numbers inside titles as part of the name.\n",
    )
    .unwrap();
    let base_report = base.join("report.json");
    let (cand, stdout) = eval("cand", Some(&better), &["--compare", p(&base_report)]);
    assert!(stdout.contains("NDCG@5"), "{stdout}");
    assert!(stdout.contains('%'), "{stdout}");
    for file in [
        "report.json",
        "outcomes.jsonl",
        "diagnostics.csv",
        "run_config.json",
    ] {
        assert!(cand.join(file).exists(), "{file}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&read(&cand.join("report.json"))).unwrap();
    assert!(report["gains"].is_object());

    let diag = rankprompt(&["diagnose", p(&base_report), p(&cand.join("report.json"))]);
    assert!(diag.status.success());
    assert!(String::from_utf8_lossy(&diag.stdout).contains("Bundle"));
}

#[test]
fn exclude_policy_never_lowers_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = sessions("games");
    // Sessions opening with every other title answer in prose, the rest rank the truth third.
    let text = String::from_utf8(read(&data)).unwrap();
    let mut rules: Vec<serde_json::Value> = Vec::new();
    for line in text.lines().step_by(2) {
        let session: serde_json::Value = serde_json::from_str(line).unwrap();
        let first = session["items"][0]["title"].as_str().unwrap();
        rules.push(serde_json::json!({
            "contains": format!("Current session interactions: [0:\"{first}\""),
            "reply": "I would start with the newest console title."
        }));
    }
    rules.push(
        serde_json::json!({"contains": "Candidate item set: ", "reply": {"ground_truth_at": 3}}),
    );
    let script = dir.path().join("mixed.json");
    std::fs::write(&script, serde_json::json!({ "rules": rules }).to_string()).unwrap();

    let metrics = |policy: &str| {
        let out_dir = dir.path().join(policy);
        let out = rankprompt(&[
            "evaluate",
            "--backend",
            "mock",
            "--mock-script",
            p(&script),
            "--miss-policy",
            policy,
            "--data",
            p(&data),
            "--split",
            "all",
            "--out",
            p(&out_dir),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report: serde_json::Value =
            serde_json::from_slice(&read(&out_dir.join("report.json"))).unwrap();
        report["report"]["metrics"].as_array().unwrap().clone()
    };
    let zero = metrics("zero");
    let exclude = metrics("exclude");
    assert!(zero[0]["hr"].as_f64().unwrap() < 1.0);
    for (z, e) in zero.iter().zip(&exclude) {
        assert!(e["hr"].as_f64().unwrap() >= z["hr"].as_f64().unwrap());
        assert!(e["ndcg"].as_f64().unwrap() >= z["ndcg"].as_f64().unwrap());
    }
}

#[test]
fn ingest_groups_rows_into_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("raw/games_interactions.csv");
    let before = read(&input);
    let output = dir.path().join("games.jsonl");
    let out = rankprompt(&[
        "ingest",
        "--input",
        p(&input),
        "--domain",
        "Games",
        "--output",
        p(&output),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("12 sessions"));
    let text = String::from_utf8(read(&output)).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert_eq!(read(&input), before);
}

#[test]
fn replay_from_warm_cache_over_http() {
    let server = fake_llm();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let data = sessions("games");
    let run = |out_dir: &Path| {
        let out = rankprompt(&[
            "optimize",
            "--backend",
            "http",
            "--base-url",
            &server.base_url,
            "--cache",
            p(&cache),
            "--steps",
            "2",
            "--seed",
            "3",
            "--data",
            p(&data),
            "--out",
            p(out_dir),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let (cold, warm) = (dir.path().join("cold"), dir.path().join("warm"));
    run(&cold);
    assert!(server.hits() > 0);
    server.reset();
    run(&warm);
    assert_eq!(server.hits(), 0);
    for file in ["history.jsonl", "best_prompt.txt", "best_prompt.json"] {
        assert_eq!(read(&cold.join(file)), read(&warm.join(file)), "{file}");
    }
}
