use std::collections::HashSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rankprompt_core::dataset::{
    build_candidate_set, build_instances, chronological_split, load_instances, load_sessions,
    write_instances, Catalog, DatasetError, Domain, Item, NegativeSampling, Session,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn session(id: &str, ts: i64, items: &[&str]) -> Session {
    Session {
        session_id: id.into(),
        timestamp: ts,
        domain: Domain::Games,
        items: items
            .iter()
            .map(|i| Item::new(*i, format!("Title {i}")))
            .collect(),
    }
}

proptest! {
    #[test]
    fn split_is_an_ordered_partition(stamps in prop::collection::vec(0i64..40, 10..120)) {
        let sessions: Vec<Session> = stamps
            .iter()
            .enumerate()
            .map(|(i, &t)| session(&format!("s{i:03}"), t, &["a", "b"]))
            .collect();
        let n = sessions.len();
        let split = chronological_split(sessions.clone()).unwrap();
        prop_assert_eq!(split.train.len(), n * 8 / 10);
        prop_assert_eq!(split.validation.len(), n / 10);
        prop_assert_eq!(split.train.len() + split.validation.len() + split.test.len(), n);

        let all: Vec<&Session> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
        for pair in all.windows(2) {
            prop_assert!((pair[0].timestamp, &pair[0].session_id) <= (pair[1].timestamp, &pair[1].session_id));
        }
        let ids: HashSet<&str> = all.iter().map(|s| s.session_id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
    }
}

#[test]
fn twenty_three_sessions() {
    let sessions: Vec<Session> = (0..23)
        .rev()
        .map(|i| session(&format!("s{i:02}"), i, &["a", "b"]))
        .collect();
    let split = chronological_split(sessions).unwrap();
    assert_eq!(
        (split.train.len(), split.validation.len(), split.test.len()),
        (18, 2, 3)
    );
    assert_eq!(split.train[0].session_id, "s00");
    assert_eq!(split.test[2].session_id, "s22");
}

#[test]
fn too_few_sessions() {
    let sessions: Vec<Session> = (0..9)
        .map(|i| session(&format!("s{i}"), i, &["a", "b"]))
        .collect();
    assert!(matches!(
        chronological_split(sessions),
        Err(DatasetError::InsufficientData(9))
    ));
}

fn catalog(n: usize) -> Catalog {
    Catalog::from_items((0..n).map(|i| Item::new(format!("i{i:03}"), format!("Item {i}"))))
}

/// Pearson chi-square of the ground-truth position over `builds` pools of 20.
/// The 0.999 quantile of chi-square with 19 degrees of freedom is 43.82.
#[test]
fn ground_truth_position_is_uniform() {
    let cat = catalog(60);
    let mut counts = [0usize; 20];
    let builds = 10_000;
    for i in 0..builds {
        let s = session(&format!("u{i}"), 0, &["i000", "i001", "i002"]);
        let inst = build_candidate_set(&s, &cat, 20, 5, NegativeSampling::Uniform).unwrap();
        counts[inst.ground_truth_index()] += 1;
    }
    let expected = builds as f64 / 20.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 43.82, "chi-square {chi2:.2} for counts {counts:?}");
}

#[test]
fn pools_exclude_the_session_and_are_seeded() {
    let cat = catalog(40);
    let s = session("x", 0, &["i001", "i002", "i003", "i004"]);
    for sampling in [NegativeSampling::Uniform, NegativeSampling::Popularity] {
        let a = build_candidate_set(&s, &cat, 20, 9, sampling).unwrap();
        let b = build_candidate_set(&s, &cat, 20, 9, sampling).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pool_size(), 20);
        assert_eq!(a.ground_truth().id, "i004");
        let ids: HashSet<&str> = a
            .candidate_set
            .candidates
            .iter()
            .map(|c| c.id.as_str())
            .collect();
        assert_eq!(ids.len(), 20);
        for held in ["i001", "i002", "i003"] {
            assert!(!ids.contains(held));
        }
    }
    let small = catalog(10);
    assert!(matches!(
        build_candidate_set(&s, &small, 20, 9, NegativeSampling::Uniform),
        Err(DatasetError::CatalogTooSmall { .. })
    ));
}

#[test]
fn fixture_corpora() {
    for (file, domain) in [
        ("ml1m.jsonl", Domain::Ml1m),
        ("games.jsonl", Domain::Games),
        ("bundle.jsonl", Domain::Bundle),
    ] {
        let (sessions, stats) =
            load_sessions(fixture(&format!("sessions/{file}")), Some(&domain)).unwrap();
        assert_eq!(stats.sessions, 50);
        let total: usize = sessions.iter().map(|s| s.items.len()).sum();
        assert!((stats.avg_length - total as f64 / 50.0).abs() < 1e-12);
        let split = chronological_split(sessions.clone()).unwrap();
        let cat = Catalog::from_sessions(&sessions);
        let train = build_instances(&split.train, &cat, 20, 0, NegativeSampling::Uniform).unwrap();
        assert_eq!(train.len(), 40);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.jsonl");
        write_instances(&path, &train).unwrap();
        assert_eq!(load_instances(&path).unwrap(), train);
    }
    assert!(load_sessions(fixture("sessions/games.jsonl"), Some(&Domain::Bundle)).is_err());
}
