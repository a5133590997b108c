//! Session corpora, chronological splitting, candidate pools and the
//! textual input block sent with every ranking prompt.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::templates::INPUT_DATA;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}: no sessions")]
    EmptyCorpus(String),
    #[error("need at least 10 sessions to split, got {0}")]
    InsufficientData(usize),
    #[error("session {session_id}: catalog has {available} eligible negatives, {needed} needed")]
    CatalogTooSmall {
        session_id: String,
        available: usize,
        needed: usize,
    },
    #[error("session {0} has fewer than two items")]
    SessionTooShort(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Ml1m,
    Games,
    Bundle,
    Custom(String),
}

impl Domain {
    pub fn as_str(&self) -> &str {
        match self {
            Domain::Ml1m => "ML-1M",
            Domain::Games => "Games",
            Domain::Bundle => "Bundle",
            Domain::Custom(s) => s,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ML-1M" | "ml-1m" | "ml1m" => Domain::Ml1m,
            "Games" | "games" => Domain::Games,
            "Bundle" | "bundle" => Domain::Bundle,
            other => Domain::Custom(other.to_string()),
        })
    }
}

impl Serialize for Domain {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub title: String,
}

impl Item {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        Item {
            id: id.into(),
            title: title.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub timestamp: i64,
    pub domain: Domain,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub items: usize,
    pub sessions: usize,
    pub avg_length: f64,
}

impl CorpusStats {
    pub fn of(sessions: &[Session]) -> Self {
        let distinct: HashSet<&str> = sessions
            .iter()
            .flat_map(|s| s.items.iter().map(|i| i.id.as_str()))
            .collect();
        let total: usize = sessions.iter().map(|s| s.items.len()).sum();
        CorpusStats {
            items: distinct.len(),
            sessions: sessions.len(),
            avg_length: if sessions.is_empty() {
                0.0
            } else {
                total as f64 / sessions.len() as f64
            },
        }
    }
}

/// Loads a JSON-lines session file. When `expected` is given, every record
/// must carry that domain.
pub fn load_sessions(
    path: impl AsRef<Path>,
    expected: Option<&Domain>,
) -> Result<(Vec<Session>, CorpusStats), DatasetError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut sessions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| DatasetError::MalformedRecord {
            path: shown.clone(),
            line: i + 1,
            reason,
        };
        let session: Session = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if session.items.is_empty() {
            return Err(malformed("session has no items".into()));
        }
        if let Some(domain) = expected {
            if &session.domain != domain {
                return Err(malformed(format!(
                    "domain {} where {domain} was expected",
                    session.domain
                )));
            }
        }
        sessions.push(session);
    }
    if sessions.is_empty() {
        return Err(DatasetError::EmptyCorpus(shown));
    }
    let stats = CorpusStats::of(&sessions);
    Ok((sessions, stats))
}

pub fn write_sessions(path: impl AsRef<Path>, sessions: &[Session]) -> Result<(), DatasetError> {
    write_jsonl(path, sessions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
}

/// Sorts by `(timestamp, session_id)` and splits 8:1:1. Train and
/// validation sizes are floored; the remainder goes to test.
pub fn chronological_split(mut sessions: Vec<Session>) -> Result<Split, DatasetError> {
    let n = sessions.len();
    if n < 10 {
        return Err(DatasetError::InsufficientData(n));
    }
    sessions.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.session_id.cmp(&b.session_id))
    });
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = sessions.split_off(n_train + n_val);
    let validation = sessions.split_off(n_train);
    Ok(Split {
        train: sessions,
        validation,
        test,
    })
}

/// Deduplicated item universe with interaction counts.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<Item>,
    popularity: Vec<u64>,
}

impl Catalog {
    pub fn from_sessions<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> Self {
        let mut counts: BTreeMap<String, (Item, u64)> = BTreeMap::new();
        for s in sessions {
            for item in &s.items {
                counts
                    .entry(item.id.clone())
                    .or_insert_with(|| (item.clone(), 0))
                    .1 += 1;
            }
        }
        let (items, popularity) = counts.into_values().unzip();
        Catalog { items, popularity }
    }

    pub fn from_items(items: impl IntoIterator<Item = Item>) -> Self {
        let mut map: BTreeMap<String, Item> = BTreeMap::new();
        for item in items {
            map.entry(item.id.clone()).or_insert(item);
        }
        let items: Vec<Item> = map.into_values().collect();
        let popularity = vec![1; items.len()];
        Catalog { items, popularity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSampling {
    #[default]
    Uniform,
    Popularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Item>,
    pub ground_truth_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub prefix: Session,
    #[serde(flatten)]
    pub candidate_set: CandidateSet,
}

impl EvalInstance {
    pub fn id(&self) -> &str {
        &self.prefix.session_id
    }

    pub fn domain(&self) -> &Domain {
        &self.prefix.domain
    }

    /// Stable manifest key, unique across domains.
    pub fn key(&self) -> String {
        format!("{}/{}", self.prefix.domain, self.prefix.session_id)
    }

    pub fn pool_size(&self) -> usize {
        self.candidate_set.candidates.len()
    }

    pub fn ground_truth_index(&self) -> usize {
        self.candidate_set.ground_truth_index
    }

    pub fn ground_truth(&self) -> &Item {
        &self.candidate_set.candidates[self.candidate_set.ground_truth_index]
    }

    pub fn candidate_titles(&self) -> Vec<&str> {
        self.candidate_set
            .candidates
            .iter()
            .map(|c| c.title.as_str())
            .collect()
    }

    /// The candidate list as it appears after `Candidate item set: `.
    pub fn candidate_line(&self) -> String {
        indexed_list(&self.candidate_set.candidates)
    }
}

/// Generator keyed by `(seed, key)` so draws do not depend on iteration order.
pub(crate) fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Holds out the last item as ground truth and samples `pool_size - 1`
/// negatives without replacement from catalog items outside the session.
pub fn build_candidate_set(
    session: &Session,
    catalog: &Catalog,
    pool_size: usize,
    seed: u64,
    sampling: NegativeSampling,
) -> Result<EvalInstance, DatasetError> {
    assert!(pool_size >= 1, "pool_size must be positive");
    if session.items.len() < 2 {
        return Err(DatasetError::SessionTooShort(session.session_id.clone()));
    }
    let (truth, prefix_items) = session.items.split_last().expect("non-empty");
    let in_session: HashSet<&str> = session.items.iter().map(|i| i.id.as_str()).collect();
    let eligible: Vec<usize> = (0..catalog.items.len())
        .filter(|&i| !in_session.contains(catalog.items[i].id.as_str()))
        .collect();
    let needed = pool_size - 1;
    if eligible.len() < needed {
        return Err(DatasetError::CatalogTooSmall {
            session_id: session.session_id.clone(),
            available: eligible.len(),
            needed,
        });
    }
    let mut rng = keyed_rng(seed, &session.session_id);
    let chosen: Vec<usize> = match sampling {
        NegativeSampling::Uniform => eligible
            .choose_multiple(&mut rng, needed)
            .copied()
            .collect(),
        NegativeSampling::Popularity => eligible
            .choose_multiple_weighted(&mut rng, needed, |&i| catalog.popularity[i] as f64)
            .map_err(|e| DatasetError::CatalogTooSmall {
                session_id: format!("{} ({e})", session.session_id),
                available: eligible.len(),
                needed,
            })?
            .copied()
            .collect(),
    };
    let mut candidates: Vec<Item> = chosen.iter().map(|&i| catalog.items[i].clone()).collect();
    candidates.push(truth.clone());
    candidates.shuffle(&mut rng);
    let ground_truth_index = candidates
        .iter()
        .position(|c| c.id == truth.id)
        .expect("ground truth was inserted");
    Ok(EvalInstance {
        prefix: Session {
            session_id: session.session_id.clone(),
            timestamp: session.timestamp,
            domain: session.domain.clone(),
            items: prefix_items.to_vec(),
        },
        candidate_set: CandidateSet {
            candidates,
            ground_truth_index,
            seed,
        },
    })
}

/// Builds instances for every session with at least two items; shorter
/// sessions are skipped.
pub fn build_instances(
    sessions: &[Session],
    catalog: &Catalog,
    pool_size: usize,
    seed: u64,
    sampling: NegativeSampling,
) -> Result<Vec<EvalInstance>, DatasetError> {
    sessions
        .iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| build_candidate_set(s, catalog, pool_size, seed, sampling))
        .collect()
}

fn indexed_list(items: &[Item]) -> String {
    let body: Vec<String> = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let quoted = serde_json::to_string(&item.title).expect("strings serialize");
            format!("{i}:{quoted}")
        })
        .collect();
    format!("[{}]", body.join(", "))
}

/// Two-line input block: the indexed session prefix, then the indexed
/// candidates. Titles are JSON-quoted.
pub fn render_input(instance: &EvalInstance) -> String {
    INPUT_DATA
        .render(&[
            ("session", &indexed_list(&instance.prefix.items)),
            ("candidates", &instance.candidate_line()),
        ])
        .expect("both placeholders supplied")
}

pub fn write_instances(
    path: impl AsRef<Path>,
    instances: &[EvalInstance],
) -> Result<(), DatasetError> {
    write_jsonl(path, instances)
}

pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<EvalInstance>, DatasetError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EvalInstance =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if inst.ground_truth_index() >= inst.pool_size() {
            return Err(DatasetError::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: "ground_truth_index outside the candidate pool".into(),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
