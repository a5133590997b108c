//! HR@k and NDCG@k for a single relevant item per session.
//!
//! With exactly one relevant item the ideal DCG is 1, so
//! `NDCG@k = 1 / log2(rank + 1)` when `rank <= k` and 0 otherwise. A miss
//! (unparseable answer under the zero policy) is passed as `None`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty set of sessions")]
    EmptyInput,
    #[error("sessions disagree on cutoffs: expected {expected:?}, found {found:?}")]
    NonUniformCutoffs {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

impl MetricPoint {
    /// Metric values for one session; `None` is a miss.
    pub fn at(rank: Option<usize>, k: usize) -> Self {
        match rank {
            Some(r) => MetricPoint {
                k,
                hr: hit_at_k(r, k),
                ndcg: ndcg_at_k(r, k),
            },
            None => MetricPoint {
                k,
                hr: 0.0,
                ndcg: 0.0,
            },
        }
    }
}

/// Per-session points for every cutoff in `ks`.
pub fn session_points(rank: Option<usize>, ks: &[usize]) -> Vec<MetricPoint> {
    ks.iter().map(|&k| MetricPoint::at(rank, k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub points: Vec<MetricPoint>,
}

impl EvalSummary {
    pub fn get(&self, k: usize) -> Option<&MetricPoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

/// Mean HR and NDCG per cutoff over a collection of sessions.
pub fn aggregate<S: AsRef<[MetricPoint]>>(sessions: &[S]) -> Result<EvalSummary, MetricsError> {
    let first = sessions.first().ok_or(MetricsError::EmptyInput)?.as_ref();
    let ks: Vec<usize> = first.iter().map(|p| p.k).collect();
    let mut hr = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    for session in sessions {
        let points = session.as_ref();
        if points.len() != ks.len() || points.iter().zip(&ks).any(|(p, k)| p.k != *k) {
            return Err(MetricsError::NonUniformCutoffs {
                expected: ks,
                found: points.iter().map(|p| p.k).collect(),
            });
        }
        for (i, p) in points.iter().enumerate() {
            hr[i] += p.hr;
            ndcg[i] += p.ndcg;
        }
    }
    let n = sessions.len() as f64;
    Ok(EvalSummary {
        count: sessions.len(),
        points: ks
            .iter()
            .enumerate()
            .map(|(i, &k)| MetricPoint {
                k,
                hr: hr[i] / n,
                ndcg: ndcg[i] / n,
            })
            .collect(),
    })
}
