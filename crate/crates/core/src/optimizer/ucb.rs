use std::cmp::Ordering;

use super::{ArmStats, PromptRecord};

/// UCB1 score `mean + c * sqrt(ln(total) / pulls)`; infinite for an unpulled arm.
pub fn ucb_score(stats: &ArmStats, total_pulls: u64, c: f64) -> f64 {
    match stats.mean() {
        None => f64::INFINITY,
        Some(mean) => {
            let total = total_pulls.max(1) as f64;
            mean + c * (total.ln() / stats.pulls as f64).sqrt()
        }
    }
}

/// Index of the record to pull next. Unpulled records go first, in list
/// order; otherwise the highest UCB score wins and ties go to the lowest
/// `prompt_id`.
pub fn ucb_select(records: &[PromptRecord], total_pulls: u64, c: f64) -> usize {
    assert!(!records.is_empty(), "ucb_select needs at least one record");
    if let Some(i) = records.iter().position(|r| r.arm_stats.pulls == 0) {
        return i;
    }
    let mut best = 0;
    let mut best_score = ucb_score(&records[0].arm_stats, total_pulls, c);
    for (i, r) in records.iter().enumerate().skip(1) {
        let score = ucb_score(&r.arm_stats, total_pulls, c);
        let better = match score.total_cmp(&best_score) {
            Ordering::Greater => true,
            Ordering::Equal => r.prompt_id < records[best].prompt_id,
            Ordering::Less => false,
        };
        if better {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Drops the lowest-scoring records until at most `width` remain. Survivors
/// keep their relative order.
pub fn prune(
    records: Vec<PromptRecord>,
    width: usize,
    total_pulls: u64,
    c: f64,
) -> Vec<PromptRecord> {
    if records.len() <= width {
        return records;
    }
    let mut ranked: Vec<(usize, f64)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (i, ucb_score(&r.arm_stats, total_pulls, c)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| records[a.0].prompt_id.cmp(&records[b.0].prompt_id))
    });
    let mut keep: Vec<usize> = ranked.into_iter().take(width).map(|(i, _)| i).collect();
    keep.sort_unstable();
    let mut slots: Vec<Option<PromptRecord>> = records.into_iter().map(Some).collect();
    keep.into_iter()
        .map(|i| slots[i].take().expect("each index kept once"))
        .collect()
}
