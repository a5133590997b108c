//! Strict parsing of LLM ranking answers.
//!
//! A ranking answer must be a bracketed, comma-separated list of zero-based
//! candidate indices, e.g. `[3,0,4,1,2]`. Prose around the list is tolerated;
//! anything else inside the brackets (item names, quotes, numbered lines) is
//! not. Everything that does not yield a full permutation of the candidate
//! positions is reported as a [`ParseFailure`] with exactly one category.

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

const EXCERPT_CHARS: usize = 160;

/// A validated ranking: a permutation of `0..pool_size`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRanking", into = "RawRanking")]
pub struct Ranking {
    order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawRanking {
    order: Vec<usize>,
}

impl TryFrom<RawRanking> for Ranking {
    type Error = String;

    fn try_from(raw: RawRanking) -> Result<Self, Self::Error> {
        Ranking::from_order(raw.order).map_err(|f| f.detail)
    }
}

impl From<Ranking> for RawRanking {
    fn from(r: Ranking) -> Self {
        RawRanking { order: r.order }
    }
}

impl Ranking {
    /// Builds a ranking from an explicit order, checking the permutation invariant.
    pub fn from_order(order: Vec<usize>) -> Result<Self, ParseFailure> {
        let n = order.len();
        let text = render_list(&order);
        if n == 0 {
            return Err(ParseFailure::new(
                FailureCategory::IncompleteList,
                &text,
                "empty ranking",
            ));
        }
        let values: Vec<i64> = order.iter().map(|&v| v as i64).collect();
        let tokens: Vec<String> = order.iter().map(|v| v.to_string()).collect();
        validate(&values, &tokens, n, &text)
    }

    /// Identity ranking `[0, 1, ..., pool_size-1]`.
    pub fn identity(pool_size: usize) -> Self {
        assert!(pool_size >= 1, "pool_size must be positive");
        Ranking {
            order: (0..pool_size).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn pool_size(&self) -> usize {
        self.order.len()
    }

    /// Renders the ranking in the canonical `[a,b,c]` answer format.
    pub fn to_answer(&self) -> String {
        render_list(&self.order)
    }
}

fn render_list(order: &[usize]) -> String {
    let body: Vec<String> = order.iter().map(|v| v.to_string()).collect();
    format!("[{}]", body.join(","))
}

/// Failure categories. `NumericalConfusion` is only produced by
/// [`classify_failure`], never by [`parse_ranking`] itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureCategory {
    NonListOutput,
    DuplicateIndex,
    OutOfRangeIndex,
    IncompleteList,
    NumericalConfusion,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 5] = [
        FailureCategory::NonListOutput,
        FailureCategory::DuplicateIndex,
        FailureCategory::OutOfRangeIndex,
        FailureCategory::IncompleteList,
        FailureCategory::NumericalConfusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::NonListOutput => "NonListOutput",
            FailureCategory::DuplicateIndex => "DuplicateIndex",
            FailureCategory::OutOfRangeIndex => "OutOfRangeIndex",
            FailureCategory::IncompleteList => "IncompleteList",
            FailureCategory::NumericalConfusion => "NumericalConfusion",
        }
    }
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub category: FailureCategory,
    pub raw_excerpt: String,
    pub detail: String,
    /// The offending list element as it appeared in the answer, for
    /// out-of-range and duplicate failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offending: Option<String>,
}

impl ParseFailure {
    fn new(category: FailureCategory, raw: &str, detail: impl Into<String>) -> Self {
        ParseFailure {
            category,
            raw_excerpt: excerpt(raw),
            detail: detail.into(),
            offending: None,
        }
    }

    fn with_offending(mut self, token: &str) -> Self {
        self.offending = Some(token.to_string());
        self
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category, self.detail)
    }
}

impl std::error::Error for ParseFailure {}

fn excerpt(raw: &str) -> String {
    match raw.char_indices().nth(EXCERPT_CHARS) {
        Some((cut, _)) => format!("{}...", &raw[..cut]),
        None => raw.to_string(),
    }
}

fn list_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"\[\s*(?:-?[0-9]+\s*(?:,\s*-?[0-9]+\s*)*)?\]").expect("valid list regex")
    })
}

/// Parses an LLM answer into a ranking over `pool_size` candidates.
///
/// The first bracketed integer list in `raw` is taken as the answer. Elements
/// are checked left to right; the first violation (out of range, then
/// duplicate) determines the failure category. A list with no violation that
/// is shorter than `pool_size` is an `IncompleteList`.
pub fn parse_ranking(raw: &str, pool_size: usize) -> Result<Ranking, ParseFailure> {
    assert!(pool_size >= 1, "pool_size must be positive");
    let Some(found) = list_pattern().find(raw) else {
        return Err(ParseFailure::new(
            FailureCategory::NonListOutput,
            raw,
            "no bracketed integer list found",
        ));
    };
    let inner = &found.as_str()[1..found.as_str().len() - 1];
    let tokens: Vec<String> = inner
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    // Unparseable magnitudes saturate; they are out of range either way.
    let values: Vec<i64> = tokens
        .iter()
        .map(|t| {
            t.parse::<i64>().unwrap_or(if t.starts_with('-') {
                i64::MIN
            } else {
                i64::MAX
            })
        })
        .collect();
    validate(&values, &tokens, pool_size, raw)
}

/// Lossy variant for raw byte payloads.
pub fn parse_ranking_bytes(raw: &[u8], pool_size: usize) -> Result<Ranking, ParseFailure> {
    parse_ranking(&String::from_utf8_lossy(raw), pool_size)
}

fn validate(
    values: &[i64],
    tokens: &[String],
    pool_size: usize,
    raw: &str,
) -> Result<Ranking, ParseFailure> {
    let mut seen = vec![false; pool_size];
    for (pos, (&value, token)) in values.iter().zip(tokens).enumerate() {
        if value < 0 || value >= pool_size as i64 {
            return Err(ParseFailure::new(
                FailureCategory::OutOfRangeIndex,
                raw,
                format!(
                    "index {token} at position {pos} outside 0..{}",
                    pool_size - 1
                ),
            )
            .with_offending(token));
        }
        let slot = &mut seen[value as usize];
        if *slot {
            return Err(ParseFailure::new(
                FailureCategory::DuplicateIndex,
                raw,
                format!("index {token} repeated at position {pos}"),
            )
            .with_offending(token));
        }
        *slot = true;
    }
    if values.len() < pool_size {
        return Err(ParseFailure::new(
            FailureCategory::IncompleteList,
            raw,
            format!("{} of {pool_size} indices present", values.len()),
        ));
    }
    Ok(Ranking {
        order: values.iter().map(|&v| v as usize).collect(),
    })
}

/// Refines an out-of-range failure into `NumericalConfusion` when the
/// offending value appears as a whole numeral token in a candidate title
/// ("48" in "Pack of 48", but not in "148"). Other categories pass through.
pub fn classify_failure<S: AsRef<str>>(failure: ParseFailure, titles: &[S]) -> ParseFailure {
    if failure.category != FailureCategory::OutOfRangeIndex {
        return failure;
    }
    let Some(token) = failure.offending.as_deref() else {
        return failure;
    };
    if token.starts_with('-') {
        return failure;
    }
    let numerals: HashSet<&str> = titles
        .iter()
        .flat_map(|t| numeral_tokens(t.as_ref()))
        .collect();
    if numerals.contains(token) {
        let detail = format!(
            "{} (value {token} appears in a candidate title)",
            failure.detail
        );
        ParseFailure {
            category: FailureCategory::NumericalConfusion,
            detail,
            ..failure
        }
    } else {
        failure
    }
}

/// Splits a title on non-digit characters.
pub fn numeral_tokens(title: &str) -> impl Iterator<Item = &str> {
    title
        .split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
}

/// 1-based position of `target` in `ranking`.
pub fn rank_of(ranking: &Ranking, target: usize) -> usize {
    assert!(
        target < ranking.pool_size(),
        "target {target} outside pool of {}",
        ranking.pool_size()
    );
    ranking
        .order
        .iter()
        .position(|&v| v == target)
        .map(|i| i + 1)
        .expect("a permutation contains every index")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn category(raw: &str, n: usize) -> FailureCategory {
        parse_ranking(raw, n).unwrap_err().category
    }

    #[test]
    fn parses_permutations() {
        assert_eq!(
            parse_ranking("[3,0,4,1,2]", 5).unwrap().order(),
            &[3, 0, 4, 1, 2]
        );
        assert_eq!(
            parse_ranking("[0,1,2,3,4]", 5).unwrap().order(),
            &[0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn tolerates_prose_and_whitespace() {
        let raw = "Sure! Here is the ranking:\n[ 2,\n 0 , 1 ]\nHope this helps.";
        assert_eq!(parse_ranking(raw, 3).unwrap().order(), &[2, 0, 1]);
    }

    #[test]
    fn first_list_wins() {
        assert_eq!(
            parse_ranking("[1,0] or maybe [0,1]", 2).unwrap().order(),
            &[1, 0]
        );
        // A non-integer bracket group is skipped, not taken as the answer.
        let raw = "[0:\"Speed\"] -> [1,0]";
        assert_eq!(parse_ranking(raw, 2).unwrap().order(), &[1, 0]);
    }

    #[test]
    fn duplicate_index() {
        assert_eq!(category("[3,3,0,1,2]", 5), FailureCategory::DuplicateIndex);
    }

    #[test]
    fn item_name_output_is_not_a_list() {
        assert_eq!(
            category("1. Item A\n2. Item B", 5),
            FailureCategory::NonListOutput
        );
        assert_eq!(
            category("[\"Item A\", \"Item B\"]", 2),
            FailureCategory::NonListOutput
        );
        assert_eq!(category("", 2), FailureCategory::NonListOutput);
        assert_eq!(category("[1,2,]", 3), FailureCategory::NonListOutput);
    }

    #[test]
    fn range_and_length() {
        assert_eq!(category("[0,1,5]", 5), FailureCategory::OutOfRangeIndex);
        assert_eq!(category("[0,-1,2]", 3), FailureCategory::OutOfRangeIndex);
        assert_eq!(category("[0,1,2]", 5), FailureCategory::IncompleteList);
        assert_eq!(category("[]", 5), FailureCategory::IncompleteList);
        // longer than the pool with a valid prefix: the overflow repeats or leaves the range
        assert_eq!(category("[0,1,2,0]", 3), FailureCategory::DuplicateIndex);
        assert_eq!(category("[0,1,2,3]", 3), FailureCategory::OutOfRangeIndex);
        assert_eq!(
            category("[99999999999999999999999,0]", 2),
            FailureCategory::OutOfRangeIndex
        );
    }

    #[test]
    fn offending_token_is_recorded() {
        let f = parse_ranking("[48,0,1]", 20).unwrap_err();
        assert_eq!(f.offending.as_deref(), Some("48"));
    }

    #[test]
    fn numerical_confusion_reclassification() {
        let titles = ["Goya Mango Nectar (Pack of 48)", "USB Cable"];
        let f = parse_ranking("[48,0,1]", 20).unwrap_err();
        assert_eq!(
            classify_failure(f, &titles).category,
            FailureCategory::NumericalConfusion
        );

        let titles = ["Halo 3", "Xbox 360 Wireless Controller"];
        let f = parse_ranking("[360,1]", 20).unwrap_err();
        assert_eq!(
            classify_failure(f, &titles).category,
            FailureCategory::NumericalConfusion
        );
    }

    #[test]
    fn reclassification_matches_whole_tokens_only() {
        let titles = ["Pack of 148"];
        let f = parse_ranking("[48]", 20).unwrap_err();
        assert_eq!(
            classify_failure(f, &titles).category,
            FailureCategory::OutOfRangeIndex
        );

        let titles = ["Size -5 Shoes"];
        let f = parse_ranking("[-5]", 20).unwrap_err();
        assert_eq!(
            classify_failure(f, &titles).category,
            FailureCategory::OutOfRangeIndex
        );
    }

    #[test]
    fn other_categories_untouched() {
        let titles = ["Pack of 3"];
        let f = parse_ranking("[3,3,0,1,2]", 5).unwrap_err();
        assert_eq!(
            classify_failure(f, &titles).category,
            FailureCategory::DuplicateIndex
        );
    }

    #[test]
    fn rank_lookup() {
        let r = parse_ranking("[3,0,4,1,2]", 5).unwrap();
        assert_eq!(rank_of(&r, 3), 1);
        assert_eq!(rank_of(&r, 4), 3);
        assert_eq!(rank_of(&Ranking::identity(20), 19), 20);
    }

    #[test]
    #[should_panic]
    fn rank_lookup_out_of_pool_panics() {
        rank_of(&Ranking::identity(3), 3);
    }

    #[test]
    fn excerpt_is_char_safe() {
        let raw = "é".repeat(400);
        let f = parse_ranking(&raw, 3).unwrap_err();
        assert!(f.raw_excerpt.ends_with("..."));
    }

    #[test]
    fn ranking_serde_checks_invariant() {
        let ok: Ranking = serde_json::from_str(r#"{"order":[1,0]}"#).unwrap();
        assert_eq!(ok.order(), &[1, 0]);
        assert!(serde_json::from_str::<Ranking>(r#"{"order":[1,1]}"#).is_err());
    }
}
