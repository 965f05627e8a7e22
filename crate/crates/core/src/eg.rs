//! Clause-sensitive execution-guided decoding.
//!
//! Decoding keeps a single path except where the next token belongs to a
//! WHERE condition; there up to `k` alternatives branch. Completed
//! candidates are checked best-first: the first that parses and executes to
//! a non-empty result wins. With `agg_drop` the execution check runs on a
//! relaxed copy of the query (no aggregation, no inequality conditions), so
//! a COUNT that happily returns 0 over no matching rows is still rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Table;
use crate::executor::execute;
use crate::model::{beam_search_with, ModelError, Seq2Seq};
use crate::sql::{parse_sql, Aggregation, Operator, Schema, SqlParser, SqlQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EgMode {
    Off,
    Cs,
    Acs,
}

impl std::str::FromStr for EgMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(EgMode::Off),
            "cs" => Ok(EgMode::Cs),
            "acs" => Ok(EgMode::Acs),
            other => Err(format!("unknown EG mode `{other}` (expected off, cs or acs)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgPolicy {
    pub default_width: usize,
    /// Width at released positions; also the global beam cap.
    pub k: usize,
    pub agg_drop: bool,
    /// Also branch on the SELECT column.
    pub release_select: bool,
    pub max_len: usize,
}

impl Default for EgPolicy {
    fn default() -> Self {
        EgPolicy { default_width: 1, k: 5, agg_drop: false, release_select: false, max_len: 64 }
    }
}

impl EgPolicy {
    pub fn for_mode(mode: EgMode, k: usize) -> Self {
        match mode {
            EgMode::Off => EgPolicy { k: 1, ..Default::default() },
            EgMode::Cs => EgPolicy { k, ..Default::default() },
            EgMode::Acs => EgPolicy { k, agg_drop: true, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionClass {
    Default,
    Released,
}

#[derive(Debug, Error)]
pub enum EgError {
    #[error("none of the {0} candidates parses")]
    NoParseableCandidate(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Whether the token after `prefix` is released for branching.
/// Unparseable prefixes are treated as default positions.
pub fn classify_position<S: AsRef<str>>(prefix: &[S], policy: &EgPolicy) -> PositionClass {
    let mut parser = SqlParser::new();
    for tok in prefix {
        if parser.push(tok.as_ref()).is_err() {
            return PositionClass::Default;
        }
    }
    let slot = parser.slot();
    if slot.in_where_clause() || (policy.release_select && slot.is_select_column()) {
        PositionClass::Released
    } else {
        PositionClass::Default
    }
}

/// Relaxed copy used only to validate a candidate.
pub fn agg_drop_transform(query: &SqlQuery) -> SqlQuery {
    SqlQuery {
        select: query.select,
        agg: Aggregation::None,
        conditions: query.conditions.iter().filter(|c| c.op == Operator::Eq).cloned().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgOutcome {
    pub query: SqlQuery,
    /// No candidate passed execution; `query` is the best parseable one.
    pub degraded: bool,
    /// Rank of the returned candidate in the candidate list.
    pub rank: usize,
    pub candidates: usize,
}

/// Picks from candidates already ranked best-first.
pub fn select_candidate<S: AsRef<str>>(
    candidates: &[Vec<S>],
    schema: &Schema,
    table: &Table,
    agg_drop: bool,
) -> Result<EgOutcome, EgError> {
    let mut fallback: Option<(usize, SqlQuery)> = None;
    for (rank, tokens) in candidates.iter().enumerate() {
        let Ok(query) = parse_sql(tokens, schema) else {
            continue;
        };
        let check = if agg_drop { agg_drop_transform(&query) } else { query.clone() };
        match execute(&check, table) {
            Ok(rs) if !rs.is_empty() => {
                return Ok(EgOutcome { query, degraded: false, rank, candidates: candidates.len() });
            }
            Ok(_) => tracing::trace!(rank, "candidate executes empty"),
            Err(e) => tracing::trace!(rank, error = %e, "candidate fails to execute"),
        }
        fallback.get_or_insert((rank, query));
    }
    match fallback {
        Some((rank, query)) => Ok(EgOutcome { query, degraded: true, rank, candidates: candidates.len() }),
        None => Err(EgError::NoParseableCandidate(candidates.len())),
    }
}

/// Ranked candidate token sequences under `policy`.
pub fn eg_candidates(model: &Seq2Seq, source: &[String], policy: &EgPolicy) -> Result<Vec<Vec<String>>, ModelError> {
    let cap = policy.k.max(policy.default_width).max(1);
    let hyps = beam_search_with(model, source, policy.max_len, cap, |h| match classify_position(&h.tokens, policy) {
        PositionClass::Default => policy.default_width,
        PositionClass::Released => policy.k,
    })?;
    Ok(hyps.into_iter().map(|h| h.tokens).collect())
}

pub fn eg_decode(
    model: &Seq2Seq,
    source: &[String],
    schema: &Schema,
    table: &Table,
    policy: &EgPolicy,
) -> Result<EgOutcome, EgError> {
    let candidates = eg_candidates(model, source, policy)?;
    select_candidate(&candidates, schema, table, policy.agg_drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cell;
    use crate::sql::{Condition, ColumnType};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn table() -> Table {
        Table::new(
            "t",
            vec!["name".into(), "pts".into(), "team".into()],
            vec![ColumnType::Text, ColumnType::Real, ColumnType::Text],
            vec![
                vec![Cell::Text("ann".into()), Cell::Number(3.into()), Cell::Text("red".into())],
                vec![Cell::Text("bob".into()), Cell::Number(7.into()), Cell::Text("blue".into())],
            ],
        )
        .unwrap()
    }

    #[test]
    fn release_only_inside_where() {
        let p = EgPolicy::default();
        assert_eq!(classify_position(&toks("select <col0> from table where"), &p), PositionClass::Released);
        assert_eq!(classify_position(&toks("select <col0> from table where <col1>"), &p), PositionClass::Released);
        assert_eq!(classify_position(&toks("select <col0> from table where <col1> = ` 3"), &p), PositionClass::Released);
        assert_eq!(classify_position(&toks("select"), &p), PositionClass::Default);
        assert_eq!(classify_position(&toks("select <col0> from"), &p), PositionClass::Default);
        assert_eq!(classify_position(&toks("select <col0> from table where <col1> = ` 3 `"), &p), PositionClass::Default);
        assert_eq!(classify_position(&toks("select where"), &p), PositionClass::Default);
        let four = "select <col0> from table where <col1> = ` a ` and <col1> = ` b ` and <col1> = ` c ` and <col1> = ` d `";
        assert_eq!(classify_position(&toks(four), &p), PositionClass::Default);
        let wide = EgPolicy { release_select: true, ..p };
        assert_eq!(classify_position(&toks("select"), &wide), PositionClass::Released);
    }

    #[test]
    fn agg_drop_examples() {
        let q = SqlQuery::new(0, Aggregation::Count, vec![Condition::new(1, Operator::Eq, "a")]);
        assert_eq!(agg_drop_transform(&q), SqlQuery::new(0, Aggregation::None, vec![Condition::new(1, Operator::Eq, "a")]));
        let q = SqlQuery::new(0, Aggregation::None, vec![Condition::new(1, Operator::Gt, "3"), Condition::new(2, Operator::Eq, "x")]);
        assert_eq!(agg_drop_transform(&q).conditions, vec![Condition::new(2, Operator::Eq, "x")]);
        let q = SqlQuery::new(2, Aggregation::None, vec![Condition::new(1, Operator::Eq, "b")]);
        assert_eq!(agg_drop_transform(&q), q);
    }

    #[test]
    fn first_non_empty_candidate_wins() {
        let t = table();
        let s = t.schema();
        let cands = vec![
            toks("select <col0> from table where <col0> > ` 3 `"),
            toks("select <col0> from table where <col2> = ` green `"),
            toks("select <col0> from table where <col2> = ` blue `"),
        ];
        let out = select_candidate(&cands, &s, &t, false).unwrap();
        assert_eq!(out.rank, 2);
        assert!(!out.degraded);
    }

    #[test]
    fn all_failing_returns_degraded_top_parseable() {
        let t = table();
        let s = t.schema();
        let cands = vec![
            toks("select from"),
            toks("select <col0> from table where <col2> = ` green `"),
            toks("select <col5> from table"),
        ];
        let out = select_candidate(&cands, &s, &t, false).unwrap();
        assert!(out.degraded);
        assert_eq!(out.rank, 1);
        assert!(matches!(
            select_candidate(&[toks("from"), toks("select")], &s, &t, false),
            Err(EgError::NoParseableCandidate(2))
        ));
    }

    #[test]
    fn agg_drop_discards_zero_count() {
        let t = table();
        let s = t.schema();
        let zero = toks("select count ( <col0> ) from table where <col2> = ` green `");
        let good = toks("select <col0> from table where <col2> = ` red `");
        let plain = select_candidate(&[zero.clone(), good.clone()], &s, &t, false).unwrap();
        assert_eq!(plain.rank, 0);
        let relaxed = select_candidate(&[zero, good], &s, &t, true).unwrap();
        assert_eq!(relaxed.rank, 1);
        assert_eq!(relaxed.query.agg, Aggregation::None);
    }

    #[test]
    fn returned_query_is_untransformed() {
        let t = table();
        let s = t.schema();
        let c = toks("select max ( <col1> ) from table where <col2> = ` red ` and <col1> > ` 1 `");
        let out = select_candidate(&[c], &s, &t, true).unwrap();
        assert_eq!(out.query.agg, Aggregation::Max);
        assert_eq!(out.query.conditions.len(), 2);
    }
}
