//! Schema-aware denoising: erosion of the schema with a joint rewrite of the
//! target query, entity shuffling, optional text infilling, and the per-sample
//! pipeline that turns a record into a training instance.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{ExampleRecord, TableStore};
use crate::sql::{self, is_column_entity, ColumnRef, Schema, SqlQuery};

pub const TO_SQL: &str = "<2sql>";
pub const TO_NL: &str = "<2nl>";
pub const MASK: &str = "<mask>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_add: f64,
    pub p_shuffle: f64,
    pub p_swap: f64,
    /// Master switch for erosion (off for the shuffle-only ablation).
    pub erosion_enabled: bool,
    /// Reorder entities in the reconstruction branch.
    pub shuffle_enabled: bool,
    /// Mask spans in the reconstruction branch.
    pub infilling_enabled: bool,
    /// Also treat condition values in questions as shuffle entities.
    pub shuffle_values: bool,
    pub infill_rate: f64,
    pub infill_mean_span: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_drop: 0.1,
            p_add: 0.1,
            p_shuffle: 0.3,
            p_swap: 0.5,
            erosion_enabled: true,
            shuffle_enabled: true,
            infilling_enabled: false,
            shuffle_values: false,
            infill_rate: 0.15,
            infill_mean_span: 3.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// Plain sequence-to-sequence formulation: no noise at all.
    pub fn none() -> Self {
        NoiseConfig {
            p_drop: 0.0,
            p_add: 0.0,
            p_shuffle: 0.0,
            p_swap: 0.0,
            erosion_enabled: false,
            shuffle_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_drop", self.p_drop),
            ("p_add", self.p_add),
            ("p_shuffle", self.p_shuffle),
            ("p_swap", self.p_swap),
            ("infill_rate", self.infill_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        if self.infill_mean_span <= 0.0 {
            return Err("infill_mean_span must be positive".into());
        }
        Ok(())
    }

    fn reconstruction_enabled(&self) -> bool {
        self.shuffle_enabled || self.infilling_enabled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    ToSql,
    ToNl,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::ToSql => TO_SQL,
            Direction::ToNl => TO_NL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub direction: Direction,
}

impl TrainingInstance {
    /// The clean text-to-SQL instance used at inference time.
    pub fn inference(question: &[String], schema: &Schema) -> Vec<String> {
        let mut source = vec![TO_SQL.to_string()];
        source.extend(question.iter().cloned());
        source.extend(sql::serialize_schema(schema));
        source
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErosionOutcome {
    pub eroded_schema: Schema,
    /// `index_map[old]` is the new ordinal of an original column, `None` if removed.
    pub index_map: Vec<Option<usize>>,
    pub modified_query: SqlQuery,
    pub modified_sql: Vec<String>,
}

/// Permutes, drops and adds columns, then rewrites the query's column tokens.
///
/// Separator tokens stay in ascending order; erosion changes which column
/// occupies each slot. Removed gold columns become `<unk>`. Addition draws a
/// column from another table in `foreign` and is skipped when none exists.
pub fn erode<R: Rng + ?Sized>(
    schema: &Schema,
    query: &SqlQuery,
    p_drop: f64,
    p_add: f64,
    foreign: Option<&TableStore>,
    rng: &mut R,
) -> ErosionOutcome {
    // Slots hold Some(original index) or None for an added foreign column.
    let mut order: Vec<usize> = (0..schema.len()).collect();
    order.shuffle(rng);
    let mut slots: Vec<(Option<usize>, sql::Column)> = Vec::with_capacity(order.len() + 1);
    for old in order {
        if p_drop > 0.0 && rng.random_bool(p_drop) {
            continue;
        }
        slots.push((Some(old), schema.columns()[old].clone()));
    }
    if p_add > 0.0 && rng.random_bool(p_add) {
        if let Some(store) = foreign {
            if let Ok(col) = store.sample_foreign_column(rng, &schema.table_id) {
                let at = rng.random_range(0..=slots.len());
                slots.insert(at, (None, col));
            }
        }
    }
    let mut index_map = vec![None; schema.len()];
    for (new, (old, _)) in slots.iter().enumerate() {
        if let Some(old) = old {
            index_map[*old] = Some(new);
        }
    }
    let eroded_schema = Schema::from_columns_unchecked(
        schema.table_id.clone(),
        slots.into_iter().map(|(_, c)| c).collect(),
    );
    let modified_query = query.map_columns(|c| match c {
        ColumnRef::Index(i) => index_map.get(i).copied().flatten().map_or(ColumnRef::Unknown, ColumnRef::Index),
        ColumnRef::Unknown => ColumnRef::Unknown,
    });
    let modified_sql = sql::render_query(&modified_query);
    ErosionOutcome { eroded_schema, index_map, modified_query, modified_sql }
}

/// Half-open token ranges that shuffle may reorder.
pub type Spans = Vec<(usize, usize)>;

/// Column entities of a serialized query: every `<coli>` / `<unk>` token.
pub fn sql_entity_spans(tokens: &[String]) -> Spans {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| is_column_entity(t))
        .map(|(i, _)| (i, i + 1))
        .collect()
}

/// Column mentions in a question: longest non-overlapping matches of column
/// names, plus condition values when `values` is given.
pub fn nl_entity_spans(tokens: &[String], schema: &Schema, values: Option<&SqlQuery>) -> Spans {
    let mut phrases: Vec<Vec<String>> = schema.columns().iter().map(|c| c.name_tokens()).collect();
    if let Some(q) = values {
        phrases.extend(q.conditions.iter().map(|c| sql::value_tokens(&c.value)));
    }
    phrases.retain(|p| !p.is_empty());
    phrases.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    phrases.dedup();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = phrases
            .iter()
            .find(|p| tokens.len() - i >= p.len() && tokens[i..i + p.len()] == p[..]);
        match hit {
            Some(p) => {
                spans.push((i, i + p.len()));
                i += p.len();
            }
            None => i += 1,
        }
    }
    spans
}

/// Reorders the entity spans uniformly at random; every other token keeps
/// its relative order. Fewer than two spans leaves the sequence unchanged.
pub fn shuffle_entities<R: Rng + ?Sized>(tokens: &[String], spans: &[(usize, usize)], rng: &mut R) -> Vec<String> {
    if spans.len() < 2 {
        return tokens.to_vec();
    }
    let mut perm: Vec<usize> = (0..spans.len()).collect();
    perm.shuffle(rng);
    let mut out = Vec::with_capacity(tokens.len());
    let mut cursor = 0;
    for (slot, &(start, end)) in spans.iter().enumerate() {
        out.extend_from_slice(&tokens[cursor..start]);
        let (s, e) = spans[perm[slot]];
        out.extend_from_slice(&tokens[s..e]);
        cursor = end;
    }
    out.extend_from_slice(&tokens[cursor..]);
    out
}

/// Replaces random contiguous spans with a single `<mask>` until roughly
/// `rate` of the tokens are covered. Span lengths are Poisson(`mean_span`).
pub fn apply_infilling<R: Rng + ?Sized>(tokens: &[String], rate: f64, mean_span: f64, rng: &mut R) -> Vec<String> {
    let n = tokens.len();
    let budget = (rate * n as f64).round() as usize;
    if budget == 0 || n == 0 {
        return tokens.to_vec();
    }
    let poisson = Poisson::new(mean_span).expect("mean span is positive");
    let mut masked = vec![false; n];
    let mut span_start = vec![false; n];
    let mut covered = 0;
    let mut attempts = 0;
    while covered < budget && attempts < 10 * n {
        attempts += 1;
        let len = (poisson.sample(rng) as usize).clamp(1, budget - covered);
        let start = rng.random_range(0..n);
        let end = (start + len).min(n);
        if masked[start..end].iter().any(|&m| m)
            || (start > 0 && masked[start - 1])
            || (end < n && masked[end])
        {
            continue;
        }
        masked[start..end].iter_mut().for_each(|m| *m = true);
        span_start[start] = true;
        covered += end - start;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if span_start[i] {
            out.push(MASK.to_string());
        } else if !masked[i] {
            out.push(tokens[i].clone());
        }
    }
    out
}

/// Which way the sample went through the noising pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchTrace {
    pub reconstruction: bool,
    pub swapped: bool,
}

/// One pass of the denoising pipeline over a record.
///
/// Erosion always applies (when enabled). With probability `p_shuffle` the
/// sample becomes a reconstruction task: with probability `p_swap` the
/// question becomes the target, and the source is the noised target.
pub fn make_instance<R: Rng + ?Sized>(
    record: &ExampleRecord,
    schema: &Schema,
    cfg: &NoiseConfig,
    foreign: Option<&TableStore>,
    rng: &mut R,
) -> TrainingInstance {
    make_instance_traced(record, schema, cfg, foreign, rng).0
}

pub fn make_instance_traced<R: Rng + ?Sized>(
    record: &ExampleRecord,
    schema: &Schema,
    cfg: &NoiseConfig,
    foreign: Option<&TableStore>,
    rng: &mut R,
) -> (TrainingInstance, BranchTrace) {
    let question = record.question_tokens();
    let (sql_tokens, eroded) = if cfg.erosion_enabled {
        let e = erode(schema, &record.gold, cfg.p_drop, cfg.p_add, foreign, rng);
        (e.modified_sql, e.eroded_schema)
    } else {
        (sql::render_query(&record.gold), schema.clone())
    };
    let mut trace = BranchTrace::default();
    let mut src = question;
    let mut tgt = sql_tokens;
    let mut tgt_is_sql = true;
    if cfg.reconstruction_enabled() && cfg.p_shuffle > 0.0 && rng.random_bool(cfg.p_shuffle) {
        trace.reconstruction = true;
        if cfg.p_swap > 0.0 && rng.random_bool(cfg.p_swap) {
            std::mem::swap(&mut src, &mut tgt);
            tgt_is_sql = false;
            trace.swapped = true;
        }
        let mut noised = tgt.clone();
        if cfg.shuffle_enabled {
            let spans = if tgt_is_sql {
                sql_entity_spans(&noised)
            } else {
                let values = cfg.shuffle_values.then_some(&record.gold);
                nl_entity_spans(&noised, schema, values)
            };
            noised = shuffle_entities(&noised, &spans, rng);
        }
        if cfg.infilling_enabled {
            noised = apply_infilling(&noised, cfg.infill_rate, cfg.infill_mean_span, rng);
        }
        src = noised;
    }
    let direction = if tgt_is_sql { Direction::ToSql } else { Direction::ToNl };
    let mut source = Vec::with_capacity(1 + src.len() + 4 * eroded.len());
    source.push(direction.prefix().to_string());
    source.extend(src);
    source.extend(sql::serialize_schema(&eroded));
    (TrainingInstance { source, target: tgt, direction }, trace)
}
