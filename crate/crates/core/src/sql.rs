//! WikiSQL-dialect logical forms and their token-level formulation.
//!
//! A schema is rendered as `<col0> name : type <col1> ...` and a query as
//! `select [agg (] <colI> [)] from table [where <colJ> op ` value ` [and ...]]`.
//! Column entities are anonymised to their separator token, values are fenced
//! with backtick tokens, and punctuation is split from words so the source and
//! target share one whitespace tokenisation.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of AND-joined conditions in the grammar.
pub const MAX_CONDITIONS: usize = 4;

pub const SELECT: &str = "select";
pub const FROM: &str = "from";
pub const TABLE: &str = "table";
pub const WHERE: &str = "where";
pub const AND: &str = "and";
pub const LPAREN: &str = "(";
pub const RPAREN: &str = ")";
pub const BACKTICK: &str = "`";
pub const UNK: &str = "<unk>";
pub const TYPE_SEP: &str = ":";

/// Every keyword and punctuation token the query grammar can emit.
pub const SQL_KEYWORDS: &[&str] = &[
    SELECT, FROM, TABLE, WHERE, AND, "max", "min", "count", "sum", "avg", LPAREN, RPAREN, "=",
    ">", "<",
];

/// Tokens used by the schema template besides column words.
pub const SCHEMA_KEYWORDS: &[&str] = &[TYPE_SEP, "text", "real"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SqlError {
    #[error("column index {index} is outside a schema of {width} columns")]
    UnknownColumn { index: usize, width: usize },
    #[error("parse error at token {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("query has {0} conditions, at most {MAX_CONDITIONS} allowed")]
    TooManyConditions(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Real,
}

impl ColumnType {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Text => "text",
            ColumnType::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Some(ColumnType::Text),
            "real" => Some(ColumnType::Real),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub index: usize,
    pub name: String,
    pub col_type: ColumnType,
}

impl Column {
    /// The name as formulation tokens (lower-cased, punctuation split).
    pub fn name_tokens(&self) -> Vec<String> {
        tokenize(&self.name.to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub table_id: String,
    columns: Vec<Column>,
}

impl Schema {
    /// Builds a schema, re-indexing columns by position.
    pub fn new(
        table_id: impl Into<String>,
        columns: impl IntoIterator<Item = (String, ColumnType)>,
    ) -> Result<Self, SqlError> {
        let columns: Vec<Column> = columns
            .into_iter()
            .enumerate()
            .map(|(index, (name, col_type))| Column { index, name, col_type })
            .collect();
        if columns.is_empty() {
            return Err(SqlError::InvalidSchema("schema has no columns".into()));
        }
        if let Some(c) = columns.iter().find(|c| tokenize(&c.name).is_empty()) {
            return Err(SqlError::InvalidSchema(format!("column {} has an empty name", c.index)));
        }
        Ok(Schema { table_id: table_id.into(), columns })
    }

    /// Schema that may be empty; erosion can remove every column.
    pub(crate) fn from_columns_unchecked(table_id: String, columns: Vec<Column>) -> Self {
        let columns = columns
            .into_iter()
            .enumerate()
            .map(|(index, c)| Column { index, ..c })
            .collect();
        Schema { table_id, columns }
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, index: usize) -> Option<&Column> {
        self.columns.get(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Aggregation {
    None,
    Max,
    Min,
    Count,
    Sum,
    Avg,
}

impl Aggregation {
    /// Ordered as in the WikiSQL `agg` field.
    pub const ALL: [Aggregation; 6] = [
        Aggregation::None,
        Aggregation::Max,
        Aggregation::Min,
        Aggregation::Count,
        Aggregation::Sum,
        Aggregation::Avg,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn keyword(self) -> Option<&'static str> {
        match self {
            Aggregation::None => None,
            Aggregation::Max => Some("max"),
            Aggregation::Min => Some("min"),
            Aggregation::Count => Some("count"),
            Aggregation::Sum => Some("sum"),
            Aggregation::Avg => Some("avg"),
        }
    }

    fn from_keyword(tok: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.keyword() == Some(tok))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    Eq,
    Gt,
    Lt,
}

impl Operator {
    /// Ordered as in the WikiSQL `conds` operator field.
    pub const ALL: [Operator; 3] = [Operator::Eq, Operator::Gt, Operator::Lt];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Eq => "=",
            Operator::Gt => ">",
            Operator::Lt => "<",
        }
    }

    fn from_symbol(tok: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.symbol() == tok)
    }
}

/// A column reference: a schema ordinal or the `<unk>` mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ColumnRef {
    Index(usize),
    Unknown,
}

impl ColumnRef {
    pub fn token(self) -> String {
        match self {
            ColumnRef::Index(i) => column_token(i),
            ColumnRef::Unknown => UNK.to_string(),
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        if tok == UNK {
            Some(ColumnRef::Unknown)
        } else {
            parse_column_token(tok).map(ColumnRef::Index)
        }
    }

    pub fn index(self) -> Option<usize> {
        match self {
            ColumnRef::Index(i) => Some(i),
            ColumnRef::Unknown => None,
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub column: ColumnRef,
    pub op: Operator,
    pub value: String,
}

impl Condition {
    pub fn new(column: usize, op: Operator, value: impl Into<String>) -> Self {
        Condition { column: ColumnRef::Index(column), op, value: value.into() }
    }

    fn sort_key(&self) -> (ColumnRef, Operator, &str) {
        (self.column, self.op, self.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SqlQuery {
    pub select: ColumnRef,
    pub agg: Aggregation,
    pub conditions: Vec<Condition>,
}

impl SqlQuery {
    pub fn new(select: usize, agg: Aggregation, conditions: Vec<Condition>) -> Self {
        SqlQuery { select: ColumnRef::Index(select), agg, conditions }
    }

    /// Every column the query mentions, SELECT first.
    pub fn column_refs(&self) -> impl Iterator<Item = ColumnRef> + '_ {
        std::iter::once(self.select).chain(self.conditions.iter().map(|c| c.column))
    }

    /// Rewrites every column reference through `f`.
    pub fn map_columns(&self, mut f: impl FnMut(ColumnRef) -> ColumnRef) -> SqlQuery {
        SqlQuery {
            select: f(self.select),
            agg: self.agg,
            conditions: self
                .conditions
                .iter()
                .map(|c| Condition { column: f(c.column), ..c.clone() })
                .collect(),
        }
    }

    /// Values rewritten to their formulation form (what a parse would return).
    pub fn normalized(&self) -> SqlQuery {
        SqlQuery {
            conditions: self
                .conditions
                .iter()
                .map(|c| Condition { value: normalize_value(&c.value), ..c.clone() })
                .collect(),
            ..self.clone()
        }
    }
}

impl fmt::Display for SqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_query(self).join(" "))
    }
}

pub fn column_token(i: usize) -> String {
    format!("<col{i}>")
}

pub fn parse_column_token(tok: &str) -> Option<usize> {
    let digits = tok.strip_prefix("<col")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

pub fn is_column_entity(tok: &str) -> bool {
    tok == UNK || parse_column_token(tok).is_some()
}

/// Length of a `<marker>` token (`<col3>`, `<unk>`, `<2sql>`) at the start of `chars`.
fn marker_len(chars: &[char]) -> Option<usize> {
    let close = chars.iter().position(|&c| c == '>')?;
    let inner = &chars[1..close];
    (!inner.is_empty() && inner.iter().all(|c| c.is_ascii_alphanumeric() || *c == '_')).then_some(close + 1)
}

/// Whitespace tokenisation with punctuation split off words.
///
/// Runs of alphanumerics form words; `.` and `,` stay inside a word when they
/// sit between two digits so numeric literals such as `3.0` or `1,200`
/// survive intact. Marker tokens such as `<col1>` are kept whole. Any other
/// non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut skip_to = 0;
    for (i, &ch) in chars.iter().enumerate() {
        if i < skip_to {
            continue;
        }
        if ch == '<' && word.is_empty() {
            if let Some(len) = marker_len(&chars[i..]) {
                out.push(chars[i..i + len].iter().collect());
                skip_to = i + len;
                continue;
            }
        }
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        let joins_digits = (ch == '.' || ch == ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())
            && !word.is_empty();
        if joins_digits {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Tokens of a condition value as they appear between the backtick fences.
/// Quote characters surrounding or inside the value are dropped.
pub fn value_tokens(value: &str) -> Vec<String> {
    let stripped: String = value.chars().filter(|c| !matches!(c, '`' | '"')).collect();
    tokenize(&stripped)
}

pub fn normalize_value(value: &str) -> String {
    value_tokens(value).join(" ")
}

/// `<coli> [col name] : [col type]` for every column, in order.
pub fn serialize_schema(schema: &Schema) -> Vec<String> {
    let mut out = Vec::new();
    for col in schema.columns() {
        out.push(column_token(col.index));
        out.extend(col.name_tokens());
        out.push(TYPE_SEP.to_string());
        out.push(col.col_type.as_str().to_string());
    }
    out
}

/// Canonical token sequence of `query` checked against `schema`.
pub fn serialize_sql(query: &SqlQuery, schema: &Schema) -> Result<Vec<String>, SqlError> {
    for col in query.column_refs() {
        if let ColumnRef::Index(index) = col {
            if index >= schema.len() {
                return Err(SqlError::UnknownColumn { index, width: schema.len() });
            }
        }
    }
    if query.conditions.len() > MAX_CONDITIONS {
        return Err(SqlError::TooManyConditions(query.conditions.len()));
    }
    Ok(render_query(query))
}

/// Renders without schema validation.
pub fn render_query(query: &SqlQuery) -> Vec<String> {
    let mut out = vec![SELECT.to_string()];
    match query.agg.keyword() {
        Some(kw) => {
            out.push(kw.to_string());
            out.push(LPAREN.to_string());
            out.push(query.select.token());
            out.push(RPAREN.to_string());
        }
        None => out.push(query.select.token()),
    }
    out.push(FROM.to_string());
    out.push(TABLE.to_string());
    for (i, cond) in query.conditions.iter().enumerate() {
        out.push(if i == 0 { WHERE } else { AND }.to_string());
        out.push(cond.column.token());
        out.push(cond.op.symbol().to_string());
        out.push(BACKTICK.to_string());
        out.extend(value_tokens(&cond.value));
        out.push(BACKTICK.to_string());
    }
    out
}

/// Conditions sorted by (column, operator, value).
pub fn canonicalize(query: &SqlQuery) -> SqlQuery {
    let mut q = query.clone();
    q.conditions.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    q
}

/// What the grammar expects next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Select,
    AggOrColumn,
    AggOpen,
    AggColumn,
    AggClose,
    From,
    Table,
    WhereOrEnd,
    CondColumn,
    CondOp,
    ValueOpen,
    ValueBody,
    AndOrEnd,
    /// No further tokens are grammatical; only end of sequence.
    End,
}

impl Slot {
    /// Positions inside a WHERE condition (column, operator or value span).
    pub fn in_where_clause(self) -> bool {
        matches!(self, Slot::CondColumn | Slot::CondOp | Slot::ValueOpen | Slot::ValueBody)
    }

    /// Positions that name the SELECT column.
    pub fn is_select_column(self) -> bool {
        matches!(self, Slot::AggOrColumn | Slot::AggColumn)
    }
}

/// Incremental recogniser for the query grammar.
///
/// Feeding tokens one at a time gives the next expected [`Slot`], which
/// execution-guided decoding uses to decide where to branch.
#[derive(Debug, Clone)]
pub struct SqlParser {
    slot: Slot,
    consumed: usize,
    select: Option<ColumnRef>,
    agg: Aggregation,
    conditions: Vec<Condition>,
    pending_col: Option<ColumnRef>,
    pending_op: Option<Operator>,
    value: Vec<String>,
}

impl Default for SqlParser {
    fn default() -> Self {
        Self::new()
    }
}

impl SqlParser {
    pub fn new() -> Self {
        SqlParser {
            slot: Slot::Select,
            consumed: 0,
            select: None,
            agg: Aggregation::None,
            conditions: Vec::new(),
            pending_col: None,
            pending_op: None,
            value: Vec::new(),
        }
    }

    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn conditions_done(&self) -> usize {
        self.conditions.len()
    }

    fn error(&self, reason: impl Into<String>) -> SqlError {
        SqlError::Parse { position: self.consumed, reason: reason.into() }
    }

    fn expect(&self, tok: &str, want: &str) -> Result<(), SqlError> {
        if tok == want {
            Ok(())
        } else {
            Err(self.error(format!("expected `{want}`, found `{tok}`")))
        }
    }

    fn column(&self, tok: &str) -> Result<ColumnRef, SqlError> {
        ColumnRef::from_token(tok)
            .ok_or_else(|| self.error(format!("expected a column token, found `{tok}`")))
    }

    pub fn push(&mut self, tok: &str) -> Result<(), SqlError> {
        self.slot = match self.slot {
            Slot::Select => {
                self.expect(tok, SELECT)?;
                Slot::AggOrColumn
            }
            Slot::AggOrColumn => {
                if let Some(agg) = Aggregation::from_keyword(tok) {
                    self.agg = agg;
                    Slot::AggOpen
                } else {
                    self.select = Some(self.column(tok)?);
                    Slot::From
                }
            }
            Slot::AggOpen => {
                self.expect(tok, LPAREN)?;
                Slot::AggColumn
            }
            Slot::AggColumn => {
                self.select = Some(self.column(tok)?);
                Slot::AggClose
            }
            Slot::AggClose => {
                self.expect(tok, RPAREN)?;
                Slot::From
            }
            Slot::From => {
                self.expect(tok, FROM)?;
                Slot::Table
            }
            Slot::Table => {
                self.expect(tok, TABLE)?;
                Slot::WhereOrEnd
            }
            Slot::WhereOrEnd => {
                self.expect(tok, WHERE)?;
                Slot::CondColumn
            }
            Slot::CondColumn => {
                self.pending_col = Some(self.column(tok)?);
                Slot::CondOp
            }
            Slot::CondOp => {
                let op = Operator::from_symbol(tok)
                    .ok_or_else(|| self.error(format!("expected an operator, found `{tok}`")))?;
                self.pending_op = Some(op);
                Slot::ValueOpen
            }
            Slot::ValueOpen => {
                self.expect(tok, BACKTICK)?;
                Slot::ValueBody
            }
            Slot::ValueBody => {
                if tok == BACKTICK {
                    let column = self.pending_col.take().expect("column precedes value");
                    let op = self.pending_op.take().expect("operator precedes value");
                    let value = std::mem::take(&mut self.value).join(" ");
                    self.conditions.push(Condition { column, op, value });
                    if self.conditions.len() == MAX_CONDITIONS {
                        Slot::End
                    } else {
                        Slot::AndOrEnd
                    }
                } else {
                    self.value.push(tok.to_string());
                    Slot::ValueBody
                }
            }
            Slot::AndOrEnd => {
                self.expect(tok, AND)?;
                Slot::CondColumn
            }
            Slot::End => return Err(self.error(format!("unexpected trailing token `{tok}`"))),
        };
        self.consumed += 1;
        Ok(())
    }

    /// Whether the sequence may end here.
    pub fn can_finish(&self) -> bool {
        matches!(self.slot, Slot::WhereOrEnd | Slot::AndOrEnd | Slot::End)
    }

    pub fn finish(self) -> Result<SqlQuery, SqlError> {
        if !self.can_finish() {
            return Err(self.error(format!("sequence ends while expecting {:?}", self.slot)));
        }
        Ok(SqlQuery {
            select: self.select.expect("select column parsed before FROM"),
            agg: self.agg,
            conditions: self.conditions,
        })
    }
}

/// Parses a generated token sequence and checks column ordinals against `schema`.
pub fn parse_sql<S: AsRef<str>>(tokens: &[S], schema: &Schema) -> Result<SqlQuery, SqlError> {
    let query = parse_tokens(tokens)?;
    for col in query.column_refs() {
        if let ColumnRef::Index(index) = col {
            if index >= schema.len() {
                return Err(SqlError::UnknownColumn { index, width: schema.len() });
            }
        }
    }
    Ok(query)
}

/// Grammar-only parse without a schema.
pub fn parse_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<SqlQuery, SqlError> {
    let mut parser = SqlParser::new();
    for tok in tokens {
        parser.push(tok.as_ref())?;
    }
    parser.finish()
}

/// Total order used by [`canonicalize`], exposed for callers that sort conditions.
pub fn condition_order(a: &Condition, b: &Condition) -> Ordering {
    a.sort_key().cmp(&b.sort_key())
}
