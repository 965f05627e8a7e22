//! Metrics, evaluation runs and ablations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ExampleRecord, TableStore};
use crate::eg::{eg_decode, EgPolicy};
use crate::executor::{execute, results_equal};
use crate::model::train::{inference_source, validation_bleu};
use crate::model::{beam_search, train, ModelConfig, Seq2Seq, TrainConfig};
use crate::noising::NoiseConfig;
use crate::sql::{canonicalize, parse_sql, ColumnRef, Operator, SqlQuery};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::model::TrainError),
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Logical-form match after sorting conditions. Values compare exactly in
/// their formulation form.
pub fn acc_lf(pred: Option<&SqlQuery>, gold: &SqlQuery) -> bool {
    pred.is_some_and(|p| canonicalize(&p.normalized()) == canonicalize(&gold.normalized()))
}

/// Execution match; a prediction that fails to execute is wrong.
pub fn acc_ex(pred: Option<&SqlQuery>, gold: &SqlQuery, table: &crate::data::Table) -> bool {
    let Some(p) = pred else { return false };
    match (execute(p, table), execute(gold, table)) {
        (Ok(a), Ok(b)) => results_equal(&a, &b),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpMatch {
    /// `W_op` compares the multiset of (column, operator) pairs.
    #[default]
    WithColumn,
    /// `W_op` compares the multiset of operators alone.
    OperatorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComponentFlags {
    pub s_col: bool,
    pub s_agg: bool,
    pub w_col: bool,
    pub w_op: bool,
    pub w_val: bool,
}

fn sorted<T: Ord>(mut v: Vec<T>) -> Vec<T> {
    v.sort();
    v
}

pub fn component_scores(pred: Option<&SqlQuery>, gold: &SqlQuery, op_match: OpMatch) -> ComponentFlags {
    let Some(p) = pred else { return ComponentFlags::default() };
    let (p, g) = (p.normalized(), gold.normalized());
    let cols = |q: &SqlQuery| sorted(q.conditions.iter().map(|c| c.column).collect::<Vec<ColumnRef>>());
    let ops = |q: &SqlQuery| -> Vec<(Option<ColumnRef>, Operator)> {
        sorted(
            q.conditions
                .iter()
                .map(|c| (matches!(op_match, OpMatch::WithColumn).then_some(c.column), c.op))
                .collect(),
        )
    };
    let vals = |q: &SqlQuery| sorted(q.conditions.iter().map(|c| (c.column, c.op, c.value.clone())).collect::<Vec<_>>());
    ComponentFlags {
        s_col: p.select == g.select,
        s_agg: p.agg == g.agg,
        w_col: cols(&p) == cols(&g),
        w_op: ops(&p) == ops(&g),
        w_val: vals(&p) == vals(&g),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub index: usize,
    pub table_id: String,
    pub question: String,
    pub gold: String,
    /// Predicted token sequence as emitted.
    pub predicted: String,
    pub parsed: Option<SqlQuery>,
    pub lf: bool,
    pub ex: bool,
    pub components: ComponentFlags,
    pub degraded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentAccuracy {
    pub s_col: f64,
    pub s_agg: f64,
    pub w_col: f64,
    pub w_op: f64,
    pub w_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc_lf: f64,
    pub acc_ex: f64,
    pub components: ComponentAccuracy,
    pub bleu: Option<f64>,
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    pub fn from_verdicts(verdicts: Vec<Verdict>) -> Self {
        let n = verdicts.len();
        let frac = |f: &dyn Fn(&Verdict) -> bool| {
            if n == 0 {
                0.0
            } else {
                verdicts.iter().filter(|v| f(v)).count() as f64 / n as f64
            }
        };
        EvalReport {
            n,
            acc_lf: frac(&|v| v.lf),
            acc_ex: frac(&|v| v.ex),
            components: ComponentAccuracy {
                s_col: frac(&|v| v.components.s_col),
                s_agg: frac(&|v| v.components.s_agg),
                w_col: frac(&|v| v.components.w_col),
                w_op: frac(&|v| v.components.w_op),
                w_val: frac(&|v| v.components.w_val),
            },
            bleu: None,
            verdicts,
        }
    }

    /// Human-readable summary with percentages to one decimal.
    pub fn table(&self) -> String {
        let c = &self.components;
        let mut s = String::new();
        let _ = writeln!(s, "| n | Acc_lf | Acc_ex | S_col | S_agg | W_col | W_op | W_val |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            self.n,
            pct(self.acc_lf),
            pct(self.acc_ex),
            pct(c.s_col),
            pct(c.s_agg),
            pct(c.w_col),
            pct(c.w_op),
            pct(c.w_val)
        );
        if let Some(b) = self.bleu {
            let _ = writeln!(s, "BLEU: {b:.1}");
        }
        s
    }
}

pub fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
    Eg(EgPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<String>,
    pub query: Option<SqlQuery>,
    pub degraded: bool,
}

pub fn predict(
    model: &Seq2Seq,
    record: &ExampleRecord,
    tables: &TableStore,
    strategy: &DecodeStrategy,
    max_len: usize,
) -> EvalResult<Prediction> {
    let table = tables.get(&record.table_id)?;
    let schema = table.schema();
    let source = inference_source(record, tables)?;
    let tokens = match strategy {
        DecodeStrategy::Greedy => beam_search(model, &source, 1, max_len)?.remove(0).tokens,
        DecodeStrategy::Beam(k) => beam_search(model, &source, (*k).max(1), max_len)?.remove(0).tokens,
        DecodeStrategy::Eg(policy) => {
            let policy = EgPolicy { max_len, ..policy.clone() };
            return match eg_decode(model, &source, &schema, table, &policy) {
                Ok(out) => Ok(Prediction {
                    tokens: crate::sql::render_query(&out.query),
                    query: Some(out.query),
                    degraded: out.degraded,
                }),
                Err(crate::eg::EgError::NoParseableCandidate(_)) => {
                    let top = beam_search(model, &source, 1, max_len)?.remove(0).tokens;
                    Ok(Prediction { tokens: top, query: None, degraded: true })
                }
                Err(crate::eg::EgError::Model(e)) => Err(e.into()),
            };
        }
    };
    let query = parse_sql(&tokens, &schema).ok();
    Ok(Prediction { tokens, query, degraded: false })
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub max_len: usize,
    pub op_match: OpMatch,
    pub with_bleu: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { max_len: 64, op_match: OpMatch::WithColumn, with_bleu: false }
    }
}

pub fn verdict_for(index: usize, record: &ExampleRecord, pred: &Prediction, tables: &TableStore, op_match: OpMatch) -> EvalResult<Verdict> {
    let table = tables.get(&record.table_id)?;
    let q = pred.query.as_ref();
    Ok(Verdict {
        index,
        table_id: record.table_id.clone(),
        question: record.question.clone(),
        gold: record.gold.normalized().to_string(),
        predicted: pred.tokens.join(" "),
        parsed: pred.query.clone(),
        lf: acc_lf(q, &record.gold),
        ex: acc_ex(q, &record.gold, table),
        components: component_scores(q, &record.gold, op_match),
        degraded: pred.degraded,
    })
}

pub fn evaluate(
    model: &Seq2Seq,
    records: &[ExampleRecord],
    tables: &TableStore,
    strategy: &DecodeStrategy,
    opts: &EvalOptions,
) -> EvalResult<EvalReport> {
    let mut verdicts = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let pred = predict(model, r, tables, strategy, opts.max_len)?;
        verdicts.push(verdict_for(i, r, &pred, tables, opts.op_match)?);
    }
    let mut report = EvalReport::from_verdicts(verdicts);
    if opts.with_bleu {
        report.bleu = Some(validation_bleu(model, records, tables, opts.max_len)?);
    }
    Ok(report)
}

/// One configuration of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub pointer: bool,
    pub noise: NoiseConfig,
}

/// The six standard rows, derived from `base` (probabilities and seeds).
pub fn standard_rows(base: &NoiseConfig) -> Vec<AblationRow> {
    let off = NoiseConfig { erosion_enabled: false, shuffle_enabled: false, infilling_enabled: false, ..base.clone() };
    let row = |name: &str, pointer: bool, noise: NoiseConfig| AblationRow { name: name.into(), pointer, noise };
    vec![
        row("no-pointer", false, off.clone()),
        row("+pointer", true, off.clone()),
        row("+infilling", true, NoiseConfig { infilling_enabled: true, ..off.clone() }),
        row("shuffle-only", true, NoiseConfig { shuffle_enabled: true, ..off.clone() }),
        row("erosion-only", true, NoiseConfig { erosion_enabled: true, ..off.clone() }),
        row("full", true, NoiseConfig { erosion_enabled: true, shuffle_enabled: true, ..off }),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationData<'a> {
    pub train: &'a [ExampleRecord],
    pub valid: &'a [ExampleRecord],
    pub eval: &'a [ExampleRecord],
    pub tables: &'a TableStore,
    pub vocab: &'a Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    pub report: Result<EvalReport, String>,
}

/// Trains and evaluates every row for every seed. Row failures are recorded,
/// not propagated.
pub fn run_ablation(
    rows: &[AblationRow],
    seeds: &[u64],
    data: &AblationData<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    strategy: &DecodeStrategy,
    opts: &EvalOptions,
) -> Vec<AblationResult> {
    let mut out = Vec::new();
    for &seed in seeds {
        for row in rows {
            let run = || -> EvalResult<EvalReport> {
                let mcfg = ModelConfig { pointer: row.pointer, init_seed: seed, ..model_cfg.clone() };
                let mut model = Seq2Seq::new(mcfg, data.vocab.clone())?;
                let tcfg = TrainConfig { seed, ..train_cfg.clone() };
                let noise = NoiseConfig { seed, ..row.noise.clone() };
                train(&mut model, data.train, data.valid, data.tables, &noise, &tcfg)?;
                evaluate(&model, data.eval, data.tables, strategy, opts)
            };
            let report = run().map_err(|e| e.to_string());
            if let Err(e) = &report {
                tracing::warn!(row = %row.name, seed, error = %e, "ablation row failed");
            }
            out.push(AblationResult { row: row.name.clone(), seed, report });
        }
    }
    out
}

/// Mean metrics per row name across seeds, in first-seen row order.
pub fn summarize_ablation(results: &[AblationResult]) -> Vec<(String, usize, f64, f64)> {
    let mut names: Vec<String> = Vec::new();
    for r in results {
        if !names.contains(&r.row) {
            names.push(r.row.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let ok: Vec<&EvalReport> =
                results.iter().filter(|r| r.row == name).filter_map(|r| r.report.as_ref().ok()).collect();
            let k = ok.len().max(1) as f64;
            let lf = ok.iter().map(|r| r.acc_lf).sum::<f64>() / k;
            let ex = ok.iter().map(|r| r.acc_ex).sum::<f64>() / k;
            (name, ok.len(), lf, ex)
        })
        .collect()
}

pub fn ablation_markdown(results: &[AblationResult]) -> String {
    let mut s = String::from("| Model | runs | Acc_lf | Acc_ex |\n|---|---|---|---|\n");
    for (name, runs, lf, ex) in summarize_ablation(results) {
        let _ = writeln!(s, "| {name} | {runs} | {} | {} |", pct(lf), pct(ex));
    }
    s
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("row,seed,acc_lf,acc_ex,error\n");
    for r in results {
        match &r.report {
            Ok(rep) => {
                let _ = writeln!(s, "{},{},{:.4},{:.4},", r.row, r.seed, rep.acc_lf, rep.acc_ex);
            }
            Err(e) => {
                let _ = writeln!(s, "{},{},,,\"{}\"", r.row, r.seed, e.replace('"', "'"));
            }
        }
    }
    s
}
