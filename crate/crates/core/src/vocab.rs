//! Closed target vocabulary and pointer supervision.
//!
//! Ids are assigned specials first, then grammar tokens, then column words,
//! then question words by descending frequency (ties broken lexically).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CorpusSplit, TableStore};
use crate::noising::{TrainingInstance, MASK, TO_NL, TO_SQL};
use crate::sql::{self, column_token, tokenize};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Number of `<coli>` separator tokens in every vocabulary.
pub const MAX_SCHEMA_COLUMNS: usize = 64;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("target position {0} is neither in the vocabulary nor in the source")]
    UnsupervisablePosition(usize),
    #[error("vocabulary file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    Special,
    Sql,
    Schema,
    Question,
}

impl Partition {
    fn tag(self) -> &'static str {
        match self {
            Partition::Special => "special",
            Partition::Sql => "sql",
            Partition::Schema => "schema",
            Partition::Question => "question",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        [Partition::Special, Partition::Sql, Partition::Schema, Partition::Question]
            .into_iter()
            .find(|p| p.tag() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    partitions: Vec<Partition>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn empty() -> Self {
        Vocabulary { tokens: Vec::new(), partitions: Vec::new(), ids: HashMap::new() }
    }

    fn insert(&mut self, tok: &str, part: Partition) {
        if !self.ids.contains_key(tok) {
            self.ids.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
            self.partitions.push(part);
        }
    }

    fn with_fixed_tokens() -> Self {
        let mut v = Vocabulary::empty();
        for t in [PAD, BOS, EOS, sql::UNK, TO_SQL, TO_NL, sql::BACKTICK, MASK] {
            v.insert(t, Partition::Special);
        }
        for i in 0..MAX_SCHEMA_COLUMNS {
            v.insert(&column_token(i), Partition::Special);
        }
        for t in sql::SQL_KEYWORDS.iter().chain(sql::SCHEMA_KEYWORDS) {
            v.insert(t, Partition::Sql);
        }
        v
    }

    /// Column words from every table; question words with count ≥ `min_freq`.
    pub fn build(corpus: &CorpusSplit, tables: &TableStore, min_freq: usize) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut v = Vocabulary::with_fixed_tokens();
        let mut column_words: Vec<String> = tables
            .tables()
            .flat_map(|t| t.header.iter().flat_map(|h| tokenize(&h.to_lowercase())))
            .collect();
        column_words.sort();
        column_words.dedup();
        for w in &column_words {
            v.insert(w, Partition::Schema);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in &corpus.records {
            for t in r.question_tokens() {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in words {
            v.insert(&w, Partition::Question);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.ids.get(tok).copied()
    }

    /// Id for model input; out-of-vocabulary tokens read as `<unk>`.
    pub fn input_id(&self, tok: &str) -> usize {
        self.id(tok).unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn partition(&self, id: usize) -> Partition {
        self.partitions[id]
    }

    pub fn pad(&self) -> usize {
        self.ids[PAD]
    }

    pub fn bos(&self) -> usize {
        self.ids[BOS]
    }

    pub fn eos(&self) -> usize {
        self.ids[EOS]
    }

    pub fn unk(&self) -> usize {
        self.ids[sql::UNK]
    }

    /// Writes `token<TAB>partition`, one per line, in id order.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut w = BufWriter::new(File::create(path)?);
        for (t, p) in self.tokens.iter().zip(&self.partitions) {
            writeln!(w, "{t}\t{}", p.tag())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let mut v = Vocabulary::empty();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            let (tok, tag) = line.split_once('\t').ok_or_else(|| VocabError::Format {
                line: i + 1,
                reason: "expected token<TAB>partition".into(),
            })?;
            let part = Partition::from_tag(tag).ok_or_else(|| VocabError::Format {
                line: i + 1,
                reason: format!("unknown partition `{tag}`"),
            })?;
            if v.ids.contains_key(tok) {
                return Err(VocabError::Format { line: i + 1, reason: format!("duplicate token `{tok}`") });
            }
            v.insert(tok, part);
        }
        for required in [PAD, BOS, EOS, sql::UNK] {
            if !v.ids.contains_key(required) {
                return Err(VocabError::Format { line: 0, reason: format!("missing `{required}`") });
            }
        }
        Ok(v)
    }
}

/// Valid indices for one target position in the hybrid space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Supervision {
    pub vocab: Option<usize>,
    /// Source positions holding the same surface token.
    pub pointers: Vec<usize>,
}

impl Supervision {
    pub fn count(&self) -> usize {
        self.vocab.is_some() as usize + self.pointers.len()
    }

    /// Hybrid indices: vocabulary ids first, pointer `j` at `vocab_len + j`.
    pub fn hybrid_indices(&self, vocab_len: usize) -> Vec<usize> {
        self.vocab.into_iter().chain(self.pointers.iter().map(|p| vocab_len + p)).collect()
    }
}

/// Supervision for every target token followed by one for `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointerAlignment {
    pub positions: Vec<Supervision>,
}

pub fn align_targets(instance: &TrainingInstance, vocab: &Vocabulary) -> Result<PointerAlignment, VocabError> {
    align_tokens(&instance.source, &instance.target, vocab)
}

pub fn align_tokens(source: &[String], target: &[String], vocab: &Vocabulary) -> Result<PointerAlignment, VocabError> {
    let mut by_token: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in source.iter().enumerate() {
        by_token.entry(t.as_str()).or_default().push(j);
    }
    let mut positions = Vec::with_capacity(target.len() + 1);
    for (i, t) in target.iter().enumerate() {
        let s = Supervision {
            vocab: vocab.id(t),
            pointers: by_token.get(t.as_str()).cloned().unwrap_or_default(),
        };
        if s.count() == 0 {
            return Err(VocabError::UnsupervisablePosition(i));
        }
        positions.push(s);
    }
    positions.push(Supervision { vocab: Some(vocab.eos()), pointers: Vec::new() });
    Ok(PointerAlignment { positions })
}
