//! Pre-norm transformer encoder-decoder with a hybrid pointer-generator head.
//!
//! At each target step the decoder state is scored against the vocabulary
//! (affine map) and against every encoded source position (bilinear form).
//! The two score vectors are concatenated and normalised by one softmax, so
//! index `i < |V|` is vocabulary token `i` and index `|V| + j` copies source
//! position `j`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::{softmax_in_place, Tensor};
use crate::vocab::{align_tokens, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds the {max} supported positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("target position {0} has no vocabulary id or source copy")]
    Unsupervisable(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Hybrid pointer head; when off only vocabulary scores are produced.
    pub pointer: bool,
    /// Add the column separator's embedding to every token of its schema
    /// entry and to question spans that spell the column name exactly.
    pub column_tags: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 128,
            heads: 4,
            ff: 512,
            dropout: 0.1,
            max_positions: 256,
            pointer: true,
            column_tags: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.ff == 0 || self.layers == 0 {
            return bad("layers, hidden, heads and ff must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be divisible by the number of heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attn {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attn,
    norm2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attn,
    norm2: Norm,
    cross_attn: Attn,
    norm3: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: ParamId,
    out_b: ParamId,
    ptr_w: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    d: usize,
}

impl Builder<'_> {
    fn xavier(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> (ParamId, ParamId) {
        let w = self.xavier(format!("{name}.weight"), i, o);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(1, o));
        (w, b)
    }

    fn norm(&mut self, name: &str) -> Norm {
        let d = self.d;
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::from_vec(1, d, vec![1.0; d])),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn attn(&mut self, name: &str) -> Attn {
        let d = self.d;
        let (wq, bq) = self.linear(&format!("{name}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{name}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{name}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{name}.o"), d, d);
        Attn { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, name: &str, ff: usize) -> FeedForward {
        let (w1, b1) = self.linear(&format!("{name}.in"), self.d, ff);
        let (w2, b2) = self.linear(&format!("{name}.out"), ff, self.d);
        FeedForward { w1, b1, w2, b2 }
    }
}

// Parameter creation order is part of the checkpoint format.
fn build_layout(cfg: &ModelConfig, vocab_len: usize, store: &mut ParamStore) -> Layout {
    let d = cfg.hidden;
    let mut b = Builder { store, rng: ChaCha8Rng::seed_from_u64(cfg.init_seed), d };
    let embed = b.normal("embed", vocab_len, d, 1.0 / (d as f64).sqrt());
    let encoder = (0..cfg.layers)
        .map(|l| EncoderLayer {
            norm1: b.norm(&format!("encoder.{l}.norm1")),
            attn: b.attn(&format!("encoder.{l}.attn")),
            norm2: b.norm(&format!("encoder.{l}.norm2")),
            ffn: b.ffn(&format!("encoder.{l}.ffn"), cfg.ff),
        })
        .collect();
    let enc_norm = b.norm("encoder.norm");
    let decoder = (0..cfg.layers)
        .map(|l| DecoderLayer {
            norm1: b.norm(&format!("decoder.{l}.norm1")),
            self_attn: b.attn(&format!("decoder.{l}.self_attn")),
            norm2: b.norm(&format!("decoder.{l}.norm2")),
            cross_attn: b.attn(&format!("decoder.{l}.cross_attn")),
            norm3: b.norm(&format!("decoder.{l}.norm3")),
            ffn: b.ffn(&format!("decoder.{l}.ffn"), cfg.ff),
        })
        .collect();
    let dec_norm = b.norm("decoder.norm");
    let (out_w, out_b) = b.linear("output", d, vocab_len);
    let ptr_w = b.normal("pointer.weight", d, d, 1.0 / (d as f64).sqrt());
    Layout { embed, encoder, enc_norm, decoder, dec_norm, out_w, out_b, ptr_w }
}

fn sinusoidal(max_positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(max_positions, d);
    for pos in 0..max_positions {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            t.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Probabilities over `|V|` vocabulary entries followed by `|source|` copy positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridDistribution {
    pub probs: Vec<f64>,
    pub vocab_len: usize,
    pub source_len: usize,
}

impl HybridDistribution {
    pub fn vocab(&self) -> &[f64] {
        &self.probs[..self.vocab_len]
    }

    pub fn pointer(&self) -> &[f64] {
        &self.probs[self.vocab_len..]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Encoder output for one source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub states: Tensor,
    pub source: Vec<String>,
    pub source_ids: Vec<usize>,
}

/// Teacher-forced inputs and hybrid supervision for one instance.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub source_ids: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = build_layout(&config, vocab.len(), &mut params);
        let positions = sinusoidal(config.max_positions, config.hidden);
        Ok(Seq2Seq { config, vocab, params, layout, positions })
    }

    pub(crate) fn with_params(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self, String> {
        let fresh = Seq2Seq::new(config, vocab).map_err(|e| e.to_string())?;
        if fresh.params.names != params.names {
            return Err("parameter names do not match the model layout".into());
        }
        for (i, (a, b)) in fresh.params.values.iter().zip(&params.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(format!("parameter {} has shape {:?}, expected {:?}", params.names[i], b.shape(), a.shape()));
            }
        }
        Ok(Seq2Seq { params, ..fresh })
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.max_positions {
            Err(ModelError::SequenceTooLong { len, max: self.config.max_positions })
        } else {
            Ok(())
        }
    }

    /// Builds inputs and supervision; with the pointer off, targets outside
    /// the vocabulary are supervised as `<unk>`.
    pub fn prepare(&self, source: &[String], target: &[String]) -> Result<PreparedExample, ModelError> {
        self.check_len(source.len())?;
        self.check_len(target.len() + 1)?;
        let v = &self.vocab;
        let source_ids: Vec<usize> = source.iter().map(|t| v.input_id(t)).collect();
        let mut decoder_input = Vec::with_capacity(target.len() + 1);
        decoder_input.push(v.bos());
        decoder_input.extend(target.iter().map(|t| v.input_id(t)));
        let targets = if self.config.pointer {
            let align = align_tokens(source, target, v).map_err(|e| match e {
                crate::vocab::VocabError::UnsupervisablePosition(p) => ModelError::Unsupervisable(p),
                other => ModelError::InvalidConfig(other.to_string()),
            })?;
            align.positions.iter().map(|s| s.hybrid_indices(v.len())).collect()
        } else {
            target
                .iter()
                .map(|t| vec![v.input_id(t)])
                .chain(std::iter::once(vec![v.eos()]))
                .collect()
        };
        Ok(PreparedExample { source_ids, decoder_input, targets })
    }

    fn embed(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let d = self.config.hidden;
        let e = g.embed(self.layout.embed, ids);
        let e = g.scale(e, (d as f64).sqrt());
        let pe = Tensor::from_vec(ids.len(), d, self.positions.data[..ids.len() * d].to_vec());
        let pe = g.input(pe);
        let x = g.add(e, pe);
        g.dropout(x, self.config.dropout)
    }

    fn attention_block(&self, g: &mut Graph, x: Var, memory: Var, a: &Attn, causal: bool) -> Var {
        let q = g.linear(x, a.wq, a.bq);
        let k = g.linear(memory, a.wk, a.bk);
        let v = g.linear(memory, a.wv, a.bv);
        let h = g.attention(q, k, v, self.config.heads, causal);
        g.linear(h, a.wo, a.bo)
    }

    fn ffn_block(&self, g: &mut Graph, x: Var, f: &FeedForward) -> Var {
        let h = g.linear(x, f.w1, f.b1);
        let h = g.gelu(h);
        let h = g.dropout(h, self.config.dropout);
        g.linear(h, f.w2, f.b2)
    }

    fn residual(&self, g: &mut Graph, x: Var, sub: Var) -> Var {
        let sub = g.dropout(sub, self.config.dropout);
        g.add(x, sub)
    }

    /// Column separator id attached to each source position, if any.
    pub fn column_tags(&self, source_ids: &[usize]) -> Vec<Option<usize>> {
        let mut tags = vec![None; source_ids.len()];
        let (Some(col0), Some(colon)) = (self.vocab.id(&crate::sql::column_token(0)), self.vocab.id(":")) else {
            return tags;
        };
        let Some(start) = source_ids.iter().rposition(|&t| t == col0) else { return tags };
        let is_sep = |t: usize| (col0..col0 + crate::vocab::MAX_SCHEMA_COLUMNS).contains(&t);
        let mut names: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut in_name = false;
        for (j, &t) in source_ids.iter().enumerate().skip(start) {
            if is_sep(t) {
                names.push((t, Vec::new()));
                in_name = true;
            } else if t == colon {
                in_name = false;
            } else if in_name {
                names.last_mut().expect("separator seen").1.push(t);
            }
            tags[j] = names.last().map(|n| n.0);
        }
        let unk = self.vocab.unk();
        names.retain(|(_, n)| !n.is_empty() && !n.contains(&unk));
        names.sort_by_key(|(_, n)| std::cmp::Reverse(n.len()));
        let mut j = 0;
        while j < start {
            let hit = names.iter().find(|(_, n)| source_ids[j..start].starts_with(n));
            match hit {
                Some((sep, n)) => {
                    tags[j..j + n.len()].fill(Some(*sep));
                    j += n.len();
                }
                None => j += 1,
            }
        }
        tags
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, source_ids: &[usize]) -> Var {
        let mut x = self.embed(g, source_ids);
        if self.config.column_tags {
            let tags = self.column_tags(source_ids);
            if tags.iter().any(Option::is_some) {
                let e = g.embed_partial(self.layout.embed, &tags);
                let e = g.scale(e, (self.config.hidden as f64).sqrt());
                x = g.add(x, e);
            }
        }
        for layer in &self.layout.encoder {
            let h = g.layer_norm(x, layer.norm1.gain, layer.norm1.bias);
            let a = self.attention_block(g, h, h, &layer.attn, false);
            x = self.residual(g, x, a);
            let h = g.layer_norm(x, layer.norm2.gain, layer.norm2.bias);
            let f = self.ffn_block(g, h, &layer.ffn);
            x = self.residual(g, x, f);
        }
        g.layer_norm(x, self.layout.enc_norm.gain, self.layout.enc_norm.bias)
    }

    /// Hybrid scores for every decoder position: `T x (|V| [+ |source|])`.
    pub(crate) fn decode_graph(&self, g: &mut Graph, memory: Var, decoder_input: &[usize]) -> Var {
        let mut y = self.embed(g, decoder_input);
        for layer in &self.layout.decoder {
            let h = g.layer_norm(y, layer.norm1.gain, layer.norm1.bias);
            let a = self.attention_block(g, h, h, &layer.self_attn, true);
            y = self.residual(g, y, a);
            let h = g.layer_norm(y, layer.norm2.gain, layer.norm2.bias);
            let c = self.attention_block(g, h, memory, &layer.cross_attn, false);
            y = self.residual(g, y, c);
            let h = g.layer_norm(y, layer.norm3.gain, layer.norm3.bias);
            let f = self.ffn_block(g, h, &layer.ffn);
            y = self.residual(g, y, f);
        }
        let h = g.layer_norm(y, self.layout.dec_norm.gain, self.layout.dec_norm.bias);
        let vocab_scores = g.linear(h, self.layout.out_w, self.layout.out_b);
        if !self.config.pointer {
            return vocab_scores;
        }
        let w = g.param(self.layout.ptr_w);
        let hp = g.matmul(h, false, w, false);
        let ptr = g.matmul(hp, false, memory, true);
        let ptr = g.scale(ptr, 1.0 / (self.config.hidden as f64).sqrt());
        g.concat_cols(vocab_scores, ptr)
    }

    /// Loss node for one prepared example, scaled by `scale`.
    pub(crate) fn loss_graph(&self, g: &mut Graph, ex: &PreparedExample, scale: f64) -> Var {
        let memory = self.encode_graph(g, &ex.source_ids);
        let scores = self.decode_graph(g, memory, &ex.decoder_input);
        g.hybrid_nll(scores, ex.targets.clone(), scale)
    }

    /// Summed negative log-likelihood of the example and its parameter gradients.
    pub fn loss_and_grads(&self, ex: &PreparedExample, scale: f64, grads: &mut [crate::model::Tensor], dropout_seed: Option<u64>) -> f64 {
        let mut g = match dropout_seed {
            Some(seed) => Graph::training(&self.params, ChaCha8Rng::seed_from_u64(seed)),
            None => Graph::new(&self.params),
        };
        let loss = self.loss_graph(&mut g, ex, scale);
        g.backward(loss, 1.0, grads);
        g.value(loss).data[0]
    }

    /// Evaluation-mode loss without gradients.
    pub fn loss(&self, ex: &PreparedExample, scale: f64) -> f64 {
        let mut g = Graph::new(&self.params);
        let loss = self.loss_graph(&mut g, ex, scale);
        g.value(loss).data[0]
    }

    pub fn encode(&self, source: &[String]) -> Result<Encoded, ModelError> {
        self.check_len(source.len())?;
        let source_ids: Vec<usize> = source.iter().map(|t| self.vocab.input_id(t)).collect();
        let mut g = Graph::new(&self.params);
        let h = self.encode_graph(&mut g, &source_ids);
        Ok(Encoded { states: g.into_value(h), source: source.to_vec(), source_ids })
    }

    /// Next-token distribution given decoder input ids (starting with `<bos>`).
    pub fn decode_step(&self, enc: &Encoded, prefix: &[usize]) -> Result<HybridDistribution, ModelError> {
        self.decode_step_masked(enc, prefix, None)
    }

    /// As [`Self::decode_step`], with masked source positions forced to zero probability.
    pub fn decode_step_masked(
        &self,
        enc: &Encoded,
        prefix: &[usize],
        source_mask: Option<&[bool]>,
    ) -> Result<HybridDistribution, ModelError> {
        assert!(!prefix.is_empty(), "decoder prefix must start with <bos>");
        self.check_len(prefix.len())?;
        let mut g = Graph::new(&self.params);
        let memory = g.input(enc.states.clone());
        let scores = self.decode_graph(&mut g, memory, prefix);
        let s = g.value(scores);
        let mut probs = s.row(s.rows - 1).to_vec();
        let vocab_len = self.vocab.len();
        if let Some(mask) = source_mask {
            if self.config.pointer {
                for (j, &m) in mask.iter().enumerate() {
                    if m {
                        probs[vocab_len + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        softmax_in_place(&mut probs);
        let source_len = if self.config.pointer { enc.source.len() } else { 0 };
        Ok(HybridDistribution { probs, vocab_len, source_len })
    }
}
