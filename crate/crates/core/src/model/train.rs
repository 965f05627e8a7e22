//! Mini-batch training with AdamW, warmup plus linear decay, gradient
//! clipping and early stopping on validation BLEU.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::beam::greedy;
use super::bleu::compute_bleu;
use super::graph::ParamStore;
use super::tensor::Tensor;
use super::transformer::{ModelError, PreparedExample, Seq2Seq};
use crate::data::{derive_seed, rng_for, DataError, ExampleRecord, TableStore};
use crate::noising::{make_instance, NoiseConfig, TrainingInstance};
use crate::sql::render_query;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_decode_len: usize,
    /// Validation examples decoded per epoch for BLEU.
    pub valid_limit: Option<usize>,
    /// Wall-clock limit; training stops after the epoch that crosses it.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_ratio: 0.01,
            schedule: Schedule::Linear,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            seed: 0,
            max_decode_len: 64,
            valid_limit: Some(200),
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("no trainable examples")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-token negative log-likelihood over the epoch.
    pub mean_loss: f64,
    pub valid_bleu: Option<f64>,
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_bleu: Option<f64>,
    pub stopped_early: bool,
}

/// AdamW with decoupled weight decay; biases and norm gains are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    pub step: usize,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay: params.names.iter().map(|n| !(n.ends_with(".bias") || n.ends_with(".gain"))).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, p) in params.values.iter_mut().enumerate() {
            let wd = if self.decay[i] { cfg.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for (k, x) in p.data.iter_mut().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *x);
            }
        }
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = ((cfg.warmup_ratio * total as f64).ceil() as usize).max(1);
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Linear => {
            let rest = total.saturating_sub(warmup).max(1);
            cfg.lr * (1.0 - (step - warmup) as f64 / rest as f64).max(0.0)
        }
    }
}

/// Scales gradients in place so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// The noised instance for `record` in `epoch`; fixed by the seeds alone.
pub fn epoch_instance(
    record: &ExampleRecord,
    index: usize,
    epoch: usize,
    tables: &TableStore,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<TrainingInstance, DataError> {
    let schema = tables.get(&record.table_id)?.schema();
    let mut rng = rng_for(derive_seed(seed, 0x401, noise.seed), epoch as u64, index as u64);
    Ok(make_instance(record, &schema, noise, Some(tables), &mut rng))
}

/// Clean text-to-SQL source for a record.
pub fn inference_source(record: &ExampleRecord, tables: &TableStore) -> Result<Vec<String>, DataError> {
    let schema = tables.get(&record.table_id)?.schema();
    Ok(TrainingInstance::inference(&record.question_tokens(), &schema))
}

/// Greedy-decoding BLEU of predicted against gold SQL tokens.
pub fn validation_bleu(
    model: &Seq2Seq,
    records: &[ExampleRecord],
    tables: &TableStore,
    max_len: usize,
) -> Result<f64, TrainError> {
    let mut hyps = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    for r in records {
        let src = inference_source(r, tables)?;
        hyps.push(greedy(model, &src, max_len)?.tokens);
        refs.push(render_query(&r.gold));
    }
    Ok(compute_bleu(&hyps, &refs))
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 0x0DE7, epoch as u64));
    order
}

pub fn train(
    model: &mut Seq2Seq,
    train_set: &[ExampleRecord],
    valid_set: &[ExampleRecord],
    tables: &TableStore,
    noise: &NoiseConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    noise.validate().map_err(TrainError::Config)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let started = Instant::now();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.params);
    let mut grads = model.params.zeros_like();
    let valid: &[ExampleRecord] = match cfg.valid_limit {
        Some(n) => &valid_set[..n.min(valid_set.len())],
        None => valid_set,
    };
    let mut report =
        TrainReport { history: Vec::new(), steps: 0, best_epoch: None, best_bleu: None, stopped_early: false };
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let order = shuffled_order(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut token_sum, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut prepared: Vec<(usize, PreparedExample)> = Vec::with_capacity(batch.len());
            for &i in batch {
                let inst = epoch_instance(&train_set[i], i, epoch, tables, noise, cfg.seed)?;
                match model.prepare(&inst.source, &inst.target) {
                    Ok(ex) => prepared.push((i, ex)),
                    Err(e) => {
                        tracing::debug!(record = i, error = %e, "skipping instance");
                        skipped += 1;
                    }
                }
            }
            let tokens: usize = prepared.iter().map(|(_, ex)| ex.targets.len()).sum();
            if tokens == 0 {
                continue;
            }
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 1.0 / tokens as f64;
            let mut batch_loss = 0.0;
            for (i, ex) in &prepared {
                let dropout_seed = derive_seed(cfg.seed, 0xD0, (epoch * train_set.len() + i) as u64);
                batch_loss += model.loss_and_grads(ex, scale, &mut grads, Some(dropout_seed));
            }
            let norm = clip_gradients(&mut grads, cfg.clip_norm);
            if !batch_loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::Diverged { epoch, step: report.steps });
            }
            let lr = lr_at(cfg, report.steps, total_steps);
            opt.update(&mut model.params, &grads, lr, cfg);
            report.steps += 1;
            loss_sum += batch_loss * tokens as f64;
            token_sum += tokens;
        }
        let valid_bleu = if valid.is_empty() {
            None
        } else {
            Some(validation_bleu(model, valid, tables, cfg.max_decode_len)?)
        };
        let stats = EpochStats {
            epoch,
            mean_loss: if token_sum > 0 { loss_sum / token_sum as f64 } else { f64::NAN },
            valid_bleu,
            skipped,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            loss = stats.mean_loss,
            bleu = ?stats.valid_bleu,
            seconds = stats.seconds,
            "epoch finished"
        );
        report.history.push(stats);
        if let Some(b) = valid_bleu {
            if report.best_bleu.is_none_or(|best| b > best) {
                report.best_bleu = Some(b);
                report.best_epoch = Some(epoch);
                best_params = Some(model.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience.max(1) {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        if cfg.time_budget_secs.is_some_and(|t| started.elapsed().as_secs_f64() >= t) {
            report.stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::ModelConfig;
    use crate::vocab::Vocabulary;

    fn setup(n: usize) -> (Seq2Seq, TableStore, Vec<ExampleRecord>) {
        let (tables, corpus) = gen_synthetic(11, 3, n);
        let vocab = Vocabulary::build(&corpus, &tables, 1).unwrap();
        let cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, ff: 32, dropout: 0.0, ..Default::default() };
        (Seq2Seq::new(cfg, vocab).unwrap(), tables, corpus.records)
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig { lr: 1.0, warmup_ratio: 0.1, ..Default::default() };
        assert!((lr_at(&cfg, 0, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 9, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 10, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 55, 100) - 0.5).abs() < 1e-12);
        assert!(lr_at(&cfg, 100, 100) == 0.0);
        let c = TrainConfig { schedule: Schedule::Constant, ..cfg };
        assert_eq!(lr_at(&c, 80, 100), 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 0.0]), Tensor::from_vec(1, 1, vec![4.0])];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        let after: f64 = g.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (mut m, tables, recs) = setup(6);
        let before = m.params.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let r = train(&mut m, &recs, &[], &tables, &NoiseConfig::none(), &cfg).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(m.params, before);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (m0, tables, recs) = setup(8);
        let cfg = TrainConfig { epochs: 6, batch_size: 4, lr: 3e-3, ..Default::default() };
        let mut a = m0.clone();
        let ra = train(&mut a, &recs, &[], &tables, &NoiseConfig::default(), &cfg).unwrap();
        let mut b = m0.clone();
        let rb = train(&mut b, &recs, &[], &tables, &NoiseConfig::default(), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra.history.len(), 6);
        assert!(ra.history[5].mean_loss < ra.history[0].mean_loss);
        assert_eq!(ra.history.iter().map(|h| h.mean_loss).collect::<Vec<_>>(), rb.history.iter().map(|h| h.mean_loss).collect::<Vec<_>>());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (mut m, tables, _) = setup(4);
        let r = train(&mut m, &[], &[], &tables, &NoiseConfig::none(), &TrainConfig::default());
        assert!(matches!(r, Err(TrainError::EmptyTrainingSet)));
    }

    #[test]
    fn noising_is_resampled_each_epoch() {
        let (_, tables, recs) = setup(10);
        let noise = NoiseConfig { p_shuffle: 1.0, p_drop: 0.5, ..Default::default() };
        let differs = (0..recs.len()).any(|i| {
            epoch_instance(&recs[i], i, 0, &tables, &noise, 3).unwrap()
                != epoch_instance(&recs[i], i, 1, &tables, &noise, 3).unwrap()
        });
        assert!(differs);
        assert_eq!(
            epoch_instance(&recs[0], 0, 2, &tables, &noise, 3).unwrap(),
            epoch_instance(&recs[0], 0, 2, &tables, &noise, 3).unwrap()
        );
    }
}
