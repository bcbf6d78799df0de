//! AdamW training loop with per-epoch linear learning-rate decay,
//! best-on-validation checkpoint selection, and an in-process simulation of
//! multi-worker embedding gather.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams, Model, SentenceForward,
};
use crate::error::{Error, Result};
use crate::loss::{supcon_loss, supcon_loss_value, LossConfig};
use crate::numerics::{ParamTensors, Tensor};
use crate::pairing::{build_minibatches, LabeledPair, Minibatch};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size_sentences: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Simulated data-parallel workers; must divide every batch's sentence count.
    pub workers: usize,
    pub vocab_min_count: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size_sentences: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            workers: 1,
            vocab_min_count: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.workers < 1 {
            return bad("workers must be >= 1".into());
        }
        if self.batch_size_sentences < 2 {
            return bad("batch_size_sentences must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        self.loss.validate()
    }
}

/// `lr · (1 − e / epochs)`: constant within an epoch, reaching 0 after the last.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside [0, {})",
            config.epochs
        )));
    }
    Ok(config.learning_rate * (1.0 - epoch as f64 / config.epochs as f64))
}

/// First and second moment estimates for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: ParamTensors + Clone> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
/// Nothing is modified if any gradient entry is non-finite.
pub fn adamw_step<P: ParamTensors>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let gs = grads.tensors();
    let shapes_match = {
        let ps = params.tensors();
        ps.len() == gs.len() && ps.iter().zip(&gs).all(|(p, g)| p.shape() == g.shape())
    };
    if !shapes_match {
        return Err(Error::Shape("gradient is not congruent with parameters".into()));
    }
    for (ti, g) in gs.iter().enumerate() {
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient tensor {ti}, element {k}: {}",
                g.data()[k]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        for k in 0..p.len() {
            let gk = g.data()[k];
            let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
            let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / c1;
            let v_hat = vk / c2;
            let theta = p.data()[k];
            p.data_mut()[k] =
                theta - lr * (m_hat / (v_hat.sqrt() + config.adam_eps) + config.weight_decay * theta);
        }
    }
    Ok(())
}

/// Token ids and masks for one batch, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub sentences: Vec<PreparedSentence>,
    pub positives: crate::loss::Positives,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSentence {
    pub token_ids: Vec<usize>,
    pub masks: Vec<crate::alignment::BinaryMask>,
}

impl PreparedBatch {
    pub fn from_minibatch(batch: &Minibatch, vocab: &Vocab) -> Self {
        let groups = batch.props_by_sentence();
        // Propositions must be laid out sentence by sentence for gathering.
        debug_assert!(groups.iter().flatten().copied().eq(0..batch.num_propositions()));
        let sentences = batch
            .sentences
            .iter()
            .zip(&groups)
            .map(|(s, ids)| PreparedSentence {
                token_ids: vocab.encode(s),
                masks: ids
                    .iter()
                    .map(|&i| batch.propositions[i].mask.clone())
                    .collect(),
            })
            .collect();
        Self {
            sentences,
            positives: batch.positives.clone(),
        }
    }

    pub fn num_propositions(&self) -> usize {
        self.sentences.iter().map(|s| s.masks.len()).sum()
    }
}

/// Result of one simulated data-parallel step.
#[derive(Debug, Clone)]
pub struct GatherResult {
    pub loss: f64,
    /// The loss as computed independently by each worker on the gathered batch.
    pub worker_losses: Vec<f64>,
    pub grads: EncoderParams,
}

/// Each of `workers` shards forwards its sentences; all embeddings are
/// gathered; every worker evaluates the full-batch loss and backpropagates
/// only through its own shard. The per-worker gradients are summed in worker
/// order.
pub fn gather_and_backprop(
    params: &EncoderParams,
    batch: &PreparedBatch,
    workers: usize,
    tau: f64,
) -> Result<GatherResult> {
    let m = batch.sentences.len();
    if workers == 0 || m % workers != 0 {
        return Err(Error::InvalidArgument(format!(
            "{workers} workers cannot evenly split {m} sentences"
        )));
    }
    let per = m / workers;

    let shards: Vec<Vec<SentenceForward>> = batch
        .sentences
        .chunks(per)
        .map(|shard| {
            shard
                .iter()
                .filter(|s| !s.masks.is_empty())
                .map(|s| SentenceForward::run(params, &s.token_ids, &s.masks))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let d = params.config.d_out;
    let mut gathered = Vec::new();
    for fwd in shards.iter().flatten() {
        for i in 0..fwd.len() {
            gathered.extend_from_slice(fwd.embedding(i));
        }
    }
    let n = gathered.len() / d;
    let embeddings = Tensor::new(vec![n, d], gathered)?;

    let mut grads = params.zeros_like();
    let mut worker_losses = Vec::with_capacity(workers);
    let mut offset = 0;
    for shard in &shards {
        let (loss, d_emb) = supcon_loss(&embeddings, &batch.positives, tau)?;
        worker_losses.push(loss);
        let mut local = params.zeros_like();
        for fwd in shard {
            let upstream: Vec<&[f64]> = (0..fwd.len()).map(|i| d_emb.row(offset + i)).collect();
            fwd.backward(params, &upstream, &mut local)?;
            offset += fwd.len();
        }
        for (g, l) in grads.tensors_mut().into_iter().zip(local.tensors()) {
            g.add_assign(l)?;
        }
    }
    Ok(GatherResult {
        loss: worker_losses[0],
        worker_losses,
        grads,
    })
}

/// Embeddings of every proposition in the batch, in batch order.
pub fn batch_embeddings(params: &EncoderParams, batch: &PreparedBatch) -> Result<Tensor> {
    let d = params.config.d_out;
    let mut data = Vec::with_capacity(batch.num_propositions() * d);
    for s in batch.sentences.iter().filter(|s| !s.masks.is_empty()) {
        let fwd = SentenceForward::run(params, &s.token_ids, &s.masks)?;
        for i in 0..fwd.len() {
            data.extend_from_slice(fwd.embedding(i));
        }
    }
    Tensor::new(vec![data.len() / d, d], data)
}

/// Mean contrastive loss over batches, skipping those with fewer than two
/// propositions.
pub fn mean_batch_loss(params: &EncoderParams, batches: &[PreparedBatch], tau: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches.iter().filter(|b| b.num_propositions() >= 2) {
        total += supcon_loss_value(&batch_embeddings(params, b)?, &b.positives, tau)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no batch with at least two propositions".into()));
    }
    Ok(total / count as f64)
}

/// A parameter snapshot taken at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub val_loss: f64,
}

impl Checkpoint {
    /// Writes the checkpoint; `extra` is merged into the metadata block.
    pub fn save(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({
            "vocab": self.model.vocab.entries(),
            "epoch": self.epoch,
            "val_loss": self.val_loss,
        });
        if let (Some(obj), Some(more)) = (meta.as_object_mut(), extra.as_object()) {
            for (k, v) in more {
                obj.entry(k.clone()).or_insert_with(|| v.clone());
            }
        }
        save_checkpoint(path, &self.model.params, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = load_checkpoint(path)?;
        let tokens: Vec<String> = serde_json::from_value(
            meta.get("vocab")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint metadata lacks a vocabulary".into()))?,
        )?;
        let vocab = Vocab::from_tokens(tokens);
        if vocab.len() != params.config.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary of {} tokens for vocab_size {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        let epoch = meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let val_loss = meta.get("val_loss").and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        Ok((
            Self {
                model: Model { params, vocab },
                epoch,
                val_loss,
            },
            meta,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Mean loss over the first epoch's batches before any update.
    pub initial_train_loss: f64,
    /// The same batches evaluated with the final (last-epoch) parameters.
    pub final_train_loss: f64,
    pub final_params: EncoderParams,
}

/// Seed used to shuffle batches in `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64 + 1)
}

/// Seed for validation batches; fixed across epochs.
fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x5851_F42D_4C95_7F2D
}

pub fn prepare_batches(
    pairs: &[LabeledPair],
    batch_size_sentences: usize,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<PreparedBatch>> {
    Ok(build_minibatches(pairs, batch_size_sentences, seed)?
        .iter()
        .map(|b| PreparedBatch::from_minibatch(b, vocab))
        .collect())
}

/// Trains from scratch and returns the lowest-validation-loss checkpoint.
pub fn train(
    train_pairs: &[LabeledPair],
    val_pairs: &[LabeledPair],
    encoder: EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(train_pairs, val_pairs, encoder, config, |_| {})
}

pub fn train_with_progress(
    train_pairs: &[LabeledPair],
    val_pairs: &[LabeledPair],
    mut encoder: EncoderConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let vocab = Vocab::build(
        train_pairs
            .iter()
            .flat_map(|p| [&p.pair.sent_a, &p.pair.sent_b]),
        config.vocab_min_count,
    );
    if encoder.vocab_size == 0 {
        encoder.vocab_size = vocab.len();
    } else if encoder.vocab_size != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "encoder vocab_size {} does not match training vocabulary of {}",
            encoder.vocab_size,
            vocab.len()
        )));
    }
    let mut params = EncoderParams::init(encoder, config.seed)?;
    let mut adam = AdamState::new(&params);
    let tau = config.loss.temperature;

    let val_batches = prepare_batches(
        val_pairs,
        config.batch_size_sentences,
        validation_seed(config.seed),
        &vocab,
    )?;
    let first_batches =
        prepare_batches(train_pairs, config.batch_size_sentences, epoch_seed(config.seed, 0), &vocab)?;
    for b in &first_batches {
        if b.sentences.len() % config.workers != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} workers cannot evenly split a batch of {} sentences",
                config.workers,
                b.sentences.len()
            )));
        }
    }
    let initial_train_loss = mean_batch_loss(&params, &first_batches, tau)?;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch)?;
        let batches = if epoch == 0 {
            first_batches.clone()
        } else {
            prepare_batches(
                train_pairs,
                config.batch_size_sentences,
                epoch_seed(config.seed, epoch),
                &vocab,
            )?
        };
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in batches.iter().filter(|b| b.num_propositions() >= 2) {
            let diverged = |message: String| Error::Diverged {
                epoch,
                message,
                last_good: best.clone().map(Box::new),
            };
            let step = gather_and_backprop(&params, batch, config.workers, tau)?;
            if !step.loss.is_finite() {
                return Err(diverged(format!("loss is {}", step.loss)));
            }
            match adamw_step(&mut params, &step.grads, &mut adam, lr, config) {
                Err(Error::NonFinite(m)) => return Err(diverged(m)),
                other => other?,
            }
            total += step.loss;
            steps += 1;
        }
        let train_loss = if steps == 0 { 0.0 } else { total / steps as f64 };
        let val_loss = mean_batch_loss(&params, &val_batches, tau)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("validation loss is {val_loss}"),
                last_good: best.map(Box::new),
            });
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            best = Some(Checkpoint {
                model: Model {
                    params: params.clone(),
                    vocab: vocab.clone(),
                },
                epoch,
                val_loss,
            });
        }
    }
    let final_train_loss = mean_batch_loss(&params, &first_batches, tau)?;
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        history,
        initial_train_loss,
        final_train_loss,
        final_params: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 1e-4);
        assert!((lr_at_epoch(&cfg, 5).unwrap() - 5e-5).abs() < 1e-20);
        assert!((lr_at_epoch(&cfg, 9).unwrap() - 1e-5).abs() < 1e-20);
        assert!(lr_at_epoch(&cfg, 10).is_err());
        // What the schedule would give once training is over.
        let after = cfg.learning_rate * (1.0 - cfg.epochs as f64 / cfg.epochs as f64);
        assert_eq!(after, 0.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = Tensor::vector(vec![0.5, -1.5]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &Tensor::zeros(&[2]), &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_scalar_step_matches_hand_computation() {
        let cfg = TrainConfig::default();
        let (lr, theta) = (1e-3, 2.0);
        let mut p = Tensor::vector(vec![theta]);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &Tensor::vector(vec![1.0]), &mut st, lr, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let want = theta - lr * (1.0 / (1.0 + cfg.adam_eps)) - lr * cfg.weight_decay * theta;
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new(&p);
        let r = adamw_step(&mut p, &Tensor::vector(vec![0.0, f64::NAN]), &mut st, 1e-3, &cfg);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { workers: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn toy_corpus() -> Vec<LabeledPair> {
        use crate::alignment::{proposition_to_mask, AlignConfig};
        use crate::pairing::{label_positive_pairs, LexicalOracle, Proposition, SentencePair};
        use crate::tokenizer::tokenize;
        let rows = [
            ("Ann met Bo and Cy ran .", "Cy ran while Dee sang .", ["Ann met Bo", "Cy ran"], ["Cy ran", "Dee sang"]),
            ("Eve ate figs and Gus slept .", "Gus slept but Hal swam .", ["Eve ate figs", "Gus slept"], ["Gus slept", "Hal swam"]),
            ("Ivy drew owls and Jo sang .", "Kai read and Ivy drew owls .", ["Ivy drew owls", "Jo sang"], ["Kai read", "Ivy drew owls"]),
            ("Lu cooked rice and Mo left .", "Mo left after Ned won .", ["Lu cooked rice", "Mo left"], ["Mo left", "Ned won"]),
        ];
        let cfg = AlignConfig::default();
        rows.iter()
            .map(|(a, b, pa, pb)| {
                let (sa, sb) = (tokenize(a), tokenize(b));
                let mk = |s: &crate::tokenizer::TokenizedText, ps: &[&str; 2]| {
                    ps.iter()
                        .map(|p| Proposition {
                            text: p.to_string(),
                            mask: proposition_to_mask(p, s, &cfg).unwrap(),
                        })
                        .collect()
                };
                let pair = SentencePair::new(sa.clone(), sb.clone(), mk(&sa, pa), mk(&sb, pb)).unwrap();
                let positives = label_positive_pairs(&pair, &LexicalOracle::default()).unwrap();
                LabeledPair { pair, positives }
            })
            .collect()
    }

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ffn_mult: 2,
            max_len: 16,
            d_out: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn sharded_gradient_equals_single_worker() {
        let corpus = toy_corpus();
        let vocab = Vocab::build(corpus.iter().flat_map(|p| [&p.pair.sent_a, &p.pair.sent_b]), 1);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..small_encoder()
        };
        let params = EncoderParams::init(cfg, 3).unwrap();
        let batch = &prepare_batches(&corpus, 8, 1, &vocab).unwrap()[0];
        assert_eq!(batch.sentences.len(), 8);
        let one = gather_and_backprop(&params, batch, 1, 0.05).unwrap();
        for w in [2, 4, 8] {
            let many = gather_and_backprop(&params, batch, w, 0.05).unwrap();
            assert_eq!(many.worker_losses.len(), w);
            assert!(many.worker_losses.iter().all(|&l| l == one.loss));
            // Same terms, different summation order.
            let err = crate::numerics::max_relative_error(&many.grads, &one.grads).unwrap();
            assert!(err < 1e-9, "{w} workers: gradient differs by {err}");
        }
        assert!(gather_and_backprop(&params, batch, 3, 0.05).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 15,
            batch_size_sentences: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || train(&corpus, &corpus[..2], small_encoder(), &cfg).unwrap();
        let a = run();
        assert!(a.final_train_loss < a.initial_train_loss);
        assert_eq!(a.history.len(), 15);
        let best = a.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best.val_loss, best);
        let b = run();
        assert_eq!(a.best.model, b.best.model);
        assert_eq!(a.history, b.history);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        a.best.save(&path, &serde_json::json!({"note": "x"})).unwrap();
        let (back, meta) = Checkpoint::load(&path).unwrap();
        assert_eq!(back, a.best);
        assert_eq!(meta["note"], "x");
    }
}
