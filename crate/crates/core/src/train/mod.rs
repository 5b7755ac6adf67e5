//! Optimization: AdamW with per-group learning rates, linear warmup and
//! decay, global-norm clipping, teacher forcing on gold previous states and
//! model selection on validation joint goal accuracy.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use optim::{clip_global_norm, AdamW, LinearSchedule};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{apply_word_dropout, context_for_turn, HistoryWindow, TokenSequence, Vocabulary};
use crate::corpus::{Corpus, Dialogue, DialogueState, Ontology};
use crate::metrics::joint_goal_accuracy;
use crate::model::{gold_indices, Group, ModelConfig, ModelError, StarModel};
use crate::nn::Dropout;
use crate::tensor::{Graph, Scalar};
use crate::tracker::{TrackError, TrackMode, Tracker};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Fraction of total steps spent warming up.
    pub warmup: f64,
    pub word_dropout: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between validations; 0 validates once per epoch.
    pub eval_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Upper bound on optimizer steps; the schedule spans this bound.
    pub max_steps: Option<usize>,
    /// Stop as soon as validation JGA reaches this value.
    pub target_jga: Option<f64>,
    pub history: HistoryWindow,
    /// Masked-token steps on the encoder before the frozen snapshot is
    /// taken; 0 keeps the random initialization.
    pub pretrain_steps: usize,
    /// Validation threads; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_encoder: 4e-5,
            lr_decoder: 1e-4,
            warmup: 0.1,
            word_dropout: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 0,
            patience: 5,
            max_steps: None,
            target_jga: None,
            history: HistoryWindow::Full,
            pretrain_steps: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup proportion must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return bad("word dropout must be in [0, 1)");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return bad("clip norm must be positive and weight decay non-negative");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

/// A teacher-forced training turn.
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: TokenSequence,
    pub gold: Vec<usize>,
}

/// One example per turn, with the gold state of the previous turn as input.
pub fn build_examples(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    ontology: &Ontology,
    window: HistoryWindow,
    max_len: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in dialogues {
        let mut prev = DialogueState::new();
        for (t, turn) in d.turns.iter().enumerate() {
            let seq = context_for_turn(vocab, ontology, &d.turns, t, &prev, window, max_len)
                .map_err(ModelError::from)?;
            out.push(Example {
                seq,
                gold: gold_indices(ontology, &turn.state)?,
            });
            prev = turn.state.clone();
        }
    }
    Ok(out)
}

/// One validation record of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_jga: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation JGA.
    pub best: StarModel<f32>,
    pub best_step: usize,
    pub best_jga: f64,
    pub log: Vec<EvalRecord>,
    pub steps: usize,
    /// Mean training loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn into_checkpoint(
        self,
        vocab: Vocabulary,
        ontology: Ontology,
        cfg: &TrainConfig,
    ) -> Checkpoint {
        let mut metrics = BTreeMap::new();
        metrics.insert("valid_jga".to_string(), self.best_jga);
        Checkpoint {
            model: self.best,
            vocab,
            ontology,
            history: cfg.history,
            train: Some(cfg.clone()),
            step: self.best_step as u64,
            metrics,
        }
    }
}

fn example_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn zero_grads<T: Scalar>(model: &StarModel<T>) -> Vec<Vec<T>> {
    model
        .params()
        .iter()
        .map(|(_, p)| vec![T::zero(); p.value.numel()])
        .collect()
}

/// Mean loss and mean gradients over a batch. Per-example work runs in
/// parallel; the reduction order is fixed.
fn batch_gradients(
    model: &StarModel<f32>,
    batch: &[&Example],
    cfg: &TrainConfig,
    unk: usize,
    stream_base: u64,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let results: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = example_rng(cfg.seed, stream_base + i as u64);
            let seq = apply_word_dropout(&ex.seq, cfg.word_dropout, unk, &mut rng);
            let mut dropout = Dropout::new(model.config().dropout, &mut rng);
            model.loss_and_grads(&seq, &ex.gold, &mut dropout)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut sum = zero_grads(model);
    let mut loss = 0.0;
    for (l, grads) in results {
        loss += f64::from(l);
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(g) = g {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    sum.iter_mut().flatten().for_each(|g| *g *= inv);
    Ok((loss / batch.len() as f64, sum))
}

pub fn validation_jga(
    model: &StarModel<f32>,
    vocab: &Vocabulary,
    ontology: &Ontology,
    dialogues: &[Dialogue],
    window: HistoryWindow,
    workers: usize,
) -> Result<f64> {
    let tracker = Tracker::new(model, vocab, ontology, window)?;
    let recs = tracker.batch_track(dialogues, TrackMode::PredictedPrevState, workers)?;
    Ok(joint_goal_accuracy(&recs).map(|r| r.value).unwrap_or(0.0))
}

/// Trains `model` in place on `train` and selects the parameters with the
/// best validation JGA (predicted previous states).
pub fn train(
    model: &mut StarModel<f32>,
    vocab: &Vocabulary,
    ontology: &Ontology,
    train: &[Dialogue],
    valid: &[Dialogue],
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let max_len = model.config().max_len;
    let examples = build_examples(train, vocab, ontology, cfg.history, max_len)?;
    if cfg.pretrain_steps > 0 {
        pretrain_encoder(model, &examples, vocab, cfg)?;
        model.refreeze(vocab, ontology)?;
    }
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let sched_enc = LinearSchedule::new(cfg.lr_encoder, total, cfg.warmup);
    let sched_dec = LinearSchedule::new(cfg.lr_decoder, total, cfg.warmup);
    let eval_every = if cfg.eval_every == 0 {
        per_epoch
    } else {
        cfg.eval_every
    };
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = model.clone();
    let mut best_jga = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(total);
    let mut window_loss = Vec::new();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let base = (step as u64) << 20;
            let (loss, mut grads) = batch_gradients(model, &batch, cfg, vocab.unk_id(), base)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let (le, ld) = (sched_enc.lr(step), sched_dec.lr(step));
            opt.step(model.params_mut(), &grads, |g| match g {
                Group::Encoder => le,
                Group::Decoder => ld,
            });
            if !model.params().all_finite() {
                return Err(TrainError::Divergence { step });
            }
            losses.push(loss);
            window_loss.push(loss);
            step += 1;
            if step % eval_every == 0 || step == total {
                let jga = validation_jga(model, vocab, ontology, valid, cfg.history, cfg.workers)?;
                let improved = jga > best_jga;
                if improved {
                    best = model.clone();
                    best_jga = jga;
                    best_step = step;
                    stale = 0;
                } else {
                    stale += 1;
                }
                let rec = EvalRecord {
                    step,
                    epoch,
                    train_loss: window_loss.iter().sum::<f64>() / window_loss.len() as f64,
                    valid_jga: jga,
                    lr_encoder: le,
                    lr_decoder: ld,
                    best: improved,
                };
                window_loss.clear();
                on_eval(&rec);
                log.push(rec);
                if cfg.target_jga.is_some_and(|t| best_jga >= t) || stale > cfg.patience {
                    break 'outer;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_jga,
        log,
        steps: step,
        losses,
    })
}

/// Masked-token prediction on the encoder with the output layer tied to the
/// token embeddings. 15% of history and current-turn tokens are replaced by
/// `[UNK]` and predicted.
pub fn pretrain_encoder(
    model: &mut StarModel<f32>,
    examples: &[Example],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let sched = LinearSchedule::new(cfg.lr_encoder, cfg.pretrain_steps, cfg.warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for step in 0..cfg.pretrain_steps {
        let mut sum = zero_grads(model);
        let mut n = 0;
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.gen_range(0..examples.len())];
            if let Some(grads) = masked_token_grads(model, ex, vocab, &mut rng)? {
                for (acc, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f32;
        sum.iter_mut().flatten().for_each(|g| *g *= inv);
        clip_global_norm(&mut sum, cfg.clip_norm);
        let lr = sched.lr(step);
        opt.step(model.params_mut(), &sum, |g| match g {
            Group::Encoder => lr,
            Group::Decoder => 0.0,
        });
        if !model.params().all_finite() {
            return Err(TrainError::Divergence { step });
        }
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
fn masked_token_grads(
    model: &StarModel<f32>,
    ex: &Example,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<Option<Vec<f32>>>>> {
    use crate::context::Region;
    let mut ids = ex.seq.ids.clone();
    let mut targets = Vec::new();
    for (i, r) in ex.seq.regions.iter().enumerate() {
        if matches!(r, Region::History | Region::Current) && rng.gen_bool(0.15) {
            targets.push((i, ids[i]));
            ids[i] = vocab.unk_id();
        }
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, true);
    let enc = model.encoder_vars(&bound);
    let h = crate::model::encode_context(
        &mut g,
        &enc,
        &ids,
        &ex.seq.positions,
        &ex.seq.segments,
        &ex.seq.mask,
        model.config().ln_eps,
        &mut Dropout::off(),
    )?;
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let sel = g.gather_rows(h, &rows).map_err(ModelError::from)?;
    let logits = g
        .matmul_t(sel, enc.embeddings.token, false, true)
        .map_err(ModelError::from)?;
    let lp = g.log_softmax_rows(logits);
    let v = vocab.len();
    let flat: Vec<usize> = targets.iter().enumerate().map(|(k, t)| k * v + t.1).collect();
    let picked = g.pick(lp, &flat).map_err(ModelError::from)?;
    let total = g.sum(picked);
    let loss = g.scale(total, -1.0 / targets.len() as f32);
    g.backward(loss).map_err(ModelError::from)?;
    Ok(Some(
        bound.vars.iter().map(|&v| g.grad(v).map(<[f32]>::to_vec)).collect(),
    ))
}

/// Builds the vocabulary and a fresh model for `corpus`.
pub fn init_model(
    corpus: &Corpus,
    mut config: ModelConfig,
    seed: u64,
) -> Result<(Vocabulary, StarModel<f32>)> {
    let vocab = Vocabulary::from_corpus(corpus);
    config.vocab_size = vocab.len();
    let model = StarModel::new(config, &vocab, &corpus.ontology, seed)?;
    Ok((vocab, model))
}
