//! Optimization loop, configuration and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, ParamMeta, FORMAT_VERSION, MAGIC};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Dialogue, EncodedExample, Limits, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, JointModel, ModelConfig};
use crate::objective::{Averaging, LossBreakdown, Mode, ObjectiveConfig};
use crate::pipeline::encode_corpus;
use crate::scalar::Scalar;
use crate::tensor::{DropoutKey, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub qa_weight: f64,
    pub mode: Mode,
    pub dp_dropout: f64,
    pub tau: f64,
    pub max_answer_tokens: usize,
    pub seed: u64,
    /// Divide link and relation sums by `limits.max_utterances` instead of
    /// each dialogue's own count.
    pub strict_eq3_averaging: bool,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub min_count: usize,
    pub limits: Limits,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 2,
            batch_size: 8,
            lambda: 1.0,
            qa_weight: 1.0,
            mode: Mode::Joint,
            dp_dropout: 0.4,
            tau: 0.0,
            max_answer_tokens: 30,
            seed: 0,
            strict_eq3_averaging: false,
            warmup_steps: 0,
            clip_norm: 1.0,
            min_count: 1,
            limits: Limits::default(),
            encoder: EncoderConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_answer_tokens == 0 {
            return Err(Error::Config("batch size and max answer tokens must be positive".into()));
        }
        if self.encoder.max_positions < self.limits.max_seq {
            return Err(Error::Config(format!(
                "max_positions {} is shorter than the sequence limit {}",
                self.encoder.max_positions, self.limits.max_seq
            )));
        }
        self.objective().validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            qa_weight: self.qa_weight,
            mode: self.mode,
            averaging: if self.strict_eq3_averaging {
                Averaging::Constant(self.limits.max_utterances)
            } else {
                Averaging::PerDialogue
            },
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                ..self.encoder.clone()
            },
            dp_dropout: self.dp_dropout,
        }
    }

    pub fn decode(&self) -> crate::decode::DecodeConfig {
        crate::decode::DecodeConfig {
            tau: self.tau,
            max_answer_tokens: self.max_answer_tokens,
        }
    }

    /// Learning rate at optimizer step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        lr: f64,
        grad_norm: f64,
        clipped: bool,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Eval {
        epoch: usize,
        step: u64,
        split: String,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
}

/// Model, optimizer state and step counter of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: JointModel<T>,
    pub vocab: Vocabulary,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = JointModel::new(config.model_config(vocab.len()), config.seed)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            config,
            model,
            vocab,
            adam,
            step: 0,
        })
    }

    /// Resumes from a checkpoint, keeping its optimizer moments if stored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model::<T>()?;
        let adam = ck.adam_state::<T>().unwrap_or_else(|| AdamState::new(model.params()));
        Ok(Self {
            config: ck.header.train_config.clone(),
            model,
            vocab: ck.vocabulary()?,
            adam,
            step: ck.header.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, &self.model, &self.vocab, self.step, Some(&self.adam))
    }

    pub fn encode(&self, corpus: &[Dialogue]) -> Result<Vec<EncodedExample>> {
        encode_corpus(corpus, &self.vocab, self.config.limits)
    }

    /// Gradients of the batch loss (mean over `batch`) and its breakdown.
    ///
    /// Each example gets its own graph; dropout is keyed by
    /// `(seed, step, position in batch)`.
    pub fn batch_gradients(&self, batch: &[&EncodedExample], train: bool) -> Result<(Vec<Vec<T>>, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::invalid("batch_gradients", "empty batch"));
        }
        let objective = self.config.objective();
        let params = self.model.params();
        let mut grads: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        let mut sum = LossBreakdown::default();
        let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
        for (b, ex) in batch.iter().enumerate() {
            let key = DropoutKey {
                seed: self.config.seed,
                step: (self.step << 16) | b as u64,
            };
            let mut g = Graph::with_dropout_key(key);
            let p = self.model.bind(&mut g, true);
            let (loss, parts) = self.model.example_loss(&mut g, &p, ex, &objective, train)?;
            let scaled = g.scale(loss, inv)?;
            g.backward(scaled)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gv) = g.grad(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, &x)| *a = *a + x);
                }
            }
            add_breakdown(&mut sum, &parts);
        }
        Ok((grads, scale_breakdown(sum, batch.len())))
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&EncodedExample], epoch: usize) -> Result<LogRecord> {
        let (mut grads, loss) = self.batch_gradients(batch, true)?;
        let (grad_norm, clipped) = clip_grad_norm(&mut grads, self.config.clip_norm);
        if clipped {
            log::debug!("step {}: gradient norm {grad_norm:.4} clipped to {}", self.step + 1, self.config.clip_norm);
        }
        let lr = self.config.lr_at(self.step + 1);
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, self.config.adam)?;
        self.step += 1;
        Ok(LogRecord::Step {
            epoch,
            step: self.step,
            lr,
            grad_norm,
            clipped,
            loss,
        })
    }

    /// Mean evaluation-mode loss over `examples`.
    pub fn evaluate_loss(&self, examples: &[EncodedExample]) -> Result<LossBreakdown> {
        let objective = self.config.objective();
        let mut sum = LossBreakdown::default();
        for ex in examples {
            let mut g = Graph::new();
            let p = self.model.bind(&mut g, false);
            let (_, parts) = self.model.example_loss(&mut g, &p, ex, &objective, false)?;
            add_breakdown(&mut sum, &parts);
        }
        Ok(scale_breakdown(sum, examples.len().max(1)))
    }

    /// Runs one epoch over `examples` in a seeded shuffled order.
    pub fn train_epoch(&mut self, examples: &[EncodedExample], epoch: usize, log: &mut dyn Write) -> Result<()> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let record = self.train_step(&batch, epoch)?;
            if let LogRecord::Step { loss, .. } = &record {
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
                }
            }
            write_record(log, &record)?;
        }
        Ok(())
    }
}

fn add_breakdown(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.qa += x.qa;
    sum.link += x.link;
    sum.relation += x.relation;
    sum.dp += x.dp;
    sum.total += x.total;
    sum.lambda = x.lambda;
}

fn scale_breakdown(mut s: LossBreakdown, n: usize) -> LossBreakdown {
    let k = 1.0 / n as f64;
    s.qa *= k;
    s.link *= k;
    s.relation *= k;
    s.dp *= k;
    s.total *= k;
    s
}

pub fn write_record(log: &mut dyn Write, record: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(log, "{line}").map_err(|e| Error::io("metric log", e))
}

/// Result of [`train`]: the best model by evaluation loss and the state
/// after the last epoch.
#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub last: Trainer<T>,
}

/// Trains on `train_set`, scoring `dev_set` (or the training set when absent)
/// before the first epoch and after each one.
///
/// With `epochs == 0` this is an evaluation-only pass.
pub fn train<T: Scalar>(
    config: TrainConfig,
    train_set: &[Dialogue],
    dev_set: Option<&[Dialogue]>,
    vocab: Option<Vocabulary>,
    log: &mut dyn Write,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let vocab = vocab.unwrap_or_else(|| build_vocab(train_set, config.min_count));
    let mut trainer = Trainer::<T>::new(config, vocab)?;
    let train_examples = trainer.encode(train_set)?;
    let (dev_examples, split) = match dev_set {
        Some(d) => (trainer.encode(d)?, "dev"),
        None => (train_examples.clone(), "train"),
    };
    let eval = |t: &Trainer<T>, epoch: usize, log: &mut dyn Write| -> Result<f64> {
        let loss = t.evaluate_loss(&dev_examples)?;
        write_record(
            log,
            &LogRecord::Eval {
                epoch,
                step: t.step,
                split: split.to_string(),
                loss,
            },
        )?;
        Ok(loss.total)
    };
    let mut best_loss = eval(&trainer, 0, log)?;
    let mut best = trainer.checkpoint();
    let mut best_epoch = 0;
    for epoch in 1..=trainer.config.epochs {
        trainer.train_epoch(&train_examples, epoch, log)?;
        let loss = eval(&trainer, epoch, log)?;
        if loss < best_loss {
            best_loss = loss;
            best = trainer.checkpoint();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_loss,
        last: trainer,
    })
}
