use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::corpus::{shuffled_indices, Corpus};
use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::text::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Evaluate held-out accuracy every this many steps (0 = never).
    pub eval_every: u64,
    /// Stop once held-out accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1000,
            batch_size: 32,
            seed: 1,
            schedule: Schedule::default(),
            eval_every: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training cross-entropy of each step.
    pub losses: Vec<f32>,
    /// `(step, held-out token accuracy)`.
    pub evals: Vec<(u64, f64)>,
}

impl TrainReport {
    pub fn steps_run(&self) -> u64 {
        self.losses.len() as u64
    }

    /// `step,loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }
}

/// Yields batches by walking a seeded shuffle, reshuffling each epoch.
struct Batcher<'c> {
    corpus: &'c Corpus,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'c> Batcher<'c> {
    fn new(corpus: &'c Corpus, batch_size: usize, seed: u64) -> Self {
        Batcher {
            corpus,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<Example> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = shuffled_indices(self.corpus.len(), &mut self.rng);
                self.pos = 0;
            }
            batch.push(self.corpus.pairs[self.order[self.pos]].clone());
            self.pos += 1;
        }
        batch
    }
}

/// Trains `model` in place with Adam and the warmup schedule. Batch order
/// and dropout masks are fully determined by `opts.seed`.
pub fn train(
    model: &mut TransformerModel,
    corpus: &Corpus,
    heldout: Option<&Corpus>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    train_with_optimizer(model, corpus, heldout, opts, &mut Adam::default())
}

pub fn train_with_optimizer(
    model: &mut TransformerModel,
    corpus: &Corpus,
    heldout: Option<&Corpus>,
    opts: &TrainOptions,
    adam: &mut Adam,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::data("training corpus is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut batcher = Batcher::new(corpus, opts.batch_size, opts.seed);
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let use_dropout = model.config().dropout > 0.0;
    let mut report = TrainReport::default();
    for step in 1..=opts.steps {
        let batch = batcher.next_batch();
        let dropout_seed: u64 = dropout_seeds.gen();
        let (stats, grads) = model.loss_and_grads(&batch, use_dropout.then_some(dropout_seed))?;
        if !stats.loss.is_finite() {
            return Err(Error::numeric(format!("loss became {} at step {step}", stats.loss)));
        }
        model.params_mut().set_grads(&grads)?;
        adam.step(model.params_mut(), opts.schedule.lr_at(step)?)?;
        report.losses.push(stats.loss);
        if let Some(h) = heldout {
            if opts.eval_every > 0 && step % opts.eval_every == 0 {
                let acc = token_accuracy(model, h, opts.batch_size)?;
                log::debug!("step {step}: loss {:.4}, held-out accuracy {acc:.4}", stats.loss);
                report.evals.push((step, acc));
                if opts.target_accuracy.is_some_and(|t| acc >= t) {
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Teacher-forced next-token accuracy over every target position
/// (including the final `</s>`).
pub fn token_accuracy(model: &TransformerModel, corpus: &Corpus, batch_size: usize) -> Result<f64> {
    evaluate(model, corpus, batch_size).map(|(_, acc)| acc)
}

/// `(mean token cross-entropy, token accuracy)`.
pub fn evaluate(model: &TransformerModel, corpus: &Corpus, batch_size: usize) -> Result<(f64, f64)> {
    if corpus.is_empty() {
        return Err(Error::data("evaluation corpus is empty"));
    }
    let mut loss_sum = 0.0f64;
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in corpus.pairs.chunks(batch_size.max(1)) {
        let s = model.evaluate_batch(chunk)?;
        loss_sum += s.loss as f64 * s.tokens as f64;
        correct += s.correct;
        total += s.tokens;
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}
