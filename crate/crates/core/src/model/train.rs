use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::network::{Model, Prepared};
use crate::error::{Error, Result};
use crate::numerics::{gradient_check_with, round_f32, FiniteDiff, GradCheckReport, ParamStore, Tape, Tensor};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Model, optimizer moments and loop counters.
///
/// Parameters and moments are kept at 32-bit precision between steps, so a
/// checkpoint stores them without loss.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// First moments, one per parameter in store order.
    pub m: Vec<Tensor>,
    /// Second moments.
    pub v: Vec<Tensor>,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
}

/// Loss and accuracy of one pass over a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64, optimizer: AdamW) -> Result<Self> {
        let model = Model::build(cfg, seed)?;
        let zeros: Vec<Tensor> = model.store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Self {
            model,
            optimizer,
            m: zeros.clone(),
            v: zeros,
            epoch: 0,
            step: 0,
            seed,
        })
    }

    /// One optimizer step on a batch; returns the mean cross-entropy and the
    /// number of correct predictions made before the update.
    pub fn train_step(&mut self, batch: &[&Prepared], labels: &[usize]) -> Result<(f64, usize)> {
        if batch.len() != labels.len() {
            return Err(Error::Dimension {
                op: "train_step",
                lhs: vec![batch.len()],
                rhs: vec![labels.len()],
            });
        }
        let classes = self.model.cfg.classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index { index: bad, len: classes });
        }
        let mut tape = Tape::new();
        let trace = self.model.forward_trace(&mut tape, batch)?;
        let correct = count_correct(tape.value(trace.logits), labels);
        tape.set_stage("loss");
        let loss = tape.cross_entropy(trace.logits, labels)?;
        let loss_value = tape.value(loss).data()[0];
        self.model.store.zero_grads();
        tape.backward(loss, &mut self.model.store)?;
        self.apply_update()?;
        self.model.store.zero_grads();
        Ok((loss_value, correct))
    }

    fn apply_update(&mut self) -> Result<()> {
        if let Some(p) = self.model.store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite {
                stage: format!("gradient of {}", p.name),
            });
        }
        self.step += 1;
        let o = self.optimizer;
        let t = self.step as i32;
        let c1 = 1.0 - o.beta1.powi(t);
        let c2 = 1.0 - o.beta2.powi(t);
        for ((p, m), v) in self.model.store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let theta = p.value.data_mut();
            for (((w, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = round_f32(o.beta1 * *mi + (1.0 - o.beta1) * g);
                *vi = round_f32(o.beta2 * *vi + (1.0 - o.beta2) * g * g);
                let update = (*mi / c1) / ((*vi / c2).sqrt() + o.eps) + o.weight_decay * *w;
                *w = round_f32(*w - o.lr * update);
            }
        }
        if let Some(p) = self.model.store.iter().find(|p| !p.value.is_finite()) {
            return Err(Error::NonFinite {
                stage: format!("update of {}", p.name),
            });
        }
        Ok(())
    }

    /// One shuffled pass over `data`; the order depends only on the seed and
    /// the epoch index.
    pub fn train_epoch(&mut self, data: &[Prepared], labels: &[usize], batch_size: usize) -> Result<EpochStats> {
        if data.is_empty() || data.len() != labels.len() || batch_size == 0 {
            return Err(Error::Config(format!(
                "training needs matching nonempty data and labels and a positive batch size ({} images, {} labels, batch {batch_size})",
                data.len(),
                labels.len()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.epoch + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, c) = self.train_step(&batch, &y)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        self.epoch += 1;
        Ok(EpochStats {
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    }
}

/// Rows whose argmax (lowest index on ties) equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and top-1 accuracy without updating anything.
pub fn evaluate(model: &Model, data: &[Prepared], labels: &[usize], batch_size: usize) -> Result<EpochStats> {
    if data.is_empty() || data.len() != labels.len() || batch_size == 0 {
        return Err(Error::Config("evaluation needs a nonempty labelled split".into()));
    }
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (chunk, y) in data.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let mut tape = Tape::new();
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let trace = model.forward_trace(&mut tape, &batch)?;
        correct += count_correct(tape.value(trace.logits), y);
        let loss = tape.cross_entropy(trace.logits, y)?;
        loss_sum += tape.value(loss).data()[0] * y.len() as f64;
    }
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Finite-difference check of the full model's cross-entropy gradients.
pub fn check_gradients(
    model: &mut Model,
    batch: &[Prepared],
    labels: &[usize],
    scheme: FiniteDiff,
    per_param: usize,
) -> Result<GradCheckReport> {
    let refs: Vec<&Prepared> = batch.iter().collect();
    let probe = Model {
        cfg: model.cfg.clone(),
        store: ParamStore::new(),
        net: model.net.clone(),
    };
    gradient_check_with(
        |tape, store| {
            let trace = probe.forward_trace_with(tape, store, &refs)?;
            tape.cross_entropy(trace.logits, labels)
        },
        &mut model.store,
        scheme,
        per_param,
    )
}
