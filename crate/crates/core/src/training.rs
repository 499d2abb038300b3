//! SGD-momentum training with linear warmup and cosine decay, plus the
//! deterministic mini-batch loop over synthetic datasets.

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::{ForwardOpts, Model, Param};
use crate::synth::Dataset;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Fraction of the dataset held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.momentum < 0.0 {
            return Err(Error::Config("rates must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Step-resolved learning rate: linear ramp 0 -> base_lr across the warmup
/// epochs (reaching base_lr exactly on the last warmup step), then cosine
/// decay to exactly zero at the final step.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return cfg.base_lr * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step + 1 - warmup) as f64 / (total - warmup) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter momentum buffers, allocated lazily.
pub struct SgdState<T> {
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(num_params: usize) -> Self {
        Self { velocity: (0..num_params).map(|_| None).collect() }
    }
}

/// One SGD-momentum step: v <- momentum*v + (grad + weight_decay*w);
/// w <- w - lr*v. Frozen parameters must not carry gradients.
pub fn sgd_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "sgd_step: {} params, {} grads, {} velocity slots",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let m = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    let lr_t = T::from_f64(lr);
    for (i, p) in params.iter_mut().enumerate() {
        match (&grads[i], p.trainable) {
            (Some(_), false) => {
                return Err(Error::Contract(format!(
                    "gradient present for frozen parameter {}",
                    p.name
                )));
            }
            (Some(g), true) => {
                if g.shape() != p.value.shape() {
                    return Err(Error::Contract(format!(
                        "gradient shape {:?} does not match parameter {} {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                let v = state.velocity[i]
                    .get_or_insert_with(|| vec![T::ZERO; p.value.numel()]);
                for ((w, &gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vv = m * *vv + (gv + wd * *w);
                    *w = *w - lr_t * *vv;
                }
            }
            (None, _) => {}
        }
    }
    Ok(())
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Deterministic index split: the trailing fifth is validation. The
/// generator alternates labels, so both splits stay balanced.
pub fn split_train_val(len: usize) -> (Vec<usize>, Vec<usize>) {
    let val_len = ((len as f64 * VAL_FRACTION) as usize) & !1;
    let train_len = len - val_len;
    ((0..train_len).collect(), (train_len..len).collect())
}

fn accuracy_of(logits: &[f32], labels: &[usize]) -> usize {
    logits
        .chunks_exact(2)
        .zip(labels)
        .filter(|(row, &l)| (row[1] > row[0]) as usize == l)
        .count()
}

/// Train the model in place; returns the per-epoch log.
///
/// Fully deterministic for a given seed: seeded shuffles, fixed batch
/// order, and fixed accumulation order in every kernel.
pub fn train_loop(model: &mut Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let (train_idx, val_idx) = split_train_val(data.len());
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "dataset of {} samples is too small to split",
            data.len()
        )));
    }

    // Linear-probe fast path: when only the classifier trains and nothing
    // upstream holds batch-coupled state (no spatial adapter means no batch
    // norm), per-sample pooled features are constant across epochs and can
    // be computed once. The arithmetic is identical to the full loop.
    let head_only = model
        .params
        .iter()
        .all(|p| !p.trainable || p.name.starts_with("head/"));
    if head_only && !model.config.use_lsa {
        return train_head_on_cached_features(model, data, cfg, &train_idx, &val_idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let mut state = SgdState::new(model.params.len());
    let mut logs = Vec::with_capacity(cfg.total_epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.total_epochs {
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let epoch_lr = lr_schedule(global_step, steps_per_epoch, cfg);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let images = data.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label_usize(i)).collect();
            let mut run = model.forward(
                &images,
                Mode::Train,
                ForwardOpts { record_grads: true, ..Default::default() },
            )?;
            let loss = run.graph.cross_entropy(run.logits, &labels)?;
            run.graph.backward(loss)?;
            model.update_bn_stats(&run, BN_MOMENTUM);

            loss_sum += run.graph.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += accuracy_of(run.graph.value(run.logits).data(), &labels);

            let lr = lr_schedule(global_step, steps_per_epoch, cfg);
            let grads: Vec<Option<Tensor<f32>>> = run
                .param_vars
                .iter()
                .map(|&v| run.graph.grad(v).cloned())
                .collect();
            sgd_step(&mut model.params, &grads, &mut state, lr, cfg)?;
            global_step += 1;
        }

        let val_acc = evaluate_accuracy(model, data, &val_idx, cfg.batch_size)?;
        logs.push(EpochLog {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_acc,
        });
    }
    Ok(logs)
}

/// Eval-mode accuracy over the given samples.
pub fn evaluate_accuracy(
    model: &Model<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let images = data.batch(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label_usize(i)).collect();
        let logits = model.forward_logits(&images)?;
        correct += accuracy_of(logits.data(), &labels);
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Fake-class probabilities (softmax over the two logits) per sample.
pub fn evaluate_scores(
    model: &Model<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        let images = data.batch(chunk);
        let logits = model.forward_logits(&images)?;
        for row in logits.data().chunks_exact(2) {
            let m = row[0].max(row[1]);
            let e0 = ((row[0] - m) as f64).exp();
            let e1 = ((row[1] - m) as f64).exp();
            scores.push(e1 / (e0 + e1));
        }
    }
    Ok(scores)
}

fn train_head_on_cached_features(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<Vec<EpochLog>> {
    use crate::graph::Graph;

    let d = model.config.width;
    let mut features = vec![0.0f32; data.len() * d];
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let images = data.batch(chunk);
        let run = model.forward(&images, Mode::Eval, ForwardOpts::default())?;
        let pooled = run.graph.value(run.pooled);
        for (bi, &i) in chunk.iter().enumerate() {
            features[i * d..(i + 1) * d].copy_from_slice(&pooled.data()[bi * d..(bi + 1) * d]);
        }
    }

    let head_w = model.param_index("head/w").expect("classifier weight exists");
    let head_b = model.param_index("head/b").expect("classifier bias exists");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let mut state = SgdState::new(model.params.len());
    let mut logs = Vec::with_capacity(cfg.total_epochs);
    let mut global_step = 0usize;

    let head_pass = |model: &Model<f32>,
                     chunk: &[usize],
                     features: &[f32],
                     labels: &[usize]|
     -> Result<(Graph<f32>, crate::graph::Var, crate::graph::Var, crate::graph::Var, crate::graph::Var)> {
        let mut g: Graph<f32> = Graph::new(Mode::Train);
        let mut fdata = Vec::with_capacity(chunk.len() * d);
        for &i in chunk {
            fdata.extend_from_slice(&features[i * d..(i + 1) * d]);
        }
        let feats = g.constant(Tensor::new(&[chunk.len(), 1, d], fdata)?);
        let w = g.leaf(model.params[head_w].value.clone(), true);
        let b = g.leaf(model.params[head_b].value.clone(), true);
        let logits3 = g.linear(feats, w, b)?;
        let logits = g.reshape(logits3, &[chunk.len(), 2])?;
        let loss = g.cross_entropy(logits, labels)?;
        Ok((g, w, b, logits, loss))
    };

    for epoch in 0..cfg.total_epochs {
        let mut order = train_idx.to_vec();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let epoch_lr = lr_schedule(global_step, steps_per_epoch, cfg);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label_usize(i)).collect();
            let (mut g, w, b, logits, loss) = head_pass(model, chunk, &features, &labels)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += accuracy_of(g.value(logits).data(), &labels);

            let lr = lr_schedule(global_step, steps_per_epoch, cfg);
            let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
            grads[head_w] = g.grad(w).cloned();
            grads[head_b] = g.grad(b).cloned();
            sgd_step(&mut model.params, &grads, &mut state, lr, cfg)?;
            global_step += 1;
        }

        // Validation on cached features with the current head.
        let mut val_correct = 0usize;
        for chunk in val_idx.to_vec().chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label_usize(i)).collect();
            let (g, _, _, logits, _) = head_pass(model, chunk, &features, &labels)?;
            val_correct += accuracy_of(g.value(logits).data(), &labels);
        }
        logs.push(EpochLog {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_acc: val_correct as f64 / val_idx.len() as f64,
        });
    }
    Ok(logs)
}
