//! SGD-with-momentum training of the classifier on cross-entropy, always
//! under the classical ReLU backward rule.

use crate::data::VqaExample;
use crate::error::{Error, Result};
use crate::model::VqaModel;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 32,
            momentum: 0.9,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Per-channel mean pixel value over a set of images.
pub fn dataset_mean_rgb(examples: &[VqaExample]) -> [f32; 3] {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for ex in examples {
        let hw = ex.image.len() / 3;
        for c in 0..3 {
            let plane = &ex.image.data()[c * hw..(c + 1) * hw];
            sums[c] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        count += hw;
    }
    if count == 0 {
        return [0.0; 3];
    }
    [
        (sums[0] / count as f64) as f32,
        (sums[1] / count as f64) as f32,
        (sums[2] / count as f64) as f32,
    ]
}

/// Cross-entropy loss and parameter gradients for one example.
fn example_grad(model: &VqaModel, ex: &VqaExample) -> Result<(f32, Vec<Tensor>)> {
    let pass = model.forward(&ex.image, &ex.question)?;
    let mut tape = pass.tape;
    let loss = tape.cross_entropy(pass.ids.probabilities, ex.answer)?;
    let grads = tape.backward(loss)?;
    let param_grads = pass.ids.params.iter().map(|id| grads.wrt(*id).clone()).collect();
    Ok((tape.value(loss).item(), param_grads))
}

/// Fraction of examples whose argmax answer matches the label.
pub fn accuracy(model: &VqaModel, examples: &[VqaExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = examples
        .par_iter()
        .map(|ex| {
            model
                .forward_infer(&ex.image, &ex.question)
                .map(|d| usize::from(d.predicted == ex.answer))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / examples.len() as f64)
}

/// Train in place. Batch gradients average per-example gradients; example
/// order reshuffles each epoch from the config seed, so a fixed seed gives
/// bit-identical parameters (batch members are reduced in a fixed order
/// regardless of worker threads). Records the training-set channel means on
/// the model for later use as the occlusion patch color.
pub fn train(
    model: &mut VqaModel,
    train_set: &[VqaExample],
    holdout: &[VqaExample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with_progress(model, train_set, holdout, cfg, |_| {})
}

/// [`train`] with a per-epoch callback, for live logging.
pub fn train_with_progress(
    model: &mut VqaModel,
    train_set: &[VqaExample],
    holdout: &[VqaExample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train",
            reason: "empty training set".into(),
        });
    }
    if cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument {
            op: "train",
            reason: format!("learning_rate {}, batch_size {}", cfg.learning_rate, cfg.batch_size),
        });
    }
    model.train_mean_rgb = Some(dataset_mean_rgb(train_set));

    let mut velocity: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;

        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f32, Vec<Tensor>)> = chunk
                .par_iter()
                .map(|&i| example_grad(model, &train_set[i]))
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0f64;
            let mut batch_grads: Vec<Tensor> = model
                .params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect();
            for (loss, grads) in &results {
                batch_loss += *loss as f64;
                for (acc, g) in batch_grads.iter_mut().zip(grads.iter()) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                        *a += v;
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            loss_sum += batch_loss * chunk.len() as f64;

            for ((v, g), (_, p)) in velocity
                .iter_mut()
                .zip(batch_grads.iter())
                .zip(model.params_mut())
            {
                for ((vv, &gv), pv) in v
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter())
                    .zip(p.data_mut().iter_mut())
                {
                    *vv = cfg.momentum * *vv + (1.0 - cfg.momentum) * gv * scale;
                    *pv -= cfg.learning_rate * *vv;
                }
            }
        }

        let holdout_accuracy = accuracy(model, holdout)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            holdout_accuracy,
        };
        progress(&stats);
        log.epochs.push(stats);
    }
    Ok(log)
}
