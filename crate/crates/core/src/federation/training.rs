use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{augment, AugmentPolicy};
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, NetworkArchitecture, ParameterSet, Tensor};

/// Images per forward call during evaluation and prediction.
pub const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub params: ParameterSet,
    /// Example-weighted mean loss of each epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
}

/// Stacks `images` into a batch, augmenting each one in order.
pub fn make_batch<R: Rng + ?Sized>(images: &[&Tensor], policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor> {
    if !policy.enabled {
        return Tensor::stack(images.iter().copied());
    }
    let augmented: Vec<Tensor> = images.iter().map(|img| augment(img, policy, rng)).collect();
    Tensor::stack(&augmented)
}

/// Mini-batch SGD over `examples` for `epochs` passes; the last partial batch is kept.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised<R: Rng + ?Sized>(
    arch: &NetworkArchitecture,
    start: &ParameterSet,
    examples: &[&LabeledExample],
    epochs: usize,
    batch_size: usize,
    eta: f64,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<TrainStats> {
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut params = start.clone();
    let mut epoch_losses = Vec::with_capacity(epochs);
    if examples.is_empty() {
        if epochs > 0 {
            return Err(Error::EmptyBatch);
        }
        return Ok(TrainStats { params, epoch_losses });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &*examples[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].label).collect();
            let batch = make_batch(&images, policy, rng)?;
            let (loss, grads) = loss_and_grad(arch, &params, &batch, &labels)?;
            params.apply_sgd(&grads, eta)?;
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / examples.len() as f64);
    }
    Ok(TrainStats { params, epoch_losses })
}
