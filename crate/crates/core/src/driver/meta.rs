//! Meta-training: shared encoder and kernel parameters fitted to the summed
//! marginal likelihoods of several offline tasks.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DriverError, ObservationSet};
use crate::gp::{self, DeepKernelGp, FitOptions, GpError};
use crate::nn::{step_decay_lr, Adam};
use crate::space::{Configuration, SearchSpace};

/// Offline observations of one task; `task_id` is its value of the union
/// space's root decision.
#[derive(Debug, Clone)]
pub struct MetaTask {
    pub task_id: usize,
    pub observations: ObservationSet,
}

#[derive(Debug, Clone)]
pub struct MetaTaskSet {
    pub space: SearchSpace,
    pub tasks: Vec<MetaTask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaOptions {
    pub fit: FitOptions,
    /// Tasks per Adam step.
    pub tasks_per_batch: usize,
    /// Seeds the task shuffling.
    pub seed: u64,
}

impl Default for MetaOptions {
    fn default() -> Self {
        MetaOptions {
            fit: FitOptions::default(),
            tasks_per_batch: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaResult {
    pub model: DeepKernelGp,
    /// Summed loss per epoch.
    pub history: Vec<f64>,
    /// Ids of tasks skipped for having fewer than two successful observations.
    pub skipped: Vec<usize>,
}

/// Fits `model` to all tasks. When every task fits in one minibatch this is
/// full-batch training with best-seen selection, identical to a plain fit;
/// otherwise each epoch takes one Adam step per shuffled minibatch and the
/// final iterate is returned.
pub fn meta_train(set: &MetaTaskSet, mut model: DeepKernelGp, opts: &MetaOptions) -> Result<MetaResult, DriverError> {
    let mut skipped = Vec::new();
    let mut data: Vec<(Vec<&Configuration>, Array1<f64>)> = Vec::new();
    for task in &set.tasks {
        let (configs, ys): (Vec<&Configuration>, Vec<f64>) = task.observations.successes().unzip();
        if configs.len() < 2 {
            log::warn!("skipping task {} with {} usable observations", task.task_id, configs.len());
            skipped.push(task.task_id);
            continue;
        }
        data.push((configs, gp::standardize(&ys).2));
    }
    if data.is_empty() {
        return Err(GpError::TooFewObservations { needed: 2, got: 0 }.into());
    }
    let tasks: Vec<(&[&Configuration], &Array1<f64>)> = data.iter().map(|(c, y)| (c.as_slice(), y)).collect();
    let per_batch = opts.tasks_per_batch.max(1);
    if tasks.len() <= per_batch {
        let history = gp::train(&mut model, &tasks, &opts.fit)?;
        return Ok(MetaResult { model, history, skipped });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = model.flat();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut history = Vec::with_capacity(opts.fit.epochs);
    for epoch in 0..opts.fit.epochs {
        order.shuffle(&mut rng);
        let lr = step_decay_lr(opts.fit.lr, epoch, opts.fit.decay_every, opts.fit.decay_factor);
        let mut total = 0.0;
        for chunk in order.chunks(per_batch) {
            let batch: Vec<_> = chunk.iter().map(|&i| tasks[i]).collect();
            model.set_flat(&params);
            let (loss, grad) = model.batch_nll_and_grad(&batch)?;
            total += loss;
            if grad.iter().all(|g| g.is_finite()) {
                adam.step(&mut params, &grad, lr);
            }
        }
        history.push(total);
    }
    model.set_flat(&params);
    Ok(MetaResult { model, history, skipped })
}
