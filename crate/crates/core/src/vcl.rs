//! Variational continual learning: after each task the trained guide becomes
//! the prior for the next one.

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::priors::update_priors;
use crate::svi::{Adam, ExecutionContext, FitOptions, VariationalBnn};

/// Replaces the prior of every Bayesian site with the guide's current
/// distribution. Guide parameters and deterministic values are untouched.
/// Without Bayesian sites this does nothing.
pub fn posterior_to_prior(bnn: &mut VariationalBnn) -> Result<()> {
    bnn.net = update_priors(&bnn.net, &bnn.guide.export_distributions())?;
    Ok(())
}

/// `accuracy[i][j]`: accuracy on task `j` after training on task `i`, for
/// `j <= i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub tasks: usize,
    pub accuracy: Vec<Vec<f64>>,
}

impl TaskMatrix {
    /// Mean accuracy over all tasks after the final one.
    pub fn final_mean(&self) -> f64 {
        let last = self.accuracy.last().expect("nonempty matrix");
        last.iter().sum::<f64>() / last.len() as f64
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.accuracy.iter().enumerate().map(|(i, r)| r[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VclConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub context: ExecutionContext,
}

/// Trains on each task in turn, evaluates on all tasks seen so far, then
/// promotes the posterior to the prior. Adam state is reset per task and the
/// guide is warm-started from the previous task.
pub fn run_task_sequence(bnn: &mut VariationalBnn, tasks: &[Task], cfg: &VclConfig) -> Result<TaskMatrix> {
    if tasks.is_empty() {
        return Err(Error::Config("empty task sequence".into()));
    }
    let width = tasks[0].train.input_width();
    if tasks.iter().any(|t| t.train.input_width() != width || t.test.input_width() != width) {
        return Err(Error::Contract("tasks have different input widths".into()));
    }
    let mut accuracy = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        bnn.likelihood.dataset_size = task.train.len();
        let batches = task.train.batches(cfg.batch_size)?;
        let mut adam = Adam::new(cfg.lr);
        let opts = FitOptions {
            epochs: cfg.epochs,
            context: cfg.context,
            seed: cfg.seed.wrapping_add(i as u64),
            shuffle: true,
            ..FitOptions::default()
        };
        bnn.fit(&batches, &mut adam, &opts, None)?;
        let row = tasks[..=i]
            .iter()
            .map(|t| {
                let eval = bnn.evaluate(&t.test.inputs, &t.test.targets, cfg.num_samples, cfg.seed)?;
                Ok(1.0 - eval.error)
            })
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(row);
        posterior_to_prior(bnn)?;
    }
    Ok(TaskMatrix {
        tasks: tasks.len(),
        accuracy,
    })
}
