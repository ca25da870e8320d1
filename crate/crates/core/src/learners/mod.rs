//! Regularization-based continual learners (EWC, SI) and the plain-SGD
//! baseline, sharing one sequential training driver.

mod penalty;
mod si;

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

pub use penalty::{add_penalty_grad, penalty, penalty_coefficients, penalty_value, ImportanceMap, PenaltyCoefficients};
pub use si::SiAccumulator;

use crate::autodiff::{Tape, Tensor};
use crate::data::{batch_indices, sample_indices, LabeledImages, TaskDataset};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::params::ParamVector;
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Ewc,
    Si,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sgd, Method::Ewc, Method::Si];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Ewc => "ewc",
            Method::Si => "si",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Method::Sgd),
            "ewc" => Ok(Method::Ewc),
            "si" => Ok(Method::Si),
            other => Err(Error::Config(format!("unknown method `{other}` (sgd|ewc|si)"))),
        }
    }
}

/// Which class the Fisher log-likelihood gradient is taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherMode {
    /// Ground-truth label (empirical Fisher).
    Empirical,
    /// Class sampled from the model's predictive distribution.
    Sampled,
}

impl FromStr for FisherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(FisherMode::Empirical),
            "sampled" => Ok(FisherMode::Sampled),
            other => Err(Error::Config(format!(
                "unknown fisher mode `{other}` (empirical|sampled)"
            ))),
        }
    }
}

/// Victim-side optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ewc_lambda: f64,
    pub si_c: f64,
    pub si_damping: f64,
    pub fisher_samples: usize,
    pub fisher_mode: FisherMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 5,
            batch_size: 64,
            ewc_lambda: 100.0,
            si_c: 0.5,
            si_damping: 0.1,
            fisher_samples: 2000,
            fisher_mode: FisherMode::Empirical,
        }
    }
}

/// Diagonal Fisher `F_i = mean (∂ log p(ŷ|x) / ∂θ_i)²` over a seeded sample,
/// anchored at the classifier's current parameters.
pub fn estimate_fisher(
    c: &Classifier,
    data: &LabeledImages,
    n_samples: usize,
    seed: u64,
    mode: FisherMode,
    strength: f64,
) -> Result<ImportanceMap> {
    if data.is_empty() || n_samples == 0 {
        return Err(Error::Parameter("Fisher estimate needs at least one sample".into()));
    }
    let idx = sample_indices(data.len(), n_samples, derive_seed(seed, "fisher", 0))?;
    let mut rng = rng_from(derive_seed(seed, "fisher-labels", 0));
    let layout = c.params().layout().clone();
    let mut fisher = vec![0.0; layout.len()];
    for &i in &idx {
        let (x, y) = data.batch(&[i]);
        let mut tape = Tape::new();
        let p = c.params().to_variables(&mut tape);
        let xv = tape.constant(x);
        let logits = c.forward(&mut tape, &p, xv)?;
        let class = match mode {
            FisherMode::Empirical => y[0],
            FisherMode::Sampled => {
                let probs = tape.softmax(logits, 1)?;
                let dist = WeightedIndex::new(tape.value(probs).data())
                    .map_err(|e| Error::Numerical(format!("predictive distribution: {e}")))?;
                dist.sample(&mut rng)
            }
        };
        // cross-entropy is −log p(class | x); the sign vanishes when squared
        let nll = tape.cross_entropy(logits, &[class])?;
        let grads = tape.backward(nll, &p)?;
        let mut off = 0;
        for g in grads {
            for (f, v) in fisher[off..off + g.len()].iter_mut().zip(g.data()) {
                *f += v * v;
            }
            off += g.len();
        }
    }
    let n = idx.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    ImportanceMap::new(
        ParamVector::new(layout, fisher)?,
        c.params().clone(),
        strength,
    )
}

/// Gradient of the batch cross-entropy, flattened in layout order.
pub fn ce_gradient(c: &Classifier, x: Tensor, y: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = c.params().to_variables(&mut tape);
    let xv = tape.constant(x);
    let logits = c.forward(&mut tape, &p, xv)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.item(loss)?;
    let grads = tape.backward(loss, &p)?;
    let mut flat = Vec::with_capacity(c.params().len());
    for g in grads {
        flat.extend_from_slice(g.data());
    }
    Ok((value, flat))
}

/// One step on `CE(f_θ(x), y) + Ω(θ)`: a gradient step on the
/// cross-entropy followed by the exact proximal step of the quadratic
/// penalty, which stays stable for any penalty strength. Without an active
/// penalty this is plain SGD. Returns the loss before the step.
pub fn sgd_step(
    c: &mut Classifier,
    x: Tensor,
    y: &[usize],
    maps: &[ImportanceMap],
    lr: f64,
    si: Option<&mut SiAccumulator>,
) -> Result<f64> {
    let (ce, ce_grad) = ce_gradient(c, x, y)?;
    let loss = ce + penalty_value(maps, c.params())?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    let mut next: Vec<f64> = c
        .params()
        .values()
        .iter()
        .zip(&ce_grad)
        .map(|(t, g)| t - lr * g)
        .collect();
    if let Some(coef) = penalty_coefficients(maps, c.params())? {
        coef.prox(&mut next, lr);
    }
    if let Some(acc) = si {
        let delta: Vec<f64> = next.iter().zip(c.params().values()).map(|(n, t)| n - t).collect();
        acc.accumulate(&ce_grad, &delta);
    }
    c.params_mut().values_mut().copy_from_slice(&next);
    Ok(loss)
}

/// Result of training on one task.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    /// Importance map consolidated after the task (EWC, SI).
    pub new_map: Option<ImportanceMap>,
    /// Test accuracies on `eval_sets` after each epoch.
    pub trace: Vec<Vec<f64>>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Accuracy on every evaluation set.
pub fn evaluate(c: &Classifier, sets: &[&LabeledImages]) -> Result<Vec<f64>> {
    sets.iter().map(|d| c.accuracy(d)).collect()
}

/// Trains `c` on `task` with `method`, minimizing cross-entropy plus the
/// penalty of the previously consolidated `maps`.
///
/// EWC estimates its Fisher after training; SI accumulates its path
/// integral during training and consolidates at the end; SGD adds nothing.
pub fn train_task(
    c: &mut Classifier,
    task: &TaskDataset,
    method: Method,
    maps: &[ImportanceMap],
    cfg: &TrainConfig,
    seed: u64,
    eval_sets: &[&LabeledImages],
) -> Result<TaskOutcome> {
    let mut si = (method == Method::Si).then(|| SiAccumulator::new(c.params().clone(), cfg.si_damping));
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = batch_indices(
            task.train.len(),
            cfg.batch_size,
            derive_seed(seed, "batches", epoch as u64),
            true,
        )?;
        let mut total = 0.0;
        for b in &order {
            let (x, y) = task.train.batch(b);
            let loss = sgd_step(c, x, &y, maps, cfg.lr, si.as_mut()).map_err(|e| {
                e.context(format!("task {} epoch {epoch} step {step}", task.task_id))
            })?;
            total += loss;
            step += 1;
        }
        epoch_loss.push(total / order.len().max(1) as f64);
        trace.push(evaluate(c, eval_sets)?);
    }
    let new_map = match method {
        Method::Sgd => None,
        Method::Ewc => Some(estimate_fisher(
            c,
            &task.train,
            cfg.fisher_samples.min(task.train.len()),
            derive_seed(seed, "fisher", task.task_id as u64),
            cfg.fisher_mode,
            cfg.ewc_lambda,
        )?),
        Method::Si => Some(
            si.expect("created for SI")
                .consolidate(c.params(), cfg.si_c)?,
        ),
    };
    Ok(TaskOutcome {
        new_map,
        trace,
        epoch_loss,
    })
}
