use super::AttackConfig;
use crate::autodiff::Tensor;
use crate::data::{batch_indices, TaskDataset};
use crate::error::Result;
use crate::learners::{sgd_step, ImportanceMap};
use crate::models::{AttackModel, Classifier};
use crate::params::ParamVector;
use crate::rng::derive_seed;

/// Parameters of the temporary victim after `step` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub params: ParamVector,
}

/// Snapshots of a temporary victim learning the poisoned new task. The
/// first snapshot is the starting point `θ^{N-1}`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub steps: usize,
    pub max_noise: f64,
}

/// Trains a copy of `start` on `x + AE_ξ(x)` for the new task with the
/// victim's loss and records `θ` every `snapshot_stride` steps, including
/// step 0 and, when it falls on the stride, the final step. `attack` is
/// held fixed.
pub fn record_trajectory(
    start: &Classifier,
    attack: &AttackModel,
    task: &TaskDataset,
    maps: &[ImportanceMap],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Trajectory> {
    let mut temp = start.clone();
    let mut snapshots = Vec::new();
    let mut step = 0usize;
    let mut max_noise = 0.0f64;
    for epoch in 0..cfg.trajectory_epochs {
        let order = batch_indices(
            task.train.len(),
            cfg.trajectory_batch_size,
            derive_seed(seed, "batches", epoch as u64),
            true,
        )?;
        for b in &order {
            if step % cfg.snapshot_stride == 0 {
                snapshots.push(Snapshot {
                    step,
                    params: temp.params().clone(),
                });
            }
            let (x, y) = task.train.batch(b);
            let noise = attack.noise(&x)?;
            max_noise = max_noise.max(noise.max_abs());
            let poisoned: Vec<f64> = x.data().iter().zip(noise.data()).map(|(a, n)| a + n).collect();
            let poisoned = Tensor::new(x.shape().to_vec(), poisoned)?;
            sgd_step(&mut temp, poisoned, &y, maps, cfg.inner_lr, None)
                .map_err(|e| e.context(format!("trajectory step {step}")))?;
            step += 1;
        }
    }
    if step % cfg.snapshot_stride == 0 || snapshots.is_empty() {
        snapshots.push(Snapshot {
            step,
            params: temp.params().clone(),
        });
    }
    Ok(Trajectory {
        snapshots,
        steps: step,
        max_noise,
    })
}
