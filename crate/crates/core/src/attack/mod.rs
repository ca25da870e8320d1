//! Task-specific data poisoning against regularization-based learners.
//!
//! The attack model `AE_ξ` is trained by alternating two phases per epoch:
//!
//! 1. [`record_trajectory`]: a temporary copy of the victim, starting from
//!    `θ^{N-1}`, learns the currently poisoned new task with the victim's own
//!    loss (cross-entropy plus the continual-learning penalty). Its
//!    parameters are snapshotted every few steps.
//! 2. Along that trajectory, each snapshot `θ_j` is pseudo-updated on a
//!    poisoned batch, `θ' = θ_j − α_f ∇θ L_cls`, keeping `θ'` a function of
//!    `ξ`. The attack loss ([`attack_loss`]) is the target-task
//!    cross-entropy at `θ'` minus a distillation term that keeps `θ'` close
//!    to `θ^{N-1}` on the other past tasks; `ξ` takes an Adam ascent step.

mod poison;
mod trajectory;

use serde::{Deserialize, Serialize};

pub use poison::{generate_poisoned_dataset, max_perturbation, quantize_poison, uniform_noise_baseline};
pub use trajectory::{record_trajectory, Snapshot, Trajectory};

use crate::autodiff::{pseudo_update, Tape, Tensor, UpdateOrder, Var};
use crate::data::{batch_indices, sample_indices, sample_kd_subset, LabeledImages, TaskDataset};
use crate::error::{Error, Result};
use crate::learners::{penalty_coefficients, ImportanceMap, PenaltyCoefficients};
use crate::models::{AttackArch, AttackModel, Classifier, MlpArch};
use crate::optim::Adam;
use crate::params::ParamVector;
use crate::rng::derive_seed;

/// Attack hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Task whose accuracy the attack degrades (1-based).
    pub target_task: usize,
    /// Task whose training data gets poisoned (1-based).
    pub new_task: usize,
    pub epsilon: f64,
    pub epochs: usize,
    /// Adam step size for `ξ`.
    pub lr: f64,
    pub batch_size: usize,
    /// Step size `α_f` of the pseudo-update and the recorded trajectory.
    pub inner_lr: f64,
    /// Balancing weight `α_kd` of the distillation term.
    pub kd_weight: f64,
    pub temperature: f64,
    /// Images sampled per non-target past task, resampled each epoch.
    pub kd_subset: usize,
    /// Images per task fed to the distillation term at each step.
    pub kd_batch: usize,
    /// Include the distillation term at all (ablation switch).
    pub use_kd: bool,
    /// Optimizer steps between recorded snapshots.
    pub snapshot_stride: usize,
    /// Passes over the new task's data per recorded trajectory.
    pub trajectory_epochs: usize,
    /// Mini-batch size of the recorded victim trajectory (the victim's own).
    pub trajectory_batch_size: usize,
    pub order: UpdateOrder,
    pub arch: AttackArch,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            target_task: 1,
            new_task: 5,
            epsilon: 0.2,
            epochs: 10,
            lr: 1e-4,
            batch_size: 256,
            inner_lr: 0.1,
            kd_weight: 1.0,
            temperature: 2.0,
            kd_subset: 1024,
            kd_batch: 256,
            use_kd: true,
            snapshot_stride: 10,
            trajectory_epochs: 1,
            trajectory_batch_size: 64,
            order: UpdateOrder::SecondOrder,
            arch: AttackArch::full(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.target_task == 0 || self.target_task >= self.new_task {
            return bad(format!(
                "target task {} must satisfy 1 <= t < N = {}",
                self.target_task, self.new_task
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size == 0 || self.kd_batch == 0 || self.trajectory_batch_size == 0 || self.snapshot_stride == 0 {
            return bad("batch sizes and snapshot stride must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.inner_lr >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        Ok(())
    }

    /// Past tasks feeding the distillation term: every `k < N`, `k ≠ t`.
    pub fn kd_task_ids(&self) -> Vec<usize> {
        if !self.use_kd {
            return Vec::new();
        }
        (1..self.new_task).filter(|&k| k != self.target_task).collect()
    }
}

/// Distillation inputs from one non-target past task, with the frozen
/// `f_{θ^{N-1}}` logits.
#[derive(Clone, Debug)]
pub struct KdBatch {
    pub task_id: usize,
    pub x: Tensor,
    pub teacher_logits: Tensor,
}

/// Inputs to one attack-loss evaluation.
pub struct AttackBatch<'a> {
    /// Clean new-task batch `(x^N, y^N)`.
    pub new_x: &'a Tensor,
    pub new_y: &'a [usize],
    /// Target-task batch `(x^t, y^t)`.
    pub target_x: &'a Tensor,
    pub target_y: &'a [usize],
    pub kd: &'a [KdBatch],
}

/// Value of the attack objective and its gradient in `ξ`.
#[derive(Clone, Debug)]
pub struct AttackLossEval {
    pub loss: f64,
    pub target_ce: f64,
    pub kd_total: f64,
    pub grad: ParamVector,
    pub max_noise: f64,
}

/// `L_atk(ξ) = CE(f_θ'(x^t), y^t) − Σ_i α_kd T² KL(σ(f_θ'(x^i)/T) ‖ σ(f_{θ^{N-1}}(x^i)/T))`
/// where `θ'` is the victim's own update from `θ_j` on the poisoned batch:
/// `θ_j − α_f ∇θ CE(f_θ(x^N + AE_ξ(x^N)), y^N)` followed by the penalty's
/// proximal step (see [`crate::learners::sgd_step`]).
///
/// The gradient flows to `ξ` only through `θ'`.
pub fn attack_loss(
    theta_j: &ParamVector,
    arch: &MlpArch,
    attack: &AttackModel,
    batch: &AttackBatch<'_>,
    maps: &[ImportanceMap],
    cfg: &AttackConfig,
) -> Result<AttackLossEval> {
    cfg.validate()?;
    for kd in batch.kd {
        if kd.task_id == cfg.target_task || kd.task_id == cfg.new_task {
            return Err(Error::Config(format!(
                "distillation batch from task {} (target {}, new {})",
                kd.task_id, cfg.target_task, cfg.new_task
            )));
        }
    }
    let mut tape = Tape::new();
    let theta = theta_j.to_variables(&mut tape);
    let xi = attack.params().to_variables(&mut tape);
    let new_x = tape.constant(batch.new_x.clone());
    let mut max_noise = 0.0f64;

    let updated = pseudo_update(
        &mut tape,
        &theta,
        &xi,
        |tape, theta, xi| {
            let noise = attack.forward(tape, xi, new_x)?;
            max_noise = tape.value(noise).max_abs();
            let poisoned = tape.add(new_x, noise)?;
            let logits = arch.forward(tape, theta, poisoned)?;
            tape.cross_entropy(logits, batch.new_y)
        },
        cfg.inner_lr,
        cfg.order,
    )?;
    let updated = match penalty_coefficients(maps, theta_j)? {
        Some(coef) => prox_on_tape(&mut tape, theta_j, &updated, &coef, cfg.inner_lr)?,
        None => updated,
    };

    let tx = tape.constant(batch.target_x.clone());
    let logits = arch.forward(&mut tape, &updated, tx)?;
    let target_ce = tape.cross_entropy(logits, batch.target_y)?;
    let mut loss = target_ce;
    let mut kd_total = 0.0;
    let kd_scale = cfg.kd_weight * cfg.temperature * cfg.temperature;
    for kd in batch.kd {
        let x = tape.constant(kd.x.clone());
        let student = arch.forward(&mut tape, &updated, x)?;
        let teacher = tape.constant(kd.teacher_logits.clone());
        let kl = tape.kl_divergence_logits(student, teacher, cfg.temperature)?;
        let term = tape.scale(kl, kd_scale);
        kd_total += tape.item(term)?;
        loss = tape.sub(loss, term)?;
    }
    let value = tape.item(loss)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite attack loss {value}")));
    }
    let target_ce = tape.item(target_ce)?;
    let grads = tape.backward(loss, &xi)?;
    let grad = ParamVector::from_tensors(attack.params().layout().clone(), &grads)?;
    Ok(AttackLossEval {
        loss: value,
        target_ce,
        kd_total,
        grad,
        max_noise,
    })
}

/// `(v + lr·pull) / (1 + lr·curvature)` applied to every parameter tensor.
fn prox_on_tape(
    tape: &mut Tape,
    layout_of: &ParamVector,
    v: &[Var],
    coef: &PenaltyCoefficients,
    lr: f64,
) -> Result<Vec<Var>> {
    let segments = layout_of.layout().segments();
    v.iter()
        .zip(segments)
        .map(|(&x, seg)| {
            let r = seg.range();
            let scale: Vec<f64> = coef.curvature[r.clone()].iter().map(|k| 1.0 / (1.0 + lr * k)).collect();
            let shift: Vec<f64> = coef.pull[r]
                .iter()
                .zip(&scale)
                .map(|(p, s)| lr * p * s)
                .collect();
            let scale = tape.constant(Tensor::new(seg.shape.clone(), scale)?);
            let shift = tape.constant(Tensor::new(seg.shape.clone(), shift)?);
            let y = tape.mul(x, scale)?;
            tape.add(y, shift)
        })
        .collect()
}

/// Per-epoch record of attack-model training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackLog {
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_mean_target_ce: Vec<f64>,
    pub epoch_mean_kd: Vec<f64>,
    pub steps: usize,
    /// Largest `|AE_ξ(x)|` produced anywhere during training.
    pub max_noise: f64,
}

fn kd_batches_for_step(pools: &[KdBatch], per_task: usize, step: usize) -> Result<Vec<KdBatch>> {
    pools
        .iter()
        .map(|pool| {
            let n = pool.x.shape()[0];
            let take = per_task.min(n);
            let start = (step * take) % n.max(1);
            let rows: Vec<usize> = (0..take).map(|i| (start + i) % n).collect();
            Ok(KdBatch {
                task_id: pool.task_id,
                x: gather_rows(&pool.x, &rows)?,
                teacher_logits: gather_rows(&pool.teacher_logits, &rows)?,
            })
        })
        .collect()
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

fn kd_pool(prev: &Classifier, task: &TaskDataset, n: usize, seed: u64) -> Result<KdBatch> {
    let sample: LabeledImages = sample_kd_subset(task, n.min(task.train.len()), seed)?;
    let x = sample.images_tensor();
    let teacher_logits = prev.logits(&x)?;
    Ok(KdBatch {
        task_id: task.task_id,
        x,
        teacher_logits,
    })
}

/// Trains `AE_ξ` against `prev = f_{θ^{N-1}}`.
///
/// `tasks[k - 1]` must hold task `k` for every `k ≤ N`; only the training
/// splits are used.
pub fn train_attack_model(
    prev: &Classifier,
    tasks: &[TaskDataset],
    maps: &[ImportanceMap],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(AttackModel, AttackLog)> {
    cfg.validate()?;
    if tasks.len() < cfg.new_task {
        return Err(Error::Config(format!(
            "attack on task {} needs {} tasks, got {}",
            cfg.new_task,
            cfg.new_task,
            tasks.len()
        )));
    }
    let new_task = &tasks[cfg.new_task - 1];
    let target = &tasks[cfg.target_task - 1];
    let mut attack = AttackModel::new(cfg.arch.clone(), cfg.epsilon, derive_seed(seed, "attack-init", 0))?;
    let mut adam = Adam::new(attack.params().len(), cfg.lr);
    let mut log = AttackLog::default();

    for epoch in 0..cfg.epochs {
        let ctx = |e: Error| e.context(format!("attack epoch {epoch}"));
        let pools = cfg
            .kd_task_ids()
            .into_iter()
            .map(|k| {
                kd_pool(
                    prev,
                    &tasks[k - 1],
                    cfg.kd_subset,
                    derive_seed(seed, "kd-subset", (epoch * 1000 + k) as u64),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;

        let trajectory = record_trajectory(
            prev,
            &attack,
            new_task,
            maps,
            cfg,
            derive_seed(seed, "trajectory", epoch as u64),
        )
        .map_err(ctx)?;
        log.max_noise = log.max_noise.max(trajectory.max_noise);

        let order = batch_indices(
            new_task.train.len(),
            cfg.batch_size,
            derive_seed(seed, "attack-batches", epoch as u64),
            true,
        )?;
        let n_snap = trajectory.snapshots.len();
        let (mut sum_loss, mut sum_ce, mut sum_kd) = (0.0, 0.0, 0.0);
        for (s, b) in order.iter().enumerate() {
            let theta_j = &trajectory.snapshots[s * n_snap / order.len()].params;
            let (new_x, new_y) = new_task.train.batch(b);
            let t_idx = sample_indices(
                target.train.len(),
                cfg.batch_size.min(target.train.len()),
                derive_seed(seed, "target-batch", log.steps as u64),
            )?;
            let (target_x, target_y) = target.train.batch(&t_idx);
            let kd = kd_batches_for_step(&pools, cfg.kd_batch, s)?;
            let eval = attack_loss(
                theta_j,
                prev.arch(),
                &attack,
                &AttackBatch {
                    new_x: &new_x,
                    new_y: &new_y,
                    target_x: &target_x,
                    target_y: &target_y,
                    kd: &kd,
                },
                maps,
                cfg,
            )
            .map_err(|e| e.context(format!("attack epoch {epoch} step {s}")))?;
            // ascent on L_atk == Adam descent on −L_atk
            let ascent: Vec<f64> = eval.grad.values().iter().map(|g| -g).collect();
            adam.step(attack.params_mut().values_mut(), &ascent);
            log.max_noise = log.max_noise.max(eval.max_noise);
            log.steps += 1;
            sum_loss += eval.loss;
            sum_ce += eval.target_ce;
            sum_kd += eval.kd_total;
        }
        let n = order.len().max(1) as f64;
        log.epoch_mean_loss.push(sum_loss / n);
        log.epoch_mean_target_ce.push(sum_ce / n);
        log.epoch_mean_kd.push(sum_kd / n);
    }
    Ok((attack, log))
}
