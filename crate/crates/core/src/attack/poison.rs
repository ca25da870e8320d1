use rand::Rng;

use crate::data::{LabeledImages, TaskDataset, TaskDescriptor};
use crate::error::{Error, Result};
use crate::models::{apply_poison, AttackModel};
use crate::rng::rng_from;

/// Replaces the train split with `clip(x + AE_ξ(x), 0, 1)`; the test split
/// stays clean.
pub fn generate_poisoned_dataset(attack: &AttackModel, task: &TaskDataset, target_task: usize) -> Result<TaskDataset> {
    let idx: Vec<usize> = (0..task.train.len()).collect();
    let mut pixels = Vec::with_capacity(task.train.pixels().len());
    for chunk in idx.chunks(500) {
        let (x, _) = task.train.batch(chunk);
        let noise = attack.noise(&x)?;
        pixels.extend(apply_poison(&x, &noise)?.into_data());
    }
    Ok(TaskDataset {
        task_id: task.task_id,
        train: task.train.with_pixels(pixels)?,
        test: task.test.clone(),
        descriptor: TaskDescriptor::Poisoned {
            base: Box::new(task.descriptor.clone()),
            method: "attack".into(),
            target_task: Some(target_task),
            epsilon: attack.epsilon(),
        },
        permutation: task.permutation.clone(),
    })
}

/// Adds i.i.d. `U(−ε, ε)` noise to every training pixel, clipped to `[0, 1]`.
pub fn uniform_noise_baseline(task: &TaskDataset, epsilon: f64, seed: u64) -> Result<TaskDataset> {
    if !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut rng = rng_from(seed);
    let pixels = task
        .train
        .pixels()
        .iter()
        .map(|&p| {
            let n = if epsilon > 0.0 { rng.gen_range(-epsilon..epsilon) } else { 0.0 };
            (p + n).clamp(0.0, 1.0)
        })
        .collect();
    Ok(TaskDataset {
        task_id: task.task_id,
        train: task.train.with_pixels(pixels)?,
        test: task.test.clone(),
        descriptor: TaskDescriptor::Poisoned {
            base: Box::new(task.descriptor.clone()),
            method: "noise".into(),
            target_task: None,
            epsilon,
        },
        permutation: task.permutation.clone(),
    })
}

/// Rounds `poisoned` to the 8-bit pixel grid of the IDX format while keeping
/// every pixel within `epsilon` of `clean` and inside `[0, 1]`.
///
/// `clean` is expected to lie on the grid already (as IDX-loaded data does),
/// so the result is exactly what a round trip through IDX files yields and
/// still satisfies the ε-bound.
pub fn quantize_poison(clean: &LabeledImages, poisoned: &LabeledImages, epsilon: f64) -> Result<LabeledImages> {
    if clean.pixels().len() != poisoned.pixels().len() {
        return Err(Error::Consistency("datasets differ in size".into()));
    }
    let budget = (255.0 * epsilon + 1e-9).floor();
    let pixels = clean
        .pixels()
        .iter()
        .zip(poisoned.pixels())
        .map(|(&c, &p)| {
            let c8 = (c * 255.0).round();
            let q = (p * 255.0).round().clamp(c8 - budget, c8 + budget).clamp(0.0, 255.0);
            q / 255.0
        })
        .collect();
    poisoned.with_pixels(pixels)
}

/// `max |poisoned − clean|` over corresponding pixels.
pub fn max_perturbation(clean: &LabeledImages, poisoned: &LabeledImages) -> Result<f64> {
    if clean.pixels().len() != poisoned.pixels().len() {
        return Err(Error::Consistency("datasets differ in size".into()));
    }
    Ok(clean
        .pixels()
        .iter()
        .zip(poisoned.pixels())
        .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}
