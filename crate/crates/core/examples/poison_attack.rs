//! Trains an EWC learner on two tasks, fits the attack model against it,
//! poisons task 3 and compares the victim's task-1 accuracy after clean and
//! poisoned training.
//!
//! cargo run --release --example poison_attack -- [mnist-dir]

use std::path::PathBuf;

use poisonlab::attack::{generate_poisoned_dataset, max_perturbation, quantize_poison, train_attack_model, AttackConfig};
use poisonlab::data::{make_permuted_tasks, subsample_train, Mnist, TaskDataset};
use poisonlab::learners::{train_task, ImportanceMap, Method, TrainConfig};
use poisonlab::models::{AttackArch, Classifier, MlpArch};
use poisonlab::Result;

fn finish(prev: &Classifier, maps: &[ImportanceMap], task: &TaskDataset, cfg: &TrainConfig) -> Result<Classifier> {
    let mut c = prev.clone();
    train_task(&mut c, task, Method::Ewc, maps, cfg, 3, &[])?;
    Ok(c)
}

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    let mnist = Mnist::load(&dir)?;
    let mut tasks = make_permuted_tasks(&mnist.train, &mnist.test, 3, 2)?;
    subsample_train(&mut tasks, 3_000, 2)?;
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };

    let mut victim = Classifier::new(MlpArch::mnist(), 2);
    let mut maps = Vec::new();
    for (k, task) in tasks[..2].iter().enumerate() {
        maps.extend(train_task(&mut victim, task, Method::Ewc, &maps, &cfg, k as u64, &[])?.new_map);
    }

    let attack_cfg = AttackConfig {
        target_task: 1,
        new_task: 3,
        epochs: 2,
        inner_lr: cfg.lr,
        trajectory_batch_size: cfg.batch_size,
        arch: AttackArch::desk(),
        ..AttackConfig::default()
    };
    let (attack, log) = train_attack_model(&victim, &tasks, &maps, &attack_cfg, 5)?;
    println!("attack loss per epoch: {:?}", log.epoch_mean_loss);

    let raw = generate_poisoned_dataset(&attack, &tasks[2], 1)?;
    let mut poisoned = raw.clone();
    poisoned.train = quantize_poison(&tasks[2].train, &raw.train, attack_cfg.epsilon)?;
    println!("max |x' - x| = {:.4}", max_perturbation(&tasks[2].train, &poisoned.train)?);

    let clean = finish(&victim, &maps, &tasks[2], &cfg)?;
    let dirty = finish(&victim, &maps, &poisoned, &cfg)?;
    for (k, t) in tasks.iter().enumerate() {
        println!(
            "task {}: clean {:.4}  poisoned {:.4}",
            k + 1,
            clean.accuracy(&t.test)?,
            dirty.accuracy(&t.test)?
        );
    }
    Ok(())
}
