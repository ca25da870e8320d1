use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Benchmark, ExperimentConfig, Variant};
use crate::attack::{
    generate_poisoned_dataset, max_perturbation, quantize_poison, train_attack_model, uniform_noise_baseline,
    AttackLog,
};
use crate::data::{make_permuted_tasks, make_split_tasks, subsample_train, LabeledImages, Mnist, TaskDataset};
use crate::error::{Error, Result};
use crate::learners::{evaluate, train_task, ImportanceMap};
use crate::models::{checkpoint, AttackModel, Classifier, MlpArch};
use crate::rng::derive_seed;

/// Test accuracies after each epoch of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Task being trained (1-based).
    pub trained_task: usize,
    /// Epoch within that task (1-based).
    pub epoch: usize,
    /// Accuracy on every task's clean test split.
    pub accuracy: Vec<f64>,
}

/// `r[i][j]`: clean test accuracy on task `j + 1` right after training on
/// task `i + 1`, plus the per-epoch traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub n_tasks: usize,
    pub r: Vec<Vec<f64>>,
    pub traces: Vec<TraceRow>,
}

impl ResultsMatrix {
    pub fn new(n_tasks: usize) -> Self {
        ResultsMatrix {
            n_tasks,
            r: vec![vec![0.0; n_tasks]; n_tasks],
            traces: Vec::new(),
        }
    }

    /// Square matrix of accuracies in `[0, 1]`, without traces.
    pub fn from_rows(r: Vec<Vec<f64>>) -> Result<Self> {
        let n = r.len();
        for (i, row) in r.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension(format!("row {} has {} entries, expected {n}", i + 1, row.len())));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!("accuracy {v} in row {} is outside [0, 1]", i + 1)));
            }
        }
        Ok(ResultsMatrix {
            n_tasks: n,
            r,
            traces: Vec::new(),
        })
    }

    /// `R_{i,j}` with 1-based indices.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i - 1][j - 1]
    }

    /// Accuracies after the last task.
    pub fn final_accuracies(&self) -> &[f64] {
        &self.r[self.n_tasks - 1]
    }
}

/// `B = 1/(N−2) Σ_{k ∉ {t, N}} (R_{N,k} − R_{k,k})`.
pub fn backward_transfer(r: &ResultsMatrix, t: usize, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::Parameter(format!("backward transfer needs N >= 3, got N = {n}")));
    }
    if n > r.n_tasks {
        return Err(Error::Parameter(format!("N = {n} exceeds the {}-task matrix", r.n_tasks)));
    }
    if t == 0 || t >= n {
        return Err(Error::Parameter(format!("target task {t} must satisfy 1 <= t < N = {n}")));
    }
    let sum: f64 = (1..n).filter(|&k| k != t).map(|k| r.get(n, k) - r.get(k, k)).sum();
    Ok(sum / (n - 2) as f64)
}

/// Seeds every random stream of a run was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub tasks: u64,
    pub subsample: u64,
    pub init: u64,
    /// Training seed for each task.
    pub train: Vec<u64>,
    pub noise: Option<u64>,
    pub attack: Option<u64>,
}

impl RunSeeds {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let m = cfg.seed;
        RunSeeds {
            master: m,
            tasks: derive_seed(m, "tasks", 0),
            subsample: derive_seed(m, "subsample", 0),
            init: derive_seed(m, "init", 0),
            train: (1..=cfg.n_tasks as u64).map(|k| derive_seed(m, "train", k)).collect(),
            noise: (cfg.variant == Variant::Noise).then(|| derive_seed(m, "noise", cfg.n_tasks as u64)),
            attack: (cfg.variant == Variant::Attack).then(|| derive_seed(m, "attack", cfg.target_task as u64)),
        }
    }
}

/// How the last task's training data was perturbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub kind: String,
    pub epsilon: f64,
    /// `max |x' − x|` over the emitted training set.
    pub max_perturbation: f64,
    pub attack_log: Option<AttackLog>,
}

/// Everything recorded about one run; `results.json` is a list of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub benchmark: Benchmark,
    pub method: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// Canonical config, path keys excluded.
    pub config: BTreeMap<String, String>,
    pub seeds: RunSeeds,
    pub results: ResultsMatrix,
    pub final_accuracy: Vec<f64>,
    /// Excludes the target task (task 1 for non-attack runs) and task N.
    pub backward_transfer: Option<f64>,
    /// Mean training loss per epoch, per task.
    pub epoch_loss: Vec<Vec<f64>>,
    pub poison: Option<PoisonSummary>,
}

/// Builds the benchmark's tasks, subsampling the training splits.
pub fn build_tasks(cfg: &ExperimentConfig, data: &Mnist) -> Result<Vec<TaskDataset>> {
    let seeds = RunSeeds::for_config(cfg);
    let mut tasks = match cfg.benchmark {
        Benchmark::Permuted => make_permuted_tasks(&data.train, &data.test, cfg.n_tasks, seeds.tasks)?,
        Benchmark::Split => {
            let mut all = make_split_tasks(&data.train, &data.test)?;
            all.truncate(cfg.n_tasks);
            all
        }
    };
    if let Some(n) = cfg.subsample {
        subsample_train(&mut tasks, n, seeds.subsample)?;
    }
    Ok(tasks)
}

/// Victim state after tasks `1..N−1`.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub classifier: Classifier,
    pub maps: Vec<ImportanceMap>,
    /// Rows `1..N−1` filled.
    pub results: ResultsMatrix,
    pub epoch_loss: Vec<Vec<f64>>,
    /// Classifier after each finished task.
    pub checkpoints: Vec<Classifier>,
}

fn test_sets(tasks: &[TaskDataset]) -> Vec<&LabeledImages> {
    tasks.iter().map(|t| &t.test).collect()
}

fn train_one(
    cfg: &ExperimentConfig,
    c: &mut Classifier,
    maps: &mut Vec<ImportanceMap>,
    results: &mut ResultsMatrix,
    task: &TaskDataset,
    tests: &[&LabeledImages],
) -> Result<Vec<f64>> {
    let k = task.task_id;
    let seed = RunSeeds::for_config(cfg).train[k - 1];
    let out = train_task(c, task, cfg.method, maps, &cfg.train, seed, tests)
        .map_err(|e| e.context(format!("training task {k}")))?;
    let row = match out.trace.last() {
        Some(last) => last.clone(),
        None => evaluate(c, tests)?,
    };
    results.r[k - 1] = row;
    results.traces.extend(out.trace.into_iter().enumerate().map(|(e, accuracy)| TraceRow {
        trained_task: k,
        epoch: e + 1,
        accuracy,
    }));
    maps.extend(out.new_map);
    Ok(out.epoch_loss)
}

/// Trains the victim on tasks `1..N−1` (nothing when `N = 1`).
pub fn train_prefix(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Prefix> {
    cfg.validate()?;
    check_task_count(cfg, tasks)?;
    let seeds = RunSeeds::for_config(cfg);
    let mut classifier = Classifier::new(MlpArch::mnist(), seeds.init);
    let mut maps = Vec::new();
    let mut results = ResultsMatrix::new(cfg.n_tasks);
    let mut epoch_loss = Vec::new();
    let mut checkpoints = Vec::new();
    let tests = test_sets(tasks);
    for task in &tasks[..cfg.n_tasks - 1] {
        epoch_loss.push(train_one(cfg, &mut classifier, &mut maps, &mut results, task, &tests)?);
        checkpoints.push(classifier.clone());
    }
    Ok(Prefix {
        classifier,
        maps,
        results,
        epoch_loss,
        checkpoints,
    })
}

fn check_task_count(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<()> {
    if tasks.len() != cfg.n_tasks {
        return Err(Error::Consistency(format!(
            "config has n_tasks = {} but {} tasks were built",
            cfg.n_tasks,
            tasks.len()
        )));
    }
    Ok(())
}

/// Outcome of a full run, with the artifacts that can be persisted.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub final_classifier: Classifier,
    pub attack_model: Option<AttackModel>,
    /// The substituted last task, for noise and attack runs.
    pub poisoned: Option<TaskDataset>,
}

/// Replaces task N's training data according to the variant.
pub fn poison_last_task(
    cfg: &ExperimentConfig,
    prefix: &Prefix,
    tasks: &[TaskDataset],
) -> Result<(Option<TaskDataset>, Option<AttackModel>, Option<PoisonSummary>)> {
    let seeds = RunSeeds::for_config(cfg);
    let last = &tasks[cfg.n_tasks - 1];
    let eps = cfg.attack.epsilon;
    match cfg.variant {
        Variant::Plain => Ok((None, None, None)),
        Variant::Noise => {
            let noisy = uniform_noise_baseline(last, eps, seeds.noise.expect("noise seed"))?;
            let train = quantize_poison(&last.train, &noisy.train, eps)?;
            let summary = PoisonSummary {
                kind: "noise".into(),
                epsilon: eps,
                max_perturbation: max_perturbation(&last.train, &train)?,
                attack_log: None,
            };
            Ok((Some(TaskDataset { train, ..noisy }), None, Some(summary)))
        }
        Variant::Attack => {
            let acfg = cfg.attack_config()?;
            let (model, log) = train_attack_model(
                &prefix.classifier,
                tasks,
                &prefix.maps,
                &acfg,
                seeds.attack.expect("attack seed"),
            )
            .map_err(|e| e.context(format!("training attack on task {}", cfg.target_task)))?;
            let poisoned = generate_poisoned_dataset(&model, last, cfg.target_task)?;
            let train = quantize_poison(&last.train, &poisoned.train, eps)?;
            let summary = PoisonSummary {
                kind: "attack".into(),
                epsilon: eps,
                max_perturbation: max_perturbation(&last.train, &train)?,
                attack_log: Some(log),
            };
            Ok((Some(TaskDataset { train, ..poisoned }), Some(model), Some(summary)))
        }
    }
}

/// Trains task N (poisoned according to the variant) on top of `prefix`.
pub fn finish_run(cfg: &ExperimentConfig, prefix: &Prefix, tasks: &[TaskDataset]) -> Result<RunOutput> {
    cfg.validate()?;
    check_task_count(cfg, tasks)?;
    let n = cfg.n_tasks;
    let (poisoned, attack_model, poison) = poison_last_task(cfg, prefix, tasks)?;
    let last = poisoned.as_ref().unwrap_or(&tasks[n - 1]);

    let mut classifier = prefix.classifier.clone();
    let mut maps = prefix.maps.clone();
    let mut results = prefix.results.clone();
    let mut epoch_loss = prefix.epoch_loss.clone();
    let tests = test_sets(tasks);
    epoch_loss.push(train_one(cfg, &mut classifier, &mut maps, &mut results, last, &tests)?);

    let t = if cfg.variant == Variant::Attack { cfg.target_task } else { 1 };
    let bt = if n >= 3 { Some(backward_transfer(&results, t, n)?) } else { None };
    let record = RunRecord {
        benchmark: cfg.benchmark,
        method: cfg.method.to_string(),
        variant: cfg.variant_label(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg
            .to_map()
            .into_iter()
            .filter(|(k, _)| *k != "data_dir" && *k != "out_dir")
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        seeds: RunSeeds::for_config(cfg),
        final_accuracy: results.final_accuracies().to_vec(),
        results,
        backward_transfer: bt,
        epoch_loss,
        poison,
    };
    Ok(RunOutput {
        record,
        final_classifier: classifier,
        attack_model,
        poisoned,
    })
}

/// Directory holding the checkpoints shared by every variant of a prefix.
pub fn group_dir(cfg: &ExperimentConfig) -> PathBuf {
    let key = crate::harness::short_hash(&cfg.prefix_key());
    cfg.out_dir
        .join("runs")
        .join(format!("{}-{}-seed{}-{}", cfg.benchmark, cfg.method, cfg.seed, key))
}

/// Directory holding one variant's artifacts.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    group_dir(cfg).join(cfg.variant_label())
}

pub fn prefix_checkpoint_path(cfg: &ExperimentConfig, task: usize) -> PathBuf {
    group_dir(cfg).join(format!("task_{task}.plck"))
}

pub fn final_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    run_dir(cfg).join(format!("task_{}.plck", cfg.n_tasks))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_prefix(cfg: &ExperimentConfig, prefix: &Prefix) -> Result<()> {
    create_dir(&group_dir(cfg))?;
    for (i, c) in prefix.checkpoints.iter().enumerate() {
        checkpoint::save_classifier(&prefix_checkpoint_path(cfg, i + 1), c)?;
    }
    Ok(())
}

/// Sidecar written next to an emitted poisoned dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoisonMeta {
    pub kind: String,
    pub benchmark: Benchmark,
    pub method: String,
    pub new_task: usize,
    pub target_task: Option<usize>,
    pub epsilon: f64,
    pub max_perturbation: f64,
    pub seeds: RunSeeds,
    pub config_hash: String,
}

pub const POISON_IMAGES: &str = "train-images-idx3-ubyte";
pub const POISON_LABELS: &str = "train-labels-idx1-ubyte";

/// Writes the poisoned training set as IDX files plus `poison_meta.json`.
pub fn save_poisoned(dir: &Path, cfg: &ExperimentConfig, data: &TaskDataset, summary: &PoisonSummary) -> Result<()> {
    create_dir(dir)?;
    data.train.save_idx(&dir.join(POISON_IMAGES), &dir.join(POISON_LABELS))?;
    let meta = PoisonMeta {
        kind: summary.kind.clone(),
        benchmark: cfg.benchmark,
        method: cfg.method.to_string(),
        new_task: cfg.n_tasks,
        target_task: (cfg.variant == Variant::Attack).then_some(cfg.target_task),
        epsilon: summary.epsilon,
        max_perturbation: summary.max_perturbation,
        seeds: RunSeeds::for_config(cfg),
        config_hash: cfg.hash(),
    };
    crate::harness::write_json(&dir.join("poison_meta.json"), &meta)
}

/// Writes the final checkpoint, the config, and any attack artifacts.
pub fn save_run(cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    let dir = run_dir(cfg);
    create_dir(&dir)?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.canonical()).map_err(|e| Error::io(&cfg_path, e))?;
    checkpoint::save_classifier(&final_checkpoint_path(cfg), &out.final_classifier)?;
    if let Some(model) = &out.attack_model {
        checkpoint::save_attack(&dir.join("attack.plck"), model)?;
    }
    if let (Some(data), Some(summary)) = (&out.poisoned, &out.record.poison) {
        save_poisoned(&dir.join("poisoned"), cfg, data, summary)?;
    }
    Ok(())
}

/// Runs one config end to end on already-loaded data.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Mnist) -> Result<RunOutput> {
    let ctx = |e: Error| e.context(format!("run {} {} {} seed {}", cfg.benchmark, cfg.method, cfg.variant_label(), cfg.seed));
    cfg.validate().map_err(ctx)?;
    let tasks = build_tasks(cfg, data).map_err(ctx)?;
    let prefix = train_prefix(cfg, &tasks).map_err(ctx)?;
    if cfg.save_checkpoints {
        save_prefix(cfg, &prefix).map_err(ctx)?;
    }
    let out = finish_run(cfg, &prefix, &tasks).map_err(ctx)?;
    if cfg.save_checkpoints {
        save_run(cfg, &out).map_err(ctx)?;
    }
    Ok(out)
}

/// Runs many configs, training each distinct prefix once. Records come back
/// in input order. When a run fails, the records finished so far are
/// returned alongside the error.
pub fn run_grid(
    cfgs: &[ExperimentConfig],
    data: &Mnist,
    mut progress: impl FnMut(&RunRecord),
) -> std::result::Result<Vec<RunRecord>, (Vec<RunRecord>, Error)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, c) in cfgs.iter().enumerate() {
        let key = c.prefix_key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    let mut done: Vec<Option<RunRecord>> = vec![None; cfgs.len()];
    let collect = |done: Vec<Option<RunRecord>>| done.into_iter().flatten().collect::<Vec<_>>();
    for (_, members) in &groups {
        let first = &cfgs[members[0]];
        let prepared = (|| -> Result<_> {
            first.validate()?;
            let tasks = build_tasks(first, data)?;
            let prefix = train_prefix(first, &tasks)?;
            if first.save_checkpoints {
                save_prefix(first, &prefix)?;
            }
            Ok((tasks, prefix))
        })();
        let (tasks, prefix) = match prepared {
            Ok(p) => p,
            Err(e) => {
                let e = e.context(format!("prefix {} {} seed {}", first.benchmark, first.method, first.seed));
                return Err((collect(done), e));
            }
        };
        for &i in members {
            let cfg = &cfgs[i];
            let result = finish_run(cfg, &prefix, &tasks).and_then(|out| {
                if cfg.save_checkpoints {
                    save_run(cfg, &out)?;
                }
                Ok(out.record)
            });
            match result {
                Ok(record) => {
                    progress(&record);
                    done[i] = Some(record);
                }
                Err(e) => {
                    let e = e.context(format!(
                        "run {} {} {} seed {}",
                        cfg.benchmark,
                        cfg.method,
                        cfg.variant_label(),
                        cfg.seed
                    ));
                    return Err((collect(done), e));
                }
            }
        }
    }
    Ok(collect(done))
}

/// Recomputes `R` from saved checkpoints on clean test splits.
pub fn evaluate_checkpoints(cfg: &ExperimentConfig, data: &Mnist) -> Result<ResultsMatrix> {
    cfg.validate()?;
    let tasks = build_tasks(cfg, data)?;
    let tests = test_sets(&tasks);
    let mut results = ResultsMatrix::new(cfg.n_tasks);
    for k in 1..=cfg.n_tasks {
        let path = if k == cfg.n_tasks {
            final_checkpoint_path(cfg)
        } else {
            prefix_checkpoint_path(cfg, k)
        };
        let c = checkpoint::load_classifier(&path)?;
        results.r[k - 1] = evaluate(&c, &tests)?;
    }
    Ok(results)
}

/// The grid behind the final-accuracy and backward-transfer tables, with
/// `base.n_tasks` tasks (at most 5 on split). Per seed and benchmark: SGD
/// plain; EWC and SI plain, noise, attack on task 1 and on task 2; and, on
/// the permuted benchmark only, the attack on task 1 without distillation.
pub fn reproduce_grid(base: &ExperimentConfig, seeds: &[u64]) -> Vec<ExperimentConfig> {
    use crate::learners::Method;
    let mut out = Vec::new();
    for &seed in seeds {
        for benchmark in [Benchmark::Permuted, Benchmark::Split] {
            for method in Method::ALL {
                let cell = |variant, target_task, use_kd| {
                    let mut c = base.clone();
                    c.benchmark = benchmark;
                    if benchmark == Benchmark::Split {
                        c.n_tasks = c.n_tasks.min(5);
                    }
                    c.method = method;
                    c.seed = seed;
                    c.variant = variant;
                    c.target_task = target_task;
                    c.attack.use_kd = use_kd;
                    c
                };
                out.push(cell(Variant::Plain, 1, true));
                let n = out.last().map_or(0, |c: &ExperimentConfig| c.n_tasks);
                if method == Method::Sgd || n < 2 {
                    continue;
                }
                out.push(cell(Variant::Noise, 1, true));
                out.push(cell(Variant::Attack, 1, true));
                if n > 2 {
                    out.push(cell(Variant::Attack, 2, true));
                }
                if benchmark == Benchmark::Permuted {
                    out.push(cell(Variant::Attack, 1, false));
                }
            }
        }
    }
    out
}
