//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`ExperimentConfig::canonical`] writes every key, sorted, one
//! per line; the run hash is the SHA-256 of that text without the two path
//! keys, so moving a run between directories keeps its identity.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::autodiff::UpdateOrder;
use crate::error::{Error, Result};
use crate::learners::{FisherMode, Method, TrainConfig};
use crate::models::AttackArch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Permuted,
    Split,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Permuted => "permuted",
            Benchmark::Split => "split",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuted" => Ok(Benchmark::Permuted),
            "split" => Ok(Benchmark::Split),
            other => Err(Error::Config(format!("unknown benchmark `{other}` (permuted|split)"))),
        }
    }
}

/// What the last task's training data is replaced with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Noise,
    Attack,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Noise => "noise",
            Variant::Attack => "attack",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "noise" => Ok(Variant::Noise),
            "attack" => Ok(Variant::Attack),
            other => Err(Error::Config(format!("unknown variant `{other}` (plain|noise|attack)"))),
        }
    }
}

/// Attack settings as they appear in a config file. The pseudo-update step
/// size is not listed: it always equals the victim learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub epsilon: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kd_weight: f64,
    pub temperature: f64,
    pub kd_subset: usize,
    pub kd_batch: usize,
    pub use_kd: bool,
    pub snapshot_stride: usize,
    pub trajectory_epochs: usize,
    pub first_order: bool,
    pub arch: AttackArch,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let d = AttackConfig::default();
        AttackSettings {
            epsilon: d.epsilon,
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            kd_weight: d.kd_weight,
            temperature: d.temperature,
            kd_subset: d.kd_subset,
            kd_batch: d.kd_batch,
            use_kd: d.use_kd,
            snapshot_stride: d.snapshot_stride,
            trajectory_epochs: d.trajectory_epochs,
            first_order: d.order == UpdateOrder::FirstOrder,
            arch: d.arch,
        }
    }
}

/// One cell of the experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub n_tasks: usize,
    pub method: Method,
    pub variant: Variant,
    /// Attacked past task (1-based); ignored unless `variant = attack`.
    pub target_task: usize,
    pub seed: u64,
    /// Training images kept per task; `None` keeps all.
    pub subsample: Option<usize>,
    pub train: TrainConfig,
    pub attack: AttackSettings,
    /// Write per-task classifier checkpoints and attack artifacts.
    pub save_checkpoints: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Training images per task used by `reproduce` unless configured otherwise.
pub const REPRODUCE_SUBSAMPLE: usize = 10_000;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: Benchmark::Permuted,
            n_tasks: 5,
            method: Method::Ewc,
            variant: Variant::Plain,
            target_task: 1,
            seed: 0,
            subsample: None,
            train: TrainConfig::default(),
            attack: AttackSettings::default(),
            save_checkpoints: true,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("results"),
        }
    }
}

const PATH_KEYS: [&str; 2] = ["data_dir", "out_dir"];

fn arch_to_text(arch: &AttackArch) -> String {
    if *arch == AttackArch::full() {
        return "full".into();
    }
    if *arch == AttackArch::desk() {
        return "desk".into();
    }
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    match arch {
        AttackArch::Conv { encoder, decoder } => format!("conv:{}/{}", join(encoder), join(decoder)),
        AttackArch::Dense { pixels, hidden } => format!("dense:{pixels},{hidden}"),
    }
}

fn arch_from_text(s: &str) -> Result<AttackArch> {
    let bad = || Error::Config(format!("bad attack_arch `{s}` (full|desk|conv:a,b,c/d,e|dense:p,h)"));
    let nums = |t: &str| -> Result<Vec<usize>> {
        t.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
    };
    match s {
        "full" => Ok(AttackArch::full()),
        "desk" => Ok(AttackArch::desk()),
        _ => {
            if let Some(rest) = s.strip_prefix("conv:") {
                let (e, d) = rest.split_once('/').ok_or_else(bad)?;
                let (e, d) = (nums(e)?, nums(d)?);
                Ok(AttackArch::Conv {
                    encoder: e.try_into().map_err(|_| bad())?,
                    decoder: d.try_into().map_err(|_| bad())?,
                })
            } else if let Some(rest) = s.strip_prefix("dense:") {
                match nums(rest)?[..] {
                    [pixels, hidden] => Ok(AttackArch::Dense { pixels, hidden }),
                    _ => Err(bad()),
                }
            } else {
                Err(bad())
            }
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn fisher_text(m: FisherMode) -> &'static str {
    match m {
        FisherMode::Empirical => "empirical",
        FisherMode::Sampled => "sampled",
    }
}

impl ExperimentConfig {
    /// Every key with its current value, as text.
    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let a = &self.attack;
        let t = &self.train;
        BTreeMap::from([
            ("benchmark", self.benchmark.to_string()),
            ("n_tasks", self.n_tasks.to_string()),
            ("method", self.method.to_string()),
            ("variant", self.variant.to_string()),
            ("target_task", self.target_task.to_string()),
            ("seed", self.seed.to_string()),
            ("subsample", self.subsample.unwrap_or(0).to_string()),
            ("lr", t.lr.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("ewc_lambda", t.ewc_lambda.to_string()),
            ("si_c", t.si_c.to_string()),
            ("si_damping", t.si_damping.to_string()),
            ("fisher_samples", t.fisher_samples.to_string()),
            ("fisher_mode", fisher_text(t.fisher_mode).to_string()),
            ("attack_epsilon", a.epsilon.to_string()),
            ("attack_epochs", a.epochs.to_string()),
            ("attack_lr", a.lr.to_string()),
            ("attack_batch_size", a.batch_size.to_string()),
            ("kd_weight", a.kd_weight.to_string()),
            ("kd_temperature", a.temperature.to_string()),
            ("kd_subset", a.kd_subset.to_string()),
            ("kd_batch", a.kd_batch.to_string()),
            ("use_kd", a.use_kd.to_string()),
            ("snapshot_stride", a.snapshot_stride.to_string()),
            ("trajectory_epochs", a.trajectory_epochs.to_string()),
            ("first_order", a.first_order.to_string()),
            ("attack_arch", arch_to_text(&a.arch)),
            ("save_checkpoints", self.save_checkpoints.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ])
    }

    /// Sets one key; unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.attack;
        let t = &mut self.train;
        match key {
            "benchmark" => self.benchmark = v.parse()?,
            "n_tasks" => self.n_tasks = parse(key, v)?,
            "method" => self.method = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "target_task" => self.target_task = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "subsample" => {
                let n: usize = parse(key, v)?;
                self.subsample = (n > 0).then_some(n);
            }
            "lr" => t.lr = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "ewc_lambda" => t.ewc_lambda = parse(key, v)?,
            "si_c" => t.si_c = parse(key, v)?,
            "si_damping" => t.si_damping = parse(key, v)?,
            "fisher_samples" => t.fisher_samples = parse(key, v)?,
            "fisher_mode" => t.fisher_mode = v.parse()?,
            "attack_epsilon" => a.epsilon = parse(key, v)?,
            "attack_epochs" => a.epochs = parse(key, v)?,
            "attack_lr" => a.lr = parse(key, v)?,
            "attack_batch_size" => a.batch_size = parse(key, v)?,
            "kd_weight" => a.kd_weight = parse(key, v)?,
            "kd_temperature" => a.temperature = parse(key, v)?,
            "kd_subset" => a.kd_subset = parse(key, v)?,
            "kd_batch" => a.kd_batch = parse(key, v)?,
            "use_kd" => a.use_kd = parse(key, v)?,
            "snapshot_stride" => a.snapshot_stride = parse(key, v)?,
            "trajectory_epochs" => a.trajectory_epochs = parse(key, v)?,
            "first_order" => a.first_order = parse(key, v)?,
            "attack_arch" => a.arch = arch_from_text(v)?,
            "save_checkpoints" => self.save_checkpoints = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| e.context(format!("config line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// [`apply_text`](Self::apply_text) with the contents of `path`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Sorted `key=value` lines covering every key.
    pub fn canonical(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Canonical text without the path keys.
    pub fn canonical_without_paths(&self) -> String {
        self.to_map()
            .iter()
            .filter(|(k, _)| !PATH_KEYS.contains(k))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`canonical_without_paths`](Self::canonical_without_paths).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_without_paths().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 {
            return bad("n_tasks must be >= 1".into());
        }
        if self.benchmark == Benchmark::Split && self.n_tasks > 5 {
            return bad(format!("split benchmark has 5 tasks, n_tasks = {}", self.n_tasks));
        }
        if self.variant == Variant::Attack && !(1..self.n_tasks).contains(&self.target_task) {
            return bad(format!(
                "attack needs 1 <= target_task < n_tasks, got target_task = {} with n_tasks = {}",
                self.target_task, self.n_tasks
            ));
        }
        if self.variant != Variant::Plain && self.n_tasks < 2 {
            return bad(format!("variant {} needs at least 2 tasks", self.variant));
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.train.lr));
        }
        if self.variant == Variant::Noise && !(self.attack.epsilon >= 0.0) {
            return bad(format!("attack_epsilon must be >= 0, got {}", self.attack.epsilon));
        }
        if self.variant == Variant::Attack {
            self.attack_config()?.validate()?;
        }
        Ok(())
    }

    /// The attack configuration this run uses.
    pub fn attack_config(&self) -> Result<AttackConfig> {
        let a = &self.attack;
        Ok(AttackConfig {
            target_task: self.target_task,
            new_task: self.n_tasks,
            epsilon: a.epsilon,
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            inner_lr: self.train.lr,
            trajectory_batch_size: self.train.batch_size,
            kd_weight: a.kd_weight,
            temperature: a.temperature,
            kd_subset: a.kd_subset,
            kd_batch: a.kd_batch,
            use_kd: a.use_kd,
            snapshot_stride: a.snapshot_stride,
            trajectory_epochs: a.trajectory_epochs,
            order: if a.first_order {
                UpdateOrder::FirstOrder
            } else {
                UpdateOrder::SecondOrder
            },
            arch: a.arch.clone(),
        })
    }

    /// Short run label: `plain`, `noise`, `attack_t2`, `attack_t1_nokd`, ...
    pub fn variant_label(&self) -> String {
        match self.variant {
            Variant::Attack => {
                let mut s = format!("attack_t{}", self.target_task);
                if !self.attack.use_kd {
                    s.push_str("_nokd");
                }
                if self.attack.first_order {
                    s.push_str("_fo");
                }
                s
            }
            v => v.to_string(),
        }
    }

    /// Everything that fixes the victim's run over tasks `1..N−1`.
    /// Runs sharing this key can share that prefix.
    pub fn prefix_key(&self) -> String {
        let mut probe = self.clone();
        probe.variant = Variant::Plain;
        probe.target_task = 1;
        probe.attack = AttackSettings::default();
        probe.save_checkpoints = true;
        probe.canonical_without_paths()
    }
}
