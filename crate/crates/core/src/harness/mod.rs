//! Experiment orchestration: configs, seeded end-to-end runs, metrics and
//! report files.

mod config;
mod report;
mod run;

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use config::{AttackSettings, Benchmark, ExperimentConfig, Variant, REPRODUCE_SUBSAMPLE};
pub use report::{
    backward_transfer_csv, curves_csv, curves_svg, emit_reports, final_accuracy_by_seed_csv, final_accuracy_csv,
    regenerate_reports, write_run_meta, ResultsFile, RunMeta, SCHEMA_VERSION,
};
pub use run::{
    backward_transfer, build_tasks, evaluate_checkpoints, final_checkpoint_path, finish_run, group_dir,
    poison_last_task, prefix_checkpoint_path, reproduce_grid, run_dir, run_experiment, run_grid, save_poisoned,
    save_prefix, save_run, train_prefix, PoisonMeta, PoisonSummary, Prefix, ResultsMatrix, RunOutput, RunRecord,
    RunSeeds, TraceRow, POISON_IMAGES, POISON_LABELS,
};

/// First 12 hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
