//! Runs a small configured experiment end to end, writes the report files,
//! and reloads the saved checkpoints.
//!
//! cargo run --release --example experiment_reports -- [mnist-dir] [out-dir]

use std::path::PathBuf;

use poisonlab::data::Mnist;
use poisonlab::harness::{emit_reports, evaluate_checkpoints, run_experiment, ExperimentConfig};
use poisonlab::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let data_dir = args.next().map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    let out_dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("poisonlab-example"));

    let mut cfg = ExperimentConfig::from_text(
        "benchmark = split\n\
         n_tasks = 3\n\
         method = si\n\
         variant = noise\n\
         subsample = 2000\n\
         epochs = 2\n",
    )?;
    cfg.data_dir = data_dir;
    cfg.out_dir = out_dir.clone();
    println!("config hash {}", cfg.hash());

    let mnist = Mnist::load(&cfg.data_dir)?;
    let out = run_experiment(&cfg, &mnist)?;
    emit_reports(std::slice::from_ref(&out.record), &out_dir)?;
    println!("final accuracies {:?}", out.record.final_accuracy);
    println!("backward transfer {:?}", out.record.backward_transfer);

    let again = evaluate_checkpoints(&cfg, &mnist)?;
    println!("re-evaluated from checkpoints: {:?}", again.final_accuracies());
    println!("reports in {}", out_dir.display());
    Ok(())
}
