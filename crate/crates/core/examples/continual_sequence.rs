//! Trains SGD, EWC and SI on a short permuted-MNIST sequence and prints the
//! accuracy matrix and backward transfer of each.
//!
//! cargo run --release --example continual_sequence -- [mnist-dir]

use std::path::PathBuf;

use poisonlab::data::{make_permuted_tasks, subsample_train, Mnist};
use poisonlab::harness::{backward_transfer, ResultsMatrix};
use poisonlab::learners::{train_task, Method, TrainConfig};
use poisonlab::models::{Classifier, MlpArch};
use poisonlab::Result;

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    let mnist = Mnist::load(&dir)?;
    let n = 3;
    let mut tasks = make_permuted_tasks(&mnist.train, &mnist.test, n, 1)?;
    subsample_train(&mut tasks, 5_000, 1)?;
    let tests: Vec<_> = tasks.iter().map(|t| &t.test).collect();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };

    for method in Method::ALL {
        let mut c = Classifier::new(MlpArch::mnist(), 1);
        let mut maps = Vec::new();
        let mut r = ResultsMatrix::new(n);
        for (k, task) in tasks.iter().enumerate() {
            let out = train_task(&mut c, task, method, &maps, &cfg, k as u64, &tests)?;
            r.r[k] = out.trace.last().cloned().unwrap_or_default();
            maps.extend(out.new_map);
        }
        println!("{method}:");
        for row in &r.r {
            println!("  {}", row.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" "));
        }
        println!("  backward transfer (t = 1): {:+.4}", backward_transfer(&r, 1, n)?);
    }
    Ok(())
}
