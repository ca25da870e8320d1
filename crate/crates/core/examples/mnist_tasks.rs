//! Loads MNIST and builds the permuted and split benchmarks.
//!
//! cargo run --release --example mnist_tasks -- [mnist-dir]

use std::path::PathBuf;

use poisonlab::data::{invert_permutation, make_permuted_tasks, make_split_tasks, permute_pixels, subsample_train, Mnist};
use poisonlab::Result;

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    let mnist = Mnist::load(&dir)?;
    println!("train {} images, test {} images", mnist.train.len(), mnist.test.len());

    let mut permuted = make_permuted_tasks(&mnist.train, &mnist.test, 5, 7)?;
    subsample_train(&mut permuted, 10_000, 7)?;
    for t in &permuted {
        println!(
            "permuted task {}: {} train / {} test, permuted: {}",
            t.task_id,
            t.train.len(),
            t.test.len(),
            t.permutation.is_some()
        );
    }
    let t3 = &permuted[2];
    let restored = permute_pixels(&t3.test, &invert_permutation(t3.permutation.as_ref().expect("task 3 is permuted")));
    println!("inverse permutation restores task 3: {}", restored == mnist.test);

    for t in make_split_tasks(&mnist.train, &mnist.test)? {
        let mut counts = [0usize; 10];
        for &l in t.train.labels() {
            counts[l] += 1;
        }
        let present: Vec<String> = (0..10).filter(|&d| counts[d] > 0).map(|d| format!("{d}:{}", counts[d])).collect();
        println!("split task {}: {}", t.task_id, present.join(" "));
    }
    Ok(())
}
