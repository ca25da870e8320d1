//! Checks reverse-mode gradients, including the gradient through a
//! differentiable SGD step, against central finite differences.
//!
//! cargo run --release --example gradcheck

use poisonlab::autodiff::{grad_through_update, Tape, Tensor, UpdateOrder, Var};
use poisonlab::Result;

fn tensor(shape: &[usize], seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin())
        .collect();
    Tensor::new(shape.to_vec(), data)
}

// inner: CE of a linear classifier on inputs shifted by ξ
fn inner<'a>(x: &'a Tensor, y: &'a [usize]) -> impl FnOnce(&mut Tape, &[Var], &[Var]) -> Result<Var> + 'a {
    move |tape, theta, xi| {
        let x = tape.constant(x.clone());
        let shifted = tape.add(x, xi[0])?;
        let h = tape.matmul(shifted, theta[0])?;
        tape.cross_entropy(h, y)
    }
}

fn outer<'a>(x: &'a Tensor, y: &'a [usize]) -> impl FnOnce(&mut Tape, &[Var]) -> Result<Var> + 'a {
    move |tape, theta| {
        let x = tape.constant(x.clone());
        let h = tape.matmul(x, theta[0])?;
        tape.cross_entropy(h, y)
    }
}

fn main() -> Result<()> {
    let theta = tensor(&[4, 3], 1)?;
    let xi = tensor(&[5, 4], 2)?;
    let (x_in, y_in) = (tensor(&[5, 4], 3)?, [0, 1, 2, 1, 0]);
    let (x_out, y_out) = (tensor(&[6, 4], 4)?, [2, 2, 0, 1, 0, 1]);
    let lr = 0.5;

    let run = |xi: &Tensor, order| {
        grad_through_update(
            std::slice::from_ref(&theta),
            std::slice::from_ref(xi),
            inner(&x_in, &y_in),
            outer(&x_out, &y_out),
            lr,
            order,
        )
    };
    let (value, grads) = run(&xi, UpdateOrder::SecondOrder)?;
    println!("outer loss after the step: {value:.6}");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..xi.len() {
        let mut up = xi.clone();
        up.data_mut()[i] += h;
        let mut down = xi.clone();
        down.data_mut()[i] -= h;
        let fd = (run(&up, UpdateOrder::SecondOrder)?.0 - run(&down, UpdateOrder::SecondOrder)?.0) / (2.0 * h);
        let g = grads[0].data()[i];
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8));
    }
    println!("largest relative error over {} entries of ξ: {worst:.2e}", xi.len());

    let (_, first) = run(&xi, UpdateOrder::FirstOrder)?;
    println!("first-order gradient norm: {}", first[0].data().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
