//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Gradients can be recorded back onto the tape ([`GradMode::CreateGraph`]),
//! so a parameter update `θ' = θ − α ∇θ L(θ, ξ)` stays a differentiable
//! function of `ξ`. [`grad_through_update`] packages that pattern.

mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvGeom;
pub use tape::{GradMode, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// How the inner gradient of a pseudo-update is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Differentiate through the inner gradient (double backward).
    #[default]
    SecondOrder,
    /// Treat the inner gradient as a constant with respect to `ξ`.
    FirstOrder,
}

/// Records `θ' = θ − lr · ∇θ inner(θ, ξ)` on `tape`.
///
/// `theta` and `xi` must already be on the tape; the returned variables hold
/// `θ'`, which depends on `ξ` through the recorded inner gradient unless
/// `order` is [`UpdateOrder::FirstOrder`].
pub fn pseudo_update<I>(
    tape: &mut Tape,
    theta: &[Var],
    xi: &[Var],
    inner: I,
    lr: f64,
    order: UpdateOrder,
) -> Result<Vec<Var>>
where
    I: FnOnce(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!(
            "pseudo-update step size must be finite and non-negative, got {lr}"
        )));
    }
    let inner_loss = inner(tape, theta, xi)?;
    let mode = match order {
        UpdateOrder::SecondOrder => GradMode::CreateGraph,
        UpdateOrder::FirstOrder => GradMode::FirstOrder,
    };
    let grads = tape.grad(inner_loss, theta, mode)?;
    theta
        .iter()
        .zip(grads)
        .map(|(&t, g)| {
            let step = tape.scale(g, lr);
            tape.sub(t, step)
        })
        .collect()
}

/// Gradient of `outer(θ')` with respect to `ξ`, where
/// `θ' = θ − lr · ∇θ inner(θ, ξ)`.
///
/// `θ` is held constant. Returns the outer loss value and one gradient
/// tensor per entry of `xi`.
pub fn grad_through_update<I, O>(
    theta: &[Tensor],
    xi: &[Tensor],
    inner: I,
    outer: O,
    lr: f64,
    order: UpdateOrder,
) -> Result<(f64, Vec<Tensor>)>
where
    I: FnOnce(&mut Tape, &[Var], &[Var]) -> Result<Var>,
    O: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let theta_vars: Vec<Var> = theta.iter().map(|t| tape.variable(t.clone())).collect();
    let xi_vars: Vec<Var> = xi.iter().map(|t| tape.variable(t.clone())).collect();
    let updated = pseudo_update(&mut tape, &theta_vars, &xi_vars, inner, lr, order)?;
    let loss = outer(&mut tape, &updated)?;
    let value = tape.item(loss).map_err(|_| {
        Error::Usage(format!(
            "outer loss must be scalar, got shape {:?}",
            tape.shape(loss)
        ))
    })?;
    let grads = tape.backward(loss, &xi_vars)?;
    Ok((value, grads))
}
