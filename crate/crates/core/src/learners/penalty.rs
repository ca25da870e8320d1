use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Quadratic anchor penalty `strength/2 · Σ weights ⊙ (θ − anchor)²`
/// contributed by one consolidated task.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub weights: ParamVector,
    pub anchor: ParamVector,
    pub strength: f64,
}

impl ImportanceMap {
    pub fn new(weights: ParamVector, anchor: ParamVector, strength: f64) -> Result<Self> {
        weights.check_layout(&anchor)?;
        if let Some(i) = weights.values().iter().position(|w| !(*w >= 0.0)) {
            return Err(Error::Consistency(format!(
                "importance weight {i} is {} (must be >= 0)",
                weights.values()[i]
            )));
        }
        if !(strength >= 0.0) {
            return Err(Error::Parameter(format!("penalty strength must be >= 0, got {strength}")));
        }
        Ok(ImportanceMap {
            weights,
            anchor,
            strength,
        })
    }
}

fn check(maps: &[ImportanceMap], theta: &ParamVector) -> Result<()> {
    maps.iter().try_for_each(|m| m.anchor.check_layout(theta))
}

/// Value of the summed penalty at `theta`.
pub fn penalty_value(maps: &[ImportanceMap], theta: &ParamVector) -> Result<f64> {
    check(maps, theta)?;
    Ok(maps
        .iter()
        .map(|m| {
            let s: f64 = m
                .weights
                .values()
                .iter()
                .zip(m.anchor.values())
                .zip(theta.values())
                .map(|((w, a), t)| w * (t - a) * (t - a))
                .sum();
            0.5 * m.strength * s
        })
        .sum())
}

/// Adds `Σ strength · weights ⊙ (θ − anchor)` into `grad`.
pub fn add_penalty_grad(maps: &[ImportanceMap], theta: &ParamVector, grad: &mut [f64]) -> Result<()> {
    check(maps, theta)?;
    for m in maps {
        if m.strength == 0.0 {
            continue;
        }
        for (((g, w), a), t) in grad
            .iter_mut()
            .zip(m.weights.values())
            .zip(m.anchor.values())
            .zip(theta.values())
        {
            *g += m.strength * w * (t - a);
        }
    }
    Ok(())
}

/// The summed penalty's gradient is `curvature ⊙ θ − pull`, with
/// `curvature = Σ strength · weights` and `pull = Σ strength · weights ⊙ anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyCoefficients {
    pub curvature: Vec<f64>,
    pub pull: Vec<f64>,
}

/// `None` when no map has a nonzero strength.
pub fn penalty_coefficients(maps: &[ImportanceMap], theta: &ParamVector) -> Result<Option<PenaltyCoefficients>> {
    check(maps, theta)?;
    let active: Vec<&ImportanceMap> = maps.iter().filter(|m| m.strength != 0.0).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let mut curvature = vec![0.0; theta.len()];
    let mut pull = vec![0.0; theta.len()];
    for m in active {
        for (((k, p), w), a) in curvature
            .iter_mut()
            .zip(pull.iter_mut())
            .zip(m.weights.values())
            .zip(m.anchor.values())
        {
            *k += m.strength * w;
            *p += m.strength * w * a;
        }
    }
    Ok(Some(PenaltyCoefficients { curvature, pull }))
}

impl PenaltyCoefficients {
    /// Proximal map of the penalty with step `lr`:
    /// `argmin_u ‖u − v‖² / (2 lr) + Ω(u) = (v + lr·pull) / (1 + lr·curvature)`.
    pub fn prox(&self, v: &mut [f64], lr: f64) {
        for ((x, k), p) in v.iter_mut().zip(&self.curvature).zip(&self.pull) {
            *x = (*x + lr * p) / (1.0 + lr * k);
        }
    }
}

/// Differentiable penalty over parameter leaves laid out like the anchors.
pub fn penalty(tape: &mut Tape, maps: &[ImportanceMap], theta: &[Var]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for m in maps {
        let anchors = m.anchor.to_tensors();
        let weights = m.weights.to_tensors();
        if anchors.len() != theta.len() {
            return Err(Error::Consistency(format!(
                "penalty: {} anchor segments for {} parameter tensors",
                anchors.len(),
                theta.len()
            )));
        }
        for ((&t, a), w) in theta.iter().zip(anchors).zip(weights) {
            if tape.shape(t) != a.shape() {
                return Err(Error::Consistency(format!(
                    "penalty: parameter shape {:?} vs anchor {:?}",
                    tape.shape(t),
                    a.shape()
                )));
            }
            let a = tape.constant(a);
            let w = tape.constant(w);
            let d = tape.sub(t, a)?;
            let sq = tape.mul(d, d)?;
            let wsq = tape.mul(w, sq)?;
            let s = tape.sum(wsq);
            let s = tape.scale(s, 0.5 * m.strength);
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}
