use super::ImportanceMap;
use crate::error::Result;
use crate::params::ParamVector;

/// Running path integral `ω = Σ −g ⊙ Δθ` over one task.
#[derive(Clone, Debug)]
pub struct SiAccumulator {
    pub omega: Vec<f64>,
    pub start: ParamVector,
    pub damping: f64,
}

impl SiAccumulator {
    /// Starts a task at `start` with `ω = 0`.
    pub fn new(start: ParamVector, damping: f64) -> Self {
        SiAccumulator {
            omega: vec![0.0; start.len()],
            start,
            damping,
        }
    }

    /// Adds one optimizer step: `grad` is the task-loss gradient at the
    /// pre-step parameters and `delta` the step actually taken.
    pub fn accumulate(&mut self, grad: &[f64], delta: &[f64]) {
        for ((w, g), d) in self.omega.iter_mut().zip(grad).zip(delta) {
            *w -= g * d;
        }
    }

    /// `Ω = ω / ((θ_end − θ_start)² + δ)`, anchored at `θ_end`.
    ///
    /// Negative path integrals (possible under minibatch noise) are clamped
    /// to zero importance.
    pub fn consolidate(&self, end: &ParamVector, strength: f64) -> Result<ImportanceMap> {
        self.start.check_layout(end)?;
        let mut weights = ParamVector::zeros(end.layout().clone());
        for (((o, w), s), e) in weights
            .values_mut()
            .iter_mut()
            .zip(&self.omega)
            .zip(self.start.values())
            .zip(end.values())
        {
            let moved = e - s;
            *o = (w / (moved * moved + self.damping)).max(0.0);
        }
        ImportanceMap::new(weights, end.clone(), strength)
    }
}
