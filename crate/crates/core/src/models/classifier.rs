use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector};
use crate::rng::rng_from;

/// Fully connected ReLU network; `sizes = [inputs, hidden.., classes]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
}

impl MlpArch {
    /// 784-256-256-10, shared 10-way head.
    pub fn mnist() -> Self {
        MlpArch {
            sizes: vec![784, 256, 256, 10],
        }
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.sizes.windows(2).enumerate().flat_map(|(i, w)| {
            [
                (format!("fc{i}.weight"), vec![w[0], w[1]]),
                (format!("fc{i}.bias"), vec![w[1]]),
            ]
        }))
    }

    /// Logits `[B, classes]` for `x: [B, ...]` using parameter leaves
    /// `params` laid out as [`layout`](Self::layout).
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let batch = *shape.first().ok_or_else(|| Error::Dimension("empty input shape".into()))?;
        let features: usize = shape[1..].iter().product();
        if features != self.inputs() {
            return Err(Error::Dimension(format!(
                "classifier expects {} input features, got shape {:?}",
                self.inputs(),
                shape
            )));
        }
        let mut h = tape.reshape(x, &[batch, features])?;
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// The victim classifier `f_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: MlpArch,
    params: ParamVector,
}

impl Classifier {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(arch: MlpArch, seed: u64) -> Self {
        let layout = Arc::new(arch.layout());
        let mut params = ParamVector::zeros(layout.clone());
        let mut rng = rng_from(seed);
        for (i, seg) in layout.segments().iter().enumerate() {
            if seg.shape.len() == 2 {
                let bound = (6.0 / seg.shape[0] as f64).sqrt();
                for v in params.segment_mut(i) {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        Classifier { arch, params }
    }

    pub fn from_params(arch: MlpArch, params: ParamVector) -> Result<Self> {
        if params.layout().as_ref() != &arch.layout() {
            return Err(Error::Consistency(
                "parameter layout does not match the classifier architecture".into(),
            ));
        }
        Ok(Classifier { arch, params })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    /// Sets the last layer's weights and bias to zero (uniform predictions).
    pub fn zero_output_layer(&mut self) {
        let n = self.params.layout().segments().len();
        for i in [n - 2, n - 1] {
            self.params.segment_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Differentiable forward with the parameters already on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.arch.forward(tape, params, x)
    }

    /// Logits for `x` with the stored parameters, outside any caller graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.to_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.detach(out))
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &LabeledImages) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(2000) {
            let (x, y) = data.batch(chunk);
            let logits = self.logits(&x)?;
            correct += logits
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
        }
        Ok(correct as f64 / data.len() as f64)
    }
}
