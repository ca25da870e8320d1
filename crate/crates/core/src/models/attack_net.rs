use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector};
use crate::rng::rng_from;

/// Architecture of the noise generator `AE_ξ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackArch {
    /// Convolutional encoder-decoder on `[B, 1, H, W]` images (H, W even):
    ///
    /// * `enc1` 3×3 conv, stride 1, pad 1, `1 → encoder[0]`, ReLU
    /// * `enc2` 3×3 conv, stride 2, pad 1, `→ encoder[1]` (H/2), ReLU
    /// * `enc3` 3×3 conv, stride 1, pad 1, `→ encoder[2]`, ReLU
    /// * `dec1` 5×5 conv, stride 1, pad 2, `→ decoder[0]`, ReLU
    /// * `dec2` 2×2 transposed conv, stride 2, `→ decoder[1]` (H), ReLU
    /// * `out`  1×1 conv to one channel
    Conv { encoder: [usize; 3], decoder: [usize; 2] },
    /// Flattened image → tanh hidden layer → image, with one shared output bias.
    Dense { pixels: usize, hidden: usize },
}

impl AttackArch {
    /// Channel widths 16/64/128 and 128/64.
    pub fn full() -> Self {
        AttackArch::Conv {
            encoder: [16, 64, 128],
            decoder: [128, 64],
        }
    }

    /// Same layer structure with narrow channels, for single-core runs.
    pub fn desk() -> Self {
        AttackArch::Conv {
            encoder: [4, 8, 16],
            decoder: [16, 8],
        }
    }

    pub fn layout(&self) -> Layout {
        match *self {
            AttackArch::Conv { encoder: e, decoder: d } => Layout::new([
                ("enc1.weight", vec![e[0], 1, 3, 3]),
                ("enc1.bias", vec![e[0]]),
                ("enc2.weight", vec![e[1], e[0], 3, 3]),
                ("enc2.bias", vec![e[1]]),
                ("enc3.weight", vec![e[2], e[1], 3, 3]),
                ("enc3.bias", vec![e[2]]),
                ("dec1.weight", vec![d[0], e[2], 5, 5]),
                ("dec1.bias", vec![d[0]]),
                // transposed: maps d[0] channels to d[1]
                ("dec2.weight", vec![d[0], d[1], 2, 2]),
                ("dec2.bias", vec![d[1]]),
                ("out.weight", vec![1, d[1], 1, 1]),
                ("out.bias", vec![1]),
            ]),
            AttackArch::Dense { pixels, hidden } => Layout::new([
                ("enc.weight", vec![pixels, hidden]),
                ("enc.bias", vec![hidden]),
                ("dec.weight", vec![hidden, pixels]),
                ("dec.bias", vec![1]),
            ]),
        }
    }

    fn fan_in(&self, segment: &str, shape: &[usize]) -> usize {
        match (self, segment) {
            (AttackArch::Conv { .. }, "dec2.weight") => shape[0] * shape[2] * shape[3],
            (AttackArch::Conv { .. }, _) => shape[1..].iter().product(),
            (AttackArch::Dense { .. }, _) => shape[0],
        }
    }

    /// Pre-bound output `[B, 1, H, W]` for `x: [B, 1, H, W]`.
    pub fn raw_forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Dimension(format!(
                "attack model expects [B, 1, H, W] images, got {shape:?}"
            )));
        }
        match *self {
            AttackArch::Conv { .. } => {
                let (h, w) = (shape[2], shape[3]);
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Dimension(format!(
                        "conv attack model needs even image sides, got {h}x{w}"
                    )));
                }
                let same3 = ConvGeom { stride: 1, pad: 1 };
                let mut z = tape.conv2d(x, p[0], same3)?;
                z = tape.add_bias(z, p[1])?;
                z = tape.relu(z);
                z = tape.conv2d(z, p[2], ConvGeom { stride: 2, pad: 1 })?;
                z = tape.add_bias(z, p[3])?;
                z = tape.relu(z);
                z = tape.conv2d(z, p[4], same3)?;
                z = tape.add_bias(z, p[5])?;
                z = tape.relu(z);
                z = tape.conv2d(z, p[6], ConvGeom { stride: 1, pad: 2 })?;
                z = tape.add_bias(z, p[7])?;
                z = tape.relu(z);
                z = tape.conv_transpose2d(z, p[8], ConvGeom { stride: 2, pad: 0 }, (h, w))?;
                z = tape.add_bias(z, p[9])?;
                z = tape.relu(z);
                z = tape.conv2d(z, p[10], ConvGeom { stride: 1, pad: 0 })?;
                tape.add_bias(z, p[11])
            }
            AttackArch::Dense { pixels, .. } => {
                let b = shape[0];
                if shape[2] * shape[3] != pixels {
                    return Err(Error::Dimension(format!(
                        "dense attack model expects {pixels} pixels, got {shape:?}"
                    )));
                }
                let flat = tape.reshape(x, &[b, pixels])?;
                let mut z = tape.matmul(flat, p[0])?;
                z = tape.add_bias(z, p[1])?;
                z = tape.tanh(z);
                z = tape.matmul(z, p[2])?;
                let z = tape.reshape(z, &[b, 1, shape[2], shape[3]])?;
                tape.add_bias(z, p[3])
            }
        }
    }
}

/// The noise generator `AE_ξ`, bounded by `ε · tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    arch: AttackArch,
    epsilon: f64,
    params: ParamVector,
}

impl AttackModel {
    /// Kaiming-uniform weights, zero biases.
    pub fn new(arch: AttackArch, epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be > 0, got {epsilon}")));
        }
        let layout = Arc::new(arch.layout());
        let mut params = ParamVector::zeros(layout.clone());
        let mut rng = rng_from(seed);
        for (i, seg) in layout.segments().iter().enumerate() {
            if seg.shape.len() >= 2 {
                let bound = (6.0 / arch.fan_in(&seg.name, &seg.shape) as f64).sqrt();
                for v in params.segment_mut(i) {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(AttackModel {
            arch,
            epsilon,
            params,
        })
    }

    pub fn from_params(arch: AttackArch, epsilon: f64, params: ParamVector) -> Result<Self> {
        if params.layout().as_ref() != &arch.layout() {
            return Err(Error::Consistency(
                "parameter layout does not match the attack architecture".into(),
            ));
        }
        Ok(AttackModel {
            arch,
            epsilon,
            params,
        })
    }

    pub fn arch(&self) -> &AttackArch {
        &self.arch
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Zeroes the output layer, making the generated noise identically zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.layout().segments().len();
        for i in [n - 2, n - 1] {
            self.params.segment_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Differentiable noise `ε · tanh(raw(x))`, strictly inside `(−ε, ε)`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let raw = self.arch.raw_forward(tape, params, x)?;
        let t = tape.tanh(raw);
        Ok(tape.scale(t, self.epsilon))
    }

    /// Noise for a batch, outside any caller graph.
    pub fn noise(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.to_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.detach(out))
    }
}

/// `clip(x + noise, 0, 1)`.
pub fn apply_poison(x: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if x.shape() != noise.shape() {
        return Err(Error::Dimension(format!(
            "poison: image shape {:?} vs noise shape {:?}",
            x.shape(),
            noise.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, n)| (a + n).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
