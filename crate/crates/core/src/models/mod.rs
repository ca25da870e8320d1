//! The victim classifier `f_θ`, the noise generator `AE_ξ`, and checkpoints.

mod attack_net;
pub mod checkpoint;
mod classifier;

pub use attack_net::{apply_poison, AttackArch, AttackModel};
pub use classifier::{Classifier, MlpArch};
