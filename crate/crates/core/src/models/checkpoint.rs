//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `PLCK` |
//! | 4     | format version (`u32`, currently 1) |
//! | 4     | header length `n` (`u32`) |
//! | n     | UTF-8 JSON header: `{"model": {"kind", "arch", ["epsilon"]}, "segments": [{"name", "shape", "offset"}]}` |
//! | 8·len | parameter values as IEEE-754 `f64` in segment order |
//!
//! Values are stored bit-for-bit, so save/load is exact.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AttackArch, AttackModel, Classifier, MlpArch};
use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector, Segment};

pub const MAGIC: &[u8; 4] = b"PLCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Classifier { arch: MlpArch },
    Attack { arch: AttackArch, epsilon: f64 },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelDescriptor,
    segments: Vec<Segment>,
}

pub fn encode(model: &ModelDescriptor, params: &ParamVector) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.clone(),
        segments: params.layout().segments().to_vec(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelDescriptor, ParamVector)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let layout = Layout::new(header.segments.iter().map(|s| (s.name.clone(), s.shape.clone())));
    if layout.segments() != header.segments.as_slice() {
        return Err(Error::Format("checkpoint segment offsets are inconsistent".into()));
    }
    let payload = &bytes[12 + hlen..];
    if payload.len() != 8 * layout.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} payload bytes, expected {}",
            payload.len(),
            8 * layout.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header.model, ParamVector::new(Arc::new(layout), values)?))
}

pub fn save(path: &Path, model: &ModelDescriptor, params: &ParamVector) -> Result<()> {
    fs::write(path, encode(model, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelDescriptor, ParamVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_classifier(path: &Path, c: &Classifier) -> Result<()> {
    save(
        path,
        &ModelDescriptor::Classifier {
            arch: c.arch().clone(),
        },
        c.params(),
    )
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    match load(path)? {
        (ModelDescriptor::Classifier { arch }, params) => Classifier::from_params(arch, params),
        _ => Err(Error::Format(format!("{} is not a classifier checkpoint", path.display()))),
    }
}

pub fn save_attack(path: &Path, a: &AttackModel) -> Result<()> {
    save(
        path,
        &ModelDescriptor::Attack {
            arch: a.arch().clone(),
            epsilon: a.epsilon(),
        },
        a.params(),
    )
}

pub fn load_attack(path: &Path) -> Result<AttackModel> {
    match load(path)? {
        (ModelDescriptor::Attack { arch, epsilon }, params) => {
            AttackModel::from_params(arch, epsilon, params)
        }
        _ => Err(Error::Format(format!("{} is not an attack checkpoint", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u64>(), 6 * 3 + 3 + 3 * 2 + 2)) {
            let arch = MlpArch { sizes: vec![6, 3, 2] };
            let layout = Arc::new(arch.layout());
            let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let params = ParamVector::new(layout, values).unwrap();
            let model = ModelDescriptor::Classifier { arch };
            let (m, p) = decode(&encode(&model, &params).unwrap()).unwrap();
            prop_assert_eq!(m, model);
            let got: Vec<u64> = p.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let arch = MlpArch { sizes: vec![2, 2] };
        let params = ParamVector::zeros(Arc::new(arch.layout()));
        let mut bytes = encode(&ModelDescriptor::Classifier { arch }, &params).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }
}
