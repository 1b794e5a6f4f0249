//! The `RFTW` weight container.
//!
//! ```text
//! magic "RFTW" | version u32 | count u64
//! per tensor: name_len u32 | name (UTF-8) | dtype u8 | rank u32 | dims u64 × rank | data
//! ```
//!
//! All integers and scalars are little-endian; data is row-major. dtype
//! codes: 0 = f32, 1 = f64.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{ContainerError, Result};
use crate::init::InitScheme;
use crate::model::{Model, ModelConfig};
use crate::params::Parameters;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: [u8; 4] = *b"RFTW";
pub const VERSION: u32 = 1;

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

/// Serializes named tensors in the given order.
pub fn encode<T: Float>(tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| n.len() + 9 + 8 * t.rank() + t.len() * T::DTYPE.size())
        .sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(ContainerError::DuplicateName(name.clone()).into());
        }
        let len = u32::try_from(name.len()).map_err(|_| ContainerError::InvalidName)?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_data<T: Float>(name: &str, shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<T>, ContainerError> {
    let data: Vec<T> = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ContainerError::NonFinite(name.to_string()));
    }
    Ok(Tensor::from_raw(shape, data))
}

/// Parses a whole container. Nothing is returned unless every tensor
/// decodes and the input is fully consumed.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = r.u64()?;
    let mut names = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ContainerError::InvalidName)?
            .to_string();
        if name.is_empty() {
            return Err(ContainerError::InvalidName);
        }
        if !names.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| ContainerError::UnknownDtype {
            name: name.clone(),
            code,
        })?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::new();
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let invalid = || ContainerError::InvalidShape {
            name: name.clone(),
            shape: dims.clone(),
        };
        if dims.contains(&0) {
            return Err(invalid());
        }
        let shape: Vec<usize> = dims
            .iter()
            .map(|&d| usize::try_from(d).map_err(|_| invalid()))
            .collect::<Result<_, _>>()?;
        let bytes_len = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(invalid)?;
        let raw = r.take(bytes_len)?;
        let tensor = match dtype {
            DType::F32 => StoredTensor::F32(decode_data(&name, shape, raw)?),
            DType::F64 => StoredTensor::F64(decode_data(&name, shape, raw)?),
        };
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

fn cast_stored<T: Float>(name: &str, t: StoredTensor) -> Result<Tensor<T>, ContainerError> {
    let found = t.dtype();
    if found != T::DTYPE {
        return Err(ContainerError::DtypeMismatch {
            name: name.to_string(),
            expected: T::DTYPE,
            found,
        });
    }
    // The dtype check makes these casts exact identity conversions.
    let cast = match t {
        StoredTensor::F32(t) => t.cast::<T>(),
        StoredTensor::F64(t) => t.cast::<T>(),
    };
    cast.map_err(|_| ContainerError::NonFinite(name.to_string()))
}

/// Moves decoded tensors into `model`. Names must match the model's
/// parameters one to one, with identical shapes and dtype; on any error
/// the model is left untouched.
pub fn assign<T: Float>(model: &mut Model<T>, tensors: Vec<(String, StoredTensor)>) -> Result<()> {
    let expected: BTreeMap<String, Vec<usize>> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut stored: BTreeMap<String, StoredTensor> = tensors.into_iter().collect();
    let missing: Vec<String> = expected.keys().filter(|n| !stored.contains_key(*n)).cloned().collect();
    let extra: Vec<String> = stored.keys().filter(|n| !expected.contains_key(*n)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ContainerError::NameMismatch { missing, extra }.into());
    }
    let mut ready = BTreeMap::new();
    for (name, shape) in &expected {
        let t = stored.remove(name).expect("names checked");
        if t.shape() != shape.as_slice() {
            return Err(ContainerError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        ready.insert(name.clone(), cast_stored::<T>(name, t)?);
    }
    model.visit_mut("", &mut |name, slot| {
        *slot = ready.remove(&name).expect("every parameter has a tensor");
    });
    Ok(())
}

/// Encodes every parameter of `model`.
pub fn encode_model<T: Float>(model: &Model<T>) -> Result<Vec<u8>> {
    encode(&model.named_parameters())
}

/// Builds `config` and fills it from container bytes.
pub fn decode_model<T: Float>(config: ModelConfig, bytes: &[u8]) -> Result<Model<T>> {
    let tensors = decode(bytes)?;
    let mut model = Model::build(config, InitScheme::Zeros)?;
    assign(&mut model, tensors)?;
    Ok(model)
}

pub fn save_weights<T: Float>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    super::write_file(path.as_ref(), &encode_model(model)?)
}

pub fn load_weights<T: Float>(config: ModelConfig, path: impl AsRef<Path>) -> Result<Model<T>> {
    decode_model(config, &super::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::tiny_config;

    fn tiny() -> Model<f64> {
        Model::build(tiny_config(5, 3), InitScheme::Dense { std: 0.2 }).unwrap()
    }

    fn container_err(r: Result<Model<f64>>) -> ContainerError {
        match r {
            Err(Error::Container(e)) => e,
            other => panic!("expected container error, got {other:?}"),
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]).unwrap();
        let mut want = b"RFTW".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'w');
        want.push(0);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn model_roundtrip_is_bitwise() {
        let m = tiny();
        let bytes = encode_model(&m).unwrap();
        let back: Model<f64> = decode_model(m.config.clone(), &bytes).unwrap();
        assert_eq!(back, m);
        let img = Tensor::full([3, 32, 32], 0.5).unwrap();
        assert!(back.forward(&img).unwrap().bit_eq(&m.forward(&img).unwrap()));
    }

    #[test]
    fn error_taxonomy() {
        let m = tiny();
        let cfg = || m.config.clone();
        let bytes = encode_model(&m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            container_err(decode_model(cfg(), &bad)),
            ContainerError::BadMagic(_)
        ));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(
            container_err(decode_model(cfg(), &bad)),
            ContainerError::UnsupportedVersion(2)
        );

        for cut in [3, 10, 17, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                container_err(decode_model(cfg(), &bytes[..cut])),
                ContainerError::Truncated { .. }
            ));
        }

        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(
            container_err(decode_model(cfg(), &bad)),
            ContainerError::TrailingBytes(1)
        );

        let mut named = m.named_parameters();
        let extra = Tensor::zeros([1]).unwrap();
        named.push(("stray.weight".into(), &extra));
        let e = container_err(decode_model(cfg(), &encode(&named).unwrap()));
        assert_eq!(
            e,
            ContainerError::NameMismatch {
                missing: vec![],
                extra: vec!["stray.weight".into()]
            }
        );
        assert!(e.to_string().contains("stray.weight"));

        let named = m.named_parameters();
        let e = container_err(decode_model(cfg(), &encode(&named[1..]).unwrap()));
        assert!(
            matches!(e, ContainerError::NameMismatch { ref missing, .. } if missing == &["levels.0.embed.proj.weight"])
        );

        let mut named = m.named_parameters();
        let wrong = Tensor::zeros([2, 2]).unwrap();
        named[0].1 = &wrong;
        assert!(matches!(
            container_err(decode_model(cfg(), &encode(&named).unwrap())),
            ContainerError::ShapeMismatch { .. }
        ));

        let f32_model: Model<f32> = Model::build(cfg(), InitScheme::Zeros).unwrap();
        assert!(matches!(
            container_err(decode_model(cfg(), &encode_model(&f32_model).unwrap())),
            ContainerError::DtypeMismatch { .. }
        ));

        // dtype byte of the first tensor follows magic, version, count,
        // name length and the name itself.
        let name_len = "levels.0.embed.proj.weight".len();
        let mut bad = bytes.clone();
        bad[20 + name_len] = 9;
        assert!(matches!(
            container_err(decode_model(cfg(), &bad)),
            ContainerError::UnknownDtype { code: 9, .. }
        ));

        let t = Tensor::<f64>::zeros([1]).unwrap();
        let mut dup = encode(&[("a".to_string(), &t)]).unwrap();
        dup[8..16].copy_from_slice(&2u64.to_le_bytes());
        dup.extend_from_within(16..);
        assert_eq!(decode(&dup).unwrap_err(), ContainerError::DuplicateName("a".into()));
        assert!(encode(&[("a".to_string(), &t), ("a".to_string(), &t)]).is_err());

        let mut nan = encode(&[("a".to_string(), &t)]).unwrap();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(decode(&nan).unwrap_err(), ContainerError::NonFinite("a".into()));
    }

    #[test]
    fn zero_dims_are_rejected() {
        let t = Tensor::<f32>::zeros([1]).unwrap();
        let mut bytes = encode(&[("a".to_string(), &t)]).unwrap();
        // rank 1 dims start after name (1 byte), dtype and rank.
        bytes[16 + 4 + 1 + 1 + 4..16 + 4 + 1 + 1 + 4 + 8].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            decode(&bytes).unwrap_err(),
            ContainerError::InvalidShape { .. }
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rftw");
        let m = tiny();
        save_weights(&m, &path).unwrap();
        assert_eq!(load_weights::<f64>(m.config.clone(), &path).unwrap(), m);
        assert!(matches!(
            load_weights::<f64>(m.config.clone(), dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
