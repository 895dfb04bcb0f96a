//! Binary checkpoints.
//!
//! ```text
//! "SPDW1"            5 bytes magic
//! dtype              u8, element size in bytes (4 = f32, 8 = f64)
//! count              u32
//! count times:
//!   name_len         u32
//!   name             UTF-8, "<node id>.<kind>"
//!   ndims            u32
//!   dims             ndims x u32
//!   values           product(dims) elements, little-endian
//! ```
//!
//! All integers are little-endian. Running batch-norm statistics are stored
//! alongside trainable tensors; optimizer velocity is not.

use std::path::Path;

use super::params::ParameterStore;
use super::tensor::Real;
use super::EngineError;

pub const MAGIC: &[u8; 5] = b"SPDW1";

pub fn encode<T: Real>(store: &ParameterStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::TAG);
    out.extend_from_slice(&(store.tensors.len() as u32).to_le_bytes());
    for t in &store.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

/// Element size recorded in a checkpoint header, if the magic is right.
pub fn dtype_tag(bytes: &[u8]) -> Option<u8> {
    (bytes.len() > 5 && &bytes[..5] == MAGIC).then(|| bytes[5])
}

/// One tensor as read from a checkpoint, values widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EngineError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                EngineError::Format(format!(
                    "truncated reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, EngineError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>, EngineError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5, "magic")? != MAGIC {
        return Err(EngineError::Format("bad magic, expected SPDW1".into()));
    }
    let tag = r.take(1, "dtype")?[0];
    if tag != 4 && tag != 8 {
        return Err(EngineError::Format(format!("unknown dtype tag {tag}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| EngineError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndims = r.u32("rank")?;
        let shape = (0..ndims).map(|_| r.u32("dims")).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * tag as usize, &name)?;
        let values = raw
            .chunks_exact(tag as usize)
            .map(|c| {
                if tag == 4 {
                    f32::read_le(c) as f64
                } else {
                    f64::read_le(c)
                }
            })
            .collect();
        out.push(StoredTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(EngineError::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Fills `store` from a decoded checkpoint. The checkpoint must hold
/// exactly the store's tensors, in order, with matching shapes.
pub fn apply<T: Real>(store: &mut ParameterStore<T>, stored: &[StoredTensor]) -> Result<(), EngineError> {
    for (i, t) in store.tensors.iter_mut().enumerate() {
        let Some(s) = stored.get(i) else {
            return Err(EngineError::Mismatch {
                node: t.node.clone(),
                reason: format!("checkpoint has no tensor {}", t.name),
            });
        };
        if s.name != t.name {
            return Err(EngineError::Mismatch {
                node: t.node.clone(),
                reason: format!("expected tensor {}, checkpoint has {}", t.name, s.name),
            });
        }
        if s.shape != t.shape {
            return Err(EngineError::Mismatch {
                node: t.node.clone(),
                reason: format!("{} has shape {:?}, checkpoint has {:?}", t.name, t.shape, s.shape),
            });
        }
        t.data = s.values.iter().map(|&v| T::of(v)).collect();
    }
    if let Some(extra) = stored.get(store.tensors.len()) {
        let node = extra.name.split('.').next().unwrap_or(&extra.name).to_string();
        return Err(EngineError::Mismatch {
            node,
            reason: format!("checkpoint has extra tensor {}", extra.name),
        });
    }
    Ok(())
}

pub fn save<T: Real>(store: &ParameterStore<T>, path: &Path) -> Result<(), EngineError> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_into<T: Real>(store: &mut ParameterStore<T>, path: &Path) -> Result<(), EngineError> {
    let bytes = std::fs::read(path)?;
    apply(store, &decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_ir::parse_network;
    use crate::merge::MergedNetworkSpec;

    fn spec(c: usize) -> MergedNetworkSpec {
        MergedNetworkSpec::from_chain(
            &parse_network(&format!(
                "network n\ninput 8 8 1\nconv k=3 c={c} bn=true\nconv k=1 c=1 act=sigmoid"
            ))
            .unwrap(),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let store = ParameterStore::<f32>::init(&spec(3), 5);
        let bytes = encode(&store);
        assert_eq!(&bytes[..5], MAGIC);
        assert_eq!(bytes[5], 4);
        let mut back = ParameterStore::<f32>::zeros(&spec(3));
        apply(&mut back, &decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.tensors, store.tensors);
    }

    #[test]
    fn mismatch_names_node() {
        let bytes = encode(&ParameterStore::<f32>::init(&spec(3), 5));
        let mut other = ParameterStore::<f32>::zeros(&spec(4));
        match apply(&mut other, &decode(&bytes).unwrap()) {
            Err(EngineError::Mismatch { node, .. }) => assert_eq!(node, "d1_3C_0"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode(&ParameterStore::<f64>::init(&spec(2), 1));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(EngineError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(EngineError::Format(_))));
        assert!(matches!(decode(&[]), Err(EngineError::Format(_))));
    }
}
