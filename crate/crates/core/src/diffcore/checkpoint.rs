//! Versioned container of named parameter arrays plus string metadata.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (metadata and array directory), then every array's values as
//! little-endian `f64` in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"PROCAMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    arrays: Vec<DirEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, StoredArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.insert(name.into(), StoredArray { shape, values });
    }

    pub fn insert_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.insert(name, t.shape().to_vec(), t.data().iter().map(|v| v.f64()).collect());
    }

    pub fn get(&self, name: &str) -> Result<&StoredArray> {
        self.arrays.get(name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing array `{name}`"),
        })
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self.get(name)?;
        let shape: [usize; 4] = a.shape.clone().try_into().map_err(|_| Error::Format {
            what: "checkpoint",
            detail: format!("`{name}` is not 4-D"),
        })?;
        Ok(Tensor::from_vec(shape, a.values.iter().map(|&v| T::lit(v)).collect()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    /// Stores every parameter of `module` under `prefix.<param name>`.
    pub fn insert_params<T: Real>(&mut self, prefix: &str, module: &impl Parameterized<T>) {
        for p in module.params() {
            self.insert_tensor(format!("{prefix}.{}", p.name), &p.value);
        }
    }

    /// Loads parameters stored with [`Checkpoint::insert_params`], checking shapes.
    pub fn load_params<T: Real>(&self, prefix: &str, module: &mut impl Parameterized<T>) -> Result<()> {
        for p in module.params_mut() {
            let name = format!("{prefix}.{}", p.name);
            let t = self.tensor::<T>(&name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("`{name}` has shape {:?}, expected {:?}", t.shape(), p.value.shape()),
                });
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| DirEntry {
                    name: k.clone(),
                    shape: v.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let body: usize = self.arrays.values().map(|a| a.values.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.arrays.values() {
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&e.to_string()))?;
        let mut pos = hend;
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let end = pos + n * 8;
            if end > bytes.len() {
                return Err(bad(&format!("truncated array `{}`", e.name)));
            }
            let values = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            arrays.insert(e.name, StoredArray { shape: e.shape, values });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(values in proptest::collection::vec(-1e6f64..1e6, 1..64), key in "[a-z]{1,8}") {
            let mut ck = Checkpoint::new();
            ck.set_meta("version.warp", "1");
            ck.set_meta(key.clone(), "x");
            let n = values.len();
            ck.insert("a.weight", vec![1, 1, 1, n], values);
            ck.insert("empty", vec![0], vec![]);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.insert("x", vec![2], vec![1.0, 2.0]);
        let mut b = ck.to_bytes();
        b.pop();
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense-bytes-here!!").is_err());
    }
}
