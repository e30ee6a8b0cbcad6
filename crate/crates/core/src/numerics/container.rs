//! Binary parameter container.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "DRPARAM1"
//! 8 bytes   header length H, u64 little-endian
//! H bytes   UTF-8 JSON header {"tensors": [{"name", "shape", "offset"}], "meta": ...}
//! ...       f64 little-endian payload; `offset` is in bytes from the payload start
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DRPARAM1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(tensors: Vec<(String, Tensor)>, meta: serde_json::Value) -> Self {
        Container { tensors, meta }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Format(format!("tensor `{}` runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Container {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Container::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_records_offsets() {
        let c = Container::new(
            vec![
                ("a".into(), Tensor::vector(vec![1.0, 2.0])),
                ("b".into(), Tensor::scalar(-0.5)),
            ],
            serde_json::json!({"epoch": 3}),
        );
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header.tensors[1].offset, 16);
        assert_eq!(header.meta["epoch"], 3);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"nope").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            rows in 1usize..4,
        ) {
            let cols = values.len();
            let m: Vec<f64> = (0..rows).flat_map(|_| values.iter().copied()).collect();
            let c = Container::new(
                vec![
                    ("v".into(), Tensor::vector(values.clone())),
                    ("m".into(), Tensor::matrix(rows, cols, m).unwrap()),
                ],
                serde_json::Value::Null,
            );
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
