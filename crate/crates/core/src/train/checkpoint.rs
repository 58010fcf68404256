//! Binary checkpoints: a little-endian u64 manifest length, a JSON manifest
//! naming every tensor, then the raw little-endian f64 payload.
//!
//! Manifest entries record `offset` in bytes from the start of the payload and
//! `len` in elements.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
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
                dtype: "f64".into(),
                offset,
                len: t.numel() as u64,
            });
            offset += 8 * t.numel() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + manifest.len() + offset as usize);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Format(format!("corrupt checkpoint: {msg}"));
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("missing manifest length".into()))?;
        let mlen = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| corrupt("manifest length overflows".into()))?;
        let manifest_bytes = bytes
            .get(8..8usize.saturating_add(mlen))
            .ok_or_else(|| corrupt("manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| corrupt(format!("manifest is not valid JSON: {e}")))?;
        let payload = &bytes[8 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0u64;
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(corrupt(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(corrupt(format!("tensor `{}` has offset {}", e.name, e.offset)));
            }
            if tensors.iter().any(|(n, _)| n == &e.name) {
                return Err(corrupt(format!("tensor `{}` appears twice", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| corrupt(format!("payload truncated in `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&e.shape, data)
                .map_err(|err| corrupt(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push((e.name, t));
            expected_offset = end as u64;
        }
        if payload.len() as u64 != expected_offset {
            return Err(corrupt("trailing bytes after payload".into()));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Learnable tensors followed by BN running statistics.
pub fn network_tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = net
        .params()
        .into_iter()
        .map(|(n, _, t)| (n, t.clone()))
        .collect();
    for (i, s) in net.running_stats() {
        let c = s.channels();
        out.push((
            format!("layer{i}.running_mean"),
            Tensor::new(&[c], s.mean.clone()).expect("channel count"),
        ));
        out.push((
            format!("layer{i}.running_var"),
            Tensor::new(&[c], s.var.clone()).expect("channel count"),
        ));
    }
    out
}

fn fetch<'a>(ckpt: &'a Checkpoint, name: &str, expected: &[usize]) -> Result<&'a Tensor> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
    if t.shape() != expected {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

/// Copies every network tensor from `ckpt`, validating all shapes first so a
/// failed load leaves `net` untouched.
pub fn load_network_tensors(net: &mut Network, ckpt: &Checkpoint) -> Result<()> {
    for (name, t) in network_tensors(net) {
        fetch(ckpt, &name, t.shape())?;
    }
    for (name, _, p) in net.params_mut() {
        let src = fetch(ckpt, &name, p.shape())?;
        p.data_mut().copy_from_slice(src.data());
    }
    for (i, s) in net.running_stats_mut() {
        let c = [s.channels()];
        s.mean.copy_from_slice(fetch(ckpt, &format!("layer{i}.running_mean"), &c)?.data());
        s.var.copy_from_slice(fetch(ckpt, &format!("layer{i}.running_var"), &c)?.data());
        s.initialized = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::scalar(0.1)),
            ],
            meta: serde_json::json!({"epoch": 3, "lr": 0.1}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("a").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut garbled = bytes;
        garbled[9] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&garbled), Err(Error::Format(_))));
    }
}
