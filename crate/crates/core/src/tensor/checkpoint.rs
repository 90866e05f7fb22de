//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header listing tensor names, shapes and byte offsets, then the raw
//! little-endian f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ParamSet, Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let len = t.numel() * 8;
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file shorter than header length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[8..body])
            .map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = e.offset + e.len;
            if end > payload.len() || e.len != e.shape.iter().product::<usize>() * 8 {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{}` payload out of range",
                    e.name
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TensorError> {
    let io = |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Model parameters plus, optionally, ADAM moments as `adam.m.*` and
/// `adam.v.*` tensors with the step count under `meta["adam"]`.
pub fn model_checkpoint(
    params: &ParamSet,
    adam: Option<&AdamState>,
    mut meta: serde_json::Value,
) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    if let Some(a) = adam {
        meta["adam"] = serde_json::json!({ "config": a.config, "step": a.step });
        for ((n, _), (mt, vt)) in params.iter().zip(a.m.iter().zip(&a.v)) {
            tensors.push((format!("adam.m.{n}"), mt.clone()));
            tensors.push((format!("adam.v.{n}"), vt.clone()));
        }
    }
    Checkpoint { meta, tensors }
}

/// Copies every tensor named in `template` out of `ck`, checking shapes.
pub fn restore_params(ck: &Checkpoint, template: &ParamSet) -> Result<ParamSet, TensorError> {
    let mut params = ParamSet::new();
    for (name, t) in template.iter() {
        let got = ck
            .tensor(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(TensorError::Checkpoint(format!(
                "shape mismatch for {name}"
            )));
        }
        params.insert(name, got.clone());
    }
    Ok(params)
}

pub fn restore_adam(ck: &Checkpoint, params: &ParamSet) -> Result<Option<AdamState>, TensorError> {
    let Some(a) = ck.meta.get("adam") else {
        return Ok(None);
    };
    let config: AdamConfig = serde_json::from_value(a["config"].clone())
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let mut state = AdamState::new(params, config);
    state.step = a["step"].as_u64().unwrap_or(0);
    for (i, (n, _)) in params.iter().enumerate() {
        let (Some(m), Some(v)) = (
            ck.tensor(&format!("adam.m.{n}")),
            ck.tensor(&format!("adam.v.{n}")),
        ) else {
            return Err(TensorError::Checkpoint(format!(
                "missing optimizer state for {n}"
            )));
        };
        state.m[i] = m.clone();
        state.v[i] = v.clone();
    }
    Ok(Some(state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let ck = Checkpoint {
            meta: serde_json::json!({"kind": "test", "step": 3}),
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(
            back.tensor("a").unwrap().data()[1].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn header_is_json_with_offsets() {
        let ck = Checkpoint {
            meta: serde_json::Value::Null,
            tensors: vec![
                ("x".into(), Tensor::zeros(&[3])),
                ("y".into(), Tensor::zeros(&[2, 1])),
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["tensors"][1]["offset"], 24);
        assert_eq!(header["tensors"][1]["shape"], serde_json::json!([2, 1]));
        assert_eq!(bytes.len(), 8 + hlen + 5 * 8);
    }

    #[test]
    fn truncated_payload_rejected() {
        let ck = Checkpoint {
            meta: serde_json::Value::Null,
            tensors: vec![("x".into(), Tensor::zeros(&[4]))],
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }
}
