//! `PNV1` checkpoints: magic, u32 entry count, then per entry a u32 name
//! length, the UTF-8 name, u8 rank, u32 dims and little-endian f32 data.
//! A CRC32 of everything before it closes the file.

use std::path::Path;

use super::{Fusion, PoseNetError, Stage1Net, Stage2Net};
use crate::tensorkit::{AnyLayer, BatchNorm, Layer, LayerParams, Sequential, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNV1";

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.0 == name).map(|e| &e.1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names().any(|n| n.starts_with(prefix))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 12 {
            return Err(format!("file too short ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format!("bad magic {:?}", &bytes[..4]));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("entry name: {e}"))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("{name}: dims overflow"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| format!("{name}: size overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| format!("{name}: {e}"))?;
            entries.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<(), PoseNetError> {
        std::fs::write(path, self.encode()).map_err(|source| PoseNetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, PoseNetError> {
        let bytes = std::fs::read(path).map_err(|source| PoseNetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes).map_err(|msg| PoseNetError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }

    fn save_sequential(&mut self, prefix: &str, seq: &Sequential<f32>) {
        for (name, layer) in seq.layers() {
            let Some(p) = layer.params() else { continue };
            let base = format!("{prefix}.{name}");
            self.push(format!("{base}.weight"), p.weights.clone());
            self.push(format!("{base}.bias"), p.bias.clone());
            for (suffix, stat) in [("running_mean", &p.running_mean), ("running_var", &p.running_var)] {
                if let Some(v) = stat {
                    self.push(format!("{base}.{suffix}"), Tensor::new(vec![v.len()], v.clone()).expect("1-d"));
                }
            }
        }
    }

    fn load_sequential(&self, prefix: &str, seq: &mut Sequential<f32>) -> Result<(), String> {
        for (name, layer) in seq.layers_mut() {
            let Some(current) = layer.params() else { continue };
            let base = format!("{prefix}.{name}");
            let fetch = |suffix: &str, like: &Tensor<f32>| -> Result<Tensor<f32>, String> {
                let key = format!("{base}.{suffix}");
                let t = self.get(&key).ok_or_else(|| format!("missing entry {key}"))?;
                if t.dims() != like.dims() {
                    return Err(format!("{key}: dims {:?}, expected {:?}", t.dims(), like.dims()));
                }
                Ok(t.clone())
            };
            let mut p = LayerParams::new(fetch("weight", &current.weights)?, fetch("bias", &current.bias)?);
            if current.running_mean.is_some() {
                let like = Tensor::zeros(&[current.bias.len()]);
                p.running_mean = Some(fetch("running_mean", &like)?.into_data());
                p.running_var = Some(fetch("running_var", &like)?.into_data());
            }
            match layer {
                AnyLayer::BatchNorm(b) => *b = BatchNorm::from_params(p).map_err(|e| format!("{base}: {e}"))?,
                other => *other.params_mut().expect("has params") = p,
            }
        }
        Ok(())
    }
}

/// Everything needed for inference: fusion, stage 1 and optionally stage 2.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub fusion: Fusion,
    pub stage1: Stage1Net,
    pub stage2: Option<Stage2Net>,
}

impl ModelBundle {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let p = &self.fusion.conv.params;
        c.push("fuse.conv.weight", p.weights.clone());
        c.push("fuse.conv.bias", p.bias.clone());
        for (name, seq) in self.stage1.parts() {
            c.save_sequential(&format!("stage1.{name}"), seq);
        }
        if let Some(s2) = &self.stage2 {
            c.save_sequential("stage2", &s2.layers);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, String> {
        let get = |k: &str| c.get(k).cloned().ok_or_else(|| format!("missing entry {k}"));
        let conv = crate::tensorkit::Conv2d::new(LayerParams::new(get("fuse.conv.weight")?, get("fuse.conv.bias")?), 1, 0)
            .map_err(|e| e.to_string())?;
        let fusion = Fusion::from_conv(conv).map_err(|e| e.to_string())?;
        let k = |head: &str| get(&format!("stage1.{head}.fc.weight")).map(|t| t.dims()[0]);
        let mut stage1 = Stage1Net::new(k("az_head")?, k("el_head")?, 0.0, 0).map_err(|e| e.to_string())?;
        for (name, seq) in stage1.parts_mut() {
            c.load_sequential(&format!("stage1.{name}"), seq)?;
        }
        let stage2 = if c.has_prefix("stage2.") {
            let mut s2 = Stage2Net::new(0);
            c.load_sequential("stage2", &mut s2.layers)?;
            Some(s2)
        } else {
            None
        };
        Ok(Self { fusion, stage1, stage2 })
    }

    pub fn save(&self, path: &Path) -> Result<(), PoseNetError> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self, PoseNetError> {
        Self::from_checkpoint(&Checkpoint::read(path)?).map_err(|msg| PoseNetError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip_is_bitwise() {
        let bundle = ModelBundle {
            fusion: Fusion::new(1),
            stage1: Stage1Net::new(9, 5, 0.5, 2).unwrap(),
            stage2: Some(Stage2Net::new(3)),
        };
        let bytes = bundle.to_checkpoint().encode();
        let back = ModelBundle::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().encode(), bytes);
        assert!(back.stage2.is_some());
    }

    #[test]
    fn stage1_only_bundle_has_no_stage2() {
        let bundle = ModelBundle {
            fusion: Fusion::new(1),
            stage1: Stage1Net::new(13, 5, 0.5, 2).unwrap(),
            stage2: None,
        };
        let c = bundle.to_checkpoint();
        assert!(c.names().all(|n| !n.starts_with("stage2.")));
        let back = ModelBundle::from_checkpoint(&c).unwrap();
        assert_eq!(back.stage1.k_az(), 13);
        assert!(back.stage2.is_none());
    }

    #[test]
    fn corruption_detected() {
        let mut c = Checkpoint::new();
        c.push("a", Tensor::from_fn(&[2, 3], |i| i as f32));
        let bytes = c.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        let mut flipped = bytes.clone();
        flipped[14] ^= 1;
        assert!(Checkpoint::decode(&flipped).unwrap_err().contains("checksum"));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).unwrap_err().contains("magic"));
    }

    #[test]
    fn missing_entry_named() {
        let mut c = Checkpoint::new();
        c.push("fuse.conv.weight", Tensor::zeros(&[1, 1, 16, 8]));
        let err = ModelBundle::from_checkpoint(&c).unwrap_err();
        assert!(err.contains("fuse.conv.bias"), "{err}");
    }
}
