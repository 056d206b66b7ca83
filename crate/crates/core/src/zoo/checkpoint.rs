//! Dense checkpoint container.
//!
//! Layout, all integers little-endian `u32`, all reals little-endian `f32`:
//!
//! ```text
//! magic        8 bytes  "PTSPCKPT"
//! version      u32      1
//! tag_len      u32      followed by tag_len bytes of UTF-8 architecture tag
//! input        u32 ×3   channels, height, width
//! classes      u32
//! norm         f32 ×2   mean, std
//! n_records    u32
//! per record:
//!   name_len   u32      followed by name_len bytes of UTF-8
//!   ndim       u32      followed by ndim u32 extents
//!   values     f32 × product(extents)
//! ```
//!
//! Records for a network are `<layer>.weight` and `<layer>.bias` in layer order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::model::{InputShape, Layer, ModelSpec, Network, Normalization};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTSPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub input: InputShape,
    pub classes: usize,
    pub norm_mean: f32,
    pub norm_std: f32,
    pub records: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.arch);
        for v in [self.input.channels, self.input.height, self.input.width, self.classes] {
            put_u32(&mut out, v as u32);
        }
        out.extend_from_slice(&self.norm_mean.to_le_bytes());
        out.extend_from_slice(&self.norm_std.to_le_bytes());
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            put_str(&mut out, &r.name);
            put_u32(&mut out, r.shape.len() as u32);
            for &d in &r.shape {
                put_u32(&mut out, d as u32);
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let arch = rd.string()?;
        let input = InputShape {
            channels: rd.u32()? as usize,
            height: rd.u32()? as usize,
            width: rd.u32()? as usize,
        };
        let classes = rd.u32()? as usize;
        let norm_mean = rd.f32()?;
        let norm_std = rd.f32()?;
        let n = rd.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = rd.string()?;
            let ndim = rd.u32()? as usize;
            let shape = (0..ndim).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
            let values = rd.f32_vec(count)?;
            records.push(TensorRecord { name, shape, values });
        }
        rd.finish()?;
        Ok(Self { arch, input, classes, norm_mean, norm_std, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Narrows a network's parameters to `f32`.
    pub fn from_network(net: &Network) -> Self {
        let spec = net.spec();
        let narrow = |t: &Tensor| t.data().iter().map(|&v| v as f32).collect();
        let records = net
            .layers()
            .iter()
            .flat_map(|l| {
                [
                    TensorRecord {
                        name: format!("{}.weight", l.name),
                        shape: l.weight.shape().to_vec(),
                        values: narrow(&l.weight),
                    },
                    TensorRecord {
                        name: format!("{}.bias", l.name),
                        shape: l.bias.shape().to_vec(),
                        values: narrow(&l.bias),
                    },
                ]
            })
            .collect();
        let norm = net.normalization();
        Self {
            arch: spec.arch.to_string(),
            input: spec.input,
            classes: spec.classes,
            norm_mean: norm.mean as f32,
            norm_std: norm.std as f32,
            records,
        }
    }

    /// Rebuilds the network, widening every value to `f64`.
    pub fn to_network(&self) -> Result<Network> {
        let spec = ModelSpec::new(self.arch.parse()?, self.input, self.classes)?;
        let find = |name: &str| {
            self.records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks record `{name}`")))
        };
        let widen = |r: &TensorRecord| {
            Tensor::new(r.shape.clone(), r.values.iter().map(|&v| v as f64).collect())
                .map_err(|e| Error::Format(format!("record `{}`: {e}", r.name)))
        };
        let layers = spec
            .layers
            .iter()
            .map(|(name, kind)| {
                Ok(Layer {
                    name: name.clone(),
                    kind: *kind,
                    weight: widen(find(&format!("{name}.weight"))?)?,
                    bias: widen(find(&format!("{name}.bias"))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = Normalization { mean: self.norm_mean as f64, std: self.norm_std as f64 };
        Network::from_parts(spec, layers, norm)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::model::Architecture;

    fn small_net() -> Network {
        let input = InputShape { channels: 1, height: 6, width: 6 };
        let mut net = Network::init(ModelSpec::new(Architecture::Cnn2Conv2Fc, input, 4).unwrap(), 1);
        net.set_normalization(Normalization { mean: 0.25, std: 0.5 });
        net
    }

    #[test]
    fn network_round_trip_is_bit_exact() {
        let ck = Checkpoint::from_network(&small_net());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let again = Checkpoint::from_network(&back.to_network().unwrap());
        assert_eq!(again.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_network(&small_net());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn zero_tensor_checkpoint_round_trip() {
        let ck = Checkpoint {
            arch: "mlp-0x0".into(),
            input: InputShape { channels: 1, height: 1, width: 1 },
            classes: 2,
            norm_mean: 0.0,
            norm_std: 1.0,
            records: vec![],
        };
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        assert!(matches!(ck.to_network(), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_headers_rejected() {
        let bytes = Checkpoint::from_network(&small_net()).to_bytes();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }
}
