//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPCK"                      magic
//! u32                         format version
//! u32                         entry count
//! entry*                      manifest
//!   u16 + utf8                name
//!   u8                        dtype (0 = f32, 1 = raw bytes)
//!   u8 + u32*ndim             shape
//!   u64                       offset into the data section
//!   u64                       byte length
//! data section                concatenated blobs
//! ```

use std::path::Path;

use super::network::Network;
use super::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub blob: Blob,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    fn upsert(&mut self, entry: Entry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.upsert(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            blob: Blob::F32(data),
        });
    }

    pub fn put_bytes(&mut self, name: &str, data: Vec<u8>) {
        self.upsert(Entry {
            name: name.to_string(),
            shape: vec![data.len()],
            blob: Blob::Bytes(data),
        });
    }

    pub fn get_f32(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries.iter().find(|e| e.name == name).and_then(|e| match &e.blob {
            Blob::F32(v) => Some((e.shape.as_slice(), v.as_slice())),
            Blob::Bytes(_) => None,
        })
    }

    pub fn get_bytes(&self, name: &str) -> Option<&[u8]> {
        self.entries.iter().find(|e| e.name == name).and_then(|e| match &e.blob {
            Blob::Bytes(v) => Some(v.as_slice()),
            Blob::F32(_) => None,
        })
    }

    pub fn put_network(&mut self, prefix: &str, net: &Network) {
        for (name, shape, data) in net.state() {
            self.put_f32(&format!("{prefix}.{name}"), &shape, data);
        }
    }

    pub fn load_network(&self, prefix: &str, net: &mut Network) -> Result<()> {
        net.load_state(&|name| {
            self.get_f32(&format!("{prefix}.{name}"))
                .map(|(s, d)| (s.to_vec(), d.to_vec()))
        })
    }

    pub fn put_adam(&mut self, prefix: &str, opt: &Adam) {
        let c = opt.config;
        self.put_f32(
            &format!("{prefix}.hyper"),
            &[4],
            vec![c.lr, c.beta1, c.beta2, c.eps],
        );
        self.put_bytes(&format!("{prefix}.step"), opt.steps().to_le_bytes().to_vec());
        for (i, (m, v)) in opt.moments().iter().enumerate() {
            self.put_f32(&format!("{prefix}.{i}.m"), &[m.len()], m.clone());
            self.put_f32(&format!("{prefix}.{i}.v"), &[v.len()], v.clone());
        }
    }

    /// Optimizer state is optional; returns `None` when absent.
    pub fn load_adam(&self, prefix: &str) -> Result<Option<Adam>> {
        let Some((_, hyper)) = self.get_f32(&format!("{prefix}.hyper")) else {
            return Ok(None);
        };
        let step_bytes = self
            .get_bytes(&format!("{prefix}.step"))
            .ok_or_else(|| Error::Input(format!("{prefix}: optimizer step missing")))?;
        let step = u64::from_le_bytes(
            step_bytes
                .try_into()
                .map_err(|_| Error::Input(format!("{prefix}: bad optimizer step")))?,
        );
        let config = AdamConfig {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
        };
        let mut moments = Vec::new();
        for i in 0.. {
            let (Some((_, m)), Some((_, v))) = (
                self.get_f32(&format!("{prefix}.{i}.m")),
                self.get_f32(&format!("{prefix}.{i}.v")),
            ) else {
                break;
            };
            moments.push((m.to_vec(), v.to_vec()));
        }
        Ok(Some(Adam::restore(config, step, moments)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let (dtype, len) = match &e.blob {
                Blob::F32(v) => (0u8, v.len() as u64 * 4),
                Blob::Bytes(v) => (1u8, v.len() as u64),
            };
            out.push(dtype);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        for e in &self.entries {
            match &e.blob {
                Blob::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Blob::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!("bad magic {:?}, expected \"SPCK\"", String::from_utf8_lossy(magic)),
            });
        }
        let version_at = r.pos as u64;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                offset: version_at,
                message: format!("unsupported format version {version} (this build reads {FORMAT_VERSION})"),
            });
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = r.pos as u64;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint {
                offset: name_at,
                message: "entry name is not UTF-8".into(),
            })?;
            let dtype_at = r.pos as u64;
            let dtype = r.u8()?;
            if dtype > 1 {
                return Err(Error::Checkpoint {
                    offset: dtype_at,
                    message: format!("unknown dtype {dtype} for {name}"),
                });
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            let len = r.u64()?;
            manifest.push((name, dtype, shape, offset, len, name_at));
        }
        let data_start = r.pos;
        let data = &bytes[data_start..];
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, dtype, shape, offset, len, at) in manifest {
            let end = offset.checked_add(len).filter(|&e| e <= data.len() as u64).ok_or_else(|| {
                Error::Checkpoint {
                    offset: at,
                    message: format!("entry {name} points past the end of the file"),
                }
            })?;
            let raw = &data[offset as usize..end as usize];
            let blob = if dtype == 0 {
                let expected: usize = shape.iter().product::<usize>() * 4;
                if raw.len() != expected {
                    return Err(Error::Checkpoint {
                        offset: at,
                        message: format!("entry {name}: {} bytes for shape {shape:?}", raw.len()),
                    });
                }
                Blob::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            } else {
                Blob::Bytes(raw.to_vec())
            };
            entries.push(Entry { name, shape, blob });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { offset, message } => Error::format(
                path,
                format!("corrupt checkpoint at byte offset {offset}: {message}"),
            ),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                message: format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Mode, NetworkBuilder, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Network {
        let mut b = NetworkBuilder::new(&[&[1, 4, 4]]);
        let x = b.input(0);
        let c = b.then(LayerSpec::conv(1, 2, 3, 1, 1), x).unwrap();
        let n = b.then(LayerSpec::BatchNorm { channels: 2 }, c).unwrap();
        b.build(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn network_round_trip_preserves_outputs() {
        let mut a = net(1);
        let x = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|v| v as f32 * 0.1).collect()).unwrap();
        a.forward(&[&x], Mode::Train).unwrap();
        let mut ck = Checkpoint::new();
        ck.put_network("m", &a);
        ck.put_bytes("meta.config", b"{}".to_vec());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut b = net(2);
        back.load_network("m", &mut b).unwrap();
        assert_eq!(a.infer(&[&x]).unwrap(), b.infer(&[&x]).unwrap());
    }

    #[test]
    fn corrupt_header_names_offset() {
        let mut ck = Checkpoint::new();
        ck.put_f32("w", &[2], vec![1.0, 2.0]);
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bytes = ck.to_bytes();
        bytes[4] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { offset: 4, message }) => assert!(message.contains("version")),
            other => panic!("{other:?}"),
        }
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn adam_state_round_trip() {
        let mut n = net(3);
        let mut opt = Adam::new(AdamConfig::default());
        let x = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|v| (v as f32).sin()).collect()).unwrap();
        let y = n.forward(&[&x], Mode::Train).unwrap();
        n.backward(&y).unwrap();
        opt.step(&mut n);
        let mut ck = Checkpoint::new();
        ck.put_adam("opt", &opt);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().load_adam("opt").unwrap().unwrap();
        assert_eq!(back.steps(), 1);
        assert_eq!(back.moments(), opt.moments());
        assert!(Checkpoint::new().load_adam("opt").unwrap().is_none());
    }
}
