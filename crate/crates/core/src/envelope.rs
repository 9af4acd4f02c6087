//! Versioned binary tensor container used by training checkpoints and toy
//! language-model weight files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RSCK" | version u32 | tag_len u32 + tag | meta_len u32 + meta
//! | step u64 | n_tensors u32
//! | per tensor: name_len u32 + name | ndim u32 | ndim x u32 dims | f32 data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const ENVELOPE_MAGIC: &[u8; 4] = b"RSCK";
pub const ENVELOPE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Tensor {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
        t
    }
}

/// A tagged, versioned bundle of named f32 tensors plus a free-form metadata
/// block (the fully-resolved config echo).
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub tag: String,
    pub meta: String,
    pub step: u64,
    pub tensors: Vec<Tensor>,
}

impl Envelope {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("envelope is missing tensor `{name}`")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        w.write_all(ENVELOPE_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(ENVELOPE_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.tag.len() as u32).map_err(io)?;
        w.write_all(self.tag.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(self.meta.len() as u32).map_err(io)?;
        w.write_all(self.meta.as_bytes()).map_err(io)?;
        w.write_u64::<LittleEndian>(self.step).map_err(io)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32).map_err(io)?;
        for t in &self.tensors {
            w.write_u32::<LittleEndian>(t.name.len() as u32).map_err(io)?;
            w.write_all(t.name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(t.dims.len() as u32).map_err(io)?;
            for d in &t.dims {
                w.write_u32::<LittleEndian>(*d as u32).map_err(io)?;
            }
            for v in &t.data {
                w.write_f32::<LittleEndian>(*v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let file = File::open(path).map_err(io)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != ENVELOPE_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {magic:?}, expected {ENVELOPE_MAGIC:?}",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != ENVELOPE_VERSION {
            return Err(Error::Format(format!(
                "{}: envelope version {version} is not readable by this build (version {ENVELOPE_VERSION})",
                path.display()
            )));
        }
        let read_string = |r: &mut BufReader<File>| -> Result<String> {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io)?;
            String::from_utf8(buf)
                .map_err(|_| Error::Format(format!("{}: non-UTF-8 string field", path.display())))
        };
        let tag = read_string(&mut r)?;
        let meta = read_string(&mut r)?;
        let step = r.read_u64::<LittleEndian>().map_err(io)?;
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Envelope {
            tag,
            meta,
            step,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let env = Envelope {
            tag: "unit-test".into(),
            meta: "a = 1\nb = two\n".into(),
            step: 42,
            tensors: vec![
                Tensor::new("w", vec![2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, 3.25, -0.0]),
                Tensor::new("b", vec![2], vec![9.75, 1e-30]),
            ],
        };
        let path = dir.path().join("env.rsck");
        env.save(&path).unwrap();
        let loaded = Envelope::load(&path).unwrap();
        assert_eq!(env.tag, loaded.tag);
        assert_eq!(env.meta, loaded.meta);
        assert_eq!(env.step, loaded.step);
        for (a, b) in env.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn version_mismatch_is_refused_with_versions_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.rsck");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(ENVELOPE_MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = Envelope::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn corrupted_file_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let env = Envelope {
            tag: "t".into(),
            meta: String::new(),
            step: 0,
            tensors: vec![Tensor::new("w", vec![4], vec![1.0; 4])],
        };
        let path = dir.path().join("good.rsck");
        env.save(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("cut.rsck");
        std::fs::write(&path2, &full[..full.len() - 5]).unwrap();
        assert!(Envelope::load(&path2).is_err());
    }
}
