//! Single-file checkpoint archive: a key/value text manifest followed by
//! named little-endian tensors. See `docs/checkpoint.md` for the byte layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ACNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            t => Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub array: ArrayD<f64>,
}

impl StoredTensor {
    pub fn f64(array: ArrayD<f64>) -> Self {
        Self {
            dtype: DType::F64,
            array,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn manifest_value(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest has no `{key}` entry")))
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name).map(|t| &t.array)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let mut manifest = String::new();
        for (k, v) in &self.manifest {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry `{k}` is not single-line key=value")));
            }
            manifest.push_str(k);
            manifest.push('=');
            manifest.push_str(v);
            manifest.push('\n');
        }
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype.tag());
            out.push(t.array.ndim() as u8);
            for &d in t.array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.array.iter() {
                match t.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint archive".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = r.u32()? as usize;
        let text = r.string(mlen)?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line `{line}`")))?;
            manifest.insert(k.to_string(), v.to_string());
        }

        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = r.string(nlen)?;
            let dtype = DType::from_tag(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DType::F32 => r
                    .take(len * 4)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => r
                    .take(len * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            };
            let array = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.insert(name, StoredTensor { dtype, array });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// 64-bit FNV-1a, used for the architecture hash in manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.manifest.insert("seed".into(), "7".into());
        c.manifest.insert("arch".into(), "{\"widths\":[2]}".into());
        c.tensors.insert(
            "a.weight".into(),
            StoredTensor::f64(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.1, 1e-300, -0.0]).unwrap()),
        );
        c.tensors.insert(
            "a.bias".into(),
            StoredTensor {
                dtype: DType::F32,
                array: ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.25]).unwrap(),
            },
        );
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes.truncate(bytes.len() - 9);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    proptest! {
        #[test]
        fn save_of_load_is_identity(values in proptest::collection::vec(any::<f64>(), 1..40), f32s in proptest::collection::vec(-1e6f32..1e6, 1..10)) {
            let mut c = Checkpoint::default();
            c.manifest.insert("k".into(), "v=1".into());
            c.tensors.insert("x".into(), StoredTensor::f64(ArrayD::from_shape_vec(IxDyn(&[values.len()]), values).unwrap()));
            c.tensors.insert("y".into(), StoredTensor {
                dtype: DType::F32,
                array: ArrayD::from_shape_vec(IxDyn(&[f32s.len()]), f32s.iter().map(|v| *v as f64).collect()).unwrap(),
            });
            let bytes = c.to_bytes().unwrap();
            let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
            prop_assert_eq!(bytes, again);
        }
    }
}
