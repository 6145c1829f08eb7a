//! Versioned binary container for factor and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "CSTART\r\n"
//! container    u32       CONTAINER_VERSION
//! kind         u32 len + UTF-8 bytes   e.g. "bpmf-factors"
//! kind version u32
//! header       u64 len + UTF-8 JSON    self-describing metadata
//! tensors      u32 count, then per tensor:
//!                u32 len + UTF-8 name, u64 rows, u64 cols, rows·cols f64
//! checksum     32 bytes  SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"CSTART\r\n";
pub const CONTAINER_VERSION: u32 = 1;

/// Decoded artifact: JSON header plus named tensors.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub kind: String,
    pub kind_version: u32,
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Artifact {
    pub fn new(kind: &str, kind_version: u32, header: &impl Serialize) -> Result<Self> {
        Ok(Artifact {
            kind: kind.to_string(),
            kind_version,
            header: serde_json::to_value(header).map_err(|e| Error::invalid(format!("header serialisation: {e}")))?,
            tensors: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Matrix) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_vec(&mut self, name: impl Into<String>, values: &[f64]) {
        let m = Matrix::from_vec(1, values.len(), values.to_vec()).expect("row vector");
        self.insert(name, m);
    }

    pub fn take(&mut self, name: &str, path: &Path) -> Result<Matrix> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name:?}")))
    }

    pub fn take_vec(&mut self, name: &str, path: &Path) -> Result<Vec<f64>> {
        Ok(self.take(name, path)?.into_vec())
    }

    pub fn header_as<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.header.clone()).map_err(|e| Error::format(path, format!("header: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(CONTAINER_VERSION).unwrap();
        write_str(&mut buf, &self.kind);
        buf.write_u32::<LittleEndian>(self.kind_version).unwrap();
        let header = serde_json::to_vec(&self.header).expect("json value serialises");
        buf.write_u64::<LittleEndian>(header.len() as u64).unwrap();
        buf.extend_from_slice(&header);
        buf.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            write_str(&mut buf, name);
            buf.write_u64::<LittleEndian>(t.rows() as u64).unwrap();
            buf.write_u64::<LittleEndian>(t.cols() as u64).unwrap();
            for &v in t.as_slice() {
                buf.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a coldstart artifact (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let mut cur = Cursor::new(&body[MAGIC.len()..]);
        let eof = |_| bad("unexpected end of data");
        let container = cur.read_u32::<LittleEndian>().map_err(eof)?;
        if container != CONTAINER_VERSION {
            return Err(Error::format(
                path,
                format!("container version {container}, expected {CONTAINER_VERSION}"),
            ));
        }
        let kind = read_str(&mut cur).map_err(|_| bad("bad kind"))?;
        let kind_version = cur.read_u32::<LittleEndian>().map_err(eof)?;
        let header_len = cur.read_u64::<LittleEndian>().map_err(eof)? as usize;
        let mut header = vec![0u8; header_len];
        cur.read_exact(&mut header).map_err(eof)?;
        let header = serde_json::from_slice(&header).map_err(|e| bad(&format!("header json: {e}")))?;
        let count = cur.read_u32::<LittleEndian>().map_err(eof)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_str(&mut cur).map_err(|_| bad("bad tensor name"))?;
            let rows = cur.read_u64::<LittleEndian>().map_err(eof)? as usize;
            let cols = cur.read_u64::<LittleEndian>().map_err(eof)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= body.len() / 8)
                .ok_or_else(|| bad("tensor shape exceeds file size"))?;
            let mut data = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut data).map_err(eof)?;
            tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok(Artifact {
            kind,
            kind_version,
            header,
            tensors,
        })
    }

    /// Reads an artifact and checks its kind and version.
    pub fn load(path: &Path, kind: &str, kind_version: u32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let artifact = Self::from_bytes(&bytes, path)?;
        if artifact.kind != kind {
            return Err(Error::format(
                path,
                format!("artifact kind {:?}, expected {kind:?}", artifact.kind),
            ));
        }
        if artifact.kind_version != kind_version {
            return Err(Error::format(
                path,
                format!("{kind} version {}, expected {kind_version}", artifact.kind_version),
            ));
        }
        Ok(artifact)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(cur: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let len = cur.read_u32::<LittleEndian>()? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    let mut bytes = vec![0u8; len];
    cur.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| std::io::ErrorKind::InvalidData.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Artifact {
        let mut a = Artifact::new("test-kind", 3, &serde_json::json!({"answer": 42})).unwrap();
        a.insert("w", Matrix::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 3.0]]));
        a.insert_vec("b", &[0.1, 0.2, 0.3]);
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        sample().save(&p).unwrap();
        let mut back = Artifact::load(&p, "test-kind", 3).unwrap();
        assert_eq!(back.header["answer"], 42);
        assert_eq!(back.take_vec("b", &p).unwrap(), vec![0.1, 0.2, 0.3]);
        assert_eq!(back.take("w", &p).unwrap(), sample().tensors["w"]);
    }

    #[test]
    fn stale_or_foreign_artifacts_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        sample().save(&p).unwrap();
        assert!(Artifact::load(&p, "other-kind", 3).is_err());
        assert!(Artifact::load(&p, "test-kind", 4).is_err());

        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        assert!(Artifact::from_bytes(&bytes, &p).is_err());
        assert!(Artifact::from_bytes(b"garbage", &p).is_err());
    }
}
