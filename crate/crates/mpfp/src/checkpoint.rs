//! Parameter checkpoints.
//!
//! `params.bin` is a little-endian container:
//!
//! ```text
//! magic   8 bytes  "MPFPCKPT"
//! version u32      1
//! count   u32      number of records
//! record  name_len u32, name (UTF-8), rank u32, dims u64 x rank,
//!         values f64 x product(dims)
//! ```
//!
//! `manifest.json` lists the same records (name, shape, byte offset of the
//! values) next to whatever metadata the caller attaches.

use std::fs;
use std::path::Path;

use mpfp_core::{Params, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MPFPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub records: Vec<RecordInfo>,
    pub meta: serde_json::Value,
}

pub fn encode(params: &Params) -> (Vec<u8>, Vec<RecordInfo>) {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut records = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        records.push(RecordInfo {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: out.len(),
        });
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    (out, records)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Params, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("record too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::new(&shape, data).map_err(|e| e.to_string())?);
        names.push(name);
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Params::new(names, values).map_err(|e| e.to_string())
}

/// Writes `params.bin` and `manifest.json` into `dir`.
pub fn save(dir: &Path, params: &Params, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let (bin, records) = encode(params);
    let manifest = Manifest {
        format: "mpfp-params".into(),
        version: VERSION,
        records,
        meta,
    };
    for (file, bytes) in [("params.bin", bin), ("manifest.json", serde_json::to_vec_pretty(&manifest)?)] {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Params, Manifest)> {
    let read = |file: &str| {
        let path = dir.join(file);
        fs::read(&path).map_err(|e| Error::Io { path, source: e })
    };
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    let bpath = dir.join("params.bin");
    let params = decode(&read("params.bin")?).map_err(|detail| Error::Corrupt {
        path: bpath.clone(),
        detail,
    })?;
    let agrees = manifest.records.len() == params.len()
        && manifest
            .records
            .iter()
            .zip(params.iter())
            .all(|(r, (n, t))| r.name == n && r.shape == t.shape());
    if !agrees {
        return Err(Error::Corrupt {
            path: mpath,
            detail: "manifest does not describe params.bin".into(),
        });
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Params {
        Params::new(
            vec!["a.w".into(), "b".into()],
            vec![
                Tensor::new(&[2, 1, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                Tensor::scalar(0.5),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        let (bin, rec) = encode(&p);
        assert_eq!(decode(&bin).unwrap(), p);
        assert_eq!(rec[0].offset, 8 + 4 + 4 + 4 + 3 + 4 + 3 * 8);
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &p, serde_json::json!({"step": 3})).unwrap();
        let (q, m) = load(dir.path()).unwrap();
        assert_eq!(q, p);
        assert_eq!(m.meta["step"], 3);
    }

    #[test]
    fn damage_is_reported() {
        let (bin, _) = encode(&sample());
        assert!(decode(&bin[..bin.len() - 1]).is_err());
        let mut bad = bin.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bin;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
