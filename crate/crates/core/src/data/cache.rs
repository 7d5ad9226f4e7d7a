//! Binary dataset cache.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "DRDSET\0\0"
//! version  u32
//! k        u64
//! L        u64
//! stats    u8 flag, then k f64 means and k f64 stds when the flag is 1
//! groups   L × { qid u64, n u64, n × { doc_index u64, label u8, k × f64 } }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Dataset, Document, NormStats, QueryGroup};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"DRDSET\0\0";
pub const CACHE_VERSION: u32 = 1;

pub fn cache_write(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cache_read(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(ds.k as u64).to_le_bytes())?;
    w.write_all(&(ds.groups.len() as u64).to_le_bytes())?;
    match &ds.norm_stats {
        Some(stats) => {
            w.write_all(&[1])?;
            for v in stats.mean.iter().chain(&stats.std) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    for g in &ds.groups {
        w.write_all(&g.qid.to_le_bytes())?;
        w.write_all(&(g.docs.len() as u64).to_le_bytes())?;
        for d in &g.docs {
            w.write_all(&(d.doc_index as u64).to_le_bytes())?;
            w.write_all(&[d.label])?;
            for v in &d.features {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Reader<'a, R> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Corrupt("dataset cache is truncated".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v < (1 << 40))
            .ok_or_else(|| Error::Corrupt(format!("implausible {what} {v}")))
    }
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut rd = Reader { inner: r };
    let magic: [u8; 8] = rd.bytes()?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Incompatible("not a dataset cache (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(rd.bytes()?);
    if version != CACHE_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset cache version {version}, this build reads version {CACHE_VERSION}"
        )));
    }
    let k = rd.len("feature count")?;
    let num_groups = rd.len("query count")?;
    let norm_stats = match rd.bytes::<1>()?[0] {
        0 => None,
        1 => {
            let mean = (0..k).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            let std = (0..k).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            Some(NormStats { mean, std })
        }
        other => return Err(Error::Corrupt(format!("bad stats flag {other}"))),
    };
    let mut groups = Vec::with_capacity(num_groups.min(1 << 20));
    for _ in 0..num_groups {
        let qid = rd.u64()?;
        let n = rd.len("list length")?;
        let mut docs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let doc_index = rd.len("doc index")?;
            let label = rd.bytes::<1>()?[0];
            let features = (0..k).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            docs.push(Document {
                qid,
                label,
                features,
                doc_index,
            });
        }
        groups.push(QueryGroup { qid, docs });
    }
    let mut trailing = [0u8; 1];
    if rd.inner.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt("trailing bytes after dataset cache".into()));
    }
    let mut ds = Dataset::new(groups, k).map_err(|e| Error::Corrupt(e.to_string()))?;
    ds.norm_stats = norm_stats;
    Ok(ds)
}
