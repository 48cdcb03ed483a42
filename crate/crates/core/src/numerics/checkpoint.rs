//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic `PDPPCKPT`, u32 version, a length-prefixed UTF-8
//! metadata block of `key=value` lines, then named parameter arrays as
//! (u32 name length, name bytes, u32 rank, u32 dims..., raw little-endian
//! f32 data). Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::array::Array;
use crate::numerics::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDPPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    metadata: &BTreeMap<String, String>,
    params: &ParamStore,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let mut meta = String::new();
    for (k, v) in metadata {
        assert!(!k.contains('=') && !k.contains('\n'), "bad metadata key");
        assert!(!v.contains('\n'), "bad metadata value");
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;

    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, array) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(array.shape().len() as u32).to_le_bytes())?;
        for &d in array.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in array.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(BTreeMap<String, String>, ParamStore)> {
    let mut r = Tracked {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(r.format_err("bad magic", 0));
    }
    let version = r.read_u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format_err(format!("unsupported version {version}"), 8));
    }
    let meta_len = r.read_u32("metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact_at(&mut meta_bytes, "metadata")?;
    let meta_text = String::from_utf8(meta_bytes)
        .map_err(|_| r.format_err("metadata is not UTF-8", r.offset))?;
    let mut metadata = BTreeMap::new();
    for line in meta_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.format_err(format!("metadata line without `=`: {line}"), r.offset))?;
        metadata.insert(k.to_string(), v.to_string());
    }

    let n_arrays = r.read_u32("array count")?;
    let mut params = ParamStore::new();
    for _ in 0..n_arrays {
        let name_len = r.read_u32("name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact_at(&mut name, "name")?;
        let name =
            String::from_utf8(name).map_err(|_| r.format_err("name is not UTF-8", r.offset))?;
        let rank = r.read_u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact_at(&mut buf, "array data")?;
            data.push(f32::from_le_bytes(buf));
        }
        params.insert(name, Array::from_vec(shape, data));
    }
    Ok((metadata, params))
}

struct Tracked {
    inner: BufReader<File>,
    offset: u64,
    path: String,
}

impl Tracked {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            path: self.path.clone(),
            what: format!("truncated while reading {what}"),
            offset: at,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn format_err(&self, what: impl Into<String>, offset: u64) -> Error {
        Error::Format {
            path: self.path.clone(),
            what: what.into(),
            offset,
        }
    }
}
