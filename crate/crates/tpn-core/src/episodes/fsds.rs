//! FSDS, the on-disk dataset format.
//!
//! Little-endian binary: magic `FSDS`, version `u16` (currently 1), flags
//! `u16` (currently 0), class count `u32`, then per class a length-prefixed
//! UTF-8 name, sample count `u32`, rank `u8`, dims (`u32` each), and the
//! sample payload as `f32` values. A CRC32 of everything preceding it
//! closes the file. Values are stored as `f32` and widened to `f64` in
//! memory, so save → load → save reproduces the file byte for byte.
//!
//! Split assignment lives next to the data in a plain-text sidecar
//! `<stem>.split` with one `class_name<TAB>split` line per class.

use super::{ClassRecord, Dataset, Split};
use crate::bytes::Cursor;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"FSDS";
const VERSION: u16 = 1;

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("split")
}

/// Writes the dataset and its split sidecar. The dataset must pass
/// [`Dataset::validate`].
pub fn save_fsds(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    if ds.classes.len() > u32::MAX as usize {
        return Err(Error::Dataset("too many classes for the format".to_string()));
    }
    if ds.example_shape.len() > u8::MAX as usize {
        return Err(Error::Dataset(format!(
            "example rank {} exceeds the format's u8 rank field",
            ds.example_shape.len()
        )));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(ds.classes.len() as u32).to_le_bytes());
    let mut manifest = String::new();
    for class in &ds.classes {
        let name = class.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Dataset(format!("class name {:?} too long", class.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(class.examples.len() as u32).to_le_bytes());
        buf.push(ds.example_shape.len() as u8);
        for &d in &ds.example_shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for ex in &class.examples {
            for &v in ex {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        manifest.push_str(&class.name);
        manifest.push('\t');
        manifest.push_str(class.split.as_str());
        manifest.push('\n');
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());

    std::fs::write(path, &buf)?;
    std::fs::write(sidecar_path(path), manifest)?;
    Ok(())
}

/// Reads a dataset saved by [`save_fsds`], verifying structure, checksum,
/// and the split sidecar.
pub fn load_fsds(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut cur = Cursor::new(&bytes);

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected \"FSDS\""),
        });
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let flags = cur.u16("flags")?;
    if flags != 0 {
        return Err(Error::Format { offset: 6, msg: format!("unknown flags {flags:#06x}") });
    }
    let class_count = cur.u32("class count")?;
    if class_count == 0 {
        return Err(Error::Format { offset: 8, msg: "file contains no classes".to_string() });
    }

    let mut example_shape: Option<Vec<usize>> = None;
    let mut classes = Vec::with_capacity(class_count as usize);
    for id in 0..class_count {
        let name_len = cur.u16("class name length")? as usize;
        let name_off = cur.off;
        let name = String::from_utf8(cur.take(name_len, "class name")?.to_vec()).map_err(|e| {
            Error::Format { offset: name_off as u64, msg: format!("class name is not UTF-8: {e}") }
        })?;
        let sample_count = cur.u32("sample count")? as usize;
        let rank = cur.u8("rank")? as usize;
        let dims_off = cur.off;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        match &example_shape {
            None => example_shape = Some(dims.clone()),
            Some(shape) if *shape != dims => {
                return Err(Error::Format {
                    offset: dims_off as u64,
                    msg: format!("class {name:?} has shape {dims:?}, file started with {shape:?}"),
                });
            }
            Some(_) => {}
        }
        let example_len: usize = dims.iter().product();
        let mut examples = Vec::with_capacity(sample_count);
        for _ in 0..sample_count {
            let raw = cur.take(4 * example_len, "sample payload")?;
            let ex: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            examples.push(ex);
        }
        classes.push(ClassRecord { id, name, split: Split::Train, examples });
    }

    let crc_off = cur.off;
    let stored = cur.u32("checksum")?;
    if cur.off != bytes.len() {
        return Err(Error::Format {
            offset: cur.off as u64,
            msg: format!("{} unexpected trailing bytes", bytes.len() - cur.off),
        });
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..crc_off]);
    let computed = hasher.finalize();
    if computed != stored {
        return Err(Error::Format {
            offset: crc_off as u64,
            msg: format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        });
    }

    let sp = sidecar_path(path);
    let manifest = std::fs::read_to_string(&sp)
        .map_err(|e| Error::Dataset(format!("cannot read split manifest {}: {e}", sp.display())))?;
    let mut splits: HashMap<&str, Split> = HashMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, tag) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!(
                "split manifest line {}: expected class_name<TAB>split",
                lineno + 1
            ))
        })?;
        let split = tag.parse::<Split>().map_err(|_| {
            Error::Dataset(format!("split manifest line {}: unknown split {tag:?}", lineno + 1))
        })?;
        splits.insert(name, split);
    }
    for class in &mut classes {
        class.split = *splits.get(class.name.as_str()).ok_or_else(|| {
            Error::Dataset(format!("class {:?} missing from split manifest", class.name))
        })?;
    }

    let ds = Dataset { example_shape: example_shape.unwrap(), classes };
    ds.validate()?;
    Ok(ds)
}
