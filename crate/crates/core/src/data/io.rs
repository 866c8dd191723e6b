//! Dataset files.
//!
//! Layout (little-endian): magic `CSDS`, `u32` version, `u32` train count,
//! `u32` validation count, `u32` H, `u32` W, `u32` C, `f64` colour overlap,
//! then one record per sample: `u32` id, `u8` flags (bit 0 labelled,
//! bit 1 validation), the image as a tensor file and `H·W` class bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClassMap, Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor, DType};
use crate::tensor::TensorError;

pub const DATASET_MAGIC: &[u8; 4] = b"CSDS";
pub const DATASET_VERSION: u32 = 1;

const LABELLED: u8 = 1;
const VALIDATION: u8 = 2;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} exceeds u32")))
}

pub fn write_dataset<W: Write>(w: &mut W, d: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    for (v, what) in [
        (DATASET_VERSION as usize, "version"),
        (d.train.len(), "train count"),
        (d.val.len(), "validation count"),
        (d.height, "height"),
        (d.width, "width"),
        (d.classes, "classes"),
    ] {
        w.write_all(&u32_of(v, what)?.to_le_bytes())?;
    }
    w.write_all(&d.overlap.to_le_bytes())?;
    let records = d.train.iter().map(|s| (s, 0)).chain(d.val.iter().map(|s| (s, VALIDATION)));
    for (s, role) in records {
        if s.image.shape() != [3, d.height, d.width] || s.class_map.classes.len() != d.height * d.width {
            return Err(Error::Data(format!("sample {} does not match the dataset geometry", s.id)));
        }
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[role | if s.labelled { LABELLED } else { 0 }])?;
        write_tensor(w, &s.image, DType::F64)?;
        w.write_all(&s.class_map.classes)?;
    }
    Ok(())
}

fn read_bytes<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data(format!("truncated while reading {what}"))
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, what)?))
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let magic: [u8; 4] = read_bytes(r, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Data(format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let train_count = read_u32(r, "train count")? as usize;
    let val_count = read_u32(r, "validation count")? as usize;
    let height = read_u32(r, "height")? as usize;
    let width = read_u32(r, "width")? as usize;
    let classes = read_u32(r, "classes")? as usize;
    let overlap = f64::from_le_bytes(read_bytes(r, "overlap")?);
    if classes == 0 || classes > 256 {
        return Err(Error::Data(format!("class count {classes} out of range")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for n in 0..train_count + val_count {
        let id = read_u32(r, "sample id")?;
        let [flags] = read_bytes(r, "sample flags")?;
        let image = read_tensor(r).map_err(|e| match e {
            TensorError::Format(m) => Error::Data(format!("sample {id}: {m}")),
            e => e.into(),
        })?;
        if image.shape() != [3, height, width] {
            return Err(Error::Data(format!(
                "sample {id} image has shape {:?}, header says [3, {height}, {width}]",
                image.shape()
            )));
        }
        let mut plane = vec![0u8; height * width];
        r.read_exact(&mut plane).map_err(|e| truncated(e, "class map"))?;
        if let Some(&c) = plane.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::Data(format!("sample {id} has class {c} >= {classes}")));
        }
        let is_val = flags & VALIDATION != 0;
        if is_val != (n >= train_count) {
            return Err(Error::Data(format!("sample {id} is out of order")));
        }
        let sample = Sample {
            id,
            image,
            class_map: ClassMap::new(height, width, plane)?,
            labelled: flags & LABELLED != 0,
        };
        if is_val { val.push(sample) } else { train.push(sample) }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Data("trailing bytes after the last sample".into()));
    }
    Ok(Dataset {
        height,
        width,
        classes,
        overlap,
        train,
        val,
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, d)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}
