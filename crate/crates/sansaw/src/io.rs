//! Binary tensor and checkpoint formats.
//!
//! Tensor dump ("SAWT"): magic `SAWT`, version `u32 = 1`, `ndim u32`, the
//! dims as `u32`, then the payload as 32-bit IEEE-754, all little-endian,
//! row-major. Checkpoints ("SAWM") are a version header followed by named
//! tensor records: name length `u32`, name bytes, then a SAWT blob.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"SAWT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"SAWM";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Write a tensor as a SAWT blob. Values are stored as f32 regardless of the
/// in-memory element type.
pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let ctx = "writing SAWT blob";
    let mut go = || -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, t.dims().len() as u32)?;
        for &d in t.dims() {
            write_u32(w, d as u32)?;
        }
        for &v in t.data() {
            w.write_all(&(v.into_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    };
    go().map_err(|e| Error::io(ctx, e))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io("reading SAWT magic", e))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {magic:?}, expected SAWT"
        )));
    }
    let version = read_u32(r).map_err(|e| Error::io("reading SAWT version", e))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SAWT version {version}")));
    }
    let ndim = read_u32(r).map_err(|e| Error::io("reading SAWT ndim", e))? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::Format(format!("SAWT rank {ndim} out of range")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r).map_err(|e| Error::io("reading SAWT dims", e))? as usize);
    }
    let len: usize = dims.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::io("reading SAWT payload", e))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t)?;
    w.flush()
        .map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_tensor(&mut BufReader::new(file))
}

/// An ordered collection of named tensors, serialized as a SAWM file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), t.to_f32()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor `{name}`")))
    }

    /// Scalar convenience for metadata entries stored as 1-element tensors.
    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.require(name)?.data()[0] as f64)
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(
            name,
            &Tensor::<f32>::from_vec(&[1], vec![v as f32]).expect("scalar tensor"),
        );
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)
            .and_then(|_| write_u32(&mut w, VERSION))
            .map_err(|e| Error::io("writing SAWM header", e))?;
        for (name, tensor) in &self.entries {
            write_u32(&mut w, name.len() as u32)
                .and_then(|_| w.write_all(name.as_bytes()))
                .map_err(|e| Error::io("writing SAWM record name", e))?;
            write_tensor(&mut w, tensor)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("flushing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file =
            File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::io("reading SAWM magic", e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected SAWM"
            )));
        }
        let version = read_u32(&mut r).map_err(|e| Error::io("reading SAWM version", e))?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SAWM version {version}")));
        }
        let mut entries = Vec::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(Error::io("reading SAWM record", e)),
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| Error::io("reading SAWM record name", e))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-utf8 tensor name in checkpoint".into()))?;
            entries.push((name, read_tensor(&mut r)?));
        }
        Ok(Checkpoint { entries })
    }
}
