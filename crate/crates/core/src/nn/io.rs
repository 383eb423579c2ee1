//! Checkpoint container: parameters (with optimizer state) for one or more
//! named networks plus a curriculum stage tag. Values are stored as raw f64
//! bits so a reload reproduces bit-identical forward outputs.

use super::layers::Param;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SMCKPT01";

pub struct CheckpointWriter {
    inner: BufWriter<File>,
}

impl CheckpointWriter {
    pub fn create(path: impl AsRef<Path>, stage_tag: &str) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = CheckpointWriter {
            inner: BufWriter::new(file),
        };
        w.inner.write_all(MAGIC).map_err(wrap)?;
        write_str(&mut w.inner, stage_tag)?;
        Ok(w)
    }

    pub fn write_network<S: Scalar>(&mut self, name: &str, params: &[&Param<S>]) -> Result<()> {
        write_str(&mut self.inner, name)?;
        self.inner
            .write_u32::<LittleEndian>(params.len() as u32)
            .map_err(wrap)?;
        for p in params {
            write_str(&mut self.inner, &p.name)?;
            for arr in [&p.value, &p.m, &p.v] {
                self.inner
                    .write_u32::<LittleEndian>(arr.nrows() as u32)
                    .map_err(wrap)?;
                self.inner
                    .write_u32::<LittleEndian>(arr.ncols() as u32)
                    .map_err(wrap)?;
                for v in arr.iter() {
                    self.inner
                        .write_f64::<LittleEndian>(v.to_f64_())
                        .map_err(wrap)?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(wrap)
    }
}

fn wrap(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32).map_err(wrap)?;
    w.write_all(s.as_bytes()).map_err(wrap)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(wrap)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("corrupt string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(wrap)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub struct CheckpointReader {
    inner: BufReader<File>,
    pub stage_tag: String,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut inner = BufReader::new(file);
        let mut magic = [0u8; 8];
        inner.read_exact(&mut magic).map_err(wrap)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let stage_tag = read_str(&mut inner)?;
        Ok(CheckpointReader { inner, stage_tag })
    }

    /// Read the next network section into existing params (matched by name).
    pub fn read_network<S: Scalar>(
        &mut self,
        expected: &str,
        params: &mut [&mut Param<S>],
    ) -> Result<()> {
        let name = read_str(&mut self.inner)?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "expected network {expected:?}, found {name:?}"
            )));
        }
        let count = self.inner.read_u32::<LittleEndian>().map_err(wrap)? as usize;
        if count != params.len() {
            return Err(Error::Checkpoint(format!(
                "{expected}: parameter count mismatch ({count} stored, {} live)",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let pname = read_str(&mut self.inner)?;
            if pname != p.name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: stored {pname:?}, live {:?}",
                    p.name
                )));
            }
            let mut arrays: Vec<Array2<S>> = Vec::with_capacity(3);
            for _ in 0..3 {
                let rows = self.inner.read_u32::<LittleEndian>().map_err(wrap)? as usize;
                let cols = self.inner.read_u32::<LittleEndian>().map_err(wrap)? as usize;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    data.push(S::from_f64_(
                        self.inner.read_f64::<LittleEndian>().map_err(wrap)?,
                    ));
                }
                arrays.push(
                    Array2::from_shape_vec((rows, cols), data)
                        .map_err(|e| Error::Checkpoint(e.to_string()))?,
                );
            }
            p.v = arrays.pop().unwrap();
            p.m = arrays.pop().unwrap();
            p.value = arrays.pop().unwrap();
            p.grad = Array2::zeros(p.value.raw_dim());
        }
        Ok(())
    }
}

/// Atomic write: serialize into a temp file then rename into place.
pub fn atomic_checkpoint<F>(path: impl AsRef<Path>, stage_tag: &str, write: F) -> Result<()>
where
    F: FnOnce(&mut CheckpointWriter) -> Result<()>,
{
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut w = CheckpointWriter::create(&tmp, stage_tag)?;
    write(&mut w)?;
    w.finish()?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut p = Param::<f32>::new(
            "w",
            Array2::from_shape_fn((3, 4), |(r, c)| (r as f32 * 1.7 + c as f32).sin()),
        );
        p.m.fill(0.25);
        p.v.fill(0.5);
        atomic_checkpoint(&path, "stage-x", |w| w.write_network("net", &[&p])).unwrap();

        let mut q = Param::<f32>::new("w", Array2::zeros((3, 4)));
        let mut r = CheckpointReader::open(&path).unwrap();
        assert_eq!(r.stage_tag, "stage-x");
        r.read_network("net", &mut [&mut q]).unwrap();
        assert_eq!(p.value, q.value);
        assert_eq!(p.m, q.m);
        assert_eq!(p.v, q.v);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"garbage data").unwrap();
        assert!(CheckpointReader::open(&path).is_err());
    }
}
