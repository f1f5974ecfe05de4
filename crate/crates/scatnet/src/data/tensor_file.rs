//! Binary tensor files.
//!
//! Layout: magic "STNS", version u16 LE, dtype u8 (0 = real32, 1 = real64),
//! rank u8 (at least 1), rank x u32 LE extents, then the payload row-major
//! little-endian. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DynTensor, Real, Tensor};

const MAGIC: &[u8; 4] = b"STNS";
const VERSION: u16 = 1;

pub fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    if t.dims().is_empty() {
        return Err(Error::Format("rank must be at least 1".into()));
    }
    if t.dims().len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.dims().len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE_CODE, t.dims().len() as u8])?;
    for &d in t.dims() {
        if d > u32::MAX as usize {
            return Err(Error::Format(format!("extent {d} exceeds u32")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match T::DTYPE_CODE {
        0 => {
            for v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        _ => {
            for v in t.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<DynTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2).map_err(|_| Error::Format("truncated header".into()))?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf2).map_err(|_| Error::Format("truncated header".into()))?;
    let (dtype, rank) = (buf2[0], buf2[1] as usize);
    if rank == 0 {
        return Err(Error::Format("rank must be at least 1".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| Error::Format("truncated dims".into()))?;
        dims.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = dims.iter().product();
    match dtype {
        0 => {
            let mut data = Vec::with_capacity(n);
            let mut b4 = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b4).map_err(|_| Error::Format("truncated payload".into()))?;
                data.push(f32::from_le_bytes(b4));
            }
            Ok(DynTensor::F32(Tensor::from_vec(&dims, data)?))
        }
        1 => {
            let mut data = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8).map_err(|_| Error::Format("truncated payload".into()))?;
                data.push(f64::from_le_bytes(b8));
            }
            Ok(DynTensor::F64(Tensor::from_vec(&dims, data)?))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_tensor_file<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_tensor(&mut w, t)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<DynTensor> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let t = read_tensor(&mut r)?;
    // trailing bytes mean the file does not match its header
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(t)
}
