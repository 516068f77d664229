//! Flat binary checkpoint: magic `CPKT1`, u32 version, u64 tensor count, then
//! per tensor a u64 name length, UTF-8 name, u64 rank, u64 extents and f64
//! data. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CPKT1";
const VERSION: u32 = 1;
const MAX_RANK: u64 = 8;

pub fn write_checkpoint<W: Write>(params: &ParamSet, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a checkpoint stream. `origin` only labels errors.
pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<ParamSet> {
    let io = |e| Error::io(origin, e);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(origin, "not a CPKT1 checkpoint"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb).map_err(io)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r).map_err(io)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r).map_err(io)?;
        if name_len > 4096 {
            return Err(Error::format(origin, "tensor name too long"));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?;
        let rank = read_u64(&mut r).map_err(io)?;
        if rank > MAX_RANK {
            return Err(Error::format(origin, format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(n) = n.filter(|&n| n <= 1 << 28) else {
            return Err(Error::format(origin, format!("tensor `{name}` is implausibly large")));
        };
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if params.index_of(&name).is_some() {
            return Err(Error::format(origin, format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("conv.w", Tensor::from_fn([2, 1, 3, 3], |i| (i as f64).sin() * 1e-3));
        p.insert("bias", Tensor::new([2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        p.insert("scalar", Tensor::scalar(std::f64::consts::PI));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"CPKT1");
        let q = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(p.names(), q.names());
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        for cut in [3, 12, 30, buf.len() - 1] {
            assert!(read_checkpoint(&buf[..cut], Path::new("cut")).is_err());
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = read_checkpoint(&b"NOPE1\x01\0\0\0"[..], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
