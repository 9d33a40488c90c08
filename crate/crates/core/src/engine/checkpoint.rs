//! Checkpoint file format.
//!
//! Layout (little-endian throughout):
//!   magic "PMDCKPT1"
//!   u64 tensor count
//!   per tensor:
//!     u64 name length, UTF-8 name
//!     u8  partition label
//!     u64 rank, rank x u64 dims
//!     product(dims) x f64 payload
//!
//! The f64 payload round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::engine::params::{Param, ParamStore, Partition};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PMDCKPT1";
const MAGIC_PREFIX: &[u8; 7] = b"PMDCKPT";

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, param) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[param.partition.as_byte()])?;
        w.write_all(&(param.dims.len() as u64).to_le_bytes())?;
        for &d in &param.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &param.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(
        File::open(path).map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?,
    );
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if magic != *MAGIC {
        if magic[..7] == *MAGIC_PREFIX {
            return Err(Error::CheckpointVersion {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        return Err(Error::Corrupt("bad checkpoint magic".into()));
    }
    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Corrupt(format!("tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let mut pbyte = [0u8; 1];
        read_exact(&mut r, &mut pbyte)?;
        let partition = Partition::from_byte(pbyte[0])?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(Error::Corrupt(format!("tensor of {len} elements")));
        }
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(&mut r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.insert(name, Param::new(dims, data, partition));
    }
    Ok(store)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt("unexpected end of file".into()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
