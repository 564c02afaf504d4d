//! `DENC` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"DENC"
//! version  u32
//! count    u32
//! count × record:
//!     name_len u32, name (UTF-8)
//!     rank u32, dims u32 × rank
//!     values f32 × product(dims)
//! ```

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};

use super::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DENC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

pub fn write_checkpoint<W: Write>(params: &ParamSet<f32>, mut w: W) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<ParamSet<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME {
            return Err(bad(format!("parameter name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(bad(format!("rank {rank} too large for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        // Read in bounded chunks so a corrupt header cannot trigger a huge allocation.
        let mut data = Vec::new();
        let mut remaining = n;
        let mut buf = vec![0u8; 4 * 4096];
        while remaining > 0 {
            let take = remaining.min(4096);
            r.read_exact(&mut buf[..take * 4])?;
            data.extend(buf[..take * 4].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            remaining -= take;
        }
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        params.insert(name, t).map_err(|e| bad(e.to_string()))?;
    }
    Ok(params)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(params: &ParamSet<f32>) -> String {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::row(vec![0.1])).unwrap();
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p.names(), q.names());
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_and_corrupt_inputs_error() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        for cut in [0, 3, 8, 13, buf.len() - 1] {
            assert!(read_checkpoint(&buf[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());
        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(read_checkpoint(bad_version.as_slice()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let p = sample();
        let mut q = p.clone();
        q.get_mut("b").unwrap().data_mut()[0] = 0.2;
        assert_eq!(checkpoint_hash(&p), checkpoint_hash(&p.clone()));
        assert_ne!(checkpoint_hash(&p), checkpoint_hash(&q));
    }
}
