//! The `.vten` binary tensor format.
//!
//! Layout: magic bytes `VTEN`, `u8` version (= 1), `u8` dtype (0 = f32,
//! 1 = f64), `u8` rank, then `rank` little-endian `u64` extents, then the raw
//! little-endian scalar data. Round-trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u8 = 1;

pub fn write_vten<E: Scalar, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, E::DTYPE as u8, t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    Ok(())
}

pub fn read_vten<E: Scalar, R: Read>(r: &mut R) -> Result<Tensor<E>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a .vten stream".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported .vten version {}", head[4])));
    }
    let dtype = Dtype::from_tag(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", head[5])))?;
    if dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: stream holds {dtype:?}, requested {:?}",
            E::DTYPE
        )));
    }
    let rank = head[6] as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensor in .vten stream".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut ext)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let n = crate::tensor::checked_numel(&shape)?;
    let mut bytes = vec![0u8; n * E::WIDTH];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(E::WIDTH).map(E::from_le_slice).collect();
    Tensor::from_vec(&shape, data)
}

pub fn save<E: Scalar>(path: &std::path::Path, t: &Tensor<E>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_vten(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load<E: Scalar>(path: &std::path::Path) -> Result<Tensor<E>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_vten(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_f32() {
        let t = Tensor::from_vec(
            &[2, 3],
            vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.25e-12, 7.0, -123.456],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_vten(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(buf[5], 0); // f32 tag
        let back: Tensor<f32> = read_vten(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_f64() {
        let t = Tensor::from_vec(&[4], vec![f64::EPSILON, -1.5, 0.1, 9.9e300]).unwrap();
        let mut buf = Vec::new();
        write_vten(&mut buf, &t).unwrap();
        assert_eq!(buf[5], 1); // f64 tag
        let back: Tensor<f64> = read_vten(&mut buf.as_slice()).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic_and_dtype() {
        let t = Tensor::from_vec(&[1], vec![1.0f32]).unwrap();
        let mut buf = Vec::new();
        write_vten(&mut buf, &t).unwrap();
        assert!(read_vten::<f64, _>(&mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(read_vten::<f32, _>(&mut buf.as_slice()).is_err());
    }
}
