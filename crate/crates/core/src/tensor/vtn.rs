//! `VTN1` array files: the magic bytes `VTN1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the row-major `f64` payload in
//! little-endian order. Several arrays may be concatenated in one stream.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTN1";

pub fn write<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad VTN1 magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; 8 * numel];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn save(path: impl AsRef<std::path::Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = to_bytes(&t);
        let mut expected = b"VTN1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read(&mut &b"VTN2\0\0\0\0"[..]).is_err());
        let bytes = to_bytes(&Tensor::ones(vec![3]));
        assert!(read(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut bytes = to_bytes(&t);
            bytes.extend(to_bytes(&t));
            let mut r = bytes.as_slice();
            prop_assert_eq!(read(&mut r).unwrap(), t.clone());
            prop_assert_eq!(read(&mut r).unwrap(), t);
        }
    }
}
