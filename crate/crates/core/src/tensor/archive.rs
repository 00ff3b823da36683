//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "INNT"  version:u32  count:u32
//! count x { name_len:u16  name:utf8  rank:u8  dims:u64[rank]  values:f32[prod(dims)] }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"INNT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor::new(
            name,
            t.shape().to_vec(),
            t.data().iter().map(|v| v.f64() as f32).collect(),
        )
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(self.data.iter().map(|&v| T::of(v as f64)).collect(), &self.shape)
    }

    /// Stores raw bytes one per value; every byte is exact in `f32`.
    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        NamedTensor::new(name, vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("{}: value {v} is not a byte", self.name)))
                }
            })
            .collect()
    }
}

pub fn write_archive_to<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    let io = |e| Error::Format(format!("write failed: {e}"));
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for t in tensors {
        if numel(&t.shape) != t.data.len() {
            return Err(Error::Format(format!(
                "{}: shape {:?} does not match {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| Error::Format(format!("{}: rank too large", t.name)))?;
        w.write_all(&name_len.to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_archive_from<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated archive: {e}")))?;
        Ok(b)
    }
    if &take::<_, 4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic, expected INNT".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = take::<_, 1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&mut r)?);
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("{name}: dim {d}")))?);
        }
        let n = numel(&shape);
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("{name}: truncated data: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn write_archive(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_archive_to(BufWriter::new(f), tensors)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_archive_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_archive_to(&mut buf, &[NamedTensor::new("w", vec![2], vec![1.0, -2.5])]).unwrap();
        assert_eq!(&buf[..4], b"INNT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..14], &1u16.to_le_bytes());
        assert_eq!(buf[14], b'w');
        assert_eq!(buf[15], 1);
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&buf[28..32], &(-2.5f32).to_le_bytes());
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_archive_from(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_archive_to(&mut buf, &[NamedTensor::new("w", vec![3], vec![1.0; 3])]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_archive_from(&buf[..]).is_err());
    }

    #[test]
    fn byte_payloads() {
        let t = NamedTensor::from_bytes("meta", "héllo {}".as_bytes());
        assert_eq!(t.to_bytes().unwrap(), "héllo {}".as_bytes());
        assert!(NamedTensor::new("x", vec![1], vec![0.5]).to_bytes().is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            tensors in prop::collection::vec(
                ("[a-z._0-9]{1,12}", prop::collection::vec(1usize..4, 0..4))
                    .prop_flat_map(|(name, shape)| {
                        let n: usize = shape.iter().product();
                        (Just(name), Just(shape), prop::collection::vec(any::<f32>(), n))
                    }),
                0..5,
            )
        ) {
            let tensors: Vec<NamedTensor> = tensors
                .into_iter()
                .map(|(n, s, d)| NamedTensor::new(n, s, d))
                .collect();
            let mut buf = Vec::new();
            write_archive_to(&mut buf, &tensors).unwrap();
            let back = read_archive_from(&buf[..]).unwrap();
            let mut again = Vec::new();
            write_archive_to(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
            for (a, b) in tensors.iter().zip(&back) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
