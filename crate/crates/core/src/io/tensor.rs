//! TEN1 tensor files.
//!
//! Layout: magic `54 45 4E 31`, a `u8` dtype (0 = f32), a `u8` rank, `rank`
//! little-endian `u32` dims, then the row-major little-endian f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TEN1";
const DTYPE_F32: u8 = 0;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_array2(a: &Array2<f32>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_arrayd(a: &ArrayD<f32>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array2(self) -> Result<Array2<f32>> {
        if self.dims.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn into_arrayd(self) -> Result<ArrayD<f32>> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    /// Number of bytes [`Tensor::write`] produces.
    pub fn encoded_len(&self) -> usize {
        4 + 2 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::BadTensor(format!("rank {} too large", self.dims.len())));
        }
        w.write_all(&MAGIC)?;
        w.write_all(&[DTYPE_F32, self.dims.len() as u8])?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::BadTensor(format!("dim {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head).map_err(truncated)?;
        if head[..4] != MAGIC {
            return Err(Error::BadTensor("missing TEN1 magic".into()));
        }
        if head[4] != DTYPE_F32 {
            return Err(Error::BadTensor(format!("unsupported dtype {}", head[4])));
        }
        let rank = head[5] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(truncated)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadTensor(format!("dims {dims:?} overflow")))?;
        let mut bytes = vec![0u8; count.checked_mul(4).ok_or_else(|| Error::BadTensor("payload too large".into()))?];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::BadTensor("truncated tensor".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], &[0x54, 0x45, 0x4E, 0x31]);
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&b[18..22], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), t.encoded_len());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let mut b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        b.truncate(b.len() - 1);
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::BadTensor(_))));
        b[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::BadTensor(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
