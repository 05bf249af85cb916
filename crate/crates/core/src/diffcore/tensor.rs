use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const WMT1_MAGIC: &[u8; 4] = b"WMT1";

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external input. Rejects shape/length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {n} entries, data has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "entry {i} is not finite ({})",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op results; finiteness is checked by the caller
    /// where it matters.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor with a single row.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Writes the WMT1 encoding: magic, rank (u64 LE), dims (u64 LE), then the
    /// entries as f64 LE.
    pub fn write_wmt1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(WMT1_MAGIC)?;
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_wmt1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * (self.shape.len() + self.data.len()));
        self.write_wmt1(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_wmt1<R: Read>(mut r: R) -> Result<Tensor> {
        let bad = |reason: &str| Error::Format {
            path: "<stream>".into(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WMT1_MAGIC {
            return Err(bad("missing WMT1 magic"));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word) as usize;
        if rank > 8 {
            return Err(bad("rank larger than 8"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension overflow"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![], vec![2.0]).is_ok());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let bytes = t.to_wmt1_bytes();
        assert_eq!(&bytes[..4], b"WMT1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[36..44].try_into().unwrap()), -2.0);
        assert_eq!(bytes.len(), 44);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let bytes = Tensor::vector(vec![1.0, 2.0]).to_wmt1_bytes();
        assert!(Tensor::read_wmt1(&bytes[..bytes.len() - 1]).is_err());
        assert!(Tensor::read_wmt1(&b"WMT2\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn wmt1_roundtrip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin() * 1e3).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::read_wmt1(t.to_wmt1_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
