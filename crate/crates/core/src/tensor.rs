//! Dense rank-1..4 tensors and the `MSHT` binary record format.

use std::fmt::Debug;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
///
/// Training runs in `f32`; finite-difference gradient checks run the same
/// code paths in `f64`.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Default
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
    + std::ops::Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Largest representable value strictly below 1.
    fn below_one() -> Self;
    /// Smallest positive normal value.
    fn above_zero() -> Self;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn below_one() -> Self {
        1.0 - f32::EPSILON / 2.0
    }
    fn above_zero() -> Self {
        f32::MIN_POSITIVE
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn below_one() -> Self {
        1.0 - f64::EPSILON / 2.0
    }
    fn above_zero() -> Self {
        f64::MIN_POSITIVE
    }
}

pub const TENSOR_MAGIC: &[u8; 4] = b"MSHT";
pub const TENSOR_VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        validate_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        validate_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `[C, H, W]`, treating lower ranks as
    /// having leading extents of 1.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [w] => (1, 1, *w),
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            [n, c, h, w] => (n * c, *h, *w),
            _ => unreachable!("rank validated at construction"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Channel plane `c` of a `[C, H, W]` view.
    pub fn plane(&self, c: usize) -> &[T] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| T::from_f64(v.to_f64() * s))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let (_, h, w) = first.chw();
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw();
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch {}x{} vs {}x{}",
                    ph, pw, h, w
                )));
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[channels, h, w], data)
    }
}

impl Tensor<f32> {
    /// Writes one `MSHT` record.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[TENSOR_VERSION, self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one `MSHT` record.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {:?}", magic)));
        }
        let mut head = [0u8; 2];
        read_exact(r, &mut head)?;
        if head[0] != TENSOR_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor version {}",
                head[0]
            )));
        }
        let rank = head[1] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("bad tensor rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        validate_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor record",
                cursor.len()
            )));
        }
        Ok(t)
    }
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated record".into()),
        _ => Error::Io(e),
    })
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank must be 1..={}, got {}",
            MAX_RANK,
            shape.len()
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape(format!("zero extent in shape {:?}", shape)));
    }
    Ok(())
}
