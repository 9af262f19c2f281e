//! Dense row-major tensors and the numeric kernels the segmentation network
//! is built from.
//!
//! Feature maps use `N x C x H x W` layout. Every kernel in [`kernels`] has a
//! matching backward function; the autodiff graph in [`crate::autodiff`]
//! wires them together.

pub mod kernels;

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Storage tag used by the tensor container format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Floating point element type usable in tensors: `f32` for training,
/// `f64` for gradient verification.
pub trait Element:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a * b (+ c if accumulate)` for an `m x k` by `k x n` product,
    /// each operand described by row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Runs `f` on two per-thread scratch buffers of the given lengths.
    /// Their contents on entry are unspecified.
    fn with_scratch<R>(len_a: usize, len_b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R;

    fn to_le_bytes_vec(data: &[Self], out: &mut Vec<u8>);

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

fn gemm_bounds(
    (m, k, n): (usize, usize, usize),
    a: (usize, usize, usize),
    b: (usize, usize, usize),
    c: (usize, usize, usize),
) {
    let need = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(need(m, k, a.1, a.2) <= a.0, "gemm: lhs out of bounds");
    assert!(need(k, n, b.1, b.2) <= b.0, "gemm: rhs out of bounds");
    assert!(need(m, n, c.1, c.2) <= c.0, "gemm: output out of bounds");
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Element for $ty {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
                accumulate: bool,
            ) {
                gemm_bounds(
                    (m, k, n),
                    (a.len(), rsa, csa),
                    (b.len(), rsb, csb),
                    (c.len(), rsc, csc),
                );
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the bounds of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn with_scratch<R>(
                len_a: usize,
                len_b: usize,
                f: impl FnOnce(&mut [Self], &mut [Self]) -> R,
            ) -> R {
                thread_local! {
                    static SCRATCH: std::cell::RefCell<(Vec<$ty>, Vec<$ty>)> =
                        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
                }
                // taken out rather than borrowed, so nested calls get fresh buffers
                let (mut a, mut b) = SCRATCH.with(|s| s.take());
                if a.len() < len_a {
                    a.resize(len_a, 0.0);
                }
                if b.len() < len_b {
                    b.resize(len_b, 0.0);
                }
                let out = f(&mut a[..len_a], &mut b[..len_b]);
                SCRATCH.with(|s| s.replace((a, b)));
                out
            }

            fn to_le_bytes_vec(data: &[Self], out: &mut Vec<u8>) {
                out.reserve(data.len() * std::mem::size_of::<Self>());
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
                const N: usize = std::mem::size_of::<$ty>();
                bytes
                    .chunks_exact(N)
                    .map(|c| <$ty>::from_le_bytes(c.try_into().expect("chunk size")))
                    .collect()
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense tensor with row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(PREVIEW)])
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Reinterprets the flat data under a new shape with the same element count.
    pub fn reshape(&self, new_shape: impl Into<Vec<usize>>) -> Result<Self> {
        let new_shape = new_shape.into();
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, new_shape),
            ));
        }
        Ok(Self {
            shape: new_shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Splits a 4-D shape into `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected a 4-D N x C x H x W tensor, got {:?}", self.shape),
            )),
        }
    }

    /// Element at a multi-dimensional index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                assert!(i < extent, "index {i} out of range for extent {extent}");
                acc * extent + i
            })
    }
}
