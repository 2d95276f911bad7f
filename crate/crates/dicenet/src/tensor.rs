use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{shape_err, Result};

/// Scalar type the engine runs on. Training uses `f32`; gradient checks
/// instantiate the same kernels at `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + 'static {
    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of a batch x channel x depth x height x width tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape5 {
    pub const fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            depth,
            height,
            width,
        }
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.channels, self.depth, self.height, self.width]
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x{}",
            self.batch, self.channels, self.depth, self.height, self.width
        )
    }
}

/// Dense 5D tensor, width fastest. The gradient slot is filled by
/// [`crate::Graph::backward`] for nodes that receive one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T: Real = f32> {
    shape: Shape5,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape5, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return shape_err("tensor", format!("{} values for shape {shape}", data.len()));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err("tensor", "gradient length differs from value length");
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index of (b, c, z, y, x).
    #[inline]
    pub fn index(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((b * s.channels + c) * s.depth + z) * s.height + y) * s.width + x
    }

    pub fn get(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, z, y, x)]
    }

    /// Slice of one (batch, channel) volume.
    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.spatial();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }
}
