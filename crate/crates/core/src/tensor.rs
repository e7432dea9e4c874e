//! Dense 5-D tensor storage in (batch, channel, time, height, width) order.
//!
//! Buffers are contiguous and row-major: the flat index of (n, c, t, y, x) is
//! `(((n·C + c)·T + t)·H + y)·W + x`. Scalars are IEEE-754 `f32` or `f64`,
//! chosen per tensor via the [`Element`] type parameter. Values are finite
//! unless a caller explicitly opts out at a construction boundary.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Scalar width tag for I/O and dispatch.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    /// NPY dtype descriptor (little-endian IEEE float).
    pub fn npy_descr(self) -> &'static str {
        match self {
            ScalarWidth::F32 => "<f4",
            ScalarWidth::F64 => "<f8",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

impl std::fmt::Display for ScalarWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarWidth::F32 => write!(f, "f32"),
            ScalarWidth::F64 => write!(f, "f64"),
        }
    }
}

/// Tensor element scalar. Arithmetic inside operators runs in `f64`
/// regardless of the storage width; conversion happens at load/store.
pub trait Element: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const WIDTH: ScalarWidth;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_value(self) -> bool;
    fn append_le_bytes(self, out: &mut Vec<u8>);
    /// Reads one scalar from exactly `WIDTH.byte_width()` little-endian bytes.
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const WIDTH: ScalarWidth = ScalarWidth::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const WIDTH: ScalarWidth = ScalarWidth::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Shape of a 5-D tensor. Any zero dimension means an empty tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape5D {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5D {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape5D { n, c, t, h, w };
        shape.checked_len()?;
        Ok(shape)
    }

    /// Element count, rejecting products that overflow `usize`.
    pub fn checked_len(&self) -> Result<usize> {
        self.n
            .checked_mul(self.c)
            .and_then(|p| p.checked_mul(self.t))
            .and_then(|p| p.checked_mul(self.h))
            .and_then(|p| p.checked_mul(self.w))
            .ok_or_else(|| Error::Resource(format!("element count of {self:?} overflows usize")))
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of (n, c, t, y, x); row-major in that order.
    #[inline(always)]
    pub fn flat(&self, n: usize, c: usize, t: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && t < self.t && y < self.h && x < self.w);
        (((n * self.c + c) * self.t + t) * self.h + y) * self.w + x
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    /// Spatial extents (T, H, W).
    pub fn extents(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }
}

impl std::fmt::Display for Shape5D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{},{})", self.n, self.c, self.t, self.h, self.w)
    }
}

/// Fill rule for [`Tensor5D::new`].
#[derive(Clone, Copy, Debug)]
pub enum Fill {
    Value(f64),
    /// Normal(mean, stddev) samples drawn from a seeded generator.
    RandomNormal { seed: u64, mean: f64, stddev: f64 },
}

/// Dense 5-D tensor. Immutable once constructed except through the mutable
/// accessors used internally by operators.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor5D<E: Element> {
    shape: Shape5D,
    data: Vec<E>,
}

impl<E: Element> Tensor5D<E> {
    pub fn new(shape: Shape5D, fill: Fill) -> Result<Self> {
        let len = shape.checked_len()?;
        let mut data: Vec<E> = Vec::new();
        data.try_reserve_exact(len)
            .map_err(|_| Error::Resource(format!("allocation of {len} elements failed")))?;
        match fill {
            Fill::Value(v) => {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite fill value {v}")));
                }
                data.resize(len, E::from_f64(v));
            }
            Fill::RandomNormal { seed, mean, stddev } => {
                if stddev < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative stddev {stddev}")));
                }
                let normal = Normal::new(mean, stddev)
                    .map_err(|e| Error::InvalidArgument(format!("bad normal parameters: {e}")))?;
                let mut rng = StdRng::seed_from_u64(seed);
                data.extend((0..len).map(|_| E::from_f64(normal.sample(&mut rng))));
            }
        }
        Ok(Tensor5D { shape, data })
    }

    pub fn zeros(shape: Shape5D) -> Self {
        Tensor5D::new(shape, Fill::Value(0.0)).expect("zero fill cannot fail for a valid shape")
    }

    /// Builds a tensor from an existing buffer, requiring finite values.
    pub fn from_vec(shape: Shape5D, data: Vec<E>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite { index });
        }
        Self::from_vec_allow_non_finite(shape, data)
    }

    /// Same as [`Tensor5D::from_vec`] but skips the finite-only validation.
    /// Callers opt in explicitly; most of the crate assumes finite data.
    pub fn from_vec_allow_non_finite(shape: Shape5D, data: Vec<E>) -> Result<Self> {
        let len = shape.checked_len()?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "buffer has {} elements, shape {shape} needs {len}",
                data.len()
            )));
        }
        Ok(Tensor5D { shape, data })
    }

    pub fn shape(&self) -> Shape5D {
        self.shape
    }

    pub fn width(&self) -> ScalarWidth {
        E::WIDTH
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, t: usize, y: usize, x: usize) -> E {
        self.data[self.shape.flat(n, c, t, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, t: usize, y: usize, x: usize) -> &mut E {
        let i = self.shape.flat(n, c, t, y, x);
        &mut self.data[i]
    }

    /// Contiguous (T,H,W) slice for one (sample, channel) pair.
    pub fn channel(&self, n: usize, c: usize) -> &[E] {
        let vol = self.shape.t * self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * vol;
        &self.data[start..start + vol]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [E] {
        let vol = self.shape.t * self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * vol;
        &mut self.data[start..start + vol]
    }

    /// Lossy width conversion (exact when widening).
    pub fn cast<T: Element>(&self) -> Tensor5D<T> {
        Tensor5D {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| v.to_f64())
    }
}

/// Width-erased tensor, used at I/O boundaries where the dtype comes from a
/// file rather than from the type system.
#[derive(Clone, Debug)]
pub enum DynTensor {
    F32(Tensor5D<f32>),
    F64(Tensor5D<f64>),
}

impl DynTensor {
    pub fn shape(&self) -> Shape5D {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn width(&self) -> ScalarWidth {
        match self {
            DynTensor::F32(_) => ScalarWidth::F32,
            DynTensor::F64(_) => ScalarWidth::F64,
        }
    }

    /// Converts to `f64` storage (exact).
    pub fn into_f64(self) -> Tensor5D<f64> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t,
        }
    }
}

/// Convolution kernel weights (c_out, c_in, k_t, k_h, k_w) with optional
/// per-out-channel bias. Kernel extents must be odd so the grid has a center.
#[derive(Clone, PartialEq, Debug)]
pub struct KernelWeights<E: Element> {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: (usize, usize, usize),
    weights: Vec<E>,
    bias: Option<Vec<E>>,
}

impl<E: Element> KernelWeights<E> {
    pub fn new(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize, usize),
        weights: Vec<E>,
        bias: Option<Vec<E>>,
    ) -> Result<Self> {
        let (kt, kh, kw) = kernel;
        if c_out == 0 || c_in == 0 {
            return Err(Error::InvalidArgument("kernel needs c_out ≥ 1 and c_in ≥ 1".into()));
        }
        for k in [kt, kh, kw] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "kernel extents must be odd and ≥ 1, got {kernel:?}"
                )));
            }
        }
        let len = c_out * c_in * kt * kh * kw;
        if weights.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "weight buffer has {} elements, kernel ({c_out},{c_in},{kt},{kh},{kw}) needs {len}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} entries, expected c_out = {c_out}",
                    b.len()
                )));
            }
        }
        if let Some(index) = weights.iter().position(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite { index });
        }
        Ok(KernelWeights { c_out, c_in, kernel, weights, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, kernel: (usize, usize, usize), bias: bool) -> Result<Self> {
        let len = c_out * c_in * kernel.0 * kernel.1 * kernel.2;
        Self::new(
            c_out,
            c_in,
            kernel,
            vec![E::from_f64(0.0); len],
            bias.then(|| vec![E::from_f64(0.0); c_out]),
        )
    }

    /// Deterministic Normal(mean, stddev) weights, zero bias if requested.
    pub fn random(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize, usize),
        bias: bool,
        seed: u64,
        stddev: f64,
    ) -> Result<Self> {
        let len = c_out * c_in * kernel.0 * kernel.1 * kernel.2;
        let normal = Normal::new(0.0, stddev)
            .map_err(|e| Error::InvalidArgument(format!("bad normal parameters: {e}")))?;
        let mut rng = StdRng::seed_from_u64(seed);
        let weights = (0..len).map(|_| E::from_f64(normal.sample(&mut rng))).collect();
        Self::new(c_out, c_in, kernel, weights, bias.then(|| vec![E::from_f64(0.0); c_out]))
    }

    /// Kernel point count K = k_t·k_h·k_w.
    pub fn num_points(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    #[inline(always)]
    pub fn weights(&self) -> &[E] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [E] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[E]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [E]> {
        self.bias.as_deref_mut()
    }

    /// Flat index of (co, ci, kt, ky, kx).
    #[inline(always)]
    pub fn flat(&self, co: usize, ci: usize, kt: usize, ky: usize, kx: usize) -> usize {
        let (t, h, w) = self.kernel;
        debug_assert!(co < self.c_out && ci < self.c_in && kt < t && ky < h && kx < w);
        (((co * self.c_in + ci) * t + kt) * h + ky) * w + kx
    }

    /// Contiguous weight row for one output channel: layout (c_in, K).
    #[inline(always)]
    pub fn out_channel_row(&self, co: usize) -> &[E] {
        let row = self.c_in * self.num_points();
        &self.weights[co * row..(co + 1) * row]
    }

    pub fn cast<T: Element>(&self) -> KernelWeights<T> {
        KernelWeights {
            c_out: self.c_out,
            c_in: self.c_in,
            kernel: self.kernel,
            weights: self.weights.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }
}
