//! Forward and backward passes for the five 3D convolution operator
//! families: standard, fixed-dilation, offset-deformed (DCNv1-style),
//! offset-deformed with modulation (DCNv2-style), and dynamically dilated
//! with modulation (D²Conv3D), plus a naive direct-sum reference and
//! out-of-bounds sampling accounting.
//!
//! Geometry conventions shared by every path:
//!
//! * The sampling region is the centered integer grid
//!   {−(k−1)/2, …, (k−1)/2}³ enumerated in (t, y, x) row-major order.
//! * An output point p0 maps to the input-space center
//!   `p0·stride − pad + fixed_dilation·(k−1)/2` per dimension, so offsets and
//!   dilations act about that center and reduction laws hold exactly.
//! * Cross-correlation: weights are indexed by the grid point directly, no
//!   kernel flip.
//! * Offsets, dilations and modulations are shared across input and output
//!   channels at a given output point.
//!
//! All accumulation runs in `f64` regardless of storage width, with a fixed
//! (input-channel-major, then kernel-point) term order per output element so
//! that results are reproducible and the reduction laws are exact at 64-bit.

mod deform;
mod dynamic;
mod oob;
mod reference;
mod standard;

pub use deform::{dcn1_3d_forward, dcn2_3d_forward, dcn_3d_backward, DcnGrads, DcnVariant};
pub use dynamic::{d2conv3d_backward, d2conv3d_forward, D2Grads};
pub use oob::{oob_stats_for, OobAccounting, OobMaps, OobMode};
pub use reference::{reference_direct_conv, RefMaps};
pub use standard::{conv3d_backward, conv3d_forward, ConvGrads};

use crate::tensor::{Element, KernelWeights, Shape5D, Tensor5D};
use crate::{Error, Result};

/// Static convolution geometry. `fixed_dilation` scales the kernel grid for
/// the standard/fixed-dilation paths and the offset-deformed paths; the
/// dynamically dilated path replaces it with the per-point dilation map but
/// still uses it in the center mapping.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvConfig {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub fixed_dilation: (usize, usize, usize),
}

impl ConvConfig {
    /// Stride-1, dilation-1, "same" zero padding for an odd kernel.
    pub fn same(kernel: (usize, usize, usize)) -> Self {
        ConvConfig {
            kernel,
            stride: (1, 1, 1),
            padding: ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2, (kernel.2 - 1) / 2),
            fixed_dilation: (1, 1, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = [self.kernel.0, self.kernel.1, self.kernel.2];
        if k.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "kernel extents must be odd and ≥ 1, got {:?}",
                self.kernel
            )));
        }
        let s = [self.stride.0, self.stride.1, self.stride.2];
        if s.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("stride must be ≥ 1, got {:?}", self.stride)));
        }
        let d = [self.fixed_dilation.0, self.fixed_dilation.1, self.fixed_dilation.2];
        if d.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "fixed_dilation must be ≥ 1, got {:?}",
                self.fixed_dilation
            )));
        }
        Ok(())
    }

    /// Output extents for the given input extents; every extent must come
    /// out ≥ 1.
    pub fn output_extents(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let dim = |inp: usize, k: usize, s: usize, p: usize, d: usize| -> Result<usize> {
            let span = d * (k - 1) + 1;
            let padded = inp + 2 * p;
            if padded < span {
                return Err(Error::InvalidArgument(format!(
                    "input extent {inp} with padding {p} cannot fit kernel span {span}"
                )));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            dim(input.0, self.kernel.0, self.stride.0, self.padding.0, self.fixed_dilation.0)?,
            dim(input.1, self.kernel.1, self.stride.1, self.padding.1, self.fixed_dilation.1)?,
            dim(input.2, self.kernel.2, self.stride.2, self.padding.2, self.fixed_dilation.2)?,
        ))
    }

    /// Input-space center of the kernel grid for output point p0.
    #[inline(always)]
    pub fn center(&self, p0: (usize, usize, usize)) -> (i64, i64, i64) {
        let dim = |p: usize, s: usize, pad: usize, d: usize, k: usize| -> i64 {
            (p * s) as i64 - pad as i64 + (d * ((k - 1) / 2)) as i64
        };
        (
            dim(p0.0, self.stride.0, self.padding.0, self.fixed_dilation.0, self.kernel.0),
            dim(p0.1, self.stride.1, self.padding.1, self.fixed_dilation.1, self.kernel.1),
            dim(p0.2, self.stride.2, self.padding.2, self.fixed_dilation.2, self.kernel.2),
        )
    }
}

/// The centered kernel grid in (t, y, x) row-major order; kernel point n of
/// a (k_t,k_h,k_w) kernel is `offsets[n]`, matching the weight layout and the
/// offset-map channel layout.
#[derive(Clone, Debug)]
pub struct KernelGrid {
    pub kernel: (usize, usize, usize),
    pub offsets: Vec<(i64, i64, i64)>,
}

impl KernelGrid {
    pub fn new(kernel: (usize, usize, usize)) -> Self {
        let (kt, kh, kw) = kernel;
        let mut offsets = Vec::with_capacity(kt * kh * kw);
        let half = |k: usize| ((k - 1) / 2) as i64;
        for it in 0..kt as i64 {
            for iy in 0..kh as i64 {
                for ix in 0..kw as i64 {
                    offsets.push((it - half(kt), iy - half(kh), ix - half(kw)));
                }
            }
        }
        KernelGrid { kernel, offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

macro_rules! map_newtype {
    ($(#[$doc:meta])* $name:ident, $channels_desc:expr) => {
        $(#[$doc])*
        #[derive(Clone, PartialEq, Debug)]
        pub struct $name<E: Element>(Tensor5D<E>);

        impl<E: Element> $name<E> {
            pub fn tensor(&self) -> &Tensor5D<E> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor5D<E> {
                self.0
            }

            pub fn shape(&self) -> Shape5D {
                self.0.shape()
            }
        }
    };
}

map_newtype!(
    /// Per-output-point dilation triple, channels (d_t, d_y, d_x).
    DilationMap,
    "3"
);
map_newtype!(
    /// Per-output-point, per-kernel-point modulation scalar; K channels.
    ModulationMap,
    "K"
);
map_newtype!(
    /// Per-output-point, per-kernel-point displacement triple; 3K channels,
    /// channels (3n, 3n+1, 3n+2) holding (Δt, Δy, Δx) for kernel point n.
    OffsetMap,
    "3K"
);

impl<E: Element> DilationMap<E> {
    /// Wraps a 3-channel map. Raw activations may be any real value; range
    /// restrictions are a block-level concern.
    pub fn new(t: Tensor5D<E>) -> Result<Self> {
        if t.shape().c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "dilation map needs 3 channels, got {}",
                t.shape().c
            )));
        }
        Ok(DilationMap(t))
    }
}

impl<E: Element> ModulationMap<E> {
    /// Wraps a K-channel map for a kernel with `num_points` points.
    pub fn new(t: Tensor5D<E>, num_points: usize) -> Result<Self> {
        if t.shape().c != num_points {
            return Err(Error::ShapeMismatch(format!(
                "modulation map needs K={num_points} channels, got {}",
                t.shape().c
            )));
        }
        Ok(ModulationMap(t))
    }
}

impl<E: Element> OffsetMap<E> {
    /// Wraps a 3K-channel map for a kernel with `num_points` points.
    pub fn new(t: Tensor5D<E>, num_points: usize) -> Result<Self> {
        if t.shape().c != 3 * num_points {
            return Err(Error::ShapeMismatch(format!(
                "offset map needs 3K={} channels, got {}",
                3 * num_points,
                t.shape().c
            )));
        }
        Ok(OffsetMap(t))
    }
}

/// Shared per-call geometry, validated once.
pub(crate) struct Plan {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_ext: (usize, usize, usize),
    pub out_ext: (usize, usize, usize),
    pub grid: KernelGrid,
    pub out_shape: Shape5D,
}

pub(crate) fn plan<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    cfg: &ConvConfig,
) -> Result<Plan> {
    if cfg.kernel != w.kernel {
        return Err(Error::ShapeMismatch(format!(
            "config kernel {:?} does not match weight kernel {:?}",
            cfg.kernel, w.kernel
        )));
    }
    let s = x.shape();
    if s.c != w.c_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, kernel expects {}",
            s.c, w.c_in
        )));
    }
    if s.n == 0 || s.t == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::ShapeMismatch(format!("empty input {s}")));
    }
    let out_ext = cfg.output_extents(s.extents())?;
    let out_shape = Shape5D::new(s.n, w.c_out, out_ext.0, out_ext.1, out_ext.2)?;
    Ok(Plan {
        n: s.n,
        c_in: s.c,
        c_out: w.c_out,
        in_ext: s.extents(),
        out_ext,
        grid: KernelGrid::new(cfg.kernel),
        out_shape,
    })
}

/// Validates that a per-point map covers the output grid of `plan`.
pub(crate) fn check_map_grid(
    plan: &Plan,
    map_shape: Shape5D,
    what: &str,
) -> Result<()> {
    if map_shape.n != plan.n || map_shape.extents() != plan.out_ext {
        return Err(Error::ShapeMismatch(format!(
            "{what} map grid {map_shape} does not match output grid ({},c,{},{},{})",
            plan.n, plan.out_ext.0, plan.out_ext.1, plan.out_ext.2
        )));
    }
    Ok(())
}

pub(crate) fn check_upstream(plan: &Plan, upstream: Shape5D) -> Result<()> {
    if upstream != plan.out_shape {
        return Err(Error::ShapeMismatch(format!(
            "upstream shape {upstream} does not match forward output {}",
            plan.out_shape
        )));
    }
    Ok(())
}

/// Weights widened to `f64` once per call: rows are (c_in·K) contiguous per
/// output channel, matching the gather buffer layout.
pub(crate) struct WideWeights {
    pub mat: Vec<f64>,
    pub bias: Vec<f64>,
    pub has_bias: bool,
    pub row: usize,
}

pub(crate) fn widen<E: Element>(w: &KernelWeights<E>) -> WideWeights {
    WideWeights {
        mat: w.weights().iter().map(|v| v.to_f64()).collect(),
        bias: match w.bias() {
            Some(b) => b.iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; w.c_out],
        },
        has_bias: w.bias().is_some(),
        row: w.c_in * w.num_points(),
    }
}

/// Accumulates one output element: bias first, then terms in (c_in-major,
/// kernel-point) order. Every forward path funnels through this so the
/// reduction laws hold bitwise at equal inputs.
#[inline(always)]
pub(crate) fn dot_row(weights_row: &[f64], z: &[f64], bias: f64) -> f64 {
    debug_assert_eq!(weights_row.len(), z.len());
    let mut acc = bias;
    for (w, v) in weights_row.iter().zip(z.iter()) {
        acc += w * v;
    }
    acc
}

/// Per-dimension lattice lookup for the fixed-grid path: entry
/// `[out_idx·k + k_idx]` is the input coordinate `center + fixed_dilation·
/// grid_offset`, or −1 if it falls outside the input extent.
pub(crate) fn lattice_tables(plan: &Plan, cfg: &ConvConfig) -> [Vec<i64>; 3] {
    let build = |out: usize, inp: usize, k: usize, s: usize, p: usize, d: usize| -> Vec<i64> {
        let half = ((k - 1) / 2) as i64;
        let mut tab = vec![-1i64; out * k];
        for o in 0..out {
            let center = (o * s) as i64 - p as i64 + d as i64 * half;
            for ki in 0..k {
                let q = center + d as i64 * (ki as i64 - half);
                tab[o * k + ki] = if q >= 0 && q < inp as i64 { q } else { -1 };
            }
        }
        tab
    };
    [
        build(plan.out_ext.0, plan.in_ext.0, cfg.kernel.0, cfg.stride.0, cfg.padding.0, cfg.fixed_dilation.0),
        build(plan.out_ext.1, plan.in_ext.1, cfg.kernel.1, cfg.stride.1, cfg.padding.1, cfg.fixed_dilation.1),
        build(plan.out_ext.2, plan.in_ext.2, cfg.kernel.2, cfg.stride.2, cfg.padding.2, cfg.fixed_dilation.2),
    ]
}

/// Per-dimension grid centers: entry `[out_idx]` is the input-space center
/// coordinate for that output index.
pub(crate) fn center_tables(plan: &Plan, cfg: &ConvConfig) -> [Vec<i64>; 3] {
    let build = |out: usize, k: usize, s: usize, p: usize, d: usize| -> Vec<i64> {
        (0..out)
            .map(|o| (o * s) as i64 - p as i64 + (d * ((k - 1) / 2)) as i64)
            .collect()
    };
    [
        build(plan.out_ext.0, cfg.kernel.0, cfg.stride.0, cfg.padding.0, cfg.fixed_dilation.0),
        build(plan.out_ext.1, cfg.kernel.1, cfg.stride.1, cfg.padding.1, cfg.fixed_dilation.1),
        build(plan.out_ext.2, cfg.kernel.2, cfg.stride.2, cfg.padding.2, cfg.fixed_dilation.2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        // (in + 2·pad − d·(k−1) − 1)/stride + 1 per dimension.
        let cfg = ConvConfig {
            kernel: (3, 3, 3),
            stride: (1, 2, 2),
            padding: (1, 1, 1),
            fixed_dilation: (1, 1, 1),
        };
        assert_eq!(cfg.output_extents((8, 32, 32)).unwrap(), (8, 16, 16));

        let dil = ConvConfig {
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
            fixed_dilation: (2, 2, 2),
        };
        assert_eq!(dil.output_extents((5, 7, 9)).unwrap(), (1, 3, 5));

        // Kernel span larger than padded input is a degenerate geometry.
        assert!(dil.output_extents((4, 7, 9)).is_err());
    }

    #[test]
    fn same_padding_preserves_extents() {
        let cfg = ConvConfig::same((3, 5, 1));
        assert_eq!(cfg.output_extents((4, 6, 9)).unwrap(), (4, 6, 9));
        // Same-padding centers coincide with the output point.
        assert_eq!(cfg.center((2, 3, 4)), (2, 3, 4));
    }

    #[test]
    fn center_mapping_with_stride_and_dilation() {
        let cfg = ConvConfig {
            kernel: (3, 3, 3),
            stride: (2, 2, 2),
            padding: (1, 1, 1),
            fixed_dilation: (2, 1, 1),
        };
        // p0·s − pad + d·(k−1)/2
        assert_eq!(cfg.center((0, 0, 0)), (1, 0, 0));
        assert_eq!(cfg.center((3, 1, 2)), (7, 2, 4));
    }

    #[test]
    fn kernel_grid_row_major_centered() {
        let g = KernelGrid::new((3, 3, 3));
        assert_eq!(g.len(), 27);
        assert_eq!(g.offsets[0], (-1, -1, -1));
        assert_eq!(g.offsets[13], (0, 0, 0));
        assert_eq!(g.offsets[26], (1, 1, 1));
        // Row-major in (t, y, x): x varies fastest.
        assert_eq!(g.offsets[1], (-1, -1, 0));
        assert_eq!(g.offsets[3], (-1, 0, -1));
        assert_eq!(g.offsets[9], (0, -1, -1));

        let g1 = KernelGrid::new((1, 1, 1));
        assert_eq!(g1.offsets, vec![(0, 0, 0)]);
    }

    #[test]
    fn map_channel_counts_enforced() {
        use crate::tensor::Tensor5D;
        let grid = Shape5D::new(1, 3, 2, 2, 2).unwrap();
        assert!(DilationMap::new(Tensor5D::<f64>::zeros(grid)).is_ok());
        let bad = Shape5D::new(1, 2, 2, 2, 2).unwrap();
        assert!(DilationMap::new(Tensor5D::<f64>::zeros(bad)).is_err());

        // For a 3×3×3 kernel: 27 modulation channels, 81 offset channels.
        let k = 27;
        let m = Shape5D::new(1, 27, 2, 2, 2).unwrap();
        assert!(ModulationMap::new(Tensor5D::<f64>::zeros(m), k).is_ok());
        let o = Shape5D::new(1, 81, 2, 2, 2).unwrap();
        assert!(OffsetMap::new(Tensor5D::<f64>::zeros(o), k).is_ok());
        assert!(OffsetMap::new(Tensor5D::<f64>::zeros(m), k).is_err());
    }
}
