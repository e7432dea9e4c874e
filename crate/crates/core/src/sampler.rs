//! Trilinear sampling over a single-channel (T,H,W) volume with zero padding.
//!
//! Conventions: voxel centers sit at integer coordinates, the valid range per
//! dimension is [0, size−1], and any lattice corner outside the volume
//! contributes 0. A *sampling location* is out of bounds iff any coordinate
//! leaves [0, size−1], regardless of whether some of its corners are inside.
//! At integer coordinates the interpolation weights have a kink; gradients
//! use the right-sided derivative, i.e. the cell origin is floor(p). Tests
//! probing gradients therefore keep coordinates off the integer lattice.

use crate::tensor::Element;

/// Fractional sampling coordinate in (t, y, x) order. Components are usually
/// finite; wildly diverged values are tolerated and sample as all-outside.
#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct Coordinate3D {
    pub t: f64,
    pub y: f64,
    pub x: f64,
}

impl Coordinate3D {
    pub fn new(t: f64, y: f64, x: f64) -> Self {
        Coordinate3D { t, y, x }
    }
}

/// Borrowed single-channel volume.
#[derive(Clone, Copy)]
pub struct VolumeView<'a, E: Element> {
    data: &'a [E],
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl<'a, E: Element> VolumeView<'a, E> {
    pub fn new(data: &'a [E], extents: (usize, usize, usize)) -> Self {
        let (t, h, w) = extents;
        assert_eq!(data.len(), t * h * w, "volume buffer does not match extents");
        VolumeView { data, t, h, w }
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }

    #[inline(always)]
    pub fn get(&self, flat: usize) -> f64 {
        self.data[flat].to_f64()
    }
}

/// The up-to-8 lattice corners of a sampling coordinate: flat volume index,
/// interpolation weight, and the weight's derivative w.r.t. (t, y, x).
/// Corners outside the volume are dropped (they contribute exactly 0).
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub len: usize,
    pub idx: [usize; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 3]; 8],
}

impl Default for Taps {
    fn default() -> Self {
        Taps { len: 0, idx: [0; 8], weight: [0.0; 8], dweight: [[0.0; 3]; 8] }
    }
}

/// Computes interpolation taps for `p` over a volume with the given extents.
///
/// Per axis the two corner weights are (1−f, f) with f = p − floor(p); their
/// derivatives w.r.t. the coordinate are (−1, +1). Corner enumeration is
/// (t, y, x) row-major so downstream accumulation order is deterministic.
pub fn trilinear_taps(extents: (usize, usize, usize), p: Coordinate3D) -> Taps {
    let (nt, nh, nw) = (extents.0 as i64, extents.1 as i64, extents.2 as i64);
    // Coordinates this far out (diverged training included, NaN and the
    // infinities too) can touch no lattice point; the cast below would also
    // overflow on them.
    const LIMIT: f64 = 9.0e15;
    if !(p.t.abs() < LIMIT && p.y.abs() < LIMIT && p.x.abs() < LIMIT) {
        return Taps::default();
    }

    let t0 = p.t.floor();
    let y0 = p.y.floor();
    let x0 = p.x.floor();
    let (ft, fy, fx) = (p.t - t0, p.y - y0, p.x - x0);
    let (t0, y0, x0) = (t0 as i64, y0 as i64, x0 as i64);

    let wt = [1.0 - ft, ft];
    let wy = [1.0 - fy, fy];
    let wx = [1.0 - fx, fx];
    const DW: [f64; 2] = [-1.0, 1.0];

    let mut taps = Taps::default();
    for (dt, (&wtv, &dwt)) in wt.iter().zip(DW.iter()).enumerate() {
        let it = t0 + dt as i64;
        if it < 0 || it >= nt {
            continue;
        }
        for (dy, (&wyv, &dwy)) in wy.iter().zip(DW.iter()).enumerate() {
            let iy = y0 + dy as i64;
            if iy < 0 || iy >= nh {
                continue;
            }
            for (dx, (&wxv, &dwx)) in wx.iter().zip(DW.iter()).enumerate() {
                let ix = x0 + dx as i64;
                if ix < 0 || ix >= nw {
                    continue;
                }
                let k = taps.len;
                taps.idx[k] = ((it * nh + iy) * nw + ix) as usize;
                taps.weight[k] = wtv * wyv * wxv;
                taps.dweight[k] = [dwt * wyv * wxv, wtv * dwy * wxv, wtv * wyv * dwx];
                taps.len += 1;
            }
        }
    }
    taps
}

/// Trilinear blend of the 8 surrounding lattice values; lattice points
/// outside the volume contribute 0. Exact at integer in-bounds coordinates.
pub fn trilinear_sample<E: Element>(vol: &VolumeView<E>, p: Coordinate3D) -> f64 {
    let taps = trilinear_taps(vol.extents(), p);
    let mut acc = 0.0;
    for k in 0..taps.len {
        acc += taps.weight[k] * vol.get(taps.idx[k]);
    }
    acc
}

/// Gradient of the sampled value: per-corner contributions to the volume
/// (flat index, value) and the derivative w.r.t. the coordinate.
pub fn trilinear_sample_backward<E: Element>(
    vol: &VolumeView<E>,
    p: Coordinate3D,
    upstream: f64,
) -> (GradVol, Coordinate3D) {
    let taps = trilinear_taps(vol.extents(), p);
    let mut grad_vol = GradVol::default();
    let mut grad_p = [0.0f64; 3];
    for k in 0..taps.len {
        grad_vol.entries[grad_vol.len] = (taps.idx[k], upstream * taps.weight[k]);
        grad_vol.len += 1;
        let v = vol.get(taps.idx[k]);
        for (axis, g) in grad_p.iter_mut().enumerate() {
            *g += upstream * taps.dweight[k][axis] * v;
        }
    }
    (grad_vol, Coordinate3D::new(grad_p[0], grad_p[1], grad_p[2]))
}

/// Sparse volume-gradient contribution of one sample: at most 8 entries.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradVol {
    pub len: usize,
    pub entries: [(usize, f64); 8],
}

impl GradVol {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries[..self.len].iter().copied()
    }
}

/// Out-of-bounds sampling counters for one labeled layer. Mergeable so
/// per-worker partials combine by addition.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SamplingStats {
    pub label: String,
    pub total_samples: u64,
    pub oob_samples: u64,
}

impl SamplingStats {
    pub fn new(label: impl Into<String>) -> Self {
        SamplingStats { label: label.into(), total_samples: 0, oob_samples: 0 }
    }

    pub fn percent(&self) -> f64 {
        if self.total_samples == 0 {
            0.0
        } else {
            100.0 * self.oob_samples as f64 / self.total_samples as f64
        }
    }

    pub fn merge(&mut self, other: &SamplingStats) {
        self.total_samples += other.total_samples;
        self.oob_samples += other.oob_samples;
    }
}

/// True iff any coordinate of the sampling location leaves [0, size−1].
#[inline(always)]
pub fn is_oob(p: Coordinate3D, extents: (usize, usize, usize)) -> bool {
    let (t, h, w) = extents;
    p.t < 0.0
        || p.t > (t - 1) as f64
        || p.y < 0.0
        || p.y > (h - 1) as f64
        || p.x < 0.0
        || p.x > (w - 1) as f64
}

/// Classifies one sampling location into `stats`.
pub fn record_oob(p: Coordinate3D, extents: (usize, usize, usize), stats: &mut SamplingStats) {
    assert!(extents.0 > 0 && extents.1 > 0 && extents.2 > 0, "extents must be positive");
    stats.total_samples += 1;
    if is_oob(p, extents) {
        stats.oob_samples += 1;
    }
}
