//! Accounting of sampling locations that fall outside the input volume.
//!
//! Two modes: `InteriorOnly` counts only samples whose fixed-geometry base
//! location (grid center + fixed_dilation · grid offset) is inside the
//! volume, so a plain convolution always reports 0% and any out-of-bounds
//! excursion is attributable to the learned maps. `BoundaryInclusive` counts
//! every sample, so zero-padding lattice reads surface too.

use crate::ops::{ConvConfig, DilationMap, KernelGrid, OffsetMap};
use crate::sampler::{is_oob, record_oob, Coordinate3D, SamplingStats};
use crate::tensor::Element;
use crate::{Error, Result};

/// Which map family produces the sampling locations to classify.
pub enum OobMaps<'a, E: Element> {
    /// Fixed lattice only (standard / fixed-dilation convolution).
    Lattice,
    /// Per-kernel-point offsets displace the lattice.
    Deformed(&'a OffsetMap<E>),
    /// A per-point dilation triple scales the grid.
    Dilated(&'a DilationMap<E>),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OobMode {
    InteriorOnly,
    BoundaryInclusive,
}

/// Per-sequence and pooled out-of-bounds counters for one labeled layer.
#[derive(Clone, Debug)]
pub struct OobAccounting {
    pub label: String,
    pub mode: OobMode,
    pub per_sequence: Vec<SamplingStats>,
    pub pooled: SamplingStats,
}

impl OobAccounting {
    pub fn pooled_percent(&self) -> f64 {
        self.pooled.percent()
    }

    /// Mean of the per-sequence percentages (uniform over sequences).
    pub fn mean_sequence_percent(&self) -> f64 {
        if self.per_sequence.is_empty() {
            return 0.0;
        }
        self.per_sequence.iter().map(|s| s.percent()).sum::<f64>() / self.per_sequence.len() as f64
    }
}

/// Enumerates every sampling location one forward pass would visit and
/// classifies it against the input extents.
pub fn oob_stats_for<E: Element>(
    label: &str,
    in_extents: (usize, usize, usize),
    batch: usize,
    cfg: &ConvConfig,
    maps: &OobMaps<'_, E>,
    mode: OobMode,
) -> Result<OobAccounting> {
    let out_ext = cfg.output_extents(in_extents)?;
    let grid = KernelGrid::new(cfg.kernel);
    let k = grid.len();

    let check_grid = |shape: crate::tensor::Shape5D, channels: usize, what: &str| -> Result<()> {
        if shape.n != batch || shape.extents() != out_ext || shape.c != channels {
            return Err(Error::ShapeMismatch(format!(
                "{what} map shaped {shape}, expected ({batch},{channels},{},{},{})",
                out_ext.0, out_ext.1, out_ext.2
            )));
        }
        Ok(())
    };
    match maps {
        OobMaps::Lattice => {}
        OobMaps::Deformed(off) => check_grid(off.shape(), 3 * k, "offset")?,
        OobMaps::Dilated(dil) => check_grid(dil.shape(), 3, "dilation")?,
    }

    let fd = cfg.fixed_dilation;
    let (out_t, out_h, out_w) = out_ext;
    let out_vol = out_t * out_h * out_w;
    let mut per_sequence = Vec::with_capacity(batch);
    let mut pooled = SamplingStats::new(label);

    for n in 0..batch {
        let mut stats = SamplingStats::new(format!("{label}/seq{n}"));
        for ot in 0..out_t {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let pt = (ot * out_h + oy) * out_w + ox;
                    let center = cfg.center((ot, oy, ox));
                    for (ki, &(gt, gy, gx)) in grid.offsets.iter().enumerate() {
                        let base = Coordinate3D::new(
                            (center.0 + fd.0 as i64 * gt) as f64,
                            (center.1 + fd.1 as i64 * gy) as f64,
                            (center.2 + fd.2 as i64 * gx) as f64,
                        );
                        if mode == OobMode::InteriorOnly && is_oob(base, in_extents) {
                            continue;
                        }
                        let loc = match maps {
                            OobMaps::Lattice => base,
                            OobMaps::Deformed(off) => {
                                let o = off.tensor().data();
                                let b = (n * 3 * k + 3 * ki) * out_vol + pt;
                                Coordinate3D::new(
                                    base.t + o[b].to_f64(),
                                    base.y + o[b + out_vol].to_f64(),
                                    base.x + o[b + 2 * out_vol].to_f64(),
                                )
                            }
                            OobMaps::Dilated(dil) => {
                                let d = dil.tensor().data();
                                let b = n * 3 * out_vol + pt;
                                Coordinate3D::new(
                                    center.0 as f64 + gt as f64 * d[b].to_f64(),
                                    center.1 as f64 + gy as f64 * d[b + out_vol].to_f64(),
                                    center.2 as f64 + gx as f64 * d[b + 2 * out_vol].to_f64(),
                                )
                            }
                        };
                        record_oob(loc, in_extents, &mut stats);
                    }
                }
            }
        }
        pooled.merge(&stats);
        per_sequence.push(stats);
    }

    Ok(OobAccounting { label: label.into(), mode, per_sequence, pooled })
}
