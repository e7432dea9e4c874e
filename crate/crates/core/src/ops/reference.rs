//! Naive direct-sum evaluation of every forward path, kept as an oracle.
//!
//! The loop nest mirrors the written definition term by term: for each
//! output element, bias first, then one term per (input channel, kernel
//! point) in (t, y, x) row-major kernel order. No gather buffers, no lookup
//! tables; geometry is recomputed inline per term. On the fixed lattice this
//! reproduces the optimized paths bitwise at 64-bit because the term order
//! and the individual operations coincide; on fractional paths it agrees to
//! rounding because factors group differently.

use crate::ops::{check_map_grid, plan, ConvConfig, DilationMap, ModulationMap, OffsetMap};
use crate::sampler::{trilinear_sample, Coordinate3D, VolumeView};
use crate::tensor::{Element, KernelWeights, Tensor5D};
use crate::{Error, Result};

/// Which per-point maps drive the sampling locations.
pub enum RefMaps<'a, E: Element> {
    /// Fixed integer lattice (standard / fixed-dilation convolution).
    Lattice,
    /// Per-kernel-point offsets with optional modulation (offset-deformed).
    Deformed {
        offsets: &'a OffsetMap<E>,
        modulation: Option<&'a ModulationMap<E>>,
    },
    /// Per-point dilation triple with modulation (dynamically dilated).
    Dilated {
        dilation: &'a DilationMap<E>,
        modulation: &'a ModulationMap<E>,
    },
}

/// Direct quintuple-loop forward pass; always accumulates and returns `f64`.
pub fn reference_direct_conv<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    cfg: &ConvConfig,
    maps: &RefMaps<'_, E>,
) -> Result<Tensor5D<f64>> {
    let plan = plan(x, w, cfg)?;
    let k = plan.grid.len();
    match maps {
        RefMaps::Lattice => {}
        RefMaps::Deformed { offsets, modulation } => {
            check_map_grid(&plan, offsets.shape(), "offset")?;
            if offsets.shape().c != 3 * k {
                return Err(Error::ShapeMismatch(format!(
                    "offset map has {} channels, expected {}",
                    offsets.shape().c,
                    3 * k
                )));
            }
            if let Some(m) = modulation {
                check_map_grid(&plan, m.shape(), "modulation")?;
            }
        }
        RefMaps::Dilated { dilation, modulation } => {
            check_map_grid(&plan, dilation.shape(), "dilation")?;
            check_map_grid(&plan, modulation.shape(), "modulation")?;
        }
    }

    let (kt, kh, kw) = cfg.kernel;
    let half = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let (in_t, in_h, in_w) = plan.in_ext;
    let (out_t, out_h, out_w) = plan.out_ext;
    let fd = cfg.fixed_dilation;
    let mut out = Tensor5D::<f64>::zeros(plan.out_shape);

    for n in 0..plan.n {
        for co in 0..plan.c_out {
            for ot in 0..out_t {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let ct = (ot * cfg.stride.0) as i64 - cfg.padding.0 as i64
                            + (fd.0 * half.0) as i64;
                        let cy = (oy * cfg.stride.1) as i64 - cfg.padding.1 as i64
                            + (fd.1 * half.1) as i64;
                        let cx = (ox * cfg.stride.2) as i64 - cfg.padding.2 as i64
                            + (fd.2 * half.2) as i64;
                        let mut acc = w.bias().map_or(0.0, |b| b[co].to_f64());
                        for ci in 0..plan.c_in {
                            let vol = VolumeView::new(x.channel(n, ci), plan.in_ext);
                            for ikt in 0..kt {
                                for iky in 0..kh {
                                    for ikx in 0..kw {
                                        let g = (
                                            ikt as i64 - half.0 as i64,
                                            iky as i64 - half.1 as i64,
                                            ikx as i64 - half.2 as i64,
                                        );
                                        let ki = (ikt * kh + iky) * kw + ikx;
                                        let wv =
                                            w.weights()[w.flat(co, ci, ikt, iky, ikx)].to_f64();
                                        acc += match maps {
                                            RefMaps::Lattice => {
                                                let t = ct + fd.0 as i64 * g.0;
                                                let y = cy + fd.1 as i64 * g.1;
                                                let xx = cx + fd.2 as i64 * g.2;
                                                let v = if t >= 0
                                                    && (t as usize) < in_t
                                                    && y >= 0
                                                    && (y as usize) < in_h
                                                    && xx >= 0
                                                    && (xx as usize) < in_w
                                                {
                                                    x.at(n, ci, t as usize, y as usize, xx as usize)
                                                        .to_f64()
                                                } else {
                                                    0.0
                                                };
                                                wv * v
                                            }
                                            RefMaps::Deformed { offsets, modulation } => {
                                                let o = offsets.tensor();
                                                let p = Coordinate3D::new(
                                                    (ct + fd.0 as i64 * g.0) as f64
                                                        + o.at(n, 3 * ki, ot, oy, ox).to_f64(),
                                                    (cy + fd.1 as i64 * g.1) as f64
                                                        + o.at(n, 3 * ki + 1, ot, oy, ox).to_f64(),
                                                    (cx + fd.2 as i64 * g.2) as f64
                                                        + o.at(n, 3 * ki + 2, ot, oy, ox).to_f64(),
                                                );
                                                let m = modulation
                                                    .map_or(1.0, |m| {
                                                        m.tensor().at(n, ki, ot, oy, ox).to_f64()
                                                    });
                                                m * wv * trilinear_sample(&vol, p)
                                            }
                                            RefMaps::Dilated { dilation, modulation } => {
                                                let d = dilation.tensor();
                                                let p = Coordinate3D::new(
                                                    ct as f64
                                                        + g.0 as f64
                                                            * d.at(n, 0, ot, oy, ox).to_f64(),
                                                    cy as f64
                                                        + g.1 as f64
                                                            * d.at(n, 1, ot, oy, ox).to_f64(),
                                                    cx as f64
                                                        + g.2 as f64
                                                            * d.at(n, 2, ot, oy, ox).to_f64(),
                                                );
                                                let m = modulation
                                                    .tensor()
                                                    .at(n, ki, ot, oy, ox)
                                                    .to_f64();
                                                m * wv * trilinear_sample(&vol, p)
                                            }
                                        };
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, co, ot, oy, ox) = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{
        conv3d_forward, d2conv3d_forward, dcn1_3d_forward, dcn2_3d_forward,
    };
    use crate::tensor::{Fill, Shape5D};

    fn rand_t(shape: Shape5D, seed: u64) -> Tensor5D<f64> {
        Tensor5D::new(shape, Fill::RandomNormal { seed, mean: 0.0, stddev: 1.0 }).unwrap()
    }

    #[test]
    fn lattice_reference_is_bitwise_equal() {
        let x = rand_t(Shape5D::new(1, 2, 4, 5, 5).unwrap(), 91);
        let w = KernelWeights::<f64>::random(3, 2, (3, 3, 3), true, 92, 0.5).unwrap();
        for cfg in [
            ConvConfig::same((3, 3, 3)),
            ConvConfig {
                kernel: (3, 3, 3),
                stride: (2, 1, 2),
                padding: (1, 0, 2),
                fixed_dilation: (1, 1, 2),
            },
        ] {
            let fast = conv3d_forward(&x, &w, &cfg).unwrap();
            let slow = reference_direct_conv(&x, &w, &cfg, &RefMaps::Lattice).unwrap();
            assert_eq!(fast.data(), slow.data());
        }
    }

    #[test]
    fn deformed_reference_agrees_to_rounding() {
        let x = rand_t(Shape5D::new(1, 1, 4, 6, 6).unwrap(), 93);
        let w = KernelWeights::<f64>::random(2, 1, (3, 3, 3), true, 94, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let off = crate::ops::OffsetMap::new(
            rand_t(Shape5D::new(1, 81, 4, 6, 6).unwrap(), 95),
            27,
        )
        .unwrap();
        let fast = dcn1_3d_forward(&x, &w, &off, &cfg).unwrap();
        let slow = reference_direct_conv(
            &x,
            &w,
            &cfg,
            &RefMaps::Deformed { offsets: &off, modulation: None },
        )
        .unwrap();
        for (a, b) in fast.iter_f64().zip(slow.iter_f64()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }

        let mods = crate::ops::ModulationMap::new(
            rand_t(Shape5D::new(1, 27, 4, 6, 6).unwrap(), 96),
            27,
        )
        .unwrap();
        let fast2 = dcn2_3d_forward(&x, &w, &off, &mods, &cfg).unwrap();
        let slow2 = reference_direct_conv(
            &x,
            &w,
            &cfg,
            &RefMaps::Deformed { offsets: &off, modulation: Some(&mods) },
        )
        .unwrap();
        for (a, b) in fast2.iter_f64().zip(slow2.iter_f64()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dilated_reference_agrees_to_rounding() {
        let x = rand_t(Shape5D::new(1, 2, 4, 6, 6).unwrap(), 97);
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 98, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let dil = crate::ops::DilationMap::new(
            Tensor5D::new(
                Shape5D::new(1, 3, 4, 6, 6).unwrap(),
                Fill::RandomNormal { seed: 99, mean: 1.2, stddev: 0.4 },
            )
            .unwrap(),
        )
        .unwrap();
        let mods = crate::ops::ModulationMap::new(
            Tensor5D::new(
                Shape5D::new(1, 27, 4, 6, 6).unwrap(),
                Fill::RandomNormal { seed: 100, mean: 0.8, stddev: 0.3 },
            )
            .unwrap(),
            27,
        )
        .unwrap();
        let fast = d2conv3d_forward(&x, &w, &dil, &mods, &cfg).unwrap();
        let slow = reference_direct_conv(
            &x,
            &w,
            &cfg,
            &RefMaps::Dilated { dilation: &dil, modulation: &mods },
        )
        .unwrap();
        for (a, b) in fast.iter_f64().zip(slow.iter_f64()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}
