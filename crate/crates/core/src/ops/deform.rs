//! Offset-deformed 3D convolution: each kernel point is displaced by a
//! learned fractional offset per output point, optionally scaled by a learned
//! modulation value per kernel point.

use rayon::prelude::*;

use crate::ops::standard::scatter_planes;
use crate::ops::{
    center_tables, check_map_grid, check_upstream, dot_row, plan, widen, ConvConfig,
    ModulationMap, OffsetMap, Plan,
};
use crate::sampler::{trilinear_taps, Coordinate3D, Taps};
use crate::tensor::{Element, KernelWeights, Tensor5D};
use crate::{Error, Result};

/// Offset-deformed variant selector; V2 adds per-kernel-point modulation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DcnVariant {
    V1,
    V2,
}

impl DcnVariant {
    pub fn modulated(self) -> bool {
        matches!(self, DcnVariant::V2)
    }
}

/// Gradients of the offset-deformed forward passes. `modulation` is present
/// iff the forward was modulated.
#[derive(Clone, Debug)]
pub struct DcnGrads<E: Element> {
    pub x: Tensor5D<E>,
    pub w: Vec<E>,
    pub bias: Option<Vec<E>>,
    pub offsets: OffsetMap<E>,
    pub modulation: Option<ModulationMap<E>>,
}

/// Offset-deformed convolution without modulation.
pub fn dcn1_3d_forward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    offsets: &OffsetMap<E>,
    cfg: &ConvConfig,
) -> Result<Tensor5D<E>> {
    deform_forward(x, w, offsets, None, cfg)
}

/// Offset-deformed convolution with per-kernel-point modulation.
pub fn dcn2_3d_forward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    offsets: &OffsetMap<E>,
    modulation: &ModulationMap<E>,
    cfg: &ConvConfig,
) -> Result<Tensor5D<E>> {
    deform_forward(x, w, offsets, Some(modulation), cfg)
}

fn check_deform_maps<E: Element>(
    plan: &Plan,
    offsets: &OffsetMap<E>,
    modulation: Option<&ModulationMap<E>>,
) -> Result<()> {
    let k = plan.grid.len();
    check_map_grid(plan, offsets.shape(), "offset")?;
    if offsets.shape().c != 3 * k {
        return Err(Error::ShapeMismatch(format!(
            "offset map has {} channels, kernel with K={k} points needs {}",
            offsets.shape().c,
            3 * k
        )));
    }
    if let Some(m) = modulation {
        check_map_grid(plan, m.shape(), "modulation")?;
        if m.shape().c != k {
            return Err(Error::ShapeMismatch(format!(
                "modulation map has {} channels, kernel has K={k} points",
                m.shape().c
            )));
        }
    }
    Ok(())
}

/// Kernel grid offsets scaled by the fixed dilation, exact as `f64`.
fn scaled_grid(plan: &Plan, cfg: &ConvConfig) -> Vec<[f64; 3]> {
    plan.grid
        .offsets
        .iter()
        .map(|&(t, y, x)| {
            [
                (t * cfg.fixed_dilation.0 as i64) as f64,
                (y * cfg.fixed_dilation.1 as i64) as f64,
                (x * cfg.fixed_dilation.2 as i64) as f64,
            ]
        })
        .collect()
}

fn deform_forward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    offsets: &OffsetMap<E>,
    modulation: Option<&ModulationMap<E>>,
    cfg: &ConvConfig,
) -> Result<Tensor5D<E>> {
    let plan = plan(x, w, cfg)?;
    check_deform_maps(&plan, offsets, modulation)?;
    let ww = widen(w);
    let k = plan.grid.len();
    let scaled = scaled_grid(&plan, cfg);
    let centers = center_tables(&plan, cfg);
    let (out_t, out_h, out_w) = plan.out_ext;
    let out_vol = out_t * out_h * out_w;
    let in_ext = plan.in_ext;
    let in_vol = in_ext.0 * in_ext.1 * in_ext.2;
    let x_data = x.data();
    let off = offsets.tensor().data();
    let mods_data = modulation.map(|m| m.tensor().data());

    let planes: Vec<Vec<f64>> = (0..plan.n * out_t)
        .into_par_iter()
        .map(|task| {
            let n = task / out_t;
            let ot = task % out_t;
            let sample = &x_data[n * plan.c_in * in_vol..(n + 1) * plan.c_in * in_vol];
            let mut plane = vec![0.0f64; plan.c_out * out_h * out_w];
            let mut z = vec![0.0f64; plan.c_in * k];
            let mut taps = vec![Taps::default(); k];
            let mut mods = vec![1.0f64; k];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let pt = (ot * out_h + oy) * out_w + ox;
                    for ki in 0..k {
                        let base = (n * 3 * k + 3 * ki) * out_vol + pt;
                        let loc = Coordinate3D::new(
                            centers[0][ot] as f64 + scaled[ki][0] + off[base].to_f64(),
                            centers[1][oy] as f64 + scaled[ki][1] + off[base + out_vol].to_f64(),
                            centers[2][ox] as f64 + scaled[ki][2] + off[base + 2 * out_vol].to_f64(),
                        );
                        taps[ki] = trilinear_taps(in_ext, loc);
                        if let Some(md) = mods_data {
                            mods[ki] = md[(n * k + ki) * out_vol + pt].to_f64();
                        }
                    }
                    gather_sampled(sample, plan.c_in, in_vol, &taps, &mods, &mut z, None);
                    for co in 0..plan.c_out {
                        let row = &ww.mat[co * ww.row..(co + 1) * ww.row];
                        plane[(co * out_h + oy) * out_w + ox] = dot_row(row, &z, ww.bias[co]);
                    }
                }
            }
            plane
        })
        .collect();

    Ok(scatter_planes(&plan, out_t, out_h, out_w, planes))
}

/// Fills z[ci·K + ki] = mods[ki] · Σ taps, and optionally the unmodulated
/// samples alongside.
pub(crate) fn gather_sampled<E: Element>(
    sample: &[E],
    c_in: usize,
    in_vol: usize,
    taps: &[Taps],
    mods: &[f64],
    z: &mut [f64],
    mut raw: Option<&mut [f64]>,
) {
    let k = taps.len();
    for ci in 0..c_in {
        let chan = &sample[ci * in_vol..(ci + 1) * in_vol];
        for (ki, t) in taps.iter().enumerate() {
            let mut s = 0.0f64;
            for c in 0..t.len {
                s += t.weight[c] * chan[t.idx[c]].to_f64();
            }
            if let Some(r) = raw.as_deref_mut() {
                r[ci * k + ki] = s;
            }
            z[ci * k + ki] = mods[ki] * s;
        }
    }
}

/// Analytic gradients of the offset-deformed forward passes; pass the
/// modulation map iff the forward was modulated.
pub fn dcn_3d_backward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    offsets: &OffsetMap<E>,
    modulation: Option<&ModulationMap<E>>,
    cfg: &ConvConfig,
    upstream: &Tensor5D<E>,
) -> Result<DcnGrads<E>> {
    let plan = plan(x, w, cfg)?;
    check_deform_maps(&plan, offsets, modulation)?;
    check_upstream(&plan, upstream.shape())?;
    let ww = widen(w);
    let k = plan.grid.len();
    let scaled = scaled_grid(&plan, cfg);
    let centers = center_tables(&plan, cfg);
    let (out_t, out_h, out_w) = plan.out_ext;
    let out_vol = out_t * out_h * out_w;
    let in_ext = plan.in_ext;
    let in_vol = in_ext.0 * in_ext.1 * in_ext.2;
    let x_data = x.data();
    let off = offsets.tensor().data();
    let mods_data = modulation.map(|m| m.tensor().data());
    let up = upstream.data();

    let mut gx = vec![0.0f64; x_data.len()];
    let mut gw = vec![0.0f64; ww.mat.len()];
    let mut gb = vec![0.0f64; plan.c_out];
    let mut goff = vec![0.0f64; off.len()];
    let mut gmod = vec![0.0f64; mods_data.map_or(0, |m| m.len())];

    let mut taps = vec![Taps::default(); k];
    let mut mods = vec![1.0f64; k];
    let mut z = vec![0.0f64; plan.c_in * k];
    let mut raw = vec![0.0f64; plan.c_in * k];
    let mut dz = vec![0.0f64; plan.c_in * k];

    for n in 0..plan.n {
        let sample = &x_data[n * plan.c_in * in_vol..(n + 1) * plan.c_in * in_vol];
        for ot in 0..out_t {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let pt = (ot * out_h + oy) * out_w + ox;
                    if (0..plan.c_out)
                        .all(|co| up[(n * plan.c_out + co) * out_vol + pt].to_f64() == 0.0)
                    {
                        continue;
                    }
                    for ki in 0..k {
                        let base = (n * 3 * k + 3 * ki) * out_vol + pt;
                        let loc = Coordinate3D::new(
                            centers[0][ot] as f64 + scaled[ki][0] + off[base].to_f64(),
                            centers[1][oy] as f64 + scaled[ki][1] + off[base + out_vol].to_f64(),
                            centers[2][ox] as f64 + scaled[ki][2] + off[base + 2 * out_vol].to_f64(),
                        );
                        taps[ki] = trilinear_taps(in_ext, loc);
                        if let Some(md) = mods_data {
                            mods[ki] = md[(n * k + ki) * out_vol + pt].to_f64();
                        }
                    }
                    gather_sampled(sample, plan.c_in, in_vol, &taps, &mods, &mut z, Some(&mut raw));
                    dz.iter_mut().for_each(|v| *v = 0.0);
                    for co in 0..plan.c_out {
                        let g = up[(n * plan.c_out + co) * out_vol + pt].to_f64();
                        if g == 0.0 {
                            continue;
                        }
                        gb[co] += g;
                        let row = &ww.mat[co * ww.row..(co + 1) * ww.row];
                        let grow = &mut gw[co * ww.row..(co + 1) * ww.row];
                        for j in 0..ww.row {
                            grow[j] += g * z[j];
                            dz[j] += g * row[j];
                        }
                    }
                    for ki in 0..k {
                        let t = &taps[ki];
                        let m = mods[ki];
                        let mut locg = [0.0f64; 3];
                        let mut gm = 0.0f64;
                        for ci in 0..plan.c_in {
                            let j = ci * k + ki;
                            gm += dz[j] * raw[j];
                            let gs = dz[j] * m;
                            if gs == 0.0 {
                                continue;
                            }
                            let chan_base = n * plan.c_in * in_vol + ci * in_vol;
                            let chan = &x_data[chan_base..chan_base + in_vol];
                            for c in 0..t.len {
                                gx[chan_base + t.idx[c]] += gs * t.weight[c];
                                let v = chan[t.idx[c]].to_f64();
                                locg[0] += gs * t.dweight[c][0] * v;
                                locg[1] += gs * t.dweight[c][1] * v;
                                locg[2] += gs * t.dweight[c][2] * v;
                            }
                        }
                        let base = (n * 3 * k + 3 * ki) * out_vol + pt;
                        goff[base] += locg[0];
                        goff[base + out_vol] += locg[1];
                        goff[base + 2 * out_vol] += locg[2];
                        if mods_data.is_some() {
                            gmod[(n * k + ki) * out_vol + pt] += gm;
                        }
                    }
                }
            }
        }
    }

    Ok(DcnGrads {
        x: Tensor5D::from_vec_allow_non_finite(
            x.shape(),
            gx.into_iter().map(E::from_f64).collect(),
        )?,
        w: gw.into_iter().map(E::from_f64).collect(),
        bias: ww.has_bias.then(|| gb.into_iter().map(E::from_f64).collect()),
        offsets: OffsetMap::new(
            Tensor5D::from_vec_allow_non_finite(
                offsets.shape(),
                goff.into_iter().map(E::from_f64).collect(),
            )?,
            k,
        )?,
        modulation: match modulation {
            Some(m) => Some(ModulationMap::new(
                Tensor5D::from_vec_allow_non_finite(
                    m.shape(),
                    gmod.into_iter().map(E::from_f64).collect(),
                )?,
                k,
            )?),
            None => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv3d_forward;
    use crate::tensor::{Fill, Shape5D};

    fn rand_t(shape: Shape5D, seed: u64) -> Tensor5D<f64> {
        Tensor5D::new(shape, Fill::RandomNormal { seed, mean: 0.0, stddev: 1.0 }).unwrap()
    }

    fn zero_offsets(n: usize, k: usize, ext: (usize, usize, usize)) -> OffsetMap<f64> {
        OffsetMap::new(Tensor5D::zeros(Shape5D::new(n, 3 * k, ext.0, ext.1, ext.2).unwrap()), k)
            .unwrap()
    }

    fn const_mods(n: usize, k: usize, ext: (usize, usize, usize), v: f64) -> ModulationMap<f64> {
        ModulationMap::new(
            Tensor5D::new(Shape5D::new(n, k, ext.0, ext.1, ext.2).unwrap(), Fill::Value(v))
                .unwrap(),
            k,
        )
        .unwrap()
    }

    #[test]
    fn zero_offsets_match_lattice_conv() {
        let x = rand_t(Shape5D::new(2, 3, 4, 5, 5).unwrap(), 11);
        let w = KernelWeights::<f64>::random(2, 3, (3, 3, 3), true, 12, 0.5).unwrap();
        for cfg in [
            ConvConfig::same((3, 3, 3)),
            ConvConfig {
                kernel: (3, 3, 3),
                stride: (1, 2, 2),
                padding: (1, 2, 2),
                fixed_dilation: (1, 2, 2),
            },
        ] {
            let plan = crate::ops::plan(&x, &w, &cfg).unwrap();
            let off = zero_offsets(2, 27, plan.out_ext);
            let a = dcn1_3d_forward(&x, &w, &off, &cfg).unwrap();
            let b = conv3d_forward(&x, &w, &cfg).unwrap();
            assert!(a.iter_f64().zip(b.iter_f64()).all(|(p, q)| p == q));
        }
    }

    #[test]
    fn unit_time_shift_on_time_constant_input() {
        // Input constant along t: shifting every tap by Δt=+1 leaves values
        // unchanged on frames whose shifted taps stay in bounds.
        let base = rand_t(Shape5D::new(1, 1, 1, 4, 4).unwrap(), 3);
        let mut x = Tensor5D::<f64>::zeros(Shape5D::new(1, 1, 3, 4, 4).unwrap());
        for t in 0..3 {
            for y in 0..4 {
                for xx in 0..4 {
                    *x.at_mut(0, 0, t, y, xx) = base.at(0, 0, 0, y, xx);
                }
            }
        }
        let w = KernelWeights::<f64>::random(1, 1, (1, 3, 3), false, 4, 0.5).unwrap();
        let cfg = ConvConfig::same((1, 3, 3));
        let k = 9;
        let mut off_t = Tensor5D::<f64>::zeros(Shape5D::new(1, 3 * k, 3, 4, 4).unwrap());
        for ki in 0..k {
            for v in off_t.channel_mut(0, 3 * ki) {
                *v = 1.0;
            }
        }
        let off = OffsetMap::new(off_t, k).unwrap();
        let shifted = dcn1_3d_forward(&x, &w, &off, &cfg).unwrap();
        let plain = conv3d_forward(&x, &w, &cfg).unwrap();
        // Frames 0 and 1 sample frames 1 and 2; frame 2 samples past the end.
        for t in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    assert_eq!(shifted.at(0, 0, t, y, xx), plain.at(0, 0, t, y, xx));
                }
            }
        }
    }

    #[test]
    fn fractional_offset_blends_neighbors() {
        // 1×1×1 kernel, weight 1: an x offset of 0.5 averages two neighbors.
        let x = Tensor5D::from_vec(
            Shape5D::new(1, 1, 1, 1, 4).unwrap(),
            vec![1.0f64, 3.0, 5.0, 7.0],
        )
        .unwrap();
        let w = KernelWeights::new(1, 1, (1, 1, 1), vec![1.0], None).unwrap();
        let cfg = ConvConfig::same((1, 1, 1));
        let mut off_t = Tensor5D::<f64>::zeros(Shape5D::new(1, 3, 1, 1, 4).unwrap());
        for v in off_t.channel_mut(0, 2) {
            *v = 0.5;
        }
        let off = OffsetMap::new(off_t, 1).unwrap();
        let y = dcn1_3d_forward(&x, &w, &off, &cfg).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 3.5]);
    }

    #[test]
    fn unit_modulation_matches_unmodulated() {
        let x = rand_t(Shape5D::new(1, 2, 3, 4, 4).unwrap(), 21);
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 22, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let off_t = rand_t(Shape5D::new(1, 81, 3, 4, 4).unwrap(), 23);
        let off = OffsetMap::new(off_t, 27).unwrap();
        let ones = const_mods(1, 27, (3, 4, 4), 1.0);
        let a = dcn2_3d_forward(&x, &w, &off, &ones, &cfg).unwrap();
        let b = dcn1_3d_forward(&x, &w, &off, &cfg).unwrap();
        assert!(a.iter_f64().zip(b.iter_f64()).all(|(p, q)| p == q));
    }

    #[test]
    fn zero_modulation_leaves_bias() {
        let x = rand_t(Shape5D::new(1, 2, 2, 3, 3).unwrap(), 31);
        let w = KernelWeights::new(
            2,
            2,
            (1, 1, 1),
            vec![1.0, 2.0, 3.0, 4.0],
            Some(vec![5.0, -6.0]),
        )
        .unwrap();
        let cfg = ConvConfig::same((1, 1, 1));
        let off = zero_offsets(1, 1, (2, 3, 3));
        let zeros = const_mods(1, 1, (2, 3, 3), 0.0);
        let y = dcn2_3d_forward(&x, &w, &off, &zeros, &cfg).unwrap();
        for v in y.channel(0, 0) {
            assert_eq!(*v, 5.0);
        }
        for v in y.channel(0, 1) {
            assert_eq!(*v, -6.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar objective L = Σ u·forward; central differences at 1e-6.
        // Offsets stay off the integer lattice so the kink is never probed.
        let shape = Shape5D::new(1, 2, 2, 3, 3).unwrap();
        let x = rand_t(shape, 41);
        let w = KernelWeights::<f64>::random(2, 2, (1, 3, 3), true, 42, 0.6).unwrap();
        let cfg = ConvConfig::same((1, 3, 3));
        let k = 9;
        let off_t = Tensor5D::<f64>::new(
            Shape5D::new(1, 3 * k, 2, 3, 3).unwrap(),
            Fill::RandomNormal { seed: 43, mean: 0.25, stddev: 0.05 },
        )
        .unwrap();
        let off = OffsetMap::new(off_t, k).unwrap();
        let mod_t = Tensor5D::<f64>::new(
            Shape5D::new(1, k, 2, 3, 3).unwrap(),
            Fill::RandomNormal { seed: 44, mean: 0.8, stddev: 0.2 },
        )
        .unwrap();
        let mods = ModulationMap::new(mod_t, k).unwrap();
        let u = rand_t(shape, 45);

        let objective = |x: &Tensor5D<f64>, w: &KernelWeights<f64>, off: &OffsetMap<f64>, m: &ModulationMap<f64>| {
            let y = dcn2_3d_forward(x, w, off, m, &cfg).unwrap();
            y.iter_f64().zip(u.iter_f64()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = dcn_3d_backward(&x, &w, &off, Some(&mods), &cfg, &u).unwrap();

        let eps = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-5,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };

        for i in 0..shape.len() {
            let mut hi = x.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= eps;
            let fd = (objective(&hi, &w, &off, &mods) - objective(&lo, &w, &off, &mods))
                / (2.0 * eps);
            check(g.x.data()[i], fd, "grad_x");
        }
        for i in 0..w.weights().len() {
            let mut hi = w.clone();
            hi.weights_mut()[i] += eps;
            let mut lo = w.clone();
            lo.weights_mut()[i] -= eps;
            let fd = (objective(&x, &hi, &off, &mods) - objective(&x, &lo, &off, &mods))
                / (2.0 * eps);
            check(g.w[i], fd, "grad_w");
        }
        for i in 0..2 {
            let mut hi = w.clone();
            hi.bias_mut().unwrap()[i] += eps;
            let mut lo = w.clone();
            lo.bias_mut().unwrap()[i] -= eps;
            let fd = (objective(&x, &hi, &off, &mods) - objective(&x, &lo, &off, &mods))
                / (2.0 * eps);
            check(g.bias.as_ref().unwrap()[i], fd, "grad_bias");
        }
        for i in 0..off.tensor().shape().len() {
            let mut hi = off.tensor().clone();
            hi.data_mut()[i] += eps;
            let mut lo = off.tensor().clone();
            lo.data_mut()[i] -= eps;
            let hi = OffsetMap::new(hi, k).unwrap();
            let lo = OffsetMap::new(lo, k).unwrap();
            let fd = (objective(&x, &w, &hi, &mods) - objective(&x, &w, &lo, &mods))
                / (2.0 * eps);
            check(g.offsets.tensor().data()[i], fd, "grad_offsets");
        }
        for i in 0..mods.tensor().shape().len() {
            let mut hi = mods.tensor().clone();
            hi.data_mut()[i] += eps;
            let mut lo = mods.tensor().clone();
            lo.data_mut()[i] -= eps;
            let hi = ModulationMap::new(hi, k).unwrap();
            let lo = ModulationMap::new(lo, k).unwrap();
            let fd = (objective(&x, &w, &off, &hi) - objective(&x, &w, &off, &lo))
                / (2.0 * eps);
            check(g.modulation.as_ref().unwrap().tensor().data()[i], fd, "grad_mod");
        }
    }

    #[test]
    fn unmodulated_backward_has_no_modulation_grad() {
        let x = rand_t(Shape5D::new(1, 1, 2, 2, 2).unwrap(), 51);
        let w = KernelWeights::<f64>::random(1, 1, (1, 1, 1), false, 52, 0.5).unwrap();
        let cfg = ConvConfig::same((1, 1, 1));
        let off = zero_offsets(1, 1, (2, 2, 2));
        let up = rand_t(Shape5D::new(1, 1, 2, 2, 2).unwrap(), 53);
        let g = dcn_3d_backward(&x, &w, &off, None, &cfg, &up).unwrap();
        assert!(g.modulation.is_none());
        assert!(g.bias.is_none());
    }
}
