//! Dynamically dilated 3D convolution: one learned dilation triple per
//! output point scales the whole kernel grid, and a learned modulation value
//! scales each kernel-point term.

use rayon::prelude::*;

use crate::ops::deform::gather_sampled;
use crate::ops::standard::scatter_planes;
use crate::ops::{
    center_tables, check_map_grid, check_upstream, dot_row, plan, widen, ConvConfig, DilationMap,
    ModulationMap, Plan,
};
use crate::sampler::{trilinear_taps, Coordinate3D, Taps};
use crate::tensor::{Element, KernelWeights, Tensor5D};
use crate::{Error, Result};

/// Gradients of [`d2conv3d_forward`].
#[derive(Clone, Debug)]
pub struct D2Grads<E: Element> {
    pub x: Tensor5D<E>,
    pub w: Vec<E>,
    pub bias: Option<Vec<E>>,
    pub dilation: DilationMap<E>,
    pub modulation: ModulationMap<E>,
}

fn check_dynamic_maps<E: Element>(
    plan: &Plan,
    dilation: &DilationMap<E>,
    modulation: &ModulationMap<E>,
) -> Result<()> {
    check_map_grid(plan, dilation.shape(), "dilation")?;
    check_map_grid(plan, modulation.shape(), "modulation")?;
    let k = plan.grid.len();
    if modulation.shape().c != k {
        return Err(Error::ShapeMismatch(format!(
            "modulation map has {} channels, kernel has K={k} points",
            modulation.shape().c
        )));
    }
    Ok(())
}

/// Convolution with a per-output-point dilation triple and per-kernel-point
/// modulation. The sample for kernel point p_n lands at
/// `center(p0) + p_n ⊙ D(p0)` and is interpolated trilinearly.
pub fn d2conv3d_forward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    dilation: &DilationMap<E>,
    modulation: &ModulationMap<E>,
    cfg: &ConvConfig,
) -> Result<Tensor5D<E>> {
    let plan = plan(x, w, cfg)?;
    check_dynamic_maps(&plan, dilation, modulation)?;
    let ww = widen(w);
    let k = plan.grid.len();
    let grid: Vec<[f64; 3]> = plan
        .grid
        .offsets
        .iter()
        .map(|&(t, y, x)| [t as f64, y as f64, x as f64])
        .collect();
    let centers = center_tables(&plan, cfg);
    let (out_t, out_h, out_w) = plan.out_ext;
    let out_vol = out_t * out_h * out_w;
    let in_ext = plan.in_ext;
    let in_vol = in_ext.0 * in_ext.1 * in_ext.2;
    let x_data = x.data();
    let dil = dilation.tensor().data();
    let md = modulation.tensor().data();

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
                    let d = [
                        dil[(n * 3) * out_vol + pt].to_f64(),
                        dil[(n * 3 + 1) * out_vol + pt].to_f64(),
                        dil[(n * 3 + 2) * out_vol + pt].to_f64(),
                    ];
                    for ki in 0..k {
                        let loc = Coordinate3D::new(
                            centers[0][ot] as f64 + grid[ki][0] * d[0],
                            centers[1][oy] as f64 + grid[ki][1] * d[1],
                            centers[2][ox] as f64 + grid[ki][2] * d[2],
                        );
                        taps[ki] = trilinear_taps(in_ext, loc);
                        mods[ki] = md[(n * k + ki) * out_vol + pt].to_f64();
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

/// Analytic gradients of [`d2conv3d_forward`]. The dilation gradient at p0
/// chains each sample's coordinate gradient through its grid offset p_n.
pub fn d2conv3d_backward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    dilation: &DilationMap<E>,
    modulation: &ModulationMap<E>,
    cfg: &ConvConfig,
    upstream: &Tensor5D<E>,
) -> Result<D2Grads<E>> {
    let plan = plan(x, w, cfg)?;
    check_dynamic_maps(&plan, dilation, modulation)?;
    check_upstream(&plan, upstream.shape())?;
    let ww = widen(w);
    let k = plan.grid.len();
    let grid: Vec<[f64; 3]> = plan
        .grid
        .offsets
        .iter()
        .map(|&(t, y, x)| [t as f64, y as f64, x as f64])
        .collect();
    let centers = center_tables(&plan, cfg);
    let (out_t, out_h, out_w) = plan.out_ext;
    let out_vol = out_t * out_h * out_w;
    let in_ext = plan.in_ext;
    let in_vol = in_ext.0 * in_ext.1 * in_ext.2;
    let x_data = x.data();
    let dil = dilation.tensor().data();
    let md = modulation.tensor().data();
    let up = upstream.data();

    let mut gx = vec![0.0f64; x_data.len()];
    let mut gw = vec![0.0f64; ww.mat.len()];
    let mut gb = vec![0.0f64; plan.c_out];
    let mut gdil = vec![0.0f64; dil.len()];
    let mut gmod = vec![0.0f64; md.len()];

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
                    let d = [
                        dil[(n * 3) * out_vol + pt].to_f64(),
                        dil[(n * 3 + 1) * out_vol + pt].to_f64(),
                        dil[(n * 3 + 2) * out_vol + pt].to_f64(),
                    ];
                    for ki in 0..k {
                        let loc = Coordinate3D::new(
                            centers[0][ot] as f64 + grid[ki][0] * d[0],
                            centers[1][oy] as f64 + grid[ki][1] * d[1],
                            centers[2][ox] as f64 + grid[ki][2] * d[2],
                        );
                        taps[ki] = trilinear_taps(in_ext, loc);
                        mods[ki] = md[(n * k + ki) * out_vol + pt].to_f64();
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
                    let mut dg = [0.0f64; 3];
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
                        dg[0] += locg[0] * grid[ki][0];
                        dg[1] += locg[1] * grid[ki][1];
                        dg[2] += locg[2] * grid[ki][2];
                        gmod[(n * k + ki) * out_vol + pt] += gm;
                    }
                    gdil[(n * 3) * out_vol + pt] += dg[0];
                    gdil[(n * 3 + 1) * out_vol + pt] += dg[1];
                    gdil[(n * 3 + 2) * out_vol + pt] += dg[2];
                }
            }
        }
    }

    Ok(D2Grads {
        x: Tensor5D::from_vec_allow_non_finite(
            x.shape(),
            gx.into_iter().map(E::from_f64).collect(),
        )?,
        w: gw.into_iter().map(E::from_f64).collect(),
        bias: ww.has_bias.then(|| gb.into_iter().map(E::from_f64).collect()),
        dilation: DilationMap::new(Tensor5D::from_vec_allow_non_finite(
            dilation.shape(),
            gdil.into_iter().map(E::from_f64).collect(),
        )?)?,
        modulation: ModulationMap::new(
            Tensor5D::from_vec_allow_non_finite(
                modulation.shape(),
                gmod.into_iter().map(E::from_f64).collect(),
            )?,
            k,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv3d_backward, conv3d_forward};
    use crate::tensor::{Fill, Shape5D};

    fn rand_t(shape: Shape5D, seed: u64) -> Tensor5D<f64> {
        Tensor5D::new(shape, Fill::RandomNormal { seed, mean: 0.0, stddev: 1.0 }).unwrap()
    }

    fn const_dil(n: usize, ext: (usize, usize, usize), d: (f64, f64, f64)) -> DilationMap<f64> {
        let mut t = Tensor5D::<f64>::zeros(Shape5D::new(n, 3, ext.0, ext.1, ext.2).unwrap());
        for s in 0..n {
            for v in t.channel_mut(s, 0) {
                *v = d.0;
            }
            for v in t.channel_mut(s, 1) {
                *v = d.1;
            }
            for v in t.channel_mut(s, 2) {
                *v = d.2;
            }
        }
        DilationMap::new(t).unwrap()
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
    fn unit_dilation_unit_modulation_match_lattice_conv() {
        let x = rand_t(Shape5D::new(2, 2, 4, 5, 5).unwrap(), 61);
        let w = KernelWeights::<f64>::random(3, 2, (3, 3, 3), true, 62, 0.5).unwrap();
        for cfg in [
            ConvConfig::same((3, 3, 3)),
            ConvConfig {
                kernel: (3, 3, 3),
                stride: (1, 2, 2),
                padding: (1, 1, 1),
                fixed_dilation: (2, 2, 2),
            },
        ] {
            let plan = crate::ops::plan(&x, &w, &cfg).unwrap();
            let fd = cfg.fixed_dilation;
            let dil = const_dil(2, plan.out_ext, (fd.0 as f64, fd.1 as f64, fd.2 as f64));
            let mods = const_mods(2, 27, plan.out_ext, 1.0);
            let a = d2conv3d_forward(&x, &w, &dil, &mods, &cfg).unwrap();
            let b = conv3d_forward(&x, &w, &cfg).unwrap();
            assert!(a.iter_f64().zip(b.iter_f64()).all(|(p, q)| p == q));
        }
    }

    #[test]
    fn zero_dilation_specializes_to_pointwise() {
        // Every sample collapses onto the grid center, so the output equals
        // a 1×1×1 convolution whose weight is the kernel summed over K.
        let x = rand_t(Shape5D::new(1, 2, 3, 4, 4).unwrap(), 63);
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), false, 64, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let dil = const_dil(1, (3, 4, 4), (0.0, 0.0, 0.0));
        let mods = const_mods(1, 27, (3, 4, 4), 1.0);
        let y = d2conv3d_forward(&x, &w, &dil, &mods, &cfg).unwrap();

        let mut summed = vec![0.0f64; 2 * 2];
        for co in 0..2 {
            for ci in 0..2 {
                for ki in 0..27 {
                    summed[co * 2 + ci] += w.weights()[(co * 2 + ci) * 27 + ki];
                }
            }
        }
        let w1 = KernelWeights::new(2, 2, (1, 1, 1), summed, None).unwrap();
        let want = conv3d_forward(&x, &w1, &ConvConfig::same((1, 1, 1))).unwrap();
        for (a, b) in y.iter_f64().zip(want.iter_f64()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_temporal_dilation_collapses_to_per_frame_2d() {
        // d = (0, dy, dx) ignores all temporal taps: it equals a (1,3,3)
        // kernel holding the temporal slice sum, applied with the same dy/dx.
        let x = rand_t(Shape5D::new(1, 2, 3, 5, 5).unwrap(), 65);
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), false, 66, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let dil = const_dil(1, (3, 5, 5), (0.0, 0.7, 0.9));
        let mods = const_mods(1, 27, (3, 5, 5), 1.0);
        let y = d2conv3d_forward(&x, &w, &dil, &mods, &cfg).unwrap();

        let mut collapsed = vec![0.0f64; 2 * 2 * 9];
        for co in 0..2 {
            for ci in 0..2 {
                for kt in 0..3 {
                    for s in 0..9 {
                        collapsed[(co * 2 + ci) * 9 + s] +=
                            w.weights()[(co * 2 + ci) * 27 + kt * 9 + s];
                    }
                }
            }
        }
        let w2d = KernelWeights::new(2, 2, (1, 3, 3), collapsed, None).unwrap();
        let cfg2d = ConvConfig::same((1, 3, 3));
        let dil2d = const_dil(1, (3, 5, 5), (0.0, 0.7, 0.9));
        let mods2d = const_mods(1, 9, (3, 5, 5), 1.0);
        let want = d2conv3d_forward(&x, &w2d, &dil2d, &mods2d, &cfg2d).unwrap();
        for (a, b) in y.iter_f64().zip(want.iter_f64()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn unit_reduction_matches_lattice_backward_grad_x() {
        let shape = Shape5D::new(1, 2, 3, 4, 4).unwrap();
        let x = rand_t(shape, 67);
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 68, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let dil = const_dil(1, (3, 4, 4), (1.0, 1.0, 1.0));
        let mods = const_mods(1, 27, (3, 4, 4), 1.0);
        let up = rand_t(shape, 69);
        let a = d2conv3d_backward(&x, &w, &dil, &mods, &cfg, &up).unwrap();
        let b = conv3d_backward(&x, &w, &cfg, &up).unwrap();
        for (p, q) in a.x.iter_f64().zip(b.x.iter_f64()) {
            assert!((p - q).abs() < 1e-12);
        }
        for (p, q) in a.w.iter().zip(b.w.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Dilations live in (0.15, 0.85) so no sample sits on the lattice.
        let shape = Shape5D::new(1, 2, 2, 3, 3).unwrap();
        let x = rand_t(shape, 71);
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 72, 0.6).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let dil_t = Tensor5D::<f64>::new(
            Shape5D::new(1, 3, 2, 3, 3).unwrap(),
            Fill::RandomNormal { seed: 73, mean: 0.5, stddev: 0.08 },
        )
        .unwrap();
        let dil = DilationMap::new(dil_t).unwrap();
        let mod_t = Tensor5D::<f64>::new(
            Shape5D::new(1, 27, 2, 3, 3).unwrap(),
            Fill::RandomNormal { seed: 74, mean: 0.9, stddev: 0.2 },
        )
        .unwrap();
        let mods = ModulationMap::new(mod_t, 27).unwrap();
        let u = rand_t(shape, 75);

        let objective = |x: &Tensor5D<f64>,
                         w: &KernelWeights<f64>,
                         d: &DilationMap<f64>,
                         m: &ModulationMap<f64>| {
            let y = d2conv3d_forward(x, w, d, m, &cfg).unwrap();
            y.iter_f64().zip(u.iter_f64()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = d2conv3d_backward(&x, &w, &dil, &mods, &cfg, &u).unwrap();

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
            let fd = (objective(&hi, &w, &dil, &mods) - objective(&lo, &w, &dil, &mods))
                / (2.0 * eps);
            check(g.x.data()[i], fd, "grad_x");
        }
        for i in 0..w.weights().len() {
            let mut hi = w.clone();
            hi.weights_mut()[i] += eps;
            let mut lo = w.clone();
            lo.weights_mut()[i] -= eps;
            let fd = (objective(&x, &hi, &dil, &mods) - objective(&x, &lo, &dil, &mods))
                / (2.0 * eps);
            check(g.w[i], fd, "grad_w");
        }
        for i in 0..dil.tensor().shape().len() {
            let mut hi = dil.tensor().clone();
            hi.data_mut()[i] += eps;
            let mut lo = dil.tensor().clone();
            lo.data_mut()[i] -= eps;
            let hi = DilationMap::new(hi).unwrap();
            let lo = DilationMap::new(lo).unwrap();
            let fd = (objective(&x, &w, &hi, &mods) - objective(&x, &w, &lo, &mods))
                / (2.0 * eps);
            check(g.dilation.tensor().data()[i], fd, "grad_dil");
        }
        for i in 0..mods.tensor().shape().len() {
            let mut hi = mods.tensor().clone();
            hi.data_mut()[i] += eps;
            let mut lo = mods.tensor().clone();
            lo.data_mut()[i] -= eps;
            let hi = ModulationMap::new(hi, 27).unwrap();
            let lo = ModulationMap::new(lo, 27).unwrap();
            let fd = (objective(&x, &w, &dil, &hi) - objective(&x, &w, &dil, &lo))
                / (2.0 * eps);
            check(g.modulation.tensor().data()[i], fd, "grad_mod");
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let shape = Shape5D::new(1, 1, 2, 2, 2).unwrap();
        let x = rand_t(shape, 81);
        let w = KernelWeights::<f64>::random(1, 1, (1, 1, 1), true, 82, 0.5).unwrap();
        let cfg = ConvConfig::same((1, 1, 1));
        let dil = const_dil(1, (2, 2, 2), (0.4, 0.4, 0.4));
        let mods = const_mods(1, 1, (2, 2, 2), 0.7);
        let up = Tensor5D::<f64>::zeros(shape);
        let g = d2conv3d_backward(&x, &w, &dil, &mods, &cfg, &up).unwrap();
        assert!(g.x.iter_f64().all(|v| v == 0.0));
        assert!(g.w.iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
        assert!(g.dilation.tensor().iter_f64().all(|v| v == 0.0));
        assert!(g.modulation.tensor().iter_f64().all(|v| v == 0.0));
    }
}
