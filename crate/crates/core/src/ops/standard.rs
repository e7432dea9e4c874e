//! Standard and fixed-dilation 3D cross-correlation on the integer lattice.

use rayon::prelude::*;

use crate::ops::{check_upstream, dot_row, lattice_tables, plan, widen, ConvConfig};
use crate::tensor::{Element, KernelWeights, Tensor5D};
use crate::Result;

/// Gradients of [`conv3d_forward`]: `w` shares the weight buffer layout
/// (c_out, c_in, k_t, k_h, k_w); `bias` is present iff the kernel has one.
#[derive(Clone, Debug)]
pub struct ConvGrads<E: Element> {
    pub x: Tensor5D<E>,
    pub w: Vec<E>,
    pub bias: Option<Vec<E>>,
}

/// Dense cross-correlation with zero padding, stride and fixed dilation.
pub fn conv3d_forward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    cfg: &ConvConfig,
) -> Result<Tensor5D<E>> {
    let plan = plan(x, w, cfg)?;
    let ww = widen(w);
    let [tab_t, tab_y, tab_x] = lattice_tables(&plan, cfg);
    let (kt, kh, kw) = cfg.kernel;
    let (_, ih, iw) = plan.in_ext;
    let (out_t, out_h, out_w) = plan.out_ext;
    let k = plan.grid.len();
    let in_vol = plan.in_ext.0 * ih * iw;
    let x_data = x.data();

    // One task per (sample, output frame); planes are written back in task
    // order so the parallel schedule never affects the result.
    let planes: Vec<Vec<f64>> = (0..plan.n * out_t)
        .into_par_iter()
        .map(|task| {
            let n = task / out_t;
            let ot = task % out_t;
            let sample = &x_data[n * plan.c_in * in_vol..(n + 1) * plan.c_in * in_vol];
            let mut plane = vec![0.0f64; plan.c_out * out_h * out_w];
            let mut z = vec![0.0f64; plan.c_in * k];
            let t_row = &tab_t[ot * kt..(ot + 1) * kt];
            for oy in 0..out_h {
                let y_row = &tab_y[oy * kh..(oy + 1) * kh];
                for ox in 0..out_w {
                    let x_row = &tab_x[ox * kw..(ox + 1) * kw];
                    gather_lattice(sample, plan.c_in, in_vol, ih, iw, t_row, y_row, x_row, &mut z);
                    for co in 0..plan.c_out {
                        let row = &ww.mat[co * ww.row..(co + 1) * ww.row];
                        plane[(co * out_h + oy) * out_w + ox] = dot_row(row, &z, ww.bias[co]);
                    }
                }
            }
            plane
        })
        .collect();

    Ok(scatter_planes::<E>(&plan, out_t, out_h, out_w, planes))
}

/// Writes per-(n, ot) plane buffers into an output tensor.
pub(crate) fn scatter_planes<E: Element>(
    plan: &crate::ops::Plan,
    out_t: usize,
    out_h: usize,
    out_w: usize,
    planes: Vec<Vec<f64>>,
) -> Tensor5D<E> {
    let mut out = Tensor5D::<E>::zeros(plan.out_shape);
    let frame = out_h * out_w;
    let data = out.data_mut();
    for (task, plane) in planes.into_iter().enumerate() {
        let n = task / out_t;
        let ot = task % out_t;
        for co in 0..plan.c_out {
            let dst = ((n * plan.c_out + co) * out_t + ot) * frame;
            for (d, &v) in data[dst..dst + frame].iter_mut().zip(&plane[co * frame..]) {
                *d = E::from_f64(v);
            }
        }
    }
    out
}

/// Fills z[ci·K + k] with the lattice value at kernel point k (0 outside).
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn gather_lattice<E: Element>(
    sample: &[E],
    c_in: usize,
    in_vol: usize,
    ih: usize,
    iw: usize,
    t_row: &[i64],
    y_row: &[i64],
    x_row: &[i64],
    z: &mut [f64],
) {
    let k = t_row.len() * y_row.len() * x_row.len();
    let mut ki = 0usize;
    for &it in t_row {
        for &iy in y_row {
            for &ix in x_row {
                if it < 0 || iy < 0 || ix < 0 {
                    for ci in 0..c_in {
                        z[ci * k + ki] = 0.0;
                    }
                } else {
                    let flat = ((it as usize) * ih + iy as usize) * iw + ix as usize;
                    for ci in 0..c_in {
                        z[ci * k + ki] = sample[ci * in_vol + flat].to_f64();
                    }
                }
                ki += 1;
            }
        }
    }
}

/// Analytic gradients of [`conv3d_forward`] w.r.t. input, weights and bias.
pub fn conv3d_backward<E: Element>(
    x: &Tensor5D<E>,
    w: &KernelWeights<E>,
    cfg: &ConvConfig,
    upstream: &Tensor5D<E>,
) -> Result<ConvGrads<E>> {
    let plan = plan(x, w, cfg)?;
    check_upstream(&plan, upstream.shape())?;
    let ww = widen(w);
    let [tab_t, tab_y, tab_x] = lattice_tables(&plan, cfg);
    let (kt, kh, kw) = cfg.kernel;
    let (_, ih, iw) = plan.in_ext;
    let (out_t, out_h, out_w) = plan.out_ext;
    let k = plan.grid.len();
    let in_vol = plan.in_ext.0 * ih * iw;
    let x_data = x.data();
    let up = upstream.data();

    let mut gx = vec![0.0f64; x_data.len()];
    let mut gw = vec![0.0f64; ww.mat.len()];
    let mut gb = vec![0.0f64; plan.c_out];
    let mut z = vec![0.0f64; plan.c_in * k];
    let mut s = vec![0.0f64; plan.c_in * k];

    for n in 0..plan.n {
        let sample = &x_data[n * plan.c_in * in_vol..(n + 1) * plan.c_in * in_vol];
        for ot in 0..out_t {
            let t_row = &tab_t[ot * kt..(ot + 1) * kt];
            for oy in 0..out_h {
                let y_row = &tab_y[oy * kh..(oy + 1) * kh];
                for ox in 0..out_w {
                    let x_row = &tab_x[ox * kw..(ox + 1) * kw];
                    gather_lattice(sample, plan.c_in, in_vol, ih, iw, t_row, y_row, x_row, &mut z);
                    s.iter_mut().for_each(|v| *v = 0.0);
                    for co in 0..plan.c_out {
                        let g = up[((n * plan.c_out + co) * out_t + ot) * out_h * out_w
                                + oy * out_w
                                + ox]
                            .to_f64();
                        if g == 0.0 {
                            continue;
                        }
                        gb[co] += g;
                        let row = &ww.mat[co * ww.row..(co + 1) * ww.row];
                        let grow = &mut gw[co * ww.row..(co + 1) * ww.row];
                        for j in 0..ww.row {
                            grow[j] += g * z[j];
                            s[j] += g * row[j];
                        }
                    }
                    // Scatter s back through the lattice gather.
                    let mut ki = 0usize;
                    for &it in t_row {
                        for &iy in y_row {
                            for &ix in x_row {
                                if it >= 0 && iy >= 0 && ix >= 0 {
                                    let flat = ((it as usize) * ih + iy as usize) * iw + ix as usize;
                                    for ci in 0..plan.c_in {
                                        gx[n * plan.c_in * in_vol + ci * in_vol + flat] +=
                                            s[ci * k + ki];
                                    }
                                }
                                ki += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        x: Tensor5D::from_vec_allow_non_finite(
            x.shape(),
            gx.into_iter().map(E::from_f64).collect(),
        )?,
        w: gw.into_iter().map(E::from_f64).collect(),
        bias: ww.has_bias.then(|| gb.into_iter().map(E::from_f64).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Shape5D};

    fn ones(shape: Shape5D) -> Tensor5D<f64> {
        Tensor5D::new(shape, Fill::Value(1.0)).unwrap()
    }

    #[test]
    fn all_ones_counts_kernel_points() {
        let x = ones(Shape5D::new(1, 1, 3, 3, 3).unwrap());
        let w = KernelWeights::new(1, 1, (3, 3, 3), vec![1.0; 27], None).unwrap();
        let cfg = ConvConfig {
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
            fixed_dilation: (1, 1, 1),
        };
        let y = conv3d_forward(&x, &w, &cfg).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 1, 1, 1]);
        assert_eq!(y.data()[0], 27.0);
    }

    #[test]
    fn identity_kernel_same_padding() {
        let x = Tensor5D::<f64>::new(
            Shape5D::new(1, 1, 4, 5, 5).unwrap(),
            Fill::RandomNormal { seed: 6, mean: 0.0, stddev: 1.0 },
        )
        .unwrap();
        let mut wv = vec![0.0f64; 27];
        wv[13] = 1.0; // center of the (t,y,x) row-major 3×3×3 grid
        let w = KernelWeights::new(1, 1, (3, 3, 3), wv, None).unwrap();
        let y = conv3d_forward(&x, &w, &ConvConfig::same((3, 3, 3))).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn strided_output_indexing() {
        // Stride 2 picks every other center; verify one value by hand.
        let x = Tensor5D::from_vec(
            Shape5D::new(1, 1, 1, 1, 5).unwrap(),
            vec![1.0f64, 2.0, 3.0, 4.0, 5.0],
        )
        .unwrap();
        let w = KernelWeights::new(1, 1, (1, 1, 3), vec![1.0, 10.0, 100.0], None).unwrap();
        let cfg = ConvConfig {
            kernel: (1, 1, 3),
            stride: (1, 1, 2),
            padding: (0, 0, 0),
            fixed_dilation: (1, 1, 1),
        };
        let y = conv3d_forward(&x, &w, &cfg).unwrap();
        // centers at x=1 and x=3: 1+20+300 = 321, 3+40+500 = 543
        assert_eq!(y.data(), &[321.0, 543.0]);
    }

    #[test]
    fn bias_added_per_out_channel() {
        let x = ones(Shape5D::new(1, 1, 1, 1, 1).unwrap());
        let w = KernelWeights::new(2, 1, (1, 1, 1), vec![2.0, 3.0], Some(vec![10.0, 20.0])).unwrap();
        let cfg = ConvConfig::same((1, 1, 1));
        let y = conv3d_forward(&x, &w, &cfg).unwrap();
        assert_eq!(y.data(), &[12.0, 23.0]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let x = ones(Shape5D::new(1, 2, 2, 3, 3).unwrap());
        let w = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 1, 0.5).unwrap();
        let cfg = ConvConfig::same((3, 3, 3));
        let up = Tensor5D::<f64>::zeros(Shape5D::new(1, 2, 2, 3, 3).unwrap());
        let g = conv3d_backward(&x, &w, &cfg, &up).unwrap();
        assert!(g.x.iter_f64().all(|v| v == 0.0));
        assert!(g.w.iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_grad_w_closed_form() {
        // 1×1×1 kernel, stride 1, no pad: grad_w[o,i] = Σ upstream[o]·x[i].
        let x = Tensor5D::<f64>::new(
            Shape5D::new(2, 2, 2, 2, 2).unwrap(),
            Fill::RandomNormal { seed: 8, mean: 0.0, stddev: 1.0 },
        )
        .unwrap();
        let w = KernelWeights::<f64>::random(3, 2, (1, 1, 1), false, 9, 0.5).unwrap();
        let cfg = ConvConfig::same((1, 1, 1));
        let up = Tensor5D::<f64>::new(
            Shape5D::new(2, 3, 2, 2, 2).unwrap(),
            Fill::RandomNormal { seed: 10, mean: 0.0, stddev: 1.0 },
        )
        .unwrap();
        let g = conv3d_backward(&x, &w, &cfg, &up).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let mut expect = 0.0;
                for n in 0..2 {
                    for (uv, xv) in up.channel(n, o).iter().zip(x.channel(n, i)) {
                        expect += uv * xv;
                    }
                }
                let got = g.w[o * 2 + i];
                assert!((got - expect).abs() < 1e-10, "grad_w[{o},{i}] {got} vs {expect}");
            }
        }
    }
}
