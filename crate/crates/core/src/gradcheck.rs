//! Central finite-difference verification for every backward path. Each op
//! builds seeded random instances whose sampling locations sit well off the
//! interpolation lattice, then every parameter slot is probed with a
//! two-sided difference of a scalar objective.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::blocks::{
    d2block_backward, d2block_forward, groupnorm_backward, groupnorm_forward, ActivationKind,
    D2Block, ModulationSetting,
};
use crate::harness::{bce_backward, bce_loss, lovasz_hinge_backward, lovasz_hinge_loss};
use crate::ops::{
    conv3d_backward, conv3d_forward, d2conv3d_backward, d2conv3d_forward, dcn1_3d_forward,
    dcn2_3d_forward, dcn_3d_backward, ConvConfig, DilationMap, ModulationMap, OffsetMap,
};
use crate::sampler::{trilinear_sample, trilinear_sample_backward, Coordinate3D, VolumeView};
use crate::tensor::{KernelWeights, Shape5D, Tensor5D};
use crate::{Error, Result};

/// Operators with a checkable backward path.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CheckableOp {
    Conv3d,
    Dcn1,
    Dcn2,
    D2conv3d,
    D2block,
    Lovasz,
    Bce,
    Groupnorm,
    Sampler,
}

impl CheckableOp {
    pub const ALL: [CheckableOp; 9] = [
        CheckableOp::Conv3d,
        CheckableOp::Dcn1,
        CheckableOp::Dcn2,
        CheckableOp::D2conv3d,
        CheckableOp::D2block,
        CheckableOp::Lovasz,
        CheckableOp::Bce,
        CheckableOp::Groupnorm,
        CheckableOp::Sampler,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckableOp::Conv3d => "conv3d",
            CheckableOp::Dcn1 => "dcn1",
            CheckableOp::Dcn2 => "dcn2",
            CheckableOp::D2conv3d => "d2conv3d",
            CheckableOp::D2block => "d2block",
            CheckableOp::Lovasz => "lovasz",
            CheckableOp::Bce => "bce",
            CheckableOp::Groupnorm => "groupnorm",
            CheckableOp::Sampler => "sampler",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck op '{s}'")))
    }

    /// Loss reductions and the bare sampler are cheap and smooth enough for
    /// a tighter bound.
    pub fn default_tolerance(self) -> f64 {
        match self {
            CheckableOp::Bce | CheckableOp::Sampler => 1e-6,
            _ => 1e-5,
        }
    }
}

/// Knobs for [`check_op`].
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    /// Central-difference half step.
    pub eps: f64,
    /// Overrides the per-op default bound when set.
    pub tolerance: Option<f64>,
    pub instances: usize,
    /// Negative control: falsifies the largest analytic gradient slot so a
    /// healthy checker must report failure.
    pub corrupt: bool,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings { eps: 1e-6, tolerance: None, instances: 20, corrupt: false }
    }
}

/// Worst relative error seen for one named tensor across all instances.
#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub checked: usize,
}

/// Outcome of checking one op.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: CheckableOp,
    pub tolerance: f64,
    pub instances: usize,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.worst_rel_err <= self.tolerance)
    }

    /// One line per tensor plus a final verdict line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tensors {
            out.push_str(&format!(
                "  {}/{}: worst rel err {:.3e} over {} slots ({} instances) .. {}\n",
                self.op.as_str(),
                t.name,
                t.worst_rel_err,
                t.checked,
                self.instances,
                if t.worst_rel_err <= self.tolerance { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "gradcheck {}: {} (tolerance {:.1e})\n",
            self.op.as_str(),
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        ));
        out
    }
}

struct Group {
    name: &'static str,
    values: Vec<f64>,
    analytic: Vec<f64>,
}

/// One random problem: named parameter groups, their analytic gradients and
/// a scalar objective over the group values.
struct Instance {
    groups: Vec<Group>,
    objective: Box<dyn Fn(&[Vec<f64>]) -> f64>,
}

fn normal_vec(rng: &mut StdRng, len: usize, mean: f64, stddev: f64) -> Vec<f64> {
    let dist = Normal::new(mean, stddev).expect("finite parameters");
    (0..len).map(|_| dist.sample(rng)).collect()
}

fn tensor_from(shape: Shape5D, values: &[f64]) -> Tensor5D<f64> {
    Tensor5D::from_vec_allow_non_finite(shape, values.to_vec()).expect("length matches shape")
}

fn dot(a: &Tensor5D<f64>, u: &Tensor5D<f64>) -> f64 {
    a.iter_f64().zip(u.iter_f64()).map(|(x, y)| x * y).sum()
}

fn kernel_from(
    template: &KernelWeights<f64>,
    w: &[f64],
    bias: &[f64],
) -> KernelWeights<f64> {
    let mut k = template.clone();
    k.weights_mut().copy_from_slice(w);
    k.bias_mut().expect("kernel has a bias").copy_from_slice(bias);
    k
}

fn conv3d_instance(shape: Option<Shape5D>, seed: u64) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(2, 2, 3, 4, 4)?);
    let cfg = ConvConfig::same((3, 3, 3));
    let c_out = 2;
    let mut rng = StdRng::seed_from_u64(seed);
    let template = KernelWeights::<f64>::zeros(c_out, s.c, cfg.kernel, true)?;
    let x = normal_vec(&mut rng, s.len(), 0.0, 1.0);
    let w = normal_vec(&mut rng, template.weights().len(), 0.0, 0.5);
    let b = normal_vec(&mut rng, c_out, 0.0, 0.5);
    let out_shape = Shape5D::new(s.n, c_out, s.t, s.h, s.w)?;
    let u = tensor_from(out_shape, &normal_vec(&mut rng, out_shape.len(), 0.0, 1.0));

    let g = conv3d_backward(
        &tensor_from(s, &x),
        &kernel_from(&template, &w, &b),
        &cfg,
        &u,
    )?;
    let groups = vec![
        Group { name: "x", values: x, analytic: g.x.into_data() },
        Group { name: "weights", values: w, analytic: g.w },
        Group { name: "bias", values: b, analytic: g.bias.expect("bias grads") },
    ];
    let objective = Box::new(move |vals: &[Vec<f64>]| {
        let y = conv3d_forward(
            &tensor_from(s, &vals[0]),
            &kernel_from(&template, &vals[1], &vals[2]),
            &cfg,
        )
        .expect("forward in objective");
        dot(&y, &u)
    });
    Ok(Instance { groups, objective })
}

fn dcn_instance(shape: Option<Shape5D>, seed: u64, modulated: bool) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(1, 2, 2, 3, 3)?);
    let cfg = ConvConfig::same((3, 3, 3));
    let k = 27;
    let c_out = 2;
    let mut rng = StdRng::seed_from_u64(seed);
    let template = KernelWeights::<f64>::zeros(c_out, s.c, cfg.kernel, true)?;
    let x = normal_vec(&mut rng, s.len(), 0.0, 1.0);
    let w = normal_vec(&mut rng, template.weights().len(), 0.0, 0.5);
    let b = normal_vec(&mut rng, c_out, 0.0, 0.5);
    let off_shape = Shape5D::new(s.n, 3 * k, s.t, s.h, s.w)?;
    // Off-lattice displacements: a quarter cell away from every grid point.
    let off = normal_vec(&mut rng, off_shape.len(), 0.25, 0.05);
    let mod_shape = Shape5D::new(s.n, k, s.t, s.h, s.w)?;
    let mods = normal_vec(&mut rng, mod_shape.len(), 1.0, 0.1);
    let out_shape = Shape5D::new(s.n, c_out, s.t, s.h, s.w)?;
    let u = tensor_from(out_shape, &normal_vec(&mut rng, out_shape.len(), 0.0, 1.0));

    let mod_map = ModulationMap::new(tensor_from(mod_shape, &mods), k)?;
    let g = dcn_3d_backward(
        &tensor_from(s, &x),
        &kernel_from(&template, &w, &b),
        &OffsetMap::new(tensor_from(off_shape, &off), k)?,
        modulated.then_some(&mod_map),
        &cfg,
        &u,
    )?;
    let mut groups = vec![
        Group { name: "x", values: x, analytic: g.x.into_data() },
        Group { name: "weights", values: w, analytic: g.w },
        Group { name: "bias", values: b, analytic: g.bias.expect("bias grads") },
        Group { name: "offsets", values: off, analytic: g.offsets.into_tensor().into_data() },
    ];
    if modulated {
        groups.push(Group {
            name: "modulation",
            values: mods,
            analytic: g.modulation.expect("modulation grads").into_tensor().into_data(),
        });
    }
    let objective = Box::new(move |vals: &[Vec<f64>]| {
        let x = tensor_from(s, &vals[0]);
        let kern = kernel_from(&template, &vals[1], &vals[2]);
        let off = OffsetMap::new(tensor_from(off_shape, &vals[3]), k).expect("offset shape");
        let y = if modulated {
            let m = ModulationMap::new(tensor_from(mod_shape, &vals[4]), k).expect("mod shape");
            dcn2_3d_forward(&x, &kern, &off, &m, &cfg).expect("forward in objective")
        } else {
            dcn1_3d_forward(&x, &kern, &off, &cfg).expect("forward in objective")
        };
        dot(&y, &u)
    });
    Ok(Instance { groups, objective })
}

fn d2conv3d_instance(shape: Option<Shape5D>, seed: u64) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(1, 2, 2, 3, 3)?);
    let cfg = ConvConfig::same((3, 3, 3));
    let k = 27;
    let c_out = 2;
    let mut rng = StdRng::seed_from_u64(seed);
    let template = KernelWeights::<f64>::zeros(c_out, s.c, cfg.kernel, true)?;
    let x = normal_vec(&mut rng, s.len(), 0.0, 1.0);
    let w = normal_vec(&mut rng, template.weights().len(), 0.0, 0.5);
    let b = normal_vec(&mut rng, c_out, 0.0, 0.5);
    let dil_shape = Shape5D::new(s.n, 3, s.t, s.h, s.w)?;
    // Rates spread around 1 keep the non-center taps clear of the lattice.
    let dil = normal_vec(&mut rng, dil_shape.len(), 1.0, 0.15);
    let mod_shape = Shape5D::new(s.n, k, s.t, s.h, s.w)?;
    let mods = normal_vec(&mut rng, mod_shape.len(), 1.0, 0.1);
    let out_shape = Shape5D::new(s.n, c_out, s.t, s.h, s.w)?;
    let u = tensor_from(out_shape, &normal_vec(&mut rng, out_shape.len(), 0.0, 1.0));

    let g = d2conv3d_backward(
        &tensor_from(s, &x),
        &kernel_from(&template, &w, &b),
        &DilationMap::new(tensor_from(dil_shape, &dil))?,
        &ModulationMap::new(tensor_from(mod_shape, &mods), k)?,
        &cfg,
        &u,
    )?;
    let groups = vec![
        Group { name: "x", values: x, analytic: g.x.into_data() },
        Group { name: "weights", values: w, analytic: g.w },
        Group { name: "bias", values: b, analytic: g.bias.expect("bias grads") },
        Group { name: "dilation", values: dil, analytic: g.dilation.into_tensor().into_data() },
        Group {
            name: "modulation",
            values: mods,
            analytic: g.modulation.into_tensor().into_data(),
        },
    ];
    let objective = Box::new(move |vals: &[Vec<f64>]| {
        let y = d2conv3d_forward(
            &tensor_from(s, &vals[0]),
            &kernel_from(&template, &vals[1], &vals[2]),
            &DilationMap::new(tensor_from(dil_shape, &vals[3])).expect("dilation shape"),
            &ModulationMap::new(tensor_from(mod_shape, &vals[4]), k).expect("mod shape"),
            &cfg,
        )
        .expect("forward in objective");
        dot(&y, &u)
    });
    Ok(Instance { groups, objective })
}

fn d2block_instance(shape: Option<Shape5D>, seed: u64) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(1, 1, 3, 4, 4)?);
    let cfg = ConvConfig::same((3, 3, 3));
    let mut rng = StdRng::seed_from_u64(seed);
    let mut block = D2Block::random(
        1,
        s.c,
        (3, 3, 3),
        cfg,
        ActivationKind::OnePlusElu,
        ModulationSetting::Compensated,
        seed,
        0.5,
    )?;
    // Predictor biases push the rates and modulation well off the identity
    // point so the sampled locations leave the lattice.
    for v in block.f_d.bias_mut().expect("predictor bias") {
        *v = 0.45;
    }
    for v in block.f_m.bias_mut().expect("predictor bias") {
        *v = 0.2;
    }
    let x = normal_vec(&mut rng, s.len(), 0.0, 1.0);
    let out_shape = Shape5D::new(s.n, 1, s.t, s.h, s.w)?;
    let u = tensor_from(out_shape, &normal_vec(&mut rng, out_shape.len(), 0.0, 1.0));

    let g = d2block_backward(&tensor_from(s, &x), &block, &u)?;
    let groups = vec![
        Group { name: "x", values: x, analytic: g.x.into_data() },
        Group {
            name: "main_w",
            values: block.main.weights().to_vec(),
            analytic: g.main_w,
        },
        Group {
            name: "main_bias",
            values: block.main.bias().expect("bias").to_vec(),
            analytic: g.main_bias.expect("bias grads"),
        },
        Group { name: "f_d_w", values: block.f_d.weights().to_vec(), analytic: g.f_d_w },
        Group {
            name: "f_d_bias",
            values: block.f_d.bias().expect("bias").to_vec(),
            analytic: g.f_d_bias,
        },
        Group { name: "f_m_w", values: block.f_m.weights().to_vec(), analytic: g.f_m_w },
        Group {
            name: "f_m_bias",
            values: block.f_m.bias().expect("bias").to_vec(),
            analytic: g.f_m_bias,
        },
    ];
    let objective = Box::new(move |vals: &[Vec<f64>]| {
        let mut b = block.clone();
        b.main.weights_mut().copy_from_slice(&vals[1]);
        b.main.bias_mut().expect("bias").copy_from_slice(&vals[2]);
        b.f_d.weights_mut().copy_from_slice(&vals[3]);
        b.f_d.bias_mut().expect("bias").copy_from_slice(&vals[4]);
        b.f_m.weights_mut().copy_from_slice(&vals[5]);
        b.f_m.bias_mut().expect("bias").copy_from_slice(&vals[6]);
        let y = d2block_forward(&tensor_from(s, &vals[0]), &b, None)
            .expect("forward in objective");
        dot(&y, &u)
    });
    Ok(Instance { groups, objective })
}

fn groupnorm_instance(shape: Option<Shape5D>, seed: u64) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(2, 4, 2, 3, 3)?);
    let groups_n = if s.c % 2 == 0 { 2 } else { 1 };
    let eps = 1e-5;
    let mut rng = StdRng::seed_from_u64(seed);
    let x = normal_vec(&mut rng, s.len(), 0.0, 1.0);
    let gamma = normal_vec(&mut rng, s.c, 1.0, 0.2);
    let beta = normal_vec(&mut rng, s.c, 0.0, 0.2);
    let u = tensor_from(s, &normal_vec(&mut rng, s.len(), 0.0, 1.0));

    let g = groupnorm_backward(&tensor_from(s, &x), groups_n, &gamma, eps, &u)?;
    let groups = vec![
        Group { name: "x", values: x, analytic: g.x.into_data() },
        Group { name: "gamma", values: gamma, analytic: g.gamma },
        Group { name: "beta", values: beta, analytic: g.beta },
    ];
    let objective = Box::new(move |vals: &[Vec<f64>]| {
        let y = groupnorm_forward(&tensor_from(s, &vals[0]), groups_n, &vals[1], &vals[2], eps)
            .expect("forward in objective");
        dot(&y, &u)
    });
    Ok(Instance { groups, objective })
}

fn loss_instance(shape: Option<Shape5D>, seed: u64, op: CheckableOp) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(1, 1, 2, 4, 4)?);
    let mut rng = StdRng::seed_from_u64(seed);
    let logits = normal_vec(&mut rng, s.len(), 0.0, 1.0);
    let labels = tensor_from(
        s,
        &(0..s.len())
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect::<Vec<_>>(),
    );

    let (analytic, objective): (Vec<f64>, Box<dyn Fn(&[Vec<f64>]) -> f64>) =
        if op == CheckableOp::Lovasz {
            let g = lovasz_hinge_backward(&tensor_from(s, &logits), &labels)?;
            let lb = labels.clone();
            (
                g.into_data(),
                Box::new(move |vals: &[Vec<f64>]| {
                    lovasz_hinge_loss(&tensor_from(s, &vals[0]), &lb).expect("loss")
                }),
            )
        } else {
            let g = bce_backward(&tensor_from(s, &logits), &labels)?;
            let lb = labels.clone();
            (
                g.into_data(),
                Box::new(move |vals: &[Vec<f64>]| {
                    bce_loss(&tensor_from(s, &vals[0]), &lb).expect("loss")
                }),
            )
        };
    Ok(Instance {
        groups: vec![Group { name: "logits", values: logits, analytic }],
        objective,
    })
}

fn sampler_instance(shape: Option<Shape5D>, seed: u64) -> Result<Instance> {
    let s = shape.unwrap_or(Shape5D::new(1, 1, 3, 4, 4)?);
    let ext = s.extents();
    let probes = 5;
    let mut rng = StdRng::seed_from_u64(seed);
    let vol = normal_vec(&mut rng, ext.0 * ext.1 * ext.2, 0.0, 1.0);
    // Integer base plus a fraction in [0.2, 0.8]: never within FD reach of
    // the lattice.
    let mut coords = Vec::with_capacity(3 * probes);
    for _ in 0..probes {
        for n in [ext.0, ext.1, ext.2] {
            let base = rng.gen_range(0..n.max(2) - 1) as f64;
            coords.push(base + rng.gen_range(0.2..0.8));
        }
    }
    let weights: Vec<f64> = normal_vec(&mut rng, probes, 0.0, 1.0);

    let mut vol_grad = vec![0.0; vol.len()];
    let mut coord_grad = vec![0.0; coords.len()];
    {
        let view = VolumeView::new(&vol, ext);
        for j in 0..probes {
            let p = Coordinate3D::new(coords[3 * j], coords[3 * j + 1], coords[3 * j + 2]);
            let (gv, gp) = trilinear_sample_backward(&view, p, weights[j]);
            for e in 0..gv.len {
                let (idx, val) = gv.entries[e];
                vol_grad[idx] += val;
            }
            coord_grad[3 * j] += gp.t;
            coord_grad[3 * j + 1] += gp.y;
            coord_grad[3 * j + 2] += gp.x;
        }
    }
    let groups = vec![
        Group { name: "volume", values: vol, analytic: vol_grad },
        Group { name: "coords", values: coords, analytic: coord_grad },
    ];
    let objective = Box::new(move |vals: &[Vec<f64>]| {
        let view = VolumeView::new(&vals[0], ext);
        (0..probes)
            .map(|j| {
                let p = Coordinate3D::new(
                    vals[1][3 * j],
                    vals[1][3 * j + 1],
                    vals[1][3 * j + 2],
                );
                weights[j] * trilinear_sample(&view, p)
            })
            .sum()
    });
    Ok(Instance { groups, objective })
}

fn build_instance(op: CheckableOp, shape: Option<Shape5D>, seed: u64) -> Result<Instance> {
    match op {
        CheckableOp::Conv3d => conv3d_instance(shape, seed),
        CheckableOp::Dcn1 => dcn_instance(shape, seed, false),
        CheckableOp::Dcn2 => dcn_instance(shape, seed, true),
        CheckableOp::D2conv3d => d2conv3d_instance(shape, seed),
        CheckableOp::D2block => d2block_instance(shape, seed),
        CheckableOp::Lovasz | CheckableOp::Bce => loss_instance(shape, seed, op),
        CheckableOp::Groupnorm => groupnorm_instance(shape, seed),
        CheckableOp::Sampler => sampler_instance(shape, seed),
    }
}

/// Checks one op over seeded random instances. The relative error of slot
/// `i` is |a−n| / max(|a|, |n|, 1e−3) against the central difference n.
pub fn check_op(
    op: CheckableOp,
    shape: Option<Shape5D>,
    seed: u64,
    settings: &CheckSettings,
) -> Result<GradCheckReport> {
    if settings.instances == 0 {
        return Err(Error::Config("instances must be at least 1".into()));
    }
    if !(settings.eps.is_finite() && settings.eps > 0.0) {
        return Err(Error::Config("eps must be finite and positive".into()));
    }
    let tolerance = settings.tolerance.unwrap_or(op.default_tolerance());
    let mut tensors: Vec<TensorReport> = Vec::new();

    for inst in 0..settings.instances {
        let mut instance = build_instance(op, shape, seed.wrapping_add(inst as u64 * 7919))?;
        if settings.corrupt {
            let mut worst = (0usize, 0usize, 0.0f64);
            for (gi, g) in instance.groups.iter().enumerate() {
                for (si, a) in g.analytic.iter().enumerate() {
                    if a.abs() > worst.2 {
                        worst = (gi, si, a.abs());
                    }
                }
            }
            instance.groups[worst.0].analytic[worst.1] += 1.0 + worst.2;
        }

        let values: Vec<Vec<f64>> = instance.groups.iter().map(|g| g.values.clone()).collect();
        for (gi, group) in instance.groups.iter().enumerate() {
            if tensors.len() <= gi {
                tensors.push(TensorReport {
                    name: group.name.to_string(),
                    worst_rel_err: 0.0,
                    checked: 0,
                });
            }
            let report = &mut tensors[gi];
            let mut probe = values.clone();
            for i in 0..group.values.len() {
                probe[gi][i] = group.values[i] + settings.eps;
                let hi = (instance.objective)(&probe);
                probe[gi][i] = group.values[i] - settings.eps;
                let lo = (instance.objective)(&probe);
                probe[gi][i] = group.values[i];
                let numeric = (hi - lo) / (2.0 * settings.eps);
                let a = group.analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                report.worst_rel_err = report.worst_rel_err.max(rel);
                report.checked += 1;
            }
        }
    }

    Ok(GradCheckReport { op, tolerance, instances: settings.instances, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_with_default_settings() {
        let settings = CheckSettings { instances: 3, ..CheckSettings::default() };
        for op in CheckableOp::ALL {
            let report = check_op(op, None, 424242, &settings).unwrap();
            assert!(report.passed(), "{}", report.render());
            assert!(!report.tensors.is_empty());
            assert!(report.tensors.iter().all(|t| t.checked > 0));
        }
    }

    #[test]
    fn corruption_is_caught() {
        let settings =
            CheckSettings { instances: 1, corrupt: true, ..CheckSettings::default() };
        for op in [CheckableOp::Conv3d, CheckableOp::D2conv3d, CheckableOp::Lovasz] {
            let report = check_op(op, None, 99, &settings).unwrap();
            assert!(!report.passed(), "corrupted {} still passed", op.as_str());
        }
    }

    #[test]
    fn custom_shapes_and_tolerances_are_honored() {
        let settings = CheckSettings {
            instances: 1,
            tolerance: Some(0.5),
            ..CheckSettings::default()
        };
        let shape = Shape5D::new(1, 2, 2, 4, 4).unwrap();
        let report = check_op(CheckableOp::Conv3d, Some(shape), 7, &settings).unwrap();
        assert_eq!(report.tolerance, 0.5);
        assert_eq!(report.tensors[0].checked, shape.len());

        assert!(check_op(
            CheckableOp::Conv3d,
            None,
            7,
            &CheckSettings { instances: 0, ..CheckSettings::default() }
        )
        .is_err());
    }

    #[test]
    fn op_names_round_trip() {
        for op in CheckableOp::ALL {
            assert_eq!(CheckableOp::from_str(op.as_str()).unwrap(), op);
        }
        assert!(CheckableOp::from_str("conv4d").is_err());
    }
}
