//! The toy encoder-decoder: strided Conv3D stages down, upsample + a
//! swappable decoder operator back up, a 1×1×1 head to one logit channel.
//! All four decoder operators start from the same main weights with
//! zero-initialized predictors, so freshly built variants are numerically
//! identical until training moves them apart.

use std::collections::BTreeMap;
use std::path::Path;

use crate::blocks::{
    d2block_backward, d2block_forward, dcnblock_backward, dcnblock_forward, groupnorm_backward,
    groupnorm_forward, load_d2block, load_dcnblock, read_kernel, save_d2block, save_dcnblock,
    write_kernel, ActivationKind, D2Block, DcnBlock, ModulationSetting,
};
use crate::ops::{
    conv3d_backward, conv3d_forward, oob_stats_for, ConvConfig, DcnVariant, OobMaps, OobMode,
};
use crate::sampler::SamplingStats;
use crate::tensor::{KernelWeights, Shape5D, Tensor5D};
use crate::{Error, Result};

/// Which operator the decoder stages use.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OperatorVariant {
    Standard,
    Dcn1,
    Dcn2,
    D2,
}

impl OperatorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorVariant::Standard => "standard",
            OperatorVariant::Dcn1 => "dcn1",
            OperatorVariant::Dcn2 => "dcn2",
            OperatorVariant::D2 => "d2",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(OperatorVariant::Standard),
            "dcn1" => Ok(OperatorVariant::Dcn1),
            "dcn2" => Ok(OperatorVariant::Dcn2),
            "d2" => Ok(OperatorVariant::D2),
            other => Err(Error::Config(format!("unknown operator variant '{other}'"))),
        }
    }

    pub const ALL: [OperatorVariant; 4] = [
        OperatorVariant::Standard,
        OperatorVariant::Dcn1,
        OperatorVariant::Dcn2,
        OperatorVariant::D2,
    ];
}

/// Spatial ×2 upsampling flavor used between decoder stages.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UpsampleKind {
    Nearest,
    Trilinear,
}

impl UpsampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleKind::Nearest => "nearest",
            UpsampleKind::Trilinear => "trilinear",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleKind::Nearest),
            "trilinear" => Ok(UpsampleKind::Trilinear),
            other => Err(Error::Config(format!("unknown upsample kind '{other}'"))),
        }
    }
}

/// Per-axis interpolation taps for ×2 upsampling with half-pixel centers;
/// indices are border-clamped.
fn linear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let frac = src - f;
            let i0 = (f.max(0.0) as usize).min(in_len - 1);
            let i1 = ((f + 1.0).max(0.0) as usize).min(in_len - 1);
            (i0, i1, frac)
        })
        .collect()
}

/// Doubles height and width; frames are untouched.
pub fn upsample2x_forward(x: &Tensor5D<f64>, kind: UpsampleKind) -> Result<Tensor5D<f64>> {
    let s = x.shape();
    let out_shape = Shape5D::new(s.n, s.c, s.t, s.h * 2, s.w * 2)?;
    let mut out = Tensor5D::<f64>::zeros(out_shape);
    let (oh, ow) = (s.h * 2, s.w * 2);
    let ytaps = linear_taps(oh, s.h);
    let xtaps = linear_taps(ow, s.w);
    for n in 0..s.n {
        for c in 0..s.c {
            for t in 0..s.t {
                let src_base = ((n * s.c + c) * s.t + t) * s.h * s.w;
                let dst_base = ((n * s.c + c) * s.t + t) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = match kind {
                            UpsampleKind::Nearest => {
                                x.data()[src_base + (oy / 2) * s.w + ox / 2]
                            }
                            UpsampleKind::Trilinear => {
                                let (y0, y1, fy) = ytaps[oy];
                                let (x0, x1, fx) = xtaps[ox];
                                let at = |y: usize, xx: usize| x.data()[src_base + y * s.w + xx];
                                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
                            }
                        };
                        out.data_mut()[dst_base + oy * ow + ox] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample2x_forward`]: scatters upstream gradients back onto
/// the coarse grid.
pub fn upsample2x_backward(
    upstream: &Tensor5D<f64>,
    in_shape: Shape5D,
    kind: UpsampleKind,
) -> Result<Tensor5D<f64>> {
    let s = upstream.shape();
    if s.h != in_shape.h * 2 || s.w != in_shape.w * 2 || s.n != in_shape.n
        || s.c != in_shape.c || s.t != in_shape.t
    {
        return Err(Error::ShapeMismatch(format!(
            "upstream {s} is not the 2x upsampling of {in_shape}"
        )));
    }
    let mut out = Tensor5D::<f64>::zeros(in_shape);
    let ytaps = linear_taps(s.h, in_shape.h);
    let xtaps = linear_taps(s.w, in_shape.w);
    for n in 0..s.n {
        for c in 0..s.c {
            for t in 0..s.t {
                let dst_base = ((n * s.c + c) * s.t + t) * in_shape.h * in_shape.w;
                let src_base = ((n * s.c + c) * s.t + t) * s.h * s.w;
                for oy in 0..s.h {
                    for ox in 0..s.w {
                        let g = upstream.data()[src_base + oy * s.w + ox];
                        match kind {
                            UpsampleKind::Nearest => {
                                out.data_mut()
                                    [dst_base + (oy / 2) * in_shape.w + ox / 2] += g;
                            }
                            UpsampleKind::Trilinear => {
                                let (y0, y1, fy) = ytaps[oy];
                                let (x0, x1, fx) = xtaps[ox];
                                let mut add = |y: usize, xx: usize, w: f64| {
                                    out.data_mut()[dst_base + y * in_shape.w + xx] += g * w;
                                };
                                add(y0, x0, (1.0 - fy) * (1.0 - fx));
                                add(y0, x1, (1.0 - fy) * fx);
                                add(y1, x0, fy * (1.0 - fx));
                                add(y1, x1, fy * fx);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One decoder operator: a plain convolution or one of the dynamic blocks.
#[derive(Clone, PartialEq, Debug)]
pub enum DecoderOp {
    Standard(KernelWeights<f64>, ConvConfig),
    Dcn(DcnBlock<f64>),
    D2(D2Block<f64>),
}

impl DecoderOp {
    pub fn out_channels(&self) -> usize {
        match self {
            DecoderOp::Standard(w, _) => w.c_out,
            DecoderOp::Dcn(b) => b.main.c_out,
            DecoderOp::D2(b) => b.main.c_out,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor5D<f64>,
        stats: Option<&mut SamplingStats>,
    ) -> Result<Tensor5D<f64>> {
        match self {
            DecoderOp::Standard(w, cfg) => {
                if let Some(st) = stats {
                    let acc = oob_stats_for::<f64>(
                        &st.label.clone(),
                        x.shape().extents(),
                        x.shape().n,
                        cfg,
                        &OobMaps::Lattice,
                        OobMode::InteriorOnly,
                    )?;
                    st.merge(&acc.pooled);
                }
                conv3d_forward(x, w, cfg)
            }
            DecoderOp::Dcn(b) => dcnblock_forward(x, b, stats),
            DecoderOp::D2(b) => d2block_forward(x, b, stats),
        }
    }

    /// Input gradient plus the flat parameter gradient in this op's
    /// [`DecoderOp::push_params`] order.
    pub fn backward(
        &self,
        x: &Tensor5D<f64>,
        upstream: &Tensor5D<f64>,
    ) -> Result<(Tensor5D<f64>, Vec<f64>)> {
        match self {
            DecoderOp::Standard(w, cfg) => {
                let g = conv3d_backward(x, w, cfg, upstream)?;
                let mut flat = g.w;
                flat.extend(g.bias.expect("decoder convs carry a bias"));
                Ok((g.x, flat))
            }
            DecoderOp::Dcn(b) => {
                let g = dcnblock_backward(x, b, upstream)?;
                let mut flat = g.main_w;
                flat.extend(g.main_bias.expect("decoder blocks carry a bias"));
                flat.extend(g.f_o_w);
                flat.extend(g.f_o_bias);
                flat.extend(g.f_m_w);
                flat.extend(g.f_m_bias);
                Ok((g.x, flat))
            }
            DecoderOp::D2(b) => {
                let g = d2block_backward(x, b, upstream)?;
                let mut flat = g.main_w;
                flat.extend(g.main_bias.expect("decoder blocks carry a bias"));
                flat.extend(g.f_d_w);
                flat.extend(g.f_d_bias);
                flat.extend(g.f_m_w);
                flat.extend(g.f_m_bias);
                Ok((g.x, flat))
            }
        }
    }

    fn kernels(&self) -> Vec<&KernelWeights<f64>> {
        match self {
            DecoderOp::Standard(w, _) => vec![w],
            DecoderOp::Dcn(b) => vec![&b.main, &b.f_o, &b.f_m],
            DecoderOp::D2(b) => vec![&b.main, &b.f_d, &b.f_m],
        }
    }

    fn kernels_mut(&mut self) -> Vec<&mut KernelWeights<f64>> {
        match self {
            DecoderOp::Standard(w, _) => vec![w],
            DecoderOp::Dcn(b) => vec![&mut b.main, &mut b.f_o, &mut b.f_m],
            DecoderOp::D2(b) => vec![&mut b.main, &mut b.f_d, &mut b.f_m],
        }
    }
}

/// One encoder stage: strided conv, GroupNorm affine, ReLU.
#[derive(Clone, PartialEq, Debug)]
pub struct EncStage {
    pub w: KernelWeights<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// One decoder stage: ×2 upsample, operator, GroupNorm affine, ReLU.
#[derive(Clone, PartialEq, Debug)]
pub struct DecStage {
    pub op: DecoderOp,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Construction recipe for [`ToyNet`].
#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Output channels of each encoder stage; the decoder mirrors them.
    pub enc_channels: Vec<usize>,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub variant: OperatorVariant,
    pub upsample: UpsampleKind,
    pub seed: u64,
}

/// The full network. Logits keep the input's (T, H, W).
#[derive(Clone, PartialEq, Debug)]
pub struct ToyNet {
    pub enc: Vec<EncStage>,
    pub dec: Vec<DecStage>,
    pub head: KernelWeights<f64>,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub upsample: UpsampleKind,
    pub variant: OperatorVariant,
}

fn enc_cfg() -> ConvConfig {
    ConvConfig {
        kernel: (3, 3, 3),
        stride: (1, 2, 2),
        padding: (1, 1, 1),
        fixed_dilation: (1, 1, 1),
    }
}

fn head_cfg() -> ConvConfig {
    ConvConfig {
        kernel: (1, 1, 1),
        stride: (1, 1, 1),
        padding: (0, 0, 0),
        fixed_dilation: (1, 1, 1),
    }
}

fn he_stddev(c_in: usize, kernel: (usize, usize, usize)) -> f64 {
    (2.0 / (c_in * kernel.0 * kernel.1 * kernel.2) as f64).sqrt()
}

fn relu(x: &Tensor5D<f64>) -> Tensor5D<f64> {
    Tensor5D::from_vec_allow_non_finite(
        x.shape(),
        x.iter_f64().map(|v| v.max(0.0)).collect(),
    )
    .expect("same length")
}

fn relu_backward(pre: &Tensor5D<f64>, upstream: &Tensor5D<f64>) -> Tensor5D<f64> {
    Tensor5D::from_vec_allow_non_finite(
        pre.shape(),
        pre.iter_f64()
            .zip(upstream.iter_f64())
            .map(|(v, g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
    .expect("same length")
}

/// Maps predicted by one decoder stage; fields are None when the stage's
/// operator has no such map.
#[derive(Clone, Debug)]
pub struct DecoderDynamics {
    pub label: String,
    /// Extents of the stage's (upsampled) input volume.
    pub in_extents: (usize, usize, usize),
    pub batch: usize,
    /// (d_t, d_y, d_x) rate triples.
    pub dilation: Option<Tensor5D<f64>>,
    /// Per-kernel-point displacement triples, 3K channels.
    pub offsets: Option<Tensor5D<f64>>,
    /// Per-kernel-point scale factors, K channels.
    pub modulation: Option<Tensor5D<f64>>,
}

/// Everything backward needs, captured during [`ToyNet::forward_cached`].
pub struct ForwardCache {
    enc_in: Vec<Tensor5D<f64>>,
    enc_conv: Vec<Tensor5D<f64>>,
    enc_gn: Vec<Tensor5D<f64>>,
    dec_in: Vec<Tensor5D<f64>>,
    dec_up: Vec<Tensor5D<f64>>,
    dec_op: Vec<Tensor5D<f64>>,
    dec_gn: Vec<Tensor5D<f64>>,
    head_in: Tensor5D<f64>,
}

impl ToyNet {
    /// Builds a seeded random net. The main decoder weights are drawn
    /// identically for every variant; predictor kernels start at zero.
    pub fn new(cfg: &NetConfig) -> Result<ToyNet> {
        if cfg.enc_channels.is_empty() {
            return Err(Error::Config("need at least one encoder stage".into()));
        }
        for &c in &cfg.enc_channels {
            if c == 0 || c % cfg.gn_groups != 0 {
                return Err(Error::Config(format!(
                    "stage width {c} is not divisible into {} norm groups",
                    cfg.gn_groups
                )));
            }
        }
        let kernel = (3, 3, 3);
        let mut enc = Vec::new();
        let mut prev = 1usize;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            enc.push(EncStage {
                w: KernelWeights::random(
                    c,
                    prev,
                    kernel,
                    true,
                    cfg.seed.wrapping_add(1000 + i as u64),
                    he_stddev(prev, kernel),
                )?,
                gamma: vec![1.0; c],
                beta: vec![0.0; c],
            });
            prev = c;
        }

        let n = cfg.enc_channels.len();
        let mut dec = Vec::new();
        for j in 0..n {
            let src = n - 1 - j;
            let in_c = cfg.enc_channels[src];
            let out_c = if src == 0 { cfg.enc_channels[0] } else { cfg.enc_channels[src - 1] };
            let main = KernelWeights::random(
                out_c,
                in_c,
                kernel,
                true,
                cfg.seed.wrapping_add(2000 + j as u64),
                he_stddev(in_c, kernel),
            )?;
            let conv_cfg = ConvConfig::same(kernel);
            let k = kernel.0 * kernel.1 * kernel.2;
            let op = match cfg.variant {
                OperatorVariant::Standard => DecoderOp::Standard(main, conv_cfg),
                OperatorVariant::Dcn1 => DecoderOp::Dcn(DcnBlock::new(
                    main,
                    conv_cfg,
                    KernelWeights::zeros(3 * k, in_c, kernel, true)?,
                    KernelWeights::zeros(k, in_c, kernel, true)?,
                    DcnVariant::V1,
                    ModulationSetting::Disabled,
                )?),
                OperatorVariant::Dcn2 => DecoderOp::Dcn(DcnBlock::new(
                    main,
                    conv_cfg,
                    KernelWeights::zeros(3 * k, in_c, kernel, true)?,
                    KernelWeights::zeros(k, in_c, kernel, true)?,
                    DcnVariant::V2,
                    ModulationSetting::Compensated,
                )?),
                OperatorVariant::D2 => DecoderOp::D2(D2Block::new(
                    main,
                    conv_cfg,
                    KernelWeights::zeros(3, in_c, kernel, true)?,
                    KernelWeights::zeros(k, in_c, kernel, true)?,
                    ActivationKind::OnePlusElu,
                    ModulationSetting::Compensated,
                )?),
            };
            dec.push(DecStage { op, gamma: vec![1.0; out_c], beta: vec![0.0; out_c] });
        }

        let head = KernelWeights::random(
            1,
            cfg.enc_channels[0],
            (1, 1, 1),
            true,
            cfg.seed.wrapping_add(3000),
            he_stddev(cfg.enc_channels[0], (1, 1, 1)),
        )?;

        Ok(ToyNet {
            enc,
            dec,
            head,
            gn_groups: cfg.gn_groups,
            gn_eps: cfg.gn_eps,
            upsample: cfg.upsample,
            variant: cfg.variant,
        })
    }

    fn check_input(&self, x: &Tensor5D<f64>) -> Result<()> {
        let s = x.shape();
        let div = 1usize << self.enc.len();
        if s.h % div != 0 || s.w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {div} for {} stages",
                s.h,
                s.w,
                self.enc.len()
            )));
        }
        Ok(())
    }

    /// Logits with the same (T, H, W) as the input clip.
    pub fn forward(&self, x: &Tensor5D<f64>) -> Result<Tensor5D<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass retaining every intermediate needed by
    /// [`ToyNet::backward`].
    pub fn forward_cached(&self, x: &Tensor5D<f64>) -> Result<(Tensor5D<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            enc_in: Vec::new(),
            enc_conv: Vec::new(),
            enc_gn: Vec::new(),
            dec_in: Vec::new(),
            dec_up: Vec::new(),
            dec_op: Vec::new(),
            dec_gn: Vec::new(),
            head_in: x.clone(),
        };
        let mut cur = x.clone();
        for stage in &self.enc {
            cache.enc_in.push(cur.clone());
            let conv = conv3d_forward(&cur, &stage.w, &enc_cfg())?;
            let gn = groupnorm_forward(&conv, self.gn_groups, &stage.gamma, &stage.beta, self.gn_eps)?;
            cache.enc_conv.push(conv);
            cur = relu(&gn);
            cache.enc_gn.push(gn);
        }
        for stage in &self.dec {
            cache.dec_in.push(cur.clone());
            let up = upsample2x_forward(&cur, self.upsample)?;
            let opy = stage.op.forward(&up, None)?;
            cache.dec_up.push(up);
            let gn = groupnorm_forward(&opy, self.gn_groups, &stage.gamma, &stage.beta, self.gn_eps)?;
            cache.dec_op.push(opy);
            cur = relu(&gn);
            cache.dec_gn.push(gn);
        }
        cache.head_in = cur.clone();
        let logits = conv3d_forward(&cur, &self.head, &head_cfg())?;
        Ok((logits, cache))
    }

    /// Forward pass that also classifies every decoder sampling location,
    /// one stats bucket per decoder stage.
    pub fn forward_with_stats(
        &self,
        x: &Tensor5D<f64>,
    ) -> Result<(Tensor5D<f64>, Vec<SamplingStats>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for stage in &self.enc {
            let conv = conv3d_forward(&cur, &stage.w, &enc_cfg())?;
            let gn = groupnorm_forward(&conv, self.gn_groups, &stage.gamma, &stage.beta, self.gn_eps)?;
            cur = relu(&gn);
        }
        let mut all_stats = Vec::new();
        for (j, stage) in self.dec.iter().enumerate() {
            let up = upsample2x_forward(&cur, self.upsample)?;
            let mut stats =
                SamplingStats::new(&format!("dec{j}/{}", self.variant.as_str()));
            let opy = stage.op.forward(&up, Some(&mut stats))?;
            all_stats.push(stats);
            let gn = groupnorm_forward(&opy, self.gn_groups, &stage.gamma, &stage.beta, self.gn_eps)?;
            cur = relu(&gn);
        }
        let logits = conv3d_forward(&cur, &self.head, &head_cfg())?;
        Ok((logits, all_stats))
    }

    /// Dynamic-sampling maps each decoder stage predicts for this input.
    pub fn decoder_dynamics(&self, x: &Tensor5D<f64>) -> Result<Vec<DecoderDynamics>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for stage in &self.enc {
            let conv = conv3d_forward(&cur, &stage.w, &enc_cfg())?;
            let gn = groupnorm_forward(&conv, self.gn_groups, &stage.gamma, &stage.beta, self.gn_eps)?;
            cur = relu(&gn);
        }
        let mut out = Vec::with_capacity(self.dec.len());
        for (j, stage) in self.dec.iter().enumerate() {
            let up = upsample2x_forward(&cur, self.upsample)?;
            let label = format!("dec{j}/{}", self.variant.as_str());
            let in_extents = up.shape().extents();
            let batch = up.shape().n;
            out.push(match &stage.op {
                DecoderOp::Standard(..) => DecoderDynamics {
                    label,
                    in_extents,
                    batch,
                    dilation: None,
                    offsets: None,
                    modulation: None,
                },
                DecoderOp::Dcn(b) => DecoderDynamics {
                    label,
                    in_extents,
                    batch,
                    dilation: None,
                    offsets: Some(b.predicted_offsets(&up)?.into_tensor()),
                    modulation: b.predicted_modulation(&up)?.map(|m| m.into_tensor()),
                },
                DecoderOp::D2(b) => DecoderDynamics {
                    label,
                    in_extents,
                    batch,
                    dilation: Some(b.predicted_dilation(&up)?.into_tensor()),
                    offsets: None,
                    modulation: Some(b.predicted_modulation(&up)?.into_tensor()),
                },
            });
            let opy = stage.op.forward(&up, None)?;
            let gn = groupnorm_forward(&opy, self.gn_groups, &stage.gamma, &stage.beta, self.gn_eps)?;
            cur = relu(&gn);
        }
        Ok(out)
    }

    /// Flat gradient (aligned with [`ToyNet::params_flat`]) for an upstream
    /// logit gradient.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor5D<f64>) -> Result<Vec<f64>> {
        let hg = conv3d_backward(&cache.head_in, &self.head, &head_cfg(), dlogits)?;
        let mut head_flat = hg.w;
        head_flat.extend(hg.bias.expect("head carries a bias"));

        let mut d = hg.x;
        let mut dec_flats = vec![Vec::new(); self.dec.len()];
        for (j, stage) in self.dec.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.dec_gn[j], &d);
            let gn_g = groupnorm_backward(
                &cache.dec_op[j],
                self.gn_groups,
                &stage.gamma,
                self.gn_eps,
                &d_pre,
            )?;
            let (dx_op, mut op_flat) = stage.op.backward(&cache.dec_up[j], &gn_g.x)?;
            op_flat.extend(gn_g.gamma);
            op_flat.extend(gn_g.beta);
            dec_flats[j] = op_flat;
            d = upsample2x_backward(&dx_op, cache.dec_in[j].shape(), self.upsample)?;
        }

        let mut enc_flats = vec![Vec::new(); self.enc.len()];
        for (i, stage) in self.enc.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.enc_gn[i], &d);
            let gn_g = groupnorm_backward(
                &cache.enc_conv[i],
                self.gn_groups,
                &stage.gamma,
                self.gn_eps,
                &d_pre,
            )?;
            let cg = conv3d_backward(&cache.enc_in[i], &stage.w, &enc_cfg(), &gn_g.x)?;
            let mut flat = cg.w;
            flat.extend(cg.bias.expect("encoder convs carry a bias"));
            flat.extend(gn_g.gamma);
            flat.extend(gn_g.beta);
            enc_flats[i] = flat;
            d = cg.x;
        }

        let mut out = Vec::with_capacity(self.num_params());
        for flat in enc_flats {
            out.extend(flat);
        }
        for flat in dec_flats {
            out.extend(flat);
        }
        out.extend(head_flat);
        debug_assert_eq!(out.len(), self.num_params());
        Ok(out)
    }

    fn walk<'a>(&'a self, f: &mut impl FnMut(&'a [f64])) {
        for stage in &self.enc {
            f(stage.w.weights());
            f(stage.w.bias().expect("encoder convs carry a bias"));
            f(&stage.gamma);
            f(&stage.beta);
        }
        for stage in &self.dec {
            for k in stage.op.kernels() {
                f(k.weights());
                f(k.bias().expect("decoder kernels carry a bias"));
            }
            f(&stage.gamma);
            f(&stage.beta);
        }
        f(self.head.weights());
        f(self.head.bias().expect("head carries a bias"));
    }

    fn walk_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for stage in &mut self.enc {
            f(stage.w.weights_mut());
            f(stage.w.bias_mut().expect("encoder convs carry a bias"));
            f(&mut stage.gamma);
            f(&mut stage.beta);
        }
        for stage in &mut self.dec {
            for k in stage.op.kernels_mut() {
                f(k.weights_mut());
                f(k.bias_mut().expect("decoder kernels carry a bias"));
            }
            f(&mut stage.gamma);
            f(&mut stage.beta);
        }
        f(self.head.weights_mut());
        f(self.head.bias_mut().expect("head carries a bias"));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |s| n += s.len());
        n
    }

    /// All parameters as one flat vector; order matches
    /// [`ToyNet::backward`] and [`ToyNet::set_params_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.walk(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0usize;
        self.walk_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }
}

fn write_vec(dir: &Path, name: &str, v: &[f64]) -> Result<()> {
    let t = Tensor5D::from_vec_allow_non_finite(
        Shape5D::new(1, 1, 1, 1, v.len())?,
        v.to_vec(),
    )?;
    crate::npy::npy_write(&t, &dir.join(format!("{name}.npy")))
}

fn read_vec(dir: &Path, name: &str) -> Result<Vec<f64>> {
    match crate::npy::npy_read(&dir.join(format!("{name}.npy")))? {
        crate::tensor::DynTensor::F64(t) => Ok(t.into_data()),
        crate::tensor::DynTensor::F32(_) => {
            Err(Error::Config(format!("{name} stored as f32, expected f64")))
        }
    }
}

/// Serializes a net as nested NPY directories plus a manifest.
pub fn save_net(net: &ToyNet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut enc_channels = Vec::new();
    for (i, stage) in net.enc.iter().enumerate() {
        let sdir = dir.join(format!("enc{i}"));
        std::fs::create_dir_all(&sdir)?;
        let mut arrays = BTreeMap::new();
        write_kernel(&sdir, "conv", &stage.w, &mut arrays)?;
        write_vec(&sdir, "gn_gamma", &stage.gamma)?;
        write_vec(&sdir, "gn_beta", &stage.beta)?;
        enc_channels.push(stage.w.c_out);
    }
    for (j, stage) in net.dec.iter().enumerate() {
        let sdir = dir.join(format!("dec{j}"));
        std::fs::create_dir_all(&sdir)?;
        match &stage.op {
            DecoderOp::Standard(w, _) => {
                let mut arrays = BTreeMap::new();
                write_kernel(&sdir, "conv", w, &mut arrays)?;
            }
            DecoderOp::Dcn(b) => save_dcnblock(b, &sdir)?,
            DecoderOp::D2(b) => save_d2block(b, &sdir)?,
        }
        write_vec(&sdir, "gn_gamma", &stage.gamma)?;
        write_vec(&sdir, "gn_beta", &stage.beta)?;
    }
    let hdir = dir.join("head");
    std::fs::create_dir_all(&hdir)?;
    let mut arrays = BTreeMap::new();
    write_kernel(&hdir, "conv", &net.head, &mut arrays)?;

    let manifest = serde_json::json!({
        "kind": "toy_net",
        "width": "f64",
        "variant": net.variant.as_str(),
        "upsample": net.upsample.as_str(),
        "gn_groups": net.gn_groups,
        "gn_eps": net.gn_eps,
        "enc_channels": enc_channels,
    });
    std::fs::write(dir.join("net_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_str<'a>(v: &'a serde_json::Value, key: &str) -> Result<&'a str> {
    v.get(key)
        .and_then(|x| x.as_str())
        .ok_or_else(|| Error::Config(format!("net manifest missing '{key}'")))
}

/// Loads a net saved by [`save_net`].
pub fn load_net(dir: &Path) -> Result<ToyNet> {
    let text = std::fs::read_to_string(dir.join("net_manifest.json"))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if manifest_str(&v, "kind")? != "toy_net" {
        return Err(Error::Config("not a toy net checkpoint".into()));
    }
    let variant = OperatorVariant::from_str(manifest_str(&v, "variant")?)?;
    let upsample = UpsampleKind::from_str(manifest_str(&v, "upsample")?)?;
    let gn_groups = v
        .get("gn_groups")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| Error::Config("net manifest missing 'gn_groups'".into()))?
        as usize;
    let gn_eps = v
        .get("gn_eps")
        .and_then(|x| x.as_f64())
        .ok_or_else(|| Error::Config("net manifest missing 'gn_eps'".into()))?;
    let enc_channels: Vec<usize> = v
        .get("enc_channels")
        .and_then(|x| x.as_array())
        .ok_or_else(|| Error::Config("net manifest missing 'enc_channels'".into()))?
        .iter()
        .filter_map(|x| x.as_u64().map(|u| u as usize))
        .collect();

    let mut enc = Vec::new();
    for i in 0..enc_channels.len() {
        let sdir = dir.join(format!("enc{i}"));
        enc.push(EncStage {
            w: read_kernel::<f64>(&sdir, "conv", true)?,
            gamma: read_vec(&sdir, "gn_gamma")?,
            beta: read_vec(&sdir, "gn_beta")?,
        });
    }
    let mut dec = Vec::new();
    for j in 0..enc_channels.len() {
        let sdir = dir.join(format!("dec{j}"));
        let op = match variant {
            OperatorVariant::Standard => DecoderOp::Standard(
                read_kernel::<f64>(&sdir, "conv", true)?,
                ConvConfig::same((3, 3, 3)),
            ),
            OperatorVariant::Dcn1 | OperatorVariant::Dcn2 => {
                DecoderOp::Dcn(load_dcnblock::<f64>(&sdir)?)
            }
            OperatorVariant::D2 => DecoderOp::D2(load_d2block::<f64>(&sdir)?),
        };
        dec.push(DecStage {
            op,
            gamma: read_vec(&sdir, "gn_gamma")?,
            beta: read_vec(&sdir, "gn_beta")?,
        });
    }
    let head = read_kernel::<f64>(&dir.join("head"), "conv", true)?;
    Ok(ToyNet { enc, dec, head, gn_groups, gn_eps, upsample, variant })
}
