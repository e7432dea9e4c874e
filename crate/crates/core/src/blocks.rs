//! Dynamic convolution blocks: a main operator plus small predictor
//! convolutions that derive its per-point maps from the same input.
//!
//! A block bundles the main kernel with `f_d` (dilation predictor, 1–3
//! output channels) and `f_m` (modulation predictor, K output channels), or
//! with `f_o` (offset predictor, 3K channels) for the offset-deformed
//! variants. Predictors are 3×3×3, stride-matched to the main operator and
//! same-padded so their output lands on the main operator's output grid.
//!
//! Zero-initialized predictors must leave the block behaving exactly like
//! the plain convolution it replaces. The dilation activation guarantees
//! D ≡ 1 at raw 0 for the `one_plus_*` kinds; for modulation, a plain
//! sigmoid gives 0.5 at raw 0, so the default `Compensated` setting uses
//! 2·sigmoid (range [0,2], 1 at zero) while `Strict` keeps sigmoid's [0,1].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ops::{
    conv3d_backward, conv3d_forward, d2conv3d_backward, d2conv3d_forward, dcn1_3d_forward,
    dcn2_3d_forward, dcn_3d_backward, oob_stats_for, ConvConfig, DcnVariant, DilationMap,
    ModulationMap, OffsetMap, OobMaps, OobMode,
};
use crate::sampler::SamplingStats;
use crate::tensor::{Element, KernelWeights, ScalarWidth, Shape5D, Tensor5D};
use crate::{Error, Result};

/// Elementwise nonlinearity applied to the raw dilation predictor output.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ActivationKind {
    None,
    Relu,
    OnePlusRelu,
    OnePlusElu,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::None => "none",
            ActivationKind::Relu => "relu",
            ActivationKind::OnePlusRelu => "one_plus_relu",
            ActivationKind::OnePlusElu => "one_plus_elu",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ActivationKind::None),
            "relu" => Ok(ActivationKind::Relu),
            "one_plus_relu" => Ok(ActivationKind::OnePlusRelu),
            "one_plus_elu" => Ok(ActivationKind::OnePlusElu),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

/// Activation value at `v`.
pub fn activation_value(kind: ActivationKind, v: f64) -> f64 {
    match kind {
        ActivationKind::None => v,
        ActivationKind::Relu => v.max(0.0),
        ActivationKind::OnePlusRelu => 1.0 + v.max(0.0),
        // 1 + elu(v) equals exp(v) on the negative side; computing it that
        // way avoids the cancellation in 1 + (exp(v) - 1), and the clamp to
        // the smallest normal keeps the output strictly positive even where
        // exp underflows.
        ActivationKind::OnePlusElu => {
            if v >= 0.0 {
                1.0 + v
            } else {
                v.exp().max(f64::MIN_POSITIVE)
            }
        }
    }
}

/// Derivative of [`activation_value`] at `v` (right-sided at the relu kink).
pub fn activation_derivative(kind: ActivationKind, v: f64) -> f64 {
    match kind {
        ActivationKind::None => 1.0,
        ActivationKind::Relu | ActivationKind::OnePlusRelu => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::OnePlusElu => {
            if v >= 0.0 {
                1.0
            } else {
                v.exp()
            }
        }
    }
}

/// Numerically stable logistic function; exactly 0.5 at 0.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// How the modulation map is produced from the raw predictor output.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ModulationSetting {
    /// No modulation path at all; the map is all ones.
    Disabled,
    /// 2·sigmoid(raw) ∈ (0,2): equals 1 at raw 0 so zero-init is an identity.
    Compensated,
    /// sigmoid(raw) ∈ (0,1): the literal formulation; 0.5 at raw 0.
    Strict,
}

impl ModulationSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            ModulationSetting::Disabled => "disabled",
            ModulationSetting::Compensated => "compensated",
            ModulationSetting::Strict => "strict",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "disabled" => Ok(ModulationSetting::Disabled),
            "compensated" => Ok(ModulationSetting::Compensated),
            "strict" => Ok(ModulationSetting::Strict),
            other => Err(Error::Config(format!("unknown modulation setting '{other}'"))),
        }
    }

    fn scale(self) -> f64 {
        match self {
            ModulationSetting::Disabled => unreachable!("disabled modulation has no raw map"),
            ModulationSetting::Compensated => 2.0,
            ModulationSetting::Strict => 1.0,
        }
    }
}

/// Broadcasts an activated 1-, 2- or 3-channel dilation tensor to the full
/// (d_t, d_y, d_x) triple. With fewer than 3 channels the temporal rate is
/// pinned to 1 and the given rates drive the spatial axes.
pub fn expand_dilation_map<E: Element>(activated: &Tensor5D<E>) -> Result<DilationMap<E>> {
    let s = activated.shape();
    if s.c == 3 {
        return DilationMap::new(activated.clone());
    }
    if s.c != 1 && s.c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "dilation predictor must have 1, 2 or 3 channels, got {}",
            s.c
        )));
    }
    let out_shape = Shape5D::new(s.n, 3, s.t, s.h, s.w)?;
    let mut out = Tensor5D::<E>::new(out_shape, crate::tensor::Fill::Value(1.0))?;
    for n in 0..s.n {
        let (y_src, x_src) = if s.c == 1 { (0, 0) } else { (0, 1) };
        out.channel_mut(n, 1).copy_from_slice(activated.channel(n, y_src));
        out.channel_mut(n, 2).copy_from_slice(activated.channel(n, x_src));
    }
    DilationMap::new(out)
}

/// Applies the dilation activation elementwise and expands to 3 channels.
pub fn dilation_activation<E: Element>(
    raw: &Tensor5D<E>,
    kind: ActivationKind,
) -> Result<DilationMap<E>> {
    let activated = Tensor5D::from_vec_allow_non_finite(
        raw.shape(),
        raw.iter_f64().map(|v| E::from_f64(activation_value(kind, v))).collect(),
    )?;
    expand_dilation_map(&activated)
}

/// Applies the modulation nonlinearity elementwise. Not valid for
/// [`ModulationSetting::Disabled`], which has no raw map.
pub fn modulation_from_raw<E: Element>(
    raw: &Tensor5D<E>,
    setting: ModulationSetting,
    num_points: usize,
) -> Result<ModulationMap<E>> {
    if setting == ModulationSetting::Disabled {
        return Err(Error::InvalidArgument("disabled modulation has no raw map".into()));
    }
    let scale = setting.scale();
    ModulationMap::new(
        Tensor5D::from_vec_allow_non_finite(
            raw.shape(),
            raw.iter_f64().map(|v| E::from_f64(scale * sigmoid(v))).collect(),
        )?,
        num_points,
    )
}

fn ones_modulation<E: Element>(
    n: usize,
    num_points: usize,
    ext: (usize, usize, usize),
) -> Result<ModulationMap<E>> {
    ModulationMap::new(
        Tensor5D::new(
            Shape5D::new(n, num_points, ext.0, ext.1, ext.2)?,
            crate::tensor::Fill::Value(1.0),
        )?,
        num_points,
    )
}

fn check_predictor<E: Element>(
    pred: &KernelWeights<E>,
    c_in: usize,
    what: &str,
) -> Result<()> {
    if pred.kernel != (3, 3, 3) {
        return Err(Error::InvalidArgument(format!(
            "{what} predictor kernel must be 3×3×3, got {:?}",
            pred.kernel
        )));
    }
    if pred.c_in != c_in {
        return Err(Error::ShapeMismatch(format!(
            "{what} predictor consumes {} channels, block input has {c_in}",
            pred.c_in
        )));
    }
    if pred.bias().is_none() {
        return Err(Error::InvalidArgument(format!("{what} predictor needs a bias")));
    }
    Ok(())
}

/// Dynamically dilated block: main kernel plus dilation and modulation
/// predictors consuming the same input.
#[derive(Clone, PartialEq, Debug)]
pub struct D2Block<E: Element> {
    pub main: KernelWeights<E>,
    pub cfg: ConvConfig,
    pub f_d: KernelWeights<E>,
    pub f_m: KernelWeights<E>,
    pub dil_activation: ActivationKind,
    pub modulation: ModulationSetting,
}

impl<E: Element> D2Block<E> {
    pub fn new(
        main: KernelWeights<E>,
        cfg: ConvConfig,
        f_d: KernelWeights<E>,
        f_m: KernelWeights<E>,
        dil_activation: ActivationKind,
        modulation: ModulationSetting,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.kernel != main.kernel {
            return Err(Error::ShapeMismatch(format!(
                "config kernel {:?} does not match main kernel {:?}",
                cfg.kernel, main.kernel
            )));
        }
        check_predictor(&f_d, main.c_in, "dilation")?;
        check_predictor(&f_m, main.c_in, "modulation")?;
        if !(1..=3).contains(&f_d.c_out) {
            return Err(Error::ShapeMismatch(format!(
                "dilation predictor must output 1, 2 or 3 channels, got {}",
                f_d.c_out
            )));
        }
        if f_m.c_out != main.num_points() {
            return Err(Error::ShapeMismatch(format!(
                "modulation predictor outputs {} channels, main kernel has K={}",
                f_m.c_out,
                main.num_points()
            )));
        }
        Ok(D2Block { main, cfg, f_d, f_m, dil_activation, modulation })
    }

    /// Seeded random block; predictors start near zero.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize, usize),
        cfg: ConvConfig,
        dil_activation: ActivationKind,
        modulation: ModulationSetting,
        seed: u64,
        stddev: f64,
    ) -> Result<Self> {
        let k = kernel.0 * kernel.1 * kernel.2;
        D2Block::new(
            KernelWeights::random(c_out, c_in, kernel, true, seed, stddev)?,
            cfg,
            KernelWeights::random(3, c_in, (3, 3, 3), true, seed.wrapping_add(1), stddev * 0.1)?,
            KernelWeights::random(k, c_in, (3, 3, 3), true, seed.wrapping_add(2), stddev * 0.1)?,
            dil_activation,
            modulation,
        )
    }

    /// Geometry of the predictor convolutions: stride-matched to the main
    /// operator, same-padded 3×3×3, so both output grids coincide whenever
    /// the main operator itself is same-padded.
    pub fn predictor_config(&self) -> ConvConfig {
        ConvConfig {
            kernel: (3, 3, 3),
            stride: self.cfg.stride,
            padding: (1, 1, 1),
            fixed_dilation: (1, 1, 1),
        }
    }
}

/// Replaces the main kernel with pretrained weights and zeroes both
/// predictors, making the block an exact stand-in for the plain convolution
/// (under `Compensated` or `Disabled` modulation). Idempotent.
pub fn dropin_init<E: Element>(
    blk: &D2Block<E>,
    pretrained: &KernelWeights<E>,
) -> Result<D2Block<E>> {
    if pretrained.c_out != blk.main.c_out
        || pretrained.c_in != blk.main.c_in
        || pretrained.kernel != blk.main.kernel
        || pretrained.bias().is_some() != blk.main.bias().is_some()
    {
        return Err(Error::ShapeMismatch(
            "pretrained kernel does not match the block's main kernel".into(),
        ));
    }
    D2Block::new(
        pretrained.clone(),
        blk.cfg,
        KernelWeights::zeros(blk.f_d.c_out, blk.f_d.c_in, (3, 3, 3), true)?,
        KernelWeights::zeros(blk.f_m.c_out, blk.f_m.c_in, (3, 3, 3), true)?,
        blk.dil_activation,
        blk.modulation,
    )
}

/// Runs the block: predict maps from `x`, then the dynamically dilated
/// convolution. When `stats` is given, sampling locations are classified
/// (interior-only accounting) and merged into it.
impl<E: Element> D2Block<E> {
    /// Per-location dilation triples this block predicts for `x`.
    pub fn predicted_dilation(&self, x: &Tensor5D<E>) -> Result<DilationMap<E>> {
        let raw = conv3d_forward(x, &self.f_d, &self.predictor_config())?;
        dilation_activation(&raw, self.dil_activation)
    }

    /// Per-point modulation map for `x`; all ones when modulation is off.
    pub fn predicted_modulation(&self, x: &Tensor5D<E>) -> Result<ModulationMap<E>> {
        let k = self.main.num_points();
        match self.modulation {
            ModulationSetting::Disabled => {
                let ext = self.cfg.output_extents(x.shape().extents())?;
                ones_modulation(x.shape().n, k, ext)
            }
            setting => modulation_from_raw(
                &conv3d_forward(x, &self.f_m, &self.predictor_config())?,
                setting,
                k,
            ),
        }
    }
}

pub fn d2block_forward<E: Element>(
    x: &Tensor5D<E>,
    blk: &D2Block<E>,
    stats: Option<&mut SamplingStats>,
) -> Result<Tensor5D<E>> {
    let dil = blk.predicted_dilation(x)?;
    let mods = blk.predicted_modulation(x)?;
    if let Some(st) = stats {
        let acc = oob_stats_for(
            &st.label.clone(),
            x.shape().extents(),
            x.shape().n,
            &blk.cfg,
            &OobMaps::Dilated(&dil),
            OobMode::InteriorOnly,
        )?;
        st.merge(&acc.pooled);
    }
    d2conv3d_forward(x, &blk.main, &dil, &mods, &blk.cfg)
}

/// Gradients of [`d2block_forward`] w.r.t. the input and every parameter.
#[derive(Clone, Debug)]
pub struct D2BlockGrads<E: Element> {
    pub x: Tensor5D<E>,
    pub main_w: Vec<E>,
    pub main_bias: Option<Vec<E>>,
    pub f_d_w: Vec<E>,
    pub f_d_bias: Vec<E>,
    pub f_m_w: Vec<E>,
    pub f_m_bias: Vec<E>,
}

fn add_assign<E: Element>(dst: &mut Tensor5D<E>, src: &Tensor5D<E>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = E::from_f64(d.to_f64() + s.to_f64());
    }
}

/// Analytic gradients of [`d2block_forward`]; recomputes the intermediate
/// maps rather than caching them.
pub fn d2block_backward<E: Element>(
    x: &Tensor5D<E>,
    blk: &D2Block<E>,
    upstream: &Tensor5D<E>,
) -> Result<D2BlockGrads<E>> {
    let pcfg = blk.predictor_config();
    let k = blk.main.num_points();
    let raw_d = conv3d_forward(x, &blk.f_d, &pcfg)?;
    let dil = dilation_activation(&raw_d, blk.dil_activation)?;
    let raw_m = match blk.modulation {
        ModulationSetting::Disabled => None,
        _ => Some(conv3d_forward(x, &blk.f_m, &pcfg)?),
    };
    let mods = match (&raw_m, blk.modulation) {
        (None, _) => ones_modulation(raw_d.shape().n, k, raw_d.shape().extents())?,
        (Some(raw), setting) => modulation_from_raw(raw, setting, k)?,
    };

    let g = d2conv3d_backward(x, &blk.main, &dil, &mods, &blk.cfg, upstream)?;

    // Dilation chain: undo the channel broadcast, then the activation.
    let gdil = g.dilation.tensor();
    let ds = raw_d.shape();
    let mut graw_d = Tensor5D::<E>::zeros(ds);
    for n in 0..ds.n {
        for c in 0..ds.c {
            // Channel c of the raw map feeds these expanded channels:
            let fed: &[usize] = match (ds.c, c) {
                (3, c) => match c {
                    0 => &[0],
                    1 => &[1],
                    _ => &[2],
                },
                (1, _) => &[1, 2],
                (2, 0) => &[1],
                (2, _) => &[2],
                _ => unreachable!("validated channel count"),
            };
            let raw_chan = raw_d.channel(n, c);
            let dst = graw_d.channel_mut(n, c);
            for &ec in fed {
                let gsrc = gdil.channel(n, ec);
                for i in 0..dst.len() {
                    let d = activation_derivative(blk.dil_activation, raw_chan[i].to_f64());
                    dst[i] = E::from_f64(dst[i].to_f64() + gsrc[i].to_f64() * d);
                }
            }
        }
    }
    let gfd = conv3d_backward(x, &blk.f_d, &pcfg, &graw_d)?;

    let mut gx = g.x;
    add_assign(&mut gx, &gfd.x);

    let (f_m_w, f_m_bias) = match raw_m {
        None => (
            vec![E::from_f64(0.0); blk.f_m.weights().len()],
            vec![E::from_f64(0.0); blk.f_m.c_out],
        ),
        Some(raw) => {
            let scale = blk.modulation.scale();
            let gmod = g.modulation.tensor();
            let graw_m = Tensor5D::from_vec_allow_non_finite(
                raw.shape(),
                raw.iter_f64()
                    .zip(gmod.iter_f64())
                    .map(|(v, gm)| {
                        let s = sigmoid(v);
                        E::from_f64(gm * scale * s * (1.0 - s))
                    })
                    .collect(),
            )?;
            let gfm = conv3d_backward(x, &blk.f_m, &pcfg, &graw_m)?;
            add_assign(&mut gx, &gfm.x);
            (gfm.w, gfm.bias.expect("modulation predictor has a bias"))
        }
    };

    Ok(D2BlockGrads {
        x: gx,
        main_w: g.w,
        main_bias: g.bias,
        f_d_w: gfd.w,
        f_d_bias: gfd.bias.expect("dilation predictor has a bias"),
        f_m_w,
        f_m_bias,
    })
}

/// Offset-deformed block: main kernel plus offset and (for V2) modulation
/// predictors.
#[derive(Clone, PartialEq, Debug)]
pub struct DcnBlock<E: Element> {
    pub main: KernelWeights<E>,
    pub cfg: ConvConfig,
    pub f_o: KernelWeights<E>,
    pub f_m: KernelWeights<E>,
    pub variant: DcnVariant,
    pub modulation: ModulationSetting,
}

impl<E: Element> DcnBlock<E> {
    pub fn new(
        main: KernelWeights<E>,
        cfg: ConvConfig,
        f_o: KernelWeights<E>,
        f_m: KernelWeights<E>,
        variant: DcnVariant,
        modulation: ModulationSetting,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.kernel != main.kernel {
            return Err(Error::ShapeMismatch(format!(
                "config kernel {:?} does not match main kernel {:?}",
                cfg.kernel, main.kernel
            )));
        }
        check_predictor(&f_o, main.c_in, "offset")?;
        check_predictor(&f_m, main.c_in, "modulation")?;
        let k = main.num_points();
        if f_o.c_out != 3 * k {
            return Err(Error::ShapeMismatch(format!(
                "offset predictor outputs {} channels, kernel with K={k} needs {}",
                f_o.c_out,
                3 * k
            )));
        }
        if f_m.c_out != k {
            return Err(Error::ShapeMismatch(format!(
                "modulation predictor outputs {} channels, main kernel has K={k}",
                f_m.c_out
            )));
        }
        match (variant, modulation) {
            (DcnVariant::V1, ModulationSetting::Disabled) => {}
            (DcnVariant::V1, _) => {
                return Err(Error::InvalidArgument(
                    "the unmodulated variant requires disabled modulation".into(),
                ))
            }
            (DcnVariant::V2, ModulationSetting::Disabled) => {
                return Err(Error::InvalidArgument(
                    "the modulated variant requires an active modulation setting".into(),
                ))
            }
            (DcnVariant::V2, _) => {}
        }
        Ok(DcnBlock { main, cfg, f_o, f_m, variant, modulation })
    }

    /// Seeded random block; predictors start near zero.
    pub fn random(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize, usize),
        cfg: ConvConfig,
        variant: DcnVariant,
        seed: u64,
        stddev: f64,
    ) -> Result<Self> {
        let k = kernel.0 * kernel.1 * kernel.2;
        let modulation = if variant.modulated() {
            ModulationSetting::Compensated
        } else {
            ModulationSetting::Disabled
        };
        DcnBlock::new(
            KernelWeights::random(c_out, c_in, kernel, true, seed, stddev)?,
            cfg,
            KernelWeights::random(3 * k, c_in, (3, 3, 3), true, seed.wrapping_add(1), stddev * 0.1)?,
            KernelWeights::random(k, c_in, (3, 3, 3), true, seed.wrapping_add(2), stddev * 0.1)?,
            variant,
            modulation,
        )
    }

    pub fn predictor_config(&self) -> ConvConfig {
        ConvConfig {
            kernel: (3, 3, 3),
            stride: self.cfg.stride,
            padding: (1, 1, 1),
            fixed_dilation: (1, 1, 1),
        }
    }

    /// Main kernel from pretrained weights, zeroed predictors. Idempotent.
    pub fn dropin_init(&self, pretrained: &KernelWeights<E>) -> Result<DcnBlock<E>> {
        if pretrained.c_out != self.main.c_out
            || pretrained.c_in != self.main.c_in
            || pretrained.kernel != self.main.kernel
            || pretrained.bias().is_some() != self.main.bias().is_some()
        {
            return Err(Error::ShapeMismatch(
                "pretrained kernel does not match the block's main kernel".into(),
            ));
        }
        DcnBlock::new(
            pretrained.clone(),
            self.cfg,
            KernelWeights::zeros(self.f_o.c_out, self.f_o.c_in, (3, 3, 3), true)?,
            KernelWeights::zeros(self.f_m.c_out, self.f_m.c_in, (3, 3, 3), true)?,
            self.variant,
            self.modulation,
        )
    }
}

/// Runs the offset-deformed block, with optional OOB accounting.
impl<E: Element> DcnBlock<E> {
    /// Per-point displacement triples this block predicts for `x`.
    pub fn predicted_offsets(&self, x: &Tensor5D<E>) -> Result<OffsetMap<E>> {
        let raw = conv3d_forward(x, &self.f_o, &self.predictor_config())?;
        OffsetMap::new(raw, self.main.num_points())
    }

    /// Per-point modulation map for `x`; None for the unmodulated variant.
    pub fn predicted_modulation(&self, x: &Tensor5D<E>) -> Result<Option<ModulationMap<E>>> {
        match self.variant {
            DcnVariant::V1 => Ok(None),
            DcnVariant::V2 => Ok(Some(modulation_from_raw(
                &conv3d_forward(x, &self.f_m, &self.predictor_config())?,
                self.modulation,
                self.main.num_points(),
            )?)),
        }
    }
}

pub fn dcnblock_forward<E: Element>(
    x: &Tensor5D<E>,
    blk: &DcnBlock<E>,
    stats: Option<&mut SamplingStats>,
) -> Result<Tensor5D<E>> {
    let off = blk.predicted_offsets(x)?;
    if let Some(st) = stats {
        let acc = oob_stats_for(
            &st.label.clone(),
            x.shape().extents(),
            x.shape().n,
            &blk.cfg,
            &OobMaps::Deformed(&off),
            OobMode::InteriorOnly,
        )?;
        st.merge(&acc.pooled);
    }
    match blk.predicted_modulation(x)? {
        None => dcn1_3d_forward(x, &blk.main, &off, &blk.cfg),
        Some(mods) => dcn2_3d_forward(x, &blk.main, &off, &mods, &blk.cfg),
    }
}

/// Gradients of [`dcnblock_forward`].
#[derive(Clone, Debug)]
pub struct DcnBlockGrads<E: Element> {
    pub x: Tensor5D<E>,
    pub main_w: Vec<E>,
    pub main_bias: Option<Vec<E>>,
    pub f_o_w: Vec<E>,
    pub f_o_bias: Vec<E>,
    pub f_m_w: Vec<E>,
    pub f_m_bias: Vec<E>,
}

/// Analytic gradients of [`dcnblock_forward`].
pub fn dcnblock_backward<E: Element>(
    x: &Tensor5D<E>,
    blk: &DcnBlock<E>,
    upstream: &Tensor5D<E>,
) -> Result<DcnBlockGrads<E>> {
    let pcfg = blk.predictor_config();
    let k = blk.main.num_points();
    let raw_o = conv3d_forward(x, &blk.f_o, &pcfg)?;
    let off = OffsetMap::new(raw_o, k)?;
    let raw_m = match blk.variant {
        DcnVariant::V1 => None,
        DcnVariant::V2 => Some(conv3d_forward(x, &blk.f_m, &pcfg)?),
    };
    let mods = raw_m
        .as_ref()
        .map(|raw| modulation_from_raw(raw, blk.modulation, k))
        .transpose()?;

    let g = dcn_3d_backward(x, &blk.main, &off, mods.as_ref(), &blk.cfg, upstream)?;

    // Offsets are the raw predictor output, so the chain is direct.
    let gfo = conv3d_backward(x, &blk.f_o, &pcfg, g.offsets.tensor())?;
    let mut gx = g.x;
    add_assign(&mut gx, &gfo.x);

    let (f_m_w, f_m_bias) = match raw_m {
        None => (
            vec![E::from_f64(0.0); blk.f_m.weights().len()],
            vec![E::from_f64(0.0); blk.f_m.c_out],
        ),
        Some(raw) => {
            let scale = blk.modulation.scale();
            let gmod = g.modulation.expect("modulated variant returns a modulation grad");
            let graw_m = Tensor5D::from_vec_allow_non_finite(
                raw.shape(),
                raw.iter_f64()
                    .zip(gmod.tensor().iter_f64())
                    .map(|(v, gm)| {
                        let s = sigmoid(v);
                        E::from_f64(gm * scale * s * (1.0 - s))
                    })
                    .collect(),
            )?;
            let gfm = conv3d_backward(x, &blk.f_m, &pcfg, &graw_m)?;
            add_assign(&mut gx, &gfm.x);
            (gfm.w, gfm.bias.expect("modulation predictor has a bias"))
        }
    };

    Ok(DcnBlockGrads {
        x: gx,
        main_w: g.w,
        main_bias: g.bias,
        f_o_w: gfo.w,
        f_o_bias: gfo.bias.expect("offset predictor has a bias"),
        f_m_w,
        f_m_bias,
    })
}

/// Per-group normalization over (channels-in-group, T, H, W) with a
/// per-channel affine map.
pub fn groupnorm_forward<E: Element>(
    x: &Tensor5D<E>,
    groups: usize,
    gamma: &[E],
    beta: &[E],
    eps: f64,
) -> Result<Tensor5D<E>> {
    let s = x.shape();
    check_groupnorm(s, groups, gamma.len(), beta.len(), eps)?;
    let cpg = s.c / groups;
    let vol = s.t * s.h * s.w;
    let group_len = cpg * vol;
    let mut out = Tensor5D::<E>::zeros(s);
    for n in 0..s.n {
        for gi in 0..groups {
            let start = (n * s.c + gi * cpg) * vol;
            let src = &x.data()[start..start + group_len];
            let mean = src.iter().map(|v| v.to_f64()).sum::<f64>() / group_len as f64;
            let var = src.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>()
                / group_len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let (gm, bt) = (gamma[c].to_f64(), beta[c].to_f64());
                let dst = &mut out.data_mut()[start + ci * vol..start + (ci + 1) * vol];
                for (d, v) in dst.iter_mut().zip(&src[ci * vol..(ci + 1) * vol]) {
                    *d = E::from_f64(gm * (v.to_f64() - mean) * inv + bt);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`groupnorm_forward`].
#[derive(Clone, Debug)]
pub struct GroupNormGrads<E: Element> {
    pub x: Tensor5D<E>,
    pub gamma: Vec<E>,
    pub beta: Vec<E>,
}

/// Analytic gradients of [`groupnorm_forward`]; statistics are recomputed.
pub fn groupnorm_backward<E: Element>(
    x: &Tensor5D<E>,
    groups: usize,
    gamma: &[E],
    eps: f64,
    upstream: &Tensor5D<E>,
) -> Result<GroupNormGrads<E>> {
    let s = x.shape();
    check_groupnorm(s, groups, gamma.len(), gamma.len(), eps)?;
    if upstream.shape() != s {
        return Err(Error::ShapeMismatch(format!(
            "upstream shape {} does not match input {s}",
            upstream.shape()
        )));
    }
    let cpg = s.c / groups;
    let vol = s.t * s.h * s.w;
    let group_len = cpg * vol;
    let mut gx = vec![0.0f64; s.len()];
    let mut ggamma = vec![0.0f64; s.c];
    let mut gbeta = vec![0.0f64; s.c];

    for n in 0..s.n {
        for gi in 0..groups {
            let start = (n * s.c + gi * cpg) * vol;
            let src = &x.data()[start..start + group_len];
            let up = &upstream.data()[start..start + group_len];
            let mean = src.iter().map(|v| v.to_f64()).sum::<f64>() / group_len as f64;
            let var = src.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>()
                / group_len as f64;
            let inv = 1.0 / (var + eps).sqrt();

            // dxhat = g·γ; dx = inv·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let gm = gamma[c].to_f64();
                for i in 0..vol {
                    let g = up[ci * vol + i].to_f64();
                    let xhat = (src[ci * vol + i].to_f64() - mean) * inv;
                    let dxhat = g * gm;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    ggamma[c] += g * xhat;
                    gbeta[c] += g;
                }
            }
            let m1 = sum_dxhat / group_len as f64;
            let m2 = sum_dxhat_xhat / group_len as f64;
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let gm = gamma[c].to_f64();
                for i in 0..vol {
                    let g = up[ci * vol + i].to_f64();
                    let xhat = (src[ci * vol + i].to_f64() - mean) * inv;
                    gx[start + ci * vol + i] = inv * (g * gm - m1 - xhat * m2);
                }
            }
        }
    }

    Ok(GroupNormGrads {
        x: Tensor5D::from_vec_allow_non_finite(s, gx.into_iter().map(E::from_f64).collect())?,
        gamma: ggamma.into_iter().map(E::from_f64).collect(),
        beta: gbeta.into_iter().map(E::from_f64).collect(),
    })
}

fn check_groupnorm(
    s: Shape5D,
    groups: usize,
    gamma_len: usize,
    beta_len: usize,
    eps: f64,
) -> Result<()> {
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} channels are not divisible into {groups} groups",
            s.c
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    if gamma_len != s.c || beta_len != s.c {
        return Err(Error::ShapeMismatch(format!(
            "affine parameters sized {gamma_len}/{beta_len}, expected {} per channel",
            s.c
        )));
    }
    if s.t * s.h * s.w == 0 || s.n == 0 {
        return Err(Error::ShapeMismatch(format!("empty input {s}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BlockManifest {
    kind: String,
    width: String,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    fixed_dilation: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    modulation: String,
    arrays: BTreeMap<String, String>,
}

fn cfg_to_manifest(cfg: &ConvConfig) -> ([usize; 3], [usize; 3], [usize; 3], [usize; 3]) {
    (
        [cfg.kernel.0, cfg.kernel.1, cfg.kernel.2],
        [cfg.stride.0, cfg.stride.1, cfg.stride.2],
        [cfg.padding.0, cfg.padding.1, cfg.padding.2],
        [cfg.fixed_dilation.0, cfg.fixed_dilation.1, cfg.fixed_dilation.2],
    )
}

fn cfg_from_manifest(m: &BlockManifest) -> ConvConfig {
    ConvConfig {
        kernel: (m.kernel[0], m.kernel[1], m.kernel[2]),
        stride: (m.stride[0], m.stride[1], m.stride[2]),
        padding: (m.padding[0], m.padding[1], m.padding[2]),
        fixed_dilation: (m.fixed_dilation[0], m.fixed_dilation[1], m.fixed_dilation[2]),
    }
}

pub(crate) fn write_kernel<E: Element>(
    dir: &Path,
    name: &str,
    k: &KernelWeights<E>,
    arrays: &mut BTreeMap<String, String>,
) -> Result<()> {
    let w_shape = Shape5D::new(k.c_out, k.c_in, k.kernel.0, k.kernel.1, k.kernel.2)?;
    let w = Tensor5D::from_vec_allow_non_finite(w_shape, k.weights().to_vec())?;
    let w_file = format!("{name}_w.npy");
    crate::npy::npy_write(&w, &dir.join(&w_file))?;
    arrays.insert(format!("{name}_w"), w_file);
    if let Some(b) = k.bias() {
        let b_shape = Shape5D::new(1, 1, 1, 1, b.len())?;
        let bt = Tensor5D::from_vec_allow_non_finite(b_shape, b.to_vec())?;
        let b_file = format!("{name}_b.npy");
        crate::npy::npy_write(&bt, &dir.join(&b_file))?;
        arrays.insert(format!("{name}_b"), b_file);
    }
    Ok(())
}

pub(crate) fn read_kernel<E: Element>(dir: &Path, name: &str, has_bias: bool) -> Result<KernelWeights<E>> {
    let w = read_array::<E>(&dir.join(format!("{name}_w.npy")))?;
    let s = w.shape();
    let bias = if has_bias {
        Some(read_array::<E>(&dir.join(format!("{name}_b.npy")))?.into_data())
    } else {
        None
    };
    KernelWeights::new(s.n, s.c, (s.t, s.h, s.w), w.into_data(), bias)
}

fn read_array<E: Element>(path: &Path) -> Result<Tensor5D<E>> {
    let dt = crate::npy::npy_read(path)?;
    if dt.width() != E::WIDTH {
        return Err(Error::Config(format!(
            "array {} stored as {}, expected {}",
            path.display(),
            dt.width(),
            E::WIDTH
        )));
    }
    match (dt, E::WIDTH) {
        (crate::tensor::DynTensor::F64(t), ScalarWidth::F64) => {
            Tensor5D::from_vec_allow_non_finite(t.shape(), t.data().iter().map(|v| E::from_f64(v.to_f64())).collect())
        }
        (crate::tensor::DynTensor::F32(t), ScalarWidth::F32) => {
            Tensor5D::from_vec_allow_non_finite(t.shape(), t.data().iter().map(|v| E::from_f64(v.to_f64())).collect())
        }
        _ => unreachable!("width checked above"),
    }
}

fn write_manifest(dir: &Path, manifest: &BlockManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<BlockManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Saves a block as a directory of NPY arrays plus `manifest.json`.
pub fn save_d2block<E: Element>(blk: &D2Block<E>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays = BTreeMap::new();
    write_kernel(dir, "main", &blk.main, &mut arrays)?;
    write_kernel(dir, "f_d", &blk.f_d, &mut arrays)?;
    write_kernel(dir, "f_m", &blk.f_m, &mut arrays)?;
    let (kernel, stride, padding, fixed_dilation) = cfg_to_manifest(&blk.cfg);
    write_manifest(
        dir,
        &BlockManifest {
            kind: "d2".into(),
            width: E::WIDTH.to_string(),
            kernel,
            stride,
            padding,
            fixed_dilation,
            activation: Some(blk.dil_activation.as_str().into()),
            variant: None,
            modulation: blk.modulation.as_str().into(),
            arrays,
        },
    )
}

/// Loads a block saved by [`save_d2block`]; the stored width must match `E`.
pub fn load_d2block<E: Element>(dir: &Path) -> Result<D2Block<E>> {
    let m = read_manifest(dir)?;
    if m.kind != "d2" {
        return Err(Error::Config(format!("expected a d2 block, found kind '{}'", m.kind)));
    }
    if m.width != E::WIDTH.to_string() {
        return Err(Error::Config(format!(
            "checkpoint stored as {}, expected {}",
            m.width,
            E::WIDTH
        )));
    }
    let main_bias = m.arrays.contains_key("main_b");
    D2Block::new(
        read_kernel(dir, "main", main_bias)?,
        cfg_from_manifest(&m),
        read_kernel(dir, "f_d", true)?,
        read_kernel(dir, "f_m", true)?,
        ActivationKind::from_str(
            m.activation.as_deref().ok_or_else(|| Error::Config("missing activation".into()))?,
        )?,
        ModulationSetting::from_str(&m.modulation)?,
    )
}

/// Saves an offset-deformed block as NPY arrays plus `manifest.json`.
pub fn save_dcnblock<E: Element>(blk: &DcnBlock<E>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays = BTreeMap::new();
    write_kernel(dir, "main", &blk.main, &mut arrays)?;
    write_kernel(dir, "f_o", &blk.f_o, &mut arrays)?;
    write_kernel(dir, "f_m", &blk.f_m, &mut arrays)?;
    let (kernel, stride, padding, fixed_dilation) = cfg_to_manifest(&blk.cfg);
    write_manifest(
        dir,
        &BlockManifest {
            kind: "dcn".into(),
            width: E::WIDTH.to_string(),
            kernel,
            stride,
            padding,
            fixed_dilation,
            activation: None,
            variant: Some(
                match blk.variant {
                    DcnVariant::V1 => "v1",
                    DcnVariant::V2 => "v2",
                }
                .into(),
            ),
            modulation: blk.modulation.as_str().into(),
            arrays,
        },
    )
}

/// Loads a block saved by [`save_dcnblock`].
pub fn load_dcnblock<E: Element>(dir: &Path) -> Result<DcnBlock<E>> {
    let m = read_manifest(dir)?;
    if m.kind != "dcn" {
        return Err(Error::Config(format!("expected a dcn block, found kind '{}'", m.kind)));
    }
    if m.width != E::WIDTH.to_string() {
        return Err(Error::Config(format!(
            "checkpoint stored as {}, expected {}",
            m.width,
            E::WIDTH
        )));
    }
    let variant = match m.variant.as_deref() {
        Some("v1") => DcnVariant::V1,
        Some("v2") => DcnVariant::V2,
        other => return Err(Error::Config(format!("unknown variant {other:?}"))),
    };
    let main_bias = m.arrays.contains_key("main_b");
    DcnBlock::new(
        read_kernel(dir, "main", main_bias)?,
        cfg_from_manifest(&m),
        read_kernel(dir, "f_o", true)?,
        read_kernel(dir, "f_m", true)?,
        variant,
        ModulationSetting::from_str(&m.modulation)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;
    use proptest::prelude::*;

    fn rand_t(shape: Shape5D, seed: u64) -> Tensor5D<f64> {
        Tensor5D::new(shape, Fill::RandomNormal { seed, mean: 0.0, stddev: 1.0 }).unwrap()
    }

    #[test]
    fn activation_closed_forms() {
        assert_eq!(activation_value(ActivationKind::OnePlusElu, 0.0), 1.0);
        let tiny = activation_value(ActivationKind::OnePlusElu, -50.0);
        assert!(tiny > 0.0 && tiny < 1e-20, "{tiny}");
        assert_eq!(activation_value(ActivationKind::OnePlusRelu, -2.0), 1.0);
        assert_eq!(activation_value(ActivationKind::Relu, -2.0), 0.0);
        assert_eq!(activation_value(ActivationKind::None, -2.0), -2.0);
        assert_eq!(activation_value(ActivationKind::OnePlusElu, 2.0), 3.0);
    }

    proptest! {
        #[test]
        fn activation_range_laws(v in prop_oneof![
            any::<f64>().prop_filter("finite", |v: &f64| v.is_finite()).boxed(),
            (-1e9f64..1e9).boxed(),
            proptest::sample::select(vec![-1e9f64, 1e9, -745.0, -746.0, 0.0]).boxed(),
        ]) {
            prop_assert!(activation_value(ActivationKind::OnePlusElu, v) > 0.0);
            prop_assert!(activation_value(ActivationKind::OnePlusRelu, v) >= 1.0);
            prop_assert!(activation_value(ActivationKind::Relu, v) >= 0.0);
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let eps = 1e-7;
        for kind in [
            ActivationKind::None,
            ActivationKind::Relu,
            ActivationKind::OnePlusRelu,
            ActivationKind::OnePlusElu,
        ] {
            for v in [-2.5f64, -0.7, 0.3, 1.9] {
                let fd = (activation_value(kind, v + eps) - activation_value(kind, v - eps))
                    / (2.0 * eps);
                let an = activation_derivative(kind, v);
                assert!((fd - an).abs() < 1e-6, "{kind:?} at {v}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn dilation_expansion_pins_temporal_rate() {
        let raw1 = Tensor5D::from_vec(
            Shape5D::new(1, 1, 1, 1, 2).unwrap(),
            vec![0.5f64, -0.25],
        )
        .unwrap();
        let d = dilation_activation(&raw1, ActivationKind::None).unwrap();
        let t = d.tensor();
        assert_eq!(t.channel(0, 0), &[1.0, 1.0]);
        assert_eq!(t.channel(0, 1), &[0.5, -0.25]);
        assert_eq!(t.channel(0, 2), &[0.5, -0.25]);

        let raw2 = Tensor5D::from_vec(
            Shape5D::new(1, 2, 1, 1, 1).unwrap(),
            vec![0.5f64, -0.25],
        )
        .unwrap();
        let d = dilation_activation(&raw2, ActivationKind::OnePlusRelu).unwrap();
        let t = d.tensor();
        assert_eq!(t.channel(0, 0), &[1.0]);
        assert_eq!(t.channel(0, 1), &[1.5]);
        assert_eq!(t.channel(0, 2), &[1.0]);
    }

    fn same_block(
        modulation: ModulationSetting,
        seed: u64,
    ) -> (Tensor5D<f64>, KernelWeights<f64>, D2Block<f64>) {
        let x = rand_t(Shape5D::new(1, 2, 4, 6, 6).unwrap(), seed);
        let pretrained = KernelWeights::<f64>::random(3, 2, (3, 3, 3), true, seed + 1, 0.5).unwrap();
        let blk = D2Block::random(
            3,
            2,
            (3, 3, 3),
            ConvConfig::same((3, 3, 3)),
            ActivationKind::OnePlusElu,
            modulation,
            seed + 2,
            0.5,
        )
        .unwrap();
        (x, pretrained, blk)
    }

    #[test]
    fn dropin_identity_is_exact() {
        for modulation in [ModulationSetting::Compensated, ModulationSetting::Disabled] {
            let (x, pretrained, blk) = same_block(modulation, 101);
            let blk = dropin_init(&blk, &pretrained).unwrap();
            let got = d2block_forward(&x, &blk, None).unwrap();
            let want = conv3d_forward(&x, &pretrained, &blk.cfg).unwrap();
            assert!(got.iter_f64().zip(want.iter_f64()).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn strict_sigmoid_breaks_the_identity() {
        let (x, pretrained, blk) = same_block(ModulationSetting::Strict, 105);
        let blk = dropin_init(&blk, &pretrained).unwrap();
        let got = d2block_forward(&x, &blk, None).unwrap();
        let want = conv3d_forward(&x, &pretrained, &blk.cfg).unwrap();
        // Every kernel-point term is halved, so outputs differ wherever the
        // pre-bias response is nonzero.
        assert!(got.iter_f64().zip(want.iter_f64()).any(|(a, b)| a != b));
    }

    #[test]
    fn dropin_is_idempotent_and_training_can_escape() {
        let (x, pretrained, blk) = same_block(ModulationSetting::Compensated, 109);
        let once = dropin_init(&blk, &pretrained).unwrap();
        let twice = dropin_init(&once, &pretrained).unwrap();
        assert_eq!(once, twice);

        let up = rand_t(Shape5D::new(1, 3, 4, 6, 6).unwrap(), 110);
        let g = d2block_backward(&x, &once, &up).unwrap();
        let fd_norm: f64 = g.f_d_w.iter().map(|v| v * v).sum::<f64>()
            + g.f_d_bias.iter().map(|v| v * v).sum::<f64>();
        assert!(fd_norm > 0.0, "dilation predictor gradient vanished at init");
    }

    #[test]
    fn forward_composes_from_sub_operations() {
        let (x, _, blk) = same_block(ModulationSetting::Compensated, 113);
        let got = d2block_forward(&x, &blk, None).unwrap();
        let pcfg = blk.predictor_config();
        let d = dilation_activation(
            &conv3d_forward(&x, &blk.f_d, &pcfg).unwrap(),
            blk.dil_activation,
        )
        .unwrap();
        let m = modulation_from_raw(
            &conv3d_forward(&x, &blk.f_m, &pcfg).unwrap(),
            ModulationSetting::Compensated,
            27,
        )
        .unwrap();
        let want = d2conv3d_forward(&x, &blk.main, &d, &m, &blk.cfg).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn forward_collects_sampling_stats() {
        let (x, _, blk) = same_block(ModulationSetting::Compensated, 117);
        let mut stats = SamplingStats::new("block");
        d2block_forward(&x, &blk, Some(&mut stats)).unwrap();
        assert!(stats.total_samples > 0);
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        // Bias on f_d pushes dilations off integers; probes stay off-lattice.
        let x = rand_t(Shape5D::new(1, 2, 2, 3, 3).unwrap(), 121);
        let mut f_d = KernelWeights::<f64>::random(3, 2, (3, 3, 3), true, 122, 0.02).unwrap();
        for b in f_d.bias_mut().unwrap() {
            *b = 0.45;
        }
        let f_m = KernelWeights::<f64>::random(27, 2, (3, 3, 3), true, 123, 0.05).unwrap();
        let main = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 124, 0.5).unwrap();
        let blk = D2Block::new(
            main,
            ConvConfig::same((3, 3, 3)),
            f_d,
            f_m,
            ActivationKind::OnePlusElu,
            ModulationSetting::Compensated,
        )
        .unwrap();
        let u = rand_t(Shape5D::new(1, 2, 2, 3, 3).unwrap(), 125);

        let objective = |blk: &D2Block<f64>, x: &Tensor5D<f64>| {
            let y = d2block_forward(x, blk, None).unwrap();
            y.iter_f64().zip(u.iter_f64()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = d2block_backward(&x, &blk, &u).unwrap();
        let eps = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-5,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };

        for i in 0..x.shape().len() {
            let mut hi = x.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= eps;
            check(g.x.data()[i], (objective(&blk, &hi) - objective(&blk, &lo)) / (2.0 * eps), "x");
        }
        fn param_mut<'a>(b: &'a mut D2Block<f64>, which: usize) -> &'a mut [f64] {
            match which {
                0 => b.main.weights_mut(),
                1 => b.main.bias_mut().unwrap(),
                2 => b.f_d.weights_mut(),
                3 => b.f_d.bias_mut().unwrap(),
                4 => b.f_m.weights_mut(),
                _ => b.f_m.bias_mut().unwrap(),
            }
        }
        let groups: [(usize, &[f64], &str); 6] = [
            (0, &g.main_w, "main_w"),
            (1, g.main_bias.as_ref().unwrap(), "main_b"),
            (2, &g.f_d_w, "f_d_w"),
            (3, &g.f_d_bias, "f_d_b"),
            (4, &g.f_m_w, "f_m_w"),
            (5, &g.f_m_bias, "f_m_b"),
        ];
        for (which, grad, what) in groups {
            for i in 0..grad.len() {
                let mut hi = blk.clone();
                param_mut(&mut hi, which)[i] += eps;
                let mut lo = blk.clone();
                param_mut(&mut lo, which)[i] -= eps;
                check(grad[i], (objective(&hi, &x) - objective(&lo, &x)) / (2.0 * eps), what);
            }
        }
    }

    #[test]
    fn disabled_modulation_kills_f_m_gradient() {
        let (x, _, blk) = same_block(ModulationSetting::Disabled, 131);
        let up = rand_t(Shape5D::new(1, 3, 4, 6, 6).unwrap(), 132);
        let g = d2block_backward(&x, &blk, &up).unwrap();
        assert!(g.f_m_w.iter().all(|&v| v == 0.0));
        assert!(g.f_m_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn near_zero_temporal_rate_acts_per_frame() {
        // f_d biases force D ≈ (0, 1, 1): the block behaves like a per-frame
        // 2D convolution with the kernel's temporal slices summed.
        let x = rand_t(Shape5D::new(1, 2, 3, 5, 5).unwrap(), 135);
        let main = KernelWeights::<f64>::random(2, 2, (3, 3, 3), false, 136, 0.5).unwrap();
        let mut f_d = KernelWeights::<f64>::zeros(3, 2, (3, 3, 3), true).unwrap();
        f_d.bias_mut().unwrap().copy_from_slice(&[-50.0, 0.0, 0.0]);
        let f_m = KernelWeights::<f64>::zeros(27, 2, (3, 3, 3), true).unwrap();
        let blk = D2Block::new(
            main.clone(),
            ConvConfig::same((3, 3, 3)),
            f_d,
            f_m,
            ActivationKind::OnePlusElu,
            ModulationSetting::Disabled,
        )
        .unwrap();
        let got = d2block_forward(&x, &blk, None).unwrap();

        let mut collapsed = vec![0.0f64; 2 * 2 * 9];
        for co in 0..2 {
            for ci in 0..2 {
                for kt in 0..3 {
                    for s in 0..9 {
                        collapsed[(co * 2 + ci) * 9 + s] +=
                            main.weights()[(co * 2 + ci) * 27 + kt * 9 + s];
                    }
                }
            }
        }
        let w2d = KernelWeights::new(2, 2, (1, 3, 3), collapsed, None).unwrap();
        let want = conv3d_forward(&x, &w2d, &ConvConfig::same((1, 3, 3))).unwrap();
        for (a, b) in got.iter_f64().zip(want.iter_f64()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dcn_block_dropin_and_backward() {
        let x = rand_t(Shape5D::new(1, 2, 2, 3, 3).unwrap(), 141);
        let pretrained = KernelWeights::<f64>::random(2, 2, (3, 3, 3), true, 142, 0.5).unwrap();
        for variant in [DcnVariant::V1, DcnVariant::V2] {
            let blk = DcnBlock::random(
                2,
                2,
                (3, 3, 3),
                ConvConfig::same((3, 3, 3)),
                variant,
                143,
                0.5,
            )
            .unwrap();
            let init = blk.dropin_init(&pretrained).unwrap();
            let got = dcnblock_forward(&x, &init, None).unwrap();
            let want = conv3d_forward(&x, &pretrained, &init.cfg).unwrap();
            assert!(got.iter_f64().zip(want.iter_f64()).all(|(a, b)| a == b));
        }

        // Compact finite-difference sweep over a random modulated block.
        let blk = DcnBlock::random(
            2,
            2,
            (1, 3, 3),
            ConvConfig::same((1, 3, 3)),
            DcnVariant::V2,
            144,
            0.4,
        )
        .unwrap();
        let u = rand_t(Shape5D::new(1, 2, 2, 3, 3).unwrap(), 145);
        let objective = |blk: &DcnBlock<f64>, x: &Tensor5D<f64>| {
            let y = dcnblock_forward(x, blk, None).unwrap();
            y.iter_f64().zip(u.iter_f64()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = dcnblock_backward(&x, &blk, &u).unwrap();
        let eps = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-5,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };
        for i in 0..x.shape().len() {
            let mut hi = x.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= eps;
            check(g.x.data()[i], (objective(&blk, &hi) - objective(&blk, &lo)) / (2.0 * eps), "x");
        }
        for i in 0..g.f_o_w.len() {
            let mut hi = blk.clone();
            hi.f_o.weights_mut()[i] += eps;
            let mut lo = blk.clone();
            lo.f_o.weights_mut()[i] -= eps;
            check(g.f_o_w[i], (objective(&hi, &x) - objective(&lo, &x)) / (2.0 * eps), "f_o_w");
        }
        for i in 0..g.f_m_w.len() {
            let mut hi = blk.clone();
            hi.f_m.weights_mut()[i] += eps;
            let mut lo = blk.clone();
            lo.f_m.weights_mut()[i] -= eps;
            check(g.f_m_w[i], (objective(&hi, &x) - objective(&lo, &x)) / (2.0 * eps), "f_m_w");
        }
    }

    #[test]
    fn groupnorm_normalizes_and_matches_finite_differences() {
        let shape = Shape5D::new(2, 4, 2, 3, 3).unwrap();
        let x = rand_t(shape, 151);
        let gamma = vec![1.0f64; 4];
        let beta = vec![0.0f64; 4];
        let eps = 1e-12;
        let y = groupnorm_forward(&x, 2, &gamma, &beta, eps).unwrap();

        // Per-group mean ≈ 0 and biased variance ≈ 1 before affine.
        let vol = 2 * 3 * 3;
        for n in 0..2 {
            for gi in 0..2 {
                let vals: Vec<f64> = (0..2)
                    .flat_map(|ci| y.channel(n, gi * 2 + ci).to_vec())
                    .collect();
                let mean = vals.iter().sum::<f64>() / (2 * vol) as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (2 * vol) as f64;
                assert!(mean.abs() <= 1e-10, "group mean {mean}");
                assert!((var - 1.0).abs() <= 1e-6, "group variance {var}");
            }
        }

        // Constant input maps to zero under gamma 1, beta 0.
        let c = Tensor5D::<f64>::new(shape, Fill::Value(3.25)).unwrap();
        let yc = groupnorm_forward(&c, 2, &gamma, &beta, 1e-5).unwrap();
        assert!(yc.iter_f64().all(|v| v == 0.0));

        // groups == C is the instance-norm limit: channels independent.
        let y_inst = groupnorm_forward(&x, 4, &gamma, &beta, eps).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                let src = x.channel(n, c);
                let mean = src.iter().sum::<f64>() / vol as f64;
                let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vol as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (a, v) in y_inst.channel(n, c).iter().zip(src) {
                    assert!((a - (v - mean) * inv).abs() < 1e-12);
                }
            }
        }

        // Finite differences over x, gamma, beta with a generic affine map.
        let gamma2 = vec![1.3f64, -0.4, 0.8, 2.0];
        let beta2 = vec![0.2f64, -1.0, 0.5, 0.0];
        let u = rand_t(shape, 152);
        let objective = |x: &Tensor5D<f64>, gm: &[f64], bt: &[f64]| {
            let y = groupnorm_forward(x, 2, gm, bt, 1e-5).unwrap();
            y.iter_f64().zip(u.iter_f64()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = groupnorm_backward(&x, 2, &gamma2, 1e-5, &u).unwrap();
        let fd_eps = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-5,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };
        for i in 0..shape.len() {
            let mut hi = x.clone();
            hi.data_mut()[i] += fd_eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= fd_eps;
            check(
                g.x.data()[i],
                (objective(&hi, &gamma2, &beta2) - objective(&lo, &gamma2, &beta2)) / (2.0 * fd_eps),
                "x",
            );
        }
        for i in 0..4 {
            let mut hi = gamma2.clone();
            hi[i] += fd_eps;
            let mut lo = gamma2.clone();
            lo[i] -= fd_eps;
            check(
                g.gamma[i],
                (objective(&x, &hi, &beta2) - objective(&x, &lo, &beta2)) / (2.0 * fd_eps),
                "gamma",
            );
            let mut hib = beta2.clone();
            hib[i] += fd_eps;
            let mut lob = beta2.clone();
            lob[i] -= fd_eps;
            check(
                g.beta[i],
                (objective(&x, &gamma2, &hib) - objective(&x, &gamma2, &lob)) / (2.0 * fd_eps),
                "beta",
            );
        }

        let bad = groupnorm_forward(&x, 3, &gamma, &beta, 1e-5);
        assert!(matches!(bad, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, _, blk) = same_block(ModulationSetting::Compensated, 161);
        let d2_dir = dir.path().join("d2");
        save_d2block(&blk, &d2_dir).unwrap();
        let loaded = load_d2block::<f64>(&d2_dir).unwrap();
        assert_eq!(blk, loaded);
        let a = d2block_forward(&x, &blk, None).unwrap();
        let b = d2block_forward(&x, &loaded, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(load_d2block::<f32>(&d2_dir), Err(Error::Config(_))));

        let dcn = DcnBlock::<f32>::random(
            2,
            2,
            (3, 3, 3),
            ConvConfig::same((3, 3, 3)),
            DcnVariant::V2,
            162,
            0.5,
        )
        .unwrap();
        let dcn_dir = dir.path().join("dcn");
        save_dcnblock(&dcn, &dcn_dir).unwrap();
        let loaded = load_dcnblock::<f32>(&dcn_dir).unwrap();
        assert_eq!(dcn, loaded);
        assert!(matches!(load_dcnblock::<f64>(&dcn_dir), Err(Error::Config(_))));
        assert!(matches!(load_d2block::<f32>(&dcn_dir), Err(Error::Config(_))));
    }
}
