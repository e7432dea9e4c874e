//! The toy training loop: synthetic moving-object clips in, a trained
//! segmentation net and per-step/per-epoch CSV logs out. Runs are fully
//! deterministic for a fixed config.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::net::{NetConfig, OperatorVariant, ToyNet, UpsampleKind};
use super::{
    adam_step, bce_backward, bce_loss, clip_gradients, iou_metric, lovasz_hinge_backward,
    lovasz_hinge_loss, save_net, split_into_clips, stitch_overlapping, synth_generate, ObjectKind,
    OptimState, SyntheticClipSpec,
};
use crate::tensor::{Shape5D, Tensor5D};
use crate::{Error, Result};

/// Which pixel loss drives training.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossKind {
    Lovasz,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Lovasz => "lovasz",
            LossKind::Bce => "bce",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "lovasz" => Ok(LossKind::Lovasz),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// Full recipe for [`train_toy`]. Every field has a default, so a config
/// file only lists what it overrides; unknown keys are rejected by name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Decoder operator: standard | dcn1 | dcn2 | d2.
    pub variant: String,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Distinct training clips cycled round-robin by step index.
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Object shape: square | disc.
    pub object: String,
    pub object_size: usize,
    /// Per-frame speed bound; each clip draws its velocity uniformly.
    pub max_speed: f64,
    pub intensity: f64,
    pub noise_stddev: f64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Epoch index (0-based) at which the decayed rate takes over.
    pub lr_decay_epoch: usize,
    pub max_grad_norm: f64,
    /// Pixel loss: lovasz | bce.
    pub loss: String,
    /// Held-out clips scored after every epoch.
    pub eval_clips: usize,
    pub threshold: f64,
    pub gn_groups: usize,
    /// Upsampling between decoder stages: nearest | trilinear.
    pub upsample: String,
    pub enc_channels: Vec<usize>,
    /// Where steps.csv, epochs.csv, and checkpoint/ land; None keeps the
    /// run in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 17,
            variant: "d2".into(),
            epochs: 5,
            steps_per_epoch: 40,
            clips: 64,
            frames: 8,
            height: 32,
            width: 32,
            object: "square".into(),
            object_size: 6,
            max_speed: 1.5,
            intensity: 1.0,
            noise_stddev: 0.1,
            lr: 3e-3,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 4,
            max_grad_norm: 10.0,
            loss: "lovasz".into(),
            eval_clips: 16,
            threshold: 0.5,
            gn_groups: 2,
            upsample: "nearest".into(),
            enc_channels: vec![4, 8],
            out_dir: None,
        }
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    /// Mean held-out IoU after the last epoch.
    pub final_mean_iou: f64,
    pub per_epoch_iou: Vec<f64>,
    pub steps_run: usize,
    /// Loss at the last optimizer step; NaN when no step ran.
    pub final_loss: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    let positive = [
        (cfg.epochs, "epochs"),
        (cfg.clips, "clips"),
        (cfg.frames, "frames"),
        (cfg.object_size, "object_size"),
        (cfg.eval_clips, "eval_clips"),
        (cfg.gn_groups, "gn_groups"),
    ];
    for (value, name) in positive {
        if value == 0 {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
    }
    let finite_pos = [
        (cfg.lr, "lr"),
        (cfg.max_grad_norm, "max_grad_norm"),
        (cfg.lr_decay_factor, "lr_decay_factor"),
        (cfg.intensity, "intensity"),
    ];
    for (value, name) in finite_pos {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Config(format!("{name} must be finite and positive")));
        }
    }
    if !(cfg.max_speed.is_finite() && cfg.max_speed >= 0.0) {
        return Err(Error::Config("max_speed must be finite and nonnegative".into()));
    }
    if !(cfg.noise_stddev.is_finite() && cfg.noise_stddev >= 0.0) {
        return Err(Error::Config("noise_stddev must be finite and nonnegative".into()));
    }
    if !(cfg.threshold.is_finite() && cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::Config("threshold must lie strictly between 0 and 1".into()));
    }
    Ok(())
}

/// Deterministic per-clip data: training clips use `offset` = clip index,
/// held-out clips sit 1_000_000 indices away.
fn make_clip(
    cfg: &TrainConfig,
    kind: ObjectKind,
    offset: u64,
) -> Result<(Tensor5D<f64>, Tensor5D<f64>)> {
    let seed = cfg.seed.wrapping_add(offset);
    let mut vel_rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let velocity = if cfg.max_speed > 0.0 {
        (
            vel_rng.gen_range(-cfg.max_speed..cfg.max_speed),
            vel_rng.gen_range(-cfg.max_speed..cfg.max_speed),
        )
    } else {
        (0.0, 0.0)
    };
    synth_generate(&SyntheticClipSpec {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        kind,
        size: cfg.object_size,
        velocity,
        intensity: cfg.intensity,
        noise_stddev: cfg.noise_stddev,
        seed,
    })
}

fn sigmoid_map(logits: &Tensor5D<f64>) -> Tensor5D<f64> {
    Tensor5D::from_vec_allow_non_finite(
        logits.shape(),
        logits.iter_f64().map(crate::blocks::sigmoid).collect(),
    )
    .expect("same length")
}

fn threshold_map(probs: &Tensor5D<f64>, threshold: f64) -> Tensor5D<f64> {
    Tensor5D::from_vec(
        probs.shape(),
        probs
            .iter_f64()
            .map(|p| if p > threshold { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("same length")
}

fn mean_holdout_iou(cfg: &TrainConfig, kind: ObjectKind, net: &ToyNet) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..cfg.eval_clips {
        let (clip, mask) = make_clip(cfg, kind, 1_000_000 + i as u64)?;
        let probs = sigmoid_map(&net.forward(&clip)?);
        let pred = threshold_map(&probs, cfg.threshold);
        total += iou_metric(&pred, &mask)?;
    }
    Ok(total / cfg.eval_clips as f64)
}

/// Trains the toy net from scratch; aborts with [`Error::Diverged`] the
/// moment the loss leaves the finite range.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    validate(cfg)?;
    let variant = OperatorVariant::from_str(&cfg.variant)?;
    let kind = ObjectKind::from_str(&cfg.object)?;
    let upsample = UpsampleKind::from_str(&cfg.upsample)?;
    let loss_kind = LossKind::from_str(&cfg.loss)?;

    let mut net = ToyNet::new(&NetConfig {
        enc_channels: cfg.enc_channels.clone(),
        gn_groups: cfg.gn_groups,
        gn_eps: 1e-5,
        variant,
        upsample,
        seed: cfg.seed,
    })?;
    let mut state = OptimState::new(net.num_params(), cfg.lr);

    let mut step_rows = vec!["step,loss,lr,grad_norm".to_string()];
    let mut epoch_rows = vec!["epoch,mean_iou".to_string()];
    let mut per_epoch_iou = Vec::with_capacity(cfg.epochs);
    let mut steps_run = 0usize;
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        state.lr = if epoch >= cfg.lr_decay_epoch {
            cfg.lr * cfg.lr_decay_factor
        } else {
            cfg.lr
        };
        for s in 0..cfg.steps_per_epoch {
            let step = epoch * cfg.steps_per_epoch + s;
            let (clip, mask) = make_clip(cfg, kind, (step % cfg.clips) as u64)?;
            let (logits, cache) = net.forward_cached(&clip)?;
            let (loss, dlogits) = match loss_kind {
                LossKind::Lovasz => (
                    lovasz_hinge_loss(&logits, &mask)?,
                    lovasz_hinge_backward(&logits, &mask)?,
                ),
                LossKind::Bce => (bce_loss(&logits, &mask)?, bce_backward(&logits, &mask)?),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let mut grads = net.backward(&cache, &dlogits)?;
            let grad_norm = clip_gradients(&mut grads, cfg.max_grad_norm)?;
            let mut params = net.params_flat();
            adam_step(&mut params, &grads, &mut state)?;
            net.set_params_flat(&params)?;
            step_rows.push(format!("{step},{loss},{},{grad_norm}", state.lr));
            steps_run += 1;
            final_loss = loss;
        }
        let mean_iou = mean_holdout_iou(cfg, kind, &net)?;
        epoch_rows.push(format!("{epoch},{mean_iou}"));
        per_epoch_iou.push(mean_iou);
    }

    let checkpoint_dir = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("steps.csv"), step_rows.join("\n") + "\n")?;
            std::fs::write(dir.join("epochs.csv"), epoch_rows.join("\n") + "\n")?;
            let ck = dir.join("checkpoint");
            save_net(&net, &ck)?;
            Some(ck)
        }
        None => None,
    };

    Ok(TrainOutcome {
        final_mean_iou: *per_epoch_iou.last().expect("at least one epoch"),
        per_epoch_iou,
        steps_run,
        final_loss,
        checkpoint_dir,
    })
}

/// Parses a JSON config file; missing keys fall back to the defaults,
/// unknown keys are named in the error.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(Error::from)
}

fn slice_frames(video: &Tensor5D<f64>, start: usize, len: usize) -> Result<Tensor5D<f64>> {
    let s = video.shape();
    let shape = Shape5D::new(s.n, s.c, len, s.h, s.w)?;
    let mut data = Vec::with_capacity(shape.len());
    let plane = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.t * plane;
            data.extend_from_slice(&video.data()[base + start * plane..base + (start + len) * plane]);
        }
    }
    Tensor5D::from_vec_allow_non_finite(shape, data)
}

/// Segments a video of any length: overlapping clips through the net,
/// per-pixel sigmoid, overlap-averaged probabilities, thresholded mask.
pub fn infer(
    net: &ToyNet,
    video: &Tensor5D<f64>,
    clip_len: usize,
    overlap: usize,
    threshold: f64,
) -> Result<(Tensor5D<f64>, Tensor5D<f64>)> {
    if !(threshold.is_finite() && threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config("threshold must lie strictly between 0 and 1".into()));
    }
    let starts = split_into_clips(video.shape().t, clip_len, overlap)?;
    let mut prob_clips = Vec::with_capacity(starts.len());
    for &start in &starts {
        let clip = slice_frames(video, start, clip_len)?;
        prob_clips.push(sigmoid_map(&net.forward(&clip)?));
    }
    let probs = stitch_overlapping(&prob_clips, &starts, video.shape().t)?;
    let mask = threshold_map(&probs, threshold);
    Ok((probs, mask))
}
