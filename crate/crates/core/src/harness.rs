//! Toy end-to-end training and inference: synthetic moving-object clips, a
//! small encoder-decoder whose decoder operator is swappable between the
//! standard and dynamically sampled convolutions, losses, optimizer,
//! gradient clipping, overlapping-clip stitching, and the region IoU.

mod net;
mod train;

pub use net::{
    load_net, save_net, upsample2x_backward, upsample2x_forward, DecStage, DecoderDynamics,
    DecoderOp, EncStage, ForwardCache, NetConfig, OperatorVariant, ToyNet, UpsampleKind,
};
pub use train::{infer, load_train_config, train_toy, LossKind, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Shape5D, Tensor5D};
use crate::{Error, Result};

/// What the synthetic object looks like.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ObjectKind {
    Square,
    Disc,
}

impl ObjectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Square => "square",
            ObjectKind::Disc => "disc",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ObjectKind::Square),
            "disc" => Ok(ObjectKind::Disc),
            other => Err(Error::Config(format!("unknown object kind '{other}'"))),
        }
    }
}

/// Recipe for one synthetic clip: a single bright object on a noisy
/// background, moving with constant velocity.
#[derive(Clone, Debug)]
pub struct SyntheticClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub kind: ObjectKind,
    /// Square side, or disc diameter.
    pub size: usize,
    /// Pixels per frame along (y, x).
    pub velocity: (f64, f64),
    pub intensity: f64,
    pub noise_stddev: f64,
    pub seed: u64,
}

fn rasterize(
    kind: ObjectKind,
    size: usize,
    pos: (f64, f64),
    height: usize,
    width: usize,
    mask: &mut [f64],
) -> usize {
    let mut count = 0;
    match kind {
        ObjectKind::Square => {
            let top = pos.0.round() as i64;
            let left = pos.1.round() as i64;
            for y in top.max(0)..(top + size as i64).min(height as i64) {
                for x in left.max(0)..(left + size as i64).min(width as i64) {
                    mask[y as usize * width + x as usize] = 1.0;
                    count += 1;
                }
            }
        }
        ObjectKind::Disc => {
            let r = size as f64 / 2.0;
            let cy = pos.0 + r;
            let cx = pos.1 + r;
            for y in 0..height {
                for x in 0..width {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if dy * dy + dx * dx <= r * r {
                        mask[y * width + x] = 1.0;
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

/// Generates one clip and its exact per-frame object mask, both shaped
/// (1, 1, frames, height, width). Deterministic per seed; starts that would
/// let the object leave the frame entirely are rejected and resampled.
pub fn synth_generate(spec: &SyntheticClipSpec) -> Result<(Tensor5D<f64>, Tensor5D<f64>)> {
    if spec.frames == 0 || spec.height == 0 || spec.width == 0 || spec.size == 0 {
        return Err(Error::InvalidArgument("clip dimensions must be nonzero".into()));
    }
    if !(spec.noise_stddev >= 0.0) {
        return Err(Error::InvalidArgument("noise stddev must be >= 0".into()));
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
    let shape = Shape5D::new(1, 1, spec.frames, spec.height, spec.width)?;
    let vol = spec.height * spec.width;

    // A start is viable when the object keeps at least one pixel in frame
    // for the whole clip.
    let mut start = None;
    'outer: for _ in 0..1000 {
        let y0 = rng.gen_range(-(spec.size as f64) + 1.0..spec.height as f64 - 1.0);
        let x0 = rng.gen_range(-(spec.size as f64) + 1.0..spec.width as f64 - 1.0);
        let mut scratch = vec![0.0f64; vol];
        for f in 0..spec.frames {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            let pos = (y0 + spec.velocity.0 * f as f64, x0 + spec.velocity.1 * f as f64);
            if rasterize(spec.kind, spec.size, pos, spec.height, spec.width, &mut scratch) == 0 {
                continue 'outer;
            }
        }
        start = Some((y0, x0));
        break;
    }
    let (y0, x0) = start.ok_or_else(|| {
        Error::InvalidArgument("no start keeps the object in frame for the whole clip".into())
    })?;

    let mut mask = Tensor5D::<f64>::zeros(shape);
    let mut clip = Tensor5D::<f64>::zeros(shape);
    let noise = Normal::new(0.0, spec.noise_stddev.max(f64::MIN_POSITIVE)).expect("valid stddev");
    for f in 0..spec.frames {
        let pos = (y0 + spec.velocity.0 * f as f64, x0 + spec.velocity.1 * f as f64);
        let frame = &mut mask.data_mut()[f * vol..(f + 1) * vol];
        rasterize(spec.kind, spec.size, pos, spec.height, spec.width, frame);
    }
    for i in 0..shape.len() {
        let m = mask.data()[i];
        let n = if spec.noise_stddev > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        clip.data_mut()[i] = m * spec.intensity + n;
    }
    Ok((clip, mask))
}

fn check_binary_labels<E: Element>(labels: &Tensor5D<E>) -> Result<()> {
    for v in labels.iter_f64() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got {v}")));
        }
    }
    Ok(())
}

fn check_loss_shapes(logits: Shape5D, labels: Shape5D) -> Result<()> {
    if logits != labels {
        return Err(Error::ShapeMismatch(format!(
            "logits shaped {logits}, labels shaped {labels}"
        )));
    }
    Ok(())
}

/// Jaccard-extension coefficients for one frame: given labels in the order
/// of descending hinge error, g_k is the increase of 1 - I_k/U_k.
fn lovasz_grad_coeffs(sorted_labels: &[f64], total_pos: f64) -> Vec<f64> {
    let m = sorted_labels.len();
    let mut g = vec![0.0f64; m];
    let mut cum_pos = 0.0f64;
    let mut cum_neg = 0.0f64;
    let mut prev = 0.0f64;
    for k in 0..m {
        cum_pos += sorted_labels[k];
        cum_neg += 1.0 - sorted_labels[k];
        let intersection = total_pos - cum_pos;
        let union = total_pos + cum_neg;
        let jacc = 1.0 - intersection / union;
        g[k] = jacc - prev;
        prev = jacc;
    }
    g
}

fn lovasz_frame(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.len();
    let total_pos: f64 = labels.iter().sum();
    let signs: Vec<f64> = labels.iter().map(|&y| 2.0 * y - 1.0).collect();
    let errors: Vec<f64> = logits.iter().zip(&signs).map(|(&z, &s)| 1.0 - z * s).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let sorted_labels: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
    let g = lovasz_grad_coeffs(&sorted_labels, total_pos);
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f64; m];
    for (rank, &i) in order.iter().enumerate() {
        loss += errors[i].max(0.0) * g[rank];
        if errors[i] > 0.0 {
            dlogits[i] = -signs[i] * g[rank];
        }
    }
    (loss, dlogits)
}

fn for_each_frame<E: Element, F: FnMut(&[E], &[E])>(
    logits: &Tensor5D<E>,
    labels: &Tensor5D<E>,
    mut f: F,
) {
    let s = logits.shape();
    let fsize = s.h * s.w;
    let frames = s.n * s.c * s.t;
    for fi in 0..frames {
        f(
            &logits.data()[fi * fsize..(fi + 1) * fsize],
            &labels.data()[fi * fsize..(fi + 1) * fsize],
        );
    }
}

/// Lovász-hinge loss: per-frame flattened convex surrogate of 1 - IoU,
/// averaged over frames. Nonnegative; zero when every pixel's margin is
/// at least 1.
pub fn lovasz_hinge_loss(logits: &Tensor5D<f64>, labels: &Tensor5D<f64>) -> Result<f64> {
    check_loss_shapes(logits.shape(), labels.shape())?;
    check_binary_labels(labels)?;
    let mut total = 0.0f64;
    let mut frames = 0usize;
    for_each_frame(logits, labels, |z, y| {
        total += lovasz_frame(z, y).0;
        frames += 1;
    });
    Ok(total / frames as f64)
}

/// Gradient of [`lovasz_hinge_loss`] w.r.t. the logits. The sort order and
/// Jaccard coefficients are locally constant, so only the hinge factor
/// differentiates.
pub fn lovasz_hinge_backward(
    logits: &Tensor5D<f64>,
    labels: &Tensor5D<f64>,
) -> Result<Tensor5D<f64>> {
    check_loss_shapes(logits.shape(), labels.shape())?;
    check_binary_labels(labels)?;
    let s = logits.shape();
    let frames = (s.n * s.c * s.t) as f64;
    let mut out = Tensor5D::<f64>::zeros(s);
    let fsize = s.h * s.w;
    let mut fi = 0usize;
    for_each_frame(logits, labels, |z, y| {
        let (_, dz) = lovasz_frame(z, y);
        for (j, d) in dz.into_iter().enumerate() {
            out.data_mut()[fi * fsize + j] = d / frames;
        }
        fi += 1;
    });
    Ok(out)
}

/// Sigmoid cross-entropy, mean-reduced, in the overflow-safe log-sum form.
pub fn bce_loss(logits: &Tensor5D<f64>, labels: &Tensor5D<f64>) -> Result<f64> {
    check_loss_shapes(logits.shape(), labels.shape())?;
    check_binary_labels(labels)?;
    let n = logits.shape().len() as f64;
    let mut total = 0.0f64;
    for (z, y) in logits.iter_f64().zip(labels.iter_f64()) {
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    Ok(total / n)
}

/// Gradient of [`bce_loss`] w.r.t. the logits: (sigmoid(z) - y) / count.
pub fn bce_backward(logits: &Tensor5D<f64>, labels: &Tensor5D<f64>) -> Result<Tensor5D<f64>> {
    check_loss_shapes(logits.shape(), labels.shape())?;
    check_binary_labels(labels)?;
    let n = logits.shape().len() as f64;
    let data = logits
        .iter_f64()
        .zip(labels.iter_f64())
        .map(|(z, y)| (crate::blocks::sigmoid(z) - y) / n)
        .collect();
    Tensor5D::from_vec_allow_non_finite(logits.shape(), data)
}

/// Rescales the flat gradient vector so its global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    Ok(norm)
}

/// Adam accumulator state for one flat parameter vector.
#[derive(Clone, PartialEq, Debug)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(len: usize, lr: f64) -> Self {
        OptimState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Clip start indices covering [0, video_len): step clip_len - overlap,
/// final start clamped so the last clip ends exactly at the video end.
pub fn split_into_clips(video_len: usize, clip_len: usize, overlap: usize) -> Result<Vec<usize>> {
    if clip_len == 0 || clip_len > video_len {
        return Err(Error::InvalidArgument(format!(
            "clip length {clip_len} must be in 1..={video_len}"
        )));
    }
    if overlap >= clip_len {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be smaller than clip length {clip_len}"
        )));
    }
    let step = clip_len - overlap;
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        if s + clip_len >= video_len {
            starts.push(video_len - clip_len);
            break;
        }
        starts.push(s);
        s += step;
    }
    debug_assert!(starts.windows(2).all(|w| w[0] < w[1]));
    Ok(starts)
}

/// Per-frame arithmetic mean over every clip covering that frame.
pub fn stitch_overlapping(
    clips: &[Tensor5D<f64>],
    starts: &[usize],
    video_len: usize,
) -> Result<Tensor5D<f64>> {
    if clips.is_empty() || clips.len() != starts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} clips for {} starts",
            clips.len(),
            starts.len()
        )));
    }
    let cs = clips[0].shape();
    for c in clips {
        if c.shape() != cs {
            return Err(Error::ShapeMismatch(format!(
                "clip shaped {}, expected {cs}",
                c.shape()
            )));
        }
    }
    let out_shape = Shape5D::new(cs.n, cs.c, video_len, cs.h, cs.w)?;
    let mut sum = vec![0.0f64; out_shape.len()];
    let mut cover = vec![0u32; video_len];
    let fsize = cs.h * cs.w;
    for (clip, &start) in clips.iter().zip(starts) {
        if start + cs.t > video_len {
            return Err(Error::InvalidArgument(format!(
                "clip at {start} with {} frames overruns video of {video_len}",
                cs.t
            )));
        }
        for n in 0..cs.n {
            for ch in 0..cs.c {
                for t in 0..cs.t {
                    let src = ((n * cs.c + ch) * cs.t + t) * fsize;
                    let dst = ((n * cs.c + ch) * video_len + start + t) * fsize;
                    for i in 0..fsize {
                        sum[dst + i] += clip.data()[src + i];
                    }
                }
            }
        }
        for t in 0..cs.t {
            cover[start + t] += 1;
        }
    }
    // split_into_clips covers every frame; anything else is a caller bug.
    assert!(cover.iter().all(|&c| c > 0), "uncovered frame in stitch");
    let mut out = Tensor5D::<f64>::zeros(out_shape);
    for n in 0..cs.n {
        for ch in 0..cs.c {
            for t in 0..video_len {
                let base = ((n * cs.c + ch) * video_len + t) * fsize;
                let k = cover[t] as f64;
                for i in 0..fsize {
                    out.data_mut()[base + i] = sum[base + i] / k;
                }
            }
        }
    }
    Ok(out)
}

/// Region Jaccard index |pred ∩ gt| / |pred ∪ gt|; 1 when both masks are
/// empty.
pub fn iou_metric(pred: &Tensor5D<f64>, gt: &Tensor5D<f64>) -> Result<f64> {
    check_loss_shapes(pred.shape(), gt.shape())?;
    check_binary_labels(pred)?;
    check_binary_labels(gt)?;
    let mut inter = 0.0f64;
    let mut union = 0.0f64;
    for (p, g) in pred.iter_f64().zip(gt.iter_f64()) {
        if p == 1.0 && g == 1.0 {
            inter += 1.0;
        }
        if p == 1.0 || g == 1.0 {
            union += 1.0;
        }
    }
    if union == 0.0 {
        Ok(1.0)
    } else {
        Ok(inter / union)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn spec(seed: u64) -> SyntheticClipSpec {
        SyntheticClipSpec {
            frames: 6,
            height: 16,
            width: 16,
            kind: ObjectKind::Square,
            size: 4,
            velocity: (0.0, 0.0),
            intensity: 1.0,
            noise_stddev: 0.1,
            seed,
        }
    }

    #[test]
    fn synth_is_deterministic_and_masks_count_object_pixels() {
        let (c1, m1) = synth_generate(&spec(7)).unwrap();
        let (c2, m2) = synth_generate(&spec(7)).unwrap();
        assert_eq!(c1.data(), c2.data());
        assert_eq!(m1.data(), m2.data());

        // Velocity zero: every frame's mask is the first frame's mask.
        let vol = 16 * 16;
        let first = &m1.data()[0..vol];
        for f in 1..6 {
            assert_eq!(&m1.data()[f * vol..(f + 1) * vol], first);
        }

        // A 4-square fully inside covers exactly 16 pixels.
        let mut inside = spec(11);
        inside.velocity = (0.5, -0.25);
        let (_, m) = synth_generate(&inside).unwrap();
        for f in 0..6 {
            let total: f64 = m.data()[f * vol..(f + 1) * vol].iter().sum();
            assert!(total >= 1.0, "object left the frame");
            assert!(total <= 16.0);
        }

        let mut disc = spec(13);
        disc.kind = ObjectKind::Disc;
        let (_, dm) = synth_generate(&disc).unwrap();
        assert!(dm.data().iter().sum::<f64>() > 0.0);

        let mut hopeless = spec(17);
        hopeless.velocity = (50.0, 0.0);
        assert!(matches!(synth_generate(&hopeless), Err(Error::InvalidArgument(_))));
    }

    fn frame_tensor(vals: &[f64], h: usize, w: usize) -> Tensor5D<f64> {
        Tensor5D::from_vec(Shape5D::new(1, 1, 1, h, w).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn lovasz_closed_forms() {
        // Perfect separation with margin: every hinge error is <= 0.
        let labels = frame_tensor(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let logits = frame_tensor(&[10.0, -10.0, 10.0, -10.0], 2, 2);
        assert_eq!(lovasz_hinge_loss(&logits, &labels).unwrap(), 0.0);

        // Single pixel, label 1, logit 0: e = 1, g = 1.
        let one = frame_tensor(&[0.0], 1, 1);
        let lab = frame_tensor(&[1.0], 1, 1);
        assert_eq!(lovasz_hinge_loss(&one, &lab).unwrap(), 1.0);

        // No positives: I_k = 0, U_k = k, g is the discrete derivative of
        // 1 - 0/U = 1... constant 1 after the first step, so g = (1,0,0,..)
        // and the loss is the worst hinge error, clamped at 0.
        let zlab = frame_tensor(&[0.0, 0.0, 0.0, 0.0], 2, 2);
        let zlog = frame_tensor(&[-0.5, 0.25, -2.0, -3.0], 2, 2);
        // errors = 1 + z = (0.5, 1.25, -1.0, -2.0); worst = 1.25.
        assert!((lovasz_hinge_loss(&zlog, &zlab).unwrap() - 1.25).abs() < 1e-15);

        let bad = frame_tensor(&[0.5, 0.0, 0.0, 0.0], 2, 2);
        assert!(matches!(
            lovasz_hinge_loss(&zlog, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    /// Brute-force re-derivation: for every prefix length the Jaccard value
    /// is recounted from scratch instead of accumulated.
    fn lovasz_frame_bruteforce(logits: &[f64], labels: &[f64]) -> f64 {
        let m = logits.len();
        let mut idx: Vec<usize> = (0..m).collect();
        let err = |i: usize| 1.0 - logits[i] * (2.0 * labels[i] - 1.0);
        idx.sort_by(|&a, &b| err(b).partial_cmp(&err(a)).unwrap());
        let p: f64 = labels.iter().sum();
        let jacc_at = |k: usize| -> f64 {
            // 1 - I/U after taking the k highest-error pixels.
            let mut taken_pos = 0.0;
            let mut taken_neg = 0.0;
            for &i in idx.iter().take(k) {
                if labels[i] == 1.0 {
                    taken_pos += 1.0;
                } else {
                    taken_neg += 1.0;
                }
            }
            1.0 - (p - taken_pos) / (p + taken_neg)
        };
        let mut loss = 0.0;
        for k in 1..=m {
            let g = jacc_at(k) - jacc_at(k - 1);
            loss += err(idx[k - 1]).max(0.0) * g;
        }
        loss
    }

    #[test]
    fn lovasz_matches_independent_bruteforce() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, 1.5).unwrap();
        for seed in 0..20u64 {
            let mut rng = rand::rngs::StdRng::seed_from_u64(900 + seed);
            let logits: Vec<f64> = (0..36).map(|_| normal.sample(&mut rng)).collect();
            let labels: Vec<f64> =
                (0..36).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let (fast, _) = lovasz_frame(&logits, &labels);
            let slow = lovasz_frame_bruteforce(&logits, &labels);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
            assert!(fast >= 0.0);
        }
    }

    #[test]
    fn loss_backwards_match_finite_differences() {
        use rand::SeedableRng;
        let shape = Shape5D::new(1, 1, 2, 3, 3).unwrap();
        let logits =
            Tensor5D::<f64>::new(shape, Fill::RandomNormal { seed: 31, mean: 0.0, stddev: 1.2 })
                .unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(32);
        let labels = Tensor5D::from_vec(
            shape,
            (0..shape.len()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let eps = 1e-6;
        for (loss, back, tol) in [
            (
                lovasz_hinge_loss as fn(&Tensor5D<f64>, &Tensor5D<f64>) -> Result<f64>,
                lovasz_hinge_backward as fn(&Tensor5D<f64>, &Tensor5D<f64>) -> Result<Tensor5D<f64>>,
                1e-5,
            ),
            (bce_loss, bce_backward, 1e-6),
        ] {
            let g = back(&logits, &labels).unwrap();
            for i in 0..shape.len() {
                let mut hi = logits.clone();
                hi.data_mut()[i] += eps;
                let mut lo = logits.clone();
                lo.data_mut()[i] -= eps;
                let numeric = (loss(&hi, &labels).unwrap() - loss(&lo, &labels).unwrap())
                    / (2.0 * eps);
                let analytic = g.data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() / denom <= tol,
                    "slot {i}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn bce_closed_forms() {
        let lab1 = frame_tensor(&[1.0], 1, 1);
        let lab0 = frame_tensor(&[0.0], 1, 1);
        let zero = frame_tensor(&[0.0], 1, 1);
        assert!((bce_loss(&zero, &lab1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(&zero, &lab0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let hot = frame_tensor(&[50.0], 1, 1);
        assert!(bce_loss(&hot, &lab1).unwrap() < 1e-20);
        assert!(bce_loss(&hot, &lab0).unwrap() > 10.0);
        // Extreme logits stay finite in the stabilized form.
        let cold = frame_tensor(&[-1e9], 1, 1);
        assert!(bce_loss(&cold, &lab0).unwrap().is_finite());
    }

    #[test]
    fn clip_gradients_scales_only_above_the_bound() {
        let mut small = vec![3.0, 4.0];
        let norm = clip_gradients(&mut small, 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(small, vec![3.0, 4.0]);

        let mut big = vec![12.0, 16.0];
        let norm = clip_gradients(&mut big, 10.0).unwrap();
        assert_eq!(norm, 20.0);
        assert_eq!(big, vec![6.0, 8.0]);
        let after: f64 = big.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 10.0).abs() <= 1e-12);

        let snapshot = big.clone();
        clip_gradients(&mut big, 10.0).unwrap();
        for (a, b) in big.iter().zip(&snapshot) {
            assert!((a - b).abs() <= 1e-12, "clipping is not idempotent");
        }
        assert!(clip_gradients(&mut big, 0.0).is_err());
    }

    /// Reference Adam keeping explicit bias-corrected running products.
    fn reference_adam(
        params: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        b1t: &mut f64,
        b2t: &mut f64,
        lr: f64,
    ) {
        *b1t *= 0.9;
        *b2t *= 0.999;
        for i in 0..params.len() {
            m[i] = 0.9 * m[i] + 0.1 * grads[i];
            v[i] = 0.999 * v[i] + 0.001 * grads[i] * grads[i];
            let mhat = m[i] / (1.0 - *b1t);
            let vhat = v[i] / (1.0 - *b2t);
            params[i] -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }

    #[test]
    fn adam_single_step_and_dual_implementation() {
        let mut p = vec![1.0];
        let mut st = OptimState::new(1, 1e-5);
        adam_step(&mut p, &[0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0]);

        let mut p = vec![1.0];
        let mut st = OptimState::new(1, 1e-5);
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        assert!((p[0] - (1.0 - 1e-5)).abs() < 1e-12, "update was {}", p[0] - 1.0);

        use rand::SeedableRng;
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(77);
        let n = 8;
        let mut main_p: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let mut ref_p = main_p.clone();
        let mut st = OptimState::new(n, 3e-3);
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let (mut b1t, mut b2t) = (1.0, 1.0);
        for _ in 0..100 {
            let g: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            adam_step(&mut main_p, &g, &mut st).unwrap();
            reference_adam(&mut ref_p, &g, &mut m, &mut v, &mut b1t, &mut b2t, 3e-3);
        }
        for (a, b) in main_p.iter().zip(&ref_p) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn split_examples_and_coverage() {
        assert_eq!(split_into_clips(8, 8, 3).unwrap(), vec![0]);
        assert_eq!(split_into_clips(16, 8, 3).unwrap(), vec![0, 5, 8]);
        assert_eq!(split_into_clips(13, 8, 7).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(split_into_clips(4, 8, 3).is_err());
        assert!(split_into_clips(16, 8, 8).is_err());

        for video in 1..=40usize {
            for clip in 1..=video.min(10) {
                for overlap in 0..clip {
                    let starts = split_into_clips(video, clip, overlap).unwrap();
                    let mut covered = vec![false; video];
                    for &s in &starts {
                        for t in s..s + clip {
                            covered[t] = true;
                        }
                    }
                    assert!(covered.iter().all(|&c| c), "{video}/{clip}/{overlap}");
                    assert!(starts.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn stitch_averages_overlaps() {
        let shape = Shape5D::new(1, 1, 8, 2, 2).unwrap();
        let a = Tensor5D::<f64>::new(shape, Fill::Value(1.0)).unwrap();
        let single = stitch_overlapping(&[a.clone()], &[0], 8).unwrap();
        assert_eq!(single.data(), a.data());

        let b = Tensor5D::<f64>::new(shape, Fill::Value(3.0)).unwrap();
        let out = stitch_overlapping(&[a, b], &[0, 5], 13).unwrap();
        let frame = |t: usize| out.data()[t * 4];
        for t in 0..5 {
            assert_eq!(frame(t), 1.0);
        }
        for t in 5..8 {
            assert_eq!(frame(t), 2.0, "overlap frame {t}");
        }
        for t in 8..13 {
            assert_eq!(frame(t), 3.0);
        }

        // Randomized covers: per-frame mean equals a brute-force recount.
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(55);
        for video in [9usize, 16, 21] {
            let clip = 5;
            let overlap = rng.gen_range(0..clip);
            let starts = split_into_clips(video, clip, overlap).unwrap();
            let cshape = Shape5D::new(1, 1, clip, 1, 1).unwrap();
            let clips: Vec<Tensor5D<f64>> = (0..starts.len())
                .map(|i| {
                    Tensor5D::new(
                        cshape,
                        Fill::RandomNormal { seed: 100 + i as u64, mean: 0.0, stddev: 1.0 },
                    )
                    .unwrap()
                })
                .collect();
            let out = stitch_overlapping(&clips, &starts, video).unwrap();
            for t in 0..video {
                let mut sum = 0.0;
                let mut k = 0.0;
                for (ci, &s) in starts.iter().enumerate() {
                    if t >= s && t < s + clip {
                        sum += clips[ci].data()[t - s];
                        k += 1.0;
                    }
                }
                assert!((out.data()[t] - sum / k).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn iou_cases() {
        let a = frame_tensor(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        assert_eq!(iou_metric(&a, &a).unwrap(), 1.0);
        let b = frame_tensor(&[0.0, 0.0, 1.0, 1.0], 2, 2);
        assert_eq!(iou_metric(&a, &b).unwrap(), 0.0);
        let empty = frame_tensor(&[0.0, 0.0, 0.0, 0.0], 2, 2);
        assert_eq!(iou_metric(&empty, &empty).unwrap(), 1.0);

        // 2x2 block against itself shifted by 1 in x: overlap 2, union 6.
        let g = frame_tensor(&[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], 3, 3);
        let p = frame_tensor(&[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0], 3, 3);
        assert!((iou_metric(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
