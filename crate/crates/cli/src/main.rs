//! Command-line front end: gradient checks, forward-pass benchmarks,
//! out-of-bounds sampling statistics, PGM visualization of predicted maps,
//! toy training on synthetic clips, and clip-stitched inference.
//!
//! Exit codes: 0 on success, 1 when a check or run fails on the numbers
//! (a gradient check over tolerance, training divergence, non-finite
//! values, resource limits), 2 for usage and configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d2conv3d::alloctrack::CountingAllocator;
use d2conv3d::bench::{bench_op, default_shapes, render_csv, BENCH_OPS};
use d2conv3d::blocks::sigmoid;
use d2conv3d::gradcheck::{check_op, CheckSettings, CheckableOp};
use d2conv3d::harness::{
    infer, load_net, load_train_config, synth_generate, train_toy, ObjectKind, SyntheticClipSpec,
    ToyNet, TrainConfig,
};
use d2conv3d::npy::{npy_read, npy_write};
use d2conv3d::ops::{
    oob_stats_for, ConvConfig, DilationMap, OffsetMap, OobAccounting, OobMaps, OobMode,
};
use d2conv3d::tensor::{Fill, ScalarWidth, Shape5D, Tensor5D};
use d2conv3d::viz::FrameSequence;
use d2conv3d::{Error, Result};

/// Lets `bench` report real peak allocation figures.
#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(name = "d2conv3d", version, about = "Dynamic 3D convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time operator forward passes and report latency percentiles.
    Bench(BenchArgs),
    /// Count sampling locations that leave the input volume.
    OobStats(OobStatsArgs),
    /// Render predicted maps and segmentation masks as PGM frames.
    Viz(VizArgs),
    /// Train the toy segmentation net on synthetic moving-object clips.
    TrainToy(TrainToyArgs),
    /// Run a trained checkpoint over a video with overlapping clips.
    Infer(InferArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Operator to check (repeatable); all of them when omitted.
    #[arg(long = "op")]
    ops: Vec<String>,
    /// Input shape NxCxTxHxW; per-op defaults when omitted.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long, default_value_t = 424242)]
    seed: u64,
    /// Central-difference half step.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Relative error bound; per-op default when omitted.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Random problem instances per operator.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Scalar width; checks run in f64 only.
    #[arg(long, default_value = "f64")]
    width: String,
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Operator to time (repeatable); the full suite when omitted.
    #[arg(long = "op")]
    ops: Vec<String>,
    /// Input shape NxCxTxHxW (repeatable); built-in defaults when omitted.
    #[arg(long = "shape")]
    shapes: Vec<String>,
    /// f32 | f64.
    #[arg(long, default_value = "f64")]
    width: String,
    /// Timed repetitions per row; at least 3.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OobStatsArgs {
    /// conv3d | dcn1 | dcn2 | d2conv3d.
    #[arg(long)]
    variant: String,
    /// Checkpoint directory; stats then come from its predicted maps.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Constant dilation triple "dt,dy,dx" for the synthetic d2conv3d path.
    #[arg(long)]
    synthetic_dilations: Option<String>,
    /// Offset stddev for the synthetic dcn1/dcn2 path.
    #[arg(long)]
    synthetic_offset_stddev: Option<f64>,
    /// Input shape NxCxTxHxW.
    #[arg(long, default_value = "1x1x8x16x16")]
    shape: String,
    /// interior | boundary.
    #[arg(long, default_value = "interior")]
    mode: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Input video NPY for the checkpoint path; synthesized when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for PGM frames and scale sidecars.
    #[arg(long)]
    out: PathBuf,
    /// Input video NPY; a synthetic clip when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Mask threshold on the probability map.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct TrainToyArgs {
    /// JSON config; built-in defaults when omitted. Flags below override.
    #[arg(long)]
    config: Option<PathBuf>,
    /// standard | dcn1 | dcn2 | d2.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// lovasz | bce.
    #[arg(long)]
    loss: Option<String>,
    /// Where step/epoch CSV logs and the checkpoint land.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input video NPY shaped NxCxTxHxW.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for probs.npy and mask.npy.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clip_len: usize,
    #[arg(long, default_value_t = 3)]
    overlap: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = setup_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

/// 1 for failures of the numbers, 2 for bad input.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::Resource(_) => 1,
        Error::ShapeMismatch(_)
        | Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::MalformedNpy(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
    }
}

/// Honors D2CONV3D_WORKERS for the global worker pool.
fn setup_workers() -> Result<()> {
    let raw = match std::env::var("D2CONV3D_WORKERS") {
        Ok(v) => v,
        Err(_) => return Ok(()),
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("D2CONV3D_WORKERS must be a positive integer, got '{raw}'")))?;
    if n == 0 {
        return Err(Error::Config("D2CONV3D_WORKERS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::OobStats(a) => run_oob_stats(a),
        Cmd::Viz(a) => run_viz(a),
        Cmd::TrainToy(a) => run_train_toy(a),
        Cmd::Infer(a) => run_infer(a),
    }
}

fn parse_shape(s: &str) -> Result<Shape5D> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 5 {
        return Err(Error::Config(format!("shape must be NxCxTxHxW, got '{s}'")));
    }
    let mut dims = [0usize; 5];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("shape component '{p}' is not a positive integer")))?;
    }
    Shape5D::new(dims[0], dims[1], dims[2], dims[3], dims[4])
}

fn parse_width(s: &str) -> Result<ScalarWidth> {
    match s {
        "f32" => Ok(ScalarWidth::F32),
        "f64" => Ok(ScalarWidth::F64),
        other => Err(Error::Config(format!("unknown width '{other}', expected f32 or f64"))),
    }
}

fn parse_triple(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected three comma-separated values, got '{s}'")));
    }
    let mut vals = [0.0f64; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("'{p}' is not a number")))?;
        if !v.is_finite() {
            return Err(Error::Config(format!("'{p}' must be finite")));
        }
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    match a.width.as_str() {
        "f64" => {}
        "f32" => {
            return Err(Error::Config(
                "gradient checks run in f64 only; f32 finite differences drown in rounding error"
                    .into(),
            ))
        }
        other => return Err(Error::Config(format!("unknown width '{other}'"))),
    }
    let ops: Vec<CheckableOp> = if a.ops.is_empty() {
        CheckableOp::ALL.to_vec()
    } else {
        a.ops.iter().map(|s| CheckableOp::from_str(s)).collect::<Result<_>>()?
    };
    let shape = a.shape.as_deref().map(parse_shape).transpose()?;
    let settings = CheckSettings {
        eps: a.eps,
        tolerance: a.tolerance,
        instances: a.instances,
        corrupt: a.corrupt,
    };
    let mut all_pass = true;
    for op in ops {
        let report = check_op(op, shape, a.seed, &settings)?;
        print!("{}", report.render());
        all_pass &= report.passed();
    }
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run_bench(a: BenchArgs) -> Result<ExitCode> {
    let ops: Vec<String> = if a.ops.is_empty() {
        BENCH_OPS.iter().map(|s| s.to_string()).collect()
    } else {
        for op in &a.ops {
            if !BENCH_OPS.contains(&op.as_str()) {
                return Err(Error::Config(format!(
                    "unknown op '{op}', expected one of {}",
                    BENCH_OPS.join(", ")
                )));
            }
        }
        a.ops.clone()
    };
    let shapes: Vec<Shape5D> = if a.shapes.is_empty() {
        default_shapes()
    } else {
        a.shapes.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?
    };
    let width = parse_width(&a.width)?;
    let mut rows = Vec::with_capacity(ops.len() * shapes.len());
    for op in &ops {
        for &shape in &shapes {
            rows.push(bench_op(op, shape, width, a.reps, a.seed)?);
        }
    }
    let csv = render_csv(&rows);
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Per-output-point constant dilation triple over the map extents.
fn const_dilation_map(
    batch: usize,
    ext: (usize, usize, usize),
    d: (f64, f64, f64),
) -> Result<DilationMap<f64>> {
    let mut t = Tensor5D::<f64>::zeros(Shape5D::new(batch, 3, ext.0, ext.1, ext.2)?);
    for n in 0..batch {
        for (c, v) in [d.0, d.1, d.2].into_iter().enumerate() {
            for slot in t.channel_mut(n, c) {
                *slot = v;
            }
        }
    }
    DilationMap::new(t)
}

fn oob_csv(accs: &[OobAccounting]) -> String {
    let mut out = String::from("label,mode,total,oob,percent\n");
    for acc in accs {
        let mode = match acc.mode {
            OobMode::InteriorOnly => "interior",
            OobMode::BoundaryInclusive => "boundary",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            acc.label, mode, acc.pooled.total_samples, acc.pooled.oob_samples,
            acc.pooled.percent()
        ));
        for s in &acc.per_sequence {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.label, mode, s.total_samples, s.oob_samples,
                s.percent()
            ));
        }
    }
    out
}

/// A single-sequence moving-square clip matching the requested extents.
fn synth_input(frames: usize, height: usize, width: usize, seed: u64) -> Result<Tensor5D<f64>> {
    let spec = SyntheticClipSpec {
        frames,
        height,
        width,
        kind: ObjectKind::Square,
        size: (height.min(width) / 4).max(2),
        velocity: (0.4, -0.3),
        intensity: 1.0,
        noise_stddev: 0.05,
        seed,
    };
    Ok(synth_generate(&spec)?.0)
}

fn load_or_synth_input(
    input: &Option<PathBuf>,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Tensor5D<f64>> {
    match input {
        Some(path) => Ok(npy_read(path)?.into_f64()),
        None => synth_input(frames, height, width, seed),
    }
}

fn run_oob_stats(a: OobStatsArgs) -> Result<ExitCode> {
    let mode = match a.mode.as_str() {
        "interior" => OobMode::InteriorOnly,
        "boundary" => OobMode::BoundaryInclusive,
        other => {
            return Err(Error::Config(format!(
                "unknown mode '{other}', expected interior or boundary"
            )))
        }
    };
    let synthetic = a.synthetic_dilations.is_some() || a.synthetic_offset_stddev.is_some();
    if a.checkpoint.is_some() && synthetic {
        return Err(Error::Config(
            "--checkpoint and the --synthetic-* flags are mutually exclusive".into(),
        ));
    }

    let accs = if let Some(dir) = &a.checkpoint {
        checkpoint_oob(dir, &a, mode)?
    } else {
        vec![synthetic_oob(&a, mode)?]
    };
    let csv = oob_csv(&accs);
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Statistics for made-up maps over a bare 3x3x3 same-padded layer.
fn synthetic_oob(a: &OobStatsArgs, mode: OobMode) -> Result<OobAccounting> {
    let shape = parse_shape(&a.shape)?;
    let cfg = ConvConfig::same((3, 3, 3));
    let in_ext = shape.extents();
    let out_ext = cfg.output_extents(in_ext)?;
    let k = 27;
    match a.variant.as_str() {
        "conv3d" => {
            oob_stats_for::<f64>(&a.variant, in_ext, shape.n, &cfg, &OobMaps::Lattice, mode)
        }
        "d2conv3d" => {
            let triple = a.synthetic_dilations.as_deref().ok_or_else(|| {
                Error::Config("variant d2conv3d needs --synthetic-dilations dt,dy,dx".into())
            })?;
            let map = const_dilation_map(shape.n, out_ext, parse_triple(triple)?)?;
            oob_stats_for(&a.variant, in_ext, shape.n, &cfg, &OobMaps::Dilated(&map), mode)
        }
        "dcn1" | "dcn2" => {
            let stddev = a.synthetic_offset_stddev.ok_or_else(|| {
                Error::Config(format!("variant {} needs --synthetic-offset-stddev", a.variant))
            })?;
            if !(stddev.is_finite() && stddev > 0.0) {
                return Err(Error::Config(format!(
                    "offset stddev must be finite and positive, got {stddev}"
                )));
            }
            let t = Tensor5D::<f64>::new(
                Shape5D::new(shape.n, 3 * k, out_ext.0, out_ext.1, out_ext.2)?,
                Fill::RandomNormal { seed: a.seed, mean: 0.0, stddev },
            )?;
            let map = OffsetMap::new(t, k)?;
            oob_stats_for(&a.variant, in_ext, shape.n, &cfg, &OobMaps::Deformed(&map), mode)
        }
        other => Err(Error::Config(format!(
            "unknown variant '{other}', expected conv3d, dcn1, dcn2 or d2conv3d"
        ))),
    }
}

/// Statistics from the maps a checkpoint actually predicts on an input.
fn checkpoint_oob(dir: &Path, a: &OobStatsArgs, mode: OobMode) -> Result<Vec<OobAccounting>> {
    let net = load_net(dir)?;
    let shape = parse_shape(&a.shape)?;
    if a.input.is_none() && (shape.n != 1 || shape.c != 1) {
        return Err(Error::Config(
            "the synthetic input covers one single-channel sequence; pass --input for more".into(),
        ));
    }
    let x = load_or_synth_input(&a.input, shape.t, shape.h, shape.w, a.seed)?;
    let cfg = ConvConfig::same((3, 3, 3));
    let mut accs = Vec::new();
    for d in net.decoder_dynamics(&x)? {
        let acc = if let Some(t) = &d.dilation {
            let map = DilationMap::new(t.clone())?;
            oob_stats_for(&d.label, d.in_extents, d.batch, &cfg, &OobMaps::Dilated(&map), mode)?
        } else if let Some(t) = &d.offsets {
            let map = OffsetMap::new(t.clone(), 27)?;
            oob_stats_for(&d.label, d.in_extents, d.batch, &cfg, &OobMaps::Deformed(&map), mode)?
        } else {
            oob_stats_for::<f64>(&d.label, d.in_extents, d.batch, &cfg, &OobMaps::Lattice, mode)?
        };
        accs.push(acc);
    }
    Ok(accs)
}

fn run_viz(a: VizArgs) -> Result<ExitCode> {
    if !(a.threshold.is_finite() && a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Error::Config("threshold must lie strictly between 0 and 1".into()));
    }
    let net: ToyNet = load_net(&a.checkpoint)?;
    let x = load_or_synth_input(&a.input, a.frames, a.height, a.width, a.seed)?;
    std::fs::create_dir_all(&a.out)?;

    let mut written = 0usize;
    for d in net.decoder_dynamics(&x)? {
        let stem = d.label.replace('/', "_");
        if let Some(t) = &d.dilation {
            let fs = FrameSequence::from_channel_mean(&format!("{stem}_dilation"), t)?;
            written += fs.save_pgm_series(&a.out)?.len();
        }
        if let Some(t) = &d.offsets {
            let fs = FrameSequence::from_channel_mean_abs(&format!("{stem}_offsets_abs"), t)?;
            written += fs.save_pgm_series(&a.out)?.len();
        }
        if let Some(t) = &d.modulation {
            let fs = FrameSequence::from_channel_mean(&format!("{stem}_modulation"), t)?;
            written += fs.save_pgm_series(&a.out)?.len();
        }
    }

    let logits = net.forward(&x)?;
    let probs = Tensor5D::from_vec_allow_non_finite(
        logits.shape(),
        logits.iter_f64().map(sigmoid).collect(),
    )?;
    written += FrameSequence::from_channel_mean("probs", &probs)?.save_pgm_series(&a.out)?.len();
    written +=
        FrameSequence::from_threshold("mask", &probs, a.threshold)?.save_pgm_series(&a.out)?.len();

    println!("wrote {written} images to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_train_toy(a: TrainToyArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => load_train_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.steps_per_epoch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.loss {
        cfg.loss = v;
    }
    if let Some(v) = a.out_dir {
        cfg.out_dir = Some(v);
    }
    let outcome = train_toy(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(ExitCode::SUCCESS)
}

fn run_infer(a: InferArgs) -> Result<ExitCode> {
    let net = load_net(&a.checkpoint)?;
    let video = npy_read(&a.input)?.into_f64();
    let (probs, mask) = infer(&net, &video, a.clip_len, a.overlap, a.threshold)?;
    std::fs::create_dir_all(&a.out)?;
    npy_write(&probs, &a.out.join("probs.npy"))?;
    npy_write(&mask, &a.out.join("mask.npy"))?;
    let positive = mask.iter_f64().filter(|&v| v == 1.0).count();
    println!(
        "wrote probs.npy and mask.npy to {} ({} of {} voxels positive)",
        a.out.display(),
        positive,
        mask.shape().len()
    );
    Ok(ExitCode::SUCCESS)
}
