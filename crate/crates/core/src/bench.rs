//! Wall-clock and peak-allocation benchmarks for the five forward
//! operators. Rows are emitted in a fixed (operator, shape) order so CSV
//! output is byte-stable for a given machine.

use std::time::Instant;

use crate::alloctrack::measure_peak;
use crate::blocks::{d2block_forward, ActivationKind, D2Block, ModulationSetting};
use crate::ops::{
    conv3d_forward, d2conv3d_forward, dcn1_3d_forward, dcn2_3d_forward, ConvConfig, DilationMap,
    ModulationMap, OffsetMap,
};
use crate::tensor::{Element, Fill, KernelWeights, ScalarWidth, Shape5D, Tensor5D};
use crate::{Error, Result};

/// Operators covered by the benchmark suite, in row order.
pub const BENCH_OPS: [&str; 5] = ["conv3d", "dcn1", "dcn2", "d2conv3d", "d2block"];

/// One benchmark row.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub op: String,
    /// Input shape as NxCxTxHxW.
    pub shape: String,
    pub width: ScalarWidth,
    pub reps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Peak live bytes allocated during one forward; 0 when the counting
    /// allocator is not installed in this binary.
    pub peak_bytes: usize,
    pub workers: usize,
}

/// Default input shapes, smallest first.
pub fn default_shapes() -> Vec<Shape5D> {
    vec![
        Shape5D::new(1, 2, 4, 8, 8).expect("static shape"),
        Shape5D::new(1, 4, 4, 16, 16).expect("static shape"),
        Shape5D::new(1, 4, 8, 16, 16).expect("static shape"),
    ]
}

/// Nearest-rank percentile of an ascending-sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

struct Workload<E: Element> {
    x: Tensor5D<E>,
    w: KernelWeights<E>,
    cfg: ConvConfig,
    offsets: OffsetMap<E>,
    mods: ModulationMap<E>,
    dilation: DilationMap<E>,
    block: D2Block<E>,
}

fn workload<E: Element>(shape: Shape5D, seed: u64) -> Result<Workload<E>> {
    let kernel = (3, 3, 3);
    let k = 27;
    let cfg = ConvConfig::same(kernel);
    let c_out = shape.c;
    let x = Tensor5D::new(shape, Fill::RandomNormal { seed, mean: 0.0, stddev: 1.0 })?;
    let w = KernelWeights::random(c_out, shape.c, kernel, true, seed ^ 1, 0.5)?;
    let ext = shape.extents();
    let offsets = OffsetMap::new(
        Tensor5D::new(
            Shape5D::new(shape.n, 3 * k, ext.0, ext.1, ext.2)?,
            Fill::RandomNormal { seed: seed ^ 2, mean: 0.25, stddev: 0.05 },
        )?,
        k,
    )?;
    let mods = ModulationMap::new(
        Tensor5D::new(
            Shape5D::new(shape.n, k, ext.0, ext.1, ext.2)?,
            Fill::RandomNormal { seed: seed ^ 3, mean: 1.0, stddev: 0.1 },
        )?,
        k,
    )?;
    let dilation = DilationMap::new(Tensor5D::new(
        Shape5D::new(shape.n, 3, ext.0, ext.1, ext.2)?,
        Fill::RandomNormal { seed: seed ^ 4, mean: 1.0, stddev: 0.15 },
    )?)?;
    let mut block = D2Block::random(
        c_out,
        shape.c,
        kernel,
        cfg,
        ActivationKind::OnePlusElu,
        ModulationSetting::Compensated,
        seed ^ 5,
        0.5,
    )?;
    for v in block.f_d.bias_mut().expect("predictor bias") {
        *v = E::from_f64(0.45);
    }
    Ok(Workload { x, w, cfg, offsets, mods, dilation, block })
}

fn run_once<E: Element>(op: &str, load: &Workload<E>) -> Result<()> {
    match op {
        "conv3d" => conv3d_forward(&load.x, &load.w, &load.cfg).map(|_| ()),
        "dcn1" => dcn1_3d_forward(&load.x, &load.w, &load.offsets, &load.cfg).map(|_| ()),
        "dcn2" => {
            dcn2_3d_forward(&load.x, &load.w, &load.offsets, &load.mods, &load.cfg).map(|_| ())
        }
        "d2conv3d" => {
            d2conv3d_forward(&load.x, &load.w, &load.dilation, &load.mods, &load.cfg).map(|_| ())
        }
        "d2block" => d2block_forward(&load.x, &load.block, None).map(|_| ()),
        other => Err(Error::Config(format!("unknown bench op '{other}'"))),
    }
}

fn bench_with<E: Element>(op: &str, shape: Shape5D, reps: usize, seed: u64) -> Result<BenchRecord> {
    let load = workload::<E>(shape, seed)?;
    // Warm-up plus allocation profile, outside the timed reps.
    let (result, peak_bytes) = measure_peak(|| run_once(op, &load));
    result?;

    let mut times_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run_once(op, &load)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times_ms.sort_by(|a, b| a.total_cmp(b));
    Ok(BenchRecord {
        op: op.to_string(),
        shape: format!("{}x{}x{}x{}x{}", shape.n, shape.c, shape.t, shape.h, shape.w),
        width: E::WIDTH,
        reps,
        median_ms: percentile(&times_ms, 50.0),
        p10_ms: percentile(&times_ms, 10.0),
        p90_ms: percentile(&times_ms, 90.0),
        peak_bytes,
        workers: rayon::current_num_threads(),
    })
}

/// Times one operator on one input shape; `reps` must be at least 3.
pub fn bench_op(
    op: &str,
    shape: Shape5D,
    width: ScalarWidth,
    reps: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if reps < 3 {
        return Err(Error::Config(format!("reps must be at least 3, got {reps}")));
    }
    match width {
        ScalarWidth::F64 => bench_with::<f64>(op, shape, reps, seed),
        ScalarWidth::F32 => bench_with::<f32>(op, shape, reps, seed),
    }
}

/// The full suite: every operator on every shape, fixed row order.
pub fn bench_suite(
    shapes: &[Shape5D],
    width: ScalarWidth,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let mut rows = Vec::with_capacity(BENCH_OPS.len() * shapes.len());
    for op in BENCH_OPS {
        for &shape in shapes {
            rows.push(bench_op(op, shape, width, reps, seed)?);
        }
    }
    Ok(rows)
}

/// CSV with a header, one row per record.
pub fn render_csv(rows: &[BenchRecord]) -> String {
    let mut out = String::from("op,shape,width,reps,median_ms,p10_ms,p90_ms,peak_bytes,workers\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{},{}\n",
            r.op, r.shape, r.width, r.reps, r.median_ms, r.p10_ms, r.p90_ms, r.peak_bytes,
            r.workers
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_have_ordered_percentiles_and_real_peaks() {
        let shape = Shape5D::new(1, 2, 2, 6, 6).unwrap();
        for op in BENCH_OPS {
            let r = bench_op(op, shape, ScalarWidth::F64, 3, 11).unwrap();
            assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms, "{op} percentiles");
            assert!(r.median_ms > 0.0);
            // The lib test binary installs the counting allocator, so every
            // operator shows its transient footprint.
            assert!(r.peak_bytes > 0, "{op} peak bytes");
            assert_eq!(r.workers, rayon::current_num_threads());
        }
    }

    #[test]
    fn too_few_reps_is_a_config_error() {
        let shape = Shape5D::new(1, 1, 2, 4, 4).unwrap();
        assert!(bench_op("conv3d", shape, ScalarWidth::F64, 2, 1).is_err());
        assert!(bench_op("conv9d", shape, ScalarWidth::F64, 3, 1).is_err());
    }

    #[test]
    fn csv_covers_the_full_suite_in_fixed_order() {
        let shapes = [Shape5D::new(1, 1, 2, 4, 4).unwrap(), Shape5D::new(1, 2, 2, 4, 4).unwrap()];
        let rows = bench_suite(&shapes, ScalarWidth::F32, 3, 5).unwrap();
        assert_eq!(rows.len(), BENCH_OPS.len() * shapes.len());
        let csv = render_csv(&rows);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + rows.len());
        assert_eq!(lines[0], "op,shape,width,reps,median_ms,p10_ms,p90_ms,peak_bytes,workers");
        assert!(lines[1].starts_with("conv3d,1x1x2x4x4,f32,3,"));
        assert!(lines[2].starts_with("conv3d,1x2x2x4x4,f32,3,"));
        assert!(lines[3].starts_with("dcn1,"));
    }
}
