//! Microbenchmarks for the reference and optimized kernels.
//!
//! Every timed kernel also produces a checksum of its output, and the
//! optimized convolution is compared elementwise with the reference before
//! any timing is reported. The CSV report has the columns
//! `kernel,family,n,c,h,w,iters,median_ms,min_ms,checksum,speedup`, where
//! `speedup` is `reference median / optimized median` on `conv-opt` rows and
//! empty elsewhere.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{panoptic_conv_forward, panoptic_conv_forward_optimized, window_mask, ConvParams};
use crate::error::{Error, Result};
use crate::maps::{PanopticMap, SemanticMap};
use crate::tensor::{Scalar, Tensor};
use crate::upsample::{align_upsample, hole_fill, HoleFillParams};

/// Relative tolerance between the optimized and reference convolutions.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

/// Shapes of panoptic maps used to drive the kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapFamily {
    /// One id everywhere: every window mask is full.
    Constant,
    /// Aligned 16x16 squares.
    Blocks,
    /// Many small overlapping rectangles: fragmented masks.
    RandomInstances,
}

impl MapFamily {
    pub const ALL: [MapFamily; 3] = [MapFamily::Constant, MapFamily::Blocks, MapFamily::RandomInstances];

    pub fn name(self) -> &'static str {
        match self {
            MapFamily::Constant => "constant",
            MapFamily::Blocks => "blocks",
            MapFamily::RandomInstances => "random-instances",
        }
    }
}

impl fmt::Display for MapFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown map family `{s}`")))
    }
}

/// Number of classes used by generated maps.
pub const FIXTURE_CLASSES: u32 = 8;

/// Builds a `h x w` map of the given family. Ids follow the
/// `class * 1000 + instance` encoding with classes below [`FIXTURE_CLASSES`].
pub fn family_map(family: MapFamily, h: usize, w: usize, seed: u64) -> PanopticMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = match family {
        MapFamily::Constant => vec![0; h * w],
        MapFamily::Blocks => {
            let bw = w.div_ceil(16).max(1);
            (0..h * w)
                .map(|pos| {
                    let block = (pos / w / 16) * bw + (pos % w) / 16;
                    (block as u32 % FIXTURE_CLASSES) * 1000 + (block as u32 / FIXTURE_CLASSES) % 1000
                })
                .collect()
        }
        MapFamily::RandomInstances => {
            let mut ids = vec![0u32; h * w];
            let count = (h * w / 24).max(1);
            for inst in 0..count {
                let class = rng.gen_range(0..FIXTURE_CLASSES);
                let id = class * 1000 + (inst as u32 % 999) + 1;
                let rh = rng.gen_range(1..=8.min(h));
                let rw = rng.gen_range(1..=8.min(w));
                let top = rng.gen_range(0..=h - rh);
                let left = rng.gen_range(0..=w - rw);
                for i in top..top + rh {
                    ids[i * w + left..i * w + left + rw].fill(id);
                }
            }
            ids
        }
    };
    PanopticMap::new(h, w, ids).expect("generated ids stay below the padding id")
}

/// Semantic map matching [`family_map`]'s id encoding.
pub fn semantic_of(p: &PanopticMap) -> SemanticMap {
    SemanticMap::from_panoptic(p, FIXTURE_CLASSES as usize).expect("fixture classes are in range")
}

/// Uniform `[-1, 1)` input tensor and 3x3 (or `k x k`) weights/bias.
pub fn random_conv_fixture<T: Scalar>(
    shape: [usize; 4],
    c_out: usize,
    k: usize,
    seed: u64,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.gen_range(-1.0..1.0)));
    let weights = Tensor::from_fn([c_out, shape[1], k, k], |_, _, _, _| {
        T::from_f64(rng.gen_range(-1.0..1.0))
    });
    let bias = (0..c_out).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Ok((x, ConvParams::new(weights, bias)?))
}

/// Position-weighted sum of all elements, computed in `f64`.
pub fn checksum<T: Scalar>(x: &Tensor<T>) -> f64 {
    x.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64() * (1 + i % 7) as f64)
        .sum()
}

/// `max |a - b| / max(1, max |b|)`.
pub fn relative_difference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let diff = a.max_abs_diff(b)?.as_f64();
    Ok(diff / b.max_abs().as_f64().max(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
}

/// Runs `f` `warmup` times untimed, then `iters` timed times. Returns the
/// timings and the last result.
pub fn time_iters<R>(iters: usize, warmup: usize, mut f: impl FnMut() -> Result<R>) -> Result<(Timing, R)> {
    if iters == 0 {
        return Err(Error::Config("iteration count must be positive".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    let mut last = None;
    for _ in 0..iters {
        let start = Instant::now();
        let r = f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(r);
    }
    samples.sort_by(f64::total_cmp);
    let median_ms = if iters % 2 == 1 {
        samples[iters / 2]
    } else {
        0.5 * (samples[iters / 2 - 1] + samples[iters / 2])
    };
    Ok((
        Timing {
            median_ms,
            min_ms: samples[0],
        },
        last.expect("at least one iteration ran"),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    ConvRef,
    ConvOpt,
    WindowMasks,
    AlignUpsample,
    HoleFill,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::ConvRef => "conv-ref",
            Kernel::ConvOpt => "conv-opt",
            Kernel::WindowMasks => "window-masks",
            Kernel::AlignUpsample => "align-upsample",
            Kernel::HoleFill => "hole-fill",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub family: MapFamily,
    pub shape: [usize; 4],
    pub iters: usize,
    pub timing: Timing,
    pub checksum: f64,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Input shapes `(n, c, h, w)`; convolutions map `c -> c` channels.
    pub sizes: Vec<[usize; 4]>,
    pub families: Vec<MapFamily>,
    pub iters: usize,
    pub warmup: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sizes: vec![[1, 16, 64, 64], [1, 16, 128, 128]],
            families: MapFamily::ALL.to_vec(),
            iters: 10,
            warmup: 1,
            kernel_size: 3,
            seed: 0,
        }
    }
}

/// Times reference and optimized convolution on one input and checks that
/// they agree. Returns `(reference row, optimized row)`.
pub fn compare_conv(
    shape: [usize; 4],
    family: MapFamily,
    iters: usize,
    warmup: usize,
    k: usize,
    seed: u64,
) -> Result<(BenchRow, BenchRow)> {
    let p = family_map(family, shape[2], shape[3], seed);
    let (x, params) = random_conv_fixture::<f64>(shape, shape[1], k, seed)?;
    let (t_ref, y_ref) = time_iters(iters, warmup, || panoptic_conv_forward(&x, &p, &params))?;
    let (t_opt, y_opt) = time_iters(iters, warmup, || panoptic_conv_forward_optimized(&x, &p, &params))?;
    let rel = relative_difference(&y_opt, &y_ref)?;
    if rel > EQUIVALENCE_TOLERANCE {
        return Err(Error::Contract(format!(
            "optimized convolution drifted from the reference by {rel:e} on {} {shape:?}",
            family.name()
        )));
    }
    let row = |kernel, timing: Timing, y: &Tensor, speedup| BenchRow {
        kernel,
        family,
        shape,
        iters,
        timing,
        checksum: checksum(y),
        speedup,
    };
    Ok((
        row(Kernel::ConvRef, t_ref, &y_ref, None),
        row(Kernel::ConvOpt, t_opt, &y_opt, Some(t_ref.median_ms / t_opt.median_ms)),
    ))
}

/// Runs every kernel on every `(size, family)` pair.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<BenchRow>> {
    if cfg.sizes.is_empty() || cfg.families.is_empty() {
        return Err(Error::Config("benchmark needs at least one size and one family".into()));
    }
    if cfg.iters == 0 {
        return Err(Error::Config("iteration count must be positive".into()));
    }
    let k = cfg.kernel_size;
    let mut rows = Vec::new();
    for &shape in &cfg.sizes {
        let [n, c, h, w] = shape;
        if n == 0 || c == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "benchmark size {shape:?} must be positive with even height and width"
            )));
        }
        for &family in &cfg.families {
            let (r, o) = compare_conv(shape, family, cfg.iters, cfg.warmup, k, cfg.seed)?;
            rows.push(r);
            rows.push(o);

            let p = family_map(family, h, w, cfg.seed);
            let (timing, valid) = time_iters(cfg.iters, cfg.warmup, || {
                let mut total = 0usize;
                for i in 0..h {
                    for j in 0..w {
                        total += window_mask::<f64>(&p, (i, j), k)?.count_ones();
                    }
                }
                Ok(total)
            })?;
            rows.push(BenchRow {
                kernel: Kernel::WindowMasks,
                family,
                shape,
                iters: cfg.iters,
                timing,
                checksum: valid as f64,
                speedup: None,
            });

            let p_d = p.downsample(2)?;
            let (f_d, _) = random_conv_fixture::<f64>([n, c, h / 2, w / 2], 1, 1, cfg.seed + 1)?;
            let (timing, aligned) = time_iters(cfg.iters, cfg.warmup, || align_upsample(&f_d, &p_d, &p))?;
            rows.push(BenchRow {
                kernel: Kernel::AlignUpsample,
                family,
                shape,
                iters: cfg.iters,
                timing,
                checksum: checksum(&aligned.features),
                speedup: None,
            });

            let s = semantic_of(&p);
            let classes = FIXTURE_CLASSES as usize;
            let (_, encoder) = random_conv_fixture::<f64>([1, classes, 1, 1], c, k, cfg.seed + 2)?;
            let (_, reducer) = random_conv_fixture::<f64>([1, c, 1, 1], c, 1, cfg.seed + 3)?;
            let params = HoleFillParams::new(&encoder, &reducer)?;
            let (timing, filled) =
                time_iters(cfg.iters, cfg.warmup, || hole_fill(&aligned, &s, &p, &params, classes))?;
            rows.push(BenchRow {
                kernel: Kernel::HoleFill,
                family,
                shape,
                iters: cfg.iters,
                timing,
                checksum: checksum(&filled),
                speedup: None,
            });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "kernel,family,n,c,h,w,iters,median_ms,min_ms,checksum,speedup";

pub fn report_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let [n, c, h, w] = r.shape;
        out.push_str(&format!(
            "{},{},{n},{c},{h},{w},{},{:.4},{:.4},{:.17e},{}\n",
            r.kernel.name(),
            r.family.name(),
            r.iters,
            r.timing.median_ms,
            r.timing.min_ms,
            r.checksum,
            r.speedup.map(|s| format!("{s:.3}")).unwrap_or_default()
        ));
    }
    out
}
