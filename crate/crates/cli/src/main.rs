use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use panoptic_kernels::bench::{
    checksum, family_map, random_conv_fixture, relative_difference, report_csv, run_suite,
    time_iters, MapFamily, SuiteConfig, EQUIVALENCE_TOLERANCE,
};
use panoptic_kernels::gradcheck::{self, GradCheckOptions, GradOp};
use panoptic_kernels::io::{read_panoptic_png, read_semantic_png, write_image_png};
use panoptic_kernels::{
    generator_forward, misalignment_stats, panoptic_conv_forward, panoptic_conv_forward_optimized,
    Error, GeneratorConfig, PanopticMap, ScalarKind, SemanticMap, Tensor,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Gradient checks pass strictly below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "panoptic-kernels", version, about = "Panoptic-aware convolution and upsampling kernels")]
struct Cli {
    /// Worker threads for data-parallel kernels [default: available cores]
    #[arg(long, global = true, env = "PANOPTIC_KERNELS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize an image from a semantic and a panoptic map with a randomly initialized generator.
    Forward(ForwardArgs),
    /// Per-stage misalignment of nearest-neighbour upsampling for a panoptic map.
    Stats(StatsArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time one convolution kernel.
    Bench(BenchArgs),
    /// Run the full benchmark suite and write a CSV report.
    Suite(SuiteArgs),
}

#[derive(clap::Args, Debug)]
struct ForwardArgs {
    /// Gray8 PNG of class indices.
    #[arg(long)]
    semantic: PathBuf,
    /// RGB PNG of panoptic ids (id = R + 256 G + 65536 B).
    #[arg(long)]
    panoptic: PathBuf,
    /// TOML generator configuration; toy defaults are derived from the maps when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Number of semantic classes [default: largest class in the map + 1].
    #[arg(long)]
    classes: Option<usize>,
    /// Upsampling stages when no config is given.
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, value_enum)]
    dtype: Option<Dtype>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(clap::Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    panoptic: PathBuf,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    /// Downsampling factor of the coarsest stage input [default: 2^stages].
    #[arg(long)]
    base_scale: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_op)]
    op: GradOp,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output size HxW.
    #[arg(long, default_value = "6x6", value_parser = parse_hw)]
    size: (usize, usize),
    #[arg(long, value_enum, default_value_t = MapKind::Random)]
    map: MapKind,
    /// Corrupt the analytic gradient; the check is expected to fail.
    #[arg(long)]
    inject_bug: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MapKind {
    Constant,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BenchKernel {
    ConvRef,
    ConvOpt,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum)]
    kernel: BenchKernel,
    /// Input shape NxCxHxW; the convolution maps C to C channels.
    #[arg(long, default_value = "1x16x128x128", value_parser = parse_nchw)]
    size: [usize; 4],
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value = "random-instances", value_parser = parse_family)]
    family: MapFamily,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct SuiteArgs {
    /// Comma-separated NxCxHxW shapes.
    #[arg(long, value_delimiter = ',', value_parser = parse_nchw, default_value = "1x16x64x64,1x16x128x128")]
    sizes: Vec<[usize; 4]>,
    #[arg(long, value_delimiter = ',', value_parser = parse_family, default_value = "constant,blocks,random-instances")]
    families: Vec<MapFamily>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != N {
        return Err(format!("expected {N} sizes separated by `x`, got `{s}`"));
    }
    let mut dims = [0; N];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.trim().parse().map_err(|_| format!("`{p}` is not a size"))?;
        if *d == 0 {
            return Err("sizes must be positive".into());
        }
    }
    Ok(dims)
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    parse_dims::<2>(s).map(|[h, w]| (h, w))
}

fn parse_nchw(s: &str) -> Result<[usize; 4], String> {
    parse_dims::<4>(s)
}

fn parse_op(s: &str) -> Result<GradOp, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> Result<MapFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failed command, classified by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let threads = match cli.threads {
        Some(0) => return Err(Failure::Usage("thread count must be positive".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {threads} worker threads: {e}")))?;
    match cli.command {
        Command::Forward(args) => forward(args, threads),
        Command::Stats(args) => stats(args),
        Command::Gradcheck(args) => grad_check(args),
        Command::Bench(args) => bench(args, threads),
        Command::Suite(args) => suite(args),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    dtype: &'static str,
    config_sha256: String,
    config: &'a GeneratorConfig,
    semantic: &'a Path,
    panoptic: &'a Path,
    output: &'a Path,
    height: usize,
    width: usize,
    threads: usize,
    elapsed_ms: f64,
}

fn load_semantic(path: &Path, classes: Option<usize>) -> Result<SemanticMap, Failure> {
    let raw = read_semantic_png(path, classes.unwrap_or(256))?;
    if classes.is_some() {
        return Ok(raw);
    }
    let k = raw.classes().iter().max().map_or(1, |&c| c as usize + 1);
    Ok(SemanticMap::new(raw.height(), raw.width(), raw.classes().to_vec(), k)?)
}

fn forward(args: ForwardArgs, threads: usize) -> CmdResult {
    let p = read_panoptic_png(&args.panoptic)?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
            let cfg: GeneratorConfig = toml::from_str(&text)
                .map_err(|e| Failure::Data(format!("invalid config {}: {e}", path.display())))?;
            cfg.validate()?;
            cfg
        }
        None => {
            if args.stages == 0 || args.stages > 16 {
                return Err(Failure::Usage("--stages must be between 1 and 16".into()));
            }
            let channels = (0..args.stages).map(|s| (32usize >> s).max(4)).collect();
            // class count is filled in once the semantic map is read
            GeneratorConfig::toy(p.height(), p.width(), 1, channels)?
        }
    };
    let classes = args.classes.or(args.config.as_ref().map(|_| cfg.num_classes));
    let s = load_semantic(&args.semantic, classes)?;
    cfg.num_classes = s.num_classes();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dtype) = args.dtype {
        cfg.scalar = match dtype {
            Dtype::F32 => ScalarKind::F32,
            Dtype::F64 => ScalarKind::F64,
        };
    }
    if s.dims() != (p.height(), p.width()) {
        return Err(Failure::Data(format!(
            "semantic map {} is {}x{} but panoptic map {} is {}x{}",
            args.semantic.display(),
            s.height(),
            s.width(),
            args.panoptic.display(),
            p.height(),
            p.width()
        )));
    }
    if cfg.output_dims() != s.dims() {
        let (h, w) = cfg.output_dims();
        return Err(Failure::Data(format!(
            "config produces {h}x{w} images but the maps are {}x{}",
            s.height(),
            s.width()
        )));
    }

    let start = Instant::now();
    match cfg.scalar {
        ScalarKind::F32 => write_image_png(&generator_forward::<f32>(&s, &p, &cfg)?, &args.out)?,
        ScalarKind::F64 => write_image_png(&generator_forward::<f64>(&s, &p, &cfg)?, &args.out)?,
    }
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    let canonical = serde_json::to_string(&cfg).expect("config serializes");
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        dtype: cfg.scalar.name(),
        config_sha256: format!("{:x}", Sha256::digest(canonical.as_bytes())),
        config: &cfg,
        semantic: &args.semantic,
        panoptic: &args.panoptic,
        output: &args.out,
        height: s.height(),
        width: s.width(),
        threads,
        elapsed_ms,
    };
    let mut manifest_path = args.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    let manifest_path = PathBuf::from(manifest_path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n")
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", manifest_path.display())))?;
    println!(
        "wrote {} ({}x{}, seed {}, {:.1} ms)",
        args.out.display(),
        s.height(),
        s.width(),
        cfg.seed,
        elapsed_ms
    );
    Ok(())
}

fn stats(args: StatsArgs) -> CmdResult {
    if args.stages == 0 || args.stages > 16 {
        return Err(Failure::Usage("--stages must be between 1 and 16".into()));
    }
    let p: PanopticMap = read_panoptic_png(&args.panoptic)?;
    let base = args.base_scale.unwrap_or(1 << args.stages);
    let rows = misalignment_stats(&p, args.stages, base).map_err(|e| match e {
        Error::Dimension(m) => Failure::Data(format!("{}: {m}", args.panoptic.display())),
        other => other.into(),
    })?;
    let mut out = String::new();
    match args.format {
        Format::Csv => {
            out.push_str("stage,pct_misaligned,pct_new,n_misaligned,n_new,n_total\n");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{:.4},{:.4},{},{},{}",
                    r.stage, r.pct_misaligned, r.pct_new, r.n_misaligned, r.n_new, r.n_total
                );
            }
        }
        Format::Table => {
            let _ = writeln!(out, "{:>5}  {:>14}  {:>8}  {:>12}  {:>8}  {:>10}", "stage", "misaligned %", "new %", "misaligned", "new", "total");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{:>5}  {:>14.4}  {:>8.4}  {:>12}  {:>8}  {:>10}",
                    r.stage, r.pct_misaligned, r.pct_new, r.n_misaligned, r.n_new, r.n_total
                );
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn grad_check(args: GradcheckArgs) -> CmdResult {
    let opts = GradCheckOptions {
        op: args.op,
        seed: args.seed,
        height: args.size.0,
        width: args.size.1,
        constant_map: matches!(args.map, MapKind::Constant),
        inject_bug: args.inject_bug,
    };
    let report = gradcheck::run(&opts)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "{} {}x{} seed {}: max relative error {:.3e} over {} values: {}",
        args.op,
        args.size.0,
        args.size.1,
        args.seed,
        report.max_rel_error,
        report.checked,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn bench(args: BenchArgs, threads: usize) -> CmdResult {
    if args.iters == 0 {
        return Err(Failure::Usage("--iters must be positive".into()));
    }
    let [n, c, h, w] = args.size;
    let p = family_map(args.family, h, w, args.seed);
    let (x, params) = random_conv_fixture::<f64>(args.size, c, args.kernel_size, args.seed)?;
    let (timing, y) = match args.kernel {
        BenchKernel::ConvRef => time_iters(args.iters, args.warmup, || panoptic_conv_forward(&x, &p, &params))?,
        BenchKernel::ConvOpt => time_iters(args.iters, args.warmup, || panoptic_conv_forward_optimized(&x, &p, &params))?,
    };
    let verified = if args.kernel == BenchKernel::ConvOpt {
        let reference: Tensor = panoptic_conv_forward(&x, &p, &params)?;
        let rel = relative_difference(&y, &reference)?;
        if rel > EQUIVALENCE_TOLERANCE {
            return Err(Failure::Check(format!("optimized output drifted from the reference by {rel:e}")));
        }
        format!("matches conv-ref (rel {rel:.1e})")
    } else {
        "reference".to_string()
    };
    let windows = (n * h * w) as f64;
    println!("kernel      {}", if args.kernel == BenchKernel::ConvRef { "conv-ref" } else { "conv-opt" });
    println!("family      {}", args.family);
    println!("size        {n}x{c}x{h}x{w}");
    println!("threads     {threads}");
    println!("iters       {}", args.iters);
    println!("median_ms   {:.4}", timing.median_ms);
    println!("min_ms      {:.4}", timing.min_ms);
    println!("windows/s   {:.4e}", windows / (timing.median_ms / 1e3));
    println!("checksum    {:.17e}", checksum(&y));
    println!("verified    {verified}");
    Ok(())
}

fn suite(args: SuiteArgs) -> CmdResult {
    let cfg = SuiteConfig {
        sizes: args.sizes,
        families: args.families,
        iters: args.iters,
        warmup: args.warmup,
        kernel_size: args.kernel_size,
        seed: args.seed,
    };
    let rows = run_suite(&cfg).map_err(|e| match e {
        Error::Contract(m) => Failure::Check(m),
        other => other.into(),
    })?;
    let csv = report_csv(&rows);
    match args.out {
        Some(path) => fs::write(&path, csv)
            .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}
