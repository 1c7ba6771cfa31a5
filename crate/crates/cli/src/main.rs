//! `gcube`: fit, voxelize, render, score and benchmark GaussianCubes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gaussiancube::fit::{self, FitConfig, FitError};
use gaussiancube::image::Image;
use gaussiancube::io::{export_splat_ply, import_splat_ply, read_cube, write_cube};
use gaussiancube::metrics::{psnr, MetricReport};
use gaussiancube::ot::{
    assemble_cube, cube_root_floor, devoxelize, solve_lap_segmented, solve_points_exact, OtError, VoxelGrid,
};
use gaussiancube::precision::to_storage_precision;
use gaussiancube::{render, Aabb, GaussianError, GaussianSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
/// Largest bench size for which the exact solver is also run.
const BENCH_EXACT_LIMIT: usize = 2048;

#[derive(Parser)]
#[command(name = "gcube", version, about = "Fixed-budget Gaussian fitting and GaussianCube structuring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a padded Gaussian set to a dataset of posed images.
    Fit {
        /// Directory holding images/*.png and cameras/*.json.
        dataset: PathBuf,
        /// Output PLY path.
        #[arg(short, long)]
        out: PathBuf,
        /// TOML fit configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Scene box as minx,miny,minz,maxx,maxy,maxz.
        #[arg(long, default_value = "-1,-1,-1,1,1,1")]
        bounds: String,
    },
    /// Arrange a PLY set into a cube file by optimal transport.
    Voxelize {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = gaussiancube::ot::DEFAULT_NV)]
        nv: usize,
        #[arg(long, default_value_t = gaussiancube::ot::DEFAULT_SEGMENTS)]
        segments: usize,
        /// Solve one exact assignment instead of sorted segments.
        #[arg(long)]
        exact: bool,
    },
    /// Render a cube or PLY file to PNG.
    Render {
        input: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Background color as r,g,b in [0, 1].
        #[arg(long, default_value = "1,1,1")]
        background: String,
    },
    /// Print PSNR and SSIM between two PNGs as JSON.
    Metrics { a: PathBuf, b: PathBuf },
    /// Time the segmented assignment solver on random points.
    BenchLap {
        #[arg(long, default_value_t = 32768)]
        n: usize,
        #[arg(long, default_value_t = gaussiancube::ot::DEFAULT_SEGMENTS)]
        segments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> Failure {
    Failure { code, message: message.to_string() }
}

fn data(e: impl std::fmt::Display) -> Failure {
    fail(EXIT_DATA, e)
}

fn from_fit(e: FitError) -> Failure {
    match e {
        FitError::Config(_) => fail(EXIT_USAGE, e),
        FitError::Diverged(_) | FitError::Initialization(_) | FitError::Gaussian(_) => fail(EXIT_NUMERIC, e),
        _ => data(e),
    }
}

fn from_ot(e: OtError) -> Failure {
    match e {
        OtError::NonFinite { .. } | OtError::NonFinitePoint(_) | OtError::NonFiniteFeature { .. } => {
            fail(EXIT_NUMERIC, e)
        }
        _ => data(e),
    }
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> Result<[f64; N], Failure> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if v.len() == N => Ok(v.try_into().unwrap()),
        _ => Err(fail(EXIT_USAGE, format!("{what} needs {N} comma-separated numbers, got `{s}`"))),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_ply(path: &Path) -> Result<GaussianSet, Failure> {
    import_splat_ply(open(path)?).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Loads a cube (devoxelized) or PLY file, dispatching on the leading magic.
fn read_set(path: &Path) -> Result<GaussianSet, Failure> {
    let bytes = std::fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(b"GCUB") {
        let cube = read_cube(bytes.as_slice()).map_err(|e| data(format!("{}: {e}", path.display())))?;
        let (set, report) = devoxelize(&cube).map_err(from_ot)?;
        if !report.is_clean() {
            eprintln!("warning: {} out-of-range cube values were clamped", report.clamped.len());
        }
        Ok(set)
    } else {
        import_splat_ply(bytes.as_slice()).map_err(|e| data(format!("{}: {e}", path.display())))
    }
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    dataset: &Path,
    out: &Path,
    config: Option<&Path>,
    iterations: Option<usize>,
    n_max: Option<usize>,
    seed: Option<u64>,
    bounds: &str,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
            FitConfig::from_toml(&text).map_err(from_fit)?
        }
        None => FitConfig::default(),
    };
    if let Some(it) = iterations {
        cfg = cfg.with_iterations(it);
    }
    if let Some(n) = n_max {
        cfg.n_max = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(from_fit)?;
    let b: [f64; 6] = parse_floats(bounds, "--bounds")?;
    let bounds = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]).map_err(|e| fail(EXIT_USAGE, e))?;
    let views = fit::load_dataset(dataset).map_err(from_fit)?;
    let result = fit::fit(&views, &bounds, &cfg).map_err(from_fit)?;
    export_splat_ply(&result.set, create(out)?).map_err(data)?;

    println!("fitted {} Gaussians, padded to {}", result.report.fitted_count, result.set.len());
    println!("{:<24} {:>10}", "view", "psnr_db");
    let mut total = 0.0;
    for v in &views {
        let img = render(&result.set, &v.camera, cfg.background).map_err(data)?.image;
        let p = psnr(&img, &v.image).map_err(data)?;
        total += p;
        println!("{:<24} {:>10.3}", v.name, p);
    }
    println!("{:<24} {:>10.3}", "mean", total / views.len() as f64);
    Ok(())
}

fn cmd_voxelize(input: &Path, out: &Path, nv: usize, segments: usize, exact: bool) -> Result<(), Failure> {
    if nv == 0 {
        return Err(fail(EXIT_USAGE, "--nv must be positive"));
    }
    let set = read_ply(input)?;
    let cells = nv * nv * nv;
    if set.len() > cells {
        return Err(data(format!("{} Gaussians do not fit a {nv}^3 grid of {cells} cells", set.len())));
    }
    let set = to_storage_precision(&set.pad_to(cells).map_err(data)?);
    let grid = VoxelGrid::new(nv, set.bounds).map_err(from_ot)?;
    let mus = set.positions();
    let plan = if exact {
        solve_points_exact(&mus, &grid.centers)
    } else {
        solve_lap_segmented(&mus, &grid.centers, segments)
    }
    .map_err(from_ot)?;
    let cube = assemble_cube(&set, &grid, &plan).map_err(from_ot)?;
    write_cube(&cube, create(out)?).map_err(data)?;
    let mean_offset = plan
        .assignment
        .iter()
        .enumerate()
        .map(|(k, &j)| gaussiancube::ot::squared_distance(&mus[k], &grid.centers[j]).sqrt())
        .sum::<f64>()
        / cells as f64;
    println!("total_cost {}", plan.total_cost);
    println!("mean_offset_norm {mean_offset}");
    Ok(())
}

fn cmd_render(input: &Path, camera: &Path, out: &Path, background: &str) -> Result<(), Failure> {
    let background: [f64; 3] = parse_floats(background, "--background")?;
    let cam = fit::load_camera(camera).map_err(from_fit)?;
    let set = read_set(input)?;
    let img = render(&set, &cam, background).map_err(|e| match e {
        gaussiancube::render::RenderError::InvalidGaussian { source: GaussianError::DegenerateCovariance(_), .. } => {
            fail(EXIT_NUMERIC, e)
        }
        _ => data(e),
    })?;
    img.image.save_png(out).map_err(data)
}

fn cmd_metrics(a: &Path, b: &Path) -> Result<(), Failure> {
    let ia = Image::load_png(a).map_err(data)?;
    let ib = Image::load_png(b).map_err(data)?;
    let report = MetricReport::compute(&ia, &ib).map_err(data)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_bench_lap(n: usize, segments: usize, seed: u64) -> Result<(), Failure> {
    if n == 0 || segments == 0 || n % segments != 0 {
        return Err(fail(EXIT_USAGE, format!("--n {n} must be a positive multiple of --segments {segments}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = || [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
    let mus: Vec<[f64; 3]> = (0..n).map(|_| point()).collect();
    let nv = cube_root_floor(n);
    let centers = if nv * nv * nv == n {
        VoxelGrid::new(nv, Aabb::unit()).map_err(from_ot)?.centers
    } else {
        (0..n).map(|_| point()).collect()
    };
    let start = Instant::now();
    let plan = solve_lap_segmented(&mus, &centers, segments).map_err(from_ot)?;
    let elapsed = start.elapsed().as_secs_f64();
    if !plan.is_bijection() {
        return Err(fail(EXIT_NUMERIC, "segmented plan is not a bijection"));
    }
    println!("n {n}");
    println!("segments {segments}");
    println!("seconds {elapsed:.3}");
    println!("cost {}", plan.total_cost);
    if n <= BENCH_EXACT_LIMIT {
        let exact = solve_points_exact(&mus, &centers).map_err(from_ot)?;
        println!("exact_cost {}", exact.total_cost);
        println!("ratio {}", plan.total_cost / exact.total_cost);
    }
    if let Some(kb) = peak_rss_kb() {
        println!("peak_rss_kb {kb}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit { dataset, out, config, iterations, n_max, seed, bounds } => {
            cmd_fit(dataset, out, config.as_deref(), *iterations, *n_max, *seed, bounds)
        }
        Command::Voxelize { input, out, nv, segments, exact } => cmd_voxelize(input, out, *nv, *segments, *exact),
        Command::Render { input, camera, out, background } => cmd_render(input, camera, out, background),
        Command::Metrics { a, b } => cmd_metrics(a, b),
        Command::BenchLap { n, segments, seed } => cmd_bench_lap(*n, *segments, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
