//! Command-line harness. Every subcommand writes its artifacts into one run
//! directory together with the resolved configuration, so a run can be
//! repeated from that file alone.
//!
//! Exit codes: 0 success, 1 bad arguments or configuration, 2 numerical
//! non-convergence, 3 I/O or file-format failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asym_ao::aperture::{make_aperture, Aperture, ShapeTag};
use asym_ao::config::RunConfig;
use asym_ao::control::{run_closed_loop, LoopTrace};
use asym_ao::estimators::{estimate_psf_blind, retrieve_phase_iterative, SolverStatus};
use asym_ao::fft::Exec;
use asym_ao::io;
use asym_ao::metrics::{kernel_ncc, mtf, psnr, ssim, strehl_ratio, MtfProfile, SsimParams};
use asym_ao::optics::{
    conjugate_flip, flip_distance, image_measurement, psf, resize_centered, Measurement, PhaseMap,
    Psf, SceneImage,
};
use asym_ao::par;
use asym_ao::scenes::dead_leaves;
use asym_ao::zernike::{sample_coeffs_with, sample_even_parity, ZernikeBasis, ZernikeCoeffs};
use asym_ao::AoError;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;

/// Default output root when neither `--out` nor `output_dir` is given.
pub const OUTPUT_ENV: &str = "ASYM_AO_OUTPUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<AoError> for CliError {
    fn from(e: AoError) -> Self {
        let code = match e {
            AoError::Io(_) | AoError::Format(_) => EXIT_IO,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        AoError::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "asym-ao", version, about = "Guidestar-free adaptive optics simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (sectioned key = value).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set loop.noise_sigma=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for the aberration, scene and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name under the output root.
    #[arg(long)]
    name: Option<String>,
    /// Pupil grid side.
    #[arg(long)]
    grid: Option<usize>,
    /// Aperture shape: disk, rectangle or triangle.
    #[arg(long)]
    shape: Option<String>,
    /// Aberration RMS in radians.
    #[arg(long)]
    rms: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// PSFs of a phase and its conjugate flip through symmetric and
    /// asymmetric apertures.
    DemoAmbiguity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phases: Option<usize>,
        /// Use a pure tilt of this RMS instead of random phases.
        #[arg(long)]
        tilt: Option<f64>,
    },
    /// Closed-loop correction of one aberration.
    RunLoop {
        #[command(flatten)]
        common: Common,
        /// 8-bit scene image (PGM or PNG); a synthetic scene otherwise.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Correction steps; the measurement budget follows.
        #[arg(long)]
        loops: Option<usize>,
        /// Gaussian read-noise sigma.
        #[arg(long)]
        noise: Option<f64>,
        /// oracle, geometric or pipeline.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Phase retrieval from a measured PSF (guidestar mode).
    RetrievePhase {
        #[command(flatten)]
        common: Common,
        /// PSF as a float grid or 8-bit image.
        #[arg(long)]
        psf: PathBuf,
    },
    /// Blind PSF estimation from one measurement.
    EstimatePsf {
        #[command(flatten)]
        common: Common,
        /// Measurement image; simulated from the configuration otherwise.
        #[arg(long)]
        measurement: Option<PathBuf>,
        #[arg(long)]
        kernel_size: Option<usize>,
        /// Gaussian read-noise sigma.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Strehl and MTF of a PSF, PSNR and SSIM of an image pair.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        psf: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Independent closed loops over a range of seeds and aberration sizes.
    Batch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<usize>,
        /// Correction steps; the measurement budget follows.
        #[arg(long)]
        loops: Option<usize>,
        /// Gaussian read-noise sigma.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        estimator: Option<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to stdout and errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::DemoAmbiguity { common, phases, tilt } => {
            let mut extra = Vec::new();
            push(&mut extra, "ambiguity.phases", phases);
            push(&mut extra, "ambiguity.tilt_override", tilt);
            let ctx = Context::new("demo-ambiguity", &common, extra)?;
            demo_ambiguity(&ctx)
        }
        Command::RunLoop {
            common,
            scene,
            loops,
            noise,
            estimator,
        } => {
            let mut extra = loop_overrides(loops, noise, estimator);
            if let Some(s) = scene {
                extra.push(format!("scene.path={}", toml_string(&s.to_string_lossy())));
            }
            let ctx = Context::new("run-loop", &common, extra)?;
            run_loop(&ctx)
        }
        Command::RetrievePhase { common, psf } => {
            let ctx = Context::new("retrieve-phase", &common, Vec::new())?;
            retrieve_phase(&ctx, &psf)
        }
        Command::EstimatePsf {
            common,
            measurement,
            kernel_size,
            noise,
        } => {
            let mut extra = Vec::new();
            push(&mut extra, "loop.kernel_size", kernel_size);
            push(&mut extra, "loop.noise_sigma", noise);
            let ctx = Context::new("estimate-psf", &common, extra)?;
            estimate_psf(&ctx, measurement.as_deref())
        }
        Command::Metrics {
            common,
            psf,
            image,
            reference,
            peak,
        } => {
            let ctx = Context::new("metrics", &common, Vec::new())?;
            metrics(&ctx, psf.as_deref(), image.as_deref(), reference.as_deref(), peak)
        }
        Command::Batch {
            common,
            runs,
            loops,
            noise,
            estimator,
        } => {
            let mut extra = loop_overrides(loops, noise, estimator);
            push(&mut extra, "batch.runs", runs);
            let ctx = Context::new("batch", &common, extra)?;
            batch(&ctx)
        }
    }
}

fn push<T: std::fmt::Display>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={v}"));
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string")
}

fn loop_overrides(loops: Option<usize>, noise: Option<f64>, estimator: Option<String>) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(l) = loops {
        out.push(format!("loop.loops={l}"));
        out.push(format!("loop.measurements_budget={}", l + 1));
    }
    push(&mut out, "loop.noise_sigma", noise);
    if let Some(e) = estimator {
        out.push(format!("loop.estimator={}", toml_string(&e)));
    }
    out
}

/// Resolved configuration and run directory of one invocation.
struct Context {
    config: RunConfig,
    dir: PathBuf,
}

impl Context {
    fn new(command: &str, common: &Common, extra: Vec<String>) -> CliResult<Self> {
        let mut overrides = common.set.clone();
        push(&mut overrides, "seed", common.seed);
        push(&mut overrides, "grid.n", common.grid);
        push(&mut overrides, "zernike.rms", common.rms);
        if let Some(s) = &common.shape {
            overrides.push(format!("aperture.shape={}", toml_string(s)));
        }
        if let Some(o) = &common.out {
            overrides.push(format!("output_dir={}", toml_string(&o.to_string_lossy())));
        }
        overrides.extend(extra);
        let config = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                RunConfig::load(&text, &overrides)
            }
            None => RunConfig::load("", &overrides),
        }
        .map_err(|e| CliError::usage(e.to_string()))?;
        let root = config
            .output_dir
            .clone()
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let name = common
            .name
            .clone()
            .unwrap_or_else(|| format!("{command}-seed{}", config.seed));
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), config.to_toml())?;
        Ok(Self { config, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn aperture(&self) -> CliResult<Aperture> {
        let c = &self.config;
        if c.aperture.shape == ShapeTag::Bitmap {
            let path = c.aperture.bitmap.as_ref().expect("validated");
            let img = io::read_gray8(Path::new(path))?;
            if img.dim() != (c.grid.n, c.grid.n) {
                return Err(CliError::usage(format!(
                    "aperture bitmap is {}x{}, grid is {}",
                    img.nrows(),
                    img.ncols(),
                    c.grid.n
                )));
            }
            let max = img.iter().cloned().fold(0.0, f64::max);
            return Ok(Aperture::from_bitmap(img.mapv(|v| if max > 0.0 { v / max } else { 0.0 }))?);
        }
        Ok(c.aperture()?)
    }

    fn scene(&self) -> CliResult<SceneImage> {
        match &self.config.scene.path {
            Some(p) => {
                let raw = io::read_gray8_raw(Path::new(p))?;
                Ok(SceneImage::new(raw.mapv(|v| v as f64 / 255.0))?)
            }
            None => Ok(dead_leaves(self.config.grid.n, self.config.seed)),
        }
    }

    fn aberration(&self, basis: &ZernikeBasis, seed: u64, rms: f64) -> CliResult<(ZernikeCoeffs, PhaseMap)> {
        let opts = asym_ao::zernike::SampleOptions {
            rms_target: rms,
            ..self.config.zernike.sample_options()
        };
        let c = sample_coeffs_with(seed, basis, opts);
        let phase = basis.phase_from_coeffs(&c)?;
        Ok((c, phase))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_mtf_csv(path: &Path, profile: &MtfProfile) -> CliResult<()> {
    let mut s = String::from("frequency,contrast\n");
    for (f, c) in profile.radial_frequency.iter().zip(&profile.contrast) {
        let _ = writeln!(s, "{f},{c}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Float grid (`.aofg`, `.f32`, `.bin`) or 8-bit image.
fn read_grid(path: &Path) -> CliResult<Array2<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("pgm") => Ok(io::read_gray8(path)?),
        _ => Ok(io::read_float_grid(path)?),
    }
}

/// Log-scaled, centered crop of a PSF for display.
fn psf_display(psf: &Psf, size: usize) -> Array2<f64> {
    let k = psf.kernel();
    let side = size.min(k.nrows()).min(k.ncols());
    let crop = resize_centered(&k.view(), side, side);
    let peak = psf.peak().max(1e-300);
    crop.mapv(|v| (v / peak + 1e-4).log10())
}

#[derive(Serialize)]
struct ShapeReport {
    shape: ShapeTag,
    symmetric: bool,
    phases: usize,
    min_distance: f64,
    median_distance: f64,
    max_distance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct AmbiguityReport {
    shapes: Vec<ShapeReport>,
    odd_parity_degenerate: bool,
    pass: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn demo_ambiguity(ctx: &Context) -> CliResult<i32> {
    let c = &ctx.config;
    let basis = c.basis()?;
    let pad = c.grid.pad_factor;
    let tilt = c.ambiguity.tilt_override;
    let phases: Vec<PhaseMap> = match tilt {
        Some(t) => {
            let mut coeffs = ZernikeCoeffs::zeros(&basis);
            let k = basis.position(1, 1).ok_or_else(|| CliError::usage("basis has no tilt mode"))?;
            coeffs.values[k] = t;
            vec![basis.phase_from_coeffs(&coeffs)?]
        }
        None => {
            let opts = c.zernike.sample_options();
            (0..c.ambiguity.phases as u64)
                .map(|k| {
                    let seed = c.seed.wrapping_mul(1_000_003).wrapping_add(k);
                    let coeffs = sample_even_parity(seed, &basis, opts, c.ambiguity.min_even_rms)?;
                    Ok(basis.phase_from_coeffs(&coeffs)?)
                })
                .collect::<CliResult<_>>()?
        }
    };
    if phases.is_empty() {
        return Err(CliError::usage("ambiguity.phases must be >= 1"));
    }
    let mut shapes = Vec::new();
    let mut pass = true;
    for shape in [ShapeTag::Disk, ShapeTag::Rectangle, ShapeTag::Triangle] {
        let ap = make_aperture(shape, c.grid.n, c.aperture.size_fraction)?;
        let symmetric = ap.is_point_symmetric(asym_ao::aperture::SYMMETRY_TOL);
        let dists = par::map_with(Exec::default(), phases.iter().collect(), |p| {
            flip_distance(&ap, p, pad)
        });
        let mut dists = dists.into_iter().collect::<Result<Vec<f64>, _>>()?;
        let first = &phases[0];
        let flipped = conjugate_flip(first);
        let support = ap.support();
        io::write_phase_png(&ctx.path(&format!("phase_{shape}.png")), first.values(), Some(&support))?;
        io::write_phase_png(&ctx.path(&format!("flip_{shape}.png")), flipped.values(), Some(&support))?;
        io::write_gray8(&ctx.path(&format!("psf_{shape}.png")), &psf_display(&psf(&ap, first, pad)?, 128))?;
        io::write_gray8(
            &ctx.path(&format!("psf_flip_{shape}.png")),
            &psf_display(&psf(&ap, &flipped, pad)?, 128),
        )?;
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = dists.iter().cloned().fold(0.0, f64::max);
        let ok = if symmetric { max <= 1e-9 } else { min >= 1e-2 };
        pass &= ok;
        println!(
            "{shape:<9} symmetric={symmetric} flip distance min {min:.3e} max {max:.3e} {}",
            if ok { "ok" } else { "FAIL" }
        );
        shapes.push(ShapeReport {
            shape,
            symmetric,
            phases: dists.len(),
            min_distance: min,
            median_distance: median(&mut dists),
            max_distance: max,
            pass: ok,
        });
    }
    let report = AmbiguityReport {
        shapes,
        odd_parity_degenerate: tilt.is_some(),
        pass,
    };
    if report.odd_parity_degenerate {
        println!("odd-parity phase: conjugate flip leaves it unchanged, every aperture gives identical PSFs");
    }
    write_json(&ctx.path("ambiguity.json"), &report)?;
    Ok(if pass { EXIT_OK } else { EXIT_NONCONVERGENCE })
}

/// Writes `trace.jsonl` and `metrics.csv` for one loop.
fn write_trace(dir: &Path, trace: &LoopTrace, ap: &Aperture) -> CliResult<()> {
    fs::write(dir.join("trace.jsonl"), trace.to_jsonl(ap))?;
    let mut csv = String::from("iteration,strehl,psnr,ssim,grad_err\n");
    for r in &trace.records {
        let g = r.grad_err.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{}", r.iteration, r.strehl, r.psnr, r.ssim, g);
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

fn run_loop(ctx: &Context) -> CliResult<i32> {
    let c = &ctx.config;
    let ap = ctx.aperture()?;
    let basis = c.basis()?;
    let scene = ctx.scene()?;
    let (_, phi) = ctx.aberration(&basis, c.seed, c.zernike.rms)?;
    let est = c.estimators(basis);
    let cfg = c.loop_config();
    let trace = run_closed_loop(&scene, &phi, &ap, &est, &cfg, c.seed)?;
    let support = ap.support();
    io::write_float_grid(&ctx.path("aberration.aofg"), phi.values())?;
    for r in &trace.records {
        let k = r.iteration;
        io::write_gray8(&ctx.path(&format!("measurement_{k:02}.png")), r.measurement.pixels())?;
        io::write_phase_png(&ctx.path(&format!("slm_{k:02}.png")), r.slm_phase.values(), Some(&support))?;
        io::write_float_grid(&ctx.path(&format!("slm_{k:02}.aofg")), r.slm_phase.values())?;
        if let Some(p) = &r.psf_estimate {
            io::write_gray8(&ctx.path(&format!("psf_estimate_{k:02}.png")), p.kernel())?;
            io::write_float_grid(&ctx.path(&format!("psf_estimate_{k:02}.aofg")), p.kernel())?;
        }
        if let Some(p) = &r.phase_estimate {
            io::write_phase_png(&ctx.path(&format!("phase_estimate_{k:02}.png")), p.values(), Some(&support))?;
            io::write_float_grid(&ctx.path(&format!("phase_estimate_{k:02}.aofg")), p.values())?;
        }
        println!(
            "iteration {k}: strehl {:.4} psnr {:.2} ssim {:.4}{}",
            r.strehl,
            r.psnr,
            r.ssim,
            if r.flagged { " (estimator not converged)" } else { "" }
        );
    }
    write_trace(&ctx.dir, &trace, &ap)?;
    let residual = phi.add(trace.final_slm.phase())?;
    let final_psf = psf(&ap, &residual, c.grid.pad_factor)?;
    write_mtf_csv(&ctx.path("mtf.csv"), &mtf(&final_psf, ap.diameter())?)?;
    Ok(if trace.records.iter().any(|r| r.flagged) {
        EXIT_NONCONVERGENCE
    } else {
        EXIT_OK
    })
}

#[derive(Serialize)]
struct RetrievalReport {
    residual: f64,
    status: SolverStatus,
    ambiguous: bool,
    dominant_mode: (i32, i32),
    dominant_coefficient: f64,
    rms: f64,
}

fn retrieve_phase(ctx: &Context, psf_path: &Path) -> CliResult<i32> {
    let c = &ctx.config;
    let ap = ctx.aperture()?;
    let basis = c.basis()?;
    let measured = Psf::from_clamped(read_grid(psf_path)?)?;
    let est = retrieve_phase_iterative(&measured, &ap, &basis, &c.retrieval)?;
    let support = ap.support();
    io::write_phase_png(&ctx.path("phase.png"), est.phase.values(), Some(&support))?;
    io::write_float_grid(&ctx.path("phase.aofg"), est.phase.values())?;
    let mut csv = String::from("index,n,m,coefficient\n");
    for (k, ((n, m), v)) in basis.indices().iter().zip(&est.coeffs.values).enumerate() {
        let _ = writeln!(csv, "{k},{n},{m},{v}");
    }
    fs::write(ctx.path("coefficients.csv"), csv)?;
    let (dk, dv) = est
        .coeffs
        .values
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |best, (k, v)| if v.abs() > best.1.abs() { (k, *v) } else { best });
    let report = RetrievalReport {
        residual: est.residual,
        status: est.status,
        ambiguous: est.ambiguous,
        dominant_mode: basis.indices()[dk],
        dominant_coefficient: dv,
        rms: est.phase.rms_over(&support.view()),
    };
    write_json(&ctx.path("report.json"), &report)?;
    println!(
        "phase rms {:.4} rad, dominant mode {:?} = {:.4}, status {:?}{}",
        report.rms,
        report.dominant_mode,
        dv,
        est.status,
        if est.ambiguous { ", ambiguous up to conjugate flip" } else { "" }
    );
    Ok(if est.status == SolverStatus::NotConverged {
        EXIT_NONCONVERGENCE
    } else {
        EXIT_OK
    })
}

#[derive(Serialize)]
struct PsfReport {
    fidelity: f64,
    iterations: usize,
    status: SolverStatus,
    /// Correlation with the true kernel when the measurement was simulated.
    ncc: Option<f64>,
}

fn estimate_psf(ctx: &Context, measurement: Option<&Path>) -> CliResult<i32> {
    let c = &ctx.config;
    let ks = c.loop_config.kernel_size;
    let (y, truth) = match measurement {
        Some(p) => (Measurement::new(read_grid(p)?.mapv(|v| v.max(0.0)), 0.0)?, None),
        None => {
            let ap = ctx.aperture()?;
            let basis = c.basis()?;
            let (_, phi) = ctx.aberration(&basis, c.seed, c.zernike.rms)?;
            let h = psf(&ap, &phi, c.grid.pad_factor)?;
            let y = image_measurement(&ctx.scene()?, &h, c.loop_config.noise_sigma, c.seed, c.loop_config.convolution)?;
            io::write_gray8(&ctx.path("measurement.png"), y.pixels())?;
            let truth = Psf::new(resize_centered(&h.kernel().view(), ks, ks))?.normalized();
            io::write_float_grid(&ctx.path("psf_true.aofg"), truth.kernel())?;
            (y, Some(truth))
        }
    };
    let est = estimate_psf_blind(&y, ks, &c.blind)?;
    io::write_float_grid(&ctx.path("psf.aofg"), est.psf.kernel())?;
    io::write_gray8(&ctx.path("psf.png"), est.psf.kernel())?;
    let ncc = match &truth {
        Some(t) => Some(kernel_ncc(&est.psf.kernel().view(), &t.kernel().view(), 4)?),
        None => None,
    };
    let report = PsfReport {
        fidelity: est.fidelity,
        iterations: est.iterations_used,
        status: est.status,
        ncc,
    };
    write_json(&ctx.path("report.json"), &report)?;
    match ncc {
        Some(v) => println!("kernel {ks}x{ks}, status {:?}, ncc vs truth {v:.4}", est.status),
        None => println!("kernel {ks}x{ks}, status {:?}", est.status),
    }
    Ok(EXIT_OK)
}

#[derive(Serialize, Default)]
struct MetricsReport {
    strehl: Option<f64>,
    psnr: Option<f64>,
    ssim: Option<f64>,
}

fn metrics(
    ctx: &Context,
    psf_path: Option<&Path>,
    image: Option<&Path>,
    reference: Option<&Path>,
    peak: f64,
) -> CliResult<i32> {
    let mut report = MetricsReport::default();
    if psf_path.is_none() && image.is_none() {
        return Err(CliError::usage("metrics needs --psf and/or --image with --reference"));
    }
    if let Some(p) = psf_path {
        let ap = ctx.aperture()?;
        let k = Psf::from_clamped(read_grid(p)?)?;
        let s = strehl_ratio(&k, &ap)?;
        write_mtf_csv(&ctx.path("mtf.csv"), &mtf(&k, ap.diameter())?)?;
        println!("strehl {s:.6}");
        report.strehl = Some(s);
    }
    match (image, reference) {
        (Some(a), Some(b)) => {
            let a = read_grid(a)?;
            let b = read_grid(b)?;
            let p = psnr(&b.view(), &a.view(), peak)?;
            let s = ssim(&b.view(), &a.view(), SsimParams { peak, ..SsimParams::default() })?;
            println!("psnr {p:.4} dB, ssim {s:.6}");
            report.psnr = Some(p);
            report.ssim = Some(s);
        }
        (None, None) => {}
        _ => return Err(CliError::usage("--image and --reference go together")),
    }
    write_json(&ctx.path("metrics.json"), &report)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BatchReport {
    runs: usize,
    final_strehl_at_least_0_9: f64,
    median_gain_0_to_2: Option<f64>,
    median_gain_2_to_3: Option<f64>,
    median_final_strehl: f64,
}

fn batch(ctx: &Context) -> CliResult<i32> {
    let c = &ctx.config;
    let ap = ctx.aperture()?;
    let basis = c.basis()?;
    let est = c.estimators(basis.clone());
    let cfg = c.loop_config();
    let runs: Vec<usize> = (0..c.batch.runs).collect();
    let results = par::map_with(Exec::default(), runs, |k| -> CliResult<(u64, f64, Vec<f64>)> {
        let seed = c.batch.first_seed + k as u64;
        let rms = c.batch.rms_of(k);
        let (_, phi) = ctx.aberration(&basis, seed, rms)?;
        let scene = match &c.scene.path {
            Some(_) => ctx.scene()?,
            None => dead_leaves(c.grid.n, seed),
        };
        let trace = run_closed_loop(&scene, &phi, &ap, &est, &cfg, seed)?;
        let dir = ctx.path(&format!("run-{k:03}"));
        fs::create_dir_all(&dir)?;
        write_trace(&dir, &trace, &ap)?;
        Ok((seed, rms, trace.strehls()))
    });
    let results = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut csv = String::from("run,seed,rms");
    let width = results.iter().map(|r| r.2.len()).max().unwrap_or(0);
    for k in 0..width {
        let _ = write!(csv, ",strehl_{k}");
    }
    csv.push('\n');
    for (k, (seed, rms, s)) in results.iter().enumerate() {
        let _ = write!(csv, "{k},{seed},{rms}");
        for v in s {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    fs::write(ctx.path("summary.csv"), csv)?;
    let n = results.len().max(1) as f64;
    let finals: Vec<f64> = results.iter().filter_map(|r| r.2.last().copied()).collect();
    let gain = |a: usize, b: usize| {
        let mut g: Vec<f64> = results
            .iter()
            .filter(|r| r.2.len() > b)
            .map(|r| r.2[b] - r.2[a])
            .collect();
        (!g.is_empty()).then(|| median(&mut g))
    };
    let report = BatchReport {
        runs: results.len(),
        final_strehl_at_least_0_9: finals.iter().filter(|s| **s >= 0.9).count() as f64 / n,
        median_gain_0_to_2: gain(0, 2),
        median_gain_2_to_3: gain(2, 3),
        median_final_strehl: median(&mut finals.clone()),
    };
    write_json(&ctx.path("summary.json"), &report)?;
    println!(
        "{} runs: final strehl >= 0.9 in {:.0}%, median final {:.4}",
        report.runs,
        100.0 * report.final_strehl_at_least_0_9,
        report.median_final_strehl
    );
    Ok(EXIT_OK)
}
