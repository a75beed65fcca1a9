//! Closed-loop correction: measure, estimate the residual wavefront, subtract
//! it from the modulator pattern, repeat.
//!
//! Every measurement of one loop images the same static scene. From the
//! second iteration on, the pipeline estimator treats the earlier
//! measurements as diversity frames, since the pattern each was taken under
//! is known.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aperture::Aperture;
use crate::error::{ensure_same_shape, AoError, Result};
use crate::estimators::{
    estimate_psf_blind, refine_phase_diversity, remove_tilt_piston, retrieve_phase_iterative,
    BlindOptions, DiversityFrame, DiversityOptions, PhaseEstimate, RetrievalOptions, SolverStatus,
};
use crate::metrics::{gradient_phase_error, marechal_strehl, psnr, ssim, SsimParams, StrehlReference};
use crate::optics::{
    diffraction_limited_psf, image_measurement, psf, ConvolutionMode, Measurement, PhaseMap, Psf,
    SceneImage,
};
use crate::zernike::ZernikeBasis;

/// Phase pattern on the modulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SlmState {
    phase: PhaseMap,
    quantization_levels: u32,
    history: Vec<PhaseMap>,
}

impl SlmState {
    /// Flat pattern. `quantization_levels == 0` means continuous.
    pub fn new(n: usize, quantization_levels: u32) -> Self {
        Self {
            phase: PhaseMap::zeros(n),
            quantization_levels,
            history: Vec::new(),
        }
    }

    pub fn from_phase(phase: PhaseMap, quantization_levels: u32) -> Self {
        let phase = quantize(&phase, quantization_levels);
        Self {
            phase,
            quantization_levels,
            history: Vec::new(),
        }
    }

    pub fn phase(&self) -> &PhaseMap {
        &self.phase
    }

    pub fn quantization_levels(&self) -> u32 {
        self.quantization_levels
    }

    /// Updates applied so far, oldest first, as actually displayed
    /// (after quantization).
    pub fn history(&self) -> &[PhaseMap] {
        &self.history
    }

    /// `φ_SLM ← φ_SLM − gain · estimate`, then quantization.
    pub fn apply(&mut self, estimate: &PhaseMap, gain: f64) -> Result<()> {
        ensure_same_shape(estimate.dim(), self.phase.dim(), "slm update")?;
        let next = quantize(&self.phase.sub(&estimate.scaled(gain))?, self.quantization_levels);
        self.history.push(next.sub(&self.phase)?);
        self.phase = next;
        Ok(())
    }
}

/// Rounds to the nearest multiple of `2π / levels`. Values are not wrapped,
/// so the lattice holds modulo 2π and the pattern stays continuous.
pub fn quantize(phase: &PhaseMap, levels: u32) -> PhaseMap {
    if levels == 0 {
        return phase.clone();
    }
    let step = 2.0 * PI / levels as f64;
    PhaseMap::new(phase.values().mapv(|v| (v / step).round() * step))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Returns the true residual; needs ground truth.
    Oracle,
    /// Returns `geometric_factor` times the true residual.
    Geometric,
    /// Blind PSF estimation, phase retrieval and, with earlier frames,
    /// multi-frame diversity refinement.
    #[default]
    Pipeline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub loops: usize,
    /// Total measurements, including the uncorrected one.
    pub measurements_budget: usize,
    pub noise_sigma: f64,
    pub estimator: EstimatorKind,
    pub geometric_factor: f64,
    /// Loop gain in (0, 1].
    pub gain: f64,
    /// Stop once the estimated residual RMS falls below `early_stop_rms`.
    pub early_stop: bool,
    pub early_stop_rms: f64,
    pub quantization_levels: u32,
    /// Side of the blind kernel estimate.
    pub kernel_size: usize,
    /// Taken from the grid section of a run configuration.
    #[serde(skip)]
    pub pad_factor: usize,
    pub convolution: ConvolutionMode,
    /// Use earlier frames of the loop as diversity frames.
    pub diversity: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            loops: 3,
            measurements_budget: 4,
            noise_sigma: 1e-3,
            estimator: EstimatorKind::Pipeline,
            geometric_factor: 0.5,
            gain: 1.0,
            early_stop: false,
            early_stop_rms: 0.05,
            quantization_levels: 0,
            kernel_size: 63,
            pad_factor: 2,
            convolution: ConvolutionMode::Circular,
            diversity: true,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AoError::Config(m));
        if self.measurements_budget != self.loops + 1 {
            return bad(format!(
                "measurements_budget must be loops + 1 = {}, got {}",
                self.loops + 1,
                self.measurements_budget
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad(format!("gain must be in (0, 1], got {}", self.gain));
        }
        if !(self.geometric_factor >= 0.0 && self.geometric_factor <= 1.0) {
            return bad(format!("geometric_factor must be in [0, 1], got {}", self.geometric_factor));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size < 3 {
            return bad(format!("kernel_size must be odd and >= 3, got {}", self.kernel_size));
        }
        if self.pad_factor == 0 {
            return bad("pad_factor must be >= 1".into());
        }
        if !(self.early_stop_rms >= 0.0) {
            return bad(format!("early_stop_rms must be >= 0, got {}", self.early_stop_rms));
        }
        Ok(())
    }
}

/// Estimator choice and the options of every stage.
#[derive(Clone, Debug)]
pub struct Estimators {
    pub kind: EstimatorKind,
    pub geometric_factor: f64,
    pub basis: ZernikeBasis,
    pub kernel_size: usize,
    pub blind: BlindOptions,
    pub retrieval: RetrievalOptions,
    pub diversity: Option<DiversityOptions>,
}

impl Estimators {
    pub fn pipeline(basis: ZernikeBasis) -> Self {
        Self {
            kind: EstimatorKind::Pipeline,
            geometric_factor: 0.5,
            basis,
            kernel_size: 63,
            blind: BlindOptions::default(),
            retrieval: RetrievalOptions::default(),
            diversity: Some(DiversityOptions::default()),
        }
    }

    pub fn with_kind(mut self, kind: EstimatorKind) -> Self {
        self.kind = kind;
        self
    }

    /// Builds the estimator set described by `config`.
    pub fn from_config(
        basis: ZernikeBasis,
        config: &LoopConfig,
        blind: BlindOptions,
        retrieval: RetrievalOptions,
        diversity: DiversityOptions,
    ) -> Self {
        Self {
            kind: config.estimator,
            geometric_factor: config.geometric_factor,
            basis,
            kernel_size: config.kernel_size,
            blind,
            retrieval,
            diversity: config.diversity.then_some(diversity),
        }
    }
}

/// One loop iteration: the measurement and what was estimated from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub measurement: Measurement,
    /// Pattern displayed while measuring.
    pub slm_phase: PhaseMap,
    /// Ground-truth Strehl of the residual `φ_o + φ_SLM`.
    pub strehl: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent on the final, measurement-only record.
    pub psf_estimate: Option<Psf>,
    pub phase_estimate: Option<PhaseMap>,
    /// RMS of the estimated residual over the aperture, rad.
    pub estimated_rms: Option<f64>,
    /// Maréchal surrogate `exp(−σ̂²)` of the estimated residual.
    pub estimated_strehl: Option<f64>,
    /// Gradient-domain error of the estimate against the true residual.
    pub grad_err: Option<f64>,
    /// Phase estimator status.
    pub status: Option<SolverStatus>,
    pub psf_status: Option<SolverStatus>,
    /// The phase estimator ran out of iterations; its best iterate was
    /// applied anyway.
    pub flagged: bool,
    pub ambiguous: bool,
}

/// Scalar summary of a record, one JSON line per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub iteration: usize,
    pub strehl: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub estimated_rms: Option<f64>,
    pub estimated_strehl: Option<f64>,
    pub grad_err: Option<f64>,
    pub status: Option<SolverStatus>,
    pub psf_status: Option<SolverStatus>,
    pub flagged: bool,
    pub ambiguous: bool,
    pub slm_rms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopTrace {
    pub records: Vec<TraceRecord>,
    /// Forward-model image formations performed by the loop.
    pub measurements_formed: usize,
    pub final_slm: SlmState,
}

impl TraceRecord {
    pub fn line(&self, aperture: &Aperture) -> TraceLine {
        TraceLine {
            iteration: self.iteration,
            strehl: self.strehl,
            psnr: self.psnr,
            ssim: self.ssim,
            estimated_rms: self.estimated_rms,
            estimated_strehl: self.estimated_strehl,
            grad_err: self.grad_err,
            status: self.status,
            psf_status: self.psf_status,
            flagged: self.flagged,
            ambiguous: self.ambiguous,
            slm_rms: self.slm_phase.rms_over(&aperture.support().view()),
        }
    }
}

impl LoopTrace {
    pub fn strehls(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.strehl).collect()
    }

    /// JSON-lines serialization, one record per line.
    pub fn to_jsonl(&self, aperture: &Aperture) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&r.line(aperture)).expect("plain data"));
            out.push('\n');
        }
        out
    }
}

/// Forms measurements and scores them; counts every image formation.
struct Simulator<'a> {
    scene: &'a SceneImage,
    phi_o: &'a PhaseMap,
    aperture: &'a Aperture,
    pad_factor: usize,
    convolution: ConvolutionMode,
    strehl_ref: StrehlReference,
    reference: Array2<f64>,
    formed: usize,
}

impl<'a> Simulator<'a> {
    fn new(
        scene: &'a SceneImage,
        phi_o: &'a PhaseMap,
        aperture: &'a Aperture,
        pad_factor: usize,
        convolution: ConvolutionMode,
    ) -> Result<Self> {
        ensure_same_shape(phi_o.dim(), aperture.dim(), "phi_o")?;
        let bare = diffraction_limited_psf(aperture, pad_factor)?;
        let reference = image_measurement(scene, &bare, 0.0, 0, convolution)?.pixels().clone();
        Ok(Self {
            scene,
            phi_o,
            aperture,
            pad_factor,
            convolution,
            strehl_ref: StrehlReference::new(aperture, pad_factor)?,
            reference,
            formed: 0,
        })
    }

    fn residual(&self, slm: &SlmState) -> Result<PhaseMap> {
        self.phi_o.add(slm.phase())
    }

    /// Measurement under `slm` with its Strehl, PSNR and SSIM.
    fn measure(&mut self, slm: &SlmState, noise_sigma: f64, seed: u64) -> Result<(Measurement, f64, f64, f64)> {
        let h = psf(self.aperture, &self.residual(slm)?, self.pad_factor)?;
        let y = image_measurement(self.scene, &h, noise_sigma, seed, self.convolution)?;
        self.formed += 1;
        let strehl = self.strehl_ref.strehl(&h)?;
        let p = psnr(&self.reference.view(), &y.pixels().view(), 1.0)?;
        let s = ssim(&self.reference.view(), &y.pixels().view(), SsimParams::default())?;
        Ok((y, strehl, p, s))
    }
}

/// Earlier measurement of the same scene and the pattern it was taken under.
#[derive(Clone, Debug)]
pub struct PastFrame {
    pub measurement: Measurement,
    pub slm_phase: PhaseMap,
}

/// What an estimator returns for one measurement.
#[derive(Clone, Debug)]
pub struct StepEstimate {
    /// Estimated residual wavefront under the current pattern.
    pub residual: PhaseMap,
    pub psf: Option<Psf>,
    pub psf_status: Option<SolverStatus>,
    pub status: SolverStatus,
    pub ambiguous: bool,
}

/// Estimates the residual of the newest frame in `frames`; the earlier ones
/// are available as diversity frames. `truth` is the true residual and is
/// only read by the oracle and geometric estimators.
pub fn estimate_residual(
    frames: &[PastFrame],
    aperture: &Aperture,
    estimators: &Estimators,
    truth: Option<&PhaseMap>,
    seed: u64,
) -> Result<StepEstimate> {
    let current = frames
        .last()
        .ok_or_else(|| AoError::Argument("no measurement to estimate from".into()))?;
    let need_truth = || truth.ok_or_else(|| AoError::Argument("oracle estimators need ground truth".into()));
    match estimators.kind {
        EstimatorKind::Oracle => Ok(StepEstimate {
            residual: need_truth()?.clone(),
            psf: None,
            psf_status: None,
            status: SolverStatus::Converged,
            ambiguous: false,
        }),
        EstimatorKind::Geometric => Ok(StepEstimate {
            residual: need_truth()?.scaled(estimators.geometric_factor),
            psf: None,
            psf_status: None,
            status: SolverStatus::Converged,
            ambiguous: false,
        }),
        EstimatorKind::Pipeline => {
            let blind = estimate_psf_blind(&current.measurement, estimators.kernel_size, &estimators.blind)?;
            let retrieval = RetrievalOptions {
                seed: estimators.retrieval.seed ^ seed,
                ..estimators.retrieval.clone()
            };
            let single = retrieve_phase_iterative(&blind.psf, aperture, &estimators.basis, &retrieval)?;
            let est = match &estimators.diversity {
                Some(opts) if frames.len() >= 2 => {
                    diversity_estimate(frames, aperture, &estimators.basis, &single, opts)?
                }
                _ => single,
            };
            Ok(StepEstimate {
                residual: est.phase,
                psf: Some(blind.psf),
                psf_status: Some(blind.status),
                status: est.status,
                ambiguous: est.ambiguous,
            })
        }
    }
}

/// Refines the aberration common to all frames and returns the residual of
/// the newest one. Starts from the aberration implied by the current
/// pattern and from the single-frame estimate.
fn diversity_estimate(
    frames: &[PastFrame],
    aperture: &Aperture,
    basis: &ZernikeBasis,
    single: &PhaseEstimate,
    opts: &DiversityOptions,
) -> Result<PhaseEstimate> {
    let current = &frames[frames.len() - 1].slm_phase;
    let prior = basis.fit_coeffs_weighted(&current.scaled(-1.0), &aperture.support().view())?;
    let from_single = basis.fit_coeffs_weighted(&single.phase.sub(current)?, &aperture.support().view())?;
    let views: Vec<DiversityFrame<'_>> = frames
        .iter()
        .map(|f| DiversityFrame {
            measurement: &f.measurement,
            diversity: &f.slm_phase,
        })
        .collect();
    let common = refine_phase_diversity(&views, aperture, basis, &[prior, from_single], opts)?;
    let phase = remove_tilt_piston(&common.phase.add(current)?, aperture)?;
    Ok(PhaseEstimate { phase, ..common })
}

/// Per-iteration seed of the measurement noise.
fn noise_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(iteration as u64)
}

/// One correction step: measure under `slm`, estimate the residual, update
/// the pattern. `frames` holds the earlier measurements of this loop and
/// receives the new one.
#[allow(clippy::too_many_arguments)]
pub fn ao_step(
    scene: &SceneImage,
    phi_o: &PhaseMap,
    slm: &SlmState,
    aperture: &Aperture,
    estimators: &Estimators,
    config: &LoopConfig,
    seed: u64,
    frames: &mut Vec<PastFrame>,
) -> Result<(SlmState, TraceRecord)> {
    let mut sim = Simulator::new(scene, phi_o, aperture, config.pad_factor, config.convolution)?;
    step(&mut sim, slm, estimators, config, seed, frames)
}

fn step(
    sim: &mut Simulator<'_>,
    slm: &SlmState,
    estimators: &Estimators,
    config: &LoopConfig,
    seed: u64,
    frames: &mut Vec<PastFrame>,
) -> Result<(SlmState, TraceRecord)> {
    let iteration = frames.len();
    let (y, strehl, p, s) = sim.measure(slm, config.noise_sigma, noise_seed(seed, iteration))?;
    frames.push(PastFrame {
        measurement: y.clone(),
        slm_phase: slm.phase().clone(),
    });
    let truth = sim.residual(slm)?;
    let est = estimate_residual(frames, sim.aperture, estimators, Some(&truth), seed)?;
    let support = sim.aperture.support();
    let rms = remove_tilt_piston(&est.residual, sim.aperture)?.rms_over(&support.view());
    let grad_err = gradient_phase_error(&est.residual, &truth, sim.aperture)?;
    let mut next = slm.clone();
    next.apply(&est.residual, config.gain)?;
    let record = TraceRecord {
        iteration,
        measurement: y,
        slm_phase: slm.phase().clone(),
        strehl,
        psnr: p,
        ssim: s,
        psf_estimate: est.psf,
        phase_estimate: Some(est.residual),
        estimated_rms: Some(rms),
        estimated_strehl: Some(marechal_strehl(rms)),
        grad_err: Some(grad_err),
        status: Some(est.status),
        psf_status: est.psf_status,
        flagged: est.status == SolverStatus::NotConverged,
        ambiguous: est.ambiguous,
    };
    Ok((next, record))
}

/// Runs `config.loops` steps from a flat pattern and takes one final
/// measurement, `loops + 1` in total.
pub fn run_closed_loop(
    scene: &SceneImage,
    phi_o: &PhaseMap,
    aperture: &Aperture,
    estimators: &Estimators,
    config: &LoopConfig,
    seed: u64,
) -> Result<LoopTrace> {
    config.validate()?;
    let mut sim = Simulator::new(scene, phi_o, aperture, config.pad_factor, config.convolution)?;
    let mut slm = SlmState::new(aperture.n(), config.quantization_levels);
    let mut frames = Vec::new();
    let mut records = Vec::new();
    for _ in 0..config.loops {
        let (next, record) = step(&mut sim, &slm, estimators, config, seed, &mut frames)?;
        let stop = config.early_stop && record.estimated_rms.is_some_and(|r| r < config.early_stop_rms);
        records.push(record);
        slm = next;
        if stop {
            break;
        }
    }
    let iteration = frames.len();
    let (y, strehl, p, s) = sim.measure(&slm, config.noise_sigma, noise_seed(seed, iteration))?;
    records.push(TraceRecord {
        iteration,
        measurement: y,
        slm_phase: slm.phase().clone(),
        strehl,
        psnr: p,
        ssim: s,
        psf_estimate: None,
        phase_estimate: None,
        estimated_rms: None,
        estimated_strehl: None,
        grad_err: None,
        status: None,
        psf_status: None,
        flagged: false,
        ambiguous: false,
    });
    Ok(LoopTrace {
        records,
        measurements_formed: sim.formed,
        final_slm: slm,
    })
}

/// Guidestar variant: phase retrieval directly on a measured PSF, then the
/// usual pattern update.
pub fn guidestar_mode_step(
    psf_measured: &Psf,
    slm: &SlmState,
    aperture: &Aperture,
    estimators: &Estimators,
    gain: f64,
) -> Result<(SlmState, PhaseEstimate)> {
    let est = retrieve_phase_iterative(psf_measured, aperture, &estimators.basis, &estimators.retrieval)?;
    let mut next = slm.clone();
    next.apply(&est.phase, gain)?;
    Ok((next, est))
}
