//! Synthetic samples, raster-scan orchestration and depth-image assembly.
//!
//! A [`SampleMap`] is a per-pixel film-thickness grid on a uniform transverse
//! pitch. [`raster_scan`] turns it into a [`DepthImage`] by simulating one
//! acquisition per pixel, calibrating the tally and running the
//! maximum-likelihood delay estimator; the reported depths are relative to
//! the substrate reference delay. Pixels are independent and scanned with
//! per-pixel derived seeds, so the image is identical no matter how the work
//! is scheduled.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{pixel_rng, sample_pixel, AcquisitionConfig, PhaseNoiseModel};
use crate::detectors::{calibrate_tally, DetectorBank};
use crate::error::{Error, Result};
use crate::inference::{
    crb_report, mle_delay, two_step_precision_values, block_precision, DelayWindow,
    DepthConversion, MleOptions, PixelEstimate,
};
use crate::model::DelayConvention;
use crate::model::InterferenceParams;

/// Default transverse grid of the test target (78 x 27 pixels at 15 um).
pub const DEFAULT_KET_WIDTH: usize = 78;
pub const DEFAULT_KET_HEIGHT: usize = 27;

/// Height map of a synthetic semi-transparent specimen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMap {
    pub width_px: usize,
    pub height_px: usize,
    /// Transverse sampling pitch (m).
    pub pixel_pitch_m: f64,
    /// Per-pixel film thickness (m), row-major.
    pub heights_m: Vec<f64>,
    pub refractive_index: f64,
    pub medium_index: f64,
    /// Constant delay offset of the substrate / reference arm (s).
    pub substrate_delay_s: f64,
}

impl SampleMap {
    pub fn uniform(width_px: usize, height_px: usize, height_m: f64, refractive_index: f64) -> Self {
        Self {
            width_px,
            height_px,
            pixel_pitch_m: 15e-6,
            heights_m: vec![height_m; width_px * height_px],
            refractive_index,
            medium_index: 1.0,
            substrate_delay_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidParameter("sample grid must be at least 1x1".into()));
        }
        if self.heights_m.len() != self.width_px * self.height_px {
            return Err(Error::Format(format!(
                "height grid has {} entries, expected {}",
                self.heights_m.len(),
                self.width_px * self.height_px
            )));
        }
        if self.heights_m.iter().any(|h| *h < 0.0 || !h.is_finite()) {
            return Err(Error::InvalidParameter("heights must be nonnegative".into()));
        }
        if !(self.refractive_index >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "refractive index must be >= 1, got {}",
                self.refractive_index
            )));
        }
        if !(self.pixel_pitch_m > 0.0) {
            return Err(Error::InvalidParameter("pixel pitch must be positive".into()));
        }
        Ok(())
    }

    pub fn height_at(&self, x: usize, y: usize) -> f64 {
        self.heights_m[y * self.width_px + x]
    }

    pub fn conversion(&self, convention: DelayConvention) -> DepthConversion {
        DepthConversion {
            refractive_index: self.refractive_index,
            medium_index: self.medium_index,
            convention,
        }
    }

    /// True per-pixel delays, substrate offset included.
    pub fn delays(&self, convention: DelayConvention) -> Vec<f64> {
        let conv = self.conversion(convention);
        self.heights_m
            .iter()
            .map(|h| self.substrate_delay_s + conv.thickness_to_delay(*h))
            .collect()
    }

    /// Write the height matrix as CSV (column headers carry the unit).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_matrix_csv(&mut w, self.width_px, self.height_px, &self.heights_m, "height_m")
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            pixel_pitch_m: self.pixel_pitch_m,
            refractive_index: self.refractive_index,
            medium_index: self.medium_index,
            substrate_delay_s: self.substrate_delay_s,
        }
    }

    /// Export as `<path>.csv` plus a `<path>.json` sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        let file = std::fs::File::create(csv_path)?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let sidecar = csv_path.with_extension("json");
        std::fs::write(sidecar, serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    /// Load from a CSV height matrix and its JSON sidecar.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(csv_path)?;
        let sidecar = csv_path.with_extension("json");
        let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar).map_err(
            |e| Error::Format(format!("missing sidecar {}: {e}", sidecar.display())),
        )?)?;
        let mut heights = Vec::new();
        let mut width = 0usize;
        let mut rows = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                continue; // header row
            }
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            if width == 0 {
                width = row.len();
            } else if row.len() != width {
                return Err(Error::Format(format!(
                    "ragged CSV: line {} has {} cells, expected {width}",
                    lineno + 1,
                    row.len()
                )));
            }
            heights.extend(row);
            rows += 1;
        }
        let map = Self {
            width_px: width,
            height_px: rows,
            pixel_pitch_m: meta.pixel_pitch_m,
            heights_m: heights,
            refractive_index: meta.refractive_index,
            medium_index: meta.medium_index,
            substrate_delay_s: meta.substrate_delay_s,
        };
        map.validate()?;
        Ok(map)
    }
}

/// JSON sidecar of a sample CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub pixel_pitch_m: f64,
    pub refractive_index: f64,
    #[serde(default = "default_medium")]
    pub medium_index: f64,
    #[serde(default)]
    pub substrate_delay_s: f64,
}

fn default_medium() -> f64 {
    1.0
}

/// Fixed 17-significant-digit float formatting used by every CSV artifact,
/// byte-stable across platforms.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn write_matrix_csv<W: Write>(
    w: &mut W,
    width: usize,
    height: usize,
    values: &[f64],
    unit_label: &str,
) -> Result<()> {
    let header: Vec<String> = (0..width).map(|x| format!("x{x:03}_{unit_label}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| format_float(values[y * width + x]))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Line segment in unit glyph coordinates.
type Stroke = ((f64, f64), (f64, f64));

const KET_STROKES: &[Stroke] = &[
    // '|' bar
    ((0.09, 0.12), (0.09, 0.88)),
    // 'K'
    ((0.25, 0.12), (0.25, 0.88)),
    ((0.25, 0.50), (0.42, 0.12)),
    ((0.25, 0.50), (0.42, 0.88)),
    // '>' bracket
    ((0.62, 0.12), (0.75, 0.50)),
    ((0.75, 0.50), (0.62, 0.88)),
];

/// Two-level height map rendering a "|K>" glyph.
///
/// The glyph geometry is a fixture: tests pin its pixel coverage, so changes
/// here are deliberate regressions.
pub fn make_ket_sample(
    step_height_m: f64,
    refractive_index: f64,
    width_px: usize,
    height_px: usize,
) -> SampleMap {
    let mut map = SampleMap::uniform(width_px, height_px, 0.0, refractive_index);
    let stroke_halfwidth = 0.09 * height_px as f64;
    for y in 0..height_px {
        for x in 0..width_px {
            let px = x as f64;
            let py = y as f64;
            let on_glyph = KET_STROKES.iter().any(|((x0, y0), (x1, y1))| {
                let ax = x0 * (width_px - 1) as f64;
                let ay = y0 * (height_px - 1) as f64;
                let bx = x1 * (width_px - 1) as f64;
                let by = y1 * (height_px - 1) as f64;
                point_segment_distance(px, py, ax, ay, bx, by) <= stroke_halfwidth
            });
            if on_glyph {
                map.heights_m[y * width_px + x] = step_height_m;
            }
        }
    }
    map
}

fn point_segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let dx = bx - ax;
    let dy = by - ay;
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = ax + t * dx;
    let cy = ay + t * dy;
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Why a pixel produced no estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelFailure {
    Empty,
    NonIdentifiable,
    Ambiguous,
}

/// Per-pixel result of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PixelOutcome {
    Estimate(PixelEstimate),
    Failed(PixelFailure),
}

impl PixelOutcome {
    pub fn estimate(&self) -> Option<&PixelEstimate> {
        match self {
            PixelOutcome::Estimate(e) => Some(e),
            PixelOutcome::Failed(_) => None,
        }
    }
}

/// Provenance of a [`DepthImage`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub params: InterferenceParams,
    pub acquisition: AcquisitionConfig,
    pub noise: PhaseNoiseModel,
    pub convention: DelayConvention,
    pub refractive_index: f64,
    pub medium_index: f64,
    pub substrate_delay_s: f64,
    pub pixel_pitch_m: f64,
    pub window: DelayWindow,
}

/// Estimated depth image of one raster scan, row-major scan order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width_px: usize,
    pub height_px: usize,
    pub pixels: Vec<PixelOutcome>,
    pub meta: ScanMetadata,
}

impl DepthImage {
    /// Depths relative to the substrate reference (m); NaN where the pixel failed.
    pub fn depth_matrix(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| p.estimate().map_or(f64::NAN, |e| e.depth_m))
            .collect()
    }

    /// Per-pixel depth standard error (m); NaN where the pixel failed.
    pub fn sigma_matrix(&self) -> Vec<f64> {
        let scale = self.conversion().depth_per_delay();
        self.pixels
            .iter()
            .map(|p| p.estimate().map_or(f64::NAN, |e| e.sigma_s * scale))
            .collect()
    }

    /// Fringe branch indices; NaN where the pixel failed.
    pub fn fringe_matrix(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| p.estimate().map_or(f64::NAN, |e| e.fringe_index as f64))
            .collect()
    }

    pub fn conversion(&self) -> DepthConversion {
        DepthConversion {
            refractive_index: self.meta.refractive_index,
            medium_index: self.meta.medium_index,
            convention: self.meta.convention,
        }
    }

    pub fn failure_counts(&self) -> FailureCounts {
        let mut counts = FailureCounts::default();
        for p in &self.pixels {
            match p {
                PixelOutcome::Failed(PixelFailure::Empty) => counts.empty += 1,
                PixelOutcome::Failed(PixelFailure::NonIdentifiable) => counts.non_identifiable += 1,
                PixelOutcome::Failed(PixelFailure::Ambiguous) => counts.ambiguous += 1,
                PixelOutcome::Estimate(_) => counts.estimated += 1,
            }
        }
        counts
    }

    pub fn write_depth_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_matrix_csv(&mut w, self.width_px, self.height_px, &self.depth_matrix(), "depth_m")
    }

    pub fn write_sigma_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_matrix_csv(&mut w, self.width_px, self.height_px, &self.sigma_matrix(), "sigma_m")
    }

    pub fn write_fringe_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_matrix_csv(
            &mut w,
            self.width_px,
            self.height_px,
            &self.fringe_matrix(),
            "fringe_index",
        )
    }

    /// 16-bit binary portable graymap of the depth matrix for quick viewing.
    /// Depths map linearly onto 0..=65535 over the finite range; failed
    /// pixels render black.
    pub fn write_pgm16<W: Write>(&self, mut w: W) -> Result<()> {
        let depths = self.depth_matrix();
        let finite: Vec<f64> = depths.iter().copied().filter(|d| d.is_finite()).collect();
        let (lo, hi) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(*d), hi.max(*d))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        write!(w, "P5\n{} {}\n65535\n", self.width_px, self.height_px)?;
        for d in &depths {
            let level: u16 = if d.is_finite() {
                (((d - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            w.write_all(&level.to_be_bytes())?;
        }
        Ok(())
    }
}

/// Per-failure-kind pixel counts of a scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub estimated: usize,
    pub empty: usize,
    pub non_identifiable: usize,
    pub ambiguous: usize,
}

fn classify_failure(err: Error) -> Result<PixelFailure> {
    match err {
        Error::EmptyTally => Ok(PixelFailure::Empty),
        Error::NonIdentifiable => Ok(PixelFailure::NonIdentifiable),
        Error::Ambiguous { .. } => Ok(PixelFailure::Ambiguous),
        fatal => Err(fatal),
    }
}

/// Search window that contains every expected delay of the map, one fringe
/// half-period wide for two-colour photons.
fn scan_window(map: &SampleMap, params: &InterferenceParams, convention: DelayConvention) -> Result<DelayWindow> {
    let delays = map.delays(convention);
    let t_min = delays.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = delays.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match params.fringe_half_period_delay_s() {
        Some(hp) => {
            if t_max - t_min > hp {
                return Err(Error::InvalidParameter(format!(
                    "sample delay span {:.3e} s exceeds the fringe half-period {:.3e} s; \
                     choose a lower detuning or plan a coarse pass first",
                    t_max - t_min,
                    hp
                )));
            }
            let mid = 0.5 * (t_min + t_max);
            DelayWindow::new(mid - 0.5 * hp, mid + 0.5 * hp)
        }
        None => {
            let pad = 0.05 * params.temporal_width_s;
            DelayWindow::new(t_min - pad, t_max + pad)
        }
    }
}

/// Raster-scan a sample: per pixel, simulate, calibrate, estimate.
pub fn raster_scan(
    map: &SampleMap,
    params: &InterferenceParams,
    config: &AcquisitionConfig,
    bank: &DetectorBank,
    noise: &PhaseNoiseModel,
    convention: DelayConvention,
) -> Result<DepthImage> {
    map.validate()?;
    params.validate()?;
    config.validate()?;
    bank.validate()?;
    let conv = map.conversion(convention);
    let window = scan_window(map, params, convention)?;
    let delays = map.delays(convention);
    let opts = MleOptions::default();

    let pixels: Vec<PixelOutcome> = delays
        .par_iter()
        .enumerate()
        .map(|(index, &t_true)| -> Result<PixelOutcome> {
            let mut rng = pixel_rng(config.seed, index as u64);
            let raw = sample_pixel(t_true, params, config, bank, noise, &mut rng)?;
            let cal = calibrate_tally(&raw, &bank.efficiencies, &bank.splitter_ratios)?;
            match mle_delay(&cal, params, window, &conv, &opts) {
                Ok(mut est) => {
                    est.depth_m = conv.delay_to_thickness(est.delay_s - map.substrate_delay_s);
                    Ok(PixelOutcome::Estimate(est))
                }
                Err(err) => Ok(PixelOutcome::Failed(classify_failure(err)?)),
            }
        })
        .collect::<Result<_>>()?;

    Ok(DepthImage {
        width_px: map.width_px,
        height_px: map.height_px,
        pixels,
        meta: ScanMetadata {
            params: *params,
            acquisition: *config,
            noise: *noise,
            convention,
            refractive_index: map.refractive_index,
            medium_index: map.medium_index,
            substrate_delay_s: map.substrate_delay_s,
            pixel_pitch_m: map.pixel_pitch_m,
            window,
        },
    })
}

/// One detuning's worth of a two-step precision experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepExperimentRow {
    pub detuning_hz: f64,
    /// Combined two-step precision of the depth estimates (m).
    pub sigma_m: f64,
    /// CRB-level two-step precision at the same operating points (m).
    pub crb_sigma_m: f64,
    /// Recovered step height, mean(S1) - mean(S2) (m).
    pub step_estimate_m: f64,
    /// Depth estimates on the film (m, relative to substrate reference).
    pub estimates_s1_m: Vec<f64>,
    /// Depth estimates on the bare substrate (m).
    pub estimates_s2_m: Vec<f64>,
    pub failures: usize,
}

/// Base delay placing the two step levels symmetrically about a fringe
/// quadrature point (the translation stage gives this freedom in the
/// experiment).
fn quadrature_base_delay(detuning_hz: f64, step_delay_s: f64) -> f64 {
    let mut m = 0u32;
    loop {
        let t0 = (0.25 + 0.5 * m as f64) / detuning_hz - 0.5 * step_delay_s;
        if t0 >= 0.0 {
            return t0;
        }
        m += 1;
    }
}

/// Measure a two-level step at several detunings, equal pixel counts on each
/// level, and report the combined precision per detuning.
#[allow(clippy::too_many_arguments)]
pub fn step_experiment(
    step_height_m: f64,
    detunings_hz: &[f64],
    pixels_per_step: usize,
    params: &InterferenceParams,
    config: &AcquisitionConfig,
    bank: &DetectorBank,
    noise: &PhaseNoiseModel,
    convention: DelayConvention,
    refractive_index: f64,
) -> Result<Vec<StepExperimentRow>> {
    if detunings_hz.is_empty() {
        return Err(Error::InvalidParameter("no detunings requested".into()));
    }
    if pixels_per_step < 2 {
        return Err(Error::InsufficientData(
            "need at least two pixels per step for a variance".into(),
        ));
    }
    let conv = DepthConversion {
        refractive_index,
        medium_index: 1.0,
        convention,
    };
    let step_delay = conv.thickness_to_delay(step_height_m);

    detunings_hz
        .iter()
        .enumerate()
        .map(|(dv_idx, &dv)| {
            let pass_params = InterferenceParams {
                detuning_hz: dv,
                degenerate: false,
                ..*params
            };
            pass_params.validate()?;
            let hp = pass_params
                .fringe_half_period_delay_s()
                .ok_or_else(|| Error::InvalidParameter("step experiment needs a nonzero detuning".into()))?;
            if step_delay >= hp {
                return Err(Error::InvalidParameter(format!(
                    "step delay {step_delay:.3e} s spans more than the fringe half-period at {dv:.3e} Hz"
                )));
            }
            let t0 = quadrature_base_delay(dv, step_delay);
            let mid = t0 + 0.5 * step_delay;
            let window = DelayWindow::new(mid - 0.5 * hp, mid + 0.5 * hp)?;
            let opts = MleOptions::default();

            let estimates: Vec<(bool, Result<PixelEstimate>)> = (0..2 * pixels_per_step)
                .into_par_iter()
                .map(|k| {
                    let on_film = k < pixels_per_step;
                    let t_true = if on_film { t0 + step_delay } else { t0 };
                    let stream = (dv_idx as u64) << 32 | k as u64;
                    let mut rng = pixel_rng(config.seed, stream);
                    let est = sample_pixel(t_true, &pass_params, config, bank, noise, &mut rng)
                        .and_then(|raw| calibrate_tally(&raw, &bank.efficiencies, &bank.splitter_ratios))
                        .and_then(|cal| mle_delay(&cal, &pass_params, window, &conv, &opts));
                    (on_film, est)
                })
                .collect();

            let mut s1 = Vec::new();
            let mut s2 = Vec::new();
            let mut failures = 0usize;
            for (on_film, est) in estimates {
                match est {
                    Ok(e) => {
                        let depth = conv.delay_to_thickness(e.delay_s - t0);
                        if on_film {
                            s1.push(depth);
                        } else {
                            s2.push(depth);
                        }
                    }
                    Err(err) => {
                        classify_failure(err)?;
                        failures += 1;
                    }
                }
            }
            let sigma = two_step_precision_values(&s1, &s2)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let step_estimate = mean(&s1) - mean(&s2);

            let n_ref = expected_pairs(config);
            let crb1 = crb_report(t0 + step_delay, &pass_params, n_ref, &conv)?;
            let crb2 = crb_report(t0, &pass_params, n_ref, &conv)?;
            let crb_sigma =
                (crb1.crb_sigma_d_m.powi(2) + crb2.crb_sigma_d_m.powi(2)).sqrt();

            Ok(StepExperimentRow {
                detuning_hz: dv,
                sigma_m: sigma,
                crb_sigma_m: crb_sigma,
                step_estimate_m: step_estimate,
                estimates_s1_m: s1,
                estimates_s2_m: s2,
                failures,
            })
        })
        .collect()
}

fn expected_pairs(config: &AcquisitionConfig) -> f64 {
    let tb = config.transmission_b.unwrap_or(config.transmission);
    config.pair_rate_hz * config.dwell_s * config.transmission * tb
}

/// Detuning-dependent rescaling of the phase-noise diffusion rate,
/// `D(dv) = D * (dv / reference)^exponent`.
///
/// Models the experimental coupling between crystal temperature (which sets
/// the detuning) and phase-lock stability; with `exponent = 0` every
/// detuning sees the configured noise unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScaling {
    pub reference_hz: f64,
    pub exponent: f64,
}

impl NoiseScaling {
    fn apply(&self, noise: &PhaseNoiseModel, detuning_hz: f64) -> PhaseNoiseModel {
        let factor = (detuning_hz / self.reference_hz).powf(self.exponent);
        PhaseNoiseModel {
            diffusion_rad2_per_s: noise.diffusion_rad2_per_s * factor,
            ..*noise
        }
    }
}

/// One detuning's worth of the single-pixel precision sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub detuning_hz: f64,
    /// Detected pairs per acquisition backing the CRB reference.
    pub n_pairs: f64,
    /// N * F at the operating point (s^-2).
    pub total_information: f64,
    /// Mean of per-block standard deviations of the delay estimates (s).
    pub precision_mean_s: f64,
    /// Standard deviation across blocks (s), the error bar.
    pub precision_stderr_s: f64,
    /// Same precision mapped to depth (m).
    pub precision_mean_m: f64,
    pub crb_sigma_t_s: f64,
    pub crb_sigma_d_m: f64,
    pub blocks: usize,
    /// The underlying delay estimates (s), for histogramming.
    pub estimates_s: Vec<f64>,
}

/// Repeat single-pixel acquisitions at each detuning (operating at the first
/// fringe quadrature) and report block-statistics precision against the CRB.
#[allow(clippy::too_many_arguments)]
pub fn single_pixel_sweep(
    detunings_hz: &[f64],
    n_repeats: usize,
    block_size: usize,
    params: &InterferenceParams,
    config: &AcquisitionConfig,
    bank: &DetectorBank,
    noise: &PhaseNoiseModel,
    scaling: Option<NoiseScaling>,
    conv: &DepthConversion,
) -> Result<Vec<SweepRow>> {
    if detunings_hz.is_empty() {
        return Err(Error::InvalidParameter("no detunings requested".into()));
    }
    detunings_hz
        .iter()
        .enumerate()
        .map(|(dv_idx, &dv)| {
            let pass_params = InterferenceParams {
                detuning_hz: dv,
                degenerate: false,
                ..*params
            };
            pass_params.validate()?;
            let hp = pass_params
                .fringe_half_period_delay_s()
                .ok_or_else(|| Error::InvalidParameter("sweep needs nonzero detunings".into()))?;
            let t_true = 0.25 / dv; // first quadrature point
            let window = DelayWindow::new(0.0, hp)?;
            let pass_noise = match &scaling {
                Some(s) => s.apply(noise, dv),
                None => *noise,
            };
            let opts = MleOptions::default();

            let estimates: Vec<Result<f64>> = (0..n_repeats)
                .into_par_iter()
                .map(|rep| {
                    let stream = (dv_idx as u64) << 32 | rep as u64;
                    let mut rng = pixel_rng(config.seed, stream);
                    sample_pixel(t_true, &pass_params, config, bank, &pass_noise, &mut rng)
                        .and_then(|raw| {
                            calibrate_tally(&raw, &bank.efficiencies, &bank.splitter_ratios)
                        })
                        .and_then(|cal| mle_delay(&cal, &pass_params, window, conv, &opts))
                        .map(|est| est.delay_s)
                })
                .collect();
            let mut delays = Vec::with_capacity(n_repeats);
            for est in estimates {
                match est {
                    Ok(d) => delays.push(d),
                    Err(err) => {
                        classify_failure(err)?; // fatal errors propagate
                    }
                }
            }
            delays.truncate(delays.len() - delays.len() % block_size);
            let (precision_mean, precision_stderr) = block_precision(&delays, block_size)?;

            let n_ref = expected_pairs(config);
            let crb = crb_report(t_true, &pass_params, n_ref, conv)?;
            Ok(SweepRow {
                detuning_hz: dv,
                n_pairs: n_ref,
                total_information: crb.total_information,
                precision_mean_s: precision_mean,
                precision_stderr_s: precision_stderr,
                precision_mean_m: precision_mean * conv.depth_per_delay(),
                crb_sigma_t_s: crb.crb_sigma_t_s,
                crb_sigma_d_m: crb.crb_sigma_d_m,
                blocks: delays.len() / block_size,
                estimates_s: delays,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SPEED_OF_LIGHT_M_PER_S;

    fn assert_close(actual: f64, expected: f64, rel: f64) {
        let scale = expected.abs().max(1e-300);
        assert!(
            (actual - expected).abs() <= rel * scale,
            "expected {expected}, got {actual} (rel tol {rel})"
        );
    }

    fn quick_config(pairs: f64, seed: u64) -> AcquisitionConfig {
        AcquisitionConfig {
            pair_rate_hz: pairs * 2.0,
            dwell_s: 0.5,
            transmission: 1.0,
            transmission_b: None,
            seed,
        }
    }

    // --- sample maps ---

    #[test]
    fn ket_sample_is_two_level_with_sane_coverage() {
        let map = make_ket_sample(4.6e-6, 1.58, DEFAULT_KET_WIDTH, DEFAULT_KET_HEIGHT);
        map.validate().unwrap();
        let mut levels: Vec<f64> = map.heights_m.clone();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        assert_eq!(levels, vec![0.0, 4.6e-6]);
        let glyph = map.heights_m.iter().filter(|h| **h > 0.0).count();
        let fraction = glyph as f64 / map.heights_m.len() as f64;
        assert!(
            (0.2..0.8).contains(&fraction),
            "glyph fraction {fraction} out of range"
        );
    }

    #[test]
    fn ket_glyph_coverage_is_frozen() {
        // Regression pin of the generator's exact output.
        let map = make_ket_sample(4.6e-6, 1.58, DEFAULT_KET_WIDTH, DEFAULT_KET_HEIGHT);
        let glyph = map.heights_m.iter().filter(|h| **h > 0.0).count();
        assert_eq!(glyph, KET_GLYPH_PIXELS);
    }

    /// Pixel count of the default 78x27 glyph; re-freeze deliberately if the
    /// geometry changes.
    const KET_GLYPH_PIXELS: usize = 540;

    #[test]
    fn zero_step_gives_uniform_map() {
        let map = make_ket_sample(0.0, 1.58, 30, 10);
        assert!(map.heights_m.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn sample_map_round_trips_through_csv() {
        let dir = std::env::temp_dir().join(format!("homscope-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sample.csv");
        let mut map = make_ket_sample(4.6e-6, 1.58, 20, 9);
        map.substrate_delay_s = 2e-14;
        map.save(&path).unwrap();
        let back = SampleMap::load(&path).unwrap();
        assert_eq!(map, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    // --- raster scan ---

    #[test]
    fn flat_sample_scan_is_statistically_flat() {
        let map = SampleMap {
            substrate_delay_s: 0.25 / 7.4e12, // operate at quadrature
            ..SampleMap::uniform(16, 8, 0.0, 1.58)
        };
        let params = InterferenceParams::default();
        let config = quick_config(4000.0, 404);
        let image = raster_scan(
            &map,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            DelayConvention::OpticalPath,
        )
        .unwrap();
        let counts = image.failure_counts();
        assert_eq!(counts.estimated, 128, "failures: {counts:?}");

        let depths = image.depth_matrix();
        let sigmas = image.sigma_matrix();
        let mean_depth = depths.iter().sum::<f64>() / depths.len() as f64;
        let mean_sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        // Flat sample: every estimate within a few sigma of zero depth.
        assert!(
            mean_depth.abs() < 0.5 * mean_sigma,
            "mean {mean_depth} vs sigma {mean_sigma}"
        );
        // Splitting a flat scan in two measures sqrt(2) * per-pixel sigma.
        let (a, b) = depths.split_at(depths.len() / 2);
        let sigma = two_step_precision_values(a, b).unwrap();
        assert_close(sigma, 2.0f64.sqrt() * mean_sigma, 0.3);
    }

    #[test]
    fn zero_dwell_marks_every_pixel_empty() {
        let map = SampleMap::uniform(4, 3, 0.0, 1.58);
        let params = InterferenceParams::default();
        let config = AcquisitionConfig {
            dwell_s: 0.0,
            transmission: 1.0,
            ..AcquisitionConfig::default()
        };
        let image = raster_scan(
            &map,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            DelayConvention::OpticalPath,
        )
        .unwrap();
        assert_eq!(image.failure_counts().empty, 12);
    }

    #[test]
    fn scan_rejects_detuning_too_fine_for_the_sample() {
        // A 40 um step spans far more than the 7.4 THz half-period.
        let mut map = SampleMap::uniform(2, 2, 0.0, 1.58);
        map.heights_m[0] = 40e-6;
        let params = InterferenceParams::default();
        let config = quick_config(1000.0, 1);
        let err = raster_scan(
            &map,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            DelayConvention::OpticalPath,
        );
        assert!(err.is_err());
    }

    #[test]
    fn recovered_step_is_invariant_under_substrate_shift() {
        // Shifts that keep both levels on a monotone fringe flank: a small
        // offset and one full fringe period (which also walks the branch index).
        let params = InterferenceParams::default();
        let config = quick_config(4000.0, 777);
        let step = 4.6e-6;
        let mut sigmas = Vec::new();
        let mut steps = Vec::new();
        for substrate in [0.0, 8e-15, 1.0 / 7.4e12] {
            let mut map = SampleMap::uniform(12, 8, 0.0, 1.58);
            let t_step = map.conversion(DelayConvention::OpticalPath).thickness_to_delay(step);
            map.substrate_delay_s = quadrature_base_delay(7.4e12, t_step) + substrate;
            for x in 0..6 {
                for y in 0..8 {
                    map.heights_m[y * 12 + x] = step;
                }
            }
            let image = raster_scan(
                &map,
                &params,
                &config,
                &DetectorBank::default(),
                &PhaseNoiseModel::none(),
                DelayConvention::OpticalPath,
            )
            .unwrap();
            let depths = image.depth_matrix();
            let film: Vec<f64> = (0..96).filter(|k| k % 12 < 6).map(|k| depths[k]).collect();
            let bare: Vec<f64> = (0..96).filter(|k| k % 12 >= 6).map(|k| depths[k]).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            steps.push(mean(&film) - mean(&bare));
            sigmas.push(two_step_precision_values(&film, &bare).unwrap() / (48.0f64).sqrt());
        }
        for k in 1..steps.len() {
            let combined = (sigmas[0].powi(2) + sigmas[k].powi(2)).sqrt();
            assert!(
                (steps[0] - steps[k]).abs() <= 4.0 * combined,
                "steps {steps:?} differ beyond noise {combined}"
            );
        }
    }

    #[test]
    fn flat_scan_bias_is_small_at_scale() {
        // Estimator bias over many pixels stays under a tenth of the
        // per-pixel standard deviation.
        let map = SampleMap {
            substrate_delay_s: 0.25 / 7.4e12,
            ..SampleMap::uniform(100, 100, 0.0, 1.58)
        };
        let params = InterferenceParams::default();
        let config = quick_config(4000.0, 2024);
        let image = raster_scan(
            &map,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            DelayConvention::OpticalPath,
        )
        .unwrap();
        let depths = image.depth_matrix();
        let n = depths.len() as f64;
        let mean = depths.iter().sum::<f64>() / n;
        let var = depths.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let sigma = var.sqrt();
        assert!(
            mean.abs() < 0.1 * sigma,
            "bias {mean} vs per-pixel sigma {sigma}"
        );
    }

    // --- step experiment ---

    #[test]
    fn higher_detuning_tightens_the_step_histograms() {
        let params = InterferenceParams::default();
        let config = quick_config(4000.0, 99);
        let rows = step_experiment(
            4.6e-6,
            &[3.4e12, 7.4e12],
            120,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            DelayConvention::OpticalPath,
            1.58,
        )
        .unwrap();
        assert!(rows[1].sigma_m < rows[0].sigma_m, "rows: {rows:?}");
        for row in &rows {
            assert_close(row.step_estimate_m, 4.6e-6, 0.1);
            assert_eq!(row.failures, 0);
        }
    }

    #[test]
    fn single_pixel_per_step_cannot_give_a_variance() {
        let params = InterferenceParams::default();
        let config = quick_config(1000.0, 7);
        let err = step_experiment(
            4.6e-6,
            &[7.4e12],
            1,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            DelayConvention::OpticalPath,
            1.58,
        );
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    // --- single-pixel sweep ---

    #[test]
    fn noise_free_sweep_saturates_the_crb() {
        let params = InterferenceParams::default();
        let config = quick_config(4000.0, 5150);
        let conv = DepthConversion::optical_path(1.58);
        let rows = single_pixel_sweep(
            &[7.4e12],
            200,
            50,
            &params,
            &config,
            &DetectorBank::default(),
            &PhaseNoiseModel::none(),
            None,
            &conv,
        )
        .unwrap();
        let row = &rows[0];
        let ratio = row.precision_mean_s / row.crb_sigma_t_s;
        assert!(
            (0.95..1.25).contains(&ratio),
            "sigma/CRB = {ratio}, row {row:?}"
        );
        assert_eq!(row.blocks, 4);
    }

    #[test]
    fn estimator_precision_degrades_monotonically_with_diffusion() {
        let params = InterferenceParams::default();
        let config = quick_config(4000.0, 31415);
        let conv = DepthConversion::optical_path(1.58);
        let mut previous = 0.0;
        for diffusion in [0.01, 0.1, 1.0, 10.0] {
            let rows = single_pixel_sweep(
                &[7.4e12],
                150,
                50,
                &params,
                &config,
                &DetectorBank::default(),
                &PhaseNoiseModel::random_walk(diffusion),
                None,
                &conv,
            )
            .unwrap();
            let sigma = rows[0].precision_mean_s;
            assert!(
                sigma > previous,
                "precision did not degrade: {sigma} after {previous} at D={diffusion}"
            );
            previous = sigma;
        }
    }

    #[test]
    fn quadrature_alignment_stays_nonnegative() {
        for dv in [0.5e12, 3.4e12, 7.4e12, 30.1e12] {
            for step_m in [1e-6, 4.6e-6, 20e-6] {
                let step_delay = 1.58 * step_m / SPEED_OF_LIGHT_M_PER_S;
                if step_delay >= 0.5 / dv {
                    continue;
                }
                let t0 = quadrature_base_delay(dv, step_delay);
                assert!(t0 >= 0.0);
                // Mid point sits on a quadrature: phase = pi/2 mod pi.
                let phase = 2.0 * std::f64::consts::PI * dv * (t0 + 0.5 * step_delay);
                let frac = (phase - std::f64::consts::FRAC_PI_2) / std::f64::consts::PI;
                assert!((frac - frac.round()).abs() < 1e-9, "dv {dv}, step {step_m}");
            }
        }
    }
}
