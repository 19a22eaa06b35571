//! The five subcommands: dip traces, depth imaging, precision sweeps,
//! detector calibration and scan planning. Each writes CSV/JSON artifacts
//! into the configured output directory and returns nothing on success.

use std::path::{Path, PathBuf};

use serde::Serialize;

use homscope::acquisition::{pixel_rng, sample_dip_scan, sample_pixel};
use homscope::detectors::{
    calibrate_tally, klyshko_efficiencies, normalized_p11, normalized_p11_sigma, CalibrationData,
};
use homscope::inference::{plan_coarse_to_fine, DepthConversion, PlannerConfig, ScanPlan};
use homscope::model::{p11, InterferenceParams};
use homscope::scene::{
    make_ket_sample, raster_scan, single_pixel_sweep, step_experiment, FailureCounts, SampleMap,
    DEFAULT_KET_HEIGHT, DEFAULT_KET_WIDTH,
};

use crate::artifacts::{create, ensure_dir, write_json, CsvCell, CsvWriter};
use crate::config::RunConfig;
use crate::CliError;

/// Default test target: the 4.6 um SU-8 step height of the KET sample.
pub const DEFAULT_STEP_HEIGHT_M: f64 = 4.6e-6;

fn from_lib(err: homscope::Error) -> CliError {
    use homscope::Error::*;
    match err {
        InvalidParameter(_) | Format(_) | Json(_) => CliError::Config(err.to_string()),
        Infeasible { best_sigma_m } => CliError::Infeasible(format!(
            "target precision unreachable; best achievable sigma = {best_sigma_m:.3e} m"
        )),
        other => CliError::Data(other.to_string()),
    }
}

/// Interference mode requested on the `dip` command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DipMode {
    FromConfig,
    Degenerate,
    TwoColour,
}

fn dip_params(config: &RunConfig, mode: DipMode) -> InterferenceParams {
    let base = config.params();
    match mode {
        DipMode::FromConfig => base,
        DipMode::Degenerate => InterferenceParams {
            detuning_hz: 0.0,
            degenerate: true,
            ..base
        },
        DipMode::TwoColour => InterferenceParams {
            detuning_hz: config.params.detuning_hz,
            degenerate: false,
            ..base
        },
    }
}

pub fn cmd_dip(
    config: &RunConfig,
    mode: DipMode,
    delay_range_s: Option<(f64, f64)>,
    points: usize,
) -> Result<PathBuf, CliError> {
    if points == 0 {
        return Err(CliError::Config("--points must be at least 1".into()));
    }
    let params = dip_params(config, mode);
    params.validate().map_err(from_lib)?;
    let (lo, hi) = match delay_range_s {
        Some(range) if range.0 < range.1 => range,
        Some(range) => {
            return Err(CliError::Config(format!(
                "empty delay range {},{}",
                range.0, range.1
            )))
        }
        None => match params.fringe_period_delay_s() {
            Some(period) => (-1.5 * period, 1.5 * period),
            None => (-params.temporal_width_s, params.temporal_width_s),
        },
    };
    let delays: Vec<f64> = if points == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect()
    };

    let acquisition = config.acquisition();
    let bank = config.bank();
    let tallies = sample_dip_scan(&delays, &params, &acquisition, &bank, &config.noise())
        .map_err(from_lib)?;

    ensure_dir(&config.output_dir)?;
    let path = config.output_dir.join("dip.csv");
    let mut csv = CsvWriter::open(
        path.clone(),
        &["delay_s", "p11_model", "p11_est", "n11", "n20", "n02", "sigma"],
    )?;
    for (t, raw) in delays.iter().zip(&tallies) {
        let model = p11(*t, &params).map_err(from_lib)?;
        let (estimate, sigma) = match calibrate_tally(raw, &bank.efficiencies, &bank.splitter_ratios) {
            Ok(cal) => match normalized_p11(&cal) {
                Ok(p) => (
                    p,
                    normalized_p11_sigma(raw, &bank.efficiencies, &bank.splitter_ratios)
                        .unwrap_or(f64::NAN),
                ),
                Err(_) => (f64::NAN, f64::NAN),
            },
            Err(e) => return Err(from_lib(e)),
        };
        csv.row(&[
            CsvCell::Float(*t),
            CsvCell::Float(model),
            CsvCell::Float(estimate),
            CsvCell::Int(raw.n11_raw),
            CsvCell::Int(raw.n20_raw),
            CsvCell::Int(raw.n02_raw),
            CsvCell::Float(sigma),
        ])?;
    }
    csv.finish()?;
    Ok(path)
}

/// Deterministic two-means split of the finite depths: cluster centers start
/// at the extremes and relax until stable.
fn two_level_split(depths: &[f64]) -> Option<(f64, f64, Vec<f64>, Vec<f64>)> {
    let finite: Vec<f64> = depths.iter().copied().filter(|d| d.is_finite()).collect();
    if finite.len() < 4 {
        return None;
    }
    let mut lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return None;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let (low_group, high_group): (Vec<f64>, Vec<f64>) =
            finite.iter().partition(|d| **d < mid);
        if low_group.is_empty() || high_group.is_empty() {
            return None;
        }
        let new_lo = low_group.iter().sum::<f64>() / low_group.len() as f64;
        let new_hi = high_group.iter().sum::<f64>() / high_group.len() as f64;
        if new_lo == lo && new_hi == hi {
            break;
        }
        lo = new_lo;
        hi = new_hi;
    }
    let mid = 0.5 * (lo + hi);
    let (low_group, high_group): (Vec<f64>, Vec<f64>) = finite.iter().partition(|d| **d < mid);
    Some((lo, hi, low_group, high_group))
}

#[derive(Debug, Serialize)]
struct ImageSummary<'a> {
    config: &'a RunConfig,
    width_px: usize,
    height_px: usize,
    pixels: FailureCounts,
    /// Depth difference between the two clustered levels (m).
    step_estimate_m: Option<f64>,
    /// Combined two-step precision of the clustered levels (m).
    two_step_sigma_m: Option<f64>,
    cluster_low_m: Option<f64>,
    cluster_high_m: Option<f64>,
    mean_pixel_sigma_m: f64,
}

pub fn cmd_image(config: &RunConfig, sample_arg: Option<&Path>) -> Result<PathBuf, CliError> {
    let params = config.params();
    let map = match sample_arg.or(config.sample.as_deref()) {
        Some(path) => SampleMap::load(path).map_err(|e| CliError::Config(e.to_string()))?,
        None => {
            let mut map = make_ket_sample(
                DEFAULT_STEP_HEIGHT_M,
                1.58,
                DEFAULT_KET_WIDTH,
                DEFAULT_KET_HEIGHT,
            );
            // Straddle the first fringe quadrature, as the stage alignment does.
            if params.fringe_half_period_delay_s().is_some() {
                let step_delay = map
                    .conversion(config.convention)
                    .thickness_to_delay(DEFAULT_STEP_HEIGHT_M);
                let t0 = 0.25 / params.detuning_hz - 0.5 * step_delay;
                map.substrate_delay_s = t0.max(0.0);
            }
            map
        }
    };

    let image = raster_scan(
        &map,
        &params,
        &config.acquisition(),
        &config.bank(),
        &config.noise(),
        config.convention,
    )
    .map_err(from_lib)?;

    ensure_dir(&config.output_dir)?;
    image
        .write_depth_csv(create(&config.output_dir.join("depth.csv"))?)
        .map_err(from_lib)?;
    image
        .write_sigma_csv(create(&config.output_dir.join("sigma.csv"))?)
        .map_err(from_lib)?;
    image
        .write_fringe_csv(create(&config.output_dir.join("fringe.csv"))?)
        .map_err(from_lib)?;
    image
        .write_pgm16(create(&config.output_dir.join("depth.pgm"))?)
        .map_err(from_lib)?;

    let depths = image.depth_matrix();
    let sigmas = image.sigma_matrix();
    let finite_sigmas: Vec<f64> = sigmas.iter().copied().filter(|s| s.is_finite()).collect();
    let mean_sigma = if finite_sigmas.is_empty() {
        f64::NAN
    } else {
        finite_sigmas.iter().sum::<f64>() / finite_sigmas.len() as f64
    };
    let split = two_level_split(&depths);
    let summary = ImageSummary {
        config,
        width_px: image.width_px,
        height_px: image.height_px,
        pixels: image.failure_counts(),
        step_estimate_m: split.as_ref().map(|(lo, hi, _, _)| hi - lo),
        two_step_sigma_m: split.as_ref().and_then(|(_, _, low, high)| {
            homscope::inference::two_step_precision_values(low, high).ok()
        }),
        cluster_low_m: split.as_ref().map(|s| s.0),
        cluster_high_m: split.as_ref().map(|s| s.1),
        mean_pixel_sigma_m: mean_sigma,
    };
    let path = config.output_dir.join("summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

/// Precision experiment selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    Step,
    SinglePixel,
}

pub struct PrecisionArgs {
    pub mode: PrecisionMode,
    pub detunings_hz: Vec<f64>,
    pub pixels_per_step: usize,
    pub repeats: usize,
    pub block_size: usize,
    pub step_height_m: f64,
    pub refractive_index: f64,
}

pub fn cmd_precision(config: &RunConfig, args: &PrecisionArgs) -> Result<PathBuf, CliError> {
    if args.detunings_hz.is_empty() {
        return Err(CliError::Config("at least one detuning is required".into()));
    }
    let params = config.params();
    let acquisition = config.acquisition();
    let bank = config.bank();
    let noise = config.noise();
    let conv = DepthConversion {
        refractive_index: args.refractive_index,
        medium_index: 1.0,
        convention: config.convention,
    };

    ensure_dir(&config.output_dir)?;
    let path = config.output_dir.join("precision.csv");
    let mut csv = CsvWriter::open(
        path.clone(),
        &[
            "detuning_hz",
            "n_fisher_total_per_s2",
            "sigma_t_s",
            "sigma_d_m",
            "crb_sigma_t_s",
            "blocks",
        ],
    )?;

    match args.mode {
        PrecisionMode::Step => {
            let rows = step_experiment(
                args.step_height_m,
                &args.detunings_hz,
                args.pixels_per_step,
                &params,
                &acquisition,
                &bank,
                &noise,
                config.convention,
                args.refractive_index,
            )
            .map_err(from_lib)?;
            for (k, row) in rows.iter().enumerate() {
                let sigma_t = row.sigma_m / conv.depth_per_delay();
                let crb_sigma_t = row.crb_sigma_m / conv.depth_per_delay();
                let total_information = crb_sigma_t.powi(-2);
                csv.row(&[
                    CsvCell::Float(row.detuning_hz),
                    CsvCell::Float(total_information),
                    CsvCell::Float(sigma_t),
                    CsvCell::Float(row.sigma_m),
                    CsvCell::Float(crb_sigma_t),
                    CsvCell::Int(row.estimates_s1_m.len() as u64),
                ])?;
                let mut hist = CsvWriter::open(
                    config.output_dir.join(format!("hist_step_{k:02}.csv")),
                    &["estimate_s1_m", "estimate_s2_m"],
                )?;
                let n = row.estimates_s1_m.len().max(row.estimates_s2_m.len());
                for i in 0..n {
                    hist.row(&[
                        CsvCell::Float(row.estimates_s1_m.get(i).copied().unwrap_or(f64::NAN)),
                        CsvCell::Float(row.estimates_s2_m.get(i).copied().unwrap_or(f64::NAN)),
                    ])?;
                }
                hist.finish()?;
            }
        }
        PrecisionMode::SinglePixel => {
            let rows = single_pixel_sweep(
                &args.detunings_hz,
                args.repeats,
                args.block_size,
                &params,
                &acquisition,
                &bank,
                &noise,
                config.noise_scaling(),
                &conv,
            )
            .map_err(from_lib)?;
            for (k, row) in rows.iter().enumerate() {
                csv.row(&[
                    CsvCell::Float(row.detuning_hz),
                    CsvCell::Float(row.total_information),
                    CsvCell::Float(row.precision_mean_s),
                    CsvCell::Float(row.precision_mean_m),
                    CsvCell::Float(row.crb_sigma_t_s),
                    CsvCell::Int(row.blocks as u64),
                ])?;
                let mut hist = CsvWriter::open(
                    config.output_dir.join(format!("hist_single_{k:02}.csv")),
                    &["delay_estimate_s"],
                )?;
                for est in &row.estimates_s {
                    hist.row(&[CsvCell::Float(*est)])?;
                }
                hist.finish()?;
            }
        }
    }
    csv.finish()?;
    Ok(path)
}

pub fn cmd_calibrate(config: &RunConfig, pairs: u64) -> Result<PathBuf, CliError> {
    if pairs == 0 {
        return Err(CliError::Data("--pairs must be positive".into()));
    }
    let params = config.params();
    let bank = config.bank();
    let mut acquisition = config.acquisition();
    // Budget the requested pair count through the configured rate.
    acquisition.dwell_s = pairs as f64 / acquisition.pair_rate_hz;

    // Large delay: far outside the envelope, no interference.
    let t_far = 20.0 * params.temporal_width_s;
    let mut rng = pixel_rng(acquisition.seed, u64::from_le_bytes(*b"calibrat"));
    let run = sample_pixel(t_far, &params, &acquisition, &bank, &config.noise(), &mut rng)
        .map_err(from_lib)?;
    let mut eta = klyshko_efficiencies(&run.cross_coincidences(), &run.singles).map_err(from_lib)?;

    // The heralding ratio estimates efficiencies up to a common scale per
    // arm; normalize each arm to its best channel so the document carries
    // scale-free relative efficiencies (their scale cancels in the
    // bunching-normalized estimate).
    for arm in 0..2 {
        let peak = eta[arm * 4..arm * 4 + 4]
            .iter()
            .copied()
            .fold(0.0f64, f64::max);
        if peak > 0.0 {
            for channel in eta[arm * 4..arm * 4 + 4].iter_mut() {
                *channel /= peak;
            }
        }
    }

    ensure_dir(&config.output_dir)?;
    let path = config.output_dir.join("calibration.json");
    let document = CalibrationData {
        efficiencies: eta,
        splitter_ratios: bank.splitter_ratios,
    };
    std::fs::write(&path, document.to_json())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

#[derive(Debug, Serialize)]
struct PlanDocument<'a> {
    config: &'a RunConfig,
    prior_depth_range_m: f64,
    target_sigma_m: f64,
    refractive_index: f64,
    plan: ScanPlan,
}

pub fn cmd_plan(
    config: &RunConfig,
    prior_range_m: f64,
    target_sigma_m: f64,
    refractive_index: f64,
) -> Result<PathBuf, CliError> {
    let conv = DepthConversion {
        refractive_index,
        medium_index: 1.0,
        convention: config.convention,
    };
    let planner = PlannerConfig {
        pair_rate_hz: config.acquisition.pair_rate_hz,
        ..PlannerConfig::default()
    };
    let plan = plan_coarse_to_fine(prior_range_m, target_sigma_m, &config.params(), &conv, &planner)
        .map_err(from_lib)?;

    ensure_dir(&config.output_dir)?;
    let path = config.output_dir.join("plan.json");
    write_json(
        &path,
        &PlanDocument {
            config,
            prior_depth_range_m: prior_range_m,
            target_sigma_m,
            refractive_index,
            plan,
        },
    )?;
    Ok(path)
}
