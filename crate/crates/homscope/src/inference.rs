//! Fisher information, Cramer-Rao bounds, maximum-likelihood delay
//! estimation and precision statistics.
//!
//! With the bunching outcomes tied by `P20 = P02 = (1 - P11)/2`, the
//! per-pair Fisher information about the delay reduces to
//!
//! ```text
//! F(t) = sum_i P_i'(t)^2 / P_i(t) = P11'(t)^2 / (P11 (1 - P11))
//! ```
//!
//! and `N` detected pairs bound any unbiased estimator by
//! `sigma_t >= 1/sqrt(N F)`. The delay estimator is the multinomial MLE:
//! a dense grid over the search window followed by golden-section
//! refinement (the likelihood is non-smooth at the envelope kink, so
//! derivative-based optimizers are avoided), with the per-pixel standard
//! error taken from the observed information at the optimum.

use serde::{Deserialize, Serialize};

use crate::detectors::CoincidenceTally;
use crate::error::{Error, Result};
use crate::model::{
    dp11_dt_unchecked, p11_unchecked, DelayConvention, InterferenceParams, SPEED_OF_LIGHT_M_PER_S,
};

/// Fisher information per detected pair, or the divergent limit at a
/// probability zero with nonvanishing slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FisherValue {
    Finite(f64),
    Unbounded,
}

impl FisherValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            FisherValue::Finite(f) => Some(*f),
            FisherValue::Unbounded => None,
        }
    }
}

/// Per-pair Fisher information about the delay, analytic.
pub fn fisher_information(t_s: f64, params: &InterferenceParams) -> Result<FisherValue> {
    params.validate()?;
    let u = 2.0 * t_s / params.temporal_width_s;
    if u.abs() >= 1.0 {
        return Ok(FisherValue::Finite(0.0)); // flat outside the envelope
    }
    let p = p11_unchecked(t_s, params);
    let dp = dp11_dt_unchecked(t_s, params);
    let support = p * (1.0 - p);
    if support <= f64::MIN_POSITIVE {
        // An outcome probability hits zero; the information diverges there.
        return Ok(FisherValue::Unbounded);
    }
    Ok(FisherValue::Finite(dp * dp / support))
}

/// Central-finite-difference cross-check of [`fisher_information`], summing
/// `(dP_i/dt)^2 / P_i` over all three outcomes explicitly.
pub fn fisher_information_fd(t_s: f64, params: &InterferenceParams, step_s: f64) -> Result<f64> {
    params.validate()?;
    if !(step_s > 0.0) || !step_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {step_s}"
        )));
    }
    let p_plus = p11_unchecked(t_s + step_s, params);
    let p_minus = p11_unchecked(t_s - step_s, params);
    let p = p11_unchecked(t_s, params);
    let d11 = (p_plus - p_minus) / (2.0 * step_s);
    let dbunch = 0.5 * (-d11); // each bunching outcome carries half the flow
    let bunch = 0.5 * (1.0 - p);
    Ok(d11 * d11 / p + 2.0 * dbunch * dbunch / bunch)
}

/// A sensible default finite-difference step for the model's delay scales.
pub fn fisher_fd_default_step(params: &InterferenceParams) -> f64 {
    let envelope_scale = 0.5 * params.temporal_width_s;
    let fringe_scale = if params.detuning_hz > 0.0 {
        0.25 / params.detuning_hz
    } else {
        envelope_scale
    };
    1e-4 * envelope_scale.min(fringe_scale)
}

/// How a delay converts to sample thickness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthConversion {
    pub refractive_index: f64,
    pub medium_index: f64,
    pub convention: DelayConvention,
}

impl DepthConversion {
    pub fn optical_path(refractive_index: f64) -> Self {
        Self {
            refractive_index,
            medium_index: 1.0,
            convention: DelayConvention::OpticalPath,
        }
    }

    fn index_contrast(&self) -> f64 {
        match self.convention {
            DelayConvention::OpticalPath => self.refractive_index,
            DelayConvention::DifferentialIndex => self.refractive_index - self.medium_index,
        }
    }

    /// Thickness per unit delay (m/s).
    pub fn depth_per_delay(&self) -> f64 {
        SPEED_OF_LIGHT_M_PER_S / self.index_contrast()
    }

    pub fn delay_to_thickness(&self, delay_s: f64) -> f64 {
        delay_s * self.depth_per_delay()
    }

    pub fn thickness_to_delay(&self, thickness_m: f64) -> f64 {
        thickness_m / self.depth_per_delay()
    }
}

/// Information regime of a [`FisherReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InformationRegime {
    /// Finite nonzero information; the CRB fields are meaningful.
    Regular,
    /// Zero information: sigma is infinite.
    Uninformative,
    /// Divergent information (a probability zero): sigma collapses to 0.
    Degenerate,
}

/// Fisher information and Cramer-Rao bound at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    /// F(t) per detected pair (s^-2).
    pub fisher_per_pair: f64,
    /// Detected pair count N.
    pub n_pairs: f64,
    /// N * F (s^-2).
    pub total_information: f64,
    /// 1/sqrt(N F) (s).
    pub crb_sigma_t_s: f64,
    /// CRB mapped to thickness via the active delay convention (m).
    pub crb_sigma_d_m: f64,
    pub regime: InformationRegime,
}

impl FisherReport {
    /// Report built directly from a total information `N*F` (s^-2).
    pub fn from_total_information(total_information: f64, n_pairs: f64, conv: &DepthConversion) -> Self {
        if total_information <= 0.0 {
            return Self {
                fisher_per_pair: 0.0,
                n_pairs,
                total_information: 0.0,
                crb_sigma_t_s: f64::INFINITY,
                crb_sigma_d_m: f64::INFINITY,
                regime: InformationRegime::Uninformative,
            };
        }
        let sigma_t = total_information.sqrt().recip();
        Self {
            fisher_per_pair: total_information / n_pairs,
            n_pairs,
            total_information,
            crb_sigma_t_s: sigma_t,
            crb_sigma_d_m: conv.depth_per_delay() * sigma_t,
            regime: InformationRegime::Regular,
        }
    }
}

/// Fisher information and CRB for `n_pairs` detected pairs at delay `t`.
pub fn crb_report(
    t_s: f64,
    params: &InterferenceParams,
    n_pairs: f64,
    conv: &DepthConversion,
) -> Result<FisherReport> {
    if !(n_pairs >= 1.0) || !n_pairs.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "pair count must be >= 1, got {n_pairs}"
        )));
    }
    match fisher_information(t_s, params)? {
        FisherValue::Unbounded => Ok(FisherReport {
            fisher_per_pair: f64::INFINITY,
            n_pairs,
            total_information: f64::INFINITY,
            crb_sigma_t_s: 0.0,
            crb_sigma_d_m: 0.0,
            regime: InformationRegime::Degenerate,
        }),
        FisherValue::Finite(f) if f <= 0.0 => Ok(FisherReport {
            fisher_per_pair: 0.0,
            n_pairs,
            total_information: 0.0,
            crb_sigma_t_s: f64::INFINITY,
            crb_sigma_d_m: f64::INFINITY,
            regime: InformationRegime::Uninformative,
        }),
        FisherValue::Finite(f) => {
            let total = n_pairs * f;
            let sigma_t = total.sqrt().recip();
            Ok(FisherReport {
                fisher_per_pair: f,
                n_pairs,
                total_information: total,
                crb_sigma_t_s: sigma_t,
                crb_sigma_d_m: conv.depth_per_delay() * sigma_t,
                regime: InformationRegime::Regular,
            })
        }
    }
}

/// Closed delay interval searched by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayWindow {
    pub lo_s: f64,
    pub hi_s: f64,
}

impl DelayWindow {
    pub fn new(lo_s: f64, hi_s: f64) -> Result<Self> {
        if !(lo_s.is_finite() && hi_s.is_finite()) || lo_s >= hi_s {
            return Err(Error::InvalidParameter(format!(
                "invalid delay window [{lo_s}, {hi_s}]"
            )));
        }
        Ok(Self { lo_s, hi_s })
    }

    pub fn width(&self) -> f64 {
        self.hi_s - self.lo_s
    }

    fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.lo_s, self.hi_s)
    }
}

/// Knobs of the maximum-likelihood search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    /// Grid step; defaults to one four-hundredth of the fringe half-period
    /// (or of the window for degenerate photons).
    pub grid_step_s: Option<f64>,
    /// Fringe branch to search when the window spans several fringes.
    /// Branch k covers delays within a half-period centred on k/(2 dv).
    pub fringe_hint: Option<i64>,
    /// Refinement stops when the bracket shrinks below this fraction of the
    /// grid scale.
    pub refine_rel_tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            grid_step_s: None,
            fringe_hint: None,
            refine_rel_tol: 1e-4,
        }
    }
}

/// One pixel's delay estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelEstimate {
    /// Estimated delay (s).
    pub delay_s: f64,
    /// Standard error from the observed information (s).
    pub sigma_s: f64,
    /// Delay mapped to thickness via the active convention (m).
    pub depth_m: f64,
    /// Signed fringe branch of the estimate (0 for degenerate photons).
    pub fringe_index: i64,
    /// Log-likelihood at the optimum.
    pub log_likelihood: f64,
    /// Effective (calibrated) pair count behind the estimate.
    pub n_pairs_used: f64,
}

struct LogLikelihood<'a> {
    n11: f64,
    n_bunch: f64,
    params: &'a InterferenceParams,
}

impl LogLikelihood<'_> {
    fn eval(&self, t: f64) -> f64 {
        let p = p11_unchecked(t, self.params);
        let mut ll = 0.0;
        if self.n11 > 0.0 {
            ll += if p > 0.0 { self.n11 * p.ln() } else { f64::NEG_INFINITY };
        }
        if self.n_bunch > 0.0 {
            let b = 0.5 * (1.0 - p);
            ll += if b > 0.0 { self.n_bunch * b.ln() } else { f64::NEG_INFINITY };
        }
        ll
    }
}

const GOLDEN_RATIO: f64 = 0.618_033_988_749_894_8;

/// Golden-section maximization of `f` on [a, b] to bracket width `tol`.
fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut x1 = b - GOLDEN_RATIO * (b - a);
    let mut x2 = a + GOLDEN_RATIO * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a) > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN_RATIO * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN_RATIO * (b - a);
            f1 = f(x1);
        }
    }
    0.5 * (a + b)
}

/// Maximum-likelihood delay estimate from a calibrated tally.
pub fn mle_delay(
    tally: &CoincidenceTally,
    params: &InterferenceParams,
    window: DelayWindow,
    conv: &DepthConversion,
    opts: &MleOptions,
) -> Result<PixelEstimate> {
    params.validate()?;
    let n11 = tally.n11_cal;
    let n20 = tally.n20_cal;
    let n02 = tally.n02_cal;
    let total = n11 + n20 + n02;
    if !(total >= 1.0) {
        return Err(Error::EmptyTally);
    }
    // All counts piled into a single outcome category carry no usable shape.
    if n11 == total || n20 == total || n02 == total {
        return Err(Error::NonIdentifiable);
    }

    let half_period = params.fringe_half_period_delay_s();
    let mut search = window;
    if let Some(hp) = half_period {
        if window.width() > hp * (1.0 + 1e-9) {
            match opts.fringe_hint {
                Some(k) => {
                    let center = k as f64 * hp;
                    let lo = (center - 0.5 * hp).max(window.lo_s);
                    let hi = (center + 0.5 * hp).min(window.hi_s);
                    search = DelayWindow::new(lo, hi)?;
                }
                None => {
                    return Err(Error::Ambiguous {
                        candidates: candidate_optima(tally, params, window, opts)?,
                    });
                }
            }
        }
    }

    let ll = LogLikelihood { n11, n_bunch: n20 + n02, params };
    let scale = match half_period {
        Some(hp) => hp.min(search.width()),
        None => search.width(),
    };
    let step = opts.grid_step_s.unwrap_or(scale / 400.0);
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("grid step must be positive".into()));
    }

    let n_points = (search.width() / step).ceil() as usize + 1;
    let mut best_idx = 0;
    let mut best_ll = f64::NEG_INFINITY;
    let mut min_ll = f64::INFINITY;
    for k in 0..n_points {
        let t = search.clamp(search.lo_s + k as f64 * step);
        let v = ll.eval(t);
        if v > best_ll {
            best_ll = v;
            best_idx = k;
        }
        if v < min_ll {
            min_ll = v;
        }
    }
    if !best_ll.is_finite() {
        return Err(Error::NonIdentifiable);
    }
    if (best_ll - min_ll).abs() <= 1e-9 * (1.0 + best_ll.abs()) {
        return Err(Error::NonIdentifiable); // flat likelihood, e.g. alpha = 0
    }

    let lo = search.clamp(search.lo_s + (best_idx as f64 - 1.0) * step);
    let hi = search.clamp(search.lo_s + (best_idx as f64 + 1.0) * step);
    let tol = opts.refine_rel_tol * scale;
    let t_hat = golden_section_max(|t| ll.eval(t), lo, hi, tol);
    let ll_hat = ll.eval(t_hat);

    // Observed information from the second difference of the log-likelihood.
    let h = 1e-3 * scale;
    let ll_plus = ll.eval(search.clamp(t_hat + h));
    let ll_minus = ll.eval(search.clamp(t_hat - h));
    let observed_info = -(ll_plus - 2.0 * ll_hat + ll_minus) / (h * h);
    if !observed_info.is_finite() || observed_info <= 0.0 {
        return Err(Error::NonIdentifiable);
    }
    let sigma = observed_info.sqrt().recip();

    let fringe_index = match half_period {
        Some(hp) => (t_hat / hp).round() as i64,
        None => 0,
    };

    Ok(PixelEstimate {
        delay_s: t_hat,
        sigma_s: sigma,
        depth_m: conv.delay_to_thickness(t_hat),
        fringe_index,
        log_likelihood: ll_hat,
        n_pairs_used: total,
    })
}

/// Refined local maxima of the likelihood over a multi-fringe window,
/// reported with an [`Error::Ambiguous`].
fn candidate_optima(
    tally: &CoincidenceTally,
    params: &InterferenceParams,
    window: DelayWindow,
    opts: &MleOptions,
) -> Result<Vec<f64>> {
    let ll = LogLikelihood {
        n11: tally.n11_cal,
        n_bunch: tally.n20_cal + tally.n02_cal,
        params,
    };
    let hp = params
        .fringe_half_period_delay_s()
        .expect("candidates only requested for two-colour params");
    let step = opts.grid_step_s.unwrap_or(hp / 400.0);
    let n_points = (window.width() / step).ceil() as usize + 1;
    let values: Vec<(f64, f64)> = (0..n_points)
        .map(|k| {
            let t = window.clamp(window.lo_s + k as f64 * step);
            (t, ll.eval(t))
        })
        .collect();
    let tol = opts.refine_rel_tol * hp;
    let mut candidates = Vec::new();
    for k in 1..values.len().saturating_sub(1) {
        if values[k].1 >= values[k - 1].1 && values[k].1 >= values[k + 1].1 && values[k].1.is_finite() {
            let refined = golden_section_max(|t| ll.eval(t), values[k - 1].0, values[k + 1].0, tol);
            if candidates
                .iter()
                .all(|c: &f64| (c - refined).abs() > 0.25 * hp)
            {
                candidates.push(refined);
            }
        }
    }
    candidates.sort_by(|a, b| ll.eval(*b).partial_cmp(&ll.eval(*a)).unwrap());
    candidates.truncate(8);
    Ok(candidates)
}

/// Combined precision of two independent estimate groups,
/// `sigma = sqrt(var(S1) + var(S2))` with unbiased sample variances of the
/// depth values (m).
pub fn two_step_precision(s1: &[PixelEstimate], s2: &[PixelEstimate]) -> Result<f64> {
    let d1: Vec<f64> = s1.iter().map(|e| e.depth_m).collect();
    let d2: Vec<f64> = s2.iter().map(|e| e.depth_m).collect();
    two_step_precision_values(&d1, &d2)
}

/// [`two_step_precision`] on raw depth values.
pub fn two_step_precision_values(s1: &[f64], s2: &[f64]) -> Result<f64> {
    if s1.len() < 2 || s2.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "two-step precision needs >= 2 estimates per group, got {} and {}",
            s1.len(),
            s2.len()
        )));
    }
    Ok((sample_variance(s1) + sample_variance(s2)).sqrt())
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Block statistics of repeated estimates: the values are split into
/// consecutive blocks of `block_size`, and the mean of the per-block
/// standard deviations is the reported precision, with the standard
/// deviation across blocks as its error bar.
pub fn block_precision(values: &[f64], block_size: usize) -> Result<(f64, f64)> {
    if block_size < 2 {
        return Err(Error::InvalidParameter(format!(
            "block size must be >= 2, got {block_size}"
        )));
    }
    if !values.len().is_multiple_of(block_size) {
        return Err(Error::InsufficientData(format!(
            "{} values do not divide into blocks of {block_size}",
            values.len()
        )));
    }
    let n_blocks = values.len() / block_size;
    if n_blocks < 2 {
        return Err(Error::InsufficientData(format!(
            "need >= 2 blocks, got {n_blocks}"
        )));
    }
    let block_sds: Vec<f64> = values
        .chunks_exact(block_size)
        .map(|block| sample_variance(block).sqrt())
        .collect();
    let mean = block_sds.iter().sum::<f64>() / n_blocks as f64;
    let spread = sample_variance(&block_sds).sqrt();
    Ok((mean, spread))
}

/// One pass of a coarse-to-fine acquisition plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPass {
    pub detuning_hz: f64,
    /// Detected pairs budgeted per pixel.
    pub n_pairs: u64,
    /// Dwell implied by the planner's pair rate (s).
    pub dwell_s: f64,
    /// CRB-level depth precision expected from this pass (m).
    pub expected_sigma_m: f64,
    /// Unambiguous depth range of this pass's fringe (m).
    pub half_period_depth_m: f64,
}

/// Ordered list of passes from coarse mapping to the finest detuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub passes: Vec<ScanPass>,
    /// Depth precision of the final pass (m).
    pub final_sigma_m: f64,
}

/// Planner constraints and menu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Detunings the source can be tuned to (Hz), any order.
    pub available_detunings_hz: Vec<f64>,
    /// Largest per-pixel pair budget for a single pass.
    pub max_pairs_per_pass: u64,
    /// Smallest pass worth scheduling.
    pub min_pairs_per_pass: u64,
    /// Detected pair rate used to convert budgets to dwell (Hz).
    pub pair_rate_hz: f64,
    /// Safety factor between a pass's unambiguous range and the delay span
    /// it must cover.
    pub coverage_margin: f64,
    pub max_passes: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            // Octave ladder around the experiment's 3.4/7.4 THz operating
            // points, up to the 30.1 THz tuning limit.
            available_detunings_hz: vec![0.85e12, 1.7e12, 3.4e12, 7.4e12, 14.8e12, 30.1e12],
            max_pairs_per_pass: 10_000,
            min_pairs_per_pass: 100,
            pair_rate_hz: 2e5,
            coverage_margin: 2.0,
            max_passes: 6,
        }
    }
}

/// Mean Fisher information per pair over a delay window, by grid average.
/// Divergent points are skipped; the mean is what a pixel whose delay lands
/// uniformly in the window can expect.
fn mean_fisher(params: &InterferenceParams, lo: f64, hi: f64) -> f64 {
    const GRID: usize = 512;
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..GRID {
        let t = lo + (hi - lo) * (k as f64 + 0.5) / GRID as f64;
        if let Ok(FisherValue::Finite(f)) = fisher_information(t, params) {
            sum += f;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Plan a coarse-to-fine sequence of detunings and pair budgets that
/// localizes a depth within `prior_depth_range_m` down to `target_sigma_m`.
///
/// Each pass uses the largest available detuning whose unambiguous depth
/// range still covers (with margin) the uncertainty left by the previous
/// pass; its pair budget is sized from the CRB at the pass's expected
/// operating window.
pub fn plan_coarse_to_fine(
    prior_depth_range_m: f64,
    target_sigma_m: f64,
    params: &InterferenceParams,
    conv: &DepthConversion,
    cfg: &PlannerConfig,
) -> Result<ScanPlan> {
    if !(target_sigma_m > 0.0) || !target_sigma_m.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "target sigma must be positive, got {target_sigma_m}"
        )));
    }
    if !(prior_depth_range_m > 0.0) || !prior_depth_range_m.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "prior depth range must be positive, got {prior_depth_range_m}"
        )));
    }
    if cfg.available_detunings_hz.is_empty() {
        return Err(Error::InvalidParameter("no available detunings".into()));
    }
    params.validate()?;

    let mut menu = cfg.available_detunings_hz.clone();
    menu.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let depth_per_delay = conv.depth_per_delay();
    let target_sigma_t = target_sigma_m / depth_per_delay;

    let mut passes: Vec<ScanPass> = Vec::new();
    let mut uncertainty_m = prior_depth_range_m;
    let mut best_sigma = f64::INFINITY;

    loop {
        // Largest detuning whose half-period covers the current uncertainty
        // with margin.
        let needed_delay_span = cfg.coverage_margin * uncertainty_m / depth_per_delay;
        let detuning = menu
            .iter()
            .copied()
            .rfind(|dv| 0.5 / dv >= needed_delay_span);
        let detuning = match detuning {
            Some(d) => d,
            None => {
                return Err(Error::Infeasible { best_sigma_m: best_sigma });
            }
        };
        if let Some(last) = passes.last() {
            if detuning <= last.detuning_hz {
                // No finer fringe can be unlocked; the plan has stalled.
                return Err(Error::Infeasible { best_sigma_m: best_sigma });
            }
        }

        let pass_params = InterferenceParams {
            detuning_hz: detuning,
            degenerate: false,
            ..*params
        };
        // Representative delay window of this pass: the full prior span for
        // the opening pass, a quadrature-centred +-5 sigma window afterwards.
        let (lo, hi) = if passes.is_empty() {
            (0.0, needed_delay_span)
        } else {
            // Refine passes are stage-biased so the posterior sits at the
            // first quadrature point.
            let center = 0.25 / detuning;
            let half = uncertainty_m / depth_per_delay;
            (center - half, center + half)
        };
        let fisher = mean_fisher(&pass_params, lo, hi);
        if fisher <= 0.0 {
            return Err(Error::Infeasible { best_sigma_m: best_sigma });
        }

        let pairs_needed = (1.0 / (fisher * target_sigma_t * target_sigma_t)).ceil();
        let n_pairs = (pairs_needed as u64)
            .clamp(cfg.min_pairs_per_pass, cfg.max_pairs_per_pass);
        let sigma_t = (n_pairs as f64 * fisher).sqrt().recip();
        let sigma_m = sigma_t * depth_per_delay;
        best_sigma = best_sigma.min(sigma_m);

        passes.push(ScanPass {
            detuning_hz: detuning,
            n_pairs,
            dwell_s: n_pairs as f64 / cfg.pair_rate_hz,
            expected_sigma_m: sigma_m,
            half_period_depth_m: 0.5 / detuning * depth_per_delay,
        });

        if sigma_m <= target_sigma_m {
            return Ok(ScanPlan {
                passes,
                final_sigma_m: sigma_m,
            });
        }
        if passes.len() >= cfg.max_passes {
            return Err(Error::Infeasible { best_sigma_m: best_sigma });
        }
        uncertainty_m = 5.0 * sigma_m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{pixel_rng, sample_pixel, AcquisitionConfig, PhaseNoiseModel};
    use crate::detectors::{calibrate_tally, DetectorBank};
    use crate::model::outcome_probabilities;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn assert_close(actual: f64, expected: f64, rel: f64) {
        let scale = expected.abs().max(1e-300);
        assert!(
            (actual - expected).abs() <= rel * scale,
            "expected {expected}, got {actual} (rel tol {rel})"
        );
    }

    fn conv() -> DepthConversion {
        DepthConversion::optical_path(1.58)
    }

    // --- Fisher information ---

    #[test]
    fn fisher_matches_hand_value_on_degenerate_dip() {
        // alpha = 1, tau = 100 fs, t = 25 fs: F = (1/tau)^2 / (1/4 * 3/4),
        // frozen from the central-finite-difference oracle (step 1e-3 fs).
        let params = InterferenceParams::degenerate(100e-15, 1.0).unwrap();
        let t = 25e-15;
        let analytic = fisher_information(t, &params).unwrap().finite().unwrap();
        let fd = fisher_information_fd(t, &params, 1e-18).unwrap();
        assert_close(analytic, fd, 1e-9);
        assert_close(analytic * 1e-30, 5.333_333_333_333_334e-4, 1e-9); // fs^-2
    }

    #[test]
    fn zero_visibility_means_zero_information() {
        let params = InterferenceParams::two_colour(7.4e12, 1e-12, 0.0, 0.0).unwrap();
        for t in [0.0, 10e-15, 100e-15, 400e-15] {
            assert_eq!(
                fisher_information(t, &params).unwrap().finite().unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn information_diverges_at_probability_zero() {
        let params = InterferenceParams::degenerate(100e-15, 1.0).unwrap();
        assert_eq!(
            fisher_information(0.0, &params).unwrap(),
            FisherValue::Unbounded
        );
    }

    #[test]
    fn information_vanishes_outside_envelope() {
        let params = InterferenceParams::degenerate(100e-15, 0.9).unwrap();
        assert_eq!(
            fisher_information(60e-15, &params).unwrap().finite().unwrap(),
            0.0
        );
    }

    #[test]
    fn quadrature_information_scales_as_detuning_squared() {
        // Slope of log F vs log dv at the quadrature point, tau large enough
        // that the envelope factor is negligible (dv * tau >> 1).
        let tau = 10e-12;
        let mut logs = Vec::new();
        for dv_thz in [1.0, 2.0, 4.0, 8.0] {
            let dv = dv_thz * 1e12;
            let params = InterferenceParams::two_colour(dv, tau, 0.95, 0.0).unwrap();
            let t_quad = 0.25 / dv;
            let f = fisher_information(t_quad, &params).unwrap().finite().unwrap();
            logs.push((dv.ln(), f.ln()));
        }
        let slope = least_squares_slope(&logs);
        assert!(
            (slope - 2.0).abs() <= 0.15,
            "log-log slope {slope}, expected ~2"
        );
    }

    fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        num / den
    }

    #[test]
    fn analytic_and_finite_difference_agree_on_grid() {
        for (params, t_lo, t_hi) in [
            (
                InterferenceParams::degenerate(100e-15, 0.9).unwrap(),
                -45e-15,
                45e-15,
            ),
            (
                InterferenceParams::two_colour(7.4e12, 1e-12, 0.9, 0.3).unwrap(),
                -450e-15,
                450e-15,
            ),
        ] {
            let step = fisher_fd_default_step(&params);
            for k in 0..500 {
                let t = t_lo + (t_hi - t_lo) * k as f64 / 499.0;
                if t.abs() < 5.0 * step {
                    continue; // envelope kink
                }
                let p = p11_unchecked(t, &params);
                if !(1e-3..=1.0 - 1e-3).contains(&p) {
                    continue; // near probability zeros the FD step dominates
                }
                let analytic = fisher_information(t, &params).unwrap().finite().unwrap();
                let fd = fisher_information_fd(t, &params, step).unwrap();
                let scale = analytic.abs().max(1e-6 / (params.temporal_width_s.powi(2)));
                assert!(
                    (analytic - fd).abs() <= 1e-6 * scale,
                    "t={t}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    // --- CRB report ---

    #[test]
    fn crb_report_reproduces_submicron_operating_point() {
        // N*F = 0.2 fs^-2 -> sigma_t = 2.236 fs -> sigma_d = 0.425 um at n = 1.58.
        let report = FisherReport::from_total_information(0.2e30, 400.0, &conv());
        assert_close(report.crb_sigma_t_s, 2.236_067_977_499_79e-15, 1e-12);
        assert_close(report.crb_sigma_d_m, 4.242_761_488_795_89e-7, 1e-12);
        assert!(report.crb_sigma_d_m < 1e-6, "sub-um claim");
    }

    #[test]
    fn crb_scales_inverse_root_n() {
        let params = InterferenceParams::default();
        let t = 0.25 / params.detuning_hz;
        let r1 = crb_report(t, &params, 1000.0, &conv()).unwrap();
        let r2 = crb_report(t, &params, 2000.0, &conv()).unwrap();
        assert_close(r1.crb_sigma_t_s / r2.crb_sigma_t_s, 2.0f64.sqrt(), 1e-12);
    }

    #[test]
    fn crb_handles_uninformative_and_degenerate_points() {
        let flat = InterferenceParams::two_colour(7.4e12, 1e-12, 0.0, 0.0).unwrap();
        let r = crb_report(10e-15, &flat, 100.0, &conv()).unwrap();
        assert_eq!(r.regime, InformationRegime::Uninformative);
        assert!(r.crb_sigma_t_s.is_infinite());

        let sharp = InterferenceParams::degenerate(100e-15, 1.0).unwrap();
        let r = crb_report(0.0, &sharp, 100.0, &conv()).unwrap();
        assert_eq!(r.regime, InformationRegime::Degenerate);
        assert_eq!(r.crb_sigma_t_s, 0.0);
    }

    // --- MLE ---

    fn exact_tally(t: f64, params: &InterferenceParams, n: f64) -> CoincidenceTally {
        let o = outcome_probabilities(t, params).unwrap();
        CoincidenceTally::from_calibrated(n * o.p11, n * o.p20, n * o.p02, 0.5)
    }

    #[test]
    fn mle_peaks_at_zero_for_perfect_dip_tally() {
        let params = InterferenceParams::two_colour(7.4e12, 1e-12, 1.0, 0.0).unwrap();
        let quarter = 0.25 / 7.4e12;
        let tally = CoincidenceTally::from_calibrated(0.0, 500.0, 500.0, 0.5);
        let window = DelayWindow::new(-quarter, quarter).unwrap();
        let est = mle_delay(&tally, &params, window, &conv(), &MleOptions::default()).unwrap();
        let tol = 1e-4 * params.fringe_half_period_delay_s().unwrap();
        assert!(est.delay_s.abs() <= tol, "estimate {} s", est.delay_s);
    }

    #[test]
    fn mle_recovers_truth_from_expected_counts() {
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let window = DelayWindow::new(0.0, hp).unwrap();
        for frac in [0.15, 0.33, 0.5, 0.71, 0.9] {
            let t_true = frac * hp;
            let tally = exact_tally(t_true, &params, 4000.0);
            let est = mle_delay(&tally, &params, window, &conv(), &MleOptions::default()).unwrap();
            assert!(
                (est.delay_s - t_true).abs() <= 1e-4 * hp,
                "frac {frac}: {} vs {t_true}",
                est.delay_s
            );
            assert!(est.sigma_s > 0.0);
            assert_eq!(est.fringe_index, (t_true / hp).round() as i64);
        }
    }

    #[test]
    fn mle_sigma_tracks_crb_on_expected_counts() {
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let t_true = 0.5 * hp; // quadrature
        let n = 4000.0;
        let tally = exact_tally(t_true, &params, n);
        let window = DelayWindow::new(0.0, hp).unwrap();
        let est = mle_delay(&tally, &params, window, &conv(), &MleOptions::default()).unwrap();
        let crb = crb_report(t_true, &params, n, &conv()).unwrap();
        assert_close(est.sigma_s, crb.crb_sigma_t_s, 0.05);
    }

    #[test]
    fn flat_likelihood_is_non_identifiable() {
        let params = InterferenceParams::two_colour(7.4e12, 1e-12, 0.0, 0.0).unwrap();
        let tally = CoincidenceTally::from_calibrated(500.0, 250.0, 250.0, 0.5);
        let hp = 0.5 / 7.4e12;
        let window = DelayWindow::new(0.0, hp).unwrap();
        match mle_delay(&tally, &params, window, &conv(), &MleOptions::default()) {
            Err(Error::NonIdentifiable) => {}
            other => panic!("expected NonIdentifiable, got {other:?}"),
        }
    }

    #[test]
    fn single_category_tally_is_non_identifiable() {
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let window = DelayWindow::new(0.0, hp).unwrap();
        let tally = CoincidenceTally::from_calibrated(800.0, 0.0, 0.0, 0.5);
        assert!(matches!(
            mle_delay(&tally, &params, window, &conv(), &MleOptions::default()),
            Err(Error::NonIdentifiable)
        ));
        let tally = CoincidenceTally::from_calibrated(0.0, 800.0, 0.0, 0.5);
        assert!(matches!(
            mle_delay(&tally, &params, window, &conv(), &MleOptions::default()),
            Err(Error::NonIdentifiable)
        ));
    }

    #[test]
    fn empty_tally_is_rejected() {
        let params = InterferenceParams::default();
        let window = DelayWindow::new(0.0, 1e-13).unwrap();
        let tally = CoincidenceTally::from_calibrated(0.0, 0.0, 0.0, 0.5);
        assert!(matches!(
            mle_delay(&tally, &params, window, &conv(), &MleOptions::default()),
            Err(Error::EmptyTally)
        ));
    }

    #[test]
    fn wide_window_without_hint_is_ambiguous() {
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let t_true = 0.4 * hp;
        let tally = exact_tally(t_true, &params, 4000.0);
        let window = DelayWindow::new(0.0, 3.0 * hp).unwrap();
        match mle_delay(&tally, &params, window, &conv(), &MleOptions::default()) {
            Err(Error::Ambiguous { candidates }) => {
                assert!(candidates.len() >= 2, "candidates: {candidates:?}");
                assert!(
                    candidates.iter().any(|c| (c - t_true).abs() <= 1e-3 * hp),
                    "true optimum missing from {candidates:?}"
                );
            }
            other => panic!("expected Ambiguous, got {other:?}"),
        }
    }

    #[test]
    fn fringe_hint_resolves_wide_window() {
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let t_true = 2.0 * hp + 0.31 * hp;
        let tally = exact_tally(t_true, &params, 4000.0);
        let window = DelayWindow::new(0.0, 4.0 * hp).unwrap();
        let opts = MleOptions {
            fringe_hint: Some(2),
            ..MleOptions::default()
        };
        let est = mle_delay(&tally, &params, window, &conv(), &opts).unwrap();
        assert!(
            (est.delay_s - t_true).abs() <= 1e-4 * hp,
            "{} vs {t_true}",
            est.delay_s
        );
        assert_eq!(est.fringe_index, 2);
    }

    #[test]
    fn monte_carlo_rmse_stays_near_crb() {
        // 500 trials at N = 4000 pairs, quadrature: RMSE within 20% of the CRB.
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let t_true = 0.5 * hp;
        let n_pairs = 4000.0;
        let config = AcquisitionConfig {
            pair_rate_hz: 8000.0,
            dwell_s: 0.5,
            transmission: 1.0,
            transmission_b: None,
            seed: 4242,
        };
        let bank = DetectorBank::default();
        let window = DelayWindow::new(0.0, hp).unwrap();
        let mut sq_err = 0.0;
        let trials = 500;
        for k in 0..trials {
            let mut rng = pixel_rng(config.seed, k);
            let raw = sample_pixel(t_true, &params, &config, &bank, &PhaseNoiseModel::none(), &mut rng)
                .unwrap();
            let cal = calibrate_tally(&raw, &bank.efficiencies, &bank.splitter_ratios).unwrap();
            let est = mle_delay(&cal, &params, window, &conv(), &MleOptions::default()).unwrap();
            sq_err += (est.delay_s - t_true) * (est.delay_s - t_true);
        }
        let rmse = (sq_err / trials as f64).sqrt();
        let crb = crb_report(t_true, &params, n_pairs, &conv()).unwrap().crb_sigma_t_s;
        assert!(
            (rmse - crb).abs() <= 0.2 * crb,
            "rmse {rmse} vs crb {crb}"
        );
        // The CRB is a lower bound (small slack for Monte Carlo noise).
        assert!(rmse * rmse >= crb * crb * 0.95, "variance beneath the CRB");
    }

    // --- two-step precision ---

    #[test]
    fn two_step_precision_arithmetic() {
        // var 0.09 um^2 + 0.16 um^2 -> 0.5 um.
        let s1 = symmetric_values(10.0e-6, 0.3e-6);
        let s2 = symmetric_values(14.6e-6, 0.4e-6);
        let sigma = two_step_precision_values(&s1, &s2).unwrap();
        assert_close(sigma, 0.5e-6, 1e-12);
    }

    /// Pair with exact sample variance sd^2: {m - a, m + a} has sample
    /// variance 2 a^2, so take a = sd / sqrt(2).
    fn symmetric_values(mean: f64, sd: f64) -> Vec<f64> {
        let a = sd / 2.0f64.sqrt();
        vec![mean - a, mean + a]
    }

    #[test]
    fn two_step_precision_of_constants_is_zero() {
        let s1 = vec![5e-6; 4];
        let s2 = vec![9e-6; 4];
        assert_eq!(two_step_precision_values(&s1, &s2).unwrap(), 0.0);
    }

    #[test]
    fn two_step_precision_invariant_under_common_shift() {
        let s1 = vec![1e-6, 1.3e-6, 0.8e-6, 1.1e-6];
        let s2 = vec![5e-6, 5.4e-6, 4.9e-6, 5.2e-6];
        let a = two_step_precision_values(&s1, &s2).unwrap();
        let shifted: Vec<f64> = s1.iter().map(|v| v + 7e-6).collect();
        let b = two_step_precision_values(&shifted, &s2).unwrap();
        assert_close(a, b, 1e-12);
    }

    #[test]
    fn two_step_needs_two_entries_per_group() {
        assert!(matches!(
            two_step_precision_values(&[1.0], &[1.0, 2.0]),
            Err(Error::InsufficientData(_))
        ));
    }

    // --- block precision ---

    #[test]
    fn block_precision_of_identical_inputs_is_zero() {
        let values = vec![3.3e-6; 500];
        let (mean, spread) = block_precision(&values, 50).unwrap();
        // Zero up to the rounding of the block means.
        assert!(mean.abs() <= 1e-15 * 3.3e-6, "mean {mean}");
        assert!(spread.abs() <= 1e-15 * 3.3e-6, "spread {spread}");
    }

    #[test]
    fn block_precision_recovers_unit_variance() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = pixel_rng(77, 0);
        let values: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
        let (mean, spread) = block_precision(&values, 50).unwrap();
        assert!(
            (mean - 1.0).abs() <= 0.15,
            "block SD mean {mean}, expected ~1"
        );
        assert!(spread > 0.0);
    }

    #[test]
    fn block_precision_rejects_bad_shapes() {
        assert!(block_precision(&[1.0; 49], 50).is_err());
        assert!(block_precision(&[1.0; 50], 50).is_err()); // single block
        assert!(block_precision(&[1.0; 100], 1).is_err());
    }

    // --- planner ---

    #[test]
    fn planner_produces_two_passes_for_wide_prior() {
        let params = InterferenceParams::default();
        let plan = plan_coarse_to_fine(
            40e-6,
            0.5e-6,
            &params,
            &conv(),
            &PlannerConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.passes.len(), 2, "plan: {plan:?}");
        assert!(plan.passes[1].detuning_hz >= 7.4e12, "plan: {plan:?}");
        assert!(plan.final_sigma_m <= 0.5e-6);
        // Every pass's unambiguous range exceeds five sigma of its predecessor.
        for w in plan.passes.windows(2) {
            assert!(w[1].half_period_depth_m > 5.0 * w[0].expected_sigma_m);
        }
        assert!(plan.passes[0].half_period_depth_m > 40e-6);
    }

    #[test]
    fn planner_single_pass_when_prior_fits_fine_fringe() {
        let params = InterferenceParams::default();
        let plan = plan_coarse_to_fine(
            2e-6,
            0.5e-6,
            &params,
            &conv(),
            &PlannerConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.passes.len(), 1, "plan: {plan:?}");
    }

    #[test]
    fn planner_single_pass_when_target_is_loose() {
        let params = InterferenceParams::default();
        let plan = plan_coarse_to_fine(
            40e-6,
            5e-6,
            &params,
            &conv(),
            &PlannerConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.passes.len(), 1, "plan: {plan:?}");
        assert!(plan.final_sigma_m <= 5e-6);
    }

    #[test]
    fn planner_reports_best_achievable_when_infeasible() {
        let params = InterferenceParams::default();
        match plan_coarse_to_fine(40e-6, 1e-9, &params, &conv(), &PlannerConfig::default()) {
            Err(Error::Infeasible { best_sigma_m }) => {
                assert!(best_sigma_m.is_finite());
                assert!(best_sigma_m > 1e-9);
            }
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn planner_rejects_nonsense_targets() {
        let params = InterferenceParams::default();
        assert!(plan_coarse_to_fine(40e-6, 0.0, &params, &conv(), &PlannerConfig::default()).is_err());
        assert!(plan_coarse_to_fine(0.0, 1e-6, &params, &conv(), &PlannerConfig::default()).is_err());
    }

    // --- golden section ---

    #[test]
    fn golden_section_finds_parabola_peak() {
        let peak = golden_section_max(|x| -(x - 0.3) * (x - 0.3), 0.0, 1.0, 1e-10);
        assert_close(peak, 0.3, 1e-8);
    }

    #[test]
    fn estimator_variance_respects_crb_via_simulation() {
        // Cheap sanity: estimator noise never collapses below the bound.
        let params = InterferenceParams::default();
        let hp = params.fringe_half_period_delay_s().unwrap();
        let t_true = 0.35 * hp;
        let n = 1000.0;
        let window = DelayWindow::new(0.0, hp).unwrap();
        let mut rng = pixel_rng(31, 0);
        let o = outcome_probabilities(t_true, &params).unwrap();
        let mut sq = 0.0;
        let trials = 300;
        for _ in 0..trials {
            // Direct multinomial draw (no bank), the leanest generator.
            let mut counts = [0u64; 3];
            for _ in 0..n as u64 {
                let x: f64 = rng.random();
                if x < o.p11 {
                    counts[0] += 1;
                } else if x < o.p11 + o.p20 {
                    counts[1] += 1;
                } else {
                    counts[2] += 1;
                }
            }
            let tally = CoincidenceTally::from_calibrated(
                counts[0] as f64,
                counts[1] as f64,
                counts[2] as f64,
                0.5,
            );
            let est = mle_delay(&tally, &params, window, &conv(), &MleOptions::default()).unwrap();
            sq += (est.delay_s - t_true) * (est.delay_s - t_true);
        }
        let variance = sq / trials as f64;
        let crb = crb_report(t_true, &params, n, &conv()).unwrap();
        assert!(
            variance >= crb.crb_sigma_t_s.powi(2) * 0.95,
            "variance {variance} under CRB {}",
            crb.crb_sigma_t_s.powi(2)
        );
    }
}
