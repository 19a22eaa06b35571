//! Closed-form two-photon interference probabilities and unit conversions.
//!
//! The anti-bunching probability behind everything else in this crate is the
//! triangular Hong-Ou-Mandel dip of an unfiltered type-II pair source,
//!
//! ```text
//! P11(t) = 1/2 [1 - a (1 - |2t/tau|)]                       (degenerate)
//! P11(t) = 1/2 [1 - a (1 - |2t/tau|) cos(2 pi dv t + phi)]  (two-colour)
//! ```
//!
//! valid inside the envelope `|2t/tau| <= 1` and equal to 1/2 outside, where
//! `a` is the interference visibility, `tau` the photon temporal width, `dv`
//! the signal-idler frequency detuning and `phi` the pair phase. Energy
//! conservation fixes the bunching outcomes to `P20 = P02 = (1 - P11)/2`.
//!
//! Delay is always carried in seconds internally; helpers convert to optical
//! path (multiply by c) and to sample thickness via [`DelayConvention`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;

/// How a photon delay maps to sample thickness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DelayConvention {
    /// `t = n d / c`: the full optical path length of the sample.
    #[default]
    OpticalPath,
    /// `t = (n - n_medium) d / c`: excess delay over the displaced medium.
    DifferentialIndex,
}

/// Physical parameters of the interference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceParams {
    /// Signal-idler frequency difference (Hz). Must be 0 when `degenerate`.
    pub detuning_hz: f64,
    /// Photon temporal width tau (s).
    pub temporal_width_s: f64,
    /// Interference visibility in [0, 1].
    pub visibility: f64,
    /// Interferometer phase phi (rad).
    pub phase_rad: f64,
    /// Selects the degenerate triangular dip instead of the two-colour beat.
    pub degenerate: bool,
}

impl Default for InterferenceParams {
    /// Two-colour model at the workhorse operating point: 7.4 THz detuning,
    /// 1 ps photons, visibility 0.95, zero phase. Visibility and width are
    /// stand-in values (instrument-specific) and should be overridden by
    /// measured ones where available.
    fn default() -> Self {
        Self {
            detuning_hz: 7.4e12,
            temporal_width_s: 1e-12,
            visibility: 0.95,
            phase_rad: 0.0,
            degenerate: false,
        }
    }
}

impl InterferenceParams {
    /// Degenerate (zero-detuning) pair parameters.
    pub fn degenerate(temporal_width_s: f64, visibility: f64) -> Result<Self> {
        let p = Self {
            detuning_hz: 0.0,
            temporal_width_s,
            visibility,
            phase_rad: 0.0,
            degenerate: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// Two-colour pair parameters.
    pub fn two_colour(
        detuning_hz: f64,
        temporal_width_s: f64,
        visibility: f64,
        phase_rad: f64,
    ) -> Result<Self> {
        let p = Self {
            detuning_hz,
            temporal_width_s,
            visibility,
            phase_rad,
            degenerate: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility) || !self.visibility.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "visibility must be in [0, 1], got {}",
                self.visibility
            )));
        }
        if !(self.temporal_width_s > 0.0) || !self.temporal_width_s.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temporal width must be positive, got {}",
                self.temporal_width_s
            )));
        }
        if !(self.detuning_hz >= 0.0) || !self.detuning_hz.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "detuning must be nonnegative, got {}",
                self.detuning_hz
            )));
        }
        if self.degenerate && self.detuning_hz != 0.0 {
            return Err(Error::InvalidParameter(
                "degenerate model requires zero detuning".into(),
            ));
        }
        if !self.phase_rad.is_finite() {
            return Err(Error::InvalidParameter("phase must be finite".into()));
        }
        Ok(())
    }

    /// Same parameters with the phase replaced (noise models perturb phi).
    pub fn with_phase(&self, phase_rad: f64) -> Self {
        Self { phase_rad, ..*self }
    }

    /// Beat period in delay units, `1/dv` (two-colour with nonzero detuning only).
    pub fn fringe_period_delay_s(&self) -> Option<f64> {
        (!self.degenerate && self.detuning_hz > 0.0).then(|| 1.0 / self.detuning_hz)
    }

    /// Half the beat period in delay units, `1/(2 dv)`. This is the widest
    /// unambiguous estimation window.
    pub fn fringe_half_period_delay_s(&self) -> Option<f64> {
        self.fringe_period_delay_s().map(|p| 0.5 * p)
    }
}

/// Probabilities of the three coincidence outcomes at one delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    /// One photon in each output arm.
    pub p11: f64,
    /// Both photons in arm C.
    pub p20: f64,
    /// Both photons in arm D.
    pub p02: f64,
}

/// A semi-transparent sample slab.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalSample {
    /// Physical thickness d (m).
    pub thickness_m: f64,
    /// Refractive index n of the slab, >= 1.
    pub refractive_index: f64,
    /// Index of the medium the slab displaces (1.0 for air/vacuum).
    pub medium_index: f64,
}

impl OpticalSample {
    pub fn new(thickness_m: f64, refractive_index: f64) -> Result<Self> {
        let s = Self {
            thickness_m,
            refractive_index,
            medium_index: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thickness_m >= 0.0) || !self.thickness_m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "thickness must be nonnegative, got {}",
                self.thickness_m
            )));
        }
        if !(self.refractive_index >= 1.0) || !self.refractive_index.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "refractive index must be >= 1, got {}",
                self.refractive_index
            )));
        }
        if !(self.medium_index >= 0.0) || !self.medium_index.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "medium index must be nonnegative, got {}",
                self.medium_index
            )));
        }
        Ok(())
    }
}

/// Anti-bunching probability, unchecked kernel shared by both models.
///
/// Callers must hand in validated parameters; hot loops (samplers, grid
/// searches) go through this directly.
#[inline]
pub(crate) fn p11_unchecked(t_s: f64, params: &InterferenceParams) -> f64 {
    let u = 2.0 * t_s / params.temporal_width_s;
    let envelope = 1.0 - u.abs();
    if envelope <= 0.0 {
        return 0.5;
    }
    let modulation = if params.degenerate {
        1.0
    } else {
        let theta = 2.0 * std::f64::consts::PI * params.detuning_hz * t_s + params.phase_rad;
        theta.cos()
    };
    0.5 * (1.0 - params.visibility * envelope * modulation)
}

/// Analytic derivative dP11/dt, unchecked.
///
/// Undefined at the envelope kinks (`t = 0` for the absolute value,
/// `|2t/tau| = 1` at the edges); there the one-sided value toward the
/// envelope interior is irrelevant because the Fisher routines exclude
/// those points. Outside the envelope the derivative is exactly 0.
#[inline]
pub(crate) fn dp11_dt_unchecked(t_s: f64, params: &InterferenceParams) -> f64 {
    let tau = params.temporal_width_s;
    let u = 2.0 * t_s / tau;
    let envelope = 1.0 - u.abs();
    if envelope <= 0.0 {
        return 0.0;
    }
    let slope = 2.0 / tau * t_s.signum(); // d|2t/tau|/dt
    if params.degenerate {
        0.5 * params.visibility * slope
    } else {
        let omega = 2.0 * std::f64::consts::PI * params.detuning_hz;
        let theta = omega * t_s + params.phase_rad;
        // d/dt [envelope * cos(theta)] = -slope cos(theta) - envelope omega sin(theta)
        0.5 * params.visibility * (slope * theta.cos() + envelope * omega * theta.sin())
    }
}

/// Anti-bunching probability of the degenerate triangular dip.
pub fn p11_degenerate(t_s: f64, params: &InterferenceParams) -> Result<f64> {
    params.validate()?;
    if !params.degenerate {
        return Err(Error::InvalidParameter(
            "p11_degenerate requires params.degenerate = true".into(),
        ));
    }
    Ok(p11_unchecked(t_s, params))
}

/// Anti-bunching probability of the two-colour beat model.
pub fn p11_two_colour(t_s: f64, params: &InterferenceParams) -> Result<f64> {
    params.validate()?;
    if params.degenerate {
        return Err(Error::InvalidParameter(
            "p11_two_colour requires params.degenerate = false".into(),
        ));
    }
    Ok(p11_unchecked(t_s, params))
}

/// Anti-bunching probability, dispatching on `params.degenerate`.
pub fn p11(t_s: f64, params: &InterferenceParams) -> Result<f64> {
    params.validate()?;
    Ok(p11_unchecked(t_s, params))
}

/// All three outcome probabilities at one delay; `p20 = p02 = (1 - p11)/2`.
pub fn outcome_probabilities(t_s: f64, params: &InterferenceParams) -> Result<OutcomeProbabilities> {
    let p11 = p11(t_s, params)?;
    let bunch = 0.5 * (1.0 - p11);
    Ok(OutcomeProbabilities {
        p11,
        p20: bunch,
        p02: bunch,
    })
}

/// First-order detuning from a wavelength split about the degenerate center:
/// `dv = c * d_lambda / lambda^2`.
pub fn detuning_from_wavelengths(center_wavelength_m: f64, delta_wavelength_m: f64) -> Result<f64> {
    if !(center_wavelength_m > 0.0) || !center_wavelength_m.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "center wavelength must be positive, got {center_wavelength_m}"
        )));
    }
    if !(delta_wavelength_m >= 0.0) || !delta_wavelength_m.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "wavelength split must be nonnegative, got {delta_wavelength_m}"
        )));
    }
    Ok(SPEED_OF_LIGHT_M_PER_S * delta_wavelength_m / (center_wavelength_m * center_wavelength_m))
}

/// Delay a sample introduces, under the chosen convention.
pub fn delay_from_sample(sample: &OpticalSample, convention: DelayConvention) -> f64 {
    let index = match convention {
        DelayConvention::OpticalPath => sample.refractive_index,
        DelayConvention::DifferentialIndex => sample.refractive_index - sample.medium_index,
    };
    index * sample.thickness_m / SPEED_OF_LIGHT_M_PER_S
}

/// Inverse of [`delay_from_sample`]: thickness from a delay at known indices.
pub fn thickness_from_delay(
    delay_s: f64,
    refractive_index: f64,
    medium_index: f64,
    convention: DelayConvention,
) -> f64 {
    let index = match convention {
        DelayConvention::OpticalPath => refractive_index,
        DelayConvention::DifferentialIndex => refractive_index - medium_index,
    };
    delay_s * SPEED_OF_LIGHT_M_PER_S / index
}

/// Half-period of the interference fringe expressed as optical path, `c/(2 dv)`.
pub fn fringe_half_period_path(detuning_hz: f64) -> Result<f64> {
    if !(detuning_hz > 0.0) || !detuning_hz.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "fringe period is undefined at detuning {detuning_hz}"
        )));
    }
    Ok(SPEED_OF_LIGHT_M_PER_S / (2.0 * detuning_hz))
}

/// Half-period of the interference fringe in delay units, `1/(2 dv)`.
pub fn fringe_half_period_delay(detuning_hz: f64) -> Result<f64> {
    if !(detuning_hz > 0.0) || !detuning_hz.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "fringe period is undefined at detuning {detuning_hz}"
        )));
    }
    Ok(1.0 / (2.0 * detuning_hz))
}

/// Delay to optical path length.
pub fn delay_to_path(delay_s: f64) -> f64 {
    delay_s * SPEED_OF_LIGHT_M_PER_S
}

/// Optical path length to delay.
pub fn path_to_delay(path_m: f64) -> f64 {
    path_m / SPEED_OF_LIGHT_M_PER_S
}
