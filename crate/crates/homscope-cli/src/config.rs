//! Run configuration document: JSON in, resolved settings out.
//!
//! Every section is optional with experiment-scale defaults; unknown keys
//! anywhere in the document are rejected so typos cannot silently fall back
//! to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use homscope::acquisition::{AcquisitionConfig, NoiseKind, PhaseNoiseModel};
use homscope::detectors::DetectorBank;
use homscope::model::{DelayConvention, InterferenceParams};
use homscope::scene::NoiseScaling;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub params: ParamsSection,
    #[serde(default)]
    pub acquisition: AcquisitionSection,
    #[serde(default)]
    pub bank: BankSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub noise_scaling: Option<NoiseScalingSection>,
    /// Optional sample CSV (with its JSON sidecar next to it).
    #[serde(default)]
    pub sample: Option<PathBuf>,
    #[serde(default)]
    pub convention: DelayConvention,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    #[serde(default = "default_detuning")]
    pub detuning_hz: f64,
    #[serde(default = "default_width")]
    pub temporal_width_s: f64,
    #[serde(default = "default_visibility")]
    pub visibility: f64,
    #[serde(default)]
    pub phase_rad: f64,
    #[serde(default)]
    pub degenerate: bool,
}

fn default_detuning() -> f64 {
    7.4e12
}
fn default_width() -> f64 {
    1e-12
}
fn default_visibility() -> f64 {
    0.95
}

impl Default for ParamsSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty params section is valid")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSection {
    #[serde(default = "default_pair_rate")]
    pub pair_rate_hz: f64,
    #[serde(default = "default_dwell")]
    pub dwell_s: f64,
    #[serde(default = "default_transmission")]
    pub transmission: f64,
    #[serde(default)]
    pub transmission_b: Option<f64>,
}

fn default_pair_rate() -> f64 {
    2e5
}
fn default_dwell() -> f64 {
    0.5
}
fn default_transmission() -> f64 {
    0.02
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty acquisition section is valid")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSection {
    #[serde(default = "default_efficiencies")]
    pub efficiencies: [f64; 8],
    #[serde(default = "default_ratios")]
    pub splitter_ratios: [[f64; 4]; 2],
    #[serde(default)]
    pub dark_count_rate_hz: [f64; 8],
}

fn default_efficiencies() -> [f64; 8] {
    [1.0; 8]
}
fn default_ratios() -> [[f64; 4]; 2] {
    [[0.25; 4]; 2]
}

impl Default for BankSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty bank section is valid")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub diffusion_rad2_per_s: f64,
    #[serde(default)]
    pub hop_rate_hz: f64,
    #[serde(default)]
    pub hop_magnitude_rad: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScalingSection {
    pub reference_hz: f64,
    pub exponent: f64,
}

impl RunConfig {
    /// Parse and validate a configuration file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params()
            .validate()
            .and_then(|_| self.acquisition().validate())
            .and_then(|_| self.bank().validate())
            .and_then(|_| self.noise().validate())
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(sample) = &self.sample {
            if !sample.exists() {
                return Err(CliError::Config(format!(
                    "sample file does not exist: {}",
                    sample.display()
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> InterferenceParams {
        InterferenceParams {
            detuning_hz: if self.params.degenerate { 0.0 } else { self.params.detuning_hz },
            temporal_width_s: self.params.temporal_width_s,
            visibility: self.params.visibility,
            phase_rad: self.params.phase_rad,
            degenerate: self.params.degenerate,
        }
    }

    pub fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            pair_rate_hz: self.acquisition.pair_rate_hz,
            dwell_s: self.acquisition.dwell_s,
            transmission: self.acquisition.transmission,
            transmission_b: self.acquisition.transmission_b,
            seed: self.seed,
        }
    }

    pub fn bank(&self) -> DetectorBank {
        DetectorBank {
            efficiencies: self.bank.efficiencies,
            splitter_ratios: self.bank.splitter_ratios,
            dark_count_rate_hz: self.bank.dark_count_rate_hz,
        }
    }

    pub fn noise(&self) -> PhaseNoiseModel {
        PhaseNoiseModel {
            kind: self.noise.kind,
            diffusion_rad2_per_s: self.noise.diffusion_rad2_per_s,
            hop_rate_hz: self.noise.hop_rate_hz,
            hop_magnitude_rad: self.noise.hop_magnitude_rad,
        }
    }

    pub fn noise_scaling(&self) -> Option<NoiseScaling> {
        self.noise_scaling.map(|s| NoiseScaling {
            reference_hz: s.reference_hz,
            exponent: s.exponent,
        })
    }
}
