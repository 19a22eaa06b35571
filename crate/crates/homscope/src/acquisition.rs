//! Monte Carlo generation of coincidence data for one pixel or a delay scan.
//!
//! The forward model per acquisition window: a Poisson number of pair
//! emissions at the configured rate; per pair, optional phase-noise evolution,
//! outcome sampling from the interference model, per-photon transmission
//! through the microscope, and routing through the detector bank. A photon
//! that loses its partner still reaches the beamsplitter and produces a
//! single click on one arm, as in the experiment.
//!
//! Everything is deterministic under a fixed seed. Pixels derive their own
//! seed from `hash(master_seed, pixel_index)` so scans can run in parallel
//! with results independent of scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{detect_pair, CoincidenceTally, DetectorBank, Outcome};
use crate::error::{Error, Result};
use crate::model::{p11_unchecked, InterferenceParams};

/// Acquisition settings for one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// Pair emission rate into the microscope (Hz).
    pub pair_rate_hz: f64,
    /// Per-pixel acquisition time (s).
    pub dwell_s: f64,
    /// Per-photon survival probability between source and detector bank.
    pub transmission: f64,
    /// Optional distinct transmission for the second photon's path.
    #[serde(default)]
    pub transmission_b: Option<f64>,
    /// Master reproducibility seed.
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            pair_rate_hz: 2e5,
            dwell_s: 0.5,
            transmission: 0.02,
            transmission_b: None,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate_hz > 0.0) || !self.pair_rate_hz.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pair rate must be positive, got {}",
                self.pair_rate_hz
            )));
        }
        if !(self.dwell_s >= 0.0) || !self.dwell_s.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "dwell must be nonnegative, got {}",
                self.dwell_s
            )));
        }
        for t in [self.transmission, self.transmission_b.unwrap_or(self.transmission)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "transmission must be in (0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }

    fn transmissions(&self) -> (f64, f64) {
        (self.transmission, self.transmission_b.unwrap_or(self.transmission))
    }
}

/// Kinds of interferometer phase instability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    RandomWalk,
    RandomWalkWithHops,
}

/// Stochastic model of the pair phase phi(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseNoiseModel {
    pub kind: NoiseKind,
    /// Random-walk rate (rad^2/s); ensemble phase variance after time T is D*T.
    #[serde(default)]
    pub diffusion_rad2_per_s: f64,
    /// Rate of discrete mode-hop jumps (Hz).
    #[serde(default)]
    pub hop_rate_hz: f64,
    /// Magnitude of each hop (rad), applied with a random sign.
    #[serde(default)]
    pub hop_magnitude_rad: f64,
}

impl PhaseNoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn random_walk(diffusion_rad2_per_s: f64) -> Self {
        Self {
            kind: NoiseKind::RandomWalk,
            diffusion_rad2_per_s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("diffusion", self.diffusion_rad2_per_s),
            ("hop rate", self.hop_rate_hz),
            ("hop magnitude", self.hop_magnitude_rad),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn is_active(&self) -> bool {
        self.kind != NoiseKind::None
    }
}

/// Stateful phase walker shared by [`sample_pixel`] and [`drift_trace`].
struct PhaseWalker {
    step_dist: Option<Normal<f64>>,
    hop_counts: Option<Poisson<f64>>,
    hop_magnitude: f64,
}

impl PhaseWalker {
    fn new(noise: &PhaseNoiseModel, dt_s: f64) -> Self {
        let step_dist = (noise.is_active() && noise.diffusion_rad2_per_s > 0.0 && dt_s > 0.0)
            .then(|| Normal::new(0.0, (noise.diffusion_rad2_per_s * dt_s).sqrt()).unwrap());
        let hops_on = noise.kind == NoiseKind::RandomWalkWithHops
            && noise.hop_rate_hz > 0.0
            && dt_s > 0.0;
        let hop_counts = hops_on.then(|| Poisson::new(noise.hop_rate_hz * dt_s).unwrap());
        Self {
            step_dist,
            hop_counts,
            hop_magnitude: noise.hop_magnitude_rad,
        }
    }

    fn advance<R: Rng + ?Sized>(&self, phase: &mut f64, rng: &mut R) {
        if let Some(d) = &self.step_dist {
            *phase += d.sample(rng);
        }
        if let Some(h) = &self.hop_counts {
            let hops = h.sample(rng) as u64;
            for _ in 0..hops {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                *phase += sign * self.hop_magnitude;
            }
        }
    }
}

/// Mix a master seed with a stream index into an independent child seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 over the combined state
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reproducible generator for one pixel of a scan.
pub fn pixel_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

fn draw_outcome<R: Rng + ?Sized>(p11: f64, rng: &mut R) -> Outcome {
    let x: f64 = rng.random();
    if x < p11 {
        Outcome::N11
    } else if x < p11 + 0.5 * (1.0 - p11) {
        Outcome::N20
    } else {
        Outcome::N02
    }
}

/// Route a photon that lost its partner: 50:50 beamsplitter, splitter,
/// efficiency. Only singles can result.
fn route_solo<R: Rng + ?Sized>(bank: &DetectorBank, tally: &mut CoincidenceTally, rng: &mut R) {
    let arm = usize::from(rng.random::<bool>());
    let ratios = &bank.splitter_ratios[arm];
    let x: f64 = rng.random();
    let mut acc = 0.0;
    let mut slot = 3;
    for (k, r) in ratios.iter().enumerate() {
        acc += r;
        if x < acc {
            slot = k;
            break;
        }
    }
    let channel = (arm * 4 + slot) as u8 + 1;
    if rng.random::<f64>() < bank.efficiencies[channel as usize - 1] {
        tally.record_single(channel);
    }
}

/// Simulate one acquisition window at a fixed true delay.
pub fn sample_pixel<R: Rng + ?Sized>(
    t_true_s: f64,
    params: &InterferenceParams,
    config: &AcquisitionConfig,
    bank: &DetectorBank,
    noise: &PhaseNoiseModel,
    rng: &mut R,
) -> Result<CoincidenceTally> {
    params.validate()?;
    config.validate()?;
    bank.validate()?;
    noise.validate()?;

    let mut tally = CoincidenceTally::new(config.dwell_s);
    let mean_pairs = config.pair_rate_hz * config.dwell_s;
    let n_pairs = if mean_pairs > 0.0 {
        Poisson::new(mean_pairs)
            .map_err(|e| Error::InvalidParameter(format!("pair count distribution: {e}")))?
            .sample(rng) as u64
    } else {
        0
    };

    let (trans_a, trans_b) = config.transmissions();
    let dt = if n_pairs > 0 { config.dwell_s / n_pairs as f64 } else { 0.0 };
    let walker = PhaseWalker::new(noise, dt);
    let mut phase = params.phase_rad;

    for _ in 0..n_pairs {
        if noise.is_active() {
            walker.advance(&mut phase, rng);
        }
        let survive_a = rng.random::<f64>() < trans_a;
        let survive_b = rng.random::<f64>() < trans_b;
        match (survive_a, survive_b) {
            (true, true) => {
                let p11 = if noise.is_active() {
                    p11_unchecked(t_true_s, &params.with_phase(phase))
                } else {
                    p11_unchecked(t_true_s, params)
                };
                let outcome = draw_outcome(p11, rng);
                let detection = detect_pair(outcome, bank, rng);
                for channel in detection.clicked.into_iter().flatten() {
                    tally.record_single(channel);
                }
                if let Some((i, j)) = detection.coincidence() {
                    tally.record_coincidence(i, j)?;
                }
            }
            (true, false) | (false, true) => route_solo(bank, &mut tally, rng),
            (false, false) => {}
        }
    }

    // Dark counts add Poisson singles but never coincidences.
    for (k, rate) in bank.dark_count_rate_hz.iter().enumerate() {
        let mean = rate * config.dwell_s;
        if mean > 0.0 {
            let darks = Poisson::new(mean)
                .map_err(|e| Error::InvalidParameter(format!("dark count distribution: {e}")))?
                .sample(rng) as u64;
            tally.singles[k] += darks;
        }
    }

    Ok(tally)
}

/// Independent [`sample_pixel`] runs over a delay grid, one derived seed per
/// grid point, executed in parallel.
pub fn sample_dip_scan(
    delays_s: &[f64],
    params: &InterferenceParams,
    config: &AcquisitionConfig,
    bank: &DetectorBank,
    noise: &PhaseNoiseModel,
) -> Result<Vec<CoincidenceTally>> {
    delays_s
        .par_iter()
        .enumerate()
        .map(|(index, &t)| {
            let mut rng = pixel_rng(config.seed, index as u64);
            sample_pixel(t, params, config, bank, noise, &mut rng)
        })
        .collect()
}

/// Phase time series of the noise model, sampled every `step_s` from 0 to
/// `duration_s` inclusive. The first entry is always 0.
pub fn drift_trace(
    noise: &PhaseNoiseModel,
    duration_s: f64,
    step_s: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    noise.validate()?;
    if !(step_s > 0.0) || !step_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {step_s}"
        )));
    }
    if !(duration_s >= 0.0) || !duration_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "duration must be nonnegative, got {duration_s}"
        )));
    }
    let steps = (duration_s / step_s).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walker = PhaseWalker::new(noise, step_s);
    let mut phase = 0.0;
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(phase);
    for _ in 0..steps {
        if noise.is_active() {
            walker.advance(&mut phase, &mut rng);
        }
        trace.push(phase);
    }
    Ok(trace)
}
