//! Multiplexed quasi-photon-number-resolving detection and its calibration.
//!
//! Each interferometer output arm feeds a 1x4 fused fibre splitter followed
//! by four binary detectors: channels 1..=4 watch arm D, channels 5..=8 watch
//! arm C. A coincidence between the two groups is an anti-bunching event
//! (N11); a coincidence within 1..=4 is N02, within 5..=8 is N20. Two bunched
//! photons routed onto the *same* channel produce a single click and no
//! coincidence, which at uniform splitting discards 1/4 of all bunching
//! events; calibration undoes that with the 1/(1 - sum r_k^2) factor.
//!
//! Per-channel losses are estimated from a large-delay acquisition via the
//! Klyshko heralding ratio
//!
//! ```text
//! eta_i = 1/4 * sum_{j=5..8} C_ij / (2/3 * S_j),   i in 1..=4
//! ```
//!
//! (mirrored for 5..=8). The 2/3 accounts for the share of heralding singles
//! attributed to anti-bunching events at large delay, where P11 = 1/2 and
//! P20 = P02 = 1/4. Under the full collision-accurate forward model this
//! estimator recovers each channel's efficiency up to a scale factor common
//! to all channels of the same arm; the common factors cancel in the
//! normalized anti-bunching estimate of [`normalized_p11`], which is the
//! quantity the calibration exists for.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classified coincidence outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    /// One photon in each arm (anti-bunching).
    N11,
    /// Both photons in arm C (channels 5..=8).
    N20,
    /// Both photons in arm D (channels 1..=4).
    N02,
}

/// Eight-channel description of the multiplexed detection apparatus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBank {
    /// Per-channel detection efficiencies, channels 1..=8.
    pub efficiencies: [f64; 8],
    /// Splitting distributions of the two 1x4 couplers:
    /// `[0]` feeds channels 1..=4 (arm D), `[1]` feeds channels 5..=8 (arm C).
    pub splitter_ratios: [[f64; 4]; 2],
    /// Per-channel dark count rates (Hz). Dark counts only add singles.
    #[serde(default = "zero_rates")]
    pub dark_count_rate_hz: [f64; 8],
}

fn zero_rates() -> [f64; 8] {
    [0.0; 8]
}

impl Default for DetectorBank {
    fn default() -> Self {
        Self {
            efficiencies: [1.0; 8],
            splitter_ratios: [[0.25; 4]; 2],
            dark_count_rate_hz: [0.0; 8],
        }
    }
}

impl DetectorBank {
    pub fn with_efficiencies(efficiencies: [f64; 8]) -> Result<Self> {
        let bank = Self {
            efficiencies,
            ..Self::default()
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, eta) in self.efficiencies.iter().enumerate() {
            if !(0.0..=1.0).contains(eta) || !eta.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "efficiency of channel {} must be in [0, 1], got {eta}",
                    k + 1
                )));
            }
        }
        for (arm, ratios) in self.splitter_ratios.iter().enumerate() {
            let sum: f64 = ratios.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "splitter {arm} ratios must sum to 1, got {sum}"
                )));
            }
            if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "splitter {arm} ratios must be nonnegative"
                )));
            }
        }
        if self.dark_count_rate_hz.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return Err(Error::InvalidParameter("dark count rates must be nonnegative".into()));
        }
        Ok(())
    }

    /// Which splitter arm a channel (1..=8) belongs to: 0 for D, 1 for C.
    fn arm_of(channel: u8) -> usize {
        if channel <= 4 {
            0
        } else {
            1
        }
    }

    /// Collision probability of a bunched pair in the given arm, `sum r_k^2`.
    pub fn collision_probability(&self, arm: usize) -> f64 {
        self.splitter_ratios[arm].iter().map(|r| r * r).sum()
    }
}

/// Calibration document exchanged with other tools:
/// `{"efficiencies": [8 numbers], "splitter_ratios": [[4], [4]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationData {
    pub efficiencies: [f64; 8],
    pub splitter_ratios: [[f64; 4]; 2],
}

impl CalibrationData {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration data serializes")
    }
}

/// Counts accumulated over one acquisition window.
///
/// `pair_counts[i][j]` (0-indexed, i < j) holds the raw coincidences between
/// channels i+1 and j+1; the per-category totals and per-channel singles are
/// maintained alongside. Calibrated counts are zero until
/// [`calibrate_tally`] fills them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceTally {
    pub n11_raw: u64,
    pub n20_raw: u64,
    pub n02_raw: u64,
    /// Per-channel singles (every click counts, coincident or not).
    pub singles: [u64; 8],
    /// Pairwise raw coincidence counts, upper triangle (i < j, 0-indexed).
    pub pair_counts: [[u64; 8]; 8],
    pub n11_cal: f64,
    pub n20_cal: f64,
    pub n02_cal: f64,
    /// Acquisition time (s).
    pub window_s: f64,
}

impl CoincidenceTally {
    pub fn new(window_s: f64) -> Self {
        Self {
            n11_raw: 0,
            n20_raw: 0,
            n02_raw: 0,
            singles: [0; 8],
            pair_counts: [[0; 8]; 8],
            n11_cal: 0.0,
            n20_cal: 0.0,
            n02_cal: 0.0,
            window_s,
        }
    }

    /// Tally carrying only calibrated (possibly non-integer) counts; used to
    /// feed expected values straight into the estimator.
    pub fn from_calibrated(n11: f64, n20: f64, n02: f64, window_s: f64) -> Self {
        Self {
            n11_cal: n11,
            n20_cal: n20,
            n02_cal: n02,
            ..Self::new(window_s)
        }
    }

    pub fn record_single(&mut self, channel: u8) {
        self.singles[channel as usize - 1] += 1;
    }

    pub fn record_coincidence(&mut self, i: u8, j: u8) -> Result<Outcome> {
        let outcome = classify_coincidence(i, j)?;
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        self.pair_counts[lo as usize - 1][hi as usize - 1] += 1;
        match outcome {
            Outcome::N11 => self.n11_raw += 1,
            Outcome::N20 => self.n20_raw += 1,
            Outcome::N02 => self.n02_raw += 1,
        }
        Ok(outcome)
    }

    pub fn total_raw(&self) -> u64 {
        self.n11_raw + self.n20_raw + self.n02_raw
    }

    pub fn total_calibrated(&self) -> f64 {
        self.n11_cal + self.n20_cal + self.n02_cal
    }

    /// The 4x4 cross-arm block `C_ij` (i in 1..=4, j in 5..=8) needed by
    /// Klyshko calibration.
    pub fn cross_coincidences(&self) -> [[u64; 4]; 4] {
        let mut c = [[0; 4]; 4];
        for (i, row) in c.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.pair_counts[i][j + 4];
            }
        }
        c
    }
}

/// Result of routing one photon pair through the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    /// Distinct channels that clicked (at most two; a collision merges into one).
    pub clicked: [Option<u8>; 2],
}

impl Detection {
    /// The surviving classified coincidence, if both clicks are present.
    pub fn coincidence(&self) -> Option<(u8, u8)> {
        match self.clicked {
            [Some(a), Some(b)] => Some((a, b)),
            _ => None,
        }
    }
}

/// Classify a coincidence between two distinct channels.
pub fn classify_coincidence(i: u8, j: u8) -> Result<Outcome> {
    if i == j || !(1..=8).contains(&i) || !(1..=8).contains(&j) {
        return Err(Error::InvalidChannelPair(i, j));
    }
    Ok(match (DetectorBank::arm_of(i), DetectorBank::arm_of(j)) {
        (0, 0) => Outcome::N02,
        (1, 1) => Outcome::N20,
        _ => Outcome::N11,
    })
}

fn route_photon<R: Rng + ?Sized>(arm: usize, bank: &DetectorBank, rng: &mut R) -> u8 {
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
    (arm * 4 + slot) as u8 + 1
}

/// Send one pair with the given interference outcome through the bank.
///
/// Each photon is routed through its arm's splitter and detected with the
/// channel's efficiency. Two photons landing on the same channel merge into
/// one click (the intrinsic bunching loss); the coincidence survives only if
/// two distinct channels click.
pub fn detect_pair<R: Rng + ?Sized>(outcome: Outcome, bank: &DetectorBank, rng: &mut R) -> Detection {
    let arms = match outcome {
        Outcome::N11 => (0usize, 1usize),
        Outcome::N02 => (0, 0),
        Outcome::N20 => (1, 1),
    };
    let ch_a = route_photon(arms.0, bank, rng);
    let ch_b = route_photon(arms.1, bank, rng);
    let det_a = rng.random::<f64>() < bank.efficiencies[ch_a as usize - 1];
    let det_b = rng.random::<f64>() < bank.efficiencies[ch_b as usize - 1];
    let mut clicked = [None, None];
    match (det_a, det_b) {
        (true, true) if ch_a == ch_b => clicked[0] = Some(ch_a),
        (true, true) => clicked = [Some(ch_a), Some(ch_b)],
        (true, false) => clicked[0] = Some(ch_a),
        (false, true) => clicked[0] = Some(ch_b),
        (false, false) => {}
    }
    Detection { clicked }
}

/// Probability that a pair with the given outcome survives as a classified
/// coincidence, in closed form.
pub fn coincidence_survival(outcome: Outcome, bank: &DetectorBank) -> f64 {
    match outcome {
        Outcome::N11 => {
            let d: f64 = (0..4)
                .map(|k| bank.splitter_ratios[0][k] * bank.efficiencies[k])
                .sum();
            let c: f64 = (0..4)
                .map(|k| bank.splitter_ratios[1][k] * bank.efficiencies[k + 4])
                .sum();
            d * c
        }
        Outcome::N02 => same_arm_survival(bank, 0),
        Outcome::N20 => same_arm_survival(bank, 1),
    }
}

fn same_arm_survival(bank: &DetectorBank, arm: usize) -> f64 {
    // sum over distinct channel pairs of r_k r_l eta_k eta_l
    let q: Vec<f64> = (0..4)
        .map(|k| bank.splitter_ratios[arm][k] * bank.efficiencies[arm * 4 + k])
        .collect();
    let total: f64 = q.iter().sum();
    let squares: f64 = q.iter().map(|x| x * x).sum();
    total * total - squares
}

/// Same survival probabilities by exhaustive enumeration over all channel
/// routings; the independent oracle for [`coincidence_survival`].
pub fn coincidence_survival_enumerated(outcome: Outcome, bank: &DetectorBank) -> f64 {
    let arms = match outcome {
        Outcome::N11 => (0usize, 1usize),
        Outcome::N02 => (0, 0),
        Outcome::N20 => (1, 1),
    };
    let mut p = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            let ch_a = arms.0 * 4 + a;
            let ch_b = arms.1 * 4 + b;
            if ch_a == ch_b {
                continue; // collision: one click, no coincidence
            }
            p += bank.splitter_ratios[arms.0][a]
                * bank.splitter_ratios[arms.1][b]
                * bank.efficiencies[ch_a]
                * bank.efficiencies[ch_b];
        }
    }
    p
}

/// Klyshko efficiencies of all eight channels from a large-delay acquisition.
///
/// `cross[i][j]` holds the raw coincidences between channel i+1 and channel
/// j+5; `singles` holds all eight per-channel singles.
pub fn klyshko_efficiencies(cross: &[[u64; 4]; 4], singles: &[u64; 8]) -> Result<[f64; 8]> {
    for (k, s) in singles.iter().enumerate() {
        if *s == 0 {
            return Err(Error::ZeroSingles { channel: k as u8 + 1 });
        }
    }
    let mut eta = [0.0; 8];
    for i in 0..4 {
        let sum: f64 = (0..4)
            .map(|j| cross[i][j] as f64 / ((2.0 / 3.0) * singles[j + 4] as f64))
            .sum();
        eta[i] = 0.25 * sum;
    }
    for j in 0..4 {
        let sum: f64 = (0..4)
            .map(|i| cross[i][j] as f64 / ((2.0 / 3.0) * singles[i] as f64))
            .sum();
        eta[j + 4] = 0.25 * sum;
    }
    Ok(eta)
}

/// Divide out per-channel losses and the intrinsic bunching collision loss.
///
/// Every recorded coincidence between channels i and j is weighted by
/// `1/(eta_i eta_j)`; bunching categories are additionally scaled by
/// `1/(1 - sum r_k^2)` of their arm (4/3 at uniform splitting).
pub fn calibrate_tally(
    raw: &CoincidenceTally,
    efficiencies: &[f64; 8],
    splitter_ratios: &[[f64; 4]; 2],
) -> Result<CoincidenceTally> {
    for (k, eta) in efficiencies.iter().enumerate() {
        if !(*eta > 0.0) || !eta.is_finite() {
            return Err(Error::ZeroEfficiency { channel: k as u8 + 1 });
        }
    }
    let collision_d: f64 = splitter_ratios[0].iter().map(|r| r * r).sum();
    let collision_c: f64 = splitter_ratios[1].iter().map(|r| r * r).sum();
    if collision_d >= 1.0 || collision_c >= 1.0 {
        return Err(Error::InvalidParameter(
            "splitter routes everything to one channel; bunching is unobservable".into(),
        ));
    }

    let mut out = raw.clone();
    out.n11_cal = 0.0;
    out.n20_cal = 0.0;
    out.n02_cal = 0.0;
    for i in 0..8usize {
        for j in (i + 1)..8usize {
            let count = raw.pair_counts[i][j];
            if count == 0 {
                continue;
            }
            let weighted = count as f64 / (efficiencies[i] * efficiencies[j]);
            match classify_coincidence(i as u8 + 1, j as u8 + 1)? {
                Outcome::N11 => out.n11_cal += weighted,
                Outcome::N20 => out.n20_cal += weighted / (1.0 - collision_c),
                Outcome::N02 => out.n02_cal += weighted / (1.0 - collision_d),
            }
        }
    }
    Ok(out)
}

/// Normalized anti-bunching probability estimate,
/// `P11 = N11 / (N11 + N02 + N20)` over calibrated counts.
pub fn normalized_p11(calibrated: &CoincidenceTally) -> Result<f64> {
    let total = calibrated.total_calibrated();
    if !(total > 0.0) {
        return Err(Error::EmptyTally);
    }
    Ok(calibrated.n11_cal / total)
}

/// Poisson standard error of [`normalized_p11`] for a raw tally calibrated
/// with the given efficiencies, by error propagation through the per-pair
/// weights.
pub fn normalized_p11_sigma(
    raw: &CoincidenceTally,
    efficiencies: &[f64; 8],
    splitter_ratios: &[[f64; 4]; 2],
) -> Result<f64> {
    for (k, eta) in efficiencies.iter().enumerate() {
        if !(*eta > 0.0) || !eta.is_finite() {
            return Err(Error::ZeroEfficiency { channel: k as u8 + 1 });
        }
    }
    let collision_d: f64 = splitter_ratios[0].iter().map(|r| r * r).sum();
    let collision_c: f64 = splitter_ratios[1].iter().map(|r| r * r).sum();
    let mut anti = 0.0;
    let mut bunch = 0.0;
    let mut var_anti = 0.0;
    let mut var_bunch = 0.0;
    for i in 0..8usize {
        for j in (i + 1)..8usize {
            let n = raw.pair_counts[i][j] as f64;
            if n == 0.0 {
                continue;
            }
            let mut w = 1.0 / (efficiencies[i] * efficiencies[j]);
            match classify_coincidence(i as u8 + 1, j as u8 + 1)? {
                Outcome::N11 => {
                    anti += w * n;
                    var_anti += w * w * n;
                }
                Outcome::N20 => {
                    w /= 1.0 - collision_c;
                    bunch += w * n;
                    var_bunch += w * w * n;
                }
                Outcome::N02 => {
                    w /= 1.0 - collision_d;
                    bunch += w * n;
                    var_bunch += w * w * n;
                }
            }
        }
    }
    let total = anti + bunch;
    if !(total > 0.0) {
        return Err(Error::EmptyTally);
    }
    Ok((bunch * bunch * var_anti + anti * anti * var_bunch).sqrt() / (total * total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected}, got {actual} (tol {tol})"
        );
    }

    // --- classification ---

    #[test]
    fn classification_follows_channel_groups() {
        assert_eq!(classify_coincidence(2, 7).unwrap(), Outcome::N11);
        assert_eq!(classify_coincidence(1, 3).unwrap(), Outcome::N02);
        assert_eq!(classify_coincidence(5, 8).unwrap(), Outcome::N20);
    }

    #[test]
    fn classification_total_and_symmetric() {
        for i in 1..=8u8 {
            assert!(classify_coincidence(i, i).is_err());
            for j in 1..=8u8 {
                if i == j {
                    continue;
                }
                let a = classify_coincidence(i, j).unwrap();
                let b = classify_coincidence(j, i).unwrap();
                assert_eq!(a, b, "asymmetric at ({i}, {j})");
            }
        }
        assert!(classify_coincidence(0, 3).is_err());
        assert!(classify_coincidence(3, 9).is_err());
    }

    // --- detection ---

    #[test]
    fn anti_bunching_always_detected_at_unit_efficiency() {
        let bank = DetectorBank::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let d = detect_pair(Outcome::N11, &bank, &mut rng);
            let (a, b) = d.coincidence().expect("no loss for anti-bunching at unit eta");
            assert_eq!(classify_coincidence(a, b).unwrap(), Outcome::N11);
        }
    }

    #[test]
    fn bunching_survival_is_three_quarters_at_unit_efficiency() {
        let bank = DetectorBank::default();
        assert_close(coincidence_survival(Outcome::N20, &bank), 0.75, 1e-15);
        assert_close(coincidence_survival(Outcome::N02, &bank), 0.75, 1e-15);
        assert_close(coincidence_survival(Outcome::N11, &bank), 1.0, 1e-15);
    }

    #[test]
    fn survival_at_half_efficiency_matches_enumeration() {
        let bank = DetectorBank::with_efficiencies([0.5; 8]).unwrap();
        assert_close(coincidence_survival(Outcome::N11, &bank), 0.25, 1e-15);
        assert_close(coincidence_survival(Outcome::N20, &bank), 0.75 * 0.25, 1e-15);
        for outcome in [Outcome::N11, Outcome::N20, Outcome::N02] {
            assert_close(
                coincidence_survival(outcome, &bank),
                coincidence_survival_enumerated(outcome, &bank),
                1e-15,
            );
        }
    }

    proptest! {
        #[test]
        fn survival_closed_form_matches_enumeration(
            etas in proptest::array::uniform8(0.0f64..1.0),
            raw_d in proptest::array::uniform4(0.01f64..1.0),
            raw_c in proptest::array::uniform4(0.01f64..1.0),
        ) {
            let sum_d: f64 = raw_d.iter().sum();
            let sum_c: f64 = raw_c.iter().sum();
            let bank = DetectorBank {
                efficiencies: etas,
                splitter_ratios: [
                    [raw_d[0]/sum_d, raw_d[1]/sum_d, raw_d[2]/sum_d, raw_d[3]/sum_d],
                    [raw_c[0]/sum_c, raw_c[1]/sum_c, raw_c[2]/sum_c, raw_c[3]/sum_c],
                ],
                dark_count_rate_hz: [0.0; 8],
            };
            bank.validate().unwrap();
            for outcome in [Outcome::N11, Outcome::N20, Outcome::N02] {
                let a = coincidence_survival(outcome, &bank);
                let b = coincidence_survival_enumerated(outcome, &bank);
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn monte_carlo_survival_matches_closed_form() {
        let bank = DetectorBank {
            efficiencies: [0.9, 0.4, 0.7, 1.0, 0.55, 0.8, 0.35, 0.95],
            splitter_ratios: [[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]],
            dark_count_rate_hz: [0.0; 8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 200_000u64;
        for outcome in [Outcome::N11, Outcome::N20, Outcome::N02] {
            let mut survived = 0u64;
            for _ in 0..trials {
                if detect_pair(outcome, &bank, &mut rng).coincidence().is_some() {
                    survived += 1;
                }
            }
            let p = coincidence_survival(outcome, &bank);
            let observed = survived as f64 / trials as f64;
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!(
                (observed - p).abs() <= 4.0 * sigma,
                "{outcome:?}: observed {observed}, expected {p} +- {sigma}"
            );
        }
    }

    // --- Klyshko ---

    #[test]
    fn klyshko_constant_counts() {
        // C_ij = c, S_j = s  =>  eta_i = 3c/(2s)
        let cross = [[120u64; 4]; 4];
        let singles = [400u64; 8];
        let eta = klyshko_efficiencies(&cross, &singles).unwrap();
        for e in eta {
            assert_close(e, 3.0 * 120.0 / (2.0 * 400.0), 1e-12);
        }
    }

    #[test]
    fn klyshko_ratio_point_one() {
        // C_ij / S_j = 0.1 for all j  =>  eta_i = 0.15
        let cross = [[50u64; 4]; 4];
        let singles = [500u64; 8];
        let eta = klyshko_efficiencies(&cross, &singles).unwrap();
        for e in eta {
            assert_close(e, 0.15, 1e-12);
        }
    }

    #[test]
    fn klyshko_recovers_relative_efficiencies_within_arm() {
        // Simulated large-delay acquisition with a known bank: the heralding
        // ratio carries a scale factor common to each arm, so the recovered
        // efficiencies must be proportional to ground truth arm by arm.
        use crate::acquisition::{pixel_rng, sample_pixel, AcquisitionConfig, PhaseNoiseModel};
        use crate::model::InterferenceParams;

        let truth = [0.9, 0.5, 0.7, 1.0, 0.6, 0.95, 0.8, 0.45];
        let bank = DetectorBank::with_efficiencies(truth).unwrap();
        let params = InterferenceParams::default();
        let config = AcquisitionConfig {
            pair_rate_hz: 2e6,
            dwell_s: 0.5,
            transmission: 1.0,
            transmission_b: None,
            seed: 112,
        };
        let mut rng = pixel_rng(config.seed, 0);
        let run = sample_pixel(
            20.0 * params.temporal_width_s, // far outside the envelope
            &params,
            &config,
            &bank,
            &PhaseNoiseModel::none(),
            &mut rng,
        )
        .unwrap();
        let eta = klyshko_efficiencies(&run.cross_coincidences(), &run.singles).unwrap();
        for arm in 0..2usize {
            let scale = eta[arm * 4] / truth[arm * 4];
            for k in 1..4 {
                let ratio = eta[arm * 4 + k] / truth[arm * 4 + k];
                assert!(
                    (ratio / scale - 1.0).abs() <= 0.03,
                    "arm {arm} channel {k}: recovered/truth {ratio} vs arm scale {scale}"
                );
            }
        }
    }

    #[test]
    fn klyshko_names_dead_channel() {
        let cross = [[10u64; 4]; 4];
        let mut singles = [100u64; 8];
        singles[6] = 0;
        match klyshko_efficiencies(&cross, &singles) {
            Err(Error::ZeroSingles { channel: 7 }) => {}
            other => panic!("expected ZeroSingles on channel 7, got {other:?}"),
        }
    }

    // --- calibration ---

    #[test]
    fn calibration_identity_rescales_only_bunching() {
        let mut raw = CoincidenceTally::new(0.5);
        // 300 anti-bunching spread over cross pairs, 90 per bunching category.
        for k in 0..300u64 {
            let i = (k % 4) as u8 + 1;
            let j = (k % 4) as u8 + 5;
            raw.record_coincidence(i, j).unwrap();
        }
        for k in 0..90u64 {
            raw.record_coincidence(1 + (k % 3) as u8, 4).unwrap(); // within 1..=4 -> N02
            raw.record_coincidence(5 + (k % 3) as u8, 8).unwrap(); // within 5..=8 -> N20
        }
        assert_eq!((raw.n11_raw, raw.n20_raw, raw.n02_raw), (300, 90, 90));

        let cal = calibrate_tally(&raw, &[1.0; 8], &[[0.25; 4]; 2]).unwrap();
        assert_close(cal.n11_cal, 300.0, 1e-9);
        assert_close(cal.n20_cal, 120.0, 1e-9);
        assert_close(cal.n02_cal, 120.0, 1e-9);
        assert_close(normalized_p11(&cal).unwrap(), 300.0 / 540.0, 1e-12);
    }

    #[test]
    fn calibration_rejects_zero_efficiency() {
        let mut raw = CoincidenceTally::new(1.0);
        raw.record_coincidence(1, 5).unwrap();
        let mut etas = [1.0; 8];
        etas[2] = 0.0;
        match calibrate_tally(&raw, &etas, &[[0.25; 4]; 2]) {
            Err(Error::ZeroEfficiency { channel: 3 }) => {}
            other => panic!("expected ZeroEfficiency on channel 3, got {other:?}"),
        }
    }

    #[test]
    fn nonuniform_splitting_uses_generalized_collision_factor() {
        let ratios = [[0.4, 0.3, 0.2, 0.1], [0.25; 4]];
        let mut raw = CoincidenceTally::new(1.0);
        raw.record_coincidence(1, 2).unwrap(); // N02, arm D with skewed splitter
        let cal = calibrate_tally(&raw, &[1.0; 8], &ratios).unwrap();
        let collision: f64 = ratios[0].iter().map(|r| r * r).sum();
        assert_close(cal.n02_cal, 1.0 / (1.0 - collision), 1e-12);
    }

    // --- normalized p11 ---

    #[test]
    fn normalized_p11_examples() {
        let t = CoincidenceTally::from_calibrated(0.0, 40.0, 25.0, 1.0);
        assert_eq!(normalized_p11(&t).unwrap(), 0.0);
        let t = CoincidenceTally::from_calibrated(500.0, 125.0, 125.0, 1.0);
        assert_close(normalized_p11(&t).unwrap(), 2.0 / 3.0, 1e-12);
        let t = CoincidenceTally::from_calibrated(0.0, 0.0, 0.0, 1.0);
        assert!(normalized_p11(&t).is_err());
    }

    #[test]
    fn calibration_document_round_trip() {
        let doc = CalibrationData {
            efficiencies: [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.4, 0.3],
            splitter_ratios: [[0.25; 4], [0.1, 0.2, 0.3, 0.4]],
        };
        let text = doc.to_json();
        let back = CalibrationData::from_json(&text).unwrap();
        assert_eq!(doc, back);
        // Unknown keys are rejected.
        assert!(CalibrationData::from_json("{\"efficiencies\":[1,1,1,1,1,1,1,1],\"splitter_ratios\":[[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25]],\"x\":1}").is_err());
    }
}
