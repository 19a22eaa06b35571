//! Minimal end-to-end run: simulate one acquisition at a fringe quadrature,
//! calibrate it, estimate the delay and compare with the Cramer-Rao bound.

use homscope::acquisition::{pixel_rng, sample_pixel, AcquisitionConfig, PhaseNoiseModel};
use homscope::detectors::{calibrate_tally, DetectorBank};
use homscope::inference::{crb_report, mle_delay, DelayWindow, DepthConversion, MleOptions};
use homscope::model::InterferenceParams;

fn main() -> homscope::Result<()> {
    let params = InterferenceParams::two_colour(7.4e12, 1e-12, 0.95, 0.0)?;
    let config = AcquisitionConfig {
        pair_rate_hz: 8e3,
        dwell_s: 0.5,
        transmission: 1.0,
        transmission_b: None,
        seed: 7,
    };
    let bank = DetectorBank::default();
    let conv = DepthConversion::optical_path(1.58);

    let t_true = 0.25 / 7.4e12; // fringe quadrature
    let mut rng = pixel_rng(config.seed, 0);
    let raw = sample_pixel(t_true, &params, &config, &bank, &PhaseNoiseModel::none(), &mut rng)?;
    let cal = calibrate_tally(&raw, &bank.efficiencies, &bank.splitter_ratios)?;

    let window = DelayWindow::new(0.0, params.fringe_half_period_delay_s().unwrap())?;
    let estimate = mle_delay(&cal, &params, window, &conv, &MleOptions::default())?;
    let bound = crb_report(t_true, &params, 4000.0, &conv)?;
    println!(
        "t = {:.3e} s +- {:.3e} s (CRB {:.3e} s), depth {:.3} um",
        estimate.delay_s,
        estimate.sigma_s,
        bound.crb_sigma_t_s,
        estimate.depth_m * 1e6
    );
    Ok(())
}
