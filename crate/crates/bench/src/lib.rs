//! Shared fixtures for the criterion benchmarks.

use qspectro::filterfn::{filter_function, FrequencyGrid};
use qspectro::modulation::{ContinuousModulation, TrigTerm};
use qspectro::reconstruct::ProtocolConfig;
use qspectro::{FilterFunction, SpectralDensity};

/// The default FO filter set at operation time `t`.
pub fn fo_filters(t: f64) -> Vec<FilterFunction> {
    let cfg = ProtocolConfig::fo_default();
    let grid = cfg.grid().expect("default grid");
    cfg.modulations(t)
        .expect("default modulations")
        .iter()
        .map(|m| filter_function(m, &grid))
        .collect()
}

/// Noiseless in-band overlaps of the double Lorentzian with `filters`.
pub fn overlaps(filters: &[FilterFunction], omega_c: f64) -> Vec<f64> {
    let s = SpectralDensity::double_lorentzian();
    filters
        .iter()
        .map(|f| qspectro::filterfn::signal_overlap(&s, f, omega_c).expect("in-grid cutoff"))
        .collect()
}

/// A chirped continuous modulation with a few harmonics, like the ones
/// the continuous optimizer visits.
pub fn chirp(t: f64) -> ContinuousModulation {
    let terms = (1..=4)
        .map(|k| TrigTerm {
            frequency: k as f64 * 0.9,
            cos: 0.3 / k as f64,
            sin: -0.2 / k as f64,
        })
        .collect();
    ContinuousModulation::new(t, 0.1, 2.0, terms).expect("positive duration")
}

/// The optimizer's frequency grid.
pub fn ocf_grid() -> FrequencyGrid {
    FrequencyGrid::new(30.0, 1501).expect("valid grid")
}
