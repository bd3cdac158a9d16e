use proptest::prelude::*;
use qspectro::experiment::{preset, run_scenario, ExperimentConfig};
use qspectro::filterfn::{filter_function, signal_overlap, FrequencyGrid};
use qspectro::modulation::{fo_sequence, PulseSequence};
use qspectro::probe::chi_time_domain;
use qspectro::reconstruct::{ProtocolConfig, ProtocolSetup};
use qspectro::{LorentzianComponent, NoiseModel, SpectralDensity};

#[test]
fn exported_presets_parse_back() {
    for p in qspectro::experiment::presets() {
        let cfg = p.config();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg, "{}", p.name);
    }
}

#[test]
fn small_scenario_end_to_end() {
    let mut cfg = preset("fig5-dephasing4").unwrap();
    cfg.repetitions = 4;
    let report = run_scenario(&cfg, Some(2)).unwrap();
    let curve = report.artifact("fidelity_curve.csv").unwrap();
    assert!(curve.starts_with("# scenario = fig5-dephasing4"));
    let fo = report.number("fo.gamma_0.4.fidelity_mean").unwrap();
    assert!(fo > 0.9 && fo <= 1.0, "{fo}");
    assert_eq!(report.value("scan_points"), Some("2"));
}

#[test]
fn noiseless_reconstruction_is_near_perfect() {
    let s = SpectralDensity::double_lorentzian();
    let setup = ProtocolSetup::new(&ProtocolConfig::fo_default(), &s, 5.0).unwrap();
    let out = setup.run(&NoiseModel::new(0.0, 0.0, None, 1).unwrap()).unwrap();
    assert!(out.fidelity > 0.98, "{}", out.fidelity);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn spectral_overlap_matches_time_domain(
        amp in 0.2f64..1.0,
        center in 0.0f64..8.0,
        width in 0.3f64..3.0,
        t in 1.0f64..6.0,
        k in 1usize..=20,
    ) {
        let s = SpectralDensity::lorentzians(vec![LorentzianComponent::new(amp, center, width).unwrap()]);
        let set = fo_sequence(k, 20, 11.5, t).unwrap().into();
        let grid = FrequencyGrid::with_spacing(400.0, 0.004).unwrap();
        let spectral = signal_overlap(&s, &filter_function(&set, &grid), 400.0).unwrap();
        let oracle = chi_time_domain(&set, &s).unwrap();
        prop_assert!((spectral - oracle).abs() <= 2e-3 * oracle, "{spectral} vs {oracle}");
    }

    #[test]
    fn overlap_scales_linearly(alpha in 0.0f64..10.0, t in 0.5f64..8.0) {
        let set = PulseSequence::new(vec![0.3 * t, 0.7 * t], t).unwrap().into();
        let grid = FrequencyGrid::with_spacing(60.0, 0.005).unwrap();
        let f = filter_function(&set, &grid);
        let s = SpectralDensity::double_lorentzian();
        let one = signal_overlap(&s, &f, 60.0).unwrap();
        let scaled = signal_overlap(&s.scaled(alpha), &f, 60.0).unwrap();
        prop_assert!((scaled - alpha * one).abs() <= 1e-12 * (1.0 + alpha * one));
    }
}
