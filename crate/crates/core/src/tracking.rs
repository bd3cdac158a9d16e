//! Time-resolved estimation of the mixing coefficients of a composite
//! spectrum `s₁(t) S₁ + s₂(t) S₂`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterfn::{filter_function, filter_function_continuous, overlap_sampled, FilterFunction, FrequencyGrid};
use crate::modulation::fo_sequence;
use crate::ocf::Control;
use crate::probe::{measure_all, split_seed, NoiseModel};
use crate::quad::median;
use crate::reconstruct::{out_of_band_fractions, CoefficientNoise, FoBasis, Retention};
use crate::spectra::CompositeSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingMethod {
    FoBlock,
    OcfPair,
}

impl TrackingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TrackingMethod::FoBlock => "fo-block",
            TrackingMethod::OcfPair => "ocf-pair",
        }
    }
}

/// Recovered coefficient series.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun {
    pub method: TrackingMethod,
    /// Time for one sample, `T_c`.
    pub block_duration: f64,
    pub times: Vec<f64>,
    pub s1_hat: Vec<f64>,
    pub s2_hat: Vec<f64>,
    pub s1_true: Vec<f64>,
    pub s2_true: Vec<f64>,
    /// Calibration factor applied to both components.
    pub scale: f64,
    pub seed: u64,
    omega_osc: f64,
}

impl TrackingRun {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// RMS of `ŝ₂ - s₂` at the sample instants.
    pub fn rms_at_samples(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.s2_hat.iter().zip(&self.s2_true).map(|(a, b)| (a - b).powi(2)).sum();
        (ss / self.len() as f64).sqrt()
    }

    /// RMS of the linear interpolant of `ŝ₂` against `cos²(ω_osc t)` over
    /// the sampled span. Captures aliasing that sample-point errors miss.
    pub fn rms(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return self.rms_at_samples();
        }
        let (t0, t1) = (self.times[0], self.times[n - 1]);
        let m = 4000;
        let h = (t1 - t0) / m as f64;
        let err2 = |i: usize| {
            let t = t0 + h * i as f64;
            let j = self.times.partition_point(|&x| x <= t).saturating_sub(1).min(n - 2);
            let u = (t - self.times[j]) / (self.times[j + 1] - self.times[j]);
            let est = self.s2_hat[j] * (1.0 - u) + self.s2_hat[j + 1] * u;
            (est - (self.omega_osc * t).cos().powi(2)).powi(2)
        };
        let sum: f64 = (1..m).map(err2).sum::<f64>() + 0.5 * (err2(0) + err2(m));
        (sum / m as f64).sqrt()
    }

    /// Mean of `ŝ₁ + ŝ₂ - 1`.
    pub fn sum_drift(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.s1_hat.iter().zip(&self.s2_hat).map(|(a, b)| a + b - 1.0).sum::<f64>() / self.len() as f64
    }

    pub fn to_csv(&self, noise: &NoiseModel) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# method = {}", self.method.name());
        let _ = writeln!(s, "# T_c = {}", self.block_duration);
        let _ = writeln!(s, "# omega_osc = {}", self.omega_osc);
        let _ = writeln!(s, "# gamma = {}", noise.gamma);
        let _ = writeln!(s, "# dp_max = {}", noise.dp_max);
        let _ = writeln!(s, "# seed = {}", self.seed);
        let _ = writeln!(s, "# rms_s2 = {:.10}", self.rms());
        s.push_str("t,s1_hat,s2_hat,s1_true,s2_true\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{:.10},{:.10},{:.10},{:.10}",
                self.times[i], self.s1_hat[i], self.s2_hat[i], self.s1_true[i], self.s2_true[i]
            );
        }
        s
    }
}

/// Shared settings of a tracking experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingSettings {
    pub duration: f64,
    pub horizon: f64,
    pub omega_c: f64,
    pub grid_step: f64,
    pub omega_int_max: f64,
    pub noise: NoiseModel,
}

impl TrackingSettings {
    /// `T = 5`, horizon 500, `ω_c = 10`, integration to 57.5.
    pub fn new(noise: NoiseModel) -> Self {
        Self {
            duration: 5.0,
            horizon: 500.0,
            omega_c: 10.0,
            grid_step: 0.005,
            omega_int_max: 57.5,
            noise,
        }
    }

    fn grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::with_spacing(self.omega_int_max, self.grid_step)
    }
}

fn component_overlaps(sig: &CompositeSignal, filters: &[FilterFunction], limit: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = filters[0].grid();
    let s1 = sig.s1.sample(grid)?;
    let s2 = sig.s2.sample(grid)?;
    Ok(filters
        .iter()
        .map(|f| (overlap_sampled(&s1, f.values(), grid, limit), overlap_sampled(&s2, f.values(), grid, limit)))
        .unzip())
}

/// Factor making the median coefficient of the equal mixture unity.
fn mixture_scale(c1: &[f64], c2: &[f64]) -> Result<f64> {
    let mix: Vec<f64> = c1.iter().zip(c2).map(|(a, b)| 0.5 * (a + b)).collect();
    match median(&mix) {
        Some(m) if m > 0.0 => Ok(1.0 / m),
        _ => Err(Error::CalibrationImpossible),
    }
}

fn solve2(g: Matrix2<f64>, rhs: Vector2<f64>) -> Result<Vector2<f64>> {
    let det = g.determinant();
    let scale = (g[(0, 0)] * g[(1, 1)]).abs().max((g[(0, 1)] * g[(1, 0)]).abs());
    if !(det.abs() > 1e-12 * scale) {
        return Err(Error::DegenerateComponents);
    }
    g.try_inverse().map(|inv| inv * rhs).ok_or(Error::DegenerateComponents)
}

/// FO-block tracking: `k_block` FO filters of duration `T` per sample,
/// `T_c = k_block T`. Within a block each filter sees the coefficients
/// frozen at its own midpoint. `(ŝ₁, ŝ₂)` minimise
/// `‖S̃ - s₁ S̃₁ - s₂ S̃₂‖_c`, where `S̃_i` is the noiseless reconstruction
/// of component `i` with the same retained rank.
pub fn track_fo(
    sig: &CompositeSignal,
    k_block: usize,
    omega_max: f64,
    settings: &TrackingSettings,
    retention: Retention,
) -> Result<TrackingRun> {
    if k_block < 2 {
        return Err(Error::InvalidParameter("an FO block needs at least two filters".into()));
    }
    let t = settings.duration;
    let grid = settings.grid()?;
    let filters: Vec<FilterFunction> = (1..=k_block)
        .into_par_iter()
        .map(|k| fo_sequence(k, k_block, omega_max, t).map(|s| filter_function(&s.into(), &grid)))
        .collect::<Result<_>>()?;
    let (c1, c2) = component_overlaps(sig, &filters, settings.omega_int_max)?;
    let scale = mixture_scale(&c1, &c2)?;
    let c1: Vec<f64> = c1.iter().map(|c| c * scale).collect();
    let c2: Vec<f64> = c2.iter().map(|c| c * scale).collect();
    let basis = FoBasis::new(&filters, settings.omega_c)?;
    let oob = out_of_band_fractions(&filters, settings.omega_c, settings.omega_int_max);
    let tc = k_block as f64 * t;
    let samples = (settings.horizon / tc + 1e-9).floor() as usize;
    let cn = CoefficientNoise {
        gamma: settings.noise.gamma,
        duration: t,
        dp_max: settings.noise.dp_max,
        shots: settings.noise.shots,
    };

    let results: Vec<Result<(f64, f64)>> = (0..samples)
        .into_par_iter()
        .map(|b| {
            let start = b as f64 * tc;
            let coeffs: Vec<f64> = (0..k_block)
                .map(|k| {
                    let (a1, a2) = sig.coefficients(start + (k as f64 + 0.5) * t);
                    a1 * c1[k] + a2 * c2[k]
                })
                .collect();
            let noise = settings.noise.with_seed(split_seed(settings.noise.seed, b as u64));
            let recs = measure_all(&coeffs, &noise, t);
            let keep: Vec<usize> = (0..k_block).filter(|&i| !recs[i].saturated).collect();
            let sub;
            let basis = if keep.len() == k_block {
                &basis
            } else {
                sub = FoBasis::from_overlap(basis.overlap().select_rows(&keep).select_columns(&keep))?;
                &sub
            };
            let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let ch: Vec<f64> = keep.iter().map(|&i| recs[i].c_hat).collect();
            let r = basis.retained(retention, &ch, Some(&cn), Some(&pick(&oob)))?;
            let a = DVector::from_vec(basis.expansion_weights(&ch, r));
            let a1 = DVector::from_vec(basis.expansion_weights(&pick(&c1), r));
            let a2 = DVector::from_vec(basis.expansion_weights(&pick(&c2), r));
            let gram: &DMatrix<f64> = basis.overlap();
            let ip = |x: &DVector<f64>, y: &DVector<f64>| (x.transpose() * gram * y)[(0, 0)];
            let g = Matrix2::new(ip(&a1, &a1), ip(&a1, &a2), ip(&a2, &a1), ip(&a2, &a2));
            let rhs = Vector2::new(ip(&a1, &a), ip(&a2, &a));
            let s = solve2(g, rhs)?;
            Ok((s[0], s[1]))
        })
        .collect();
    assemble(sig, TrackingMethod::FoBlock, tc, results, scale, settings.noise.seed)
}

fn assemble(
    sig: &CompositeSignal,
    method: TrackingMethod,
    tc: f64,
    results: Vec<Result<(f64, f64)>>,
    scale: f64,
    seed: u64,
) -> Result<TrackingRun> {
    let mut run = TrackingRun {
        method,
        block_duration: tc,
        times: Vec::new(),
        s1_hat: Vec::new(),
        s2_hat: Vec::new(),
        s1_true: Vec::new(),
        s2_true: Vec::new(),
        scale,
        seed,
        omega_osc: sig.omega_osc,
    };
    for (b, r) in results.into_iter().enumerate() {
        let (a, c) = r?;
        let t = (b as f64 + 0.5) * tc;
        let (s1, s2) = sig.coefficients(t);
        run.times.push(t);
        run.s1_hat.push(a);
        run.s2_hat.push(c);
        run.s1_true.push(s1);
        run.s2_true.push(s2);
    }
    Ok(run)
}

/// Filter of an optimised control on `grid`.
pub fn control_filter(control: &Control, grid: &FrequencyGrid) -> FilterFunction {
    match control {
        Control::Discrete(m) => filter_function(m, grid),
        Control::Continuous(m) => filter_function_continuous(m, grid),
    }
}

/// OCF-pair tracking: the filter optimised for `S₁` then the one for
/// `S₂`, `T_c = 2T`; solves `G ŝ = ĉ` with `G_ij = ∫ S_j F_i dω`.
pub fn track_ocf(sig: &CompositeSignal, pair: [&Control; 2], settings: &TrackingSettings) -> Result<TrackingRun> {
    let t = settings.duration;
    if pair.iter().any(|c| (c.duration() - t).abs() > 1e-9 * t) {
        return Err(Error::InvalidParameter("OCF controls must match the filter duration".into()));
    }
    let grid = settings.grid()?;
    let filters: Vec<FilterFunction> = pair.iter().map(|c| control_filter(c, &grid)).collect();
    let (g1, g2) = component_overlaps(sig, &filters, settings.omega_int_max)?;
    let scale = mixture_scale(&g1, &g2)?;
    let g = Matrix2::new(g1[0], g2[0], g1[1], g2[1]) * scale;
    // fail early on a singular pair
    solve2(g, Vector2::zeros())?;
    let tc = 2.0 * t;
    let samples = (settings.horizon / tc + 1e-9).floor() as usize;
    let results: Vec<Result<(f64, f64)>> = (0..samples)
        .into_par_iter()
        .map(|b| {
            let start = b as f64 * tc;
            let coeffs: Vec<f64> = (0..2)
                .map(|i| {
                    let (a1, a2) = sig.coefficients(start + (i as f64 + 0.5) * t);
                    a1 * g[(i, 0)] + a2 * g[(i, 1)]
                })
                .collect();
            let noise = settings.noise.with_seed(split_seed(settings.noise.seed, b as u64));
            let recs = measure_all(&coeffs, &noise, t);
            let s = solve2(g, Vector2::new(recs[0].c_hat, recs[1].c_hat))?;
            Ok((s[0], s[1]))
        })
        .collect();
    assemble(sig, TrackingMethod::OcfPair, tc, results, scale, settings.noise.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::staircase_split;
    use crate::spectra::{LorentzianComponent, SpectralDensity};

    pub(crate) fn components() -> (SpectralDensity, SpectralDensity) {
        let s1 = SpectralDensity::single_lorentzian();
        let s2 = SpectralDensity::double_lorentzian();
        (s1, s2)
    }

    fn quiet() -> NoiseModel {
        NoiseModel::new(0.0, 0.0, None, 3).unwrap()
    }

    #[test]
    fn sample_counts() {
        let (s1, s2) = components();
        let sig = CompositeSignal::new(s1, s2, 0.004 * std::f64::consts::PI);
        let st = TrackingSettings::new(quiet());
        let fo = track_fo(&sig, 10, 11.5, &st, Retention::default()).unwrap();
        assert_eq!(fo.len(), 10);
        assert_eq!(fo.block_duration, 50.0);
        let a = Control::Discrete(staircase_split(2.0, 1, 5.0).unwrap());
        let b = Control::Discrete(staircase_split(6.0, 1, 5.0).unwrap());
        let ocf = track_ocf(&sig, [&a, &b], &st).unwrap();
        assert_eq!(ocf.len(), 50);
        assert_eq!(ocf.block_duration, 10.0);
    }

    #[test]
    fn noiseless_static_recovery_is_exact() {
        let (s1, s2) = components();
        let sig = CompositeSignal::new(s1, s2, 0.0);
        let st = TrackingSettings {
            horizon: 100.0,
            ..TrackingSettings::new(quiet())
        };
        let fo = track_fo(&sig, 10, 11.5, &st, Retention::default()).unwrap();
        let a = Control::Discrete(staircase_split(2.0, 1, 5.0).unwrap());
        let b = Control::Discrete(staircase_split(6.0, 1, 5.0).unwrap());
        let ocf = track_ocf(&sig, [&a, &b], &st).unwrap();
        for run in [&fo, &ocf] {
            for (x, y) in run.s1_hat.iter().zip(&run.s2_hat) {
                assert!(x.abs() < 1e-6 && (y - 1.0).abs() < 1e-6, "{:?}: {x} {y}", run.method);
            }
            assert!(run.rms() < 1e-6);
        }
    }

    #[test]
    fn identical_components_are_degenerate() {
        let s = SpectralDensity::single_lorentzian();
        let sig = CompositeSignal::new(s.clone(), s.scaled(2.0), 0.01);
        let st = TrackingSettings::new(quiet());
        assert_eq!(track_fo(&sig, 10, 11.5, &st, Retention::default()), Err(Error::DegenerateComponents));
        let a = Control::Discrete(staircase_split(2.0, 1, 5.0).unwrap());
        let b = Control::Discrete(staircase_split(6.0, 1, 5.0).unwrap());
        assert_eq!(track_ocf(&sig, [&a, &b], &st), Err(Error::DegenerateComponents));
    }

    #[test]
    fn rms_sees_aliasing() {
        // samples of cos² exactly at its 0.5 crossings
        let w = 0.01 * std::f64::consts::PI;
        let sig = CompositeSignal::new(
            SpectralDensity::lorentzians(vec![LorentzianComponent::new(1.0, 2.0, 1.0).unwrap()]),
            SpectralDensity::double_lorentzian(),
            w,
        );
        let run = assemble(&sig, TrackingMethod::FoBlock, 50.0, (0..10).map(|_| Ok((0.5, 0.5))).collect(), 1.0, 0).unwrap();
        assert!(run.rms_at_samples() < 1e-12);
        assert!(run.rms() > 0.3);
    }
}
