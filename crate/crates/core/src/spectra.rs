//! One-sided power spectral densities and time-dependent mixtures.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_range, Error, Result};
use crate::filterfn::{signal_overlap, FilterFunction, FrequencyGrid};
use crate::quad::median;

/// `amplitude / (1 + width_scale * (ω - center)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorentzianComponent {
    pub amplitude: f64,
    pub center: f64,
    pub width_scale: f64,
}

impl LorentzianComponent {
    pub fn new(amplitude: f64, center: f64, width_scale: f64) -> Result<Self> {
        ensure_range("amplitude", amplitude, amplitude >= 0.0 && amplitude.is_finite(), "[0, inf)")?;
        ensure_range("center", center, center.is_finite(), "finite")?;
        ensure_range("width_scale", width_scale, width_scale > 0.0 && width_scale.is_finite(), "(0, inf)")?;
        Ok(Self {
            amplitude,
            center,
            width_scale,
        })
    }

    #[inline]
    pub fn eval(&self, omega: f64) -> f64 {
        let d = omega - self.center;
        self.amplitude / (1.0 + self.width_scale * d * d)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Analytic(Vec<LorentzianComponent>),
    Grid { freqs: Vec<f64>, values: Vec<f64> },
}

/// A one-sided spectral density `S(ω)`, `ω ≥ 0`, times a global scale `S₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDensity {
    shape: Shape,
    scale: f64,
}

impl SpectralDensity {
    pub fn lorentzians(components: Vec<LorentzianComponent>) -> Self {
        Self {
            shape: Shape::Analytic(components),
            scale: 1.0,
        }
    }

    /// Grid-sampled spectrum, linearly interpolated between samples.
    pub fn from_grid(freqs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if freqs.len() < 2 || freqs.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "grid spectrum needs at least two (frequency, value) pairs of equal length, got {} and {}",
                freqs.len(),
                values.len()
            )));
        }
        if freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "grid spectrum frequencies must be strictly increasing".into(),
            ));
        }
        if freqs.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid spectrum contains non-finite entries".into()));
        }
        Ok(Self {
            shape: Shape::Grid { freqs, values },
            scale: 1.0,
        })
    }

    /// `S₀ / (1 + (ω-2)²)`.
    pub fn single_lorentzian() -> Self {
        Self::lorentzians(vec![LorentzianComponent {
            amplitude: 1.0,
            center: 2.0,
            width_scale: 1.0,
        }])
    }

    /// `S₀ / (1 + (ω-2)²) + 0.7 S₀ / (1 + 2(ω-6)²)`.
    pub fn double_lorentzian() -> Self {
        Self::lorentzians(vec![
            LorentzianComponent {
                amplitude: 1.0,
                center: 2.0,
                width_scale: 1.0,
            },
            LorentzianComponent {
                amplitude: 0.7,
                center: 6.0,
                width_scale: 2.0,
            },
        ])
    }

    /// Double Lorentzian plus a strong out-of-band peak `5 S₀ / (1 + (ω-20)²)`.
    pub fn leakage_lorentzian() -> Self {
        let mut comps = match Self::double_lorentzian().shape {
            Shape::Analytic(c) => c,
            Shape::Grid { .. } => unreachable!(),
        };
        comps.push(LorentzianComponent {
            amplitude: 5.0,
            center: 20.0,
            width_scale: 1.0,
        });
        Self::lorentzians(comps)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Returns a copy whose global scale is multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale *= factor;
        out
    }

    pub fn components(&self) -> Option<&[LorentzianComponent]> {
        match &self.shape {
            Shape::Analytic(c) => Some(c),
            Shape::Grid { .. } => None,
        }
    }

    /// Frequency range on which the spectrum is defined.
    pub fn domain(&self) -> (f64, f64) {
        match &self.shape {
            Shape::Analytic(_) => (0.0, f64::INFINITY),
            Shape::Grid { freqs, .. } => (freqs[0], freqs[freqs.len() - 1]),
        }
    }

    pub fn eval(&self, omega: f64) -> Result<f64> {
        ensure_range("omega", omega, omega >= 0.0, "[0, inf)")?;
        match &self.shape {
            Shape::Analytic(c) => Ok(self.scale * c.iter().map(|l| l.eval(omega)).sum::<f64>()),
            Shape::Grid { freqs, values } => {
                let (lo, hi) = (freqs[0], freqs[freqs.len() - 1]);
                if omega < lo || omega > hi {
                    return Err(Error::Range {
                        what: "omega",
                        value: omega,
                        range: format!("[{lo}, {hi}] (grid spectrum)"),
                    });
                }
                let i = freqs.partition_point(|&f| f <= omega).min(freqs.len() - 1).max(1);
                let (f0, f1) = (freqs[i - 1], freqs[i]);
                let t = (omega - f0) / (f1 - f0);
                Ok(self.scale * (values[i - 1] + t * (values[i] - values[i - 1])))
            }
        }
    }

    /// Even extension `S(|ω|)` used by the time-domain oracle.
    pub fn eval_symmetric(&self, omega: f64) -> Result<f64> {
        self.eval(omega.abs())
    }

    /// Samples on every point of a frequency grid.
    pub fn sample(&self, grid: &FrequencyGrid) -> Result<Vec<f64>> {
        (0..grid.len()).map(|i| self.eval(grid.omega(i))).collect()
    }

    /// Frequency of the largest sample on `[0, omega_hi]`.
    pub fn dominant_frequency(&self, omega_hi: f64) -> Result<f64> {
        let grid = FrequencyGrid::with_spacing(omega_hi, 1e-3)?;
        let vals = self.sample(&grid)?;
        let (imax, _) = vals
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        Ok(grid.omega(imax))
    }
}

/// `S(ω, t) = sin²(ω_osc t) S₁(ω) + cos²(ω_osc t) S₂(ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSignal {
    pub s1: SpectralDensity,
    pub s2: SpectralDensity,
    pub omega_osc: f64,
}

impl CompositeSignal {
    pub fn new(s1: SpectralDensity, s2: SpectralDensity, omega_osc: f64) -> Self {
        Self { s1, s2, omega_osc }
    }

    /// `(s₁(t), s₂(t))`.
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        let (s, c) = (self.omega_osc * t).sin_cos();
        (s * s, c * c)
    }

    pub fn eval(&self, omega: f64, t: f64) -> Result<f64> {
        ensure_range("t", t, t >= 0.0, "[0, inf)")?;
        let (a, b) = self.coefficients(t);
        Ok(a * self.s1.eval(omega)? + b * self.s2.eval(omega)?)
    }

    /// Frozen snapshot `s₁(t) S₁ + s₂(t) S₂` sampled on a grid.
    pub fn sample_at(&self, grid: &FrequencyGrid, t: f64) -> Result<Vec<f64>> {
        let (a, b) = self.coefficients(t);
        let v1 = self.s1.sample(grid)?;
        let v2 = self.s2.sample(grid)?;
        Ok(v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect())
    }
}

/// Amplitude `S₀` that brings the median overlap `c_k = ∫ S F_k dω`
/// (over `[0, omega_int_max]`) to one. The input scale is not changed;
/// the returned value multiplies it.
pub fn calibrate_amplitude(
    spec: &SpectralDensity,
    filters: &[FilterFunction],
    omega_int_max: f64,
) -> Result<f64> {
    if filters.is_empty() {
        return Err(Error::CalibrationImpossible);
    }
    let overlaps = filters
        .iter()
        .map(|f| signal_overlap(spec, f, omega_int_max))
        .collect::<Result<Vec<_>>>()?;
    calibrate_from_overlaps(&overlaps)
}

pub(crate) fn calibrate_from_overlaps(overlaps: &[f64]) -> Result<f64> {
    if overlaps.iter().all(|&c| c == 0.0) {
        return Err(Error::CalibrationImpossible);
    }
    let m = median(overlaps).ok_or(Error::CalibrationImpossible)?;
    if !(m > 0.0) {
        return Err(Error::CalibrationImpossible);
    }
    Ok(1.0 / m)
}
