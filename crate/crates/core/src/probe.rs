//! Measurement chain: decoherence coefficient, survival probability,
//! detector noise, inversion, and a time-domain reference for `χ`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{ensure_range, Error, Result};
use crate::modulation::ModulationSet;
use crate::quad::adaptive_simpson;
use crate::spectra::{LorentzianComponent, SpectralDensity};

/// Probabilities at or above `½ - SATURATION_EPS` carry no information.
pub const SATURATION_EPS: f64 = 1e-9;

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the independent stream `index` derived from `master`:
/// `master XOR splitmix64(index)`.
pub fn split_seed(master: u64, index: u64) -> u64 {
    master ^ splitmix64(index)
}

pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(master, index))
}

/// Detector and dephasing settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub dp_max: f64,
    pub gamma: f64,
    pub shots: Option<u64>,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(dp_max: f64, gamma: f64, shots: Option<u64>, seed: u64) -> Result<Self> {
        ensure_range("dp_max", dp_max, (0.0..0.5).contains(&dp_max), "[0, 0.5)")?;
        ensure_range("gamma", gamma, gamma >= 0.0 && gamma.is_finite(), "[0, inf)")?;
        if shots == Some(0) {
            return Err(Error::InvalidParameter("shot count must be positive".into()));
        }
        Ok(Self {
            dp_max,
            gamma,
            shots,
            seed,
        })
    }

    /// Same settings, different master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One simulated measurement of filter `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRecord {
    pub k: usize,
    pub c_true: f64,
    pub p_meas: f64,
    pub c_hat: f64,
    pub saturated: bool,
    pub seed: u64,
}

/// `p = ½(1 - e^{-c-ΓT})`.
pub fn survival_probability(c: f64, gamma: f64, duration: f64) -> f64 {
    -0.5 * (-c - gamma * duration).exp_m1()
}

/// Inverted coefficient and saturation flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub c_hat: f64,
    pub saturated: bool,
}

/// `ĉ = -ln(1 - 2p) - ΓT`, clamped below at zero. Probabilities at or
/// above `½ - 1e-9` are flagged and evaluated at that boundary.
pub fn invert_probability(p_meas: f64, gamma: f64, duration: f64) -> Inversion {
    let ceiling = 0.5 - SATURATION_EPS;
    let saturated = p_meas >= ceiling;
    let p = p_meas.clamp(0.0, ceiling);
    let c = -(-2.0 * p).ln_1p() - gamma * duration;
    Inversion {
        c_hat: c.max(0.0),
        saturated,
    }
}

/// `e^{c+ΓT} / c`: relative coefficient error per unit absolute
/// probability error.
pub fn relative_error_factor(c: f64, gamma: f64, duration: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("relative error factor needs c > 0, got {c}")));
    }
    Ok((c + gamma * duration).exp() / c)
}

/// Standard deviation of `ĉ` under uniform detector noise of half-width
/// `dp_max`, to first order.
pub fn coefficient_sigma(c: f64, gamma: f64, duration: f64, dp_max: f64) -> f64 {
    2.0 * (c + gamma * duration).exp() * dp_max / 3f64.sqrt()
}

/// Simulates the readout of filter `k` with noiseless coefficient `c`.
/// Draws come from the stream `split_seed(noise.seed, k)`.
pub fn measure(k: usize, c: f64, noise: &NoiseModel, duration: f64) -> MeasurementRecord {
    let seed = split_seed(noise.seed, k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = survival_probability(c, noise.gamma, duration);
    if let Some(n) = noise.shots {
        let hits = Binomial::new(n, p.clamp(0.0, 1.0)).map(|b| b.sample(&mut rng)).unwrap_or(0);
        p = hits as f64 / n as f64;
    }
    if noise.dp_max > 0.0 {
        p += rng.random_range(-noise.dp_max..=noise.dp_max);
    }
    let p_meas = p.clamp(0.0, 1.0);
    let inv = invert_probability(p_meas, noise.gamma, duration);
    MeasurementRecord {
        k,
        c_true: c,
        p_meas,
        c_hat: inv.c_hat,
        saturated: inv.saturated,
        seed,
    }
}

/// Measures every coefficient; record `k` is 1-based.
pub fn measure_all(coefficients: &[f64], noise: &NoiseModel, duration: f64) -> Vec<MeasurementRecord> {
    coefficients
        .iter()
        .enumerate()
        .map(|(i, &c)| measure(i + 1, c, noise, duration))
        .collect()
}

/// `k,c,p_meas,c_hat,saturated,seed` rows.
pub fn records_csv(records: &[MeasurementRecord]) -> String {
    let mut s = String::from("k,c,p_meas,c_hat,saturated,seed\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.12e},{:.12e},{:.12e},{},{}",
            r.k, r.c_true, r.p_meas, r.c_hat, r.saturated as u8, r.seed
        );
    }
    s
}

// Time-domain reference.
//
// The even extension E(ω) = L(|ω|) of a Lorentzian L is split as
// P - R with P(ω) = L(ω) + L(-ω) (a pair of full-line Lorentzians with an
// exponential-cosine correlation) and R(ω) = L(|ω| + ω₀) handled through
// its second antiderivative. Everything is expressed through
// K(τ) with K'' = g, K(0) = K'(0) = 0.

/// Second antiderivative of the full-line pair `P`.
fn k_pair(l: &LorentzianComponent, tau: f64) -> f64 {
    let sw = l.width_scale.sqrt();
    let beta = Complex64::new(1.0 / sw, -l.center);
    let t = tau.abs();
    let x = beta * t;
    let num = if x.norm() < 1e-4 {
        x * x / 2.0 - x * x * x / 6.0 + x * x * x * x / 24.0
    } else {
        (-x).exp() - 1.0 + x
    };
    l.amplitude / sw * (num / (beta * beta)).re
}

fn xlog(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.abs().ln()
    }
}

/// Second antiderivative of the reflected part `R(ω) = L(|ω| + ω₀)`,
/// `K_R(τ) = (1/π)∫₀^∞ R(ω)(1 - cos ωτ)/ω² dω`, rewritten as an
/// exponentially damped integral over an auxiliary variable `s`.
fn k_reflected(l: &LorentzianComponent, tau: f64) -> f64 {
    let t = tau.abs();
    if t == 0.0 || l.amplitude == 0.0 {
        return 0.0;
    }
    let sw = l.width_scale.sqrt();
    let decay = 1.0 / sw;
    let w0 = l.center;
    let integrand = |s: f64| {
        let re = if s < t { 0.5 * PI * (t - s) } else { 0.0 };
        let im = xlog(s) - 0.5 * xlog(s + t) - 0.5 * xlog(s - t);
        let (sn, cs) = (w0 * s).sin_cos();
        (-decay * s).exp() * (cs * re + sn * im)
    };
    let upper = 60.0 / decay;
    let mut breaks = vec![0.0];
    if t < upper {
        breaks.push(t);
    }
    breaks.push(upper);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let panels = ((w0.abs() * (b - a) / PI).ceil() as usize + 1).min(10_000);
        let h = (b - a) / panels as f64;
        let tol = 1e-13 * (1.0 + t) / panels as f64;
        for p in 0..panels {
            let lo = a + p as f64 * h;
            total += adaptive_simpson(&integrand, lo, lo + h, tol, 40);
        }
    }
    l.amplitude / (PI * sw) * total
}

fn k_total(components: &[LorentzianComponent], scale: f64, tau: f64) -> f64 {
    scale
        * components
            .iter()
            .map(|l| k_pair(l, tau) - k_reflected(l, tau))
            .sum::<f64>()
}

/// `χ = 4 ∬ y(t')y(t'') g(t'-t'') dt'dt''` by exact segment-pair double
/// integration with the correlation function of the even extension of `S`.
/// Independent of the frequency-domain filter code; requires an analytic
/// (Lorentzian mixture) spectrum.
pub fn chi_time_domain(set: &ModulationSet, spec: &SpectralDensity) -> Result<f64> {
    let comps = spec.components().ok_or(Error::UnsupportedOracle)?;
    if spec.scale() == 0.0 || comps.iter().all(|c| c.amplitude == 0.0) {
        return Ok(0.0);
    }
    let segs = set.segments();
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut k = |tau: f64| -> f64 {
        let key = tau.abs().to_bits();
        *cache
            .entry(key)
            .or_insert_with(|| k_total(comps, spec.scale(), tau))
    };
    let mut total = 0.0;
    for &(a, b, yi) in &segs {
        for &(c, d, yj) in &segs {
            let block = k(b - c) + k(a - d) - k(b - d) - k(a - c);
            total += yi * yj * block;
        }
    }
    Ok(4.0 * total)
}
