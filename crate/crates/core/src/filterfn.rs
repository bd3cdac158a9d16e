//! Filter functions `F(ω) = (4/π)|Y(ω)|²` and frequency-domain inner products.

use std::f64::consts::{FRAC_2_PI, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{ensure_range, Error, Result};
use crate::modulation::{ContinuousModulation, ModulationSet};
use crate::quad::{adaptive_simpson_complex, trapezoid_by};
use crate::spectra::SpectralDensity;

const FOUR_OVER_PI: f64 = 4.0 / PI;
const SMALL_OMEGA_T: f64 = 1e-6;
/// Phasor recurrences are re-synchronised with an exact exponential this often.
const RESYNC: usize = 64;

/// Uniform grid `ω_i = i·Δω`, `i = 0..M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    step: f64,
    len: usize,
}

impl FrequencyGrid {
    /// `M` samples spanning `[0, omega_max]`.
    pub fn new(omega_max: f64, len: usize) -> Result<Self> {
        ensure_range("omega_max", omega_max, omega_max > 0.0 && omega_max.is_finite(), "(0, inf)")?;
        if len < 2 {
            return Err(Error::InvalidParameter(format!("grid needs M >= 2 samples, got {len}")));
        }
        Ok(Self {
            step: omega_max / (len - 1) as f64,
            len,
        })
    }

    /// Smallest grid with spacing `step` that reaches `omega_max`.
    pub fn with_spacing(omega_max: f64, step: f64) -> Result<Self> {
        ensure_range("omega_max", omega_max, omega_max > 0.0 && omega_max.is_finite(), "(0, inf)")?;
        ensure_range("grid spacing", step, step > 0.0 && step.is_finite(), "(0, inf)")?;
        let intervals = (omega_max / step - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            step,
            len: intervals + 1,
        })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn omega(&self, i: usize) -> f64 {
        i as f64 * self.step
    }

    pub fn omega_max(&self) -> f64 {
        self.omega(self.len - 1)
    }

    pub fn omegas(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.omega(i)).collect()
    }

    /// Trapezoid of `f(i)` over `[0, cutoff]`.
    pub fn integrate<F: Fn(usize) -> f64 + Copy>(&self, cutoff: f64, f: F) -> f64 {
        trapezoid_by(self.len, self.step, cutoff, f)
    }

    fn check_cutoff(&self, cutoff: f64) -> Result<()> {
        ensure_range(
            "cutoff",
            cutoff,
            cutoff >= 0.0 && cutoff <= self.omega_max() * (1.0 + 1e-12),
            &format!("[0, {}] (grid range)", self.omega_max()),
        )
    }
}

/// What produced a filter.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Pulses(ModulationSet),
    Continuous(ContinuousModulation),
}

/// Filter function sampled on a frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterFunction {
    grid: FrequencyGrid,
    values: Vec<f64>,
    generator: Option<Generator>,
    duration: f64,
}

impl FilterFunction {
    /// Wraps raw samples, e.g. for synthetic test filters.
    pub fn from_values(grid: FrequencyGrid, values: Vec<f64>, duration: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            grid,
            values,
            generator: None,
            duration,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_ref()
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// `∫₀^cutoff F dω`.
    pub fn area(&self, cutoff: f64) -> f64 {
        self.grid.integrate(cutoff, |i| self.values[i])
    }

    /// Upper estimate of `∫_Ω^∞ F dω` from the `1/ω²` envelope; only
    /// available for π-pulse generators.
    pub fn tail_bound(&self, omega: f64) -> Option<f64> {
        match &self.generator {
            Some(Generator::Pulses(set)) => Some(tail_bound(set, omega)),
            _ => None,
        }
    }

    /// Two-column CSV `omega,F`.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 40);
        s.push_str(&format!("# duration = {}\nomega,F\n", self.duration));
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{:.12e},{:.12e}\n", self.grid.omega(i), v));
        }
        s
    }
}

fn series_segment(a: f64, b: f64, omega: f64) -> Complex64 {
    // (e^{iωb} - e^{iωa}) / (iω) to third order
    let d1 = b - a;
    let d2 = b * b - a * a;
    let d3 = b * b * b - a * a * a;
    Complex64::new(d1 - omega * omega * d3 / 6.0, omega * d2 / 2.0)
}

/// `Y(ω) = ∫₀ᵀ y(t) e^{iωt} dt` in closed form (summed over qubits).
pub fn fourier_piecewise(set: &ModulationSet, omega: f64) -> Complex64 {
    let t_end = set.duration();
    if (omega * t_end).abs() < SMALL_OMEGA_T {
        return set
            .segments()
            .iter()
            .map(|&(a, b, y)| series_segment(a, b, omega) * y)
            .sum();
    }
    let (y0, yt, jumps) = set.jumps();
    let mut num = Complex64::cis(omega * t_end) * yt - y0;
    for (t, d) in jumps {
        num -= Complex64::cis(omega * t) * d;
    }
    num / Complex64::new(0.0, omega)
}

/// Jump amplitudes entering the asymptotic expansion of `Y`.
fn edge_amplitudes(set: &ModulationSet) -> Vec<(f64, f64)> {
    let (y0, yt, jumps) = set.jumps();
    let mut v = Vec::with_capacity(jumps.len() + 2);
    v.push((0.0, -y0));
    v.push((set.duration(), yt));
    v.extend(jumps.into_iter().map(|(t, d)| (t, -d)));
    v
}

/// `(4/π) Σ a_j² / Ω`: the phase-averaged tail `∫_Ω^∞ F dω`.
pub fn tail_bound(set: &ModulationSet, omega: f64) -> f64 {
    let sum_sq: f64 = edge_amplitudes(set).iter().map(|(_, a)| a * a).sum();
    FOUR_OVER_PI * sum_sq / omega
}

/// Evaluates `Y` on every grid point with phasor recurrences.
fn fourier_on_grid(set: &ModulationSet, grid: &FrequencyGrid) -> Vec<Complex64> {
    let edges = edge_amplitudes(set);
    let h = grid.step();
    let t_end = set.duration();
    let steps: Vec<Complex64> = edges.iter().map(|(t, _)| Complex64::cis(h * t)).collect();
    let mut out = vec![Complex64::new(0.0, 0.0); grid.len()];
    out.par_chunks_mut(RESYNC).enumerate().for_each(|(block, chunk)| {
        let i0 = block * RESYNC;
        let mut phasors: Vec<Complex64> = edges
            .iter()
            .map(|(t, _)| Complex64::cis(grid.omega(i0) * t))
            .collect();
        for (off, slot) in chunk.iter_mut().enumerate() {
            let i = i0 + off;
            let w = grid.omega(i);
            if (w * t_end).abs() < SMALL_OMEGA_T {
                *slot = fourier_piecewise(set, w);
            } else {
                let mut num = Complex64::new(0.0, 0.0);
                for (p, (_, a)) in phasors.iter().zip(&edges) {
                    num += p * a;
                }
                *slot = num / Complex64::new(0.0, w);
            }
            for (p, s) in phasors.iter_mut().zip(&steps) {
                *p *= s;
            }
        }
    });
    out
}

/// `F = (4/π)|Y|²` for a π-pulse modulation.
pub fn filter_function(set: &ModulationSet, grid: &FrequencyGrid) -> FilterFunction {
    let values = fourier_on_grid(set, grid)
        .into_iter()
        .map(|y| FOUR_OVER_PI * y.norm_sqr())
        .collect();
    FilterFunction {
        grid: *grid,
        values,
        generator: Some(Generator::Pulses(set.clone())),
        duration: set.duration(),
    }
}

/// `U(ω) = ∫₀ᵀ e^{iφ(t)} e^{iωt} dt` by panelled adaptive Simpson.
fn phase_transform(m: &ContinuousModulation, omega: f64) -> Complex64 {
    let t_end = m.duration;
    if m.terms.is_empty() {
        let w = omega + m.carrier;
        let base = Complex64::cis(m.offset);
        let seg = if (w * t_end).abs() < SMALL_OMEGA_T {
            series_segment(0.0, t_end, w)
        } else {
            (Complex64::cis(w * t_end) - 1.0) / Complex64::new(0.0, w)
        };
        return base * seg;
    }
    let rate = m.max_rate() + omega.abs();
    let panels = ((rate * t_end / PI).ceil() as usize).clamp(1, 100_000);
    let tol = 1e-8 * t_end / panels as f64;
    let f = |t: f64| Complex64::cis(m.phase(t) + omega * t);
    let width = t_end / panels as f64;
    (0..panels)
        .map(|p| {
            let a = p as f64 * width;
            adaptive_simpson_complex(&f, a, a + width, tol, 30)
        })
        .sum()
}

/// `F = (4/π)(|Y|² + |Z|²) = (2/π)(|U(ω)|² + |U(-ω)|²)` for `y = cos φ`,
/// `z = sin φ`, evaluated by adaptive quadrature.
pub fn filter_function_continuous(m: &ContinuousModulation, grid: &FrequencyGrid) -> FilterFunction {
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let w = grid.omega(i);
            FRAC_2_PI * (phase_transform(m, w).norm_sqr() + phase_transform(m, -w).norm_sqr())
        })
        .collect();
    FilterFunction {
        grid: *grid,
        values,
        generator: Some(Generator::Continuous(m.clone())),
        duration: m.duration,
    }
}

/// Linear-interpolation (Filon) weights `∫₀¹ (1-s) e^{iθs} ds`, `∫₀¹ s e^{iθs} ds`.
fn filon_weights(theta: f64) -> (Complex64, Complex64) {
    if theta.abs() < 1e-3 {
        let t2 = theta * theta;
        let a = Complex64::new(0.5 - t2 / 24.0, theta / 6.0 - theta * t2 / 120.0);
        let b = Complex64::new(0.5 - t2 / 8.0, theta / 3.0 - theta * t2 / 30.0);
        return (a, b);
    }
    let e = Complex64::cis(theta);
    let i_theta = Complex64::new(0.0, theta);
    let whole = (e - 1.0) / i_theta;
    let b = e / i_theta + (e - 1.0) / (theta * theta);
    (whole - b, b)
}

/// Approximate continuous-modulation filter from `samples` uniform phase
/// samples, transforming the piecewise-linear interpolant of `e^{iφ}`
/// exactly. Much cheaper than [`filter_function_continuous`]; used inside
/// optimizers.
pub fn filter_values_continuous_fast(m: &ContinuousModulation, grid: &FrequencyGrid, samples: usize) -> Vec<f64> {
    let n = samples.max(2);
    let h = m.duration / (n - 1) as f64;
    let u: Vec<Complex64> = (0..n).map(|j| Complex64::cis(m.phase(j as f64 * h))).collect();
    // With S = Σ_j e^{iθj} u_j, the Filon sum Σ_j e^{iθj}(a u_j + b u_{j+1})
    // is a (S - e^{iθ(n-1)} u_{n-1}) + b e^{-iθ} (S - u_0). One pass gives ±ω.
    let pair = |w: f64| -> f64 {
        let theta = w * h;
        let step = Complex64::cis(theta);
        let mut ph = Complex64::new(1.0, 0.0);
        let mut sp = Complex64::new(0.0, 0.0);
        let mut sm = Complex64::new(0.0, 0.0);
        for (j, uj) in u.iter().enumerate() {
            if j % RESYNC == 0 {
                ph = Complex64::cis(theta * j as f64);
            } else {
                ph *= step;
            }
            sp += ph * uj;
            sm += ph.conj() * uj;
        }
        let last = u[n - 1];
        let finish = |s: Complex64, ph_end: Complex64, step: Complex64, theta: f64| {
            let (a, b) = filon_weights(theta);
            (a * (s - ph_end * last) + b * step.conj() * (s - u[0])) * h
        };
        let plus = finish(sp, ph, step, theta);
        let minus = finish(sm, ph.conj(), step.conj(), -theta);
        FRAC_2_PI * (plus.norm_sqr() + minus.norm_sqr())
    };
    (0..grid.len()).into_par_iter().map(|i| pair(grid.omega(i))).collect()
}

fn check_same_grid(filters: &[FilterFunction]) -> Result<FrequencyGrid> {
    let grid = *filters
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty filter list".into()))?
        .grid();
    if filters.iter().any(|f| *f.grid() != grid) {
        return Err(Error::GridMismatch);
    }
    Ok(grid)
}

/// `A_kl = ∫₀^{ω_c} F_k F_l dω`, exactly symmetric.
pub fn overlap_matrix(filters: &[FilterFunction], omega_c: f64) -> Result<DMatrix<f64>> {
    let grid = check_same_grid(filters)?;
    grid.check_cutoff(omega_c)?;
    let k = filters.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (filters[i].values(), filters[j].values());
            grid.integrate(omega_c, |n| a[n] * b[n])
        })
        .collect();
    let mut m = DMatrix::zeros(k, k);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Ok(m)
}

/// `c = ∫₀^{ω_int_max} S F dω`.
pub fn signal_overlap(spec: &SpectralDensity, filter: &FilterFunction, omega_int_max: f64) -> Result<f64> {
    let grid = filter.grid();
    grid.check_cutoff(omega_int_max)?;
    let last = ((omega_int_max / grid.step()).ceil() as usize + 1).min(grid.len());
    let s = (0..last).map(|i| spec.eval(grid.omega(i))).collect::<Result<Vec<_>>>()?;
    Ok(overlap_sampled(&s, filter.values(), grid, omega_int_max))
}

/// Overlap of pre-sampled spectrum values with filter samples.
pub fn overlap_sampled(spec_values: &[f64], filter_values: &[f64], grid: &FrequencyGrid, cutoff: f64) -> f64 {
    let n = spec_values.len().min(filter_values.len());
    trapezoid_by(n, grid.step(), cutoff, |i| spec_values[i] * filter_values[i])
}

/// `‖f‖_c = (∫₀^{ω_c} f² dω)^{1/2}` of grid samples.
pub fn continuous_norm(values: &[f64], grid: &FrequencyGrid, omega_c: f64) -> Result<f64> {
    grid.check_cutoff(omega_c)?;
    if values.len() != grid.len() {
        return Err(Error::GridMismatch);
    }
    Ok(grid.integrate(omega_c, |i| values[i] * values[i]).sqrt())
}

/// `‖S‖_c` for a spectral density sampled on `grid`.
pub fn spectrum_norm(spec: &SpectralDensity, grid: &FrequencyGrid, omega_c: f64) -> Result<f64> {
    continuous_norm(&spec.sample(grid)?, grid, omega_c)
}

/// Outcome of a Parseval check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsevalReport {
    /// Grid integral up to `omega_cut`.
    pub grid_integral: f64,
    /// Analytic tail added beyond `omega_cut`.
    pub tail: f64,
    /// `4 ∫ y² dt`.
    pub expected: f64,
    pub omega_cut: f64,
    pub relative_error: f64,
}

/// Truncation frequency for the Parseval check: `200/T`, raised so that
/// it also lies far above the modulation's mean switching rate.
pub fn parseval_cutoff(set: &ModulationSet) -> f64 {
    let t_end = set.duration();
    let (_, _, jumps) = set.jumps();
    let rate = (jumps.len() + 1) as f64 / t_end;
    (200.0 / t_end).max(40.0 * PI * rate)
}

/// Compares `∫₀^∞ F dω` (grid integral plus analytic tail) with `4 ∫ y² dt`.
pub fn parseval_check(set: &ModulationSet, step: f64) -> Result<ParsevalReport> {
    let omega_cut = parseval_cutoff(set);
    let grid = FrequencyGrid::with_spacing(omega_cut, step)?;
    let f = filter_function(set, &grid);
    let omega_cut = grid.omega_max();
    let grid_integral = f.area(omega_cut);
    let tail = tail_bound(set, omega_cut);
    let expected = 4.0 * set.square_integral();
    let relative_error = if expected > 0.0 {
        (grid_integral + tail - expected).abs() / expected
    } else {
        (grid_integral + tail).abs()
    };
    Ok(ParsevalReport {
        grid_integral,
        tail,
        expected,
        omega_cut,
        relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::{as_sequence, fo_sequence, staircase_split, PulseSequence, TrigTerm};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn free(t: f64) -> ModulationSet {
        PulseSequence::free(t).unwrap().into()
    }

    #[test]
    fn constant_modulation_transform() {
        let set = free(5.0);
        let y0 = fourier_piecewise(&set, 0.0);
        assert_relative_eq!(y0.re, 5.0);
        assert_eq!(y0.im, 0.0);
        let y = fourier_piecewise(&set, PI / 5.0);
        assert!(y.re.abs() < 1e-14);
        assert_relative_eq!(y.im, 10.0 / PI, epsilon = 1e-13);
        assert_relative_eq!(y.im, 3.1831, epsilon = 1e-4);
    }

    #[test]
    fn centered_switch_cancels_at_zero() {
        let set: ModulationSet = PulseSequence::new(vec![2.5], 5.0).unwrap().into();
        assert!(fourier_piecewise(&set, 0.0).norm() < 1e-15);
        let grid = FrequencyGrid::new(10.0, 11).unwrap();
        assert!(filter_function(&set, &grid).values()[0].abs() < 1e-15);
    }

    #[test]
    fn free_filter_at_zero() {
        let grid = FrequencyGrid::new(10.0, 101).unwrap();
        let f = filter_function(&free(5.0), &grid);
        assert_relative_eq!(f.values()[0], 4.0 / PI * 25.0, epsilon = 1e-12);
        assert_relative_eq!(f.values()[0], 31.8310, epsilon = 1e-4);
    }

    #[test]
    fn small_omega_series_is_continuous() {
        let set: ModulationSet = fo_sequence(7, 20, 11.5, 5.0).unwrap().into();
        let w = 1.01e-6 / 5.0;
        let closed = fourier_piecewise(&set, w);
        let series: Complex64 = set
            .segments()
            .iter()
            .map(|&(a, b, y)| series_segment(a, b, w) * y)
            .sum();
        assert!((closed - series).norm() < 1e-9);
        assert!(fourier_piecewise(&set, 0.99e-6 / 5.0).is_finite());
    }

    #[test]
    fn grid_recurrence_matches_direct_evaluation() {
        let set = staircase_split(6.3, 3, 9.0).unwrap();
        let grid = FrequencyGrid::with_spacing(60.0, 0.005).unwrap();
        let f = filter_function(&set, &grid);
        for i in (0..grid.len()).step_by(997) {
            let direct = 4.0 / PI * fourier_piecewise(&set, grid.omega(i)).norm_sqr();
            assert!((f.values()[i] - direct).abs() <= 1e-10 * direct.max(1.0));
        }
    }

    #[test]
    fn continuous_zero_phase_matches_free_filter() {
        let grid = FrequencyGrid::new(30.0, 301).unwrap();
        let a = filter_function(&free(5.0), &grid);
        let b = filter_function_continuous(&ContinuousModulation::zero(5.0).unwrap(), &grid);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * x.max(1e-3));
        }
    }

    #[test]
    fn continuous_paths_agree() {
        let m = ContinuousModulation::new(
            5.0,
            0.2,
            1.5,
            vec![
                TrigTerm { frequency: 2.0, cos: 0.7, sin: -0.3 },
                TrigTerm { frequency: 5.5, cos: 0.1, sin: 0.4 },
            ],
        )
        .unwrap();
        let grid = FrequencyGrid::new(30.0, 121).unwrap();
        let exact = filter_function_continuous(&m, &grid);
        let fast = filter_values_continuous_fast(&m, &grid, 4000);
        let scale = exact.values().iter().cloned().fold(0.0, f64::max);
        for (x, y) in exact.values().iter().zip(&fast) {
            assert!((x - y).abs() < 1e-4 * scale, "{x} vs {y}");
        }
        // Parseval for the continuous case: y² + z² = 1
        let wide = FrequencyGrid::with_spacing(400.0, 0.01).unwrap();
        let fw = filter_values_continuous_fast(&m, &wide, 20000);
        let area = wide.integrate(400.0, |i| fw[i]);
        assert!((area - 4.0 * 5.0).abs() / 20.0 < 5e-3, "area {area}");
    }

    #[test]
    fn overlap_of_constant_filter() {
        let grid = FrequencyGrid::new(10.0, 1001).unwrap();
        let f = FilterFunction::from_values(grid, vec![1.0; 1001], 1.0).unwrap();
        let a = overlap_matrix(&[f], 10.0).unwrap();
        assert_relative_eq!(a[(0, 0)], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_boxes_do_not_overlap() {
        let grid = FrequencyGrid::new(10.0, 1001).unwrap();
        let b1: Vec<f64> = (0..1001).map(|i| if i < 400 { 1.0 } else { 0.0 }).collect();
        let b2: Vec<f64> = (0..1001).map(|i| if i > 600 { 1.0 } else { 0.0 }).collect();
        let fs = [
            FilterFunction::from_values(grid, b1, 1.0).unwrap(),
            FilterFunction::from_values(grid, b2, 1.0).unwrap(),
        ];
        let a = overlap_matrix(&fs, 10.0).unwrap();
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 0)], 0.0);
    }

    #[test]
    fn overlap_matrix_is_exactly_symmetric_and_rejects_mixed_grids() {
        let grid = FrequencyGrid::with_spacing(57.5, 0.005).unwrap();
        let fs: Vec<_> = (1..=6)
            .map(|k| filter_function(&fo_sequence(k, 20, 11.5, 5.0).unwrap().into(), &grid))
            .collect();
        let a = overlap_matrix(&fs, 10.0).unwrap();
        assert_eq!(a.clone() - a.transpose(), DMatrix::zeros(6, 6));
        let other = FrequencyGrid::with_spacing(57.5, 0.01).unwrap();
        let g = filter_function(&free(5.0), &other);
        let mut mixed = fs.clone();
        mixed.push(g);
        assert_eq!(overlap_matrix(&mixed, 10.0), Err(Error::GridMismatch));
    }

    #[test]
    fn zero_spectrum_has_zero_overlap() {
        let grid = FrequencyGrid::new(20.0, 201).unwrap();
        let f = filter_function(&free(5.0), &grid);
        let s = SpectralDensity::double_lorentzian().scaled(0.0);
        assert_eq!(signal_overlap(&s, &f, 20.0).unwrap(), 0.0);
    }

    #[test]
    fn flat_spectrum_overlap_is_parseval() {
        // S = S₀ over the whole support of a free-evolution filter
        let t = 5.0;
        let grid = FrequencyGrid::with_spacing(400.0, 0.005).unwrap();
        let f = filter_function(&free(t), &grid);
        let s = SpectralDensity::from_grid(vec![0.0, 400.0], vec![0.3, 0.3]).unwrap();
        let c = signal_overlap(&s, &f, 400.0).unwrap() + 0.3 * f.tail_bound(400.0).unwrap();
        assert_relative_eq!(c, 4.0 * 0.3 * t, max_relative = 1e-3);
    }

    #[test]
    fn norm_examples() {
        let grid = FrequencyGrid::new(10.0, 1001).unwrap();
        let ones = vec![1.0; 1001];
        assert_relative_eq!(continuous_norm(&ones, &grid, 10.0).unwrap(), 10f64.sqrt(), epsilon = 1e-12);
        let threes = vec![-3.0; 1001];
        assert_relative_eq!(continuous_norm(&threes, &grid, 10.0).unwrap(), 3.0 * 10f64.sqrt(), epsilon = 1e-12);
        assert!(continuous_norm(&ones, &grid, 11.0).is_err());
    }

    #[test]
    fn parseval_holds_for_protocol_filters() {
        for t in [1.0, 5.0, 25.0] {
            for k in [1, 2, 10, 20] {
                let fo: ModulationSet = fo_sequence(k, 20, 11.5, t).unwrap().into();
                let asq: ModulationSet = as_sequence(k, 20, 10.0, t).unwrap().into();
                for set in [fo, asq] {
                    let r = parseval_check(&set, 0.005).unwrap();
                    assert!(r.relative_error < 5e-3, "T={t} k={k}: {r:?}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn filter_is_nonnegative_and_finite(w in 0.0f64..12.0, n in 1usize..5, t in 0.5f64..10.0) {
            let set = staircase_split(w, n, t).unwrap();
            let grid = FrequencyGrid::new(40.0, 801).unwrap();
            let f = filter_function(&set, &grid);
            prop_assert!(f.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        }

        #[test]
        fn norm_parallelogram(a in 0.1f64..12.0, b in 0.1f64..12.0) {
            let grid = FrequencyGrid::new(20.0, 2001).unwrap();
            let f1 = filter_function(&fo_sequence(2, 20, a, 5.0).unwrap().into(), &grid);
            let f2 = filter_function(&fo_sequence(3, 20, b, 5.0).unwrap().into(), &grid);
            let sum: Vec<f64> = f1.values().iter().zip(f2.values()).map(|(x, y)| x + y).collect();
            let n1 = continuous_norm(f1.values(), &grid, 10.0).unwrap();
            let n2 = continuous_norm(f2.values(), &grid, 10.0).unwrap();
            let cross = grid.integrate(10.0, |i| f1.values()[i] * f2.values()[i]);
            let ns = continuous_norm(&sum, &grid, 10.0).unwrap();
            prop_assert!((ns * ns - (n1 * n1 + n2 * n2 + 2.0 * cross)).abs() <= 1e-9 * ns * ns);
        }

        #[test]
        fn norm_is_homogeneous(alpha in -5.0f64..5.0) {
            let grid = FrequencyGrid::new(20.0, 501).unwrap();
            let f = filter_function(&fo_sequence(4, 20, 11.5, 5.0).unwrap().into(), &grid);
            let scaled: Vec<f64> = f.values().iter().map(|v| alpha * v).collect();
            let n = continuous_norm(f.values(), &grid, 10.0).unwrap();
            let ns = continuous_norm(&scaled, &grid, 10.0).unwrap();
            prop_assert!((ns - alpha.abs() * n).abs() <= 1e-12 * n.max(1.0));
        }
    }
}
