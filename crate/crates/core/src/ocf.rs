//! Optimal-control filters: maximise the normalised overlap
//! `ξ = ∫ S F dω / ‖F‖_c` with a dCRAB-style randomised-basis search.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterfn::{continuous_norm, filter_function, filter_values_continuous_fast, overlap_sampled, FrequencyGrid};
use crate::probe::split_seed;
use crate::modulation::{staircase_split, ContinuousModulation, ModulationSet, PulseSequence, TrigTerm};
use crate::simplex::{minimize, NelderMead};
use crate::spectra::SpectralDensity;

/// A control whose filter is optimised.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Discrete(ModulationSet),
    Continuous(ContinuousModulation),
}

impl Control {
    pub fn duration(&self) -> f64 {
        match self {
            Control::Discrete(m) => m.duration(),
            Control::Continuous(m) => m.duration,
        }
    }
}

/// Optimiser knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcfBudget {
    pub superiterations: usize,
    /// Nelder–Mead evaluations per superiteration.
    pub inner_evaluations: usize,
    /// Random basis functions per superiteration.
    pub basis_size: usize,
    /// Phase samples for continuous filters.
    pub time_samples: usize,
    /// Independent seeded restarts; the best is kept.
    pub restarts: usize,
}

impl Default for OcfBudget {
    fn default() -> Self {
        Self {
            superiterations: 10,
            inner_evaluations: 300,
            basis_size: 8,
            time_samples: 400,
            restarts: 1,
        }
    }
}

/// What to optimise.
#[derive(Debug, Clone, PartialEq)]
pub struct OcfProblem {
    pub spectrum: SpectralDensity,
    /// `None` selects a continuous phase modulation.
    pub qubits: Option<usize>,
    pub duration: f64,
    pub omega_c: f64,
    /// `0` disables the out-of-band penalty.
    pub penalty_weight: f64,
    pub grid: FrequencyGrid,
    pub budget: OcfBudget,
    pub seed: u64,
}

impl OcfProblem {
    /// Grid `[0, 30]` with 1501 points, `ω_c = 10`, unit penalty.
    pub fn new(spectrum: SpectralDensity, qubits: Option<usize>, duration: f64, seed: u64) -> Result<Self> {
        let p = Self {
            spectrum,
            qubits,
            duration,
            omega_c: 10.0,
            penalty_weight: 1.0,
            grid: FrequencyGrid::new(30.0, 1501)?,
            budget: OcfBudget::default(),
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Range {
                what: "T",
                value: self.duration,
                range: "(0, inf)".into(),
            });
        }
        if self.qubits == Some(0) {
            return Err(Error::InvalidParameter("qubit count must be at least 1".into()));
        }
        if !(self.omega_c > 0.0 && self.omega_c <= self.grid.omega_max()) {
            return Err(Error::Range {
                what: "omega_c",
                value: self.omega_c,
                range: format!("(0, {}]", self.grid.omega_max()),
            });
        }
        if !(self.penalty_weight >= 0.0) {
            return Err(Error::InvalidParameter("penalty weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Components of the objective for one filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub xi: f64,
    /// `ξ / ‖S‖_c`.
    pub fidelity: f64,
    /// Fraction of `∫F` above `ω_c`.
    pub out_of_band: f64,
    pub penalty: f64,
    /// `ξ - penalty`.
    pub objective: f64,
}

/// Sampled target and norms, reused across evaluations.
#[derive(Debug, Clone)]
pub struct Objective {
    grid: FrequencyGrid,
    target: Vec<f64>,
    target_norm: f64,
    omega_c: f64,
    penalty_weight: f64,
}

impl Objective {
    pub fn new(spectrum: &SpectralDensity, grid: FrequencyGrid, omega_c: f64, penalty_weight: f64) -> Result<Self> {
        let target = spectrum.sample(&grid)?;
        let target_norm = continuous_norm(&target, &grid, omega_c)?;
        if !(target_norm > 0.0) {
            return Err(Error::UndefinedObjective);
        }
        Ok(Self {
            grid,
            target,
            target_norm,
            omega_c,
            penalty_weight,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn target_norm(&self) -> f64 {
        self.target_norm
    }

    pub fn evaluate(&self, filter: &[f64]) -> Result<ObjectiveValue> {
        let norm = continuous_norm(filter, &self.grid, self.omega_c)?;
        if !(norm > 0.0) {
            return Err(Error::UndefinedObjective);
        }
        let top = self.grid.omega_max();
        let xi = overlap_sampled(&self.target, filter, &self.grid, top) / norm;
        let total = self.grid.integrate(top, |i| filter[i]);
        let inband = self.grid.integrate(self.omega_c, |i| filter[i]);
        let out_of_band = if total > 0.0 { ((total - inband) / total).max(0.0) } else { 0.0 };
        let penalty = self.penalty_weight * self.target_norm * out_of_band;
        Ok(ObjectiveValue {
            xi,
            fidelity: xi / self.target_norm,
            out_of_band,
            penalty,
            objective: xi - penalty,
        })
    }

    pub fn filter_values(&self, control: &Control, time_samples: usize) -> Vec<f64> {
        match control {
            Control::Discrete(m) => filter_function(m, &self.grid).values().to_vec(),
            Control::Continuous(m) => filter_values_continuous_fast(m, &self.grid, time_samples),
        }
    }

    pub fn evaluate_control(&self, control: &Control, time_samples: usize) -> Result<ObjectiveValue> {
        self.evaluate(&self.filter_values(control, time_samples))
    }
}

/// `ξ - w·‖S‖_c·(out-of-band fraction)` for one control.
pub fn xi_objective(control: &Control, spectrum: &SpectralDensity, omega_c: f64, penalty_weight: f64, grid: FrequencyGrid) -> Result<ObjectiveValue> {
    Objective::new(spectrum, grid, omega_c, penalty_weight)?.evaluate_control(control, OcfBudget::default().time_samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcfSolution {
    pub control: Control,
    pub value: ObjectiveValue,
    pub evaluations: usize,
    /// Best objective after the initial guess and after each superiteration.
    pub trace: Vec<f64>,
}

impl OcfSolution {
    pub fn xi(&self) -> f64 {
        self.value.xi
    }

    pub fn fidelity(&self) -> f64 {
        self.value.fidelity
    }

    /// Switch-time CSV (discrete) or coefficient list (continuous) with the
    /// achieved objective in the header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# xi = {:.12e}", self.value.xi);
        let _ = writeln!(s, "# fidelity = {:.12}", self.value.fidelity);
        let _ = writeln!(s, "# out_of_band = {:.12e}", self.value.out_of_band);
        let _ = writeln!(s, "# evaluations = {}", self.evaluations);
        match &self.control {
            Control::Discrete(m) => s.push_str(&m.to_csv()),
            Control::Continuous(m) => {
                let _ = writeln!(s, "# duration = {}", m.duration);
                let _ = writeln!(s, "# offset = {:.12e}", m.offset);
                let _ = writeln!(s, "# carrier = {:.12e}", m.carrier);
                s.push_str("frequency,cos,sin\n");
                for t in &m.terms {
                    let _ = writeln!(s, "{:.12e},{:.12e},{:.12e}", t.frequency, t.cos, t.sin);
                }
            }
        }
        s
    }
}

/// Initial guess: staircase at the target's dominant frequency below `ω_c`.
pub fn initial_guess(problem: &OcfProblem) -> Result<Control> {
    let peak = problem.spectrum.dominant_frequency(problem.omega_c)?;
    Ok(match problem.qubits {
        Some(n) => Control::Discrete(staircase_split(peak, n, problem.duration)?),
        None => Control::Continuous(ContinuousModulation::new(problem.duration, 0.0, -peak, Vec::new())?),
    })
}

/// Sorts per qubit, clips into `(0, T)` and cancels coincident switch pairs.
fn repair(times: &[f64], owner: &[usize], qubits: usize, duration: f64) -> Result<ModulationSet> {
    let eps = 1e-9 * duration.max(1.0);
    let seqs = (0..qubits)
        .map(|q| {
            let mut ts: Vec<f64> = times
                .iter()
                .zip(owner)
                .filter(|(_, &o)| o == q)
                .map(|(&t, _)| t.clamp(eps, duration - eps))
                .collect();
            ts.sort_by(f64::total_cmp);
            let mut out: Vec<f64> = Vec::with_capacity(ts.len());
            for t in ts {
                if out.last() == Some(&t) {
                    out.pop();
                } else {
                    out.push(t);
                }
            }
            PulseSequence::new(out, duration)
        })
        .collect::<Result<Vec<_>>>()?;
    ModulationSet::new(seqs)
}

fn inner_options(budget: &OcfBudget, adaptive: bool) -> NelderMead {
    NelderMead {
        step: 0.5,
        max_evaluations: budget.inner_evaluations,
        x_tolerance: if adaptive { 1e-6 } else { 1e-4 },
        f_tolerance: if adaptive { 1e-9 } else { 1e-4 },
        adaptive,
    }
}

/// dCRAB over per-qubit switch times. Each superiteration perturbs every
/// switch `t_i` of qubit `q_i` by `(T/10) Σ_j c_j sin(ν_j t_i + θ_{j,q_i})`
/// with fresh random `ν_j ∈ (0, 1.2 ω_c]`, `θ ∈ [0, 2π)`.
pub fn optimize_discrete(problem: &OcfProblem) -> Result<OcfSolution> {
    problem.validate()?;
    let qubits = problem
        .qubits
        .ok_or_else(|| Error::InvalidParameter("discrete optimisation needs a qubit count".into()))?;
    let objective = Objective::new(&problem.spectrum, problem.grid, problem.omega_c, problem.penalty_weight)?;
    let t = problem.duration;
    let Control::Discrete(start) = initial_guess(problem)? else {
        unreachable!("qubit count selects a discrete guess")
    };
    let mut owner = Vec::new();
    let mut x = Vec::new();
    for (q, seq) in start.sequences().iter().enumerate() {
        owner.extend(std::iter::repeat_n(q, seq.switch_times().len()));
        x.extend_from_slice(seq.switch_times());
    }
    let eval = |xs: &[f64]| -> f64 {
        repair(xs, &owner, qubits, t)
            .and_then(|m| objective.evaluate_control(&Control::Discrete(m), 0))
            .map_or(f64::NEG_INFINITY, |v| v.objective)
    };
    let mut best = eval(&x);
    let mut evaluations = 1;
    let mut trace = vec![best];
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let nb = problem.budget.basis_size;
    if !x.is_empty() && nb > 0 && problem.budget.inner_evaluations > 0 {
        let opts = inner_options(&problem.budget, false);
        for _ in 0..problem.budget.superiterations {
            let nus: Vec<f64> = (0..nb).map(|_| sample_frequency(&mut rng, problem.omega_c)).collect();
            let thetas: Vec<f64> = (0..nb * qubits).map(|_| rng.random_range(0.0..TAU)).collect();
            let basis: Vec<Vec<f64>> = (0..nb)
                .map(|j| {
                    x.iter()
                        .zip(&owner)
                        .map(|(&ti, &q)| t / 10.0 * (nus[j] * ti + thetas[j * qubits + q]).sin())
                        .collect()
                })
                .collect();
            let shifted = |c: &[f64]| -> Vec<f64> {
                (0..x.len())
                    .map(|i| x[i] + c.iter().zip(&basis).map(|(cj, b)| cj * b[i]).sum::<f64>())
                    .collect()
            };
            let m = minimize(|c| -eval(&shifted(c)), &vec![0.0; nb], &opts);
            evaluations += m.evaluations;
            if -m.value > best {
                best = -m.value;
                let eps = 1e-9 * t.max(1.0);
                x = shifted(&m.x).into_iter().map(|v| v.clamp(eps, t - eps)).collect();
            }
            trace.push(best);
        }
    }
    let control = Control::Discrete(repair(&x, &owner, qubits, t)?);
    let value = objective.evaluate_control(&control, 0)?;
    Ok(OcfSolution {
        control,
        value,
        evaluations,
        trace,
    })
}

fn sample_frequency(rng: &mut ChaCha8Rng, omega_c: f64) -> f64 {
    // uniform on (0, 1.2 ω_c]
    1.2 * omega_c * (1.0 - rng.random::<f64>())
}

/// dCRAB over the phase `φ(t)`. Each superiteration draws `⌈b/2⌉`
/// frequencies and searches over sine and cosine amplitudes plus a linear
/// ramp, `b` coefficients in total.
pub fn optimize_continuous(problem: &OcfProblem) -> Result<OcfSolution> {
    problem.validate()?;
    let objective = Objective::new(&problem.spectrum, problem.grid, problem.omega_c, problem.penalty_weight)?;
    let t = problem.duration;
    let samples = problem.budget.time_samples;
    let mut current = match problem.qubits {
        None => match initial_guess(problem)? {
            Control::Continuous(m) => m,
            Control::Discrete(_) => unreachable!("no qubit count selects a continuous guess"),
        },
        Some(_) => return Err(Error::InvalidParameter("continuous optimisation takes no qubit count".into())),
    };
    let value_of = |m: &ContinuousModulation| {
        objective
            .evaluate(&filter_values_continuous_fast(m, &objective.grid, samples))
            .map_or(f64::NEG_INFINITY, |v| v.objective)
    };
    let mut best = value_of(&current);
    let mut evaluations = 1;
    let mut trace = vec![best];
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let nb = problem.budget.basis_size;
    if nb >= 2 && problem.budget.inner_evaluations > 0 {
        let nfreq = nb / 2;
        let opts = inner_options(&problem.budget, true);
        for _ in 0..problem.budget.superiterations {
            let nus: Vec<f64> = (0..nfreq).map(|_| sample_frequency(&mut rng, problem.omega_c)).collect();
            let candidate = |c: &[f64]| -> ContinuousModulation {
                let mut m = current.clone();
                // c = [sin_1..sin_n, cos_1..cos_{b-n-1}, ramp]
                for (j, &nu) in nus.iter().enumerate() {
                    let cos = if nfreq + j < nb - 1 { c[nfreq + j] } else { 0.0 };
                    m.terms.push(TrigTerm {
                        frequency: nu,
                        cos,
                        sin: c[j],
                    });
                }
                let ramp = c[nb - 1];
                m.carrier += 2.0 * ramp / t;
                m.offset -= ramp;
                m
            };
            let mm = minimize(|c| -value_of(&candidate(c)), &vec![0.0; nb], &opts);
            evaluations += mm.evaluations;
            if -mm.value > best {
                best = -mm.value;
                current = candidate(&mm.x);
                current.terms.retain(|term| term.cos != 0.0 || term.sin != 0.0);
            }
            trace.push(best);
        }
    }
    let control = Control::Continuous(current);
    let value = objective.evaluate_control(&control, samples)?;
    Ok(OcfSolution {
        control,
        value,
        evaluations,
        trace,
    })
}

/// Runs all `budget.restarts` restarts; restart `r > 0` is seeded by
/// `split_seed(seed, r)`, restart 0 by `seed` itself.
pub fn optimize_restarts(problem: &OcfProblem) -> Result<Vec<OcfSolution>> {
    let run = |p: &OcfProblem| match p.qubits {
        Some(_) => optimize_discrete(p),
        None => optimize_continuous(p),
    };
    let restarts = problem.budget.restarts.max(1);
    (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut p = problem.clone();
            if r > 0 {
                p.seed = split_seed(problem.seed, r as u64);
            }
            run(&p)
        })
        .collect()
}

/// Best of [`optimize_restarts`]; `evaluations` is summed over restarts.
pub fn optimize(problem: &OcfProblem) -> Result<OcfSolution> {
    let runs = optimize_restarts(problem)?;
    let evaluations = runs.iter().map(|s| s.evaluations).sum();
    let mut best = best_solution(runs).expect("at least one restart");
    best.evaluations = evaluations;
    Ok(best)
}

/// Highest objective; ties keep the earliest.
pub fn best_solution(runs: Vec<OcfSolution>) -> Option<OcfSolution> {
    let mut best: Option<OcfSolution> = None;
    for sol in runs {
        if best.as_ref().is_none_or(|b| sol.value.objective > b.value.objective) {
            best = Some(sol);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::LorentzianComponent;
    use rand::SeedableRng;

    fn target() -> SpectralDensity {
        SpectralDensity::single_lorentzian()
    }

    fn problem(qubits: Option<usize>, budget: OcfBudget) -> OcfProblem {
        let mut p = OcfProblem::new(target(), qubits, 5.0, 11).unwrap();
        p.budget = budget;
        p
    }

    #[test]
    fn proportional_filter_has_unit_fidelity() {
        let grid = FrequencyGrid::new(30.0, 1501).unwrap();
        // in-band target only, so the out-of-band penalty is zero
        let vals: Vec<f64> = grid.omegas().iter().map(|&w| if w < 9.0 { 1.0 / (1.0 + (w - 2.0).powi(2)) } else { 0.0 }).collect();
        let s = SpectralDensity::from_grid(grid.omegas(), vals.clone()).unwrap();
        let obj = Objective::new(&s, grid, 10.0, 1.0).unwrap();
        let v = obj.evaluate(&vals.iter().map(|x| 3.0 * x).collect::<Vec<_>>()).unwrap();
        assert!((v.fidelity - 1.0).abs() < 1e-12);
        assert_eq!(v.penalty, 0.0);
    }

    #[test]
    fn orthogonal_filter_has_zero_xi() {
        let grid = FrequencyGrid::new(30.0, 1501).unwrap();
        let omegas = grid.omegas();
        let s = SpectralDensity::from_grid(omegas.clone(), omegas.iter().map(|&w| if w < 4.0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let obj = Objective::new(&s, grid, 10.0, 0.0).unwrap();
        let f: Vec<f64> = omegas.iter().map(|&w| if w > 5.0 && w < 9.0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(obj.evaluate(&f).unwrap().xi, 0.0);
        assert!(matches!(obj.evaluate(&vec![0.0; 1501]), Err(Error::UndefinedObjective)));
    }

    #[test]
    fn random_modulations_respect_cauchy_schwarz() {
        let grid = FrequencyGrid::new(30.0, 1501).unwrap();
        let omegas = grid.omegas();
        let s = SpectralDensity::from_grid(omegas.clone(), omegas.iter().map(|&w| if w <= 10.0 { 1.0 / (1.0 + (w - 2.0).powi(2)) } else { 0.0 }).collect()).unwrap();
        let obj = Objective::new(&s, grid, 10.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(0..12);
            let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..4.99)).collect();
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            let m: ModulationSet = PulseSequence::new(ts, 5.0).unwrap().into();
            let v = obj.evaluate_control(&Control::Discrete(m), 0).unwrap();
            assert!(v.fidelity <= 1.0 + 1e-9, "{}", v.fidelity);
        }
    }

    #[test]
    fn zero_budget_returns_initial_guess() {
        let b = OcfBudget {
            superiterations: 0,
            ..Default::default()
        };
        let p = problem(Some(3), b);
        let sol = optimize_discrete(&p).unwrap();
        assert_eq!(sol.control, initial_guess(&p).unwrap());
        assert_eq!(sol.trace.len(), 1);
    }

    #[test]
    fn discrete_trace_is_monotone_and_seeded() {
        let b = OcfBudget {
            superiterations: 3,
            inner_evaluations: 60,
            ..Default::default()
        };
        let p = problem(Some(2), b);
        let a = optimize_discrete(&p).unwrap();
        let c = optimize_discrete(&p).unwrap();
        assert_eq!(a.trace, c.trace);
        assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(a.value.objective >= a.trace[0] - 1e-12);
        assert!(a.to_csv().contains("qubit,time"));
    }

    #[test]
    fn continuous_first_superiteration_never_decreases() {
        let b = OcfBudget {
            superiterations: 1,
            inner_evaluations: 40,
            time_samples: 200,
            ..Default::default()
        };
        let mut p = problem(None, b);
        p.spectrum = SpectralDensity::lorentzians(vec![LorentzianComponent::new(1.0, 3.0, 1.0).unwrap()]);
        let sol = optimize_continuous(&p).unwrap();
        assert!(sol.trace[1] >= sol.trace[0]);
        assert!(sol.to_csv().contains("frequency,cos,sin"));
    }

    #[test]
    fn repair_sorts_clips_and_cancels() {
        let m = repair(&[3.0, -1.0, 2.0, 2.0, 9.0], &[0, 0, 0, 0, 1], 2, 5.0).unwrap();
        let s0 = m.sequences()[0].switch_times();
        assert_eq!(s0.len(), 2);
        assert!(s0[0] > 0.0 && s0[1] == 3.0);
        assert!(m.sequences()[1].switch_times()[0] < 5.0);
    }
}
