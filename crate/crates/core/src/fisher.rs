//! Fisher information operator over spectrum space.
//!
//! The operator `𝔉 = Σ_k w_k |F_k⟩⟨F_k|` is kept factored as weights plus
//! filter directions.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterfn::{overlap_sampled, FilterFunction};
use crate::probe::stream_rng;
use crate::quad::mean_stderr;
use crate::spectra::SpectralDensity;

/// Default relative singular-value cutoff for [`fio_rank`].
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Per-measurement weight `w(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightConvention {
    /// `w = (1 - p) / p`.
    #[default]
    Simplified,
    /// Bernoulli information for `p = ½(1 - e^{-χ-ΓT})`:
    /// `w = (½ - p)² / (p (1 - p))`.
    Exact,
}

impl WeightConvention {
    pub fn weight(&self, p: f64) -> f64 {
        match self {
            WeightConvention::Simplified => (1.0 - p) / p,
            WeightConvention::Exact => (0.5 - p).powi(2) / (p * (1.0 - p)),
        }
    }
}

/// Why a measurement was left out of the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclusion {
    /// `p → 0⁺`: the weight diverges.
    DivergentWeight,
    /// `p ≥ 1` or not finite.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct FisherOperator {
    directions: Vec<FilterFunction>,
    weights: Vec<f64>,
    included: Vec<usize>,
    excluded: Vec<(usize, Exclusion)>,
    convention: WeightConvention,
}

/// Builds `𝔉` with the default weight convention.
pub fn build_fio(filters: &[FilterFunction], probabilities: &[f64]) -> Result<FisherOperator> {
    build_fio_with(filters, probabilities, WeightConvention::default())
}

pub fn build_fio_with(
    filters: &[FilterFunction],
    probabilities: &[f64],
    convention: WeightConvention,
) -> Result<FisherOperator> {
    if filters.len() != probabilities.len() {
        return Err(Error::InvalidParameter(format!(
            "{} filters but {} probabilities",
            filters.len(),
            probabilities.len()
        )));
    }
    if let Some(f) = filters.first() {
        if filters.iter().any(|g| g.grid() != f.grid()) {
            return Err(Error::GridMismatch);
        }
    }
    let mut op = FisherOperator {
        directions: Vec::new(),
        weights: Vec::new(),
        included: Vec::new(),
        excluded: Vec::new(),
        convention,
    };
    for (k, (f, &p)) in filters.iter().zip(probabilities).enumerate() {
        if !(0.0..1.0).contains(&p) {
            op.excluded.push((k, Exclusion::Degenerate));
        } else if p == 0.0 {
            op.excluded.push((k, Exclusion::DivergentWeight));
        } else {
            op.directions.push(f.clone());
            op.weights.push(convention.weight(p));
            op.included.push(k);
        }
    }
    if op.directions.is_empty() {
        return Err(Error::EmptyOperator);
    }
    Ok(op)
}

impl FisherOperator {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn directions(&self) -> &[FilterFunction] {
        &self.directions
    }

    /// Original indices of the retained measurements.
    pub fn included(&self) -> &[usize] {
        &self.included
    }

    pub fn excluded(&self) -> &[(usize, Exclusion)] {
        &self.excluded
    }

    pub fn convention(&self) -> WeightConvention {
        self.convention
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Operator of the union of two independent measurement sets.
    pub fn union(&self, other: &FisherOperator) -> Result<FisherOperator> {
        if let (Some(a), Some(b)) = (self.directions.first(), other.directions.first()) {
            if a.grid() != b.grid() {
                return Err(Error::GridMismatch);
            }
        }
        let offset = self.included.iter().chain(self.excluded.iter().map(|e| &e.0)).max().map_or(0, |m| m + 1);
        let mut out = self.clone();
        out.directions.extend(other.directions.iter().cloned());
        out.weights.extend_from_slice(&other.weights);
        out.included.extend(other.included.iter().map(|i| i + offset));
        out.excluded.extend(other.excluded.iter().map(|&(i, e)| (i + offset, e)));
        Ok(out)
    }

    /// `⟨S̄|F_k⟩ = ∫₀^{ω_int_max} S̄ F_k dω` for each retained filter.
    pub fn projections(&self, direction: &[f64], omega_int_max: f64) -> Vec<f64> {
        let grid = self.directions[0].grid();
        self.directions
            .iter()
            .map(|f| overlap_sampled(direction, f.values(), grid, omega_int_max))
            .collect()
    }

    /// `Σ_k w_k ⟨S̄|F_k⟩²` for a direction sampled on the filter grid.
    pub fn directional_sampled(&self, direction: &[f64], omega_int_max: f64) -> f64 {
        self.projections(direction, omega_int_max)
            .iter()
            .zip(&self.weights)
            .map(|(d, w)| w * d * d)
            .sum()
    }
}

/// `𝔉_S̄ = ⟨S̄|𝔉|S̄⟩`.
pub fn directional_fisher(fio: &FisherOperator, direction: &SpectralDensity, omega_int_max: f64) -> Result<f64> {
    let grid = fio.directions[0].grid();
    let s = direction.sample(grid)?;
    Ok(fio.directional_sampled(&s, omega_int_max))
}

/// `1/√𝔉_S̄`; `f64::INFINITY` when the direction is invisible.
pub fn cramer_rao(fio: &FisherOperator, direction: &SpectralDensity, omega_int_max: f64) -> Result<f64> {
    Ok(bound_from_information(directional_fisher(fio, direction, omega_int_max)?))
}

pub fn bound_from_information(info: f64) -> f64 {
    if info > 0.0 {
        1.0 / info.sqrt()
    } else {
        f64::INFINITY
    }
}

/// Numerical rank of the weighted Gram matrix `√w_k √w_l ∫F_k F_l dω`.
pub fn fio_rank(fio: &FisherOperator, tolerance: f64) -> usize {
    if fio.is_empty() {
        return 0;
    }
    let grid = fio.directions[0].grid();
    let cutoff = grid.omega_max();
    let n = fio.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = fio.weights[i].sqrt()
                * fio.weights[j].sqrt()
                * overlap_sampled(fio.directions[i].values(), fio.directions[j].values(), grid, cutoff);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    numerical_rank(&g, tolerance)
}

/// Rank of a symmetric positive semidefinite matrix at relative `tolerance`.
pub fn numerical_rank(m: &DMatrix<f64>, tolerance: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = vals.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    vals.iter().filter(|&&v| v >= tolerance * max).count()
}

/// One-parameter binomial model `χ_k(ε) = χ_k⁰ + ε d_k`,
/// `p_k = ½(1 - e^{-χ_k - ΓT})`, `shots` Bernoulli trials per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalModel {
    pub chi0: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub decay: f64,
    pub shots: u64,
}

impl DirectionalModel {
    fn prob(&self, k: usize, eps: f64) -> f64 {
        let x = self.chi0[k] + eps * self.derivatives[k] + self.decay;
        -0.5 * (-x).exp_m1()
    }

    fn feasible(&self, eps: f64) -> bool {
        (0..self.chi0.len()).all(|k| self.chi0[k] + eps * self.derivatives[k] + self.decay > 0.0)
    }

    /// Exact information about `ε` per shot at `ε`.
    pub fn information(&self, eps: f64) -> f64 {
        (0..self.chi0.len())
            .map(|k| {
                let p = self.prob(k, eps);
                WeightConvention::Exact.weight(p) * self.derivatives[k].powi(2)
            })
            .sum()
    }

    fn log_likelihood(&self, counts: &[u64], eps: f64) -> f64 {
        let n = self.shots as f64;
        counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let p = self.prob(k, eps);
                let c = c as f64;
                let a = if c > 0.0 { c * p.ln() } else { 0.0 };
                let b = if c < n { (n - c) * (-p).ln_1p() } else { 0.0 };
                a + b
            })
            .sum()
    }

    /// Maximum-likelihood `ε` by Fisher scoring with step halving.
    pub fn mle(&self, counts: &[u64]) -> Result<f64> {
        let n = self.shots as f64;
        let mut eps = 0.0;
        let mut ll = self.log_likelihood(counts, eps);
        for _ in 0..200 {
            let mut score = 0.0;
            let mut info = 0.0;
            for (k, &c) in counts.iter().enumerate() {
                let p = self.prob(k, eps);
                let dp = (0.5 - p) * self.derivatives[k];
                let pq = p * (1.0 - p);
                score += (c as f64 - n * p) / pq * dp;
                info += n * dp * dp / pq;
            }
            if !(info > 0.0) {
                return Err(Error::Domain("likelihood has no curvature along the direction".into()));
            }
            let mut step = score / info;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = eps + step;
                if self.feasible(cand) {
                    let l = self.log_likelihood(counts, cand);
                    if l >= ll {
                        eps = cand;
                        ll = l;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted || step.abs() <= 1e-13 * eps.abs().max(1e-6) {
                break;
            }
        }
        Ok(eps)
    }
}

/// Monte Carlo spread of the MLE compared with the Cramér-Rao bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CramerRaoCheck {
    pub bound: f64,
    pub mean: f64,
    pub std_dev: f64,
    /// Standard error of `std_dev` (normal approximation).
    pub std_dev_se: f64,
    pub repeats: usize,
    pub failures: usize,
}

impl CramerRaoCheck {
    /// `true` unless the estimator beats the bound by more than
    /// `sigmas` standard errors.
    pub fn consistent(&self, sigmas: f64) -> bool {
        self.std_dev >= self.bound - sigmas * self.std_dev_se
    }
}

/// Simulates `repeats` binomial experiments at `ε = 0` and compares the
/// MLE spread with `1/√(shots · I)`.
pub fn mle_monte_carlo(model: &DirectionalModel, repeats: usize, seed: u64) -> Result<CramerRaoCheck> {
    if model.chi0.len() != model.derivatives.len() || model.chi0.is_empty() {
        return Err(Error::InvalidParameter("model vectors must be non-empty and equally long".into()));
    }
    if model.shots == 0 || repeats < 2 {
        return Err(Error::InvalidParameter("need shots > 0 and at least two repeats".into()));
    }
    let probs: Vec<f64> = (0..model.chi0.len()).map(|k| model.prob(k, 0.0)).collect();
    let dists = probs
        .iter()
        .map(|&p| Binomial::new(model.shots, p).map_err(|e| Error::Domain(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let estimates: Vec<Option<f64>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let counts: Vec<u64> = dists.iter().map(|d| d.sample(&mut rng)).collect();
            model.mle(&counts).ok()
        })
        .collect();
    let ok: Vec<f64> = estimates.iter().flatten().copied().collect();
    let n = ok.len();
    if n < 2 {
        return Err(Error::Domain("maximum-likelihood failed on every repeat".into()));
    }
    let (mean, _) = mean_stderr(&ok);
    let var = ok.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    Ok(CramerRaoCheck {
        bound: bound_from_information(model.shots as f64 * model.information(0.0)),
        mean,
        std_dev,
        std_dev_se: std_dev / (2.0 * (n - 1) as f64).sqrt(),
        repeats,
        failures: repeats - n,
    })
}

/// One row of a Fisher report.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherRow {
    pub direction: String,
    pub rank: usize,
    pub information: f64,
    pub bound: f64,
}

pub fn fisher_csv(rows: &[FisherRow]) -> String {
    let mut s = String::from("direction,rank,fisher_information,cramer_rao_bound\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.10e},{:.10e}", r.direction, r.rank, r.information, r.bound);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterfn::{filter_function, FrequencyGrid};
    use crate::modulation::fo_sequence;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn filters(k: usize) -> Vec<FilterFunction> {
        let grid = FrequencyGrid::with_spacing(57.5, 0.01).unwrap();
        (1..=k)
            .map(|i| filter_function(&fo_sequence(i, k, 11.5, 5.0).unwrap().into(), &grid))
            .collect()
    }

    fn unit_filter() -> FilterFunction {
        // F = 1 on [0, 1], 0 after: ∫F = 1
        let grid = FrequencyGrid::new(2.0, 2001).unwrap();
        let v = (0..2001).map(|i| match i { 0..1000 => 1.0, 1000 => 0.5, _ => 0.0 }).collect();
        FilterFunction::from_values(grid, v, 1.0).unwrap()
    }

    #[test]
    fn weights() {
        let f = filters(3);
        let op = build_fio(&f, &[0.5; 3]).unwrap();
        assert_eq!(op.weights(), &[1.0, 1.0, 1.0]);
        assert_eq!(WeightConvention::Exact.weight(0.5), 0.0);
        assert_relative_eq!(WeightConvention::Exact.weight(0.25), 1.0 / 3.0, epsilon = 1e-15);
        let op = build_fio(&f, &[0.0, 0.3, 1.0]).unwrap();
        assert_eq!(op.excluded(), &[(0, Exclusion::DivergentWeight), (2, Exclusion::Degenerate)]);
        assert_eq!(op.included(), &[1]);
        assert!(matches!(build_fio(&f, &[0.0, 1.0, f64::NAN]), Err(Error::EmptyOperator)));
    }

    #[test]
    fn directional_examples() {
        let f = unit_filter();
        let op = build_fio(std::slice::from_ref(&f), &[0.5]).unwrap();
        let one = SpectralDensity::from_grid(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap();
        let info = directional_fisher(&op, &one, 2.0).unwrap();
        assert_relative_eq!(info, 1.0, epsilon = 1e-9);
        let twice = directional_fisher(&op, &one.scaled(2.0), 2.0).unwrap();
        assert_relative_eq!(twice, 4.0 * info, epsilon = 1e-9);
        let zero = SpectralDensity::from_grid(vec![0.0, 1.0, 1.0005, 2.0], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(directional_fisher(&op, &zero, 2.0).unwrap(), 0.0);
        assert_eq!(cramer_rao(&op, &zero, 2.0).unwrap(), f64::INFINITY);
        assert_relative_eq!(bound_from_information(4.0), 0.5);
    }

    #[test]
    fn rank_examples() {
        let mut f = filters(6);
        let op = build_fio(&f, &[0.3; 6]).unwrap();
        assert_eq!(fio_rank(&op, RANK_TOLERANCE), 6);
        f[5] = f[2].clone();
        let op = build_fio(&f, &[0.3; 6]).unwrap();
        assert_eq!(fio_rank(&op, RANK_TOLERANCE), 5);
        let two = vec![f[0].clone(), f[0].clone()];
        assert_eq!(fio_rank(&build_fio(&two, &[0.2, 0.4]).unwrap(), RANK_TOLERANCE), 1);
        assert_eq!(numerical_rank(&DMatrix::zeros(0, 0), RANK_TOLERANCE), 0);
    }

    #[test]
    fn union_is_additive() {
        let f = filters(4);
        let a = build_fio(&f[..2], &[0.2, 0.3]).unwrap();
        let b = build_fio(&f[2..], &[0.1, 0.4]).unwrap();
        let ab = a.union(&b).unwrap();
        let s = SpectralDensity::double_lorentzian();
        let sum = directional_fisher(&a, &s, 57.5).unwrap() + directional_fisher(&b, &s, 57.5).unwrap();
        assert_relative_eq!(directional_fisher(&ab, &s, 57.5).unwrap(), sum, max_relative = 1e-14);
        assert_eq!(ab.included(), &[0, 1, 2, 3]);
    }

    #[test]
    fn mle_recovers_exact_counts() {
        let model = DirectionalModel {
            chi0: vec![0.4, 0.8, 1.1],
            derivatives: vec![0.3, 0.5, 0.2],
            decay: 0.0,
            shots: 1_000_000,
        };
        let counts: Vec<u64> = (0..3)
            .map(|k| (model.prob(k, 0.1) * 1e6).round() as u64)
            .collect();
        let e = model.mle(&counts).unwrap();
        assert!((e - 0.1).abs() < 1e-3, "{e}");
    }

    #[test]
    fn mle_spread_respects_bound() {
        let model = DirectionalModel {
            chi0: vec![0.5, 0.9, 1.3, 0.2],
            derivatives: vec![0.4, 0.1, 0.7, 0.3],
            decay: 0.1,
            shots: 10_000,
        };
        let check = mle_monte_carlo(&model, 400, 7).unwrap();
        assert!(check.consistent(3.0), "{check:?}");
        // efficient estimator: spread close to the bound
        assert!((check.std_dev / check.bound - 1.0).abs() < 0.15, "{check:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn information_is_nonnegative(a in 0.0..5.0f64, c in -3.0..15.0f64, p in 0.01..0.99f64) {
            let f = filters(3);
            let op = build_fio(&f, &[p, 0.5 * p, 0.3]).unwrap();
            let s = SpectralDensity::lorentzians(vec![crate::spectra::LorentzianComponent::new(a, c, 1.0).unwrap()]);
            prop_assert!(directional_fisher(&op, &s, 57.5).unwrap() >= 0.0);
        }
    }
}
