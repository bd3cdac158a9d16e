//! Quadrature primitives shared by the filter and spectrum code.
//!
//! All grid sums go through [`pairwise_sum`] so that an integral does not
//! depend on how callers partition work across threads.

use num_complex::Complex64;

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Pairwise sum of `f(i)` for `i in 0..n` without materialising the terms.
pub fn pairwise_sum_by<F: Fn(usize) -> f64 + Copy>(start: usize, end: usize, f: F) -> f64 {
    if end - start <= PAIRWISE_BLOCK {
        (start..end).map(f).sum()
    } else {
        let mid = start + (end - start) / 2;
        pairwise_sum_by(start, mid, f) + pairwise_sum_by(mid, end, f)
    }
}

/// Composite trapezoid of uniformly spaced samples `f(i)`, `i = 0..n`,
/// over `[0, cutoff]` with sample spacing `step`. A cutoff that falls
/// between samples contributes a partial panel using linear interpolation.
pub fn trapezoid_by<F: Fn(usize) -> f64 + Copy>(n: usize, step: f64, cutoff: f64, f: F) -> f64 {
    if n < 2 || cutoff <= 0.0 {
        return 0.0;
    }
    let span = step * (n - 1) as f64;
    let cutoff = cutoff.min(span);
    let pos = cutoff / step;
    // Snap cutoffs that coincide with a sample up to rounding noise.
    let mut last = pos.floor() as usize;
    if (pos - (last as f64 + 1.0)).abs() < 1e-9 {
        last += 1;
    }
    let last = last.min(n - 1);
    let mut total = 0.0;
    if last >= 1 {
        let interior = pairwise_sum_by(1, last, f);
        total = step * (0.5 * f(0) + interior + 0.5 * f(last));
    }
    let frac = pos - last as f64;
    if frac > 1e-9 && last + 1 < n {
        let a = f(last);
        let b = f(last + 1);
        let h = frac * step;
        let at_cut = a + frac * (b - a);
        total += 0.5 * h * (a + at_cut);
    }
    total
}

/// Trapezoid of a sampled slice over its whole span.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    let span = step * (values.len().saturating_sub(1)) as f64;
    trapezoid_by(values.len(), step, span, |i| values[i])
}

/// Adaptive Simpson quadrature of a real function.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson quadrature of a complex-valued function; the error
/// test uses the modulus of the Richardson correction.
pub fn adaptive_simpson_complex<F: Fn(f64) -> Complex64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Complex64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (fa + fm * 4.0 + fb) * ((b - a) / 6.0);
    simpson_rec_c(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec_c<F: Fn(f64) -> Complex64>(
    f: &F,
    a: f64,
    b: f64,
    fa: Complex64,
    fm: Complex64,
    fb: Complex64,
    whole: Complex64,
    tol: f64,
    depth: u32,
) -> Complex64 {
    let m = 0.5 * (a + b);
    let flm = f(0.5 * (a + m));
    let frm = f(0.5 * (m + b));
    let left = (fa + flm * 4.0 + fm) * ((m - a) / 6.0);
    let right = (fm + frm * 4.0 + fb) * ((b - m) / 6.0);
    let delta = left + right - whole;
    if depth == 0 || delta.norm() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec_c(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec_c(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Median of a non-empty slice (mean of the two central values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
