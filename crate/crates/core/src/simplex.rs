//! Derivative-free Nelder–Mead minimisation.

/// Settings for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    /// Edge length of the initial simplex along each axis.
    pub step: f64,
    pub max_evaluations: usize,
    pub x_tolerance: f64,
    pub f_tolerance: f64,
    /// Dimension-dependent coefficients (better for larger problems).
    pub adaptive: bool,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_evaluations: 300,
            x_tolerance: 1e-4,
            f_tolerance: 1e-4,
            adaptive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Minimises `f` starting from `x0`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &NelderMead) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let budget = opts.max_evaluations;
    let mut call = |x: &[f64], evals: &mut usize| {
        if *evals >= budget {
            return f64::INFINITY;
        }
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 || opts.max_evaluations == 0 {
        let value = if opts.max_evaluations == 0 { f64::NAN } else { call(x0, &mut evals) };
        return Minimum {
            x: x0.to_vec(),
            value,
            evaluations: evals,
        };
    }
    let nf = n as f64;
    let (rho, chi, gamma, sigma) = if opts.adaptive {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut sim: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    sim.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.step;
        sim.push(v);
    }
    let mut fs: Vec<f64> = Vec::with_capacity(n + 1);
    for v in &sim {
        fs.push(call(v, &mut evals));
    }

    let order = |sim: &mut Vec<Vec<f64>>, fs: &mut Vec<f64>| {
        let mut idx: Vec<usize> = (0..sim.len()).collect();
        idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]).then(a.cmp(&b)));
        *sim = idx.iter().map(|&i| sim[i].clone()).collect();
        *fs = idx.iter().map(|&i| fs[i]).collect();
    };
    order(&mut sim, &mut fs);

    while evals < opts.max_evaluations {
        let xspread = sim[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&sim[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let fspread = fs[1..].iter().map(|v| (v - fs[0]).abs()).fold(0.0, f64::max);
        if xspread <= opts.x_tolerance && fspread <= opts.f_tolerance {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| sim[..n].iter().map(|v| v[j]).sum::<f64>() / nf).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (sim[n][j] - centroid[j])).collect() };

        let xr = along(-rho);
        let fr = call(&xr, &mut evals);
        let mut shrink = false;
        if fr < fs[0] {
            let xe = along(-rho * chi);
            let fe = call(&xe, &mut evals);
            if fe < fr {
                sim[n] = xe;
                fs[n] = fe;
            } else {
                sim[n] = xr;
                fs[n] = fr;
            }
        } else if fr < fs[n - 1] {
            sim[n] = xr;
            fs[n] = fr;
        } else if fr < fs[n] {
            let xc = along(-rho * gamma);
            let fc = call(&xc, &mut evals);
            if fc <= fr {
                sim[n] = xc;
                fs[n] = fc;
            } else {
                shrink = true;
            }
        } else {
            let xc = along(gamma);
            let fc = call(&xc, &mut evals);
            if fc < fs[n] {
                sim[n] = xc;
                fs[n] = fc;
            } else {
                shrink = true;
            }
        }
        if shrink {
            for i in 1..=n {
                if evals >= opts.max_evaluations {
                    break;
                }
                let v: Vec<f64> = (0..n).map(|j| sim[0][j] + sigma * (sim[i][j] - sim[0][j])).collect();
                fs[i] = call(&v, &mut evals);
                sim[i] = v;
            }
        }
        order(&mut sim, &mut fs);
    }
    Minimum {
        x: sim.swap_remove(0),
        value: fs[0],
        evaluations: evals,
    }
}
