//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs as a plain binary (no libtest
//! harness) so the lines are always visible under `cargo test`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qspectro::experiment::{preset, presets, run_scenario, RunReport};
use qspectro::filterfn::{filter_function, parseval_check, signal_overlap, FrequencyGrid};
use qspectro::fisher::{build_fio, directional_fisher};
use qspectro::modulation::{staircase_split, ModulationSet, PulseSequence};
use qspectro::probe::{chi_time_domain, survival_probability};
use qspectro::reconstruct::{fo_reconstruct, FoOptions, ProtocolConfig, ProtocolSetup, Retention};
use qspectro::{LorentzianComponent, SpectralDensity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Worker count for the shared preset runs; criterion 11 compares them
/// against single-worker reruns.
const PARALLEL_WORKERS: usize = 4;

/// Preset reports shared between criteria, computed on first use.
#[derive(Default)]
struct Runs {
    reports: BTreeMap<String, (RunReport, Duration)>,
}

impl Runs {
    fn get(&mut self, name: &str) -> &(RunReport, Duration) {
        if !self.reports.contains_key(name) {
            let cfg = preset(name).unwrap_or_else(|| panic!("preset {name}"));
            let start = Instant::now();
            let report = run_scenario(&cfg, Some(PARALLEL_WORKERS)).unwrap_or_else(|e| panic!("{name}: {e}"));
            self.reports.insert(name.to_string(), (report, start.elapsed()));
        }
        &self.reports[name]
    }
}

fn num(r: &RunReport, key: &str) -> f64 {
    r.number(key).unwrap_or_else(|| panic!("{}: missing summary key {key}", r.scenario))
}

fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs_f64() < limit_s as f64
}

fn in_span_exactness() -> Outcome {
    let cfg = ProtocolConfig::fo_default();
    let grid = cfg.grid().unwrap();
    let filters: Vec<_> = cfg
        .modulations(5.0)
        .unwrap()
        .iter()
        .map(|m| filter_function(m, &grid))
        .collect();
    let opts = FoOptions {
        omega_c: cfg.omega_c,
        omega_max: cfg.omega_max,
        retention: Retention::All,
        noise: None,
        clamp_negative: false,
    };
    let band = (cfg.omega_c / grid.step()).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let alpha: Vec<f64> = (0..filters.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let vals: Vec<f64> = (0..grid.len())
            .map(|i| filters.iter().zip(&alpha).map(|(f, a)| a * f.values()[i]).sum())
            .collect();
        let c: Vec<f64> = filters
            .iter()
            .map(|f| grid.integrate(cfg.omega_c, |i| vals[i] * f.values()[i]))
            .collect();
        let res = fo_reconstruct(&filters, &c, &vec![false; c.len()], &opts).unwrap();
        let peak = vals[..band].iter().cloned().fold(0.0, f64::max);
        for (w, v) in res.estimate.samples() {
            let i = (w / grid.step()).round() as usize;
            worst = worst.max((v - vals[i]).abs() / peak);
        }
    }
    outcome(worst <= 1e-6, format!("max relative error {worst:.2e} over 20 combinations (tol 1e-6)"))
}

fn random_pair(rng: &mut ChaCha8Rng) -> (SpectralDensity, ModulationSet) {
    let comps = (0..rng.random_range(1..=3))
        .map(|_| {
            LorentzianComponent::new(
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..10.0),
                rng.random_range(0.3..3.0),
            )
            .unwrap()
        })
        .collect();
    let t = rng.random_range(1.0..8.0);
    let set = if rng.random_bool(0.25) {
        staircase_split(rng.random_range(0.5..10.0), rng.random_range(2..=4), t).unwrap()
    } else {
        let mut ts: Vec<f64> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0.02..0.98) * t).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        PulseSequence::new(ts, t).unwrap().into()
    };
    (SpectralDensity::lorentzians(comps), set)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let grid = FrequencyGrid::with_spacing(600.0, 0.002).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (s, set) = random_pair(&mut rng);
        let f = filter_function(&set, &grid);
        let spectral = signal_overlap(&s, &f, grid.omega_max()).unwrap();
        let oracle = chi_time_domain(&set, &s).unwrap();
        worst = worst.max((spectral - oracle).abs() / oracle);
    }
    outcome(worst <= 1e-3, format!("max relative deviation {worst:.2e} over 20 pairs (tol 1e-3)"))
}

fn parseval() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0usize;
    for p in presets() {
        let cfg = p.config();
        for set in cfg.modulations().unwrap() {
            let step = (0.02 / set.duration()).min(0.005_f64);
            let r = parseval_check(&set, step).unwrap();
            worst = worst.max(r.relative_error);
            count += 1;
        }
    }
    outcome(worst <= 5e-3, format!("{count} filters, max relative error {worst:.2e} (tol 5e-3)"))
}

fn trends(runs: &mut Runs) -> Outcome {
    let (fig2, t2) = runs.get("fig2-fidelity-vs-time").clone();
    let (r, t3) = runs.get("fig3-fidelity-vs-gamma").clone();
    let cfg = preset("fig3-fidelity-vs-gamma").unwrap();
    let mut fails = Vec::new();
    if num(&fig2, "fo.gamma_0.4.best_T") != 2.0 {
        fails.push(format!("fig2 FO optimum T={} (want 2)", num(&fig2, "fo.gamma_0.4.best_T")));
    }
    if num(&r, "fo.gamma_0.4.best_T") != 2.0 {
        fails.push(format!("FO optimum at gamma 0.4 is T={} (want 2)", num(&r, "fo.gamma_0.4.best_T")));
    }
    for g in &cfg.noise.gamma {
        let fo = format!("fo.gamma_{g}");
        let asp = format!("as.gamma_{g}");
        let (fm, am) = (num(&r, &format!("{fo}.fidelity_mean")), num(&r, &format!("{asp}.fidelity_mean")));
        let (ft, at) = (num(&r, &format!("{fo}.best_T")), num(&r, &format!("{asp}.best_T")));
        if fm < am {
            fails.push(format!("gamma {g}: FO {fm:.4} < AS {am:.4}"));
        }
        if !(2.0..=5.0).contains(&ft) {
            fails.push(format!("gamma {g}: FO optimum T={ft} outside [2,5]"));
        }
        if !(5.0..=25.0).contains(&at) {
            fails.push(format!("gamma {g}: AS optimum T={at} outside [5,25]"));
        }
    }
    let gap = num(&r, "fo.gamma_0.4.fidelity_mean") - num(&r, "as.gamma_0.4.fidelity_mean");
    let se = combined(num(&r, "fo.gamma_0.4.fidelity_stderr"), num(&r, "as.gamma_0.4.fidelity_stderr"));
    if gap <= 2.0 * se {
        fails.push(format!("gamma 0.4 gap {gap:.4} <= 2 SE ({:.4})", 2.0 * se));
    }
    if cfg.repetitions != 100 {
        fails.push(format!("{} repetitions (want 100)", cfg.repetitions));
    }
    let elapsed = t2 + t3;
    if !within(elapsed, 600) {
        fails.push(format!("runtime {elapsed:?} >= 10 min"));
    }
    outcome(fails.is_empty(), if fails.is_empty() { format!("gap {gap:.4} > 2 SE {se:.4}") } else { fails.join("; ") })
}

fn fig4_regime(runs: &mut Runs) -> Outcome {
    let (r, t) = runs.get("fig4-dephasing0").clone();
    let fo = num(&r, "fo.gamma_0.fidelity_mean");
    let asf = num(&r, "as.gamma_0.fidelity_mean");
    let pass = fo >= 0.97 && asf >= 0.97 && within(t, 300);
    outcome(pass, format!("FO {fo:.4}, AS {asf:.4} (min 0.97), {:.1}s", t.as_secs_f64()))
}

fn leakage(runs: &mut Runs) -> Outcome {
    let (r, t) = runs.get("fig6-leakage-vs-nqubits").clone();
    let m = |n: usize| num(&r, &format!("n{n}.fidelity_mean"));
    let s = |n: usize| num(&r, &format!("n{n}.fidelity_stderr"));
    let mut fails = Vec::new();
    let gain = (m(4) - m(1)) / combined(s(4), s(1));
    if gain <= 3.0 {
        fails.push(format!("N=4 over N=1 only {gain:.2} SE"));
    }
    for n in 1..4 {
        if m(n + 1) < m(n) - combined(s(n), s(n + 1)) {
            fails.push(format!("drop from N={n} to N={}", n + 1));
        }
    }
    if !within(t, 600) {
        fails.push(format!("runtime {t:?}"));
    }
    let curve: Vec<String> = (1..=4).map(|n| format!("{:.4}", m(n))).collect();
    outcome(fails.is_empty(), format!("N=1..4 [{}], gain {gain:.1} SE {}", curve.join(", "), fails.join("; ")))
}

fn ion(runs: &mut Runs) -> Outcome {
    let (r, t) = runs.get("ion-chain").clone();
    let best = num(&r, "best_qubits");
    let n2 = num(&r, "n2.fidelity_mean");
    let pass = best == 2.0 && (n2 - 0.984).abs() <= 0.02 && within(t, 600);
    let curve: Vec<String> = [1, 2, 3, 4, 6]
        .iter()
        .map(|n| format!("N{n} {:.4}", num(&r, &format!("n{n}.fidelity_mean"))))
        .collect();
    outcome(pass, format!("max at N={best} (want 2), N=2 {n2:.4} (0.984 +- 0.02); {}", curve.join(", ")))
}

fn ocf(runs: &mut Runs) -> Outcome {
    let (r, t) = runs.get("fig8-ocf-lorentzian").clone();
    let cfg = preset("fig8-ocf-lorentzian").unwrap();
    let o = cfg.ocf.as_ref().unwrap();
    let mut fails = Vec::new();
    let cont = num(&r, "main.ncontinuous.T_5.best_fidelity");
    if cont < 0.99 {
        fails.push(format!("continuous {cont:.4} < 0.99"));
    }
    let scan = o.scan.as_ref().unwrap();
    for n in &scan.qubits {
        let peak = scan
            .durations
            .iter()
            .map(|d| (*d, num(&r, &format!("scan.n{n}.T_{d}.best_fidelity"))))
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if peak.0 != 5.0 {
            fails.push(format!("N={n} peaks at T={} ({:.4})", peak.0, peak.1));
        }
    }
    if o.budget.restarts != 10 {
        fails.push(format!("{} restarts (want 10)", o.budget.restarts));
    }
    let m = |n: usize| num(&r, &format!("main.n{n}.T_5.mean_fidelity"));
    let s = |n: usize| num(&r, &format!("main.n{n}.T_5.fidelity_stderr"));
    for w in o.qubits.windows(2) {
        if m(w[1]) < m(w[0]) - combined(s(w[0]), s(w[1])) {
            fails.push(format!("mean fidelity drops N={} {:.4} -> N={} {:.4}", w[0], m(w[0]), w[1], m(w[1])));
        }
    }
    if !within(t, 1800) {
        fails.push(format!("runtime {t:?}"));
    }
    let curve: Vec<String> = o.qubits.iter().map(|&n| format!("{:.4}", m(n))).collect();
    outcome(
        fails.is_empty(),
        format!("continuous {cont:.4}, mean by N [{}], {:.0}s {}", curve.join(", "), t.as_secs_f64(), fails.join("; ")),
    )
}

fn tracking(runs: &mut Runs) -> Outcome {
    let (slow, ts) = runs.get("fig12-tracking-slow").clone();
    let (fast, tf) = runs.get("fig13-tracking-fast").clone();
    let mut fails = Vec::new();
    for r in [&slow, &fast] {
        if num(r, "fo-block.samples") != 10.0 || num(r, "ocf-pair.n6.samples") != 50.0 {
            fails.push(format!("{}: sample counts", r.scenario));
        }
    }
    let fo_slow = num(&slow, "fo-block.rms_mean");
    let ocf_slow = num(&slow, "ocf-pair.n6.rms_mean");
    let fo_fast = num(&fast, "fo-block.rms_mean");
    let ocf_fast = num(&fast, "ocf-pair.n6.rms_mean");
    if fo_slow > 0.15 {
        fails.push(format!("slow FO RMS {fo_slow:.4} > 0.15"));
    }
    if ocf_slow > 0.1 {
        fails.push(format!("slow OCF RMS {ocf_slow:.4} > 0.1"));
    }
    if ocf_fast > 0.5 * fo_fast {
        fails.push(format!("fast OCF RMS {ocf_fast:.4} > half FO {fo_fast:.4}"));
    }
    if !within(ts + tf, 600) {
        fails.push("runtime".into());
    }
    outcome(
        fails.is_empty(),
        format!(
            "slow FO {fo_slow:.4} (<=0.15) OCF {ocf_slow:.4} (<=0.1); fast OCF/FO {:.3} (<=0.5) {}",
            ocf_fast / fo_fast,
            fails.join("; ")
        ),
    )
}

fn fisher(runs: &mut Runs) -> Outcome {
    let (r, t) = runs.get("fisher-bounds").clone();
    let cfg = preset("fisher-bounds").unwrap();
    let f = cfg.fisher.as_ref().unwrap();
    let mut fails = Vec::new();
    if num(&r, "filter_rank") != num(&r, "fio_rank") {
        fails.push("rank mismatch".to_string());
    }
    if r.value("cramer_rao_consistent") != Some("true") {
        fails.push("Monte Carlo spread beats the bound by more than 3 SE".into());
    }
    if f.random_directions != 5 || f.monte_carlo_repeats != 500 {
        fails.push("preset does not use 5 directions x 500 repeats".into());
    }

    let setup = ProtocolSetup::new(&ProtocolConfig::fo_default(), &SpectralDensity::double_lorentzian(), 5.0).unwrap();
    let probs: Vec<f64> = setup.coefficients.iter().map(|&c| survival_probability(c, 0.0, 5.0)).collect();
    let (fa, fb) = setup.filters.split_at(8);
    let (pa, pb) = probs.split_at(8);
    let a = build_fio(fa, pa).unwrap();
    let b = build_fio(fb, pb).unwrap();
    let ab = a.union(&b).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..5u64 {
        let d = qspectro::experiment::random_direction(7, i);
        let lim = 57.5;
        let sum = directional_fisher(&a, &d, lim).unwrap() + directional_fisher(&b, &d, lim).unwrap();
        let joint = directional_fisher(&ab, &d, lim).unwrap();
        worst = worst.max((joint - sum).abs() / sum);
    }
    if worst > 1e-12 {
        fails.push(format!("union additivity off by {worst:.1e}"));
    }
    if !within(t, 600) {
        fails.push("runtime".into());
    }
    outcome(
        fails.is_empty(),
        format!(
            "rank {} = {}, union additivity {worst:.1e}, bound respected: {} {}",
            num(&r, "filter_rank"),
            num(&r, "fio_rank"),
            r.value("cramer_rao_consistent").unwrap_or("-"),
            fails.join("; ")
        ),
    )
}

fn csv_body(s: &str) -> &str {
    let end = s.lines().take_while(|l| l.starts_with('#')).map(|l| l.len() + 1).sum::<usize>();
    &s[end.min(s.len())..]
}

fn determinism(runs: &mut Runs) -> Outcome {
    let mut fails = Vec::new();
    let mut files = 0usize;
    for p in presets() {
        let parallel = runs.get(p.name).0.clone();
        let serial = run_scenario(&p.config(), Some(1)).unwrap();
        if parallel.artifacts.len() != serial.artifacts.len() {
            fails.push(format!("{}: artifact count differs", p.name));
            continue;
        }
        for (a, b) in parallel.artifacts.iter().zip(&serial.artifacts) {
            files += 1;
            if a.name != b.name || csv_body(&a.contents) != csv_body(&b.contents) {
                fails.push(format!("{}/{}", p.name, a.name));
            }
        }
        if parallel.summary != serial.summary {
            fails.push(format!("{}: summary differs", p.name));
        }
    }
    outcome(fails.is_empty(), format!("{files} files compared {}", fails.join("; ")))
}

fn main() -> ExitCode {
    let mut runs = Runs::default();
    type Check = fn(&mut Runs) -> Outcome;
    let criteria: [(&str, Check); 11] = [
        ("1 in-span exactness", |_| in_span_exactness()),
        ("2 oracle equivalence", |_| oracle_equivalence()),
        ("3 Parseval", |_| parseval()),
        ("4 FO/AS trends", trends),
        ("5 Gamma=0 regime", fig4_regime),
        ("6 leakage suppression", leakage),
        ("7 trapped ion", ion),
        ("8 OCF", ocf),
        ("9 tracking", tracking),
        ("10 Fisher/Cramer-Rao", fisher),
        ("11 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check(&mut runs);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} criterion {name}: {} [{:.1}s]", o.detail.trim_end(), start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
