//! π-pulse modulation functions and continuous phase modulations.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_range, Error, Result};

/// Ideal π-pulse train on `[0, T]`; `y(t)` flips sign at every switch time.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    switch_times: Vec<f64>,
    duration: f64,
    initial_sign: f64,
}

impl PulseSequence {
    pub fn new(switch_times: Vec<f64>, duration: f64) -> Result<Self> {
        Self::with_sign(switch_times, duration, 1)
    }

    pub fn with_sign(switch_times: Vec<f64>, duration: f64, initial_sign: i8) -> Result<Self> {
        ensure_range("T", duration, duration > 0.0 && duration.is_finite(), "(0, inf)")?;
        if initial_sign != 1 && initial_sign != -1 {
            return Err(Error::InvalidParameter(format!(
                "initial sign must be +1 or -1, got {initial_sign}"
            )));
        }
        if switch_times.iter().any(|&t| !(t > 0.0 && t < duration)) {
            return Err(Error::InvalidParameter(format!(
                "switch times must lie in (0, {duration})"
            )));
        }
        if switch_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("switch times must be strictly increasing".into()));
        }
        Ok(Self {
            switch_times,
            duration,
            initial_sign: initial_sign as f64,
        })
    }

    /// Free evolution, `y ≡ 1`.
    pub fn free(duration: f64) -> Result<Self> {
        Self::new(Vec::new(), duration)
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.switch_times
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn initial_sign(&self) -> f64 {
        self.initial_sign
    }

    pub fn final_sign(&self) -> f64 {
        if self.switch_times.len().is_multiple_of(2) {
            self.initial_sign
        } else {
            -self.initial_sign
        }
    }

    /// `y(t)`, right-continuous at switch times.
    pub fn eval(&self, t: f64) -> Result<f64> {
        ensure_range("t", t, (0.0..=self.duration).contains(&t), &format!("[0, {}]", self.duration))?;
        Ok(self.level(t))
    }

    fn level(&self, t: f64) -> f64 {
        let flips = self.switch_times.partition_point(|&s| s <= t);
        if flips % 2 == 0 {
            self.initial_sign
        } else {
            -self.initial_sign
        }
    }
}

fn checked_times(omega: f64, duration: f64) -> Result<()> {
    ensure_range("omega", omega, omega >= 0.0 && omega.is_finite(), "[0, inf)")?;
    ensure_range("T", duration, duration > 0.0 && duration.is_finite(), "(0, inf)")
}

/// Zeros of `cos(ω t)` in `(0, T)`.
fn cos_zeros(omega: f64, duration: f64) -> Vec<f64> {
    if omega <= 0.0 {
        return Vec::new();
    }
    (0..)
        .map(|n| (FRAC_PI_2 + n as f64 * PI) / omega)
        .take_while(|&t| t < duration)
        .filter(|&t| t > 0.0)
        .collect()
}

/// Zeros of `sin(ω t)` in `(0, T)`.
fn sin_zeros(omega: f64, duration: f64) -> Vec<f64> {
    if omega <= 0.0 {
        return Vec::new();
    }
    (1..)
        .map(|n| n as f64 * PI / omega)
        .take_while(|&t| t < duration)
        .collect()
}

fn check_index(k: usize, count: usize, omega_max: f64) -> Result<()> {
    if k == 0 || k > count {
        return Err(Error::InvalidParameter(format!(
            "filter index {k} outside 1..={count}"
        )));
    }
    ensure_range("omega_max", omega_max, omega_max > 0.0, "(0, inf)")
}

/// Orthogonalization-protocol sequence `k` of `K`: pulses at the zeros of
/// `cos(ω_max (k-1)/K · t)`. `k = 1` is free evolution.
pub fn fo_sequence(k: usize, count: usize, omega_max: f64, duration: f64) -> Result<PulseSequence> {
    check_index(k, count, omega_max)?;
    let omega = omega_max * (k - 1) as f64 / count as f64;
    checked_times(omega, duration)?;
    PulseSequence::new(cos_zeros(omega, duration), duration)
}

/// Pointwise-protocol sequence `k` of `K`: pulses at the zeros of
/// `sin(ω_max k/K · t)`.
pub fn as_sequence(k: usize, count: usize, omega_max: f64, duration: f64) -> Result<PulseSequence> {
    check_index(k, count, omega_max)?;
    let omega = omega_max * k as f64 / count as f64;
    checked_times(omega, duration)?;
    PulseSequence::new(sin_zeros(omega, duration), duration)
}

/// N-qubit modulation whose summed level is the nearest-level quantization
/// of `N cos(ω_f t)` onto `{-N, -N+2, ..., N}`. Qubit `j` (0-based) is
/// `+1` while `cos(ω_f t) > (N-1-2j)/N`.
pub fn staircase_split(omega_f: f64, qubits: usize, duration: f64) -> Result<ModulationSet> {
    if qubits == 0 {
        return Err(Error::InvalidParameter("qubit count must be at least 1".into()));
    }
    checked_times(omega_f, duration)?;
    let n = qubits as f64;
    let sequences = (0..qubits)
        .map(|j| {
            let theta = (n - 1.0 - 2.0 * j as f64) / n;
            let times = if theta == 0.0 {
                cos_zeros(omega_f, duration)
            } else {
                level_crossings(omega_f, theta, duration)
            };
            PulseSequence::new(times, duration)
        })
        .collect::<Result<Vec<_>>>()?;
    ModulationSet::new(sequences)
}

/// Times in `(0, T)` where `cos(ω t)` crosses `theta`, `|theta| < 1`.
fn level_crossings(omega: f64, theta: f64, duration: f64) -> Vec<f64> {
    if omega <= 0.0 {
        return Vec::new();
    }
    let a = theta.acos();
    let mut out = Vec::new();
    for n in 0.. {
        let base = TAU * n as f64;
        let down = (a + base) / omega;
        if down >= duration {
            break;
        }
        if down > 0.0 {
            out.push(down);
        }
        let up = (TAU - a + base) / omega;
        if up < duration {
            out.push(up);
        }
    }
    out
}

/// Per-qubit sequences of an N-qubit probe sharing one duration; the
/// effective modulation is the sum `Σ_j y_j(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationSet {
    sequences: Vec<PulseSequence>,
}

impl ModulationSet {
    pub fn new(sequences: Vec<PulseSequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidParameter("modulation set needs at least one sequence".into()))?;
        let t = first.duration;
        if sequences.iter().any(|s| s.duration != t) {
            return Err(Error::InvalidParameter(
                "all sequences in a modulation set must share the same duration".into(),
            ));
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[PulseSequence] {
        &self.sequences
    }

    pub fn qubits(&self) -> usize {
        self.sequences.len()
    }

    pub fn duration(&self) -> f64 {
        self.sequences[0].duration
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let d = self.duration();
        ensure_range("t", t, (0.0..=d).contains(&t), &format!("[0, {d}]"))?;
        Ok(self.sequences.iter().map(|s| s.level(t)).sum())
    }

    /// Level at `t = 0`, level at `t = T`, and every jump `(t_j, y(t_j⁺) - y(t_j⁻))`.
    pub fn jumps(&self) -> (f64, f64, Vec<(f64, f64)>) {
        let y0 = self.sequences.iter().map(|s| s.initial_sign).sum();
        let yt = self.sequences.iter().map(|s| s.final_sign()).sum();
        let mut out = Vec::new();
        for s in &self.sequences {
            let mut sign = s.initial_sign;
            for &t in &s.switch_times {
                out.push((t, -2.0 * sign));
                sign = -sign;
            }
        }
        (y0, yt, out)
    }

    /// Piecewise-constant segments `(start, end, level)` of the summed modulation.
    pub fn segments(&self) -> Vec<(f64, f64, f64)> {
        let t_end = self.duration();
        let (y0, _, mut jumps) = self.jumps();
        jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::with_capacity(jumps.len() + 1);
        let mut start = 0.0;
        let mut level = y0;
        for (t, d) in jumps {
            if t > start {
                out.push((start, t, level));
                start = t;
            }
            level += d;
        }
        out.push((start, t_end, level));
        out
    }

    /// `∫₀ᵀ y(t)² dt`.
    pub fn square_integral(&self) -> f64 {
        self.segments().iter().map(|(a, b, y)| (b - a) * y * y).sum()
    }

    /// One switch per row: `qubit,time`, with a metadata header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# duration = {}", self.duration());
        let _ = writeln!(s, "# qubits = {}", self.qubits());
        s.push_str("qubit,time\n");
        for (q, seq) in self.sequences.iter().enumerate() {
            for t in &seq.switch_times {
                let _ = writeln!(s, "{q},{t:.12e}");
            }
        }
        s
    }

    /// Parses the output of [`ModulationSet::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut duration = None;
        let mut qubits = None;
        let mut times: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line == "qubit,time" {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "duration" => duration = Some(v.trim().parse::<f64>().map_err(|_| bad("bad duration"))?),
                        "qubits" => qubits = Some(v.trim().parse::<usize>().map_err(|_| bad("bad qubit count"))?),
                        _ => {}
                    }
                }
                continue;
            }
            let (q, t) = line.split_once(',').ok_or_else(|| bad("expected `qubit,time`"))?;
            let q: usize = q.trim().parse().map_err(|_| bad("bad qubit index"))?;
            let t: f64 = t.trim().parse().map_err(|_| bad("bad switch time"))?;
            if times.len() <= q {
                times.resize(q + 1, Vec::new());
            }
            times[q].push(t);
        }
        let duration = duration.ok_or_else(|| Error::Config("missing `# duration` header".into()))?;
        let qubits = qubits.unwrap_or(times.len()).max(times.len()).max(1);
        times.resize(qubits, Vec::new());
        let seqs = times
            .into_iter()
            .map(|t| PulseSequence::new(t, duration))
            .collect::<Result<Vec<_>>>()?;
        Self::new(seqs)
    }
}

impl From<PulseSequence> for ModulationSet {
    fn from(seq: PulseSequence) -> Self {
        Self { sequences: vec![seq] }
    }
}

/// One term `a cos(ν t) + b sin(ν t)` of a phase expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub frequency: f64,
    pub cos: f64,
    pub sin: f64,
}

/// `φ(t) = offset + carrier·t + Σ (a cos ν t + b sin ν t)`; the probe sees
/// `y = cos φ`, `z = sin φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModulation {
    pub duration: f64,
    pub offset: f64,
    pub carrier: f64,
    pub terms: Vec<TrigTerm>,
}

impl ContinuousModulation {
    pub fn new(duration: f64, offset: f64, carrier: f64, terms: Vec<TrigTerm>) -> Result<Self> {
        ensure_range("T", duration, duration > 0.0 && duration.is_finite(), "(0, inf)")?;
        Ok(Self {
            duration,
            offset,
            carrier,
            terms,
        })
    }

    /// `φ ≡ 0`.
    pub fn zero(duration: f64) -> Result<Self> {
        Self::new(duration, 0.0, 0.0, Vec::new())
    }

    #[inline]
    pub fn phase(&self, t: f64) -> f64 {
        let mut p = self.offset + self.carrier * t;
        for term in &self.terms {
            let (s, c) = (term.frequency * t).sin_cos();
            p += term.cos * c + term.sin * s;
        }
        p
    }

    /// Upper bound on `|φ'(t)|`.
    pub fn max_rate(&self) -> f64 {
        self.carrier.abs()
            + self
                .terms
                .iter()
                .map(|t| t.frequency.abs() * (t.cos.abs() + t.sin.abs()))
                .sum::<f64>()
    }

    /// `(cos φ(t), sin φ(t))`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        ensure_range("t", t, (0.0..=self.duration).contains(&t), &format!("[0, {}]", self.duration))?;
        let (s, c) = self.phase(t).sin_cos();
        Ok((c, s))
    }
}
