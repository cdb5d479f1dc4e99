//! Random impulse process: impulse times `ξ_j = ξ_{j-1} + τ_j` with
//! `τ_j ∈ (0, d_j)`, realized jumps `Δ_j = b_j(τ_j)`, the counting process
//! `N(t)`, and the expected jump mass `B = E Σ_j |b_j(τ_j)|`.

use std::io::Write;

use rand::distributions::Open01;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numeric::{fmt_f64, norm, pairwise_sum, stream_rng};
use crate::{Error, Result};

pub const DEFAULT_MAX_IMPULSES: usize = 64;

/// Generator for the interval bounds `d_j` (indices start at 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntervalBounds {
    /// `d_j = scale * ratio^j`.
    Geometric { scale: f64, ratio: f64 },
    /// Finite list `d_1, …, d_m`; the sequence is exhausted after `m` draws.
    Explicit { values: Vec<f64> },
}

impl IntervalBounds {
    pub fn bound(&self, j: usize) -> Option<f64> {
        debug_assert!(j >= 1);
        match self {
            IntervalBounds::Geometric { scale, ratio } => Some(scale * ratio.powi(j as i32)),
            IntervalBounds::Explicit { values } => values.get(j - 1).copied(),
        }
    }

    /// `sup_j d_j`, or `None` when unbounded.
    pub fn supremum(&self) -> Option<f64> {
        match self {
            IntervalBounds::Geometric { scale, ratio } if *ratio <= 1.0 => Some(scale * ratio),
            IntervalBounds::Geometric { .. } => None,
            IntervalBounds::Explicit { values } => Some(values.iter().cloned().fold(0.0, f64::max)),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            IntervalBounds::Geometric { scale, ratio } => {
                if !(scale.is_finite() && *scale > 0.0 && ratio.is_finite() && *ratio > 0.0) {
                    return Err(Error::Config(format!(
                        "geometric interval bounds need scale > 0 and ratio > 0, got {scale}, {ratio}"
                    )));
                }
            }
            IntervalBounds::Explicit { values } => {
                if let Some(d) = values.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
                    return Err(Error::Config(format!("interval bound d_j must be > 0, got {d}")));
                }
            }
        }
        Ok(())
    }
}

/// Law of `τ_j` on `(0, d_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TauLaw {
    Uniform,
    /// Degenerate law `τ_j = fraction * d_j`.
    PointMass { fraction: f64 },
}

/// Scalar coefficients `c_j` of a scalar-radial jump map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpCoefficients {
    /// `c_j = scale * j / base^j`.
    IndexOverPower { scale: f64, base: f64 },
    Constant { value: f64 },
    /// `c_j` for `j ≤ len`, zero afterwards.
    Explicit { values: Vec<f64> },
}

impl JumpCoefficients {
    pub fn coefficient(&self, j: usize) -> f64 {
        match self {
            JumpCoefficients::IndexOverPower { scale, base } => {
                scale * j as f64 / base.powi(j as i32)
            }
            JumpCoefficients::Constant { value } => *value,
            JumpCoefficients::Explicit { values } => values.get(j - 1).copied().unwrap_or(0.0),
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            JumpCoefficients::IndexOverPower { scale, .. } => *scale == 0.0,
            JumpCoefficients::Constant { value } => *value == 0.0,
            JumpCoefficients::Explicit { values } => values.iter().all(|c| *c == 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedPoint {
    pub tau: f64,
    pub jump: Vec<f64>,
}

/// Jump maps `b_j : (0, d_j) → R^{2n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpMap {
    /// `b_j(τ) = c_j τ e_dir`; the direction defaults to the first basis vector
    /// and is normalized on load.
    ScalarRadial {
        coefficients: JumpCoefficients,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        direction: Option<Vec<f64>>,
    },
    /// Piecewise-linear table in `τ` per index (clamped at the table ends);
    /// indices past the last table have zero jump.
    Tabulated { tables: Vec<Vec<TabulatedPoint>> },
}

/// The distributional part of an impulse specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseLaw {
    pub intervals: IntervalBounds,
    pub tau: TauLaw,
    pub jumps: JumpMap,
    #[serde(default = "default_max_impulses")]
    pub max_impulses: usize,
}

fn default_max_impulses() -> usize {
    DEFAULT_MAX_IMPULSES
}

impl ImpulseLaw {
    /// The worked example: `d_j = 2⁻ʲ`, `τ_j ~ U(0, d_j)`, `b_j(τ) = (j/4ʲ) τ`.
    pub fn example_4_1() -> Self {
        ImpulseLaw {
            intervals: IntervalBounds::Geometric { scale: 1.0, ratio: 0.5 },
            tau: TauLaw::Uniform,
            jumps: JumpMap::ScalarRadial {
                coefficients: JumpCoefficients::IndexOverPower { scale: 1.0, base: 4.0 },
                direction: None,
            },
            max_impulses: DEFAULT_MAX_IMPULSES,
        }
    }

    /// No impulse times at all.
    pub fn none() -> Self {
        ImpulseLaw {
            intervals: IntervalBounds::Explicit { values: vec![] },
            tau: TauLaw::Uniform,
            jumps: JumpMap::ScalarRadial {
                coefficients: JumpCoefficients::Constant { value: 0.0 },
                direction: None,
            },
            max_impulses: DEFAULT_MAX_IMPULSES,
        }
    }

    /// Same law with every jump multiplied by `factor`.
    pub fn scaled_jumps(&self, factor: f64) -> Self {
        let mut law = self.clone();
        law.jumps = match &self.jumps {
            JumpMap::ScalarRadial { coefficients, direction } => JumpMap::ScalarRadial {
                coefficients: match coefficients {
                    JumpCoefficients::IndexOverPower { scale, base } => {
                        JumpCoefficients::IndexOverPower { scale: scale * factor, base: *base }
                    }
                    JumpCoefficients::Constant { value } => {
                        JumpCoefficients::Constant { value: value * factor }
                    }
                    JumpCoefficients::Explicit { values } => JumpCoefficients::Explicit {
                        values: values.iter().map(|c| c * factor).collect(),
                    },
                },
                direction: direction.clone(),
            },
            JumpMap::Tabulated { tables } => JumpMap::Tabulated {
                tables: tables
                    .iter()
                    .map(|t| {
                        t.iter()
                            .map(|p| TabulatedPoint {
                                tau: p.tau,
                                jump: p.jump.iter().map(|x| x * factor).collect(),
                            })
                            .collect()
                    })
                    .collect(),
            },
        };
        law
    }
}

/// A validated impulse specification on `[0, T]` in `R^{2n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseSpec {
    horizon: f64,
    dimension: usize,
    law: ImpulseLaw,
    direction: Vec<f64>,
}

impl ImpulseSpec {
    pub fn new(horizon: f64, dimension: usize, law: ImpulseLaw) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be > 0, got {horizon}")));
        }
        if dimension < 2 || dimension % 2 != 0 {
            return Err(Error::Config(format!(
                "state dimension must be even and >= 2, got {dimension}"
            )));
        }
        law.intervals.validate()?;
        match &law.tau {
            TauLaw::Uniform => {}
            TauLaw::PointMass { fraction } => {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "point-mass fraction must lie in (0, 1), got {fraction}"
                    )));
                }
            }
        }
        let mut direction = vec![0.0; dimension];
        direction[0] = 1.0;
        match &law.jumps {
            JumpMap::ScalarRadial { direction: Some(d), .. } => {
                if d.len() != dimension {
                    return Err(Error::Dimension { expected: dimension, got: d.len() });
                }
                let len = norm(d);
                if !(len.is_finite() && len > 0.0) {
                    return Err(Error::Config("jump direction must be a nonzero vector".into()));
                }
                direction = d.iter().map(|x| x / len).collect();
            }
            JumpMap::ScalarRadial { direction: None, .. } => {}
            JumpMap::Tabulated { tables } => {
                for table in tables {
                    if table.is_empty() {
                        return Err(Error::Config("empty jump table".into()));
                    }
                    if table.windows(2).any(|w| w[1].tau <= w[0].tau) {
                        return Err(Error::Config("jump table τ values must increase".into()));
                    }
                    if let Some(p) = table.iter().find(|p| p.jump.len() != dimension) {
                        return Err(Error::Dimension { expected: dimension, got: p.jump.len() });
                    }
                }
            }
        }
        Ok(ImpulseSpec { horizon, dimension, law, direction })
    }

    pub fn example_4_1(horizon: f64) -> Self {
        ImpulseSpec::new(horizon, 2, ImpulseLaw::example_4_1()).expect("builtin spec is valid")
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn law(&self) -> &ImpulseLaw {
        &self.law
    }

    /// `b_j(τ)`.
    pub fn jump(&self, j: usize, tau: f64) -> Vec<f64> {
        match &self.law.jumps {
            JumpMap::ScalarRadial { coefficients, .. } => {
                let c = coefficients.coefficient(j) * tau;
                self.direction.iter().map(|e| c * e).collect()
            }
            JumpMap::Tabulated { tables } => match tables.get(j - 1) {
                None => vec![0.0; self.dimension],
                Some(table) => interpolate_table(table, tau),
            },
        }
    }

    /// `sup_{τ ∈ (0, d_j)} |b_j(τ)|`.
    fn jump_sup(&self, j: usize, d: f64) -> f64 {
        match &self.law.jumps {
            JumpMap::ScalarRadial { coefficients, .. } => coefficients.coefficient(j).abs() * d,
            JumpMap::Tabulated { tables } => tables
                .get(j - 1)
                .map(|t| t.iter().map(|p| norm(&p.jump)).fold(0.0, f64::max))
                .unwrap_or(0.0),
        }
    }

    fn draw_tau<R: Rng>(&self, d: f64, rng: &mut R) -> f64 {
        match self.law.tau {
            TauLaw::Uniform => loop {
                let x: f64 = rng.sample(Open01);
                let tau = d * x;
                if tau > 0.0 && tau < d {
                    break tau;
                }
            },
            TauLaw::PointMass { fraction } => fraction * d,
        }
    }

    /// Upper bound on the jump mass beyond index `k`, summed until the terms
    /// vanish or a fixed number of indices has been visited.
    /// Drops every impulse from the first one closer than `min_gap` to its
    /// predecessor onward. `tail_bound` then bounds the dropped jump mass.
    pub fn resolve(&self, orbit: &SampleOrbit, min_gap: f64) -> SampleOrbit {
        let mut prev = 0.0;
        let keep = orbit
            .times
            .iter()
            .position(|&t| {
                let short = t - prev < min_gap;
                prev = t;
                short
            })
            .unwrap_or(orbit.times.len());
        if keep == orbit.times.len() {
            return orbit.clone();
        }
        SampleOrbit {
            times: orbit.times[..keep].to_vec(),
            draws: orbit.draws[..keep].to_vec(),
            jumps: orbit.jumps[..keep].to_vec(),
            stop: StopReason::Resolution,
            tail_bound: Some(self.tail_bound(keep)),
            ..orbit.clone()
        }
    }

    fn tail_bound(&self, k: usize) -> f64 {
        let mut total = 0.0;
        for j in k + 1..k + 4096 {
            let Some(d) = self.law.intervals.bound(j) else { break };
            let term = self.jump_sup(j, d);
            total += term;
            if term < 1e-300 && j > k + 8 {
                break;
            }
        }
        total
    }
}

fn interpolate_table(table: &[TabulatedPoint], tau: f64) -> Vec<f64> {
    let first = &table[0];
    let last = &table[table.len() - 1];
    if tau <= first.tau {
        return first.jump.clone();
    }
    if tau >= last.tau {
        return last.jump.clone();
    }
    let i = table.partition_point(|p| p.tau <= tau);
    let (a, b) = (&table[i - 1], &table[i]);
    let w = (tau - a.tau) / (b.tau - a.tau);
    a.jump.iter().zip(&b.jump).map(|(x, y)| x + w * (y - x)).collect()
}

/// Why orbit generation stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The next impulse time would reach or exceed the horizon.
    Horizon,
    /// The configured impulse cap was reached.
    Cap,
    /// The generator sequence ended, or the next increment no longer changes
    /// the impulse time in floating point.
    Exhausted,
    /// Truncated where the next gap fell below the discretization resolution.
    Resolution,
}

/// One realization of the impulse process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOrbit {
    pub orbit_seed: u64,
    pub orbit_index: u64,
    pub horizon: f64,
    /// `ξ_1 < ξ_2 < … < ξ_k`, all in `(0, T)`.
    pub times: Vec<f64>,
    /// `τ_1, …, τ_k`.
    pub draws: Vec<f64>,
    /// `Δ_j = b_j(τ_j)`.
    pub jumps: Vec<Vec<f64>>,
    pub stop: StopReason,
    /// Bound on the jump mass that truncation dropped (cap or exhaustion only).
    pub tail_bound: Option<f64>,
}

impl SampleOrbit {
    /// Builds an orbit from explicit impulse times and jumps.
    pub fn fixed(horizon: f64, times: Vec<f64>, jumps: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != jumps.len() {
            return Err(Error::Shape("one jump per impulse time is required".into()));
        }
        let mut prev = 0.0;
        for &t in &times {
            if !(t > prev && t < horizon) {
                return Err(Error::Domain(format!(
                    "impulse times must be strictly increasing inside (0, {horizon})"
                )));
            }
            prev = t;
        }
        let mut draws = Vec::with_capacity(times.len());
        let mut prev = 0.0;
        for &t in &times {
            draws.push(t - prev);
            prev = t;
        }
        Ok(SampleOrbit {
            orbit_seed: 0,
            orbit_index: 0,
            horizon,
            times,
            draws,
            jumps,
            stop: StopReason::Exhausted,
            tail_bound: None,
        })
    }

    /// An orbit without impulses.
    pub fn empty(horizon: f64) -> Self {
        SampleOrbit::fixed(horizon, vec![], vec![]).expect("empty orbit is valid")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Σ_j |Δ_j|`.
    pub fn jump_mass(&self) -> f64 {
        self.jumps.iter().map(|d| norm(d)).sum()
    }
}

/// Generates orbit `index` of the ensemble seeded by `seed`.
pub fn sample_orbit_indexed(spec: &ImpulseSpec, seed: u64, index: u64) -> SampleOrbit {
    let mut rng = stream_rng(seed, index);
    let horizon = spec.horizon;
    let mut times = Vec::new();
    let mut draws = Vec::new();
    let mut jumps = Vec::new();
    let mut xi = 0.0f64;
    let mut j = 1usize;
    let stop = loop {
        if j > spec.law.max_impulses {
            break StopReason::Cap;
        }
        let Some(d) = spec.law.intervals.bound(j) else { break StopReason::Exhausted };
        let tau = spec.draw_tau(d, &mut rng);
        let next = xi + tau;
        if next <= xi {
            break StopReason::Exhausted;
        }
        if next >= horizon {
            break StopReason::Horizon;
        }
        times.push(next);
        draws.push(tau);
        jumps.push(spec.jump(j, tau));
        xi = next;
        j += 1;
    };
    let tail_bound = match stop {
        StopReason::Horizon => None,
        _ => Some(spec.tail_bound(times.len())),
    };
    SampleOrbit { orbit_seed: seed, orbit_index: index, horizon, times, draws, jumps, stop, tail_bound }
}

/// `sample_orbit(spec, seed)`: the first orbit of the stream family `seed`.
pub fn sample_orbit(spec: &ImpulseSpec, seed: u64) -> SampleOrbit {
    sample_orbit_indexed(spec, seed, 0)
}

/// `n` orbits, generated in parallel; orbit `i` always comes from stream `i`.
pub fn sample_ensemble(spec: &ImpulseSpec, n: usize, seed: u64) -> Vec<SampleOrbit> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| sample_orbit_indexed(spec, seed, i))
        .collect()
}

/// `N(t) = #{j : ξ_j ≤ t}`.
pub fn counting_process(orbit: &SampleOrbit, t: f64) -> Result<usize> {
    if !(t >= 0.0 && t <= orbit.horizon) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", orbit.horizon)));
    }
    Ok(orbit.times.partition_point(|&x| x <= t))
}

/// Monte Carlo estimate of `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BEstimate {
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub n_orbits: usize,
}

pub fn estimate_b(spec: &ImpulseSpec, n_orbits: usize, seed: u64) -> Result<BEstimate> {
    if n_orbits == 0 {
        return Err(Error::Config("n_orbits must be >= 1".into()));
    }
    let masses: Vec<f64> = (0..n_orbits as u64)
        .into_par_iter()
        .map(|i| sample_orbit_indexed(spec, seed, i).jump_mass())
        .collect();
    let n = n_orbits as f64;
    let mean = pairwise_sum(&masses) / n;
    let stderr = if n_orbits > 1 {
        let sq: Vec<f64> = masses.iter().map(|m| (m - mean) * (m - mean)).collect();
        (pairwise_sum(&sq) / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(BEstimate { mc_mean: mean, mc_stderr: stderr, n_orbits })
}

/// `Σ_{j=1}^{k} j x^j` in closed form with `x = 1/base`.
pub fn index_power_partial_sum(base: f64, k: usize) -> f64 {
    let x = 1.0 / base;
    let k = k as i32;
    x * (1.0 - (k + 1) as f64 * x.powi(k) + k as f64 * x.powi(k + 1)) / ((1.0 - x) * (1.0 - x))
}

/// Closed-form upper bound for `B`, bounding every draw by
/// `max(1, sup_j d_j)`. For the worked example this is `Σ j/4ʲ = 4/9`.
pub fn analytic_b_bound(spec: &ImpulseSpec) -> Result<f64> {
    let JumpMap::ScalarRadial { coefficients, .. } = &spec.law.jumps else {
        return Err(Error::Unsupported("tabulated jump maps have no closed-form bound".into()));
    };
    if coefficients.is_zero() {
        return Ok(0.0);
    }
    let tau_cap = spec
        .law
        .intervals
        .supremum()
        .ok_or_else(|| Error::Unsupported("unbounded interval generator".into()))?
        .max(1.0);
    match coefficients {
        JumpCoefficients::IndexOverPower { scale, base } if *base > 1.0 => {
            let x = 1.0 / base;
            Ok(scale.abs() * x / ((1.0 - x) * (1.0 - x)) * tau_cap)
        }
        JumpCoefficients::Explicit { values } => {
            Ok(values.iter().map(|c| c.abs()).sum::<f64>() * tau_cap)
        }
        _ => Err(Error::Unsupported(
            "jump coefficients are not summable in closed form".into(),
        )),
    }
}

/// Writes `orbit_id,j,xi,tau,jump_norm` rows.
pub fn write_orbits_csv<W: Write>(orbits: &[SampleOrbit], mut out: W) -> std::io::Result<()> {
    writeln!(out, "orbit_id,j,xi,tau,jump_norm")?;
    for orbit in orbits {
        for (j, ((xi, tau), jump)) in orbit.times.iter().zip(&orbit.draws).zip(&orbit.jumps).enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                orbit.orbit_index,
                j + 1,
                fmt_f64(*xi),
                fmt_f64(*tau),
                fmt_f64(norm(jump))
            )?;
        }
    }
    Ok(())
}
