//! Discretized stochastic processes on `[0, T]`.
//!
//! A process is an ensemble of per-orbit piecewise paths. Each orbit's path is
//! split into segments at that orbit's impulse times; an impulse time appears
//! twice, as the last node of one segment (left value) and the first node of
//! the next (right value). All orbits share the same base grid `t_i = iT/M`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::impulse::SampleOrbit;
use crate::numeric::{fmt_f64, norm, pairwise_mean, stream_rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Composite trapezoid per segment.
    #[default]
    Trapezoid,
    /// Composite Simpson per segment on node pairs (nonuniform weights), with a
    /// trapezoid panel for an odd trailing interval.
    Simpson,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeScheme {
    /// Three-point central differences inside a segment, one-sided
    /// (four-point when available) at segment ends.
    #[default]
    Central,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Number of base intervals `M`; the base grid has `M + 1` nodes.
    pub base_intervals: usize,
    #[serde(default)]
    pub quadrature: Quadrature,
    #[serde(default)]
    pub derivative: DerivativeScheme,
}

impl GridSpec {
    pub fn new(base_intervals: usize) -> Result<Self> {
        let g = GridSpec {
            base_intervals,
            quadrature: Quadrature::Trapezoid,
            derivative: DerivativeScheme::Central,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_intervals < 8 {
            return Err(Error::Config(format!(
                "grid needs at least 9 base nodes, got {}",
                self.base_intervals + 1
            )));
        }
        Ok(())
    }

    /// Smallest impulse gap the grid resolves: a thousandth of the base step.
    pub fn resolution(&self, horizon: f64) -> f64 {
        1e-3 * horizon / self.base_intervals as f64
    }

    /// Node times of each segment for an orbit with the given impulse times.
    /// Base nodes closer than 1% of the base spacing to a segment end are
    /// dropped; segments with fewer than three nodes receive extra interior
    /// nodes.
    pub fn segment_times(&self, horizon: f64, impulses: &[f64]) -> Vec<Vec<f64>> {
        let m = self.base_intervals;
        let h = horizon / m as f64;
        let guard = 0.01 * h;
        let mut bounds = Vec::with_capacity(impulses.len() + 2);
        bounds.push(0.0);
        bounds.extend_from_slice(impulses);
        bounds.push(horizon);
        let mut segments = Vec::with_capacity(bounds.len() - 1);
        for w in bounds.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mut nodes = vec![a];
            let first = (a / h).floor() as usize;
            for i in first..=m {
                let t = if i == m { horizon } else { i as f64 * h };
                if t > a + guard && t < b - guard {
                    nodes.push(t);
                }
            }
            if nodes.len() == 1 {
                nodes.push(0.5 * (a + b));
            }
            nodes.push(b);
            segments.push(nodes);
        }
        segments
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub times: Vec<f64>,
    /// Node values, `dim` entries per node.
    pub values: Vec<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, i: usize, dim: usize) -> &[f64] {
        &self.values[i * dim..(i + 1) * dim]
    }

    pub fn value_mut(&mut self, i: usize, dim: usize) -> &mut [f64] {
        &mut self.values[i * dim..(i + 1) * dim]
    }
}

/// One orbit's piecewise path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitPath {
    pub dim: usize,
    pub segments: Vec<Segment>,
}

impl OrbitPath {
    pub fn node_count(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    /// Node values of all segments, concatenated.
    pub fn flat(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for seg in &mut self.segments {
            let n = seg.values.len();
            seg.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn first(&self) -> &[f64] {
        self.segments[0].value(0, self.dim)
    }

    pub fn last(&self) -> &[f64] {
        let seg = self.segments.last().expect("nonempty path");
        seg.value(seg.len() - 1, self.dim)
    }

    /// Left and right values at impulse `j` (0-based).
    pub fn impulse_sides(&self, j: usize) -> (&[f64], &[f64]) {
        let l = &self.segments[j];
        (l.value(l.len() - 1, self.dim), self.segments[j + 1].value(0, self.dim))
    }

    fn same_layout(&self, other: &OrbitPath) -> bool {
        self.dim == other.dim
            && self.segments.len() == other.segments.len()
            && self.segments.iter().zip(&other.segments).all(|(a, b)| a.times == b.times)
    }

    /// Visits every time in the sorted list `times` and supplies the left and
    /// right limits of the piecewise-linear interpolant there.
    fn for_each_side<F: FnMut(usize, &[f64], &[f64])>(&self, times: &[f64], mut f: F) {
        let dim = self.dim;
        let mut left = vec![0.0; dim];
        let mut right = vec![0.0; dim];
        let mut seg = 0;
        let mut node = 0;
        for (k, &t) in times.iter().enumerate() {
            // advance to the segment whose closed interval contains t
            while seg + 1 < self.segments.len() && *self.segments[seg].times.last().unwrap() < t {
                seg += 1;
                node = 0;
            }
            let s = &self.segments[seg];
            while node + 2 < s.len() && s.times[node + 1] <= t {
                node += 1;
            }
            interpolate(s, dim, node, t, &mut left);
            let at_end = t == *s.times.last().unwrap();
            if at_end && seg + 1 < self.segments.len() {
                right.copy_from_slice(self.segments[seg + 1].value(0, dim));
            } else {
                right.copy_from_slice(&left);
            }
            f(k, &left, &right);
        }
    }
}

fn interpolate(s: &Segment, dim: usize, node: usize, t: f64, out: &mut [f64]) {
    let (t0, t1) = (s.times[node], s.times[node + 1]);
    let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
    let (a, b) = (s.value(node, dim), s.value(node + 1, dim));
    for i in 0..dim {
        out[i] = if w == 1.0 { b[i] } else { a[i] + w * (b[i] - a[i]) };
    }
}

/// A discretized stochastic process: one [`OrbitPath`] per sample orbit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProcess {
    pub horizon: f64,
    pub dim: usize,
    pub quadrature: Quadrature,
    pub orbits: Vec<OrbitPath>,
}

impl EnsembleProcess {
    /// Builds a process whose node values come from `f(orbit, segment, t, out)`.
    pub fn from_fn<F>(
        horizon: f64,
        dim: usize,
        grid: &GridSpec,
        orbits: &[SampleOrbit],
        mut f: F,
    ) -> Self
    where
        F: FnMut(usize, usize, f64, &mut [f64]),
    {
        let paths = orbits
            .iter()
            .enumerate()
            .map(|(o, orbit)| {
                let segments = grid
                    .segment_times(horizon, &orbit.times)
                    .into_iter()
                    .enumerate()
                    .map(|(s, times)| {
                        let mut values = vec![0.0; times.len() * dim];
                        for (i, &t) in times.iter().enumerate() {
                            f(o, s, t, &mut values[i * dim..(i + 1) * dim]);
                        }
                        Segment { times, values }
                    })
                    .collect();
                OrbitPath { dim, segments }
            })
            .collect();
        EnsembleProcess { horizon, dim, quadrature: grid.quadrature, orbits: paths }
    }

    /// A deterministic function of time on every orbit's grid.
    pub fn from_time_fn<F>(horizon: f64, dim: usize, grid: &GridSpec, orbits: &[SampleOrbit], f: F) -> Self
    where
        F: Fn(f64, &mut [f64]),
    {
        Self::from_fn(horizon, dim, grid, orbits, |_, _, t, out| f(t, out))
    }

    pub fn zeros(horizon: f64, dim: usize, grid: &GridSpec, orbits: &[SampleOrbit]) -> Self {
        Self::from_fn(horizon, dim, grid, orbits, |_, _, _, _| {})
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn n_orbits(&self) -> usize {
        self.orbits.len()
    }

    /// Single-orbit sub-ensemble.
    pub fn orbit_process(&self, o: usize) -> Self {
        EnsembleProcess {
            horizon: self.horizon,
            dim: self.dim,
            quadrature: self.quadrature,
            orbits: vec![self.orbits[o].clone()],
        }
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        let mut out = self.clone();
        for orbit in &mut out.orbits {
            for seg in &mut orbit.segments {
                for v in &mut seg.values {
                    *v = f(*v);
                }
            }
        }
        out
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        self.map(|x| lambda * x)
    }

    /// `self + lambda * other`.
    pub fn axpy(&self, lambda: f64, other: &EnsembleProcess) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.orbits.iter_mut().zip(&other.orbits) {
            for (sa, sb) in a.segments.iter_mut().zip(&b.segments) {
                for (x, y) in sa.values.iter_mut().zip(&sb.values) {
                    *x += lambda * y;
                }
            }
        }
        Ok(out)
    }

    pub fn check_compatible(&self, other: &EnsembleProcess) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Dimension { expected: self.dim, got: other.dim });
        }
        if self.orbits.len() != other.orbits.len()
            || self.horizon != other.horizon
            || !self.orbits.iter().zip(&other.orbits).all(|(a, b)| a.same_layout(b))
        {
            return Err(Error::Shape("processes live on different grids or ensembles".into()));
        }
        Ok(())
    }

    /// Sets the values at `t = 0` and `t = T` to zero on every orbit.
    pub fn pin_dirichlet(&mut self) {
        let dim = self.dim;
        for orbit in &mut self.orbits {
            orbit.segments[0].value_mut(0, dim).fill(0.0);
            let last = orbit.segments.last_mut().unwrap();
            let n = last.len();
            last.value_mut(n - 1, dim).fill(0.0);
        }
    }

    /// Largest boundary magnitude `max_o (|x(0)| + |x(T)|)`.
    pub fn boundary_magnitude(&self) -> f64 {
        self.orbits.iter().map(|o| norm(o.first()) + norm(o.last())).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.orbits
            .iter()
            .flat_map(|o| o.segments.iter().flat_map(|s| s.values.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sorted union of node times over all orbits.
    fn union_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .orbits
            .iter()
            .flat_map(|o| o.segments.iter().flat_map(|s| s.times.iter().copied()))
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    /// Per-union-time ensemble means of `g(x_left)` and `g(x_right)` combined
    /// with the matching values of `other` (if any) through `g`.
    fn side_means<G>(&self, other: Option<&EnsembleProcess>, g: G) -> (Vec<f64>, Vec<[f64; 3]>)
    where
        G: Fn(&[f64], &[f64]) -> [f64; 3],
    {
        let times = self.union_times();
        let mut sums = vec![[0.0; 3]; 2 * times.len()];
        for (o, orbit) in self.orbits.iter().enumerate() {
            let mut lefts = vec![Vec::new(); times.len()];
            let mut rights = vec![Vec::new(); times.len()];
            orbit.for_each_side(&times, |k, l, r| {
                lefts[k] = l.to_vec();
                rights[k] = r.to_vec();
            });
            let mut apply = |k: usize, side: usize, x: &[f64], y: &[f64]| {
                let v = g(x, y);
                for c in 0..3 {
                    sums[2 * k + side][c] += v[c];
                }
            };
            match other {
                None => {
                    for k in 0..times.len() {
                        apply(k, 0, &lefts[k], &lefts[k]);
                        apply(k, 1, &rights[k], &rights[k]);
                    }
                }
                Some(y) => {
                    y.orbits[o].for_each_side(&times, |k, l, r| {
                        apply(k, 0, &lefts[k], l);
                        apply(k, 1, &rights[k], r);
                    });
                }
            }
        }
        let n = self.orbits.len() as f64;
        for s in &mut sums {
            for c in s.iter_mut() {
                *c /= n;
            }
        }
        (times, sums)
    }
}

/// `‖x‖_PC = (max_t E|x(t)|²)^{1/2}`, the max running over grid nodes and
/// both one-sided limits at impulse nodes.
pub fn pc_norm(x: &EnsembleProcess) -> Result<f64> {
    if x.orbits.is_empty() {
        return Err(Error::Shape("empty ensemble".into()));
    }
    if x.orbits.len() == 1 {
        let o = &x.orbits[0];
        let m = o
            .segments
            .iter()
            .flat_map(|s| s.values.chunks(x.dim))
            .map(|v| v.iter().map(|c| c * c).sum::<f64>())
            .fold(0.0, f64::max);
        return Ok(m.sqrt());
    }
    let (_, sums) = x.side_means(None, |a, _| [a.iter().map(|c| c * c).sum(), 0.0, 0.0]);
    Ok(sums.iter().map(|s| s[0]).fold(0.0, f64::max).sqrt())
}

/// `‖x‖_{PC₁} = max(‖x‖_PC, ‖ẋ‖_PC)`.
pub fn pc1_norm(x: &EnsembleProcess) -> Result<f64> {
    Ok(pc_norm(x)?.max(pc_norm(&derivative(x)?)?))
}

/// Derivative weights of the Lagrange interpolant through `ts` at `ts[i]`.
fn lagrange_diff_weights(ts: &[f64], i: usize) -> Vec<f64> {
    let n = ts.len();
    let mut w = vec![0.0; n];
    for k in 0..n {
        if k == i {
            w[k] = (0..n).filter(|&m| m != i).map(|m| 1.0 / (ts[i] - ts[m])).sum();
        } else {
            let mut prod = 1.0 / (ts[k] - ts[i]);
            for m in 0..n {
                if m != k && m != i {
                    prod *= (ts[i] - ts[m]) / (ts[k] - ts[m]);
                }
            }
            w[k] = prod;
        }
    }
    w
}

/// Segmentwise derivative of one segment's node values.
pub fn segment_derivative(seg: &Segment, dim: usize) -> Result<Vec<f64>> {
    let n = seg.len();
    if n < 3 {
        return Err(Error::DegenerateGrid(format!("segment with {n} nodes; at least 3 required")));
    }
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let (lo, hi) = if i == 0 {
            (0, n.min(4))
        } else if i == n - 1 {
            (n.saturating_sub(4), n)
        } else {
            (i - 1, i + 2)
        };
        let w = lagrange_diff_weights(&seg.times[lo..hi], i - lo);
        for (k, wk) in w.iter().enumerate() {
            let v = seg.value(lo + k, dim);
            for c in 0..dim {
                out[i * dim + c] += wk * v[c];
            }
        }
    }
    Ok(out)
}

/// Derivative per segment; impulse nodes get one-sided values from their own
/// segment, so nothing is differenced across a jump.
pub fn derivative(x: &EnsembleProcess) -> Result<EnsembleProcess> {
    let mut out = x.clone();
    for (o_out, o_in) in out.orbits.iter_mut().zip(&x.orbits) {
        for (s_out, s_in) in o_out.segments.iter_mut().zip(&o_in.segments) {
            s_out.values = segment_derivative(s_in, x.dim)?;
        }
    }
    Ok(out)
}

/// Quadrature weights for a segment with the given node times.
pub fn quadrature_weights(times: &[f64], rule: Quadrature) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    match rule {
        Quadrature::Trapezoid => {
            for i in 0..n - 1 {
                let h = times[i + 1] - times[i];
                w[i] += 0.5 * h;
                w[i + 1] += 0.5 * h;
            }
        }
        Quadrature::Simpson => {
            let mut i = 0;
            while i + 2 < n {
                let h0 = times[i + 1] - times[i];
                let h1 = times[i + 2] - times[i + 1];
                let s = h0 + h1;
                w[i] += s / 6.0 * (2.0 - h1 / h0);
                w[i + 1] += s * s * s / (6.0 * h0 * h1);
                w[i + 2] += s / 6.0 * (2.0 - h0 / h1);
                i += 2;
            }
            if i + 1 < n {
                let h = times[i + 1] - times[i];
                w[i] += 0.5 * h;
                w[i + 1] += 0.5 * h;
            }
        }
    }
    w
}

/// `⟨x, y⟩ = E ∫₀ᵀ (x(t), y(t)) dt` with per-segment quadrature.
pub fn inner_product(x: &EnsembleProcess, y: &EnsembleProcess) -> Result<f64> {
    x.check_compatible(y)?;
    let dim = x.dim;
    let per_orbit: Vec<f64> = x
        .orbits
        .iter()
        .zip(&y.orbits)
        .map(|(a, b)| {
            a.segments
                .iter()
                .zip(&b.segments)
                .map(|(sa, sb)| {
                    let w = quadrature_weights(&sa.times, x.quadrature);
                    (0..sa.len())
                        .map(|i| {
                            w[i] * sa.value(i, dim).iter().zip(sb.value(i, dim)).map(|(p, q)| p * q).sum::<f64>()
                        })
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(pairwise_mean(&per_orbit))
}

/// `min_t [E|x|² E|y|² − (E|x||y|)²]` over nodes and both sides.
pub fn expectation_cs_check(x: &EnsembleProcess, y: &EnsembleProcess) -> Result<f64> {
    x.check_compatible(y)?;
    let (_, sums) = x.side_means(Some(y), |a, b| {
        let na = norm(a);
        let nb = norm(b);
        [na * na, nb * nb, na * nb]
    });
    Ok(sums.iter().map(|s| s[0] * s[1] - s[2] * s[2]).fold(f64::INFINITY, f64::min))
}

/// Dirichlet trial processes used to probe the embedding constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrialFamily {
    /// `Σ_{k ≤ max_mode} a_k sin(kπt/T)` per component, `a_k ~ N(0,1)/k`.
    SineModes { max_mode: usize },
    /// Cubic Hermite interpolant with random knot values (pinned to zero at
    /// both ends) and random knot slopes.
    PinnedCubic { knots: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    /// Largest observed `‖x‖_{PC₁} / ‖ẋ‖_PC`: a lower bound for `K`.
    pub k_lower: f64,
    /// `k_lower * working_factor`.
    pub k_working: f64,
    /// Index of the trial attaining `k_lower`.
    pub best_trial: usize,
    pub trials: usize,
    pub skipped: usize,
}

pub const DEFAULT_K_FACTOR: f64 = 1.05;

/// Trial `index` of `family` on a single orbit without impulses.
pub fn trial_process(
    horizon: f64,
    dim: usize,
    grid: &GridSpec,
    family: TrialFamily,
    seed: u64,
    index: u64,
) -> EnsembleProcess {
    let mut rng = stream_rng(seed, index);
    let orbit = SampleOrbit::empty(horizon);
    let mut x = match family {
        TrialFamily::SineModes { max_mode } => {
            let coeffs: Vec<Vec<f64>> = (0..dim)
                .map(|_| {
                    (1..=max_mode.max(1))
                        .map(|k| rng.sample::<f64, _>(StandardNormal) / k as f64)
                        .collect()
                })
                .collect();
            EnsembleProcess::from_time_fn(horizon, dim, grid, &[orbit], |t, out| {
                for (c, a) in out.iter_mut().zip(&coeffs) {
                    *c = a
                        .iter()
                        .enumerate()
                        .map(|(k, ak)| ak * ((k + 1) as f64 * std::f64::consts::PI * t / horizon).sin())
                        .sum();
                }
            })
        }
        TrialFamily::PinnedCubic { knots } => {
            let m = knots.max(1) + 1; // intervals
            let h = horizon / m as f64;
            let values: Vec<Vec<f64>> = (0..=m)
                .map(|i| {
                    (0..dim)
                        .map(|_| if i == 0 || i == m { 0.0 } else { rng.sample(StandardNormal) })
                        .collect()
                })
                .collect();
            let slopes: Vec<Vec<f64>> = (0..=m)
                .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) / h).collect())
                .collect();
            EnsembleProcess::from_time_fn(horizon, dim, grid, &[orbit], |t, out| {
                let i = ((t / h).floor() as usize).min(m - 1);
                let s = (t - i as f64 * h) / h;
                let (h00, h10, h01, h11) = (
                    2.0 * s * s * s - 3.0 * s * s + 1.0,
                    s * s * s - 2.0 * s * s + s,
                    -2.0 * s * s * s + 3.0 * s * s,
                    s * s * s - s * s,
                );
                for c in 0..dim {
                    out[c] = h00 * values[i][c]
                        + h10 * h * slopes[i][c]
                        + h01 * values[i + 1][c]
                        + h11 * h * slopes[i + 1][c];
                }
            })
        }
    };
    x.pin_dirichlet();
    x
}

/// Empirical lower bound for the embedding constant `K` in
/// `‖u‖_{PC₁} ≤ K ‖u̇‖_PC`. No upper bound is certified.
pub fn estimate_k(
    horizon: f64,
    dim: usize,
    grid: &GridSpec,
    family: TrialFamily,
    samples: usize,
    seed: u64,
    working_factor: f64,
) -> Result<KEstimate> {
    let mut best = 0.0;
    let mut best_trial = 0;
    let mut skipped = 0;
    for i in 0..samples {
        let x = trial_process(horizon, dim, grid, family, seed, i as u64);
        let dx = pc_norm(&derivative(&x)?)?;
        if dx <= 0.0 {
            skipped += 1;
            continue;
        }
        let ratio = pc_norm(&x)?.max(dx) / dx;
        if ratio > best {
            best = ratio;
            best_trial = i;
        }
    }
    if samples == skipped {
        return Err(Error::Domain("every trial had a vanishing derivative".into()));
    }
    Ok(KEstimate { k_lower: best, k_working: best * working_factor, best_trial, trials: samples, skipped })
}

/// Writes `orbit_id,segment,t,side,<labels…>` rows. `side` is `left`/`right`
/// at impulse nodes and `interior` elsewhere.
pub fn write_process_csv<W: Write>(
    processes: &[&EnsembleProcess],
    labels: &[String],
    mut out: W,
) -> std::io::Result<()> {
    let first = processes[0];
    write!(out, "orbit_id,segment,t,side")?;
    for l in labels {
        write!(out, ",{l}")?;
    }
    writeln!(out)?;
    for (o, orbit) in first.orbits.iter().enumerate() {
        let nseg = orbit.segments.len();
        for (s, seg) in orbit.segments.iter().enumerate() {
            for (i, &t) in seg.times.iter().enumerate() {
                let side = if i == 0 && s > 0 {
                    "right"
                } else if i == seg.len() - 1 && s + 1 < nseg {
                    "left"
                } else {
                    "interior"
                };
                write!(out, "{o},{s},{},{side}", fmt_f64(t))?;
                for p in processes {
                    for v in p.orbits[o].segments[s].value(i, p.dim) {
                        write!(out, ",{}", fmt_f64(*v))?;
                    }
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(m: usize) -> GridSpec {
        GridSpec::new(m).unwrap()
    }

    fn det(horizon: f64, m: usize, f: impl Fn(f64, &mut [f64])) -> EnsembleProcess {
        EnsembleProcess::from_time_fn(horizon, 2, &grid(m), &[SampleOrbit::empty(horizon)], f)
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(7).is_err());
        assert!(GridSpec::new(8).is_ok());
    }

    #[test]
    fn segment_times_insert_paired_nodes() {
        let segs = grid(10).segment_times(1.0, &[0.25, 0.2500001]);
        assert_eq!(segs.len(), 3);
        assert_eq!(*segs[0].last().unwrap(), 0.25);
        assert_eq!(segs[1][0], 0.25);
        assert_eq!(segs[1].len(), 3);
        assert!(segs.iter().all(|s| s.windows(2).all(|w| w[0] < w[1])));
        assert_eq!(*segs[2].last().unwrap(), 1.0);
    }

    #[test]
    fn pc_norm_examples() {
        let c = det(1.0, 16, |_, out| {
            out[0] = 3.0;
            out[1] = 4.0;
        });
        assert!((pc_norm(&c).unwrap() - 5.0).abs() < 1e-15);

        let orbits = [SampleOrbit::empty(1.0), SampleOrbit::empty(1.0)];
        let two = EnsembleProcess::from_fn(1.0, 2, &grid(16), &orbits, |o, _, _, out| {
            if o == 0 {
                out[0] = 1.0;
            }
        });
        assert!((pc_norm(&two).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);

        let s = det(1.0, 16, |t, out| out[0] = (PI * t).sin());
        assert!((pc_norm(&s).unwrap() - 1.0).abs() < 1e-12);
        let empty = EnsembleProcess { horizon: 1.0, dim: 2, quadrature: Quadrature::Trapezoid, orbits: vec![] };
        assert!(pc_norm(&empty).is_err());
    }

    #[test]
    fn pc_norm_grid_convergence_is_second_order() {
        // max of sin(πt)·sin(πt+0.3)-ish off-grid peak: use a shifted bump
        let f = |t: f64, out: &mut [f64]| out[0] = (PI * (t + 0.0371)).sin();
        let exact = 1.0;
        let e1 = (exact - pc_norm(&det(1.0, 16, f)).unwrap()).abs();
        let e2 = (exact - pc_norm(&det(1.0, 32, f)).unwrap()).abs();
        assert!(e1 < 0.5 * (PI / 16.0).powi(2));
        assert!(e2 <= e1);
    }

    #[test]
    fn pc1_norm_examples() {
        let s = det(1.0, 256, |t, out| out[0] = (2.0 * PI * t).sin());
        assert!((pc1_norm(&s).unwrap() - 2.0 * PI).abs() < 1e-3);
        let z = det(1.0, 16, |_, _| {});
        assert_eq!(pc1_norm(&z).unwrap(), 0.0);
    }

    #[test]
    fn derivative_examples() {
        let ramp = det(1.0, 16, |t, out| out[0] = t);
        let d = derivative(&ramp).unwrap();
        for v in d.orbits[0].segments[0].values.chunks(2) {
            assert!((v[0] - 1.0).abs() < 1e-12 && v[1] == 0.0);
        }
        let s = det(1.0, 256, |t, out| out[0] = (2.0 * PI * t).sin());
        let d = derivative(&s).unwrap();
        let seg = &d.orbits[0].segments[0];
        for (i, &t) in seg.times.iter().enumerate() {
            assert!((seg.value(i, 2)[0] - 2.0 * PI * (2.0 * PI * t).cos()).abs() < 1e-3);
        }
    }

    #[test]
    fn derivative_does_not_cross_jumps() {
        let orbit = SampleOrbit::fixed(1.0, vec![0.5], vec![vec![1.0, 0.0]]).unwrap();
        let x = EnsembleProcess::from_fn(1.0, 2, &grid(16), &[orbit], |_, s, t, out| {
            out[0] = t + s as f64;
        });
        let d = derivative(&x).unwrap();
        for seg in &d.orbits[0].segments {
            for v in seg.values.chunks(2) {
                assert!((v[0] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_segment_is_an_error() {
        let x = EnsembleProcess {
            horizon: 1.0,
            dim: 2,
            quadrature: Quadrature::Trapezoid,
            orbits: vec![OrbitPath {
                dim: 2,
                segments: vec![Segment { times: vec![0.0, 1.0], values: vec![0.0; 4] }],
            }],
        };
        assert!(matches!(derivative(&x), Err(Error::DegenerateGrid(_))));
    }

    #[test]
    fn inner_product_examples() {
        let x = det(1.0, 128, |t, out| out[0] = (PI * t).sin());
        let y = det(1.0, 128, |t, out| out[0] = (2.0 * PI * t).sin());
        assert!(inner_product(&x, &y).unwrap().abs() < 1e-6);
        assert!((inner_product(&x, &x).unwrap() - 0.5).abs() < 1e-6);
        let z = x.zeros_like();
        assert_eq!(inner_product(&z, &z).unwrap(), 0.0);
        let other = det(1.0, 64, |_, _| {});
        assert!(inner_product(&x, &other).is_err());
    }

    #[test]
    fn simpson_integrates_cubics() {
        let times = [0.0, 0.1, 0.35, 0.5, 0.8, 1.0];
        let w = quadrature_weights(&times, Quadrature::Simpson);
        // last interval handled by trapezoid, so test on the first four intervals
        let w4 = quadrature_weights(&times[..5], Quadrature::Simpson);
        let approx: f64 = times[..5].iter().zip(&w4).map(|(t, w)| w * t * t).sum();
        assert!((approx - 0.8f64.powi(3) / 3.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cs_slack_cases() {
        let x = det(1.0, 16, |t, out| out[0] = t);
        assert!(expectation_cs_check(&x, &x).unwrap().abs() < 1e-15);
        let y = det(1.0, 16, |t, out| out[1] = t * t);
        assert!(expectation_cs_check(&x, &y).unwrap().abs() < 1e-15);
        let orbits: Vec<SampleOrbit> = (0..2).map(|_| SampleOrbit::empty(1.0)).collect();
        let a = EnsembleProcess::from_fn(1.0, 2, &grid(8), &orbits, |o, _, t, out| out[0] = (o as f64 + 1.0) * t);
        let b = EnsembleProcess::from_fn(1.0, 2, &grid(8), &orbits, |o, _, t, out| out[0] = (2.0 - o as f64) * t);
        let slack = expectation_cs_check(&a, &b).unwrap();
        assert!(slack >= 0.0);
    }

    #[test]
    fn k_examples() {
        let g = grid(256);
        let x = det(1.0, 256, |t, out| out[0] = (PI * t).sin());
        let dx = pc_norm(&derivative(&x).unwrap()).unwrap();
        let ratio = pc1_norm(&x).unwrap() / dx;
        assert!((ratio - 1.0).abs() < 1e-12);
        let y = x.scaled(7.5);
        let ratio_y = pc1_norm(&y).unwrap() / pc_norm(&derivative(&y).unwrap()).unwrap();
        assert!((ratio - ratio_y).abs() < 1e-12);

        let k = estimate_k(1.0, 2, &g, TrialFamily::SineModes { max_mode: 6 }, 20, 3, DEFAULT_K_FACTOR).unwrap();
        assert!(k.k_lower >= 1.0);
        assert!((k.k_working - 1.05 * k.k_lower).abs() < 1e-15);
        // longer horizons let the function dominate its derivative
        let k4 = estimate_k(8.0, 2, &grid(128), TrialFamily::PinnedCubic { knots: 3 }, 20, 3, 1.0).unwrap();
        assert!(k4.k_lower >= 1.0);
    }

    #[test]
    fn k_is_monotone_in_trials() {
        let g = grid(64);
        let fam = TrialFamily::PinnedCubic { knots: 4 };
        let mut prev = 0.0;
        for n in [1, 4, 16] {
            let k = estimate_k(4.0, 2, &g, fam, n, 9, 1.0).unwrap().k_lower;
            assert!(k >= prev);
            prev = k;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn norms_are_norms(a in prop::collection::vec(-3.0..3.0f64, 8), lambda in -4.0..4.0f64) {
            let x = det(1.0, 32, |t, out| {
                out[0] = a[0] * (PI * t).sin() + a[1] * (3.0 * PI * t).sin();
                out[1] = a[2] * t * (1.0 - t) + a[3] * (2.0 * PI * t).sin();
            });
            let y = det(1.0, 32, |t, out| {
                out[0] = a[4] * (2.0 * PI * t).sin();
                out[1] = a[5] * t * t * (1.0 - t) + a[6] * (5.0 * PI * t).sin() + a[7];
            });
            let sum = x.axpy(1.0, &y).unwrap();
            for f in [pc_norm, pc1_norm] {
                let nx = f(&x).unwrap();
                let ny = f(&y).unwrap();
                prop_assert!(f(&sum).unwrap() <= nx + ny + 1e-12 * (1.0 + nx + ny));
                prop_assert!((f(&x.scaled(lambda)).unwrap() - lambda.abs() * nx).abs() <= 1e-12 * (1.0 + nx));
            }
            prop_assert!(expectation_cs_check(&x, &y).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let orbit = SampleOrbit::fixed(1.0, vec![0.5], vec![vec![1.0, 0.0]]).unwrap();
        let x = EnsembleProcess::zeros(1.0, 2, &grid(8), &[orbit]);
        let mut buf = Vec::new();
        write_process_csv(&[&x], &["v0".into(), "v1".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("orbit_id,segment,t,side,v0,v1\n"));
        assert_eq!(text.matches(",left,").count(), 1);
        assert_eq!(text.matches(",right,").count(), 1);
    }
}
