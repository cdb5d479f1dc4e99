//! Integration of `u' = J∇H(t, u)` between impulses.
//!
//! The default integrator is the Dormand–Prince 5(4) pair with its
//! fourth-order dense output; a fixed-step implicit midpoint rule is available
//! for long autonomous runs where energy behaviour matters more than local
//! accuracy.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hamiltonian::{j_into, Hamiltonian};
use crate::impulse::SampleOrbit;
use crate::numeric::{dot, norm};
use crate::space::{EnsembleProcess, GridSpec, OrbitPath, Segment};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Integrator {
    #[default]
    Dopri5,
    /// Fixed step `step`, shortened at interval ends.
    ImplicitMidpoint { step: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    /// Absolute and relative local error tolerance.
    pub tol: f64,
    pub integrator: Integrator,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { tol: 1e-10, integrator: Integrator::Dopri5, max_steps: 1_000_000 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl FlowStats {
    fn absorb(&mut self, other: FlowStats) {
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.evaluations += other.evaluations;
    }
}

#[derive(Clone, Debug)]
enum Dense {
    /// Dormand–Prince continuous extension coefficients.
    Dopri([Vec<f64>; 5]),
    /// Cubic Hermite through the step end points.
    Hermite { y0: Vec<f64>, y1: Vec<f64>, f0: Vec<f64>, f1: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Step {
    t0: f64,
    h: f64,
    dense: Dense,
}

impl Step {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let t1 = 1.0 - theta;
        match &self.dense {
            Dense::Dopri(r) => {
                for i in 0..out.len() {
                    out[i] = r[0][i] + theta * (r[1][i] + t1 * (r[2][i] + theta * (r[3][i] + t1 * r[4][i])));
                }
            }
            Dense::Hermite { y0, y1, f0, f1 } => {
                let s = theta;
                let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
                let h10 = s * s * s - 2.0 * s * s + s;
                let h01 = -2.0 * s * s * s + 3.0 * s * s;
                let h11 = s * s * s - s * s;
                for i in 0..out.len() {
                    out[i] = h00 * y0[i] + h10 * self.h * f0[i] + h01 * y1[i] + h11 * self.h * f1[i];
                }
            }
        }
    }
}

/// A continuous solution on `[t0, t1]`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub t0: f64,
    pub t1: f64,
    pub end: Vec<f64>,
    pub stats: FlowStats,
    steps: Vec<Step>,
}

impl Trajectory {
    /// Dense-output value at `t ∈ [t0, t1]`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.end.len()];
        if t >= self.t1 || self.steps.is_empty() {
            out.copy_from_slice(&self.end);
            return out;
        }
        let k = self.steps.partition_point(|s| s.t0 + s.h <= t).min(self.steps.len() - 1);
        self.steps[k].eval(t, &mut out);
        out
    }

    /// Step end times, starting with `t0`.
    pub fn mesh(&self) -> Vec<f64> {
        let mut m = vec![self.t0];
        m.extend(self.steps.iter().map(|s| s.t0 + s.h));
        m
    }
}

fn field(h: &Hamiltonian, t: f64, u: &[f64], grad: &mut [f64], out: &mut [f64]) {
    h.gradient_into(t, u, grad);
    j_into(grad, out);
}

fn check_state(t: f64, u: &[f64]) -> Result<()> {
    if u.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { t, reason: "state became non-finite".into() })
    }
}

/// Integrates the Hamiltonian system from `(t0, u0)` to `t1 > t0`.
pub fn integrate(h: &Hamiltonian, t0: f64, t1: f64, u0: &[f64], opts: &FlowOptions) -> Result<Trajectory> {
    if u0.is_empty() || u0.len() % 2 != 0 {
        return Err(Error::Dimension { expected: 2, got: u0.len() });
    }
    check_state(t0, u0)?;
    if !(t1 >= t0) {
        return Err(Error::Domain(format!("integration interval [{t0}, {t1}] is reversed")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config("flow tolerance must be positive".into()));
    }
    match opts.integrator {
        Integrator::Dopri5 => dopri5(h, t0, t1, u0, opts),
        Integrator::ImplicitMidpoint { step } => implicit_midpoint(h, t0, t1, u0, step, opts),
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

fn dopri5(h: &Hamiltonian, t0: f64, t1: f64, u0: &[f64], opts: &FlowOptions) -> Result<Trajectory> {
    let n = u0.len();
    let tol = opts.tol;
    let mut stats = FlowStats::default();
    let mut steps = Vec::new();
    let mut grad = vec![0.0; n];
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut y = u0.to_vec();
    let mut stage = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut t = t0;
    field(h, t, &y, &mut grad, &mut k[0]);
    stats.evaluations += 1;
    if t1 == t0 {
        return Ok(Trajectory { t0, t1, end: y, stats, steps });
    }
    let span = t1 - t0;
    let mut step = {
        let fnorm = norm(&k[0]);
        let ynorm = norm(&y).max(1e-3);
        if fnorm > 0.0 {
            (0.01 * ynorm / fnorm).min(span)
        } else {
            span
        }
    };
    let mut last_rejected = false;
    while t < t1 {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::Integration { t, reason: format!("step limit {} reached", opts.max_steps) });
        }
        let last = t + step >= t1;
        let hs = if last { t1 - t } else { step };
        if hs <= f64::EPSILON * t.abs().max(1.0) * 4.0 && !last {
            return Err(Error::Integration { t, reason: "step size underflow".into() });
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (r, a) in A[s][..s].iter().enumerate() {
                    acc += a * k[r][i];
                }
                stage[i] = y[i] + hs * acc;
            }
            field(h, t + C[s] * hs, &stage, &mut grad, &mut k[s]);
            if s == 6 {
                y1.copy_from_slice(&stage);
            }
        }
        stats.evaluations += 6;
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (r, c) in E.iter().enumerate() {
                e += c * k[r][i];
            }
            let sc = tol + tol * y[i].abs().max(y1[i].abs());
            err += (hs * e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            stats.rejected += 1;
            step = 0.2 * hs;
            last_rejected = true;
            continue;
        }
        if err <= 1.0 {
            let mut r = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            for i in 0..n {
                r[0][i] = y[i];
                r[1][i] = y1[i] - y[i];
                r[2][i] = hs * k[0][i] - r[1][i];
                r[3][i] = r[1][i] - hs * k[6][i] - r[2][i];
                let mut acc = 0.0;
                for (q, d) in D.iter().enumerate() {
                    acc += d * k[q][i];
                }
                r[4][i] = hs * acc;
            }
            steps.push(Step { t0: t, h: hs, dense: Dense::Dopri(r) });
            stats.accepted += 1;
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&y1);
            check_state(t, &y)?;
            let fsal = k[6].clone();
            k[0] = fsal;
            let mut fac = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 10.0 };
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            step = hs * fac;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            step = hs * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            last_rejected = true;
        }
    }
    Ok(Trajectory { t0, t1, end: y, stats, steps })
}

fn implicit_midpoint(
    h: &Hamiltonian,
    t0: f64,
    t1: f64,
    u0: &[f64],
    step: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    if !(step > 0.0) {
        return Err(Error::Config("implicit midpoint step must be positive".into()));
    }
    let n = u0.len();
    let mut stats = FlowStats::default();
    let mut steps = Vec::new();
    let mut grad = vec![0.0; n];
    let mut y = u0.to_vec();
    let mut f0 = vec![0.0; n];
    let mut t = t0;
    field(h, t, &y, &mut grad, &mut f0);
    while t < t1 {
        if stats.accepted >= opts.max_steps {
            return Err(Error::Integration { t, reason: format!("step limit {} reached", opts.max_steps) });
        }
        let hs = step.min(t1 - t);
        let tm = t + 0.5 * hs;
        // Newton on G(z) = z − y − hs·f(tm, (y+z)/2)
        let mut z: Vec<f64> = y.iter().zip(&f0).map(|(a, b)| a + hs * b).collect();
        let mut mid = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut converged = false;
        for _ in 0..50 {
            for i in 0..n {
                mid[i] = 0.5 * (y[i] + z[i]);
            }
            field(h, tm, &mid, &mut grad, &mut fm);
            stats.evaluations += 1;
            let g: Vec<f64> = (0..n).map(|i| z[i] - y[i] - hs * fm[i]).collect();
            if norm(&g) <= opts.tol * (1.0 + norm(&z)) {
                converged = true;
                break;
            }
            let eps = 1e-7 * (1.0 + norm(&mid));
            let mut jac = DMatrix::<f64>::identity(n, n);
            let mut probe = mid.clone();
            let mut fp = vec![0.0; n];
            for c in 0..n {
                probe[c] = mid[c] + eps;
                field(h, tm, &probe, &mut grad, &mut fp);
                probe[c] = mid[c];
                for r in 0..n {
                    jac[(r, c)] -= 0.5 * hs * (fp[r] - fm[r]) / eps;
                }
            }
            stats.evaluations += n;
            let delta = jac
                .lu()
                .solve(&DVector::from_vec(g))
                .ok_or_else(|| Error::Integration { t, reason: "singular midpoint Jacobian".into() })?;
            for i in 0..n {
                z[i] -= delta[i];
            }
        }
        if !converged {
            return Err(Error::Integration { t, reason: "midpoint iteration did not converge".into() });
        }
        let t_next = if hs == t1 - t { t1 } else { t + hs };
        let mut f1 = vec![0.0; n];
        field(h, t_next, &z, &mut grad, &mut f1);
        check_state(t_next, &z)?;
        steps.push(Step {
            t0: t,
            h: hs,
            dense: Dense::Hermite { y0: y.clone(), y1: z.clone(), f0: f0.clone(), f1: f1.clone() },
        });
        stats.accepted += 1;
        y = z;
        f0 = f1;
        t = t_next;
    }
    Ok(Trajectory { t0, t1, end: y, stats, steps })
}

/// Flows one orbit across `[0, T]`, applying `u(ξ⁺) = u(ξ⁻) + b` at each
/// impulse, and samples the result on the orbit's segment grid.
pub fn propagate_orbit(
    h: &Hamiltonian,
    orbit: &SampleOrbit,
    u0: &[f64],
    grid: &GridSpec,
    opts: &FlowOptions,
) -> Result<(OrbitPath, FlowStats)> {
    let dim = u0.len();
    if let Some(b) = orbit.jumps.first() {
        if b.len() != dim {
            return Err(Error::Dimension { expected: dim, got: b.len() });
        }
    }
    let mut stats = FlowStats::default();
    let mut u = u0.to_vec();
    let mut segments = Vec::new();
    for (s, times) in grid.segment_times(orbit.horizon, &orbit.times).into_iter().enumerate() {
        if s > 0 {
            for (ui, bi) in u.iter_mut().zip(&orbit.jumps[s - 1]) {
                *ui += bi;
            }
        }
        let (a, b) = (times[0], *times.last().unwrap());
        let traj = integrate(h, a, b, &u, opts)?;
        stats.absorb(traj.stats);
        let mut values = Vec::with_capacity(times.len() * dim);
        values.extend_from_slice(&u);
        for &t in &times[1..times.len() - 1] {
            values.extend(traj.eval(t));
        }
        values.extend_from_slice(&traj.end);
        u = traj.end;
        segments.push(Segment { times, values });
    }
    Ok((OrbitPath { dim, segments }, stats))
}

/// [`propagate_orbit`] for every orbit, in parallel, with results in orbit
/// order.
pub fn propagate_ensemble(
    h: &Hamiltonian,
    orbits: &[SampleOrbit],
    u0: &[f64],
    grid: &GridSpec,
    opts: &FlowOptions,
) -> Result<(EnsembleProcess, FlowStats)> {
    let horizon = orbits.first().map(|o| o.horizon).ok_or_else(|| Error::Shape("no orbits".into()))?;
    let results: Vec<Result<(OrbitPath, FlowStats)>> =
        orbits.par_iter().map(|o| propagate_orbit(h, o, u0, grid, opts)).collect();
    let mut paths = Vec::with_capacity(orbits.len());
    let mut stats = FlowStats::default();
    for r in results {
        let (p, s) = r?;
        stats.absorb(s);
        paths.push(p);
    }
    Ok((EnsembleProcess { horizon, dim: u0.len(), quadrature: grid.quadrature, orbits: paths }, stats))
}

/// Largest relative change of `H` along each segment of an orbit path
/// (meaningful for autonomous `H` only).
pub fn energy_drift(h: &Hamiltonian, path: &OrbitPath) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seg in &path.segments {
        let e0 = h.value(seg.times[0], seg.value(0, path.dim))?;
        for i in 1..seg.len() {
            let e = h.value(seg.times[i], seg.value(i, path.dim))?;
            worst = worst.max((e - e0).abs() / e0.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Largest mismatch `|u(ξ⁺) − u(ξ⁻) − b_j|` over the impulses of an orbit.
pub fn jump_residual(path: &OrbitPath, orbit: &SampleOrbit) -> f64 {
    (0..orbit.len())
        .map(|j| {
            let (l, r) = path.impulse_sides(j);
            l.iter()
                .zip(r)
                .zip(&orbit.jumps[j])
                .map(|((a, b), c)| (b - a - c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Time for the angle of `u(t)` in the plane spanned by `u0` and `J u0` to
/// advance by `2π`. Fails if no full turn happens before `max_time`.
pub fn first_return_time(h: &Hamiltonian, u0: &[f64], max_time: f64, opts: &FlowOptions) -> Result<f64> {
    let r0 = norm(u0);
    if !(r0 > 0.0) {
        return Err(Error::Domain("first return needs a nonzero start".into()));
    }
    let e1: Vec<f64> = u0.iter().map(|x| x / r0).collect();
    let mut e2 = vec![0.0; u0.len()];
    j_into(&e1, &mut e2);
    let angle = |u: &[f64]| dot(u, &e2).atan2(dot(u, &e1));
    let traj = integrate(h, 0.0, max_time, u0, opts)?;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mesh = traj.mesh();
    let mut unwrapped = 0.0;
    let mut prev = 0.0;
    for w in mesh.windows(2) {
        let a_end = angle(&traj.eval(w[1]));
        let mut delta = a_end - prev;
        if delta < -std::f64::consts::PI {
            delta += two_pi;
        } else if delta > std::f64::consts::PI {
            delta -= two_pi;
        }
        let base = unwrapped;
        let base_angle = prev;
        unwrapped += delta;
        prev = a_end;
        if unwrapped >= two_pi {
            // bisection for the crossing inside this step
            let rel = |t: f64| {
                let mut d = angle(&traj.eval(t)) - base_angle;
                if d < -std::f64::consts::PI {
                    d += two_pi;
                } else if d > std::f64::consts::PI {
                    d -= two_pi;
                }
                base + d - two_pi
            };
            let (mut lo, mut hi) = (w[0], w[1]);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if rel(mid) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Integration { t: max_time, reason: "no full revolution within the time limit".into() })
}

/// Exact period of the circular orbit of radius `r` for `H = α|u|^q`.
pub fn power_law_period(alpha: f64, q: f64, r: f64) -> f64 {
    2.0 * std::f64::consts::PI / (alpha * q * r.powf(q - 2.0))
}
