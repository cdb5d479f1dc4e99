//! Hypothesis checks, mountain-pass geometry and the numerical mountain-pass
//! search for critical points of `χ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{riesz_weights, DualAction};
use crate::hamiltonian::{alpha_star, apply_j, conjugate_exponent, Hamiltonian};
use crate::impulse::{analytic_b_bound, estimate_b, ImpulseSpec};
use crate::numeric::{dot, pairwise_mean, stream_rng};
use crate::space::{estimate_k, pc1_norm, pc_norm, EnsembleProcess, OrbitPath, Quadrature, TrialFamily};
use crate::{Error, Result};

/// Relative rounding allowance for slacks that vanish identically
/// (e.g. the Euler identity for homogeneous `H`).
pub const SLACK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    #[serde(rename = "B_estimate")]
    pub b_estimate: f64,
    #[serde(rename = "B_stderr")]
    pub b_stderr: f64,
    #[serde(rename = "B_bound")]
    pub b_bound: f64,
    /// `analytic`, or `monte_carlo` (mean + 3 stderr) when no closed form exists.
    #[serde(rename = "B_bound_source")]
    pub b_bound_source: String,
    pub alpha: f64,
    pub q: f64,
    pub p: f64,
    pub alpha_star: f64,
    /// Min normalized `(∇H(u),u) − qH(u)`.
    #[serde(rename = "H2_min_slack")]
    pub h2_min_slack: f64,
    /// Min normalized `α|u|^q − H(u)`.
    #[serde(rename = "H3_min_slack")]
    pub h3_min_slack: f64,
    /// `(1 − p/2) α* − B/2` with `B = B_bound`.
    pub condition_value: f64,
    #[serde(rename = "H1_pass")]
    pub h1_pass: bool,
    #[serde(rename = "H2_pass")]
    pub h2_pass: bool,
    #[serde(rename = "H3_pass")]
    pub h3_pass: bool,
    pub condition_pass: bool,
    pub all_pass: bool,
}

fn normalized(lhs: f64, rhs: f64) -> f64 {
    (rhs - lhs) / 1f64.max(lhs.abs()).max(rhs.abs())
}

/// Checks the summability of jumps, superquadraticity, growth and the size
/// condition. Needs a power law or a callable with a growth certificate.
pub fn verify_hypotheses(
    hamiltonian: &Hamiltonian,
    spec: &ImpulseSpec,
    n_orbits: usize,
    samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    let cert = hamiltonian
        .certificate()
        .ok_or_else(|| Error::Config("hypothesis checks need a growth certificate (α, q)".into()))?;
    let (alpha, q) = (cert.alpha, cert.q);
    let p = conjugate_exponent(q);
    let a_star = alpha_star(alpha, q);
    let b = estimate_b(spec, n_orbits, seed)?;
    let (b_bound, source) = match analytic_b_bound(spec) {
        Ok(x) => (x, "analytic"),
        Err(_) => (b.mc_mean + 3.0 * b.mc_stderr, "monte_carlo"),
    };
    let dim = spec.dimension();
    let mut rng = stream_rng(seed, u64::MAX - 1);
    let mut h2 = f64::INFINITY;
    let mut h3 = f64::INFINITY;
    for _ in 0..samples {
        let r = (0.05f64.ln() + rng.gen::<f64>() * 100f64.ln()).exp();
        let t = rng.gen::<f64>() * spec.horizon();
        let u: Vec<f64> = crate::hamiltonian::random_unit(&mut rng, dim).into_iter().map(|x| r * x).collect();
        let h = hamiltonian.value(t, &u)?;
        let g = hamiltonian.gradient(t, &u)?;
        h2 = h2.min(normalized(q * h, dot(&g, &u)));
        h3 = h3.min(normalized(h, alpha * r.powf(q)));
    }
    let condition_value = (1.0 - p / 2.0) * a_star - b_bound / 2.0;
    let h1_pass = b_bound.is_finite() && b.mc_mean.is_finite();
    let h2_pass = h2 >= -SLACK_TOLERANCE;
    let h3_pass = h3 >= -SLACK_TOLERANCE;
    let condition_pass = condition_value > 0.0;
    Ok(HypothesisReport {
        b_estimate: b.mc_mean,
        b_stderr: b.mc_stderr,
        b_bound,
        b_bound_source: source.into(),
        alpha,
        q,
        p,
        alpha_star: a_star,
        h2_min_slack: h2,
        h3_min_slack: h3,
        condition_value,
        h1_pass,
        h2_pass,
        h3_pass,
        condition_pass,
        all_pass: h1_pass && h2_pass && h3_pass && condition_pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryOptions {
    pub k_family: TrialFamily,
    pub k_samples: usize,
    /// Safety factor applied to the sampled lower bound of `K`.
    pub k_factor: f64,
    /// Use this `K` instead of estimating it.
    pub k_override: Option<f64>,
    pub rim_samples: usize,
    pub rim_modes: usize,
    /// Direction of `e`; defaults to the first basis vector.
    pub e_direction: Option<Vec<f64>>,
    /// Starting `|e|`; defaults to `max(1, ρ)`.
    pub e_norm: Option<f64>,
    pub e_norm_cap: f64,
    /// Extra doublings of `|e|` recorded after `χ(v₁) < 0` is reached.
    pub extra_doublings: usize,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        GeometryOptions {
            k_family: TrialFamily::SineModes { max_mode: 8 },
            k_samples: 200,
            k_factor: crate::space::DEFAULT_K_FACTOR,
            k_override: None,
            rim_samples: 256,
            rim_modes: 4,
            e_direction: None,
            e_norm: None,
            e_norm_cap: 1e4,
            extra_doublings: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RimSample {
    pub index: usize,
    pub pc1_norm: f64,
    pub chi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub k_lower: Option<f64>,
    pub k_working: f64,
    pub p: f64,
    pub horizon: f64,
    pub rho: f64,
    pub chi_at_zero: f64,
    /// Minimum of `χ` over the rim samples.
    pub rim_lower_bound: f64,
    /// `ρ((1 − p/2)α* − B/2)` when the size condition is supplied.
    pub rim_formula_bound: Option<f64>,
    pub rim: Vec<RimSample>,
    pub e_direction: Vec<f64>,
    /// `|e|` at which `χ(v₁) < 0` was first reached, if it was.
    pub e_norm_used: Option<f64>,
    /// `χ(v₁)` at `e_norm_used` (or at the last norm tried).
    pub chi_at_v1: f64,
    /// `(|e|, χ(v₁))` for every norm tried, in order.
    pub e_trace: Vec<(f64, f64)>,
    /// `χ(v₁)` strictly decreases over the doublings after `e_norm_used`.
    pub strictly_decreasing: bool,
    /// Rim minimum over directions that use the free jumps at impulse times.
    /// Diagnostic only; not part of `passed`.
    pub jump_probe_min: Option<f64>,
    pub passed: bool,
}

impl GeometryReport {
    /// `|e|` to build the path endpoint with: the one found, or the last tried.
    pub fn endpoint_norm(&self) -> f64 {
        self.e_norm_used.unwrap_or_else(|| self.e_trace.first().map(|x| x.0).unwrap_or(1.0))
    }

    pub fn summary(&self) -> GeometrySummary {
        GeometrySummary {
            rho: self.rho,
            rim_lower_bound: self.rim_lower_bound,
            chi_at_v1: self.chi_at_v1,
            e_norm_used: self.endpoint_norm(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub rho: f64,
    pub rim_lower_bound: f64,
    pub chi_at_v1: f64,
    pub e_norm_used: f64,
}

/// `ρ = (K^p / T)^{1/(p−1)}`.
pub fn rim_radius(k: f64, p: f64, horizon: f64) -> f64 {
    (k.powf(p) / horizon).powf(1.0 / (p - 1.0))
}

/// Checks `χ(0) = 0`, samples `χ` on the sphere `‖v‖_{PC₁} = ρ`, and grows
/// `|e|` geometrically until the loop `v₁` has `χ(v₁) < 0`.
pub fn mountain_pass_geometry(
    problem: &DualAction,
    opts: &GeometryOptions,
    condition_value: Option<f64>,
    seed: u64,
) -> Result<GeometryReport> {
    let cert = problem
        .hamiltonian
        .certificate()
        .ok_or_else(|| Error::Config("geometry needs a growth certificate (α, q)".into()))?;
    let p = conjugate_exponent(cert.q);
    if !(p > 1.0 && p < 2.0) {
        return Err(Error::Domain(format!("rim radius needs 1 < p < 2, got p = {p}")));
    }
    let (k_lower, k_working) = match opts.k_override {
        Some(k) if k > 0.0 => (None, k),
        Some(k) => return Err(Error::Config(format!("K must be positive, got {k}"))),
        None => {
            let est = estimate_k(
                problem.horizon,
                problem.dim,
                &problem.grid,
                opts.k_family,
                opts.k_samples,
                seed,
                opts.k_factor,
            )?;
            (Some(est.k_lower), est.k_working)
        }
    };
    let rho = rim_radius(k_working, p, problem.horizon);
    let chi_at_zero = problem.chi(&problem.zeros())?;

    let rim: Vec<RimSample> = (0..opts.rim_samples)
        .into_par_iter()
        .map(|i| -> Result<RimSample> {
            let h = problem.random_direction(seed, 1 << 32 | i as u64, opts.rim_modes);
            let n = pc1_norm(&h)?;
            let v = h.scaled(rho / n);
            Ok(RimSample { index: i, pc1_norm: pc1_norm(&v)?, chi: problem.chi(&v)? })
        })
        .collect::<Result<_>>()?;
    let rim_lower_bound = rim.iter().map(|r| r.chi).fold(f64::INFINITY, f64::min);

    let e_direction = match &opts.e_direction {
        Some(d) if d.len() == problem.dim => {
            let n = crate::numeric::norm(d);
            if !(n > 0.0) {
                return Err(Error::Config("e_direction must be nonzero".into()));
            }
            d.iter().map(|x| x / n).collect()
        }
        Some(d) => return Err(Error::Dimension { expected: problem.dim, got: d.len() }),
        None => {
            let mut e = vec![0.0; problem.dim];
            e[0] = 1.0;
            e
        }
    };
    let chi_loop = |norm: f64| -> Result<f64> {
        let e: Vec<f64> = e_direction.iter().map(|x| norm * x).collect();
        problem.chi(&problem.pinned_loop(&e)?)
    };
    let mut e_norm = opts.e_norm.unwrap_or(1f64.max(rho));
    let mut e_trace = Vec::new();
    let mut e_norm_used = None;
    loop {
        let c = chi_loop(e_norm)?;
        e_trace.push((e_norm, c));
        if c < 0.0 {
            e_norm_used = Some(e_norm);
            break;
        }
        if e_norm * 2.0 > opts.e_norm_cap {
            break;
        }
        e_norm *= 2.0;
    }
    let mut strictly_decreasing = e_norm_used.is_some();
    if let Some(e0) = e_norm_used {
        let mut prev = e_trace.last().unwrap().1;
        let mut norm = e0;
        for _ in 0..opts.extra_doublings {
            norm *= 2.0;
            let c = chi_loop(norm)?;
            e_trace.push((norm, c));
            strictly_decreasing &= c < prev;
            prev = c;
        }
    }
    let chi_at_v1 = match e_norm_used {
        Some(e) => e_trace.iter().find(|x| x.0 == e).unwrap().1,
        None => e_trace.last().unwrap().1,
    };
    let jump_probe_min = jump_probe(problem, rho)?;
    let passed = chi_at_zero == 0.0 && rim_lower_bound > 0.0 && e_norm_used.is_some() && strictly_decreasing;
    Ok(GeometryReport {
        k_lower,
        k_working,
        p,
        horizon: problem.horizon,
        rho,
        chi_at_zero,
        rim_lower_bound,
        rim_formula_bound: condition_value.map(|c| rho * c),
        rim,
        e_direction,
        e_norm_used,
        chi_at_v1,
        e_trace,
        strictly_decreasing,
        jump_probe_min,
        passed,
    })
}

/// Smallest `χ` over rim points that are constant on one segment strictly
/// between impulses and zero elsewhere, aligned with `±Δ` of either adjacent
/// impulse or a coordinate axis. `None` when no orbit has such a segment.
fn jump_probe(problem: &DualAction, rho: f64) -> Result<Option<f64>> {
    let d = problem.dim;
    let mut cases = Vec::new();
    for (o, orbit) in problem.orbits.iter().enumerate() {
        for s in 1..orbit.len() {
            let mut dirs: Vec<Vec<f64>> = (0..d)
                .map(|k| {
                    let mut e = vec![0.0; d];
                    e[k] = 1.0;
                    e
                })
                .collect();
            for b in [&orbit.jumps[s - 1], &orbit.jumps[s]] {
                if crate::numeric::norm(b) > 0.0 {
                    dirs.push(b.clone());
                }
            }
            for dir in dirs {
                for sign in [1.0, -1.0] {
                    cases.push((o, s, dir.iter().map(|x| sign * x).collect::<Vec<f64>>()));
                }
            }
        }
    }
    if cases.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = cases
        .par_iter()
        .map(|(o, s, dir)| -> Result<f64> {
            let v = problem.process(|oo, seg, _, out| {
                if oo == *o && seg == *s {
                    out.copy_from_slice(dir);
                }
            });
            let n = pc1_norm(&v)?;
            problem.chi(&v.scaled(rho / n))
        })
        .collect::<Result<_>>()?;
    Ok(Some(values.into_iter().fold(f64::INFINITY, f64::min)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub path_nodes: usize,
    /// Target for the `L²` gradient norm.
    pub gtol: f64,
    /// Iteration cap shared by the path and refinement phases.
    pub max_iter: usize,
    pub redistribute_every: usize,
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo: f64,
    /// The path phase hands over to refinement below this gradient norm.
    pub path_tol: f64,
    /// Refine the max node with damped Newton iterations on `∇χ = 0`.
    pub refine: bool,
    /// Upper limit for the path size when midpoints are inserted.
    pub max_path_nodes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            path_nodes: 11,
            gtol: 1e-6,
            max_iter: 5000,
            redistribute_every: 10,
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            path_tol: 1e-2,
            refine: true,
            max_path_nodes: 64,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.path_nodes < 3 {
            return Err(Error::Config("path_nodes must be >= 3".into()));
        }
        if !(self.gtol > 0.0) || !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.initial_step > 0.0) {
            return Err(Error::Config("gtol, initial_step must be positive and shrink in (0, 1)".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config("armijo factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub orbit: usize,
    pub iteration: usize,
    /// `path` or `refine`.
    pub phase: Phase,
    /// Path maximum of `χ_o` (path phase) or `χ_o` at the iterate (refinement).
    pub max_chi: f64,
    pub gradient_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Path,
    Refine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitOutcome {
    pub orbit: usize,
    pub chi: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MountainPassResult {
    pub v_star: EnsembleProcess,
    pub chi_at_vstar: f64,
    pub gradient_norm: f64,
    /// Largest per-orbit iteration count.
    pub iterations: usize,
    pub path_history: Vec<HistoryPoint>,
    pub geometry: GeometrySummary,
    /// Every orbit reached `gtol`.
    pub converged: bool,
    /// `χ(v*) > max(0, χ(v₁))`.
    pub above_endpoints: bool,
    pub orbits: Vec<OrbitOutcome>,
}

/// Discrete mountain-pass search, run independently on each orbit. Paths of
/// `path_nodes` nodes join `0` to `endpoint`; the highest interior node takes
/// Sobolev-preconditioned descent steps with Armijo backtracking, and the
/// result is refined by damped Newton iterations.
pub fn find_critical_point(
    problem: &DualAction,
    endpoint: &EnsembleProcess,
    geometry: GeometrySummary,
    opts: &SolverOptions,
) -> Result<MountainPassResult> {
    opts.validate()?;
    problem.check_layout(endpoint)?;
    let rule = endpoint.quadrature;
    let runs: Vec<(OrbitPath, OrbitOutcome, Vec<HistoryPoint>)> = endpoint
        .orbits
        .par_iter()
        .enumerate()
        .map(|(o, end)| solve_orbit(problem, o, end, rule, opts))
        .collect::<Result<_>>()?;
    let mut v_star = endpoint.clone();
    let mut history = Vec::new();
    let mut outcomes = Vec::with_capacity(runs.len());
    for (o, (path, outcome, hist)) in runs.into_iter().enumerate() {
        v_star.orbits[o] = path;
        outcomes.push(outcome);
        history.extend(hist);
    }
    let chi_at_vstar = pairwise_mean(&outcomes.iter().map(|o| o.chi).collect::<Vec<_>>());
    let gradient_norm = problem.gradient_norm(&v_star)?;
    let converged = outcomes.iter().all(|o| o.converged) && gradient_norm < opts.gtol;
    Ok(MountainPassResult {
        chi_at_vstar,
        gradient_norm,
        iterations: outcomes.iter().map(|o| o.iterations).max().unwrap_or(0),
        path_history: history,
        geometry,
        converged,
        above_endpoints: chi_at_vstar > 0f64.max(geometry.chi_at_v1),
        orbits: outcomes,
        v_star,
    })
}

struct OrbitWork<'a> {
    problem: &'a DualAction,
    o: usize,
    template: OrbitPath,
    weights: Vec<f64>,
    dim: usize,
}

impl OrbitWork<'_> {
    fn path(&self, x: &[f64]) -> OrbitPath {
        let mut p = self.template.clone();
        p.set_flat(x);
        p
    }

    fn chi(&self, x: &[f64]) -> Result<f64> {
        self.problem.orbit_action(self.o, &self.path(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.problem.orbit_gradient(self.o, &self.path(x))
    }

    fn riesz_norm(&self, g: &[f64]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| g[i * self.dim..(i + 1) * self.dim].iter().map(|x| x * x).sum::<f64>() / w)
            .sum::<f64>()
            .sqrt()
    }

    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * (i * self.dim..(i + 1) * self.dim).map(|k| a[k] * b[k]).sum::<f64>())
            .sum()
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                w * (i * self.dim..(i + 1) * self.dim).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Solves `(W + K) d = g` per segment and component, where `W` is the
    /// lumped mass and `K` the piecewise-linear stiffness; Dirichlet nodes
    /// stay fixed.
    fn precondition(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; g.len()];
        let total_nodes = self.weights.len();
        let mut base = 0;
        for seg in &self.template.segments {
            let n = seg.len();
            for c in 0..d {
                let mut diag = vec![0.0; n];
                let mut off = vec![0.0; n.saturating_sub(1)];
                let mut rhs = vec![0.0; n];
                for i in 0..n {
                    diag[i] = self.weights[base + i];
                    rhs[i] = g[(base + i) * d + c];
                }
                for i in 0..n - 1 {
                    let k = 1.0 / (seg.times[i + 1] - seg.times[i]);
                    diag[i] += k;
                    diag[i + 1] += k;
                    off[i] = -k;
                }
                let fixed = |i: usize| base + i == 0 || base + i == total_nodes - 1;
                for i in 0..n {
                    if fixed(i) {
                        diag[i] = 1.0;
                        rhs[i] = 0.0;
                        if i > 0 {
                            off[i - 1] = 0.0;
                        }
                        if i < n - 1 {
                            off[i] = 0.0;
                        }
                    }
                }
                let x = thomas(&off, &diag, &rhs);
                for i in 0..n {
                    out[(base + i) * d + c] = x[i];
                }
            }
            base += n;
        }
        out
    }
}

/// Symmetric tridiagonal solve.
fn thomas(off: &[f64], diag: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off[i - 1] * c[i - 1];
        if i < n - 1 {
            c[i] = off[i] / m;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

const STALL_WINDOW: usize = 50;
const STALL_RATIO: f64 = 0.99;

fn solve_orbit(
    problem: &DualAction,
    o: usize,
    end: &OrbitPath,
    rule: Quadrature,
    opts: &SolverOptions,
) -> Result<(OrbitPath, OrbitOutcome, Vec<HistoryPoint>)> {
    let work = OrbitWork { problem, o, template: end.clone(), weights: riesz_weights(end, rule)?, dim: problem.dim };
    let target = end.flat();
    let np = opts.path_nodes;
    let mut nodes: Vec<Vec<f64>> = (0..np)
        .map(|k| {
            let s = k as f64 / (np - 1) as f64;
            target.iter().map(|x| s * x).collect()
        })
        .collect();
    let mut chis: Vec<f64> = nodes.iter().map(|x| work.chi(x)).collect::<Result<_>>()?;
    let mut history = Vec::new();
    let mut iteration = 0;
    let argmax = |chis: &[f64]| {
        let n = chis.len();
        let m = chis[1..n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (1..n - 1).find(|&k| chis[k] >= m - 1e-12).unwrap()
    };
    let mid = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect() };
    let cap = opts.max_path_nodes.max(np);
    refine_path(&work, &mut nodes, &mut chis, cap)?;
    let mut k = argmax(&chis);
    let mut g = work.gradient(&nodes[k])?;
    let mut gn = work.riesz_norm(&g);

    // path phase
    while iteration < opts.max_iter && gn >= opts.gtol && gn >= opts.path_tol {
        history.push(HistoryPoint {
            orbit: o,
            iteration,
            phase: Phase::Path,
            max_chi: chis[k],
            gradient_norm: gn,
        });
        let mut dir: Vec<f64> = work.precondition(&g).into_iter().map(|x| -x).collect();
        // drop the component along the local path tangent so the node does
        // not slide along the path
        let tangent: Vec<f64> = nodes[k + 1].iter().zip(&nodes[k - 1]).map(|(a, b)| a - b).collect();
        let tt = work.inner(&tangent, &tangent);
        if tt > 0.0 {
            let c = work.inner(&dir, &tangent) / tt;
            for (d, t) in dir.iter_mut().zip(&tangent) {
                *d -= c * t;
            }
        }
        let slope = dot(&g, &dir);
        if !(slope < 0.0) {
            break;
        }
        let level = chis[k];
        let mut step = opts.initial_step;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = nodes[k].iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            let c = work.chi(&trial)?;
            // the polygon through the moved node must stay below the level
            if c <= level + opts.armijo * step * slope
                && work.chi(&mid(&nodes[k - 1], &trial))? <= level
                && work.chi(&mid(&trial, &nodes[k + 1]))? <= level
            {
                nodes[k] = trial;
                chis[k] = c;
                moved = true;
                break;
            }
            step *= opts.shrink;
        }
        iteration += 1;
        if !moved {
            break;
        }
        if opts.redistribute_every > 0 && iteration % opts.redistribute_every == 0 {
            redistribute(&work, &mut nodes, &mut chis)?;
        }
        refine_path(&work, &mut nodes, &mut chis, cap)?;
        k = argmax(&chis);
        g = work.gradient(&nodes[k])?;
        gn = work.riesz_norm(&g);
    }

    // refinement
    let mut x = nodes[k].clone();
    let mut chi = chis[k];
    if opts.refine {
        let mut trail = Vec::new();
        while iteration < opts.max_iter && gn >= opts.gtol {
            // give up once the merit has stalled over a whole window
            if trail.len() >= STALL_WINDOW && gn > STALL_RATIO * trail[trail.len() - STALL_WINDOW] {
                break;
            }
            trail.push(gn);
            history.push(HistoryPoint {
                orbit: o,
                iteration,
                phase: Phase::Refine,
                max_chi: chi,
                gradient_norm: gn,
            });
            match newton_step(&work, &x, &g, gn)? {
                Some((nx, ng, ngn)) => {
                    x = nx;
                    g = ng;
                    gn = ngn;
                    chi = work.chi(&x)?;
                }
                None => break,
            }
            iteration += 1;
        }
    }
    history.push(HistoryPoint {
        orbit: o,
        iteration,
        phase: if opts.refine { Phase::Refine } else { Phase::Path },
        max_chi: chi,
        gradient_norm: gn,
    });
    let outcome = OrbitOutcome { orbit: o, chi, gradient_norm: gn, iterations: iteration, converged: gn < opts.gtol };
    Ok((work.path(&x), outcome, history))
}

/// Inserts midpoints next to the highest node while they rise above it, so
/// the discrete maximum tracks the maximum along the polygonal path.
fn refine_path(work: &OrbitWork, nodes: &mut Vec<Vec<f64>>, chis: &mut Vec<f64>, cap: usize) -> Result<()> {
    while nodes.len() < cap {
        let n = nodes.len();
        let m = chis[1..n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k = (1..n - 1).find(|&k| chis[k] >= m - 1e-12).unwrap();
        let mut inserted = false;
        for (a, b) in [(k - 1, k), (k, k + 1)] {
            let x: Vec<f64> = nodes[a].iter().zip(&nodes[b]).map(|(p, q)| 0.5 * (p + q)).collect();
            let c = work.chi(&x)?;
            if c > m {
                nodes.insert(b, x);
                chis.insert(b, c);
                inserted = true;
                break;
            }
        }
        if !inserted {
            break;
        }
    }
    Ok(())
}

/// Re-spaces the interior path nodes uniformly in arc length; kept only if
/// the path maximum does not rise.
fn redistribute(work: &OrbitWork, nodes: &mut [Vec<f64>], chis: &mut [f64]) -> Result<()> {
    let np = nodes.len();
    let mut arc = vec![0.0; np];
    for k in 1..np {
        arc[k] = arc[k - 1] + work.distance(&nodes[k], &nodes[k - 1]);
    }
    let total = arc[np - 1];
    if !(total > 0.0) {
        return Ok(());
    }
    let mut fresh = nodes.to_vec();
    for (k, slot) in fresh.iter_mut().enumerate().take(np - 1).skip(1) {
        let s = total * k as f64 / (np - 1) as f64;
        let seg = arc.partition_point(|a| *a <= s).clamp(1, np - 1);
        let span = arc[seg] - arc[seg - 1];
        let w = if span > 0.0 { (s - arc[seg - 1]) / span } else { 0.0 };
        *slot = nodes[seg - 1].iter().zip(&nodes[seg]).map(|(a, b)| a + w * (b - a)).collect();
    }
    let fresh_chis: Vec<f64> = fresh.iter().map(|x| work.chi(x)).collect::<Result<_>>()?;
    let old_max = chis[1..np - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let new_max = fresh_chis[1..np - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if new_max <= old_max {
        nodes.clone_from_slice(&fresh);
        chis.copy_from_slice(&fresh_chis);
    }
    Ok(())
}

/// One damped Newton step on `∇χ_o = 0` with merit `‖∇χ_o‖²`, falling back to
/// Levenberg–Marquardt steps. Returns `None` when no step reduces the merit.
#[allow(clippy::type_complexity)]
fn newton_step(work: &OrbitWork, x: &[f64], g: &[f64], gn: f64) -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
    let d = work.dim;
    let n = x.len();
    let free: Vec<usize> = (d..n - d).collect();
    let hess = work.problem.orbit_hessian(work.o, &work.path(x))?;
    let m = free.len();
    let h = DMatrix::from_fn(m, m, |r, c| hess[(free[r], free[c])]);
    let gf = DVector::from_fn(m, |r, _| g[free[r]]);
    let winv = DVector::from_fn(m, |r, _| 1.0 / work.weights[free[r] / d]);
    let try_dir = |dir: &DVector<f64>, max_halvings: usize| -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
        let mut s = 1.0;
        for _ in 0..max_halvings {
            let mut trial = x.to_vec();
            for (r, &i) in free.iter().enumerate() {
                trial[i] += s * dir[r];
            }
            let tg = work.gradient(&trial)?;
            let tn = work.riesz_norm(&tg);
            if tn.is_finite() && tn < gn {
                return Ok(Some((trial, tg, tn)));
            }
            s *= 0.5;
        }
        Ok(None)
    };
    if let Some(dir) = h.clone().lu().solve(&(-&gf)) {
        if let Some(found) = try_dir(&dir, 30)? {
            return Ok(Some(found));
        }
    }
    // Levenberg–Marquardt on the weighted residual
    let hw = DMatrix::from_fn(m, m, |r, c| h[(r, c)] * winv[c]);
    let normal = &hw * &h;
    let rhs = -(&hw * &gf);
    let scale = normal.diagonal().amax().max(1e-300);
    let mut lambda = 1e-8 * scale;
    for _ in 0..30 {
        let mut a = normal.clone();
        for r in 0..m {
            a[(r, r)] += lambda / winv[r];
        }
        if let Some(dir) = a.cholesky().map(|c| c.solve(&rhs)) {
            if let Some(found) = try_dir(&dir, 1)? {
                return Ok(Some(found));
            }
        }
        lambda *= 10.0;
    }
    Ok(None)
}

/// Both candidate primal processes recovered from a dual critical point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovered {
    /// `J v`, nodewise.
    pub u_j: EnsembleProcess,
    /// `∇H*(t, v̇)` from the cell slopes, interpolated to the nodes (linearly
    /// between cell midpoints, extrapolated at segment ends).
    pub u_star: EnsembleProcess,
    /// `‖u_J − u_star‖_PC`.
    pub distance: f64,
}

pub fn recover_u(problem: &DualAction, v: &EnsembleProcess) -> Result<Recovered> {
    problem.check_layout(v)?;
    let d = problem.dim;
    let mut u_j = v.clone();
    for orbit in &mut u_j.orbits {
        for seg in &mut orbit.segments {
            for node in seg.values.chunks_mut(d) {
                let ju = apply_j(node)?;
                node.copy_from_slice(&ju);
            }
        }
    }
    let mut u_star = v.clone();
    for orbit in &mut u_star.orbits {
        for seg in &mut orbit.segments {
            let n = seg.len();
            let mut mids = Vec::with_capacity(n - 1);
            let mut cells = Vec::with_capacity(n - 1);
            for i in 0..n - 1 {
                let dt = seg.times[i + 1] - seg.times[i];
                let slope: Vec<f64> = (0..d).map(|k| (seg.values[(i + 1) * d + k] - seg.values[i * d + k]) / dt).collect();
                let tm = 0.5 * (seg.times[i] + seg.times[i + 1]);
                cells.push(problem.hamiltonian.conjugate_gradient(tm, &slope)?);
                mids.push(tm);
            }
            let times = seg.times.clone();
            for (i, t) in times.iter().enumerate() {
                let (a, b) = if cells.len() == 1 {
                    (0, 0)
                } else if i == 0 {
                    (0, 1)
                } else if i == n - 1 {
                    (n - 3, n - 2)
                } else {
                    (i - 1, i)
                };
                let w = if a == b { 0.0 } else { (t - mids[a]) / (mids[b] - mids[a]) };
                for k in 0..d {
                    seg.values[i * d + k] = cells[a][k] + w * (cells[b][k] - cells[a][k]);
                }
            }
        }
    }
    let distance = pc_norm(&u_j.axpy(-1.0, &u_star)?)?;
    Ok(Recovered { u_j, u_star, distance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impulse::{ImpulseLaw, SampleOrbit};
    use crate::space::GridSpec;

    #[test]
    fn example_hypotheses_pass() {
        let spec = ImpulseSpec::example_4_1(1.0);
        let rep = verify_hypotheses(&Hamiltonian::example_4_1(), &spec, 2000, 1, 500).unwrap();
        assert!((rep.b_bound - 4.0 / 9.0).abs() < 1e-15);
        assert!(rep.condition_value > 0.087 && rep.condition_value < 0.0875);
        assert!(rep.h2_min_slack.abs() < 1e-12);
        assert!(rep.all_pass);
        let again = verify_hypotheses(&Hamiltonian::example_4_1(), &spec, 2000, 1, 500).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn scaled_jumps_fail_the_condition() {
        let law = ImpulseLaw::example_4_1().scaled_jumps(10.0);
        let spec = ImpulseSpec::new(1.0, 2, law).unwrap();
        let rep = verify_hypotheses(&Hamiltonian::example_4_1(), &spec, 500, 1, 100).unwrap();
        assert!((rep.b_bound - 40.0 / 9.0).abs() < 1e-12);
        assert!(!rep.condition_pass && !rep.all_pass);
    }

    #[test]
    fn rim_radius_formula() {
        let p = 10.0 / 9.0;
        let rho = rim_radius(1.05, p, 1.0);
        assert!((rho - 1.05f64.powi(10)).abs() < 1e-12);
        assert!((rim_radius(1.05, p, 2.0) - (1.05f64.powf(p) / 2.0).powf(9.0)).abs() < 1e-12);
    }

    #[test]
    fn thomas_solves_tridiagonal_systems() {
        let off = [-1.0, -1.0, -1.0];
        let diag = [2.5, 2.5, 2.5, 2.5];
        let x = [1.0, -2.0, 0.5, 3.0];
        let rhs: Vec<f64> = (0..4)
            .map(|i| {
                diag[i] * x[i] + if i > 0 { off[i - 1] * x[i - 1] } else { 0.0 } + if i < 3 { off[i] * x[i + 1] } else { 0.0 }
            })
            .collect();
        let got = thomas(&off, &diag, &rhs);
        for (a, b) in got.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn recover_zero() {
        let p = DualAction::new(
            Hamiltonian::example_4_1(),
            vec![SampleOrbit::empty(1.0)],
            GridSpec::new(16).unwrap(),
            1.0,
            2,
        )
        .unwrap();
        let r = recover_u(&p, &p.zeros()).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.u_star.max_abs(), 0.0);
    }

    #[test]
    fn critical_start_needs_no_iterations() {
        let p = DualAction::new(
            Hamiltonian::quadratic(),
            vec![SampleOrbit::empty(1.0)],
            GridSpec::new(16).unwrap(),
            1.0,
            2,
        )
        .unwrap();
        // endpoint 0: every path node sits at the critical point 0
        let geo = GeometrySummary { rho: 1.0, rim_lower_bound: 0.0, chi_at_v1: 0.0, e_norm_used: 0.0 };
        let res = find_critical_point(&p, &p.zeros(), geo, &SolverOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
    }
}
