//! The dual action `χ` and the energy functional `φ` on discretized processes.
//!
//! Each orbit's path is treated as its piecewise-linear interpolant, so the
//! discrete `χ` is the exact action of that interpolant:
//!
//! ```text
//! χ_o(v) = Σ_cells [ ½(J v_{i+1}, v_i) + Δt H*(t_mid, (v_{i+1} − v_i)/Δt) ]
//!        + ½ Σ_j (v̄(ξ_j), Δ_j)
//! ```
//!
//! with `v̄(ξ_j)` the average of the left and right values at the impulse, and
//! `χ(v)` the ensemble mean of `χ_o`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::hamiltonian::{j_into, j_pair, Hamiltonian};
use crate::impulse::SampleOrbit;
use crate::numeric::{dot, pairwise_mean, stream_rng};
use crate::space::{quadrature_weights, EnsembleProcess, GridSpec, OrbitPath, Quadrature};
use crate::{Error, Result};

/// The dual variational problem on a fixed ensemble of impulse orbits.
#[derive(Clone, Debug)]
pub struct DualAction {
    pub hamiltonian: Hamiltonian,
    pub orbits: Vec<SampleOrbit>,
    pub grid: GridSpec,
    pub horizon: f64,
    pub dim: usize,
}

impl DualAction {
    pub fn new(
        hamiltonian: Hamiltonian,
        orbits: Vec<SampleOrbit>,
        grid: GridSpec,
        horizon: f64,
        dim: usize,
    ) -> Result<Self> {
        grid.validate()?;
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Dimension { expected: 2, got: dim });
        }
        if orbits.is_empty() {
            return Err(Error::Shape("the ensemble has no orbits".into()));
        }
        for o in &orbits {
            if o.horizon != horizon {
                return Err(Error::OrbitMismatch(format!(
                    "orbit horizon {} differs from {horizon}",
                    o.horizon
                )));
            }
            if let Some(b) = o.jumps.iter().find(|b| b.len() != dim) {
                return Err(Error::Dimension { expected: dim, got: b.len() });
            }
            if grid.segment_times(horizon, &o.times).iter().any(|s| s.windows(2).any(|w| !(w[1] > w[0]))) {
                return Err(Error::DegenerateGrid(format!(
                    "orbit {} has impulses closer than the grid resolves",
                    o.orbit_index
                )));
            }
        }
        Ok(DualAction { hamiltonian, orbits, grid, horizon, dim })
    }

    pub fn process<F>(&self, f: F) -> EnsembleProcess
    where
        F: FnMut(usize, usize, f64, &mut [f64]),
    {
        EnsembleProcess::from_fn(self.horizon, self.dim, &self.grid, &self.orbits, f)
    }

    pub fn zeros(&self) -> EnsembleProcess {
        EnsembleProcess::zeros(self.horizon, self.dim, &self.grid, &self.orbits)
    }

    /// The pinned loop `(cos(2πt/T) − 1) e + sin(2πt/T) J e`, which vanishes
    /// at both ends and winds once around `−e`.
    pub fn pinned_loop(&self, e: &[f64]) -> Result<EnsembleProcess> {
        if e.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: e.len() });
        }
        let mut je = vec![0.0; self.dim];
        j_into(e, &mut je);
        let w = 2.0 * std::f64::consts::PI / self.horizon;
        let mut v = self.process(|_, _, t, out| {
            let (s, c) = (w * t).sin_cos();
            for i in 0..out.len() {
                out[i] = (c - 1.0) * e[i] + s * je[i];
            }
        });
        v.pin_dirichlet();
        Ok(v)
    }

    /// A smooth Dirichlet test process: on each orbit, every component is
    /// `Σ_{k ≤ modes} a_k sin(kπt/T)` with `a_k ~ N(0,1)/k`. Orbits draw
    /// consecutively from stream `stream` of `seed`.
    pub fn random_direction(&self, seed: u64, stream: u64, modes: usize) -> EnsembleProcess {
        let mut rng = stream_rng(seed, stream);
        let modes = modes.max(1);
        let coeffs: Vec<Vec<f64>> = (0..self.orbits.len())
            .map(|_| {
                (0..self.dim * modes)
                    .map(|i| rng.sample::<f64, _>(StandardNormal) / (i % modes + 1) as f64)
                    .collect()
            })
            .collect();
        let w = std::f64::consts::PI / self.horizon;
        let mut h = self.process(|o, _, t, out| {
            for (c, x) in out.iter_mut().enumerate() {
                *x = (0..modes).map(|k| coeffs[o][c * modes + k] * ((k + 1) as f64 * w * t).sin()).sum();
            }
        });
        h.pin_dirichlet();
        h
    }

    pub fn check_layout(&self, v: &EnsembleProcess) -> Result<()> {
        v.check_compatible(&self.zeros())
    }

    fn check_orbit(&self, o: usize, path: &OrbitPath) -> Result<()> {
        let orbit = self.orbits.get(o).ok_or_else(|| Error::OrbitMismatch(format!("no orbit {o}")))?;
        if path.dim != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: path.dim });
        }
        if path.segments.len() != orbit.len() + 1 {
            return Err(Error::OrbitMismatch(format!(
                "path has {} segments but orbit {o} has {} impulses",
                path.segments.len(),
                orbit.len()
            )));
        }
        Ok(())
    }

    /// `χ_o` for one orbit's path.
    pub fn orbit_action(&self, o: usize, path: &OrbitPath) -> Result<f64> {
        self.check_orbit(o, path)?;
        let d = self.dim;
        let mut slope = vec![0.0; d];
        let mut total = 0.0;
        for seg in &path.segments {
            for i in 0..seg.len() - 1 {
                let dt = seg.times[i + 1] - seg.times[i];
                let (a, b) = (seg.value(i, d), seg.value(i + 1, d));
                for k in 0..d {
                    slope[k] = (b[k] - a[k]) / dt;
                }
                let tm = 0.5 * (seg.times[i] + seg.times[i + 1]);
                total += 0.5 * j_pair(b, a) + dt * self.hamiltonian.conjugate_value(tm, &slope)?;
            }
        }
        for (j, b) in self.orbits[o].jumps.iter().enumerate() {
            let (l, r) = path.impulse_sides(j);
            total += 0.25 * (dot(l, b) + dot(r, b));
        }
        Ok(total)
    }

    pub fn chi(&self, v: &EnsembleProcess) -> Result<f64> {
        self.check_layout(v)?;
        let values: Vec<f64> = v
            .orbits
            .par_iter()
            .enumerate()
            .map(|(o, p)| self.orbit_action(o, p))
            .collect::<Result<_>>()?;
        Ok(pairwise_mean(&values))
    }

    /// Partial derivatives of `χ_o` with respect to the flattened node values,
    /// with the two Dirichlet nodes zeroed.
    pub fn orbit_gradient(&self, o: usize, path: &OrbitPath) -> Result<Vec<f64>> {
        self.check_orbit(o, path)?;
        let d = self.dim;
        let mut g = vec![0.0; path.node_count() * d];
        let mut slope = vec![0.0; d];
        let mut ja = vec![0.0; d];
        let mut jb = vec![0.0; d];
        let mut offset = 0;
        let mut starts = Vec::with_capacity(path.segments.len());
        for seg in &path.segments {
            starts.push(offset);
            for i in 0..seg.len() - 1 {
                let dt = seg.times[i + 1] - seg.times[i];
                let (a, b) = (seg.value(i, d), seg.value(i + 1, d));
                for k in 0..d {
                    slope[k] = (b[k] - a[k]) / dt;
                }
                let tm = 0.5 * (seg.times[i] + seg.times[i + 1]);
                let gs = self.hamiltonian.conjugate_gradient(tm, &slope)?;
                j_into(a, &mut ja);
                j_into(b, &mut jb);
                let ia = offset + i * d;
                let ib = ia + d;
                for k in 0..d {
                    g[ia + k] += 0.5 * jb[k] - gs[k];
                    g[ib + k] += -0.5 * ja[k] + gs[k];
                }
            }
            offset += seg.len() * d;
        }
        for (j, b) in self.orbits[o].jumps.iter().enumerate() {
            let left = starts[j] + (path.segments[j].len() - 1) * d;
            let right = starts[j + 1];
            for k in 0..d {
                g[left + k] += 0.25 * b[k];
                g[right + k] += 0.25 * b[k];
            }
        }
        let n = g.len();
        g[..d].fill(0.0);
        g[n - d..].fill(0.0);
        Ok(g)
    }

    /// Per-orbit partial derivatives (see [`DualAction::orbit_gradient`]).
    /// Since `χ` is an ensemble mean, `dχ(v)h = mean_o (g_o, h_o)`.
    pub fn raw_gradient(&self, v: &EnsembleProcess) -> Result<EnsembleProcess> {
        self.check_layout(v)?;
        let grads: Vec<Vec<f64>> = v
            .orbits
            .par_iter()
            .enumerate()
            .map(|(o, p)| self.orbit_gradient(o, p))
            .collect::<Result<_>>()?;
        let mut out = v.clone();
        for (p, g) in out.orbits.iter_mut().zip(&grads) {
            p.set_flat(g);
        }
        Ok(out)
    }

    /// Gradient with respect to the ensemble `L²` inner product: the raw
    /// gradient divided by the lumped quadrature weights.
    pub fn riesz_gradient(&self, v: &EnsembleProcess) -> Result<EnsembleProcess> {
        let mut g = self.raw_gradient(v)?;
        for p in &mut g.orbits {
            let w = riesz_weights(p, v.quadrature)?;
            let mut flat = p.flat();
            for (node, wn) in w.iter().enumerate() {
                for k in 0..self.dim {
                    flat[node * self.dim + k] /= wn;
                }
            }
            p.set_flat(&flat);
        }
        Ok(g)
    }

    /// `‖∇χ(v)‖` in the ensemble `L²` norm.
    pub fn gradient_norm(&self, v: &EnsembleProcess) -> Result<f64> {
        let per: Vec<f64> = v
            .orbits
            .iter()
            .enumerate()
            .map(|(o, p)| orbit_gradient_norm_sq(self, o, p, v.quadrature))
            .collect::<Result<_>>()?;
        Ok(pairwise_mean(&per).sqrt())
    }

    /// `dχ(v)h`, evaluated from the closed-form directional derivative rather
    /// than through [`DualAction::raw_gradient`]. No boundary condition is
    /// imposed on `h`.
    pub fn chi_pairing(&self, v: &EnsembleProcess, h: &EnsembleProcess) -> Result<f64> {
        self.check_layout(v)?;
        v.check_compatible(h)?;
        let d = self.dim;
        let per: Vec<f64> = v
            .orbits
            .par_iter()
            .zip(&h.orbits)
            .enumerate()
            .map(|(o, (pv, ph))| -> Result<f64> {
                let mut total = 0.0;
                let mut slope = vec![0.0; d];
                let mut dv = vec![0.0; d];
                let mut dh = vec![0.0; d];
                let mut hbar = vec![0.0; d];
                let mut vsum = vec![0.0; d];
                let mut jv = vec![0.0; d];
                for (sv, sh) in pv.segments.iter().zip(&ph.segments) {
                    for i in 0..sv.len() - 1 {
                        let dt = sv.times[i + 1] - sv.times[i];
                        let (a, b) = (sv.value(i, d), sv.value(i + 1, d));
                        let (ha, hb) = (sh.value(i, d), sh.value(i + 1, d));
                        for k in 0..d {
                            dv[k] = b[k] - a[k];
                            dh[k] = hb[k] - ha[k];
                            slope[k] = dv[k] / dt;
                            hbar[k] = 0.5 * (ha[k] + hb[k]);
                            vsum[k] = a[k] + b[k];
                        }
                        let tm = 0.5 * (sv.times[i] + sv.times[i + 1]);
                        let gs = self.hamiltonian.conjugate_gradient(tm, &slope)?;
                        j_into(&vsum, &mut jv);
                        total += 0.5 * j_pair(&dv, &hbar) + dot(&gs, &dh) - 0.25 * dot(&jv, &dh);
                    }
                }
                for (j, b) in self.orbits[o].jumps.iter().enumerate() {
                    let (l, r) = ph.impulse_sides(j);
                    total += 0.25 * (dot(l, b) + dot(r, b));
                }
                Ok(total)
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_mean(&per))
    }

    /// Hessian of `χ_o` in the flattened node values (dense, symmetric).
    /// Dirichlet nodes are included; callers restrict as needed.
    pub fn orbit_hessian(&self, o: usize, path: &OrbitPath) -> Result<DMatrix<f64>> {
        self.check_orbit(o, path)?;
        let d = self.dim;
        let n = path.node_count() * d;
        let half = d / 2;
        let mut m = DMatrix::zeros(n, n);
        let mut slope = vec![0.0; d];
        let mut offset = 0;
        for seg in &path.segments {
            for i in 0..seg.len() - 1 {
                let dt = seg.times[i + 1] - seg.times[i];
                let (a, b) = (seg.value(i, d), seg.value(i + 1, d));
                for k in 0..d {
                    slope[k] = (b[k] - a[k]) / dt;
                }
                let tm = 0.5 * (seg.times[i] + seg.times[i + 1]);
                let hs = self.hamiltonian.conjugate_hessian(tm, &slope)?;
                let ia = offset + i * d;
                let ib = ia + d;
                for r in 0..d {
                    for c in 0..d {
                        let val = hs[r * d + c] / dt;
                        m[(ia + r, ia + c)] += val;
                        m[(ib + r, ib + c)] += val;
                        m[(ia + r, ib + c)] -= val;
                        m[(ib + r, ia + c)] -= val;
                    }
                }
                // ∂²/∂a∂b of ½(J b, a) is ½J (rows a, columns b)
                for r in 0..half {
                    m[(ia + r, ib + half + r)] += 0.5;
                    m[(ia + half + r, ib + r)] -= 0.5;
                    m[(ib + half + r, ia + r)] += 0.5;
                    m[(ib + r, ia + half + r)] -= 0.5;
                }
            }
            offset += seg.len() * d;
        }
        Ok(m)
    }

    /// The energy functional on a primal process `u`:
    ///
    /// `φ_o(u) = −½ Σ_cells (J δu, ū) − ∫ H(t, u) − ½ Σ_j (J ū(ξ_j), Δ_j)`,
    /// with the integral by trapezoid and `ū` the side average.
    pub fn phi(&self, u: &EnsembleProcess) -> Result<f64> {
        self.check_layout(u)?;
        let d = self.dim;
        let per: Vec<f64> = u
            .orbits
            .par_iter()
            .enumerate()
            .map(|(o, p)| -> Result<f64> {
                let mut total = 0.0;
                let mut du = vec![0.0; d];
                let mut ubar = vec![0.0; d];
                for seg in &p.segments {
                    for i in 0..seg.len() - 1 {
                        let dt = seg.times[i + 1] - seg.times[i];
                        let (a, b) = (seg.value(i, d), seg.value(i + 1, d));
                        for k in 0..d {
                            du[k] = b[k] - a[k];
                            ubar[k] = 0.5 * (a[k] + b[k]);
                        }
                        let ha = self.hamiltonian.value(seg.times[i], a)?;
                        let hb = self.hamiltonian.value(seg.times[i + 1], b)?;
                        total += -0.5 * j_pair(&du, &ubar) - 0.5 * dt * (ha + hb);
                    }
                }
                for (j, b) in self.orbits[o].jumps.iter().enumerate() {
                    let (l, r) = p.impulse_sides(j);
                    for k in 0..d {
                        ubar[k] = 0.5 * (l[k] + r[k]);
                    }
                    total -= 0.5 * j_pair(&ubar, b);
                }
                Ok(total)
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_mean(&per))
    }
}

fn orbit_gradient_norm_sq(problem: &DualAction, o: usize, p: &OrbitPath, rule: Quadrature) -> Result<f64> {
    let g = problem.orbit_gradient(o, p)?;
    let w = riesz_weights(p, rule)?;
    let d = problem.dim;
    Ok(w
        .iter()
        .enumerate()
        .map(|(node, wn)| g[node * d..(node + 1) * d].iter().map(|x| x * x).sum::<f64>() / wn)
        .sum())
}

/// Per-node lumped quadrature weights of an orbit path; Dirichlet nodes get
/// weight 1 (their gradient entries are zero). Fails when a weight is not
/// positive, since the Gram matrix is then singular.
pub fn riesz_weights(path: &OrbitPath, rule: Quadrature) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(path.node_count());
    for seg in &path.segments {
        w.extend(quadrature_weights(&seg.times, rule));
    }
    let n = w.len();
    w[0] = 1.0;
    w[n - 1] = 1.0;
    if let Some((i, bad)) = w.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(Error::DegenerateGrid(format!("quadrature weight {bad} at node {i} is not positive")));
    }
    Ok(w)
}
