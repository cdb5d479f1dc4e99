//! Residual checks for recovered solutions and the pairing battery.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::DualAction;
use crate::hamiltonian::{j_into, Hamiltonian};
use crate::impulse::SampleOrbit;
use crate::numeric::{norm, pairwise_mean};
use crate::space::{inner_product, segment_derivative, EnsembleProcess};
use crate::{Error, Result};

/// Acceptance thresholds for the residual classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub ode: f64,
    pub jump: f64,
    pub boundary: f64,
    pub pairing: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { ode: 1e-3, jump: 1e-10, boundary: 1e-3, pairing: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitResiduals {
    pub orbit: usize,
    pub ode_residual_sup: f64,
    pub jump_residuals: Vec<f64>,
    pub boundary_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Max over orbits and segment-interior nodes of `|u̇ − J∇H(t,u)|`.
    pub ode_residual_sup: f64,
    /// Max over orbits and impulses of `|u(ξ⁺) − u(ξ⁻) − Δ_j|`.
    pub jump_residual_max: f64,
    /// Max over orbits of `|u(0)| + |u(T)|`.
    pub boundary_residual: f64,
    /// Battery maximum `max_i |dχ(v) h_i|`, when a dual iterate was supplied.
    pub pairing_residual: Option<f64>,
    pub thresholds: Thresholds,
    pub ode_pass: bool,
    pub jump_pass: bool,
    pub boundary_pass: bool,
    pub pairing_pass: bool,
    pub all_pass: bool,
    pub orbits: Vec<OrbitResiduals>,
}

/// ODE, jump and boundary residuals of a primal process `u`.
pub fn residuals(
    u: &EnsembleProcess,
    hamiltonian: &Hamiltonian,
    orbits: &[SampleOrbit],
    thresholds: Thresholds,
    pairing: Option<f64>,
) -> Result<ResidualReport> {
    if u.orbits.len() != orbits.len() {
        return Err(Error::OrbitMismatch(format!(
            "{} paths for {} orbits",
            u.orbits.len(),
            orbits.len()
        )));
    }
    let d = u.dim;
    let per: Vec<OrbitResiduals> = u
        .orbits
        .par_iter()
        .zip(orbits)
        .enumerate()
        .map(|(o, (path, orbit))| -> Result<OrbitResiduals> {
            if path.segments.len() != orbit.len() + 1 {
                return Err(Error::OrbitMismatch(format!("orbit {o}: segment count does not match impulses")));
            }
            let mut ode: f64 = 0.0;
            let mut grad = vec![0.0; d];
            let mut field = vec![0.0; d];
            for seg in &path.segments {
                let du = segment_derivative(seg, d)?;
                for i in 1..seg.len() - 1 {
                    hamiltonian.gradient_into(seg.times[i], seg.value(i, d), &mut grad);
                    j_into(&grad, &mut field);
                    let r = (0..d).map(|k| (du[i * d + k] - field[k]).powi(2)).sum::<f64>().sqrt();
                    ode = ode.max(r);
                }
            }
            let jumps = (0..orbit.len())
                .map(|j| {
                    let (l, r) = path.impulse_sides(j);
                    (0..d).map(|k| ((r[k] - l[k]) - orbit.jumps[j][k]).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            Ok(OrbitResiduals {
                orbit: o,
                ode_residual_sup: ode,
                jump_residuals: jumps,
                boundary_residual: norm(path.first()) + norm(path.last()),
            })
        })
        .collect::<Result<_>>()?;
    let ode_residual_sup = per.iter().map(|r| r.ode_residual_sup).fold(0.0, f64::max);
    let jump_residual_max = per.iter().flat_map(|r| r.jump_residuals.iter().copied()).fold(0.0, f64::max);
    let boundary_residual = per.iter().map(|r| r.boundary_residual).fold(0.0, f64::max);
    let ode_pass = ode_residual_sup < thresholds.ode;
    let jump_pass = jump_residual_max < thresholds.jump;
    let boundary_pass = boundary_residual < thresholds.boundary;
    let pairing_pass = pairing.is_none_or(|p| p < thresholds.pairing);
    Ok(ResidualReport {
        ode_residual_sup,
        jump_residual_max,
        boundary_residual,
        pairing_residual: pairing,
        thresholds,
        ode_pass,
        jump_pass,
        boundary_pass,
        pairing_pass,
        all_pass: ode_pass && jump_pass && boundary_pass && pairing_pass,
        orbits: per,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub seed: u64,
    pub modes: usize,
    /// `|dχ(v) h_i|` for each unit-`L²` test direction.
    pub values: Vec<f64>,
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Pairs `dχ(v)` with `n_tests` random smooth Dirichlet directions, each
/// normalized to unit ensemble `L²` norm.
pub fn pairing_battery(
    problem: &DualAction,
    v: &EnsembleProcess,
    n_tests: usize,
    modes: usize,
    seed: u64,
) -> Result<BatteryReport> {
    if n_tests == 0 {
        return Err(Error::Config("the battery needs at least one test direction".into()));
    }
    let values: Vec<f64> = (0..n_tests)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let h = problem.random_direction(seed, 2 << 32 | i as u64, modes);
            let n = inner_product(&h, &h)?.sqrt();
            Ok((problem.chi_pairing(v, &h)? / n).abs())
        })
        .collect::<Result<_>>()?;
    Ok(BatteryReport {
        seed,
        modes,
        max_abs: values.iter().copied().fold(0.0, f64::max),
        mean_abs: pairwise_mean(&values),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{propagate_orbit, FlowOptions};
    use crate::space::GridSpec;

    #[test]
    fn propagated_paths_have_small_residuals() {
        let h = Hamiltonian::example_4_1();
        let orbit = SampleOrbit::fixed(1.0, vec![0.25, 0.375], vec![vec![0.0625, 0.0], vec![0.015625, 0.0]]).unwrap();
        let grid = GridSpec::new(4096).unwrap();
        let (path, _) = propagate_orbit(&h, &orbit, &[0.0, 0.0], &grid, &FlowOptions::default()).unwrap();
        let u = EnsembleProcess { horizon: 1.0, dim: 2, quadrature: grid.quadrature, orbits: vec![path] };
        let rep = residuals(&u, &h, &[orbit], Thresholds::default(), None).unwrap();
        assert!(rep.ode_residual_sup < 1e-3, "{}", rep.ode_residual_sup);
        assert!(rep.jump_residual_max < 1e-15);
        assert!((rep.boundary_residual - norm(u.orbits[0].last())).abs() < 1e-15);
        assert!(rep.boundary_residual > 0.0);
    }

    #[test]
    fn zero_process_reports_the_jumps() {
        let h = Hamiltonian::example_4_1();
        let orbit = SampleOrbit::fixed(1.0, vec![0.5], vec![vec![0.3, 0.4]]).unwrap();
        let u = EnsembleProcess::zeros(1.0, 2, &GridSpec::new(16).unwrap(), std::slice::from_ref(&orbit));
        let rep = residuals(&u, &h, &[orbit], Thresholds::default(), None).unwrap();
        assert!((rep.jump_residual_max - 0.5).abs() < 1e-15);
        assert_eq!(rep.ode_residual_sup, 0.0);
        assert!(!rep.all_pass);
    }

    #[test]
    fn battery_vanishes_at_zero_without_impulses() {
        let p = DualAction::new(
            Hamiltonian::example_4_1(),
            vec![SampleOrbit::empty(1.0)],
            GridSpec::new(32).unwrap(),
            1.0,
            2,
        )
        .unwrap();
        let rep = pairing_battery(&p, &p.zeros(), 16, 4, 1).unwrap();
        assert!(rep.max_abs < 1e-12);
        assert!(pairing_battery(&p, &p.zeros(), 0, 4, 1).is_err());
    }
}
