//! The quadratic scenarios have an affine gradient, so their discrete
//! critical point solves a linear system. The action is assembled here from
//! its definition, independently of the library.

use impham::critical::recover_u;
use impham::scenario::{builtin, Scenario};
use impham::space::{pc_norm, EnsembleProcess};
use nalgebra::{DMatrix, DVector};

/// Discrete action for `H(u) = |u|²/2` in the plane, one orbit.
fn action(times: &[Vec<f64>], jumps: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut offset = 0;
    let mut sides = Vec::new();
    for ts in times {
        let node = |i: usize| &x[offset + 2 * i..offset + 2 * i + 2];
        for i in 0..ts.len() - 1 {
            let (a, b) = (node(i), node(i + 1));
            let dt = ts[i + 1] - ts[i];
            // (J b, a) with J(x, y) = (y, −x)
            total += 0.5 * (b[1] * a[0] - b[0] * a[1]);
            total += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)) / (2.0 * dt);
        }
        sides.push((node(0).to_vec(), node(ts.len() - 1).to_vec()));
        offset += 2 * ts.len();
    }
    for (j, b) in jumps.iter().enumerate() {
        let l = &sides[j].1;
        let r = &sides[j + 1].0;
        total += 0.25 * ((l[0] + r[0]) * b[0] + (l[1] + r[1]) * b[1]);
    }
    total
}

fn oracle(s: &Scenario) -> EnsembleProcess {
    let problem = s.problem().unwrap();
    let mut v = problem.zeros();
    let path = &v.orbits[0];
    let times: Vec<Vec<f64>> = path.segments.iter().map(|seg| seg.times.clone()).collect();
    let jumps = &problem.orbits[0].jumps;
    let n = path.flat().len();
    let free: Vec<usize> = (2..n - 2).collect();
    let f = |x: &[f64]| action(&times, jumps, x);
    let unit = |idx: &[usize]| {
        let mut x = vec![0.0; n];
        for &i in idx {
            x[i] += 1.0;
        }
        x
    };
    let f0 = f(&vec![0.0; n]);
    let fi: Vec<f64> = free.iter().map(|&i| f(&unit(&[i]))).collect();
    let m = free.len();
    let a = DMatrix::from_fn(m, m, |r, c| f(&unit(&[free[r], free[c]])) - fi[r] - fi[c] + f0);
    // with x = e_r: f = f0 + c_r + A_rr/2
    let c = DVector::from_fn(m, |r, _| fi[r] - f0 - 0.5 * a[(r, r)]);
    let sol = a.lu().solve(&(-c)).expect("nonsingular stationarity system");
    let mut flat = vec![0.0; n];
    for (r, &i) in free.iter().enumerate() {
        flat[i] = sol[r];
    }
    v.orbits[0].set_flat(&flat);
    v
}

fn j_nodewise(v: &EnsembleProcess) -> EnsembleProcess {
    let mut u = v.clone();
    for seg in &mut u.orbits[0].segments {
        for node in seg.values.chunks_mut(2) {
            let (x, y) = (node[0], node[1]);
            node[0] = y;
            node[1] = -x;
        }
    }
    u
}

fn check(name: &str) -> (f64, f64) {
    let s = Scenario::new(builtin(name).unwrap()).unwrap();
    let out = s.solve(false, None).unwrap();
    assert!(out.result.converged);
    assert!(out.result.gradient_norm < 1e-6);
    let v = oracle(&s);
    let dv = pc_norm(&out.result.v_star.axpy(-1.0, &v).unwrap()).unwrap();
    let du = pc_norm(&out.recovered.u_j.axpy(-1.0, &j_nodewise(&v)).unwrap()).unwrap();
    (dv, du)
}

#[test]
fn quadratic_solver_matches_linear_solve() {
    let (dv, du) = check("quadratic");
    assert!(dv < 1e-4, "{dv}");
    assert!(du < 1e-4, "{du}");
    let s = Scenario::new(builtin("quadratic").unwrap()).unwrap();
    assert!(pc_norm(&oracle(&s)).unwrap() < 1e-12);
}

#[test]
fn quadratic_impulsive_solver_matches_linear_solve() {
    let (dv, du) = check("quadratic-impulsive");
    assert!(dv < 1e-4, "{dv}");
    assert!(du < 1e-4, "{du}");
}

#[test]
fn oracle_action_agrees_with_library() {
    let s = Scenario::new(builtin("quadratic-impulsive").unwrap()).unwrap();
    let problem = s.problem().unwrap();
    let v = problem.random_direction(3, 0, 4).axpy(1.0, &oracle(&s)).unwrap();
    let times: Vec<Vec<f64>> = v.orbits[0].segments.iter().map(|seg| seg.times.clone()).collect();
    let ours = action(&times, &problem.orbits[0].jumps, &v.orbits[0].flat());
    assert!((problem.chi(&v).unwrap() - ours).abs() < 1e-12 * (1.0 + ours.abs()));
    let rec = recover_u(&problem, &problem.zeros()).unwrap();
    assert_eq!(rec.distance, 0.0);
}
