use impham::dual::DualAction;
use impham::flow::{energy_drift, jump_residual, propagate_orbit, FlowOptions};
use impham::hamiltonian::{Hamiltonian, HamiltonianConfig};
use impham::impulse::{sample_orbit_indexed, ImpulseSpec, SampleOrbit};
use impham::space::{inner_product, pc_norm, GridSpec};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn example_orbits_satisfy_the_recursion(seed in any::<u64>(), index in 0u64..1000) {
        let spec = ImpulseSpec::example_4_1(1.0);
        let o = sample_orbit_indexed(&spec, seed, index);
        prop_assert!(o.len() <= spec.law().max_impulses);
        let mut prev = 0.0;
        for (j, (&xi, &tau)) in o.times.iter().zip(&o.draws).enumerate() {
            prop_assert!(tau > 0.0 && tau < 0.5f64.powi(j as i32 + 1));
            prop_assert_eq!(xi, prev + tau);
            prop_assert!(xi > prev && xi < 1.0);
            prop_assert_eq!(&o.jumps[j], &spec.jump(j + 1, tau));
            prev = xi;
        }
    }

    #[test]
    fn resolved_orbits_are_prefixes_with_wide_gaps(seed in any::<u64>(), m in 8usize..256) {
        let spec = ImpulseSpec::example_4_1(1.0);
        let grid = GridSpec::new(m).unwrap();
        let o = sample_orbit_indexed(&spec, seed, 0);
        let gap = grid.resolution(1.0);
        let r = spec.resolve(&o, gap);
        prop_assert!(r.len() <= o.len());
        prop_assert_eq!(&r.times[..], &o.times[..r.len()]);
        let mut prev = 0.0;
        for &t in &r.times {
            prop_assert!(t - prev >= gap);
            prev = t;
        }
        let problem = DualAction::new(Hamiltonian::example_4_1(), vec![r], grid, 1.0, 2);
        prop_assert!(problem.is_ok());
    }

    #[test]
    fn legendre_round_trip(alpha in 0.5f64..2.0, q in 2.5f64..12.0, x in -3.0f64..3.0, y in -3.0f64..3.0) {
        prop_assume!(x.hypot(y) > 1e-3);
        let h = HamiltonianConfig::PowerLaw { alpha, q }.build().unwrap();
        let u = [x, y];
        let g = h.gradient(0.0, &u).unwrap();
        let back = h.conjugate_gradient(0.0, &g).unwrap();
        prop_assert!((back[0] - x).hypot(back[1] - y) <= 1e-8 * x.hypot(y));
        let gu = g[0] * x + g[1] * y;
        let fy = gu - h.value(0.0, &u).unwrap() - h.conjugate_value(0.0, &g).unwrap();
        prop_assert!(fy.abs() <= 1e-8 * gu.abs().max(1.0));
    }

    #[test]
    fn pairing_is_linear_and_matches_the_riesz_gradient(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let orbit = SampleOrbit::fixed(1.0, vec![0.25, 0.375, 0.4375], vec![vec![0.03, 0.0], vec![0.01, 0.0], vec![0.002, 0.0]]).unwrap();
        let p = DualAction::new(Hamiltonian::example_4_1(), vec![orbit], GridSpec::new(32).unwrap(), 1.0, 2).unwrap();
        let v = p.random_direction(seed, 0, 4);
        let h1 = p.random_direction(seed, 1, 4);
        let h2 = p.random_direction(seed, 2, 4);
        let p1 = p.chi_pairing(&v, &h1).unwrap();
        let p2 = p.chi_pairing(&v, &h2).unwrap();
        let mix = h1.scaled(a).axpy(b, &h2).unwrap();
        prop_assert!(rel(p.chi_pairing(&v, &mix).unwrap(), a * p1 + b * p2) <= 1e-10);
        let g = p.riesz_gradient(&v).unwrap();
        prop_assert!(rel(inner_product(&g, &h1).unwrap(), p1) <= 1e-10);
    }

    #[test]
    fn pc_norm_is_a_norm(seed in any::<u64>(), lambda in -5.0f64..5.0) {
        let p = DualAction::new(Hamiltonian::example_4_1(), vec![SampleOrbit::empty(1.0); 3], GridSpec::new(16).unwrap(), 1.0, 2).unwrap();
        let x = p.random_direction(seed, 0, 4);
        let y = p.random_direction(seed, 1, 4);
        let nx = pc_norm(&x).unwrap();
        let ny = pc_norm(&y).unwrap();
        prop_assert!(rel(pc_norm(&x.scaled(lambda)).unwrap(), lambda.abs() * nx) <= 1e-14);
        prop_assert!(pc_norm(&x.axpy(1.0, &y).unwrap()).unwrap() <= nx + ny + 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn propagated_jumps_are_exact_and_radius_is_kept(
        t1 in 0.1f64..0.45, dt in 0.05f64..0.45, a in -0.3f64..0.3, b in -0.3f64..0.3, r in 0.3f64..0.9,
    ) {
        let h = Hamiltonian::example_4_1();
        let orbit = SampleOrbit::fixed(1.0, vec![t1, t1 + dt], vec![vec![a, b], vec![b, -a]]).unwrap();
        let (path, _) = propagate_orbit(&h, &orbit, &[r, 0.0], &GridSpec::new(32).unwrap(), &FlowOptions::default()).unwrap();
        prop_assert!(jump_residual(&path, &orbit) <= 1e-15);
        prop_assert!(energy_drift(&h, &path).unwrap() <= 1e-8);
    }
}
