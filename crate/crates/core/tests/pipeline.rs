use impham::scenario::{builtin, Scenario};

fn scenario(name: &str) -> Scenario {
    Scenario::new(builtin(name).unwrap()).unwrap()
}

#[test]
fn fixed_orbit_reaches_a_positive_critical_level() {
    let s = scenario("example-4.1-fixed");
    let out = s.solve(false, None).unwrap();
    assert!(out.preconditions.passed());
    assert!(out.result.converged);
    assert!(out.result.chi_at_vstar > 0.0);
    assert!(out.result.above_endpoints);
    assert!(out.battery.max_abs < 10.0 * s.config.optimizer.gtol);
    assert!(out.residuals.jump_residual_max.is_finite());
}

#[test]
fn scaled_jumps_fail_the_gate_unless_forced() {
    let mut cfg = builtin("example-4.1-x10").unwrap();
    cfg.hypotheses.b_orbits = 2000;
    cfg.ensemble.n_orbits = 1;
    cfg.optimizer.max_iter = 50;
    let s = Scenario::new(cfg).unwrap();
    let h = s.hypotheses().unwrap();
    assert!(!h.all_pass);
    assert!(matches!(s.solve(false, None), Err(impham::Error::Domain(_))));
    let forced = s.solve(true, None).unwrap();
    assert!(!forced.preconditions.passed());
}

#[test]
fn pipeline_is_identical_across_thread_counts() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut cfg = builtin("quadratic-impulsive").unwrap();
            cfg.ensemble.n_orbits = 3;
            let s = Scenario::new(cfg).unwrap();
            let out = s.solve(false, None).unwrap();
            (out.result.chi_at_vstar.to_bits(), out.result.v_star, out.battery.values)
        })
    };
    let (a, va, ba) = run(1);
    let (b, vb, bb) = run(4);
    assert_eq!(a, b);
    assert_eq!(va, vb);
    assert_eq!(ba, bb);
}
