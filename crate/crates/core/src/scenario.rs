//! Scenario configuration and the end-to-end pipeline built on it.
//!
//! A scenario is a single JSON document. Every block is validated on load and
//! unknown keys are rejected. Builtin scenarios are available by name through
//! [`builtin`].

use serde::{Deserialize, Serialize};

use crate::critical::{
    find_critical_point, mountain_pass_geometry, recover_u, verify_hypotheses, GeometryOptions, GeometryReport,
    GeometrySummary, HypothesisReport, MountainPassResult, Recovered, SolverOptions,
};
use crate::dual::DualAction;
use crate::flow::{propagate_ensemble, FlowOptions, FlowStats, Integrator};
use crate::hamiltonian::{Hamiltonian, HamiltonianConfig};
use crate::impulse::{
    sample_ensemble, ImpulseLaw, ImpulseSpec, IntervalBounds, JumpCoefficients, JumpMap, SampleOrbit, TauLaw,
};
use crate::space::{EnsembleProcess, GridSpec};
use crate::verification::{pairing_battery, residuals, BatteryReport, ResidualReport, Thresholds};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_orbits: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub tol: f64,
    /// Initial state for propagated paths; zero when absent.
    pub u0: Option<Vec<f64>>,
    pub integrator: Integrator,
    /// How many orbits `simulate` propagates into `paths.csv`.
    pub export_orbits: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { tol: 1e-10, u0: None, integrator: Integrator::Dopri5, export_orbits: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypothesisConfig {
    /// Orbits for the Monte Carlo estimate of `B`.
    pub b_orbits: usize,
    /// Random states for the superquadraticity and growth checks.
    pub samples: usize,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        HypothesisConfig { b_orbits: 100_000, samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub battery_tests: usize,
    pub battery_modes: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig { battery_tests: 32, battery_modes: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub horizon: f64,
    pub dimension: usize,
    pub hamiltonian: HamiltonianConfig,
    pub impulses: ImpulseLaw,
    pub grid: GridSpec,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub hypotheses: HypothesisConfig,
    #[serde(default)]
    pub geometry: GeometryOptions,
    #[serde(default)]
    pub optimizer: SolverOptions,
    #[serde(default)]
    pub verification: VerificationConfig,
    #[serde(default)]
    pub tolerances: Thresholds,
    /// When false, `solve` runs even if the hypotheses or the geometry fail.
    #[serde(default = "yes")]
    pub require_preconditions: bool,
}

fn yes() -> bool {
    true
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ImpulseSpec::new(self.horizon, self.dimension, self.impulses.clone())?;
        self.hamiltonian.build()?;
        self.grid.validate()?;
        self.optimizer.validate()?;
        if self.ensemble.n_orbits == 0 {
            return Err(Error::Config("ensemble.n_orbits must be >= 1".into()));
        }
        if !(self.flow.tol > 0.0) {
            return Err(Error::Config("flow.tol must be positive".into()));
        }
        if let Some(u0) = &self.flow.u0 {
            if u0.len() != self.dimension {
                return Err(Error::Dimension { expected: self.dimension, got: u0.len() });
            }
        }
        if self.hypotheses.b_orbits == 0 {
            return Err(Error::Config("hypotheses.b_orbits must be >= 1".into()));
        }
        if self.verification.battery_tests == 0 {
            return Err(Error::Config("verification.battery_tests must be >= 1".into()));
        }
        let t = &self.tolerances;
        if [t.ode, t.jump, t.boundary, t.pairing].iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

pub const BUILTIN_NAMES: [&str; 5] =
    ["example-4.1", "example-4.1-fixed", "example-4.1-x10", "quadratic", "quadratic-impulsive"];

/// Builtin scenarios by name.
pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    let example = ScenarioConfig {
        name: "example-4.1".into(),
        horizon: 1.0,
        dimension: 2,
        hamiltonian: HamiltonianConfig::PowerLaw { alpha: 1.0, q: 10.0 },
        impulses: ImpulseLaw::example_4_1(),
        grid: GridSpec::new(64).unwrap(),
        ensemble: EnsembleConfig { n_orbits: 32, seed: 20_240_601 },
        flow: FlowConfig { u0: Some(vec![0.9, 0.0]), ..FlowConfig::default() },
        hypotheses: HypothesisConfig::default(),
        geometry: GeometryOptions::default(),
        optimizer: SolverOptions::default(),
        verification: VerificationConfig::default(),
        tolerances: Thresholds::default(),
        require_preconditions: true,
    };
    let quadratic = ScenarioConfig {
        name: "quadratic".into(),
        hamiltonian: HamiltonianConfig::Builtin { name: "quadratic".into() },
        impulses: ImpulseLaw::none(),
        grid: GridSpec::new(32).unwrap(),
        ensemble: EnsembleConfig { n_orbits: 1, seed: 7 },
        geometry: GeometryOptions { e_norm: Some(1.0), ..GeometryOptions::default() },
        require_preconditions: false,
        ..example.clone()
    };
    match name {
        "example-4.1" => Some(example),
        "example-4.1-fixed" => {
            let mut law = ImpulseLaw::example_4_1();
            law.tau = TauLaw::PointMass { fraction: 0.5 };
            law.max_impulses = 3;
            Some(ScenarioConfig {
                name: name.into(),
                impulses: law,
                ensemble: EnsembleConfig { n_orbits: 1, seed: 20_240_601 },
                ..example
            })
        }
        "example-4.1-x10" => Some(ScenarioConfig {
            name: name.into(),
            impulses: ImpulseLaw::example_4_1().scaled_jumps(10.0),
            ..example
        }),
        "quadratic" => Some(quadratic),
        "quadratic-impulsive" => Some(ScenarioConfig {
            name: name.into(),
            impulses: ImpulseLaw {
                intervals: IntervalBounds::Explicit { values: vec![0.6, 0.6] },
                tau: TauLaw::PointMass { fraction: 0.5 },
                jumps: JumpMap::ScalarRadial {
                    coefficients: JumpCoefficients::Explicit { values: vec![1.0, 0.5] },
                    direction: Some(vec![0.6, 0.8]),
                },
                max_impulses: 64,
            },
            ..quadratic
        }),
        _ => None,
    }
}

/// Loads `source` as a builtin name or a path to a JSON file.
pub fn load(source: &str) -> Result<ScenarioConfig> {
    if let Some(cfg) = builtin(source) {
        return Ok(cfg);
    }
    let text = std::fs::read_to_string(source)
        .map_err(|e| Error::Config(format!("cannot read scenario `{source}`: {e}")))?;
    ScenarioConfig::from_json(&text)
}

/// A validated scenario with its built components.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub hamiltonian: Hamiltonian,
    pub spec: ImpulseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryOutcome {
    pub report: Option<GeometryReport>,
    /// Why the geometry check could not run, if it could not.
    pub error: Option<String>,
}

impl GeometryOutcome {
    pub fn passed(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.passed)
    }
}

#[derive(Clone, Debug)]
pub struct Preconditions {
    pub hypotheses: Option<HypothesisReport>,
    pub hypothesis_error: Option<String>,
    pub geometry: GeometryOutcome,
}

impl Preconditions {
    pub fn hypotheses_pass(&self) -> bool {
        self.hypotheses.as_ref().is_some_and(|h| h.all_pass)
    }

    pub fn passed(&self) -> bool {
        self.hypotheses_pass() && self.geometry.passed()
    }

    /// What failed first, if anything did.
    pub fn failure(&self) -> Option<String> {
        if let Some(e) = &self.hypothesis_error {
            Some(format!("hypotheses could not be checked: {e}"))
        } else if !self.hypotheses_pass() {
            Some("hypotheses do not hold".into())
        } else if let Some(e) = &self.geometry.error {
            Some(format!("geometry could not be checked: {e}"))
        } else if !self.geometry.passed() {
            Some("mountain-pass geometry does not hold".into())
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub preconditions: Preconditions,
    pub result: MountainPassResult,
    pub recovered: Recovered,
    pub battery: BatteryReport,
    pub residuals: ResidualReport,
}

impl SolveOutcome {
    /// Converged to `gtol` and every residual class below its threshold.
    pub fn success(&self) -> bool {
        self.result.converged && self.residuals.all_pass
    }
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let hamiltonian = config.hamiltonian.build()?;
        let spec = ImpulseSpec::new(config.horizon, config.dimension, config.impulses.clone())?;
        Ok(Scenario { config, hamiltonian, spec })
    }

    pub fn seed(&self) -> u64 {
        self.config.ensemble.seed
    }

    /// The ensemble, each orbit truncated to the grid resolution.
    pub fn orbits(&self) -> Vec<SampleOrbit> {
        let gap = self.config.grid.resolution(self.config.horizon);
        sample_ensemble(&self.spec, self.config.ensemble.n_orbits, self.seed())
            .iter()
            .map(|o| self.spec.resolve(o, gap))
            .collect()
    }

    pub fn problem(&self) -> Result<DualAction> {
        DualAction::new(
            self.hamiltonian.clone(),
            self.orbits(),
            self.config.grid.clone(),
            self.config.horizon,
            self.config.dimension,
        )
    }

    pub fn flow_options(&self) -> FlowOptions {
        FlowOptions { tol: self.config.flow.tol, integrator: self.config.flow.integrator, ..FlowOptions::default() }
    }

    /// Propagates the first `export_orbits` orbits from `flow.u0`.
    pub fn propagate(&self, orbits: &[SampleOrbit]) -> Result<(EnsembleProcess, FlowStats)> {
        let n = self.config.flow.export_orbits.min(orbits.len()).max(1);
        let u0 = self.config.flow.u0.clone().unwrap_or_else(|| vec![0.0; self.config.dimension]);
        propagate_ensemble(&self.hamiltonian, &orbits[..n], &u0, &self.config.grid, &self.flow_options())
    }

    pub fn hypotheses(&self) -> Result<HypothesisReport> {
        let h = &self.config.hypotheses;
        verify_hypotheses(&self.hamiltonian, &self.spec, h.b_orbits, h.samples, self.seed())
    }

    pub fn geometry(&self, problem: &DualAction, condition: Option<f64>) -> GeometryOutcome {
        match mountain_pass_geometry(problem, &self.config.geometry, condition, self.seed()) {
            Ok(r) => GeometryOutcome { report: Some(r), error: None },
            Err(e) => GeometryOutcome { report: None, error: Some(e.to_string()) },
        }
    }

    /// Hypothesis report followed by the geometry check. Neither failure is
    /// an error here; callers decide how to react.
    pub fn preconditions(&self, problem: &DualAction) -> Preconditions {
        let (hypotheses, hypothesis_error) = match self.hypotheses() {
            Ok(h) => (Some(h), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let geometry = self.geometry(problem, hypotheses.as_ref().map(|h| h.condition_value));
        Preconditions { hypotheses, hypothesis_error, geometry }
    }

    /// Mountain-pass search from the geometry's endpoint, then recovery and
    /// verification of the result.
    pub fn search(&self, problem: &DualAction, pre: Preconditions, gtol: Option<f64>) -> Result<SolveOutcome> {
        let (summary, e) = match &pre.geometry.report {
            Some(r) => (r.summary(), r.e_direction.iter().map(|x| x * r.endpoint_norm()).collect::<Vec<_>>()),
            None => {
                let norm = self.config.geometry.e_norm.unwrap_or(1.0);
                let mut e = vec![0.0; self.config.dimension];
                e[0] = norm;
                let chi = problem.chi(&problem.pinned_loop(&e)?)?;
                (GeometrySummary { rho: 0.0, rim_lower_bound: 0.0, chi_at_v1: chi, e_norm_used: norm }, e)
            }
        };
        let endpoint = problem.pinned_loop(&e)?;
        let mut opts = self.config.optimizer.clone();
        if let Some(g) = gtol {
            opts.gtol = g;
        }
        opts.validate()?;
        let result = find_critical_point(problem, &endpoint, summary, &opts)?;
        let (recovered, battery, residuals) = self.verify(problem, &result.v_star)?;
        Ok(SolveOutcome { preconditions: pre, result, recovered, battery, residuals })
    }

    /// Recovers `u` from `v`, runs the pairing battery and measures residuals
    /// of the segmentwise candidate `∇H*(v̇)`.
    pub fn verify(&self, problem: &DualAction, v: &EnsembleProcess) -> Result<(Recovered, BatteryReport, ResidualReport)> {
        let recovered = recover_u(problem, v)?;
        let battery = self.battery(problem, v)?;
        let residuals = residuals(
            &recovered.u_star,
            &self.hamiltonian,
            &problem.orbits,
            self.config.tolerances,
            Some(battery.max_abs),
        )?;
        Ok((recovered, battery, residuals))
    }

    /// The full pipeline. Fails with [`Error::Domain`] when preconditions are
    /// required, `force` is off and they do not hold.
    pub fn solve(&self, force: bool, gtol: Option<f64>) -> Result<SolveOutcome> {
        let problem = self.problem()?;
        let pre = self.preconditions(&problem);
        if self.config.require_preconditions && !force && !pre.passed() {
            return Err(Error::Domain(pre.failure().unwrap_or_default()));
        }
        self.search(&problem, pre, gtol)
    }

    pub fn battery(&self, problem: &DualAction, v: &EnsembleProcess) -> Result<BatteryReport> {
        let c = &self.config.verification;
        pairing_battery(problem, v, c.battery_tests, c.battery_modes, self.seed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for name in BUILTIN_NAMES {
            let cfg = builtin(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, name);
            let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn strict_parsing() {
        let mut v: serde_json::Value = serde_json::from_str(&builtin("quadratic").unwrap().to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(ScenarioConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&builtin("quadratic").unwrap().to_json()).unwrap();
        v["ensemble"]["n_orbits"] = serde_json::json!(0);
        assert!(matches!(ScenarioConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v: serde_json::Value = serde_json::from_str(&builtin("quadratic").unwrap().to_json()).unwrap();
        v["grid"]["base_intervals"] = serde_json::json!(4);
        assert!(ScenarioConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn fixed_example_has_three_impulses() {
        let s = Scenario::new(builtin("example-4.1-fixed").unwrap()).unwrap();
        let orbits = s.orbits();
        assert_eq!(orbits.len(), 1);
        assert_eq!(orbits[0].times, vec![0.25, 0.375, 0.4375]);
    }

    #[test]
    fn ensemble_orbits_are_resolved() {
        let s = Scenario::new(builtin("example-4.1").unwrap()).unwrap();
        let gap = s.config.grid.resolution(1.0);
        for o in s.orbits() {
            let mut prev = 0.0;
            for &t in &o.times {
                assert!(t - prev >= gap);
                prev = t;
            }
        }
        assert!(s.problem().is_ok());
    }

    #[test]
    fn quadratic_impulsive_orbit_is_deterministic() {
        let s = Scenario::new(builtin("quadratic-impulsive").unwrap()).unwrap();
        let o = &s.orbits()[0];
        assert_eq!(o.times, vec![0.3, 0.6]);
        assert!((o.jumps[0][0] - 0.18).abs() < 1e-15 && (o.jumps[0][1] - 0.24).abs() < 1e-15);
    }
}
