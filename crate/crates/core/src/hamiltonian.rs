//! Hamiltonians `H(t, u)`, the standard symplectic matrix `J`, and the
//! Legendre transform `H*(t, v) = sup_u [(v, u) − H(t, u)]`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::{dot, norm, stream_rng};
use crate::{Error, Result};

/// Multiplies by `J = [[0, I_n], [−I_n, 0]]`: `(a, b) ↦ (b, −a)`.
pub fn apply_j(u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() || u.len() % 2 != 0 {
        return Err(Error::Dimension { expected: u.len() + u.len() % 2, got: u.len() });
    }
    let mut out = vec![0.0; u.len()];
    j_into(u, &mut out);
    Ok(out)
}

/// Unchecked `out = J u`; `u.len()` must be even and equal to `out.len()`.
#[inline]
pub fn j_into(u: &[f64], out: &mut [f64]) {
    let n = u.len() / 2;
    for i in 0..n {
        out[i] = u[n + i];
        out[n + i] = -u[i];
    }
}

/// `(J a, b)` without allocating.
#[inline]
pub(crate) fn j_pair(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 2;
    let mut s = 0.0;
    for i in 0..n {
        s += a[n + i] * b[i] - a[i] * b[n + i];
    }
    s
}

/// `H(u) = α |u|^q` with `q > 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub alpha: f64,
    pub q: f64,
}

impl PowerLaw {
    pub fn new(alpha: f64, q: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("power-law α must be > 0, got {alpha}")));
        }
        if !(q.is_finite() && q > 2.0) {
            return Err(Error::Config(format!("power-law exponent q must be > 2, got {q}")));
        }
        Ok(PowerLaw { alpha, q })
    }

    /// Conjugate exponent `p = q / (q − 1)`.
    pub fn p(&self) -> f64 {
        conjugate_exponent(self.q)
    }

    /// `α* = (α q)^{−p/q} / p`, the coefficient of `H*(v) = α* |v|^p`.
    pub fn alpha_star(&self) -> f64 {
        alpha_star(self.alpha, self.q)
    }
}

pub fn conjugate_exponent(q: f64) -> f64 {
    q / (q - 1.0)
}

pub fn alpha_star(alpha: f64, q: f64) -> f64 {
    let p = conjugate_exponent(q);
    (alpha * q).powf(-p / q) / p
}

type ValueFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Growth certificate `(α, q)` asserting `H(u) ≤ α|u|^q` and
/// `q H(u) ≤ (∇H(u), u)`; supplied by the caller for callable Hamiltonians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub alpha: f64,
    pub q: f64,
}

/// A user-supplied Hamiltonian. The conjugate is computed numerically.
#[derive(Clone)]
pub struct Callable {
    pub name: String,
    pub value: Arc<ValueFn>,
    pub gradient: Arc<GradFn>,
    pub autonomous: bool,
    pub certificate: Option<GrowthCertificate>,
}

impl fmt::Debug for Callable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Callable")
            .field("name", &self.name)
            .field("autonomous", &self.autonomous)
            .field("certificate", &self.certificate)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum Hamiltonian {
    PowerLaw(PowerLaw),
    Callable(Callable),
}

/// Serializable description of a Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianConfig {
    PowerLaw { alpha: f64, q: f64 },
    /// One of `quadratic` (|u|²/2), `zero`, `example-4.1` (|u|¹⁰).
    Builtin { name: String },
}

impl HamiltonianConfig {
    pub fn build(&self) -> Result<Hamiltonian> {
        match self {
            HamiltonianConfig::PowerLaw { alpha, q } => {
                Ok(Hamiltonian::PowerLaw(PowerLaw::new(*alpha, *q)?))
            }
            HamiltonianConfig::Builtin { name } => match name.as_str() {
                "quadratic" => Ok(Hamiltonian::quadratic()),
                "zero" => Ok(Hamiltonian::zero()),
                "example-4.1" => Ok(Hamiltonian::example_4_1()),
                other => Err(Error::Config(format!("unknown builtin Hamiltonian `{other}`"))),
            },
        }
    }
}

/// Conjugate inner solver settings.
const CONJ_TOL: f64 = 1e-10;
const CONJ_MAX_ITER: usize = 500;

impl Hamiltonian {
    pub fn power_law(alpha: f64, q: f64) -> Result<Self> {
        Ok(Hamiltonian::PowerLaw(PowerLaw::new(alpha, q)?))
    }

    /// `H(u) = |u|¹⁰`.
    pub fn example_4_1() -> Self {
        Hamiltonian::PowerLaw(PowerLaw { alpha: 1.0, q: 10.0 })
    }

    /// `H(u) = |u|²/2` as a callable, so its conjugate goes through the
    /// numerical solver. Certificate `(1/2, 2)`.
    pub fn quadratic() -> Self {
        Hamiltonian::Callable(Callable {
            name: "quadratic".into(),
            value: Arc::new(|_, u| 0.5 * dot(u, u)),
            gradient: Arc::new(|_, u, g| g.copy_from_slice(u)),
            autonomous: true,
            certificate: Some(GrowthCertificate { alpha: 0.5, q: 2.0 }),
        })
    }

    /// `H ≡ 0`. Its conjugate is not finite; only the flow is meaningful.
    pub fn zero() -> Self {
        Hamiltonian::Callable(Callable {
            name: "zero".into(),
            value: Arc::new(|_, _| 0.0),
            gradient: Arc::new(|_, _, g| g.fill(0.0)),
            autonomous: true,
            certificate: None,
        })
    }

    pub fn is_autonomous(&self) -> bool {
        match self {
            Hamiltonian::PowerLaw(_) => true,
            Hamiltonian::Callable(c) => c.autonomous,
        }
    }

    /// `(α, q)` growth data: exact for power laws, the caller's certificate
    /// for callables.
    pub fn certificate(&self) -> Option<GrowthCertificate> {
        match self {
            Hamiltonian::PowerLaw(pl) => Some(GrowthCertificate { alpha: pl.alpha, q: pl.q }),
            Hamiltonian::Callable(c) => c.certificate,
        }
    }

    pub fn value(&self, t: f64, u: &[f64]) -> Result<f64> {
        check_finite(u)?;
        Ok(self.value_unchecked(t, u))
    }

    pub fn gradient(&self, t: f64, u: &[f64]) -> Result<Vec<f64>> {
        check_finite(u)?;
        let mut g = vec![0.0; u.len()];
        self.gradient_into(t, u, &mut g);
        Ok(g)
    }

    pub(crate) fn value_unchecked(&self, t: f64, u: &[f64]) -> f64 {
        match self {
            Hamiltonian::PowerLaw(pl) => pl.alpha * norm(u).powf(pl.q),
            Hamiltonian::Callable(c) => (c.value)(t, u),
        }
    }

    pub fn gradient_into(&self, t: f64, u: &[f64], g: &mut [f64]) {
        match self {
            Hamiltonian::PowerLaw(pl) => {
                let r = norm(u);
                if r == 0.0 {
                    g.fill(0.0);
                } else {
                    let s = pl.alpha * pl.q * r.powf(pl.q - 2.0);
                    for (gi, ui) in g.iter_mut().zip(u) {
                        *gi = s * ui;
                    }
                }
            }
            Hamiltonian::Callable(c) => (c.gradient)(t, u, g),
        }
    }

    /// `H*(t, v)`.
    pub fn conjugate_value(&self, t: f64, v: &[f64]) -> Result<f64> {
        check_finite(v)?;
        match self {
            Hamiltonian::PowerLaw(pl) => Ok(pl.alpha_star() * norm(v).powf(pl.p())),
            Hamiltonian::Callable(_) => {
                let u = self.maximize_conjugate(t, v)?;
                Ok(dot(v, &u) - self.value_unchecked(t, &u))
            }
        }
    }

    /// `∇H*(t, v)`, the maximizer of `(v, u) − H(t, u)`.
    pub fn conjugate_gradient(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        check_finite(v)?;
        match self {
            Hamiltonian::PowerLaw(pl) => {
                let r = norm(v);
                if r == 0.0 {
                    return Ok(vec![0.0; v.len()]);
                }
                let s = (r / (pl.alpha * pl.q)).powf(1.0 / (pl.q - 1.0)) / r;
                Ok(v.iter().map(|x| s * x).collect())
            }
            Hamiltonian::Callable(_) => self.maximize_conjugate(t, v),
        }
    }

    /// Row-major Hessian of `H*` at `v`. Power laws use the closed form with
    /// `|v|` floored at `1e-8` (the Hessian is singular at the origin for
    /// `p < 2`); callables invert a finite-difference Hessian of `H` at the
    /// maximizer.
    pub fn conjugate_hessian(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        check_finite(v)?;
        let d = v.len();
        let mut hess = vec![0.0; d * d];
        match self {
            Hamiltonian::PowerLaw(pl) => {
                let p = pl.p();
                let r = norm(v).max(1e-8);
                let c = pl.alpha_star() * p * r.powf(p - 2.0);
                for i in 0..d {
                    for k in 0..d {
                        let radial = (p - 2.0) * v[i] * v[k] / (r * r);
                        hess[i * d + k] = c * (if i == k { 1.0 } else { 0.0 } + radial);
                    }
                }
            }
            Hamiltonian::Callable(_) => {
                let u = self.maximize_conjugate(t, v)?;
                let inv = self.fd_hessian(t, &u).try_inverse().ok_or_else(|| {
                    Error::Domain("Hessian of H is singular at the conjugate point".into())
                })?;
                for i in 0..d {
                    for k in 0..d {
                        hess[i * d + k] = 0.5 * (inv[(i, k)] + inv[(k, i)]);
                    }
                }
            }
        }
        Ok(hess)
    }

    /// Gradient ascent on the concave map `u ↦ (v, u) − H(t, u)` along
    /// `v − ∇H(u)`, with step doubling on success and halving on failure.
    /// Central-difference Hessian of `H` from the analytic gradient.
    fn fd_hessian(&self, t: f64, u: &[f64]) -> DMatrix<f64> {
        let d = u.len();
        let h = 1e-6 * (1.0 + norm(u));
        let mut w = u.to_vec();
        let mut gp = vec![0.0; d];
        let mut gm = vec![0.0; d];
        let mut m = DMatrix::zeros(d, d);
        for k in 0..d {
            w[k] = u[k] + h;
            self.gradient_into(t, &w, &mut gp);
            w[k] = u[k] - h;
            self.gradient_into(t, &w, &mut gm);
            w[k] = u[k];
            for i in 0..d {
                m[(i, k)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        0.5 * (&m + m.transpose())
    }

    /// Solves `∇H(u) = v` by damped Newton ascent on `(v,u) − H(u)`, falling
    /// back to gradient steps where the Newton direction is not an ascent.
    fn maximize_conjugate(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let d = v.len();
        let tol = CONJ_TOL * (1.0 + norm(v));
        let mut u = v.to_vec();
        let mut g = vec![0.0; d];
        let mut trial = vec![0.0; d];
        let objective = |u: &[f64]| dot(v, u) - self.value_unchecked(t, u);
        let mut f = objective(&u);
        let mut step = 1.0;
        let mut residual = f64::INFINITY;
        for iteration in 0..CONJ_MAX_ITER {
            self.gradient_into(t, &u, &mut g);
            for (gi, vi) in g.iter_mut().zip(v) {
                *gi = vi - *gi;
            }
            residual = norm(&g);
            if residual < tol {
                return Ok(u);
            }
            let newton = self
                .fd_hessian(t, &u)
                .lu()
                .solve(&DVector::from_column_slice(&g))
                .map(|x| x.as_slice().to_vec())
                .filter(|x| dot(x, &g) > 0.0 && x.iter().all(|c| c.is_finite()));
            let mut accepted = false;
            if let Some(dir) = newton {
                let mut s = 1.0;
                for _ in 0..40 {
                    for i in 0..d {
                        trial[i] = u[i] + s * dir[i];
                    }
                    let ft = objective(&trial);
                    if ft.is_finite() && ft >= f {
                        accepted = true;
                        break;
                    }
                    s *= 0.5;
                }
            }
            if !accepted {
                for _ in 0..60 {
                    for i in 0..d {
                        trial[i] = u[i] + step * g[i];
                    }
                    let ft = objective(&trial);
                    if ft.is_finite() && ft >= f {
                        step *= 2.0;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
            }
            if !accepted {
                return Err(Error::Conjugate { residual, iterations: iteration });
            }
            u.copy_from_slice(&trial);
            f = objective(&u);
        }
        Err(Error::Conjugate { residual, iterations: CONJ_MAX_ITER })
    }

    /// `M* = max_{|v|=1} H*(v)`: exact for power laws, sampled on the unit
    /// sphere for callables.
    pub fn m_star(&self, dim: usize, samples: usize, seed: u64) -> Result<f64> {
        match self {
            Hamiltonian::PowerLaw(pl) => Ok(pl.alpha_star()),
            Hamiltonian::Callable(_) => {
                let mut rng = stream_rng(seed, u64::MAX);
                let mut best = f64::NEG_INFINITY;
                for k in 0..dim {
                    for sign in [1.0, -1.0] {
                        let mut e = vec![0.0; dim];
                        e[k] = sign;
                        best = best.max(self.conjugate_value(0.0, &e)?);
                    }
                }
                for _ in 0..samples {
                    let v = random_unit(&mut rng, dim);
                    best = best.max(self.conjugate_value(0.0, &v)?);
                }
                Ok(best)
            }
        }
    }
}

fn check_finite(u: &[f64]) -> Result<()> {
    if u.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain("non-finite state vector".into()))
    }
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&v);
        if r > 1e-12 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}

/// Minimum normalized slack of each duality inequality over the samples.
/// A slack `rhs − lhs` is divided by `max(1, |lhs|, |rhs|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub samples: usize,
    pub alpha: f64,
    pub q: f64,
    pub p: f64,
    pub alpha_star: f64,
    pub m_star: f64,
    /// `(∇H(u), u) − q H(u) ≥ 0`
    pub superquadratic: f64,
    /// `α|u|^q − H(u) ≥ 0`
    pub growth: f64,
    /// `p H*(v) − (∇H*(v), v) ≥ 0`
    pub conjugate_subhomogeneous: f64,
    /// `M*|v|^p − H*(v) ≥ 0` for `|v| ≥ 1`
    pub conjugate_upper: f64,
    /// `H*(v) − α*|v|^p ≥ 0`
    pub conjugate_lower: f64,
    /// Max relative Fenchel–Young defect `|(v,u) − H(u) − H*(v)|` at `v = ∇H(u)`.
    pub fenchel_young: f64,
    /// Max relative round-trip error `|∇H*(∇H(u)) − u| / |u|`.
    pub round_trip: f64,
}

impl DualityReport {
    pub fn min_slack(&self) -> f64 {
        [
            self.superquadratic,
            self.growth,
            self.conjugate_subhomogeneous,
            self.conjugate_upper,
            self.conjugate_lower,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }
}

fn normalized_slack(lhs: f64, rhs: f64) -> f64 {
    (rhs - lhs) / 1f64.max(lhs.abs()).max(rhs.abs())
}

/// Samples `u` and `v` with uniformly random directions and log-uniform
/// radii in `[0.05, 5]` and evaluates every duality inequality.
pub fn check_duality_inequalities(
    hamiltonian: &Hamiltonian,
    dim: usize,
    samples: usize,
    seed: u64,
) -> Result<DualityReport> {
    let cert = hamiltonian
        .certificate()
        .ok_or_else(|| Error::Config("a growth certificate (α, q) is required".into()))?;
    if !(cert.q > 2.0) {
        return Err(Error::Config(format!("duality inequalities need q > 2, got q = {}", cert.q)));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Dimension { expected: 2, got: dim });
    }
    let p = conjugate_exponent(cert.q);
    let a_star = alpha_star(cert.alpha, cert.q);
    let m_star = hamiltonian.m_star(dim, 512, seed)?;
    let mut rng = stream_rng(seed, 0);
    let mut rep = DualityReport {
        samples,
        alpha: cert.alpha,
        q: cert.q,
        p,
        alpha_star: a_star,
        m_star,
        superquadratic: f64::INFINITY,
        growth: f64::INFINITY,
        conjugate_subhomogeneous: f64::INFINITY,
        conjugate_upper: f64::INFINITY,
        conjugate_lower: f64::INFINITY,
        fenchel_young: 0.0,
        round_trip: 0.0,
    };
    let radius = |rng: &mut rand_chacha::ChaCha8Rng| (0.05f64.ln() + rng.gen::<f64>() * 100f64.ln()).exp();
    for _ in 0..samples {
        let r = radius(&mut rng);
        let u: Vec<f64> = random_unit(&mut rng, dim).into_iter().map(|x| r * x).collect();
        let h = hamiltonian.value(0.0, &u)?;
        let gh = hamiltonian.gradient(0.0, &u)?;
        let gu = dot(&gh, &u);
        rep.superquadratic = rep.superquadratic.min(normalized_slack(cert.q * h, gu));
        rep.growth = rep.growth.min(normalized_slack(h, cert.alpha * r.powf(cert.q)));
        let hs = hamiltonian.conjugate_value(0.0, &gh)?;
        let back = hamiltonian.conjugate_gradient(0.0, &gh)?;
        let fy = (gu - h - hs).abs() / 1f64.max(gu.abs());
        rep.fenchel_young = rep.fenchel_young.max(fy);
        let rt = back.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / r;
        rep.round_trip = rep.round_trip.max(rt);

        let s = radius(&mut rng);
        let v: Vec<f64> = random_unit(&mut rng, dim).into_iter().map(|x| s * x).collect();
        let hs = hamiltonian.conjugate_value(0.0, &v)?;
        let gs = hamiltonian.conjugate_gradient(0.0, &v)?;
        let vp = s.powf(p);
        rep.conjugate_subhomogeneous =
            rep.conjugate_subhomogeneous.min(normalized_slack(dot(&gs, &v), p * hs));
        if s >= 1.0 {
            rep.conjugate_upper = rep.conjugate_upper.min(normalized_slack(hs, m_star * vp));
        }
        rep.conjugate_lower = rep.conjugate_lower.min(normalized_slack(a_star * vp, hs));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn j_examples() {
        assert_eq!(apply_j(&[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
        assert!(apply_j(&[1.0, 0.0, 2.0]).is_err());
        assert!(apply_j(&[]).is_err());
    }

    proptest! {
        #[test]
        fn j_squares_to_minus_identity(u in prop::collection::vec(-10.0..10.0f64, 1..4usize)
            .prop_map(|mut v| { let w = v.clone(); v.extend(w.iter().map(|x| x * 0.5)); v })) {
            let ju = apply_j(&u).unwrap();
            let jju = apply_j(&ju).unwrap();
            for (a, b) in jju.iter().zip(&u) {
                prop_assert_eq!(*a, -*b);
            }
            prop_assert!(dot(&ju, &u).abs() <= 1e-12 * (1.0 + dot(&u, &u)));
            prop_assert!((norm(&ju) - norm(&u)).abs() <= 1e-12 * (1.0 + norm(&u)));
            prop_assert!((j_pair(&u, &ju) - dot(&ju, &ju)).abs() <= 1e-9 * (1.0 + dot(&u, &u)));
        }

        #[test]
        fn power_law_is_homogeneous(x in -2.0..2.0f64, y in -2.0..2.0f64, lambda in 0.1..3.0f64) {
            let h = Hamiltonian::example_4_1();
            let u = [x, y];
            let lu = [lambda * x, lambda * y];
            let a = h.value(0.0, &lu).unwrap();
            let b = lambda.powi(10) * h.value(0.0, &u).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn example_values() {
        let h = Hamiltonian::example_4_1();
        let u = [0.6, 0.8];
        assert!((h.value(0.0, &u).unwrap() - 1.0).abs() < 1e-14);
        assert!((norm(&h.gradient(0.0, &u).unwrap()) - 10.0).abs() < 1e-13);
        assert_eq!(h.value(0.0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(h.gradient(0.0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(h.value(0.0, &[2.0, 0.0]).unwrap(), 1024.0);
        assert!(h.value(0.0, &[f64::NAN, 0.0]).is_err());
        assert!(h.gradient(0.0, &[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn alpha_star_of_example() {
        let a = alpha_star(1.0, 10.0);
        assert!((a - 0.9 * 10f64.powf(-1.0 / 9.0)).abs() < 1e-15);
        assert!((0.6955..=0.6975).contains(&a));
        let p = conjugate_exponent(10.0);
        assert!((1.0 / p + 1.0 / 10.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_is_self_dual() {
        let h = Hamiltonian::quadratic();
        let v = [0.3, -1.7];
        assert!((h.conjugate_value(0.0, &v).unwrap() - 0.5 * dot(&v, &v)).abs() < 1e-12);
        let g = h.conjugate_gradient(0.0, &v).unwrap();
        assert!((g[0] - v[0]).abs() < 1e-12 && (g[1] - v[1]).abs() < 1e-12);
        let hess = h.conjugate_hessian(0.0, &v).unwrap();
        assert!((hess[0] - 1.0).abs() < 1e-6 && hess[1].abs() < 1e-6);
    }

    #[test]
    fn zero_hamiltonian_has_no_conjugate() {
        assert!(matches!(
            Hamiltonian::zero().conjugate_value(0.0, &[1.0, 0.0]),
            Err(Error::Conjugate { .. })
        ));
    }

    #[test]
    fn callable_conjugate_matches_closed_form_for_power_law() {
        let pl = PowerLaw::new(1.0, 4.0).unwrap();
        let closed = Hamiltonian::PowerLaw(pl);
        let callable = Hamiltonian::Callable(Callable {
            name: "quartic".into(),
            value: Arc::new(|_, u| dot(u, u).powi(2)),
            gradient: Arc::new(|_, u, g| {
                let s = 4.0 * dot(u, u);
                for (gi, ui) in g.iter_mut().zip(u) {
                    *gi = s * ui;
                }
            }),
            autonomous: true,
            certificate: Some(GrowthCertificate { alpha: 1.0, q: 4.0 }),
        });
        for v in [[0.5, 0.1], [-2.0, 3.0], [0.0, 1e-3]] {
            let a = closed.conjugate_value(0.0, &v).unwrap();
            let b = callable.conjugate_value(0.0, &v).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn power_law_round_trip_and_fd_gradients() {
        let mut rng = stream_rng(4, 0);
        for q in [4.0, 10.0] {
            let h = Hamiltonian::power_law(1.3, q).unwrap();
            for _ in 0..200 {
                let r = 0.2 + 1.5 * rng.gen::<f64>();
                let u: Vec<f64> = random_unit(&mut rng, 4).into_iter().map(|x| r * x).collect();
                let g = h.gradient(0.0, &u).unwrap();
                let back = h.conjugate_gradient(0.0, &g).unwrap();
                for (a, b) in back.iter().zip(&u) {
                    assert!((a - b).abs() <= 1e-8 * r);
                }
                // central differences of H and H*
                let eps = 1e-6;
                for k in 0..4 {
                    let mut up = u.clone();
                    let mut dn = u.clone();
                    up[k] += eps;
                    dn[k] -= eps;
                    let fd = (h.value(0.0, &up).unwrap() - h.value(0.0, &dn).unwrap()) / (2.0 * eps);
                    assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + norm(&g)));
                    let fd = (h.conjugate_value(0.0, &up).unwrap()
                        - h.conjugate_value(0.0, &dn).unwrap())
                        / (2.0 * eps);
                    let gs = h.conjugate_gradient(0.0, &u).unwrap();
                    assert!((fd - gs[k]).abs() <= 1e-6 * (1.0 + norm(&gs)));
                }
            }
        }
    }

    #[test]
    fn conjugate_hessian_matches_fd_of_gradient() {
        let h = Hamiltonian::example_4_1();
        let v = [0.7, -1.9];
        let hess = h.conjugate_hessian(0.0, &v).unwrap();
        let eps = 1e-6;
        for k in 0..2 {
            let mut up = v;
            let mut dn = v;
            up[k] += eps;
            dn[k] -= eps;
            let gp = h.conjugate_gradient(0.0, &up).unwrap();
            let gm = h.conjugate_gradient(0.0, &dn).unwrap();
            for i in 0..2 {
                let fd = (gp[i] - gm[i]) / (2.0 * eps);
                assert!((fd - hess[i * 2 + k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn duality_report_example() {
        let rep = check_duality_inequalities(&Hamiltonian::example_4_1(), 2, 2000, 1).unwrap();
        assert!(rep.superquadratic.abs() < 1e-12, "{}", rep.superquadratic);
        assert!(rep.growth.abs() < 1e-12);
        assert!(rep.conjugate_lower.abs() < 1e-12);
        assert!(rep.conjugate_upper >= -1e-12);
        assert!(rep.min_slack() >= -1e-10);
        assert!(rep.fenchel_young < 1e-8);
        assert_eq!(rep.m_star, rep.alpha_star);
    }

    #[test]
    fn duality_rejects_quadratic() {
        assert!(matches!(
            check_duality_inequalities(&Hamiltonian::quadratic(), 2, 10, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_builds() {
        let c: HamiltonianConfig =
            serde_json::from_str(r#"{"kind":"power_law","alpha":1.0,"q":10.0}"#).unwrap();
        assert!(matches!(c.build().unwrap(), Hamiltonian::PowerLaw(_)));
        let c: HamiltonianConfig =
            serde_json::from_str(r#"{"kind":"builtin","name":"quadratic"}"#).unwrap();
        assert!(matches!(c.build().unwrap(), Hamiltonian::Callable(_)));
        assert!(serde_json::from_str::<HamiltonianConfig>(
            r#"{"kind":"power_law","alpha":1.0,"q":10.0,"extra":1}"#
        )
        .is_err());
        assert!(HamiltonianConfig::PowerLaw { alpha: 1.0, q: 2.0 }.build().is_err());
    }
}
