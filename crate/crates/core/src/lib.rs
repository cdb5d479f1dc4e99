//! Numerical toolkit for first-order Hamiltonian systems driven by random
//! impulses under Dirichlet boundary conditions.
//!
//! The crate is organised bottom-up:
//!
//! * [`impulse`]: sample orbits of the impulse process, the counting process,
//!   and the expected jump mass `B`.
//! * [`hamiltonian`]: Hamiltonians, the symplectic matrix `J`, and the
//!   Legendre transform `H*`.
//! * [`flow`]: adaptive integration of `u' = J∇H(t,u)` between impulses.
//! * [`space`]: discretized stochastic processes, the `PC`/`PC₁` norms and the
//!   embedding constant `K`.
//! * [`dual`]: the energy functional `φ`, the dual action `χ` and its
//!   derivative.
//! * [`critical`]: hypothesis checks, mountain-pass geometry and the
//!   numerical mountain-pass search.
//! * [`verification`]: residuals of recovered solutions and pairing batteries.
//! * [`scenario`]: the scenario configuration schema and builtin scenarios.

pub mod critical;
pub mod dual;
pub mod error;
pub mod flow;
pub mod hamiltonian;
pub mod impulse;
pub mod numeric;
pub mod scenario;
pub mod space;
pub mod verification;

pub use error::{Error, Result};
