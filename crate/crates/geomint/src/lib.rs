//! Geometric integrators from discretization maps.
//!
//! `geomint` builds symplectic integrators for Hamiltonian systems on
//! `T*R^n` and presymplectic integrators for optimal control problems by
//! lifting a one-parameter family of discretization maps on `R^n` to the
//! cotangent bundle. The pipeline is:
//!
//! 1. [`expr`] — expression trees with exact symbolic differentiation;
//!    every Hamiltonian, vector field, cost and constraint is an [`expr::Expr`].
//! 2. [`maps`] — θ-family discretization maps, their exact inverses and
//!    their cotangent lifts (which are symplectomorphisms).
//! 3. [`hamiltonian`] — the implicit one-step method obtained by forcing
//!    the lifted-map preimage of `(z_k, z_{k+1})` onto the Hamiltonian
//!    vector field.
//! 4. [`ocp`] — Pontryagin Hamiltonian assembly, the Morse-family rank
//!    test, the constraint (integrability) algorithm for singular
//!    problems, and the presymplectic integrator on the final constraint
//!    manifold.
//! 5. [`diagnostics`] — numerical verification of every preservation
//!    claim: symplecticity, presymplecticity, energy and constraint
//!    drift, convergence order and Lagrangian-subspace criteria.
//!
//! The `geomint` binary ingests problem files (see [`problem`]) and runs
//! the check / simulate / ocp pipelines with CSV output.

pub mod cli;
pub mod diagnostics;
pub mod expr;
pub mod hamiltonian;
pub mod maps;
pub mod numeric;
pub mod ocp;
pub mod problem;

use std::fmt;

/// Crate-wide error type for the mid- and high-level modules.
///
/// The low-level modules keep their own narrow error enums
/// ([`expr::ParseError`], [`expr::EvalError`], [`numeric::LinAlgError`]);
/// everything above them converges here.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Expression text failed to parse.
    Parse(expr::ParseError),
    /// Expression evaluation hit an unbound variable or a domain error.
    Eval(expr::EvalError),
    /// Dense linear algebra failure (singular matrix, dimension mismatch).
    LinAlg(numeric::LinAlgError),
    /// Dimension mismatch at a module boundary.
    Dimension { what: &'static str, expected: usize, got: usize },
    /// An implicit solve did not converge.
    SolverFailed { step: usize, report: numeric::NewtonReport },
    /// The request is outside the supported problem class.
    Scope(String),
    /// A point violates the constraint manifold beyond tolerance.
    OffManifold { residual: f64, tol: f64 },
    /// Problem-file parse or validation failure.
    Problem(problem::ProblemError),
    /// Free variables outside the declared set.
    FreeVariable { name: String, allowed: String },
    /// Anything that is an input mistake rather than a numerical failure.
    Invalid(String),
    /// I/O failure, stringified (keeps the enum `Clone + PartialEq`).
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse(e) => write!(f, "parse error: {e}"),
            Error::Eval(e) => write!(f, "evaluation error: {e}"),
            Error::LinAlg(e) => write!(f, "linear algebra error: {e}"),
            Error::Dimension { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            Error::SolverFailed { step, report } => write!(
                f,
                "solver failed at step {step}: {} iterations, residual {:.3e}",
                report.iterations, report.final_residual_norm
            ),
            Error::Scope(msg) => write!(f, "out of scope: {msg}"),
            Error::OffManifold { residual, tol } => write!(
                f,
                "initial point off the final constraint manifold: |psi| = {residual:.3e} > {tol:.3e}"
            ),
            Error::Problem(e) => write!(f, "{e}"),
            Error::FreeVariable { name, allowed } => {
                write!(f, "variable '{name}' is not in the declared set {{{allowed}}}")
            }
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<expr::ParseError> for Error {
    fn from(e: expr::ParseError) -> Self {
        Error::Parse(e)
    }
}

impl From<expr::EvalError> for Error {
    fn from(e: expr::EvalError) -> Self {
        Error::Eval(e)
    }
}

impl From<numeric::LinAlgError> for Error {
    fn from(e: numeric::LinAlgError) -> Self {
        Error::LinAlg(e)
    }
}

impl From<problem::ProblemError> for Error {
    fn from(e: problem::ProblemError) -> Self {
        Error::Problem(e)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
