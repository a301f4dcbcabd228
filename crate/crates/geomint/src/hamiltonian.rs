//! Hamiltonian systems on `T*R^n` and the symplectic one-step method
//! induced by a lifted discretization map.
//!
//! One step solves, for the unknown endpoint `z_{k+1}`,
//!
//! ```text
//! (1/h) (R_d^{T*})⁻¹(z_k, z_{k+1}) = X_H( base((R_d^{T*})⁻¹(z_k, z_{k+1})) )
//! ```
//!
//! i.e. the lifted-map preimage of the pair of points, scaled by `1/h`,
//! must sit on the Hamiltonian vector field at its own base point. For
//! the θ-family this base point is `q̄ = (1-θ) q_k + θ q_{k+1}`,
//! `p̄ = θ p_k + (1-θ) p_{k+1}`, so θ = 1/2 is the implicit midpoint
//! rule and θ = 0 is the symplectic Euler variant with base
//! `(q_k, p_{k+1})`.

use crate::expr::{self, Binding, Expr};
use crate::maps::LiftedMap;
use crate::numeric::{newton_with, LinAlgError, Mat, NewtonOptions, NewtonReport};
use crate::Error;

/// Canonical position variable name, 1-based: `q1, q2, ...`.
pub fn q_name(i: usize) -> String {
    format!("q{}", i + 1)
}

/// Canonical momentum variable name, 1-based: `p1, p2, ...`.
pub fn p_name(i: usize) -> String {
    format!("p{}", i + 1)
}

/// Canonical control variable name, 1-based: `u1, u2, ...`.
pub fn u_name(i: usize) -> String {
    format!("u{}", i + 1)
}

/// A Hamiltonian `H(q, p)` over the canonical variables `q1..qn`,
/// `p1..pn`, with all first and second partials precomputed
/// symbolically.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    n: usize,
    h: Expr,
    dh_dq: Vec<Expr>,
    dh_dp: Vec<Expr>,
    // second partials, indexed [i][j]
    hqq: Vec<Vec<Expr>>,
    hqp: Vec<Vec<Expr>>,
    hpq: Vec<Vec<Expr>>,
    hpp: Vec<Vec<Expr>>,
}

impl HamiltonianSystem {
    pub fn new(n: usize, h: Expr) -> Result<HamiltonianSystem, Error> {
        if n == 0 {
            return Err(Error::Invalid("state dimension must be positive".into()));
        }
        let allowed: Vec<String> = (0..n).map(q_name).chain((0..n).map(p_name)).collect();
        for name in h.free_variables() {
            if !allowed.contains(&name) {
                return Err(Error::FreeVariable { name, allowed: allowed.join(", ") });
            }
        }
        let dh_dq: Vec<Expr> = (0..n).map(|i| expr::diff(&h, &q_name(i))).collect();
        let dh_dp: Vec<Expr> = (0..n).map(|i| expr::diff(&h, &p_name(i))).collect();
        let second = |firsts: &[Expr], by_q: bool| -> Vec<Vec<Expr>> {
            firsts
                .iter()
                .map(|f| {
                    (0..n)
                        .map(|j| expr::diff(f, &if by_q { q_name(j) } else { p_name(j) }))
                        .collect()
                })
                .collect()
        };
        Ok(HamiltonianSystem {
            n,
            hqq: second(&dh_dq, true),
            hqp: second(&dh_dq, false),
            hpq: second(&dh_dp, true),
            hpp: second(&dh_dp, false),
            h,
            dh_dq,
            dh_dp,
        })
    }

    /// Parse `text` as the Hamiltonian over `q1..qn, p1..pn`.
    pub fn parse(n: usize, text: &str) -> Result<HamiltonianSystem, Error> {
        Ok(HamiltonianSystem::new(n, expr::parse(text)?)?)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn hamiltonian(&self) -> &Expr {
        &self.h
    }

    fn binding(&self, q: &[f64], p: &[f64]) -> Binding {
        let mut b = Binding::new();
        for i in 0..self.n {
            b.set(q_name(i), q[i]);
            b.set(p_name(i), p[i]);
        }
        b
    }

    fn check_dims(&self, q: &[f64], p: &[f64]) -> Result<(), Error> {
        if q.len() != self.n {
            return Err(Error::Dimension { what: "q", expected: self.n, got: q.len() });
        }
        if p.len() != self.n {
            return Err(Error::Dimension { what: "p", expected: self.n, got: p.len() });
        }
        Ok(())
    }

    /// `H(q, p)`.
    pub fn energy(&self, q: &[f64], p: &[f64]) -> Result<f64, Error> {
        self.check_dims(q, p)?;
        Ok(expr::eval(&self.h, &self.binding(q, p))?)
    }

    /// `X_H(q, p) = (∂H/∂p, -∂H/∂q)`.
    pub fn vector_field(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>), Error> {
        self.check_dims(q, p)?;
        let b = self.binding(q, p);
        let qdot = self
            .dh_dp
            .iter()
            .map(|e| expr::eval(e, &b))
            .collect::<Result<Vec<_>, _>>()?;
        let pdot = self
            .dh_dq
            .iter()
            .map(|e| expr::eval(e, &b).map(|v| -v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((qdot, pdot))
    }
}

/// One sample of a discrete trajectory. `u` is empty for plain
/// Hamiltonian flows and carries the per-step controls for OCP runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub u: Vec<f64>,
}

/// A fixed-step discrete trajectory with per-step solver statistics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub h: f64,
    pub samples: Vec<Sample>,
    /// One report per accepted step (`samples.len() - 1` of them).
    pub reports: Vec<NewtonReport>,
}

impl Trajectory {
    pub fn initial(h: f64, q: Vec<f64>, p: Vec<f64>, u: Vec<f64>) -> Trajectory {
        Trajectory { h, samples: vec![Sample { t: 0.0, q, p, u }], reports: Vec::new() }
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory is never empty")
    }
}

/// A failed integration, carrying everything computed so far.
#[derive(Debug, Clone)]
pub struct IntegrateError {
    pub partial: Trajectory,
    pub failed_step: usize,
    pub source: Error,
}

impl std::fmt::Display for IntegrateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "integration failed at step {}: {}", self.failed_step, self.source)
    }
}

impl std::error::Error for IntegrateError {}

/// Solver knobs for the implicit steps.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { tol: 1e-12, max_iter: 50 }
    }
}

fn eval_err(e: Error) -> LinAlgError {
    LinAlgError::Residual(e.to_string())
}

/// One implicit step of the lifted-map method.
///
/// The Newton initial guess is the explicit Euler predictor
/// `z_k + h X_H(z_k)`; the Jacobian is assembled from the symbolic
/// second partials of `H`.
pub fn symplectic_step(
    sys: &HamiltonianSystem,
    lift: &LiftedMap,
    h: f64,
    q_k: &[f64],
    p_k: &[f64],
    opts: &StepOptions,
) -> Result<(Vec<f64>, Vec<f64>, NewtonReport), Error> {
    sys.check_dims(q_k, p_k)?;
    if lift.dim() != sys.dim() {
        return Err(Error::Dimension { what: "lift dimension", expected: sys.dim(), got: lift.dim() });
    }
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {h}")));
    }
    let n = sys.dim();
    let theta = lift.theta();

    let residual = |z: &[f64]| -> Result<Vec<f64>, LinAlgError> {
        let (qb, pb, qdot, pdot) = lift
            .invert(q_k, p_k, &z[..n], &z[n..])
            .map_err(eval_err)?;
        let (fq, fp) = sys.vector_field(&qb, &pb).map_err(eval_err)?;
        let mut r = Vec::with_capacity(2 * n);
        for i in 0..n {
            r.push(qdot[i] / h - fq[i]);
        }
        for i in 0..n {
            r.push(pdot[i] / h - fp[i]);
        }
        Ok(r)
    };

    let jacobian = |z: &[f64]| -> Result<Mat, LinAlgError> {
        let (qb, pb, _, _) = lift
            .invert(q_k, p_k, &z[..n], &z[n..])
            .map_err(eval_err)?;
        let b = sys.binding(&qb, &pb);
        let ev = |e: &Expr| expr::eval(e, &b).map_err(|err| eval_err(err.into()));
        let mut jac = Mat::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                // d/dq'_j of q̇_i/h - H_p_i(q̄, p̄)
                let mut v = -theta * ev(&sys.hpq[i][j])?;
                if i == j {
                    v += 1.0 / h;
                }
                jac.set(i, j, v);
                // d/dp'_j of the same row
                jac.set(i, n + j, -(1.0 - theta) * ev(&sys.hpp[i][j])?);
                // d/dq'_j of ṗ_i/h + H_q_i(q̄, p̄)
                jac.set(n + i, j, theta * ev(&sys.hqq[i][j])?);
                // d/dp'_j of the same row
                let mut w = (1.0 - theta) * ev(&sys.hqp[i][j])?;
                if i == j {
                    w += 1.0 / h;
                }
                jac.set(n + i, n + j, w);
            }
        }
        Ok(jac)
    };

    // explicit Euler predictor
    let (fq, fp) = sys.vector_field(q_k, p_k)?;
    let mut guess = Vec::with_capacity(2 * n);
    guess.extend(q_k.iter().zip(&fq).map(|(x, d)| x + h * d));
    guess.extend(p_k.iter().zip(&fp).map(|(x, d)| x + h * d));

    let nopts = NewtonOptions { tol: opts.tol, max_iter: opts.max_iter, ..NewtonOptions::default() };
    let (z, report) = newton_with(residual, Some(jacobian), &guess, &nopts)?;
    if !report.converged {
        return Err(Error::SolverFailed { step: 0, report });
    }
    Ok((z[..n].to_vec(), z[n..].to_vec(), report))
}

/// Iterate [`symplectic_step`] for `steps` steps from `(q0, p0)`.
///
/// Fixed step size throughout; the first solver failure aborts the run
/// and hands back the partial trajectory with the failing index.
pub fn integrate(
    sys: &HamiltonianSystem,
    lift: &LiftedMap,
    h: f64,
    steps: usize,
    q0: &[f64],
    p0: &[f64],
    opts: &StepOptions,
) -> Result<Trajectory, IntegrateError> {
    let mut traj = Trajectory::initial(h, q0.to_vec(), p0.to_vec(), Vec::new());
    for k in 0..steps {
        let (q, p) = {
            let last = traj.last();
            (last.q.clone(), last.p.clone())
        };
        match symplectic_step(sys, lift, h, &q, &p, opts) {
            Ok((qn, pn, report)) => {
                traj.reports.push(report);
                traj.samples.push(Sample { t: (k + 1) as f64 * h, q: qn, p: pn, u: Vec::new() });
            }
            Err(source) => {
                let source = match source {
                    Error::SolverFailed { report, .. } => Error::SolverFailed { step: k, report },
                    other => other,
                };
                return Err(IntegrateError { partial: traj, failed_step: k, source });
            }
        }
    }
    Ok(traj)
}

/// Reference non-geometric steppers, used as negative controls in the
/// diagnostics and tests.
pub fn rk1_step(sys: &HamiltonianSystem, h: f64, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let (fq, fp) = sys.vector_field(q, p)?;
    Ok((
        q.iter().zip(&fq).map(|(x, d)| x + h * d).collect(),
        p.iter().zip(&fp).map(|(x, d)| x + h * d).collect(),
    ))
}

pub fn rk4_step(sys: &HamiltonianSystem, h: f64, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let n = q.len();
    let f = |q: &[f64], p: &[f64]| sys.vector_field(q, p);
    let shift = |q: &[f64], p: &[f64], kq: &[f64], kp: &[f64], s: f64| -> (Vec<f64>, Vec<f64>) {
        (
            q.iter().zip(kq).map(|(x, d)| x + s * d).collect(),
            p.iter().zip(kp).map(|(x, d)| x + s * d).collect(),
        )
    };
    let (k1q, k1p) = f(q, p)?;
    let (q2, p2) = shift(q, p, &k1q, &k1p, h / 2.0);
    let (k2q, k2p) = f(&q2, &p2)?;
    let (q3, p3) = shift(q, p, &k2q, &k2p, h / 2.0);
    let (k3q, k3p) = f(&q3, &p3)?;
    let (q4, p4) = shift(q, p, &k3q, &k3p, h);
    let (k4q, k4p) = f(&q4, &p4)?;
    let mut qn = Vec::with_capacity(n);
    let mut pn = Vec::with_capacity(n);
    for i in 0..n {
        qn.push(q[i] + h * (k1q[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]) / 6.0);
        pn.push(p[i] + h * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]) / 6.0);
    }
    Ok((qn, pn))
}
