//! Optimal control problems under the Pontryagin Hamiltonian framework:
//! Morse-family rank test, regular/singular classification, the
//! integrability (constraint) algorithm, and the presymplectic
//! integrator on the final constraint manifold.
//!
//! State variables are `q1..qn`, costates `p1..pn`, controls `u1..um`.
//! The Pontryagin Hamiltonian is `H(q, p, u) = <p, X(q, u)> - F(q, u)`.
//!
//! The constraint algorithm ships for Hamiltonians that are
//! affine-quadratic in the controls with a *constant* control Hessian
//! `A = ∂²H/∂u²` (verified symbolically); this covers control-affine
//! dynamics with quadratic cost. Anything else is refused with a scope
//! error rather than silently mishandled.

use crate::expr::{self, Binding, Expr};
use crate::hamiltonian::{p_name, q_name, u_name, Sample, Trajectory};
use crate::maps::LiftedMap;
use crate::numeric::{
    self, newton_with, LinAlgError, Mat, NewtonOptions, NewtonReport, RankResult,
};
use crate::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// An optimal control problem: dynamics `q̇ = X(q, u)` and running cost
/// `F(q, u)` over `q1..qn`, `u1..um`.
#[derive(Debug, Clone)]
pub struct OcpDefinition {
    pub n: usize,
    pub m: usize,
    pub dynamics: Vec<Expr>,
    pub cost: Expr,
}

impl OcpDefinition {
    pub fn new(n: usize, m: usize, dynamics: Vec<Expr>, cost: Expr) -> Result<OcpDefinition, Error> {
        if n == 0 || m == 0 {
            return Err(Error::Invalid("need n >= 1 states and m >= 1 controls".into()));
        }
        if dynamics.len() != n {
            return Err(Error::Dimension { what: "dynamics", expected: n, got: dynamics.len() });
        }
        let allowed: Vec<String> = (0..n).map(q_name).chain((0..m).map(u_name)).collect();
        for e in dynamics.iter().chain(std::iter::once(&cost)) {
            for name in e.free_variables() {
                if !allowed.contains(&name) {
                    return Err(Error::FreeVariable { name, allowed: allowed.join(", ") });
                }
            }
        }
        Ok(OcpDefinition { n, m, dynamics, cost })
    }
}

/// Pontryagin Hamiltonian with all first and second partials cached.
#[derive(Debug, Clone)]
pub struct PontryaginSystem {
    pub n: usize,
    pub m: usize,
    h: Expr,
    dh_dq: Vec<Expr>,
    dh_dp: Vec<Expr>,
    dh_du: Vec<Expr>,
    /// Second partials of `H`: `d2[i][j] = ∂²H/∂v_i∂v_j` over the
    /// stacked variables `v = (q1..qn, p1..pn, u1..um)`.
    d2: Vec<Vec<Expr>>,
    var_names: Vec<String>,
}

/// `H(q, p, u) = <p, X(q, u)> - F(q, u)`, assembled symbolically.
pub fn build_pontryagin(ocp: &OcpDefinition) -> PontryaginSystem {
    let n = ocp.n;
    let m = ocp.m;
    let mut h = Expr::constant(0.0);
    for (i, xi) in ocp.dynamics.iter().enumerate() {
        h = Expr::add(h, Expr::mul(Expr::variable(p_name(i)), xi.clone()));
    }
    h = Expr::sub(h, ocp.cost.clone());

    let var_names: Vec<String> = (0..n)
        .map(q_name)
        .chain((0..n).map(p_name))
        .chain((0..m).map(u_name))
        .collect();
    let firsts: Vec<Expr> = var_names.iter().map(|v| expr::diff(&h, v)).collect();
    let d2: Vec<Vec<Expr>> = firsts
        .iter()
        .map(|f| var_names.iter().map(|v| expr::diff(f, v)).collect())
        .collect();
    PontryaginSystem {
        n,
        m,
        dh_dq: firsts[..n].to_vec(),
        dh_dp: firsts[n..2 * n].to_vec(),
        dh_du: firsts[2 * n..].to_vec(),
        d2,
        h,
        var_names,
    }
}

impl PontryaginSystem {
    pub fn hamiltonian(&self) -> &Expr {
        &self.h
    }

    pub fn dh_du(&self) -> &[Expr] {
        &self.dh_du
    }

    pub fn dh_dq(&self) -> &[Expr] {
        &self.dh_dq
    }

    pub fn dh_dp(&self) -> &[Expr] {
        &self.dh_dp
    }

    fn binding(&self, q: &[f64], p: &[f64], u: &[f64]) -> Binding {
        let mut b = Binding::new();
        for i in 0..self.n {
            b.set(q_name(i), q[i]);
            b.set(p_name(i), p[i]);
        }
        for a in 0..self.m {
            b.set(u_name(a), u[a]);
        }
        b
    }

    fn binding_stacked(&self, v: &[f64]) -> Binding {
        let mut b = Binding::new();
        for (name, value) in self.var_names.iter().zip(v) {
            b.set(name.clone(), *value);
        }
        b
    }

    /// `∂H/∂u` evaluated at a stacked point `(q, p, u)`.
    pub fn optimality_residual(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        let b = self.binding_stacked(v);
        Ok(self
            .dh_du
            .iter()
            .map(|e| expr::eval(e, &b))
            .collect::<Result<Vec<_>, _>>()?)
    }

    /// The `m x (2n+m)` Jacobian of `∂H/∂u` over `(q, p, u)`, evaluated.
    fn optimality_jacobian(&self, v: &[f64]) -> Result<Mat, Error> {
        let b = self.binding_stacked(v);
        let dim = 2 * self.n + self.m;
        let mut out = Mat::zeros(self.m, dim);
        for a in 0..self.m {
            for j in 0..dim {
                out.set(a, j, expr::eval(&self.d2[2 * self.n + a][j], &b)?);
            }
        }
        Ok(out)
    }

    /// The `m x m` control Hessian `∂²H/∂u²`, evaluated.
    fn control_hessian(&self, v: &[f64]) -> Result<Mat, Error> {
        let b = self.binding_stacked(v);
        let mut out = Mat::zeros(self.m, self.m);
        for a in 0..self.m {
            for c in 0..self.m {
                out.set(a, c, expr::eval(&self.d2[2 * self.n + a][2 * self.n + c], &b)?);
            }
        }
        Ok(out)
    }

    /// Numerical rank of `∂²H/∂u²` at a stacked `(q, p, u)` point.
    pub fn control_hessian_rank(&self, v: &[f64], rank_tol: f64) -> Result<usize, Error> {
        Ok(numeric::rank(&self.control_hessian(v)?, rank_tol).rank)
    }
}

/// Outcome of the Morse-family rank test at projected sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct MorseReport {
    pub is_morse_at_samples: bool,
    pub min_rank: usize,
    pub samples_checked: usize,
}

/// Evaluate the Morse-family criterion: the Jacobian of `∂H/∂u` over
/// `(q, p, u)` must have rank `m` wherever `∂H/∂u = 0`.
///
/// Samples are stacked `(q, p, u)` points; each is first pushed onto the
/// fiber-critical set by a Newton solve in `u` alone. Samples whose
/// optimality residual cannot be brought below `1e-8` are skipped; if
/// none survive, that is an error.
pub fn morse_family_check(
    sys: &PontryaginSystem,
    samples: &[Vec<f64>],
    rank_tol: f64,
) -> Result<MorseReport, Error> {
    let dim = 2 * sys.n + sys.m;
    let mut min_rank = usize::MAX;
    let mut checked = 0;
    for sample in samples {
        if sample.len() != dim {
            return Err(Error::Dimension { what: "morse sample", expected: dim, got: sample.len() });
        }
        let Some(point) = project_controls(sys, sample)? else {
            continue;
        };
        let jac = sys.optimality_jacobian(&point)?;
        let r = numeric::rank(&jac, rank_tol).rank;
        min_rank = min_rank.min(r);
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::Invalid(
            "no sample satisfies the fiber-critical condition dH/du = 0 and projection failed".into(),
        ));
    }
    Ok(MorseReport { is_morse_at_samples: min_rank == sys.m, min_rank, samples_checked: checked })
}

/// Newton solve for `u` at fixed `(q, p)`: returns the stacked point on
/// the fiber-critical set, or `None` if it cannot be reached.
fn project_controls(sys: &PontryaginSystem, sample: &[f64]) -> Result<Option<Vec<f64>>, Error> {
    let start = 2 * sys.n;
    let residual = |u: &[f64]| -> Result<Vec<f64>, LinAlgError> {
        let mut v = sample.to_vec();
        v[start..].copy_from_slice(u);
        sys.optimality_residual(&v).map_err(|e| LinAlgError::Residual(e.to_string()))
    };
    let opts = NewtonOptions { tol: 1e-10, max_iter: 40, least_squares: true, ..NewtonOptions::default() };
    let (u, report) =
        newton_with(residual, None::<fn(&[f64]) -> Result<Mat, LinAlgError>>, &sample[start..], &opts)?;
    if report.final_residual_norm > 1e-8 {
        return Ok(None);
    }
    let mut v = sample.to_vec();
    v[start..].copy_from_slice(&u);
    Ok(Some(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularity {
    Regular,
    Singular,
}

/// Regular iff `∂²H/∂u²` has numerical rank `m` at every sample
/// (stacked `(q, p, u)` points).
pub fn classify_regularity(
    sys: &PontryaginSystem,
    samples: &[Vec<f64>],
    rank_tol: f64,
) -> Result<Regularity, Error> {
    for sample in samples {
        let hess = sys.control_hessian(sample)?;
        if numeric::rank(&hess, rank_tol).rank < sys.m {
            return Ok(Regularity::Singular);
        }
    }
    Ok(Regularity::Regular)
}

/// A control index solved from the optimality conditions, with the
/// algorithm level at which it became determined.
#[derive(Debug, Clone)]
pub struct DeterminedControl {
    pub index: usize,
    pub level: usize,
    /// Closed form `u_index = g(q, p)`.
    pub expr: Expr,
}

/// A state constraint `psi(q, p) = 0` with the level it appeared at.
#[derive(Debug, Clone)]
pub struct StateConstraint {
    pub expr: Expr,
    pub level: usize,
}

/// Options for [`constraint_algorithm`].
#[derive(Debug, Clone)]
pub struct ConstraintOptions {
    /// Witness points in `(q, p)`; random draws when `None`.
    pub witness_points: Option<Vec<Vec<f64>>>,
    pub witness_count: usize,
    pub seed: u64,
    pub rank_tol: f64,
}

impl Default for ConstraintOptions {
    fn default() -> Self {
        ConstraintOptions {
            witness_points: None,
            witness_count: 32,
            seed: 0,
            rank_tol: numeric::DEFAULT_RANK_TOL,
        }
    }
}

/// Output of the constraint (integrability) algorithm.
#[derive(Debug, Clone)]
pub struct ConstraintResult {
    pub n: usize,
    pub m: usize,
    pub determined: Vec<DeterminedControl>,
    /// Control indices left undetermined (kernel / gauge directions).
    pub gauge: Vec<usize>,
    pub constraints: Vec<StateConstraint>,
    /// First pass that added nothing new (0 when the level-0 split
    /// already yields no constraints and no gauge directions).
    pub stabilized_at: usize,
    /// `dim P^f = 2n - #constraints`.
    pub dim_final: usize,
    /// Indices into `(q1..qn, p1..pn)` of the local coordinates on the
    /// final constraint manifold.
    pub free_coords: Vec<usize>,
    /// Matrix of the presymplectic form `omega_f` in those coordinates.
    pub omega_f: Mat,
    pub omega_f_kernel: Vec<Vec<f64>>,
    pub omega_f_kernel_dim: usize,
    /// Witness points projected onto the final constraint set.
    pub witness: Vec<Vec<f64>>,
}

impl ConstraintResult {
    /// Human-readable name of the phase-space coordinate `idx`
    /// (`0..n` are `q`, `n..2n` are `p`).
    pub fn coord_name(&self, idx: usize) -> String {
        if idx < self.n {
            q_name(idx)
        } else {
            p_name(idx - self.n)
        }
    }

    /// Names of coordinate directions spanning `ker omega_f`, where a
    /// kernel basis vector aligns with a single free coordinate;
    /// non-axis vectors are reported as `mixed`.
    pub fn kernel_coordinate_names(&self) -> Vec<String> {
        self.omega_f_kernel
            .iter()
            .map(|v| {
                let nonzero: Vec<usize> = v
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| x.abs() > 1e-9)
                    .map(|(j, _)| j)
                    .collect();
                if nonzero.len() == 1 {
                    self.coord_name(self.free_coords[nonzero[0]])
                } else {
                    "mixed".to_string()
                }
            })
            .collect()
    }

    /// Max `|psi(q, p)|` over the final constraints.
    pub fn constraint_residual(&self, q: &[f64], p: &[f64]) -> Result<f64, Error> {
        let mut b = Binding::new();
        for i in 0..self.n {
            b.set(q_name(i), q[i]);
            b.set(p_name(i), p[i]);
        }
        let mut worst = 0.0f64;
        for c in &self.constraints {
            worst = worst.max(expr::eval(&c.expr, &b)?.abs());
        }
        Ok(worst)
    }

    /// Project `(q, p)` onto the constraint set by a damped Newton solve.
    pub fn project(&self, q: &[f64], p: &[f64], tol: f64) -> Result<(Vec<f64>, Vec<f64>), Error> {
        if self.constraints.is_empty() {
            return Ok((q.to_vec(), p.to_vec()));
        }
        let z0: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
        let z = project_onto(&self.constraints, self.n, &z0, tol)?;
        Ok((z[..self.n].to_vec(), z[self.n..].to_vec()))
    }

    /// Project a stacked `(q, p)` point onto the constraint set by
    /// solving for the pivot coordinates only; the free (local)
    /// coordinates stay exactly where they are. This is the projection
    /// that realizes the local chart of the final manifold.
    pub fn project_pivots(&self, z: &[f64], tol: f64) -> Result<Vec<f64>, Error> {
        if self.constraints.is_empty() {
            return Ok(z.to_vec());
        }
        let n = self.n;
        if z.len() != 2 * n {
            return Err(Error::Dimension { what: "phase-space point", expected: 2 * n, got: z.len() });
        }
        let pivots: Vec<usize> = (0..2 * n).filter(|c| !self.free_coords.contains(c)).collect();
        let base = z.to_vec();
        let residual = |pv: &[f64]| -> Result<Vec<f64>, LinAlgError> {
            let mut w = base.clone();
            for (i, &c) in pivots.iter().enumerate() {
                w[c] = pv[i];
            }
            let mut b = Binding::new();
            for i in 0..n {
                b.set(q_name(i), w[i]);
                b.set(p_name(i), w[n + i]);
            }
            self.constraints
                .iter()
                .map(|c| expr::eval(&c.expr, &b))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| LinAlgError::Residual(e.to_string()))
        };
        let pv0: Vec<f64> = pivots.iter().map(|&c| z[c]).collect();
        let opts = NewtonOptions { tol, max_iter: 40, ..NewtonOptions::default() };
        let (pv, report) =
            newton_with(residual, None::<fn(&[f64]) -> Result<Mat, LinAlgError>>, &pv0, &opts)?;
        if !report.converged {
            return Err(Error::SolverFailed { step: 0, report });
        }
        let mut out = z.to_vec();
        for (i, &c) in pivots.iter().enumerate() {
            out[c] = pv[i];
        }
        Ok(out)
    }
}

fn project_onto(constraints: &[StateConstraint], n: usize, z0: &[f64], tol: f64) -> Result<Vec<f64>, Error> {
    let residual = |z: &[f64]| -> Result<Vec<f64>, LinAlgError> {
        let mut b = Binding::new();
        for i in 0..n {
            b.set(q_name(i), z[i]);
            b.set(p_name(i), z[n + i]);
        }
        constraints
            .iter()
            .map(|c| expr::eval(&c.expr, &b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| LinAlgError::Residual(e.to_string()))
    };
    let opts = NewtonOptions { tol, max_iter: 40, least_squares: true, ..NewtonOptions::default() };
    let (z, report) = newton_with(residual, None::<fn(&[f64]) -> Result<Mat, LinAlgError>>, z0, &opts)?;
    if !report.converged {
        return Err(Error::SolverFailed { step: 0, report });
    }
    Ok(z)
}

/// Substitute the determined controls into an expression; gauge
/// controls stay symbolic.
fn substitute_determined(e: &Expr, determined: &[DeterminedControl]) -> Expr {
    let mut out = e.clone();
    for d in determined {
        out = expr::substitute(&out, &u_name(d.index), &d.expr);
    }
    out
}

/// Run the integrability algorithm on the class with constant control
/// Hessian.
///
/// Level 0 splits `∂H/∂u = A u + b(q, p)`: pivot columns of `A` give
/// controls solved as `u = -A_r^{-1} b_r`, zero columns give gauge
/// directions and level-0 constraints `psi = b_g`. Each later pass
/// differentiates every constraint along the substituted dynamics; a
/// derivative that involves a gauge control determines that control,
/// one that does not is kept as a new constraint exactly when its
/// gradient enlarges the constraint Jacobian rank at the witness points.
pub fn constraint_algorithm(
    sys: &PontryaginSystem,
    opts: &ConstraintOptions,
) -> Result<ConstraintResult, Error> {
    let n = sys.n;
    let m = sys.m;
    let rank_tol = opts.rank_tol;

    // -- scope gate: A = d2H/du2 must be constant, checked symbolically
    let mut a = Mat::zeros(m, m);
    let zero_binding = sys.binding_stacked(&vec![0.0; 2 * n + m]);
    for i in 0..m {
        for j in 0..m {
            let entry = &sys.d2[2 * n + i][2 * n + j];
            for var in entry.free_variables() {
                if !expr::diff(entry, &var).is_zero() {
                    return Err(Error::Scope(format!(
                        "d2H/du{}du{} depends on '{var}'; the constraint algorithm requires a constant control Hessian",
                        i + 1,
                        j + 1
                    )));
                }
            }
            a.set(i, j, expr::eval(entry, &zero_binding)?);
        }
    }

    // -- level 0: split determined / gauge directions
    let a_rank = numeric::rank(&a, rank_tol);
    let mut det_idx: Vec<usize> = a_rank.pivot_cols.clone();
    det_idx.sort_unstable();
    let gauge_idx: Vec<usize> = (0..m).filter(|i| !det_idx.contains(i)).collect();
    let a_scale = a.max_abs().max(1.0);
    for &g in &gauge_idx {
        for i in 0..m {
            if a.get(i, g).abs() > rank_tol * a_scale {
                return Err(Error::Scope(format!(
                    "control Hessian couples gauge direction u{} to the determined block; no coordinate-aligned split exists",
                    g + 1
                )));
            }
        }
    }

    // b(q, p) = dH/du with u := 0
    let b_exprs: Vec<Expr> = sys
        .dh_du
        .iter()
        .map(|e| {
            let mut out = e.clone();
            for aidx in 0..m {
                out = expr::substitute(&out, &u_name(aidx), &Expr::constant(0.0));
            }
            out
        })
        .collect();

    let mut determined: Vec<DeterminedControl> = Vec::new();
    if !det_idx.is_empty() {
        let r = det_idx.len();
        let a_dd = Mat::from_fn(r, r, |i, j| a.get(det_idx[i], det_idx[j]));
        // invert the regular block column by column
        let mut inv = Mat::zeros(r, r);
        for j in 0..r {
            let mut e = vec![0.0; r];
            e[j] = 1.0;
            let col = numeric::lu_solve(&a_dd, &e)?;
            for i in 0..r {
                inv.set(i, j, col[i]);
            }
        }
        for i in 0..r {
            let mut g = Expr::constant(0.0);
            for j in 0..r {
                g = Expr::add(g, Expr::mul(Expr::constant(-inv.get(i, j)), b_exprs[det_idx[j]].clone()));
            }
            determined.push(DeterminedControl { index: det_idx[i], level: 0, expr: g });
        }
    }

    let mut constraints: Vec<StateConstraint> = Vec::new();
    let mut gauge: Vec<usize> = gauge_idx.clone();

    // base draws for witness points, re-projected at every level
    let base_draws: Vec<Vec<f64>> = match &opts.witness_points {
        Some(points) => {
            for pt in points {
                if pt.len() != 2 * n {
                    return Err(Error::Dimension { what: "witness point", expected: 2 * n, got: pt.len() });
                }
            }
            points.clone()
        }
        None => {
            let mut rng = StdRng::seed_from_u64(opts.seed);
            (0..opts.witness_count)
                .map(|_| (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect()
        }
    };

    let project_witnesses = |constraints: &[StateConstraint]| -> Result<Vec<Vec<f64>>, Error> {
        if constraints.is_empty() {
            return Ok(base_draws.clone());
        }
        let mut out = Vec::new();
        for draw in &base_draws {
            if let Ok(z) = project_onto(constraints, n, draw, 1e-10) {
                out.push(z);
            }
        }
        if out.is_empty() {
            return Err(Error::Invalid(
                "no witness point projects onto the constraint set; the final set is possibly empty".into(),
            ));
        }
        Ok(out)
    };

    // gradient rows of the constraints w.r.t. (q, p) at a point
    let constraint_jacobian = |constraints: &[StateConstraint], z: &[f64]| -> Result<Mat, Error> {
        let mut b = Binding::new();
        for i in 0..n {
            b.set(q_name(i), z[i]);
            b.set(p_name(i), z[n + i]);
        }
        let mut mat = Mat::zeros(constraints.len(), 2 * n);
        for (c, cons) in constraints.iter().enumerate() {
            for j in 0..n {
                mat.set(c, j, expr::eval(&expr::diff(&cons.expr, &q_name(j)), &b)?);
                mat.set(c, n + j, expr::eval(&expr::diff(&cons.expr, &p_name(j)), &b)?);
            }
        }
        Ok(mat)
    };

    // does `candidate` enlarge the constraint Jacobian rank anywhere?
    let enlarges_rank = |constraints: &[StateConstraint],
                         candidate: &Expr,
                         witnesses: &[Vec<f64>]|
     -> Result<bool, Error> {
        let mut with = constraints.to_vec();
        with.push(StateConstraint { expr: candidate.clone(), level: 0 });
        for w in witnesses {
            let before = if constraints.is_empty() {
                0
            } else {
                numeric::rank(&constraint_jacobian(constraints, w)?, rank_tol).rank
            };
            let after = numeric::rank(&constraint_jacobian(&with, w)?, rank_tol).rank;
            if after > before {
                return Ok(true);
            }
        }
        Ok(false)
    };

    // level-0 constraints from the gauge rows of dH/du
    for &g in &gauge_idx {
        let psi = b_exprs[g].clone();
        if psi.is_zero() {
            continue;
        }
        if enlarges_rank(&constraints, &psi, &base_draws)? {
            constraints.push(StateConstraint { expr: psi, level: 0 });
        }
    }

    // -- iterate tangency passes; stabilized_at is the first quiet pass
    let max_passes = 2 * n + m + 2;
    let mut stabilized_at = 0;
    if !constraints.is_empty() {
        for pass in 1..=max_passes {
            let witnesses = project_witnesses(&constraints)?;
            let mut changed = false;

            // tangency conditions of the set as of pass start; anything
            // added during the pass waits for the next one
            let pass_len = constraints.len();
            let mut idx = 0;
            while idx < pass_len {
                // substituted dynamics as of the current determination set
                let f_q: Vec<Expr> = sys
                    .dh_dp
                    .iter()
                    .map(|e| substitute_determined(e, &determined))
                    .collect();
                let f_p: Vec<Expr> = sys
                    .dh_dq
                    .iter()
                    .map(|e| Expr::neg(substitute_determined(e, &determined)))
                    .collect();

                let psi = constraints[idx].expr.clone();
                let mut psi_dot = Expr::constant(0.0);
                for i in 0..n {
                    psi_dot = Expr::add(psi_dot, Expr::mul(expr::diff(&psi, &q_name(i)), f_q[i].clone()));
                    psi_dot = Expr::add(psi_dot, Expr::mul(expr::diff(&psi, &p_name(i)), f_p[i].clone()));
                }
                idx += 1;
                if psi_dot.is_zero() {
                    continue;
                }

                // gauge controls appearing in the derivative
                let mut involved: Vec<(usize, Expr)> = Vec::new();
                for &g in &gauge {
                    let coeff = expr::diff(&psi_dot, &u_name(g));
                    if coeff.is_zero() {
                        continue;
                    }
                    let mut max_coeff = 0.0f64;
                    for w in &witnesses {
                        let mut b = Binding::new();
                        for i in 0..n {
                            b.set(q_name(i), w[i]);
                            b.set(p_name(i), w[n + i]);
                        }
                        for &g2 in &gauge {
                            b.set(u_name(g2), 0.0);
                        }
                        max_coeff = max_coeff.max(expr::eval(&coeff, &b)?.abs());
                    }
                    if max_coeff > rank_tol {
                        involved.push((g, coeff));
                    }
                }

                if involved.len() > 1 {
                    return Err(Error::Scope(format!(
                        "tangency of a constraint involves {} gauge controls at once; this class is not supported",
                        involved.len()
                    )));
                }
                if let Some((g, coeff)) = involved.into_iter().next() {
                    // solve psi_dot = 0 for u_g
                    let rest = expr::substitute(&psi_dot, &u_name(g), &Expr::constant(0.0));
                    let solved = Expr::neg(Expr::div(rest, coeff));
                    for name in solved.free_variables() {
                        let is_gauge = name
                            .strip_prefix('u')
                            .and_then(|s| s.parse::<usize>().ok())
                            .map(|k| gauge.contains(&(k - 1)))
                            .unwrap_or(false);
                        if is_gauge {
                            return Err(Error::Scope(
                                "a determined control would depend on another gauge control".into(),
                            ));
                        }
                    }
                    determined.push(DeterminedControl { index: g, level: pass, expr: solved });
                    gauge.retain(|&x| x != g);
                    changed = true;
                    continue;
                }

                // candidate new constraint: bind leftover gauge symbols to 0
                let mut candidate = psi_dot;
                for &g in &gauge {
                    candidate = expr::substitute(&candidate, &u_name(g), &Expr::constant(0.0));
                }
                if candidate.is_zero() {
                    continue;
                }
                if enlarges_rank(&constraints, &candidate, &witnesses)? {
                    constraints.push(StateConstraint { expr: candidate, level: pass });
                    changed = true;
                }
            }

            if !changed {
                stabilized_at = pass;
                break;
            }
            if pass == max_passes {
                return Err(Error::Scope("constraint algorithm did not stabilize".into()));
            }
        }
    }

    // -- final geometry: free coordinates, omega_f and its kernel
    let witness = project_witnesses(&constraints)?;
    let k = constraints.len();
    let (free_coords, tangent) = if k == 0 {
        ((0..2 * n).collect::<Vec<usize>>(), Mat::identity(2 * n))
    } else {
        let g = constraint_jacobian(&constraints, &witness[0])?;
        let gr: RankResult = numeric::rank(&g, rank_tol);
        if gr.rank < k {
            return Err(Error::Invalid(format!(
                "final constraint gradients are rank deficient ({} < {k}) at the witness point",
                gr.rank
            )));
        }
        let mut pivots = gr.pivot_cols.clone();
        pivots.sort_unstable();
        let free: Vec<usize> = (0..2 * n).filter(|c| !pivots.contains(c)).collect();
        // tangent vector for each free coordinate: t[free_j] = 1, pivot
        // components solve G t = 0
        let gp = Mat::from_fn(k, k, |i, j| g.get(i, pivots[j]));
        let mut t = Mat::zeros(2 * n, free.len());
        for (col, &fc) in free.iter().enumerate() {
            let rhs: Vec<f64> = (0..k).map(|i| -g.get(i, fc)).collect();
            let sol = numeric::lu_solve(&gp, &rhs)?;
            t.set(fc, col, 1.0);
            for (i, &pc) in pivots.iter().enumerate() {
                t.set(pc, col, sol[i]);
            }
        }
        (free, t)
    };

    let j_canonical = canonical_two_form(n);
    let raw = tangent.transpose().matmul(&j_canonical).matmul(&tangent);
    // antisymmetrize exactly (fp summation order can leave a stray ulp)
    let omega_f = Mat::from_fn(raw.rows(), raw.cols(), |i, j| 0.5 * (raw.get(i, j) - raw.get(j, i)));
    let kr = numeric::rank(&omega_f, rank_tol);

    Ok(ConstraintResult {
        n,
        m,
        determined,
        gauge,
        constraints,
        stabilized_at,
        dim_final: 2 * n - k,
        free_coords,
        omega_f_kernel_dim: kr.kernel.len(),
        omega_f_kernel: kr.kernel,
        omega_f,
        witness,
    })
}

/// Matrix of the canonical symplectic form `dq ∧ dp` on
/// `(q1..qn, p1..pn)`.
pub fn canonical_two_form(n: usize) -> Mat {
    let mut j = Mat::zeros(2 * n, 2 * n);
    for i in 0..n {
        j.set(i, n + i, 1.0);
        j.set(n + i, i, -1.0);
    }
    j
}

/// Max `|psi_dot|` over the final constraints at the given on-manifold
/// points, with determined controls substituted and gauge controls at 0.
/// This is the discrete shadow of `S^f = T P^f ∩ S^f`.
pub fn tangency_residual(
    sys: &PontryaginSystem,
    cres: &ConstraintResult,
    points: &[Vec<f64>],
) -> Result<f64, Error> {
    let n = sys.n;
    let f_q: Vec<Expr> = sys.dh_dp.iter().map(|e| substitute_determined(e, &cres.determined)).collect();
    let f_p: Vec<Expr> = sys
        .dh_dq
        .iter()
        .map(|e| Expr::neg(substitute_determined(e, &cres.determined)))
        .collect();
    let mut worst = 0.0f64;
    for z in points {
        let mut b = Binding::new();
        for i in 0..n {
            b.set(q_name(i), z[i]);
            b.set(p_name(i), z[n + i]);
        }
        for &g in &cres.gauge {
            b.set(u_name(g), 0.0);
        }
        for cons in &cres.constraints {
            let mut value = 0.0;
            for i in 0..n {
                value += expr::eval(&expr::diff(&cons.expr, &q_name(i)), &b)? * expr::eval(&f_q[i], &b)?;
                value += expr::eval(&expr::diff(&cons.expr, &p_name(i)), &b)? * expr::eval(&f_p[i], &b)?;
            }
            worst = worst.max(value.abs());
        }
    }
    Ok(worst)
}

/// Tangent basis of the final dynamics submanifold `S^f` inside
/// `T P^f`, assembled from its defining equations.
///
/// `S^f` is parameterized by the free coordinates of `P^f` together with
/// the gauge controls: a parameter vector embeds as the point `c` in
/// local coordinates plus its velocity `ċ` read off the substituted
/// dynamics. The returned `2f x (f + g)` matrix stacks the
/// finite-difference Jacobian columns of that embedding at `point`
/// (an on-manifold `(q, p)` pair).
pub fn sf_tangent_basis(
    sys: &PontryaginSystem,
    cres: &ConstraintResult,
    point: &[f64],
    gauge_values: &[f64],
) -> Result<Mat, Error> {
    let n = sys.n;
    if point.len() != 2 * n {
        return Err(Error::Dimension { what: "sf point", expected: 2 * n, got: point.len() });
    }
    if gauge_values.len() != cres.gauge.len() {
        return Err(Error::Dimension {
            what: "gauge values",
            expected: cres.gauge.len(),
            got: gauge_values.len(),
        });
    }
    let f_q: Vec<Expr> = sys.dh_dp.iter().map(|e| substitute_determined(e, &cres.determined)).collect();
    let f_p: Vec<Expr> = sys
        .dh_dq
        .iter()
        .map(|e| Expr::neg(substitute_determined(e, &cres.determined)))
        .collect();
    let f = cres.free_coords.len();
    let g = cres.gauge.len();

    let embed = |params: &[f64]| -> Result<Vec<f64>, Error> {
        let mut full = point.to_vec();
        for (col, &coord) in cres.free_coords.iter().enumerate() {
            full[coord] = params[col];
        }
        let full = cres.project_pivots(&full, 1e-13)?;
        let (q, p) = (&full[..n], &full[n..]);
        let mut b = Binding::new();
        for i in 0..n {
            b.set(q_name(i), q[i]);
            b.set(p_name(i), p[i]);
        }
        for (pos, &gi) in cres.gauge.iter().enumerate() {
            b.set(u_name(gi), params[f + pos]);
        }
        let mut zdot = Vec::with_capacity(2 * n);
        for e in &f_q {
            zdot.push(expr::eval(e, &b)?);
        }
        for e in &f_p {
            zdot.push(expr::eval(e, &b)?);
        }
        let mut out = Vec::with_capacity(2 * f);
        out.extend(cres.free_coords.iter().map(|&c| full[c]));
        out.extend(cres.free_coords.iter().map(|&c| zdot[c]));
        Ok(out)
    };

    let mut params: Vec<f64> = cres.free_coords.iter().map(|&c| point[c]).collect();
    params.extend(gauge_values);
    let fd = 1e-6;
    let mut basis = Mat::zeros(2 * f, f + g);
    let mut pp = params.clone();
    for j in 0..f + g {
        let h = fd * (1.0 + params[j].abs());
        pp[j] = params[j] + h;
        let plus = embed(&pp)?;
        pp[j] = params[j] - h;
        let minus = embed(&pp)?;
        pp[j] = params[j];
        for i in 0..2 * f {
            basis.set(i, j, (plus[i] - minus[i]) / (2.0 * h));
        }
    }
    Ok(basis)
}

/// `H` with determined controls substituted and gauge controls frozen at
/// the supplied values: the reduced Hamiltonian generating the dynamics
/// on `(q, p)`.
pub fn reduced_hamiltonian(
    sys: &PontryaginSystem,
    cres: &ConstraintResult,
    gauge_values: &[f64],
) -> Result<Expr, Error> {
    if gauge_values.len() != cres.gauge.len() {
        return Err(Error::Dimension {
            what: "gauge values",
            expected: cres.gauge.len(),
            got: gauge_values.len(),
        });
    }
    let mut h = substitute_determined(&sys.h, &cres.determined);
    for (&g, &v) in cres.gauge.iter().zip(gauge_values) {
        h = expr::substitute(&h, &u_name(g), &Expr::constant(v));
    }
    Ok(h)
}

/// Solver knobs for the presymplectic step.
#[derive(Debug, Clone)]
pub struct OcpStepOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Tolerance on `|psi(q_k, p_k)|` for accepting the incoming state.
    pub manifold_tol: f64,
}

impl Default for OcpStepOptions {
    fn default() -> Self {
        OcpStepOptions { tol: 1e-12, max_iter: 50, manifold_tol: 1e-9 }
    }
}

/// The residual of the discrete OCP system at a candidate step: given
/// the incoming state `(q_k, p_k)` and a candidate
/// `(q_next, p_next, u)` (full control vector), stack — all evaluated
/// at the lifted-map base point `(q̄, p̄)`:
///
/// 1. `q̇/h - ∂H/∂p`            (n rows)
/// 2. `ṗ/h + ∂H/∂q`            (n rows)
/// 3. `∂H/∂u` on the determined rows
/// 4. `psi(q̄, p̄)` for every final constraint
///
/// This is exactly the system [`presymplectic_step`] drives to zero.
pub fn step_residual(
    sys: &PontryaginSystem,
    cres: &ConstraintResult,
    lift: &LiftedMap,
    h: f64,
    q_k: &[f64],
    p_k: &[f64],
    q_next: &[f64],
    p_next: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, Error> {
    let n = sys.n;
    if u.len() != sys.m {
        return Err(Error::Dimension { what: "controls", expected: sys.m, got: u.len() });
    }
    let (qb, pb, qdot, pdot) = lift.invert(q_k, p_k, q_next, p_next)?;
    let b = sys.binding(&qb, &pb, u);
    let mut r = Vec::with_capacity(2 * n + cres.determined.len() + cres.constraints.len());
    for i in 0..n {
        r.push(qdot[i] / h - expr::eval(&sys.dh_dp[i], &b)?);
    }
    for i in 0..n {
        r.push(pdot[i] / h + expr::eval(&sys.dh_dq[i], &b)?);
    }
    for d in &cres.determined {
        r.push(expr::eval(&sys.dh_du[d.index], &b)?);
    }
    for cons in &cres.constraints {
        r.push(expr::eval(&cons.expr, &b)?);
    }
    Ok(r)
}

/// One step of the presymplectic OCP integrator.
///
/// Unknowns are `(q_{k+1}, p_{k+1}, u_det)`; the residual is
/// [`step_residual`]. The system is overdetermined but consistent on
/// the constraint manifold; it is solved as a least-squares Newton
/// iteration and the *full* residual must come below `tol`, so an
/// inconsistent surplus shows up as non-convergence rather than a
/// silently dropped equation.
pub fn presymplectic_step(
    sys: &PontryaginSystem,
    cres: &ConstraintResult,
    lift: &LiftedMap,
    h: f64,
    q_k: &[f64],
    p_k: &[f64],
    gauge_values: &[f64],
    opts: &OcpStepOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, NewtonReport), Error> {
    let n = sys.n;
    let m = sys.m;
    if q_k.len() != n || p_k.len() != n {
        return Err(Error::Dimension { what: "state", expected: n, got: q_k.len().max(p_k.len()) });
    }
    if lift.dim() != n {
        return Err(Error::Dimension { what: "lift dimension", expected: n, got: lift.dim() });
    }
    if gauge_values.len() != cres.gauge.len() {
        return Err(Error::Dimension {
            what: "gauge values",
            expected: cres.gauge.len(),
            got: gauge_values.len(),
        });
    }
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {h}")));
    }
    let pre_drift = cres.constraint_residual(q_k, p_k)?;
    if pre_drift > opts.manifold_tol {
        return Err(Error::OffManifold { residual: pre_drift, tol: opts.manifold_tol });
    }

    let theta = lift.theta();
    let det_indices: Vec<usize> = cres.determined.iter().map(|d| d.index).collect();
    let d = det_indices.len();
    let k = cres.constraints.len();

    // full control vector from the unknown tail + frozen gauge values
    let assemble_u = |w: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; m];
        for (pos, &idx) in det_indices.iter().enumerate() {
            u[idx] = w[2 * n + pos];
        }
        for (pos, &idx) in cres.gauge.iter().enumerate() {
            u[idx] = gauge_values[pos];
        }
        u
    };

    let base_point = |w: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), Error> {
        lift.invert(q_k, p_k, &w[..n], &w[n..2 * n])
    };

    let residual = |w: &[f64]| -> Result<Vec<f64>, LinAlgError> {
        let u = assemble_u(w);
        step_residual(sys, cres, lift, h, q_k, p_k, &w[..n], &w[n..2 * n], &u)
            .map_err(|e| LinAlgError::Residual(e.to_string()))
    };

    // symbolic Jacobian: rows differentiated through the base point,
    // q̄ = (1-θ) q_k + θ q', p̄ = θ p_k + (1-θ) p'
    let psi_grads: Vec<Vec<Expr>> = cres
        .constraints
        .iter()
        .map(|c| {
            (0..n)
                .map(|j| expr::diff(&c.expr, &q_name(j)))
                .chain((0..n).map(|j| expr::diff(&c.expr, &p_name(j))))
                .collect()
        })
        .collect();
    let jacobian = |w: &[f64]| -> Result<Mat, LinAlgError> {
        let (qb, pb, _, _) = base_point(w).map_err(|e| LinAlgError::Residual(e.to_string()))?;
        let u = assemble_u(w);
        let b = sys.binding(&qb, &pb, &u);
        let ev = |e: &Expr| expr::eval(e, &b).map_err(|err| LinAlgError::Residual(err.to_string()));
        let mut jac = Mat::zeros(2 * n + d + k, 2 * n + d);
        for i in 0..n {
            // row i: q̇_i/h - H_{p_i}(q̄, p̄, u)
            for j in 0..n {
                let mut v = -theta * ev(&sys.d2[n + i][j])?;
                if i == j {
                    v += 1.0 / h;
                }
                jac.set(i, j, v);
                jac.set(i, n + j, -(1.0 - theta) * ev(&sys.d2[n + i][n + j])?);
            }
            for (pos, &a) in det_indices.iter().enumerate() {
                jac.set(i, 2 * n + pos, -ev(&sys.d2[n + i][2 * n + a])?);
            }
            // row n+i: ṗ_i/h + H_{q_i}(q̄, p̄, u)
            for j in 0..n {
                jac.set(n + i, j, theta * ev(&sys.d2[i][j])?);
                let mut v = (1.0 - theta) * ev(&sys.d2[i][n + j])?;
                if i == j {
                    v += 1.0 / h;
                }
                jac.set(n + i, n + j, v);
            }
            for (pos, &a) in det_indices.iter().enumerate() {
                jac.set(n + i, 2 * n + pos, ev(&sys.d2[i][2 * n + a])?);
            }
        }
        for (row, &a) in det_indices.iter().enumerate() {
            for j in 0..n {
                jac.set(2 * n + row, j, theta * ev(&sys.d2[2 * n + a][j])?);
                jac.set(2 * n + row, n + j, (1.0 - theta) * ev(&sys.d2[2 * n + a][n + j])?);
            }
            for (pos, &a2) in det_indices.iter().enumerate() {
                jac.set(2 * n + row, 2 * n + pos, ev(&sys.d2[2 * n + a][2 * n + a2])?);
            }
        }
        for (row, grad) in psi_grads.iter().enumerate() {
            for j in 0..n {
                jac.set(2 * n + d + row, j, theta * ev(&grad[j])?);
                jac.set(2 * n + d + row, n + j, (1.0 - theta) * ev(&grad[n + j])?);
            }
        }
        Ok(jac)
    };

    // initial guess: explicit Euler predictor with the determined
    // control formulas evaluated at the incoming state
    let mut u0 = vec![0.0; m];
    {
        let mut b = Binding::new();
        for i in 0..n {
            b.set(q_name(i), q_k[i]);
            b.set(p_name(i), p_k[i]);
        }
        for dctl in &cres.determined {
            u0[dctl.index] = expr::eval(&dctl.expr, &b)?;
        }
        for (pos, &g) in cres.gauge.iter().enumerate() {
            u0[g] = gauge_values[pos];
        }
    }
    let b0 = sys.binding(q_k, p_k, &u0);
    let mut guess = Vec::with_capacity(2 * n + d);
    for i in 0..n {
        guess.push(q_k[i] + h * expr::eval(&sys.dh_dp[i], &b0)?);
    }
    for i in 0..n {
        guess.push(p_k[i] - h * expr::eval(&sys.dh_dq[i], &b0)?);
    }
    for &a in &det_indices {
        guess.push(u0[a]);
    }

    let nopts = NewtonOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        least_squares: true,
        ..NewtonOptions::default()
    };
    let (w, report) = newton_with(residual, Some(jacobian), &guess, &nopts)?;
    if !report.converged {
        return Err(Error::SolverFailed { step: 0, report });
    }
    let u = assemble_u(&w);
    Ok((w[..n].to_vec(), w[n..2 * n].to_vec(), u, report))
}

/// Iterate [`presymplectic_step`]. The initial point is accepted as-is
/// when it satisfies the constraints to the step tolerance, projected by
/// a Newton solve when within `1e-6`, and rejected otherwise.
pub fn integrate_ocp(
    sys: &PontryaginSystem,
    cres: &ConstraintResult,
    lift: &LiftedMap,
    h: f64,
    steps: usize,
    q0: &[f64],
    p0: &[f64],
    gauge_values: &[f64],
    opts: &OcpStepOptions,
) -> Result<Trajectory, Error> {
    let drift = cres.constraint_residual(q0, p0)?;
    let (q0, p0) = if drift <= opts.manifold_tol {
        (q0.to_vec(), p0.to_vec())
    } else if drift <= 1e-6 {
        cres.project(q0, p0, opts.tol.max(1e-14))?
    } else {
        return Err(Error::OffManifold { residual: drift, tol: 1e-6 });
    };

    // initial control sample from the determined formulas
    let mut u_init = vec![0.0; sys.m];
    {
        let mut b = Binding::new();
        for i in 0..sys.n {
            b.set(q_name(i), q0[i]);
            b.set(p_name(i), p0[i]);
        }
        for dctl in &cres.determined {
            u_init[dctl.index] = expr::eval(&dctl.expr, &b)?;
        }
        for (pos, &g) in cres.gauge.iter().enumerate() {
            u_init[g] = gauge_values[pos];
        }
    }

    let mut traj = Trajectory::initial(h, q0, p0, u_init);
    for k in 0..steps {
        let (q, p) = {
            let last = traj.last();
            (last.q.clone(), last.p.clone())
        };
        match presymplectic_step(sys, cres, lift, h, &q, &p, gauge_values, opts) {
            Ok((qn, pn, u, report)) => {
                // the solved control belongs to the step k -> k+1
                let last_idx = traj.samples.len() - 1;
                traj.samples[last_idx].u = u.clone();
                traj.reports.push(report);
                traj.samples.push(Sample { t: (k + 1) as f64 * h, q: qn, p: pn, u });
            }
            Err(Error::SolverFailed { report, .. }) => {
                return Err(Error::SolverFailed { step: k, report });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(traj)
}
