//! Numerical verification of the preservation claims: symplecticity and
//! presymplecticity of one-step maps, energy and constraint drift along
//! trajectories, convergence order, and the linear-algebra criteria for
//! Lagrangian subspaces of presymplectic vector spaces.
//!
//! All forms here have constant coefficients (the configuration space is
//! `R^n`), so the manifold statements reduce to exact matrix identities
//! checked at finite-difference precision.

use crate::expr::{self, Binding, Expr};
use crate::hamiltonian::{p_name, q_name, u_name, Trajectory};
use crate::numeric::{self, Mat};
use crate::ocp::ConstraintResult;
use crate::Error;

/// Default central-difference step scale for Jacobians of one-step maps.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Threshold below which a subspace counts as isotropic.
pub const ISOTROPY_TOL: f64 = 1e-12;

/// A constant-coefficient 2-form: an exactly antisymmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FormMatrix {
    omega: Mat,
}

impl FormMatrix {
    /// Wrap a matrix that is already exactly antisymmetric.
    pub fn new(omega: Mat) -> Result<FormMatrix, Error> {
        if omega.rows() != omega.cols() {
            return Err(Error::Dimension { what: "form matrix", expected: omega.rows(), got: omega.cols() });
        }
        for i in 0..omega.rows() {
            for j in 0..omega.cols() {
                if omega.get(i, j) != -omega.get(j, i) {
                    return Err(Error::Invalid(format!(
                        "form matrix is not antisymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(FormMatrix { omega })
    }

    /// Antisymmetrize exactly: `(M - M^T) / 2`. Use for matrices built
    /// by floating-point products such as `B^T Ω B`.
    pub fn antisymmetrize(m: &Mat) -> FormMatrix {
        let omega = Mat::from_fn(m.rows(), m.cols(), |i, j| 0.5 * (m.get(i, j) - m.get(j, i)));
        FormMatrix { omega }
    }

    /// Canonical symplectic form `dq ∧ dp` on `R^{2n}`, ordered
    /// `(q1..qn, p1..pn)`.
    pub fn canonical(n: usize) -> FormMatrix {
        FormMatrix { omega: crate::ocp::canonical_two_form(n) }
    }

    /// Tangent lift of a constant form: on `(x, ẋ)` the matrix
    /// `[[0, Ω], [Ω, 0]]` (value `a^T Ω ḃ - b^T Ω ȧ`).
    pub fn tangent_lift(omega: &Mat) -> FormMatrix {
        let d = omega.rows();
        let lifted = Mat::from_fn(2 * d, 2 * d, |i, j| {
            if i < d && j >= d {
                omega.get(i, j - d)
            } else if i >= d && j < d {
                omega.get(i - d, j)
            } else {
                0.0
            }
        });
        FormMatrix { omega: lifted }
    }

    pub fn dim(&self) -> usize {
        self.omega.rows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.omega
    }

    /// Dimension of `ker Ω`.
    pub fn kernel_dim(&self, rank_tol: f64) -> usize {
        self.dim() - numeric::rank(&self.omega, rank_tol).rank
    }
}

/// A subspace given by independent column vectors.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    basis: Mat,
}

impl SubspaceBasis {
    pub fn new(basis: Mat) -> Result<SubspaceBasis, Error> {
        let r = numeric::rank(&basis, numeric::DEFAULT_RANK_TOL).rank;
        if r != basis.cols() {
            return Err(Error::Invalid(format!(
                "basis columns are dependent: rank {r} < {}",
                basis.cols()
            )));
        }
        Ok(SubspaceBasis { basis })
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<SubspaceBasis, Error> {
        let d = cols.first().map_or(0, |c| c.len());
        let m = Mat::from_fn(d, cols.len(), |i, j| cols[j][i]);
        SubspaceBasis::new(m)
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn matrix(&self) -> &Mat {
        &self.basis
    }
}

/// Verdict of [`lagrangian_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangianReport {
    pub is_isotropic: bool,
    pub dim_ok: bool,
    /// `(dim M - dim ker Ω)/2 + dim(L ∩ ker Ω)` — what the subspace
    /// dimension must equal for a Lagrangian subspace.
    pub r_expected: usize,
}

impl LagrangianReport {
    pub fn is_lagrangian(&self) -> bool {
        self.is_isotropic && self.dim_ok
    }
}

/// Check the presymplectic Lagrangian criteria for `span L` in
/// `(R^d, Ω)`: isotropy `L^T Ω L = 0` and the dimension formula
/// `r = (d - dim ker Ω)/2 + dim(L ∩ ker Ω)`.
pub fn lagrangian_check(omega: &FormMatrix, subspace: &SubspaceBasis, rank_tol: f64) -> LagrangianReport {
    let l = subspace.matrix();
    let pairing = l.transpose().matmul(omega.matrix()).matmul(l);
    let is_isotropic = pairing.max_abs() <= ISOTROPY_TOL;

    let d = omega.dim();
    let kr = numeric::rank(omega.matrix(), rank_tol);
    let kernel_dim = d - kr.rank;
    // dim(L ∩ ker) = dim L + dim ker - dim(L + ker)
    let intersection = if kernel_dim == 0 {
        0
    } else {
        let kmat = Mat::from_fn(d, kernel_dim, |i, j| kr.kernel[j][i]);
        let joined = l.hcat(&kmat);
        subspace.dim() + kernel_dim - numeric::rank(&joined, rank_tol).rank
    };
    let r_expected = (d - kernel_dim) / 2 + intersection;
    LagrangianReport { is_isotropic, dim_ok: subspace.dim() == r_expected, r_expected }
}

/// Verdict of [`graph_lagrangian_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphReport {
    /// Whether `f^T Ω_N f = Ω_M` holds to `1e-9`.
    pub is_presymplectic_map: bool,
    pub lagrangian: LagrangianReport,
}

impl GraphReport {
    pub fn holds(&self) -> bool {
        self.is_presymplectic_map && self.lagrangian.is_lagrangian()
    }
}

/// Check that the graph of a linear map `f: (R^d, Ω_M) -> (R^d, Ω_N)`
/// is Lagrangian in the product with the form `Ω_M ⊕ (-Ω_N)`.
/// The premise `f^T Ω_N f = Ω_M` is verified first and reported.
pub fn graph_lagrangian_check(
    f: &Mat,
    omega_m: &FormMatrix,
    omega_n: &FormMatrix,
    rank_tol: f64,
) -> Result<GraphReport, Error> {
    let d = omega_m.dim();
    if f.rows() != d || f.cols() != d || omega_n.dim() != d {
        return Err(Error::Dimension { what: "graph check", expected: d, got: f.rows() });
    }
    let pullback = f.transpose().matmul(omega_n.matrix()).matmul(f);
    let is_presymplectic_map = pullback.sub(omega_m.matrix()).max_abs() <= 1e-9;

    // graph basis [I; f] in (R^{2d}, Ω_M ⊕ -Ω_N)
    let graph = Mat::from_fn(2 * d, d, |i, j| {
        if i < d {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            f.get(i - d, j)
        }
    });
    let product_form = Mat::from_fn(2 * d, 2 * d, |i, j| {
        if i < d && j < d {
            omega_m.matrix().get(i, j)
        } else if i >= d && j >= d {
            -omega_n.matrix().get(i - d, j - d)
        } else {
            0.0
        }
    });
    let lagrangian = lagrangian_check(
        &FormMatrix::new(product_form)?,
        &SubspaceBasis::new(graph)?,
        rank_tol,
    );
    Ok(GraphReport { is_presymplectic_map, lagrangian })
}

/// Central-difference Jacobian of a one-step map at `z`, with
/// per-coordinate step `fd_step * (1 + |z_i|)`.
fn step_jacobian<F>(step: &F, z: &[f64], fd_step: f64) -> Result<Mat, Error>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, Error>,
{
    let dim = z.len();
    let out_dim = step(z)?.len();
    let mut jac = Mat::zeros(out_dim, dim);
    let mut zp = z.to_vec();
    for j in 0..dim {
        let h = fd_step * (1.0 + z[j].abs());
        zp[j] = z[j] + h;
        let fp = step(&zp)?;
        zp[j] = z[j] - h;
        let fm = step(&zp)?;
        zp[j] = z[j];
        for i in 0..out_dim {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    Ok(jac)
}

/// `||M^T J M - J||` for the finite-difference Jacobian `M` of a
/// one-step map on `(q1..qn, p1..pn)` at `z`.
pub fn symplecticity_residual<F>(step: F, z: &[f64], fd_step: f64) -> Result<f64, Error>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, Error>,
{
    if z.len() % 2 != 0 {
        return Err(Error::Invalid("phase-space point must have even dimension".into()));
    }
    let j = FormMatrix::canonical(z.len() / 2);
    let m = step_jacobian(&step, z, fd_step)?;
    Ok(m.transpose().matmul(j.matrix()).matmul(&m).sub(j.matrix()).max_abs())
}

/// `||M^T Ω_f M - Ω_f||` for one step expressed in the local coordinates
/// of the final constraint manifold.
///
/// `z` must lie on the manifold; perturbations move the free
/// coordinates and re-project the pivot coordinates onto the constraint
/// set before stepping.
pub fn presymplectic_residual<F>(
    step: F,
    cres: &ConstraintResult,
    z: &[f64],
    fd_step: f64,
) -> Result<f64, Error>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, Error>,
{
    let n = cres.n;
    if z.len() != 2 * n {
        return Err(Error::Dimension { what: "phase-space point", expected: 2 * n, got: z.len() });
    }
    let drift = cres.constraint_residual(&z[..n], &z[n..])?;
    if drift > 1e-8 {
        return Err(Error::OffManifold { residual: drift, tol: 1e-8 });
    }

    // one step as a map in the free coordinates: the pivot coordinates
    // re-project onto the constraint set with the free ones held fixed
    let reduced_step = |xi: &[f64]| -> Result<Vec<f64>, Error> {
        let mut full = z.to_vec();
        for (col, &coord) in cres.free_coords.iter().enumerate() {
            full[coord] = xi[col];
        }
        let full = cres.project_pivots(&full, 1e-13)?;
        let out = step(&full)?;
        Ok(cres.free_coords.iter().map(|&c| out[c]).collect())
    };
    let xi0: Vec<f64> = cres.free_coords.iter().map(|&c| z[c]).collect();
    let m = step_jacobian(&reduced_step, &xi0, fd_step)?;
    Ok(m.transpose()
        .matmul(&cres.omega_f)
        .matmul(&m)
        .sub(&cres.omega_f)
        .max_abs())
}

/// `max_k |H(z_k) - H(z_0)|` along a trajectory. Control samples, when
/// present, are bound too so OCP Hamiltonians can be monitored.
pub fn energy_drift(traj: &Trajectory, hamiltonian: &Expr) -> Result<f64, Error> {
    let Some(first) = traj.samples.first() else {
        return Ok(0.0);
    };
    let bind = |s: &crate::hamiltonian::Sample| -> Binding {
        let mut b = Binding::new();
        for (i, v) in s.q.iter().enumerate() {
            b.set(q_name(i), *v);
        }
        for (i, v) in s.p.iter().enumerate() {
            b.set(p_name(i), *v);
        }
        for (i, v) in s.u.iter().enumerate() {
            b.set(u_name(i), *v);
        }
        b
    };
    let e0 = expr::eval(hamiltonian, &bind(first))?;
    let mut worst = 0.0f64;
    for s in &traj.samples {
        worst = worst.max((expr::eval(hamiltonian, &bind(s))? - e0).abs());
    }
    Ok(worst)
}

/// `max` over steps and constraints of `|psi(z_k)|`.
pub fn constraint_drift(traj: &Trajectory, constraints: &[Expr]) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    for s in &traj.samples {
        let mut b = Binding::new();
        for (i, v) in s.q.iter().enumerate() {
            b.set(q_name(i), *v);
        }
        for (i, v) in s.p.iter().enumerate() {
            b.set(p_name(i), *v);
        }
        for c in constraints {
            worst = worst.max(expr::eval(c, &b)?.abs());
        }
    }
    Ok(worst)
}

/// Result of a convergence-order measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvergenceOrder {
    Slope(f64),
    /// Some run had zero global error; no slope is defined.
    Degenerate,
}

/// Least-squares slope of `log(error)` against `log(h)`.
///
/// `run` integrates with the given step size and returns the final
/// state; `reference` is the exact (or tiny-h) final state.
pub fn convergence_order<F>(run: F, h_list: &[f64], reference: &[f64]) -> Result<ConvergenceOrder, Error>
where
    F: Fn(f64) -> Result<Vec<f64>, Error>,
{
    if h_list.len() < 3 {
        return Err(Error::Invalid("need at least 3 step sizes for a slope".into()));
    }
    let mut logs: Vec<(f64, f64)> = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let state = run(h)?;
        if state.len() != reference.len() {
            return Err(Error::Dimension { what: "run output", expected: reference.len(), got: state.len() });
        }
        let err = state
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if err == 0.0 {
            return Ok(ConvergenceOrder::Degenerate);
        }
        logs.push((h.ln(), err.ln()));
    }
    let count = logs.len() as f64;
    let sx: f64 = logs.iter().map(|(x, _)| x).sum();
    let sy: f64 = logs.iter().map(|(_, y)| y).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = logs.iter().map(|(x, y)| x * y).sum();
    let denom = count * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Ok(ConvergenceOrder::Degenerate);
    }
    Ok(ConvergenceOrder::Slope((count * sxy - sx * sy) / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{integrate, rk1_step, rk4_step, symplectic_step, HamiltonianSystem, StepOptions};
    use crate::maps::DiscretizationMap;
    use crate::ocp::{build_pontryagin, constraint_algorithm, integrate_ocp, presymplectic_step, ConstraintOptions, OcpDefinition, OcpStepOptions};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn harmonic() -> HamiltonianSystem {
        HamiltonianSystem::parse(1, "(p1^2 + q1^2)/2").unwrap()
    }

    fn midpoint_lift(n: usize) -> crate::maps::LiftedMap {
        DiscretizationMap::theta_method(n, 0.5).unwrap().cotangent_lift()
    }

    fn singular_setup() -> (crate::ocp::PontryaginSystem, ConstraintResult) {
        let ocp = OcpDefinition::new(
            2,
            2,
            vec![expr::parse("q1 + u1").unwrap(), expr::parse("q2").unwrap()],
            expr::parse("0.5*q1^2 + 0.5*q2^2 + q1*u1 + q2*u2 + 0.5*u1^2").unwrap(),
        )
        .unwrap();
        let sys = build_pontryagin(&ocp);
        let cres = constraint_algorithm(&sys, &ConstraintOptions::default()).unwrap();
        (sys, cres)
    }

    #[test]
    fn identity_map_has_zero_symplecticity_residual() {
        // at the origin the central differences are exact, so the
        // residual is literally zero; generic points carry the FD
        // quantization of z ± h
        let res = symplecticity_residual(|z| Ok(z.to_vec()), &[0.0, 0.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(res, 0.0);
        let res = symplecticity_residual(|z| Ok(z.to_vec()), &[0.3, -0.7], DEFAULT_FD_STEP).unwrap();
        assert!(res <= 1e-9, "identity residual {res:.3e}");
    }

    #[test]
    fn midpoint_step_is_symplectic_to_fd_noise() {
        let sys = harmonic();
        let lift = midpoint_lift(1);
        let opts = StepOptions::default();
        let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
            let (q, p, _) = symplectic_step(&sys, &lift, 0.1, &z[..1], &z[1..], &opts)?;
            Ok([q, p].concat())
        };
        let res = symplecticity_residual(step, &[1.0, 0.0], DEFAULT_FD_STEP).unwrap();
        assert!(res <= 1e-6, "residual {res:.3e}");
    }

    #[test]
    fn explicit_euler_violates_symplecticity_at_h_squared() {
        let sys = harmonic();
        let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
            let (q, p) = rk1_step(&sys, 0.1, &z[..1], &z[1..])?;
            Ok([q, p].concat())
        };
        let res = symplecticity_residual(step, &[1.0, 0.0], DEFAULT_FD_STEP).unwrap();
        assert!(res >= 1e-3, "explicit Euler should fail: {res:.3e}");
        assert!((res - 0.01).abs() <= 2e-3, "residual should be about h^2: {res:.3e}");
    }

    #[test]
    fn random_quadratic_and_cubic_hamiltonians_are_symplectic() {
        let mut rng = StdRng::seed_from_u64(77);
        for trial in 0..6 {
            // random H = a q^2 + b q p + c p^2 (+ cubic terms on odd trials)
            let coeff = |rng: &mut StdRng| rng.gen_range(-0.5..0.5);
            let mut text = format!(
                "{}*q1^2 + {}*q1*p1 + {}*p1^2",
                0.5 + coeff(&mut rng),
                coeff(&mut rng),
                0.5 + coeff(&mut rng)
            );
            if trial % 2 == 1 {
                text = format!(
                    "{text} + {}*q1^3 + {}*q1^2*p1 + {}*p1^3",
                    coeff(&mut rng),
                    coeff(&mut rng),
                    coeff(&mut rng)
                );
            }
            let sys = HamiltonianSystem::parse(1, &text).unwrap();
            for theta in [0.0, 0.5, 1.0] {
                let lift = DiscretizationMap::theta_method(1, theta).unwrap().cotangent_lift();
                let opts = StepOptions::default();
                let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
                    let (q, p, _) = symplectic_step(&sys, &lift, 0.05, &z[..1], &z[1..], &opts)?;
                    Ok([q, p].concat())
                };
                let res = symplecticity_residual(step, &[0.3, 0.2], DEFAULT_FD_STEP).unwrap();
                assert!(res <= 1e-6, "H = {text}, theta {theta}: residual {res:.3e}");
            }
        }
    }

    #[test]
    fn composition_residual_bounded_by_sum() {
        let sys = harmonic();
        let lift = midpoint_lift(1);
        let opts = StepOptions::default();
        let one = |z: &[f64]| -> Result<Vec<f64>, Error> {
            let (q, p, _) = symplectic_step(&sys, &lift, 0.1, &z[..1], &z[1..], &opts)?;
            Ok([q, p].concat())
        };
        let two = |z: &[f64]| -> Result<Vec<f64>, Error> { one(&one(z)?) };
        let z = [0.8, 0.3];
        let r1 = symplecticity_residual(&one, &z, DEFAULT_FD_STEP).unwrap();
        let r1b = symplecticity_residual(&one, &one(&z).unwrap(), DEFAULT_FD_STEP).unwrap();
        let r2 = symplecticity_residual(&two, &z, DEFAULT_FD_STEP).unwrap();
        assert!(r2 <= r1 + r1b + 1e-6, "{r2:.3e} vs {:.3e}", r1 + r1b + 1e-6);
    }

    #[test]
    fn presymplectic_residual_small_on_singular_example() {
        let (sys, cres) = singular_setup();
        let lift = midpoint_lift(2);
        let opts = OcpStepOptions { manifold_tol: 1e-6, ..OcpStepOptions::default() };
        let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
            let (q, p, _, _) = presymplectic_step(&sys, &cres, &lift, 0.05, &z[..2], &z[2..], &[0.0], &opts)?;
            Ok([q, p].concat())
        };
        let res = presymplectic_residual(step, &cres, &[0.8, 0.0, -0.4, 0.6], DEFAULT_FD_STEP).unwrap();
        assert!(res <= 1e-6, "residual {res:.3e}");
    }

    #[test]
    fn presymplectic_residual_small_with_nonlinear_drift() {
        // quadratic drift makes the reduced (q1, p1) dynamics genuinely
        // nonlinear; the implicit midpoint step still preserves omega_f
        let ocp = OcpDefinition::new(
            2,
            2,
            vec![expr::parse("q1^2 + u1").unwrap(), expr::parse("q2").unwrap()],
            expr::parse("0.5*q1^2 + 0.5*q2^2 + q1*u1 + q2*u2 + 0.5*u1^2").unwrap(),
        )
        .unwrap();
        let sys = build_pontryagin(&ocp);
        let cres = constraint_algorithm(&sys, &ConstraintOptions::default()).unwrap();
        let lift = midpoint_lift(2);
        let opts = OcpStepOptions { tol: 1e-13, manifold_tol: 1e-6, ..OcpStepOptions::default() };
        let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
            let (q, p, _, _) = presymplectic_step(&sys, &cres, &lift, 0.05, &z[..2], &z[2..], &[0.2], &opts)?;
            Ok([q, p].concat())
        };
        let res = presymplectic_residual(step, &cres, &[0.5, 0.0, 0.1, 0.3], DEFAULT_FD_STEP).unwrap();
        assert!(res <= 1e-6, "nonlinear residual {res:.3e}");
    }

    #[test]
    fn presymplectic_residual_of_identity_is_zero() {
        let (_, cres) = singular_setup();
        let res =
            presymplectic_residual(|z| Ok(z.to_vec()), &cres, &[0.0, 0.0, 0.0, 0.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(res, 0.0);
        let res =
            presymplectic_residual(|z| Ok(z.to_vec()), &cres, &[0.8, 0.0, -0.4, 0.6], DEFAULT_FD_STEP).unwrap();
        assert!(res <= 1e-9, "identity residual {res:.3e}");
    }

    #[test]
    fn presymplectic_residual_theta_zero_recorded() {
        // the θ = 0 lift is still a valid discretization map; the
        // residual is recorded, not asserted small
        let (sys, cres) = singular_setup();
        let lift = DiscretizationMap::theta_method(2, 0.0).unwrap().cotangent_lift();
        let opts = OcpStepOptions { manifold_tol: 1e-6, ..OcpStepOptions::default() };
        let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
            let (q, p, _, _) = presymplectic_step(&sys, &cres, &lift, 0.05, &z[..2], &z[2..], &[0.0], &opts)?;
            Ok([q, p].concat())
        };
        let res = presymplectic_residual(step, &cres, &[0.8, 0.0, -0.4, 0.6], DEFAULT_FD_STEP).unwrap();
        assert!(res.is_finite());
        println!("theta=0 presymplectic residual: {res:.3e}");
    }

    #[test]
    fn energy_drift_reference_trajectory() {
        // midpoint at tiny h approximates the continuous flow, which
        // conserves H exactly
        let sys = HamiltonianSystem::parse(1, "p1^2/2 - cos(q1)").unwrap();
        let traj =
            integrate(&sys, &midpoint_lift(1), 2e-4, 5000, &[0.5, 0.0][..1].to_vec().as_slice(), &[0.0], &StepOptions::default())
                .unwrap();
        let drift = energy_drift(&traj, sys.hamiltonian()).unwrap();
        assert!(drift <= 1e-8, "reference drift {drift:.3e}");
    }

    #[test]
    fn energy_drift_midpoint_quadratic() {
        let sys = harmonic();
        let traj = integrate(&sys, &midpoint_lift(1), 0.01, 1000, &[1.0], &[0.0], &StepOptions::default()).unwrap();
        let drift = energy_drift(&traj, sys.hamiltonian()).unwrap();
        assert!(drift <= 1e-10, "midpoint drift {drift:.3e}");
    }

    #[test]
    fn energy_drift_explicit_euler_grows() {
        // explicit Euler multiplies the oscillator energy by (1 + h^2)
        // per step: drift from H0 = 1/2 passes 0.1 well before 100 steps
        let sys = harmonic();
        let mut traj = Trajectory::initial(0.1, vec![1.0], vec![0.0], Vec::new());
        let (mut q, mut p) = (vec![1.0], vec![0.0]);
        for k in 0..100 {
            let (qn, pn) = rk1_step(&sys, 0.1, &q, &p).unwrap();
            q = qn;
            p = pn;
            traj.samples.push(crate::hamiltonian::Sample {
                t: (k + 1) as f64 * 0.1,
                q: q.clone(),
                p: p.clone(),
                u: Vec::new(),
            });
        }
        let drift = energy_drift(&traj, sys.hamiltonian()).unwrap();
        assert!(drift >= 0.1, "explicit Euler drift {drift:.3e}");
    }

    #[test]
    fn constraint_drift_on_presymplectic_run_vs_rk4() {
        let (sys, cres) = singular_setup();
        let lift = midpoint_lift(2);
        let traj = integrate_ocp(&sys, &cres, &lift, 0.1, 10, &[1.0, 0.0], &[0.2, 0.4], &[0.0], &OcpStepOptions::default())
            .unwrap();
        let psis: Vec<Expr> = cres.constraints.iter().map(|c| c.expr.clone()).collect();
        let drift = constraint_drift(&traj, &psis).unwrap();
        assert!(drift <= 1e-10, "geometric drift {drift:.3e}");

        // negative control: RK4 on the reduced vector field from a
        // starting point slightly off the manifold; the q2 defect grows
        // like e^t instead of being pinned to zero
        let h_red = crate::ocp::reduced_hamiltonian(&sys, &cres, &[0.0]).unwrap();
        let red = HamiltonianSystem::new(2, h_red).unwrap();
        let mut rk = Trajectory::initial(0.1, vec![1.0, 1e-4], vec![0.2, 0.4], Vec::new());
        let (mut q, mut p) = (vec![1.0, 1e-4], vec![0.2, 0.4]);
        for k in 0..10 {
            let (qn, pn) = rk4_step(&red, 0.1, &q, &p).unwrap();
            q = qn;
            p = pn;
            rk.samples.push(crate::hamiltonian::Sample {
                t: (k + 1) as f64 * 0.1,
                q: q.clone(),
                p: p.clone(),
                u: Vec::new(),
            });
        }
        let rk_drift = constraint_drift(&rk, &psis).unwrap();
        assert!(rk_drift > 1e-6, "rk4 drift should grow: {rk_drift:.3e}");
        assert!(rk_drift > 2.0 * 1e-4, "defect should amplify along the run: {rk_drift:.3e}");
    }

    #[test]
    fn constraint_drift_empty_is_zero() {
        let sys = harmonic();
        let traj = integrate(&sys, &midpoint_lift(1), 0.1, 5, &[1.0], &[0.0], &StepOptions::default()).unwrap();
        assert_eq!(constraint_drift(&traj, &[]).unwrap(), 0.0);
    }

    #[test]
    fn lagrangian_line_in_symplectic_plane() {
        let omega = FormMatrix::canonical(1);
        let line = SubspaceBasis::from_columns(&[vec![1.0, 0.0]]).unwrap();
        let report = lagrangian_check(&omega, &line, 1e-9);
        assert!(report.is_isotropic);
        assert!(report.dim_ok);
        assert_eq!(report.r_expected, 1);
    }

    #[test]
    fn non_isotropic_plane_is_rejected() {
        let omega = FormMatrix::canonical(1);
        let plane = SubspaceBasis::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let report = lagrangian_check(&omega, &plane, 1e-9);
        assert!(!report.is_isotropic);
    }

    #[test]
    fn sf_tangent_model_is_lagrangian_in_lifted_form() {
        // tangent model of S^f for the singular example inside
        // (T P^f, d_T omega_f): parameters (x, p_x, p_y, u2) embed as
        // (x, p_x, p_y, ẋ, ṗ_x, ṗ_y) with ẋ = p_x, ṗ_x = 0,
        // ṗ_y = -p_y + u2
        let (_, cres) = singular_setup();
        let lifted = FormMatrix::tangent_lift(&cres.omega_f);
        let cols = vec![
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],  // d/dx
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0],  // d/dp_x (drags ẋ)
            vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0], // d/dp_y (drags ṗ_y)
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],  // d/du2
        ];
        let basis = SubspaceBasis::from_columns(&cols).unwrap();
        let report = lagrangian_check(&lifted, &basis, 1e-9);
        assert!(report.is_isotropic);
        assert!(report.dim_ok, "expected dim {}, have 4", report.r_expected);
    }

    #[test]
    fn graph_of_identity_is_lagrangian() {
        let omega = FormMatrix::canonical(1);
        let report = graph_lagrangian_check(&Mat::identity(2), &omega, &omega, 1e-9).unwrap();
        assert!(report.holds());
    }

    #[test]
    fn graph_of_midpoint_step_matrix_is_lagrangian() {
        // closed-form Cayley matrix of the midpoint step on the
        // harmonic oscillator
        let h = 0.1;
        let denom = 1.0 + h * h / 4.0;
        let m = Mat::from_rows(&[
            vec![(1.0 - h * h / 4.0) / denom, h / denom],
            vec![-h / denom, (1.0 - h * h / 4.0) / denom],
        ]);
        let omega = FormMatrix::canonical(1);
        let report = graph_lagrangian_check(&m, &omega, &omega, 1e-9).unwrap();
        assert!(report.holds());
    }

    #[test]
    fn scaled_identity_fails_the_premise() {
        let omega = FormMatrix::canonical(1);
        let report = graph_lagrangian_check(&Mat::identity(2).scaled(2.0), &omega, &omega, 1e-9).unwrap();
        assert!(!report.is_presymplectic_map);
        assert!(!report.holds());
    }

    /// Random symplectic matrix via the Cayley transform of a random
    /// Hamiltonian matrix.
    fn random_symplectic(rng: &mut StdRng, n: usize) -> Mat {
        let d = 2 * n;
        let sym = {
            let mut s = Mat::zeros(d, d);
            for i in 0..d {
                for j in 0..=i {
                    let v = rng.gen_range(-0.4..0.4);
                    s.set(i, j, v);
                    s.set(j, i, v);
                }
            }
            s
        };
        let j = FormMatrix::canonical(n);
        let a = j.matrix().matmul(&sym);
        // (I - A)^{-1} (I + A)
        let eye = Mat::identity(d);
        let i_minus = eye.sub(&a);
        let i_plus = eye.sub(&a.scaled(-1.0));
        let mut out = Mat::zeros(d, d);
        for col in 0..d {
            let x = numeric::lu_solve(&i_minus, &i_plus.col(col)).unwrap();
            for row in 0..d {
                out.set(row, col, x[row]);
            }
        }
        out
    }

    #[test]
    fn random_symplectic_graphs_always_pass() {
        let mut rng = StdRng::seed_from_u64(42);
        let omega = FormMatrix::canonical(2);
        for _ in 0..100 {
            let m = random_symplectic(&mut rng, 2);
            let report = graph_lagrangian_check(&m, &omega, &omega, 1e-9).unwrap();
            assert!(report.holds());
        }
    }

    #[test]
    fn random_nonsymplectic_graphs_always_fail() {
        let mut rng = StdRng::seed_from_u64(43);
        let omega = FormMatrix::canonical(2);
        for _ in 0..100 {
            let m = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let report = graph_lagrangian_check(&m, &omega, &omega, 1e-9).unwrap();
            assert!(!report.holds());
        }
    }

    #[test]
    fn pullback_of_lagrangian_by_invertible_map_is_lagrangian() {
        // Ω_N = J ⊕ 0 (presymplectic), L_N = span{q-axes and a kernel
        // direction}; for random invertible B, B^{-1} L_N must be
        // Lagrangian for Ω_M = B^T Ω_N B
        let mut rng = StdRng::seed_from_u64(44);
        let d = 5; // 2x2 symplectic block + 1 kernel direction
        let mut omega_n_mat = Mat::zeros(d, d);
        omega_n_mat.set(0, 2, 1.0);
        omega_n_mat.set(2, 0, -1.0);
        omega_n_mat.set(1, 3, 1.0);
        omega_n_mat.set(3, 1, -1.0);
        let omega_n = FormMatrix::new(omega_n_mat).unwrap();
        // L_N: q1, q2 axes + kernel direction e4 => r = 2 + 1
        let l_n = [
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        assert!(lagrangian_check(&omega_n, &SubspaceBasis::from_columns(&l_n).unwrap(), 1e-9).is_lagrangian());

        for _ in 0..100 {
            // random invertible B (diagonal dominance keeps it so)
            let b = Mat::from_fn(d, d, |i, j| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if i == j {
                    v + 3.0
                } else {
                    v
                }
            });
            let omega_m = FormMatrix::antisymmetrize(
                &b.transpose().matmul(omega_n.matrix()).matmul(&b),
            );
            // columns of B^{-1} L_N
            let cols: Vec<Vec<f64>> = l_n.iter().map(|c| numeric::lu_solve(&b, c).unwrap()).collect();
            let l_m = SubspaceBasis::from_columns(&cols).unwrap();
            let report = lagrangian_check(&omega_m, &l_m, 1e-9);
            assert!(report.is_isotropic, "pullback lost isotropy");
            assert!(report.dim_ok, "pullback lost the dimension formula");
        }
    }

    #[test]
    fn convergence_order_of_midpoint_is_two() {
        let sys = harmonic();
        let lift = midpoint_lift(1);
        let run = |h: f64| -> Result<Vec<f64>, Error> {
            let steps = (1.0 / h).round() as usize;
            let traj = integrate(&sys, &lift, h, steps, &[1.0], &[0.0], &StepOptions::default())
                .map_err(|e| e.source)?;
            let last = traj.last();
            Ok([last.q.clone(), last.p.clone()].concat())
        };
        let h_list: Vec<f64> = (0..6).map(|j| 0.1 * 0.5f64.powi(j)).collect();
        let reference = vec![1.0f64.cos(), -(1.0f64.sin())];
        let order = convergence_order(run, &h_list, &reference).unwrap();
        let ConvergenceOrder::Slope(s) = order else {
            panic!("degenerate slope");
        };
        assert!((s - 2.0).abs() <= 0.15, "midpoint slope {s}");
    }

    #[test]
    fn convergence_order_of_theta_zero_is_one() {
        let sys = harmonic();
        let lift = DiscretizationMap::theta_method(1, 0.0).unwrap().cotangent_lift();
        let run = |h: f64| -> Result<Vec<f64>, Error> {
            let steps = (1.0 / h).round() as usize;
            let traj = integrate(&sys, &lift, h, steps, &[1.0], &[0.0], &StepOptions::default())
                .map_err(|e| e.source)?;
            let last = traj.last();
            Ok([last.q.clone(), last.p.clone()].concat())
        };
        let h_list: Vec<f64> = (0..6).map(|j| 0.1 * 0.5f64.powi(j)).collect();
        let reference = vec![1.0f64.cos(), -(1.0f64.sin())];
        let order = convergence_order(run, &h_list, &reference).unwrap();
        let ConvergenceOrder::Slope(s) = order else {
            panic!("degenerate slope");
        };
        assert!((s - 1.0).abs() <= 0.15, "theta=0 slope {s}");
    }

    #[test]
    fn convergence_order_degenerate_when_exact() {
        let run = |_h: f64| -> Result<Vec<f64>, Error> { Ok(vec![1.0]) };
        let order = convergence_order(run, &[0.1, 0.05, 0.025], &[1.0]).unwrap();
        assert_eq!(order, ConvergenceOrder::Degenerate);
    }

    #[test]
    fn too_few_step_sizes_is_an_error() {
        let run = |_h: f64| -> Result<Vec<f64>, Error> { Ok(vec![1.0]) };
        assert!(convergence_order(run, &[0.1, 0.05], &[0.0]).is_err());
    }
}
