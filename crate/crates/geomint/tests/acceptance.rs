//! Acceptance suite: one test per criterion, each asserting its stated
//! tolerances and printing a single PASS line with the measured
//! runtime (visible under `cargo test --test acceptance -- --nocapture`).

use geomint::diagnostics::{
    self, convergence_order, energy_drift, lagrangian_check, presymplectic_residual,
    symplecticity_residual, ConvergenceOrder, FormMatrix, SubspaceBasis,
};
use geomint::expr::{self, Binding, Expr};
use geomint::hamiltonian::{self, HamiltonianSystem, StepOptions};
use geomint::maps::{verify_lift_symplectomorphism, verify_symplecto_generic, DiscretizationMap};
use geomint::numeric::{lu_solve, rank, Mat};
use geomint::ocp::{
    build_pontryagin, classify_regularity, constraint_algorithm, integrate_ocp,
    morse_family_check, presymplectic_step, reduced_hamiltonian, sf_tangent_basis, step_residual,
    tangency_residual, ConstraintOptions, OcpDefinition, OcpStepOptions, Regularity,
};
use geomint::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::{Duration, Instant};

const THETA_FAMILY: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

fn finish(criterion: usize, name: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed < budget,
        "criterion {criterion} overran its runtime budget: {elapsed:?} >= {budget:?}"
    );
    println!("criterion {criterion} ({name}): PASS in {elapsed:?}");
}

/// The singular optimal control problem on R^2 with drift f(x) = x.
fn singular_ocp() -> OcpDefinition {
    OcpDefinition::new(
        2,
        2,
        vec![expr::parse("q1 + u1").unwrap(), expr::parse("q2").unwrap()],
        expr::parse("0.5*q1^2 + 0.5*q2^2 + q1*u1 + q2*u2 + 0.5*u1^2").unwrap(),
    )
    .unwrap()
}

/// Double integrator with quadratic cost (regular).
fn lqr_ocp() -> OcpDefinition {
    OcpDefinition::new(
        2,
        1,
        vec![expr::parse("q2").unwrap(), expr::parse("u1").unwrap()],
        expr::parse("0.5*q1^2 + 0.5*q2^2 + 0.5*u1^2").unwrap(),
    )
    .unwrap()
}

/// Independent composition oracle for the cotangent lift: assemble
/// `Φ⁻¹ ∘ (T R_d⁻¹)* ∘ α_Q` from the three canonical symplectomorphisms
/// using only `R_d` itself. The Jacobian of the affine `R_d` is
/// recovered exactly by differencing against the image of the origin.
fn lift_by_composition(d: &DiscretizationMap, z: &[f64]) -> Vec<f64> {
    let n = d.dim();
    let (q, p, qdot, pdot) = (&z[..n], &z[n..2 * n], &z[2 * n..3 * n], &z[3 * n..]);

    // α_Q⁻¹: (q, p, q̇, ṗ) -> base (q, q̇) with covector (ṗ, p)
    let base: Vec<f64> = q.iter().chain(qdot.iter()).copied().collect();
    let covector: Vec<f64> = pdot.iter().chain(p.iter()).copied().collect();

    let rd = |xv: &[f64]| -> Vec<f64> {
        let (a, b) = d.apply(&xv[..n], &xv[n..]).unwrap();
        [a, b].concat()
    };
    let image0 = rd(&base);
    let mut jac = Mat::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut e = base.clone();
        e[j] += 1.0;
        let col = rd(&e);
        for i in 0..2 * n {
            jac.set(i, j, col[i] - image0[i]);
        }
    }

    // (T R_d⁻¹)*: solve (D R_d)^T β = α
    let beta = lu_solve(&jac.transpose(), &covector).unwrap();

    // Φ⁻¹: (q0, q1, P0, P1) -> (q0, -P0; q1, P1)
    let q0 = image0[..n].to_vec();
    let q1 = image0[n..].to_vec();
    let p0: Vec<f64> = beta[..n].iter().map(|v| -v).collect();
    let p1: Vec<f64> = beta[n..].to_vec();
    [q0, p0, q1, p1].concat()
}

#[test]
fn criterion_1_example_lift_reproduction() {
    let started = Instant::now();

    // the midpoint lift written out with literal 1/2 coefficients
    let half_formula = |q: f64, p: f64, qd: f64, pd: f64| -> [f64; 4] {
        [q - 0.5 * qd, p - 0.5 * pd, q + 0.5 * qd, p + 0.5 * pd]
    };
    let lift_half = DiscretizationMap::theta_method(1, 0.5).unwrap().cotangent_lift();
    let mut rng = StdRng::seed_from_u64(101);
    for _ in 0..100 {
        // dyadic points make both routes bit-identical
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-32..32) as f64 / 8.0).collect();
        let got = lift_half.apply_flat(&z).unwrap();
        let want = half_formula(z[0], z[1], z[2], z[3]);
        assert_eq!(got, want.to_vec(), "exact coefficient match failed at {z:?}");
    }

    // composition oracle at 100 random points for the whole family
    let mut rng = StdRng::seed_from_u64(102);
    for &theta in &THETA_FAMILY {
        for n in [1usize, 2] {
            let d = DiscretizationMap::theta_method(n, theta).unwrap();
            let lift = d.cotangent_lift();
            for _ in 0..100 {
                let z: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let closed = lift.apply_flat(&z).unwrap();
                let composed = lift_by_composition(&d, &z);
                for i in 0..4 * n {
                    assert!(
                        (closed[i] - composed[i]).abs() <= 1e-12,
                        "theta {theta}, coord {i}: closed {} vs composed {}",
                        closed[i],
                        composed[i]
                    );
                }
            }
        }
    }

    finish(1, "example-3 lift reproduction", started, Duration::from_secs(1));
}

#[test]
fn criterion_2_lift_is_symplectomorphism() {
    let started = Instant::now();

    for &theta in &THETA_FAMILY {
        for n in [1usize, 2] {
            let lift = DiscretizationMap::theta_method(n, theta).unwrap().cotangent_lift();
            let residual = verify_lift_symplectomorphism(&lift, 25, 7).unwrap();
            assert!(residual <= 1e-8, "theta {theta}, n {n}: residual {residual:.3e}");
        }
    }

    // negative control: momenta not swapped, theta = 0
    let wrong = |z: &[f64]| -> Result<Vec<f64>, Error> {
        let (q, p, qd, pd) = (z[0], z[1], z[2], z[3]);
        Ok(vec![q, p, q + qd, p + pd])
    };
    let bad = verify_symplecto_generic(wrong, 1, 25, 7).unwrap();
    assert!(bad >= 0.5, "negative control too quiet: {bad:.3e}");

    finish(2, "lift symplectomorphism", started, Duration::from_secs(1));
}

#[test]
fn criterion_3_symplectic_integrator() {
    let started = Instant::now();
    let opts = StepOptions { tol: 1e-12, max_iter: 60 };

    // one-step symplecticity on three systems, three thetas
    let mut rng = StdRng::seed_from_u64(301);
    let mut cubic_coeff = || rng.gen_range(-0.3..0.3);
    let cubic = format!(
        "0.5*p1^2 + 0.5*q1^2 + {}*q1^3 + {}*q1^2*p1 + {}*q1*p1^2 + {}*p1^3",
        cubic_coeff(),
        cubic_coeff(),
        cubic_coeff(),
        cubic_coeff()
    );
    let systems = [
        ("harmonic", HamiltonianSystem::parse(1, "(p1^2 + q1^2)/2").unwrap()),
        ("pendulum", HamiltonianSystem::parse(1, "p1^2/2 - cos(q1)").unwrap()),
        ("random cubic", HamiltonianSystem::parse(1, &cubic).unwrap()),
    ];
    for (name, sys) in &systems {
        for theta in [0.0, 0.5, 1.0] {
            let lift = DiscretizationMap::theta_method(1, theta).unwrap().cotangent_lift();
            let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
                let (q, p, _) = hamiltonian::symplectic_step(sys, &lift, 0.05, &z[..1], &z[1..], &opts)?;
                Ok([q, p].concat())
            };
            let res = symplecticity_residual(step, &[0.4, 0.3], diagnostics::DEFAULT_FD_STEP).unwrap();
            assert!(res <= 1e-6, "{name}, theta {theta}: residual {res:.3e}");
        }
    }

    // midpoint energy drift on quadratic H over 1000 steps
    let harmonic = &systems[0].1;
    let midpoint = DiscretizationMap::theta_method(1, 0.5).unwrap().cotangent_lift();
    let traj = hamiltonian::integrate(harmonic, &midpoint, 0.01, 1000, &[1.0], &[0.0], &opts).unwrap();
    let drift = energy_drift(&traj, harmonic.hamiltonian()).unwrap();
    assert!(drift <= 1e-10, "midpoint energy drift {drift:.3e}");

    // convergence slopes over t in [0, 1]
    let reference = vec![1.0f64.cos(), -(1.0f64.sin())];
    let h_list: Vec<f64> = (0..6).map(|j| 0.1 * 0.5f64.powi(j)).collect();
    let slope_for = |theta: f64| -> f64 {
        let lift = DiscretizationMap::theta_method(1, theta).unwrap().cotangent_lift();
        let run = |h: f64| -> Result<Vec<f64>, Error> {
            let steps = (1.0 / h).round() as usize;
            let traj = hamiltonian::integrate(harmonic, &lift, h, steps, &[1.0], &[0.0], &opts)
                .map_err(|e| e.source)?;
            let last = traj.last();
            Ok([last.q.clone(), last.p.clone()].concat())
        };
        match convergence_order(run, &h_list, &reference).unwrap() {
            ConvergenceOrder::Slope(s) => s,
            ConvergenceOrder::Degenerate => panic!("degenerate convergence study"),
        }
    };
    let s_mid = slope_for(0.5);
    assert!((s_mid - 2.0).abs() <= 0.15, "midpoint slope {s_mid}");
    for theta in [0.0, 1.0] {
        let s = slope_for(theta);
        assert!((s - 1.0).abs() <= 0.15, "theta {theta} slope {s}");
    }

    finish(3, "symplectic integrator", started, Duration::from_secs(10));
}

#[test]
fn criterion_4_morse_and_regularity() {
    let started = Instant::now();

    let singular = build_pontryagin(&singular_ocp());
    // fiber-critical samples: q2 = 0, u1 free to project, u2 anything
    let samples = vec![
        vec![0.5, 0.0, -0.3, 0.8, 0.0, 0.4],
        vec![-1.0, 0.0, 0.4, -0.2, 1.0, -0.7],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ];
    let morse = morse_family_check(&singular, &samples, 1e-9).unwrap();
    assert!(morse.is_morse_at_samples);
    assert_eq!(morse.min_rank, 2);
    assert_eq!(
        classify_regularity(&singular, &samples, 1e-9).unwrap(),
        Regularity::Singular
    );

    let lqr = build_pontryagin(&lqr_ocp());
    let lqr_samples = vec![vec![0.0; 5], vec![0.7, -0.3, 0.2, 0.9, 0.1]];
    assert_eq!(
        classify_regularity(&lqr, &lqr_samples, 1e-9).unwrap(),
        Regularity::Regular
    );
    let lqr_morse = morse_family_check(&lqr, &lqr_samples, 1e-9).unwrap();
    assert!(lqr_morse.is_morse_at_samples);
    assert_eq!(lqr_morse.min_rank, 1);

    finish(4, "morse family and regularity", started, Duration::from_secs(1));
}

#[test]
fn criterion_5_constraint_algorithm() {
    let started = Instant::now();

    // the singular example: exact structure of the cascade output
    let sys = build_pontryagin(&singular_ocp());
    let cres = constraint_algorithm(&sys, &ConstraintOptions::default()).unwrap();
    assert_eq!(cres.determined.len(), 1);
    assert_eq!(cres.determined[0].index, 0, "u1 must be determined");
    assert_eq!(cres.gauge, vec![1], "u2 must stay gauge");
    assert_eq!(cres.constraints.len(), 1, "exactly one constraint");
    // the constraint is q2 = 0 (up to sign)
    let psi = &cres.constraints[0].expr;
    let b = Binding::from_pairs([("q1", 0.7), ("q2", 1.0), ("p1", -0.3), ("p2", 0.5)]);
    assert!((expr::eval(psi, &b).unwrap().abs() - 1.0).abs() <= 1e-12);
    let b0 = Binding::from_pairs([("q1", 0.7), ("q2", 0.0), ("p1", -0.3), ("p2", 0.5)]);
    assert_eq!(expr::eval(psi, &b0).unwrap(), 0.0);
    assert_eq!(cres.dim_final, 3, "P^f must be three-dimensional");
    assert_eq!(cres.omega_f_kernel_dim, 1, "ker omega_f must be one-dimensional");
    assert_eq!(cres.kernel_coordinate_names(), vec!["p2".to_string()]);

    // constructed cascade: a genuine secondary constraint at level 1 and
    // tangency at 32 random witness points
    let cascade = OcpDefinition::new(
        2,
        2,
        vec![expr::parse("u1").unwrap(), expr::parse("q1").unwrap()],
        expr::parse("0.5*u1^2 + q2*u2").unwrap(),
    )
    .unwrap();
    let csys = build_pontryagin(&cascade);
    let copts = ConstraintOptions { witness_count: 32, seed: 5, ..ConstraintOptions::default() };
    let ccres = constraint_algorithm(&csys, &copts).unwrap();
    let secondary: Vec<_> = ccres.constraints.iter().filter(|c| c.level == 1).collect();
    assert_eq!(secondary.len(), 1, "exactly one secondary constraint at level 1");
    let grad_q1 = expr::diff(&secondary[0].expr, "q1");
    let b = Binding::from_pairs([("q1", 0.0), ("q2", 0.0), ("p1", 0.0), ("p2", 0.0)]);
    assert!(expr::eval(&grad_q1, &b).unwrap().abs() > 0.5, "secondary constraint pins q1");

    assert_eq!(ccres.witness.len(), 32, "all 32 draws must project onto the final set");
    let tang = tangency_residual(&csys, &ccres, &ccres.witness).unwrap();
    assert!(tang <= 1e-8, "cascade tangency {tang:.3e}");
    let tang_singular = tangency_residual(&sys, &cres, &cres.witness).unwrap();
    assert!(tang_singular <= 1e-8, "singular-example tangency {tang_singular:.3e}");
    assert_eq!(cres.witness.len(), 32, "witness projection must keep all 32 draws");

    finish(5, "constraint algorithm", started, Duration::from_secs(2));
}

#[test]
fn criterion_6_presymplectic_integrator() {
    let started = Instant::now();

    let sys = build_pontryagin(&singular_ocp());
    let cres = constraint_algorithm(&sys, &ConstraintOptions::default()).unwrap();
    let lift = DiscretizationMap::theta_method(2, 0.5).unwrap().cotangent_lift();
    let h = 0.05;

    // tuples generated from the discrete midpoint equations of the
    // singular problem, solved independently as a 4x4 linear system in
    // (x', px', py', u1)
    let mut rng = StdRng::seed_from_u64(601);
    for _ in 0..20 {
        let (x, px, py) = (
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        );
        let u2 = rng.gen_range(-1.0..1.0);
        let a = Mat::from_rows(&[
            vec![1.0 / h - 0.5, 0.0, 0.0, -1.0],
            vec![-0.5, 1.0 / h + 0.5, 0.0, -1.0],
            vec![0.0, 0.0, 1.0 / h + 0.5, 0.0],
            vec![-0.5, 0.5, 0.0, -1.0],
        ]);
        let rhs = vec![
            x / h + 0.5 * x,
            px / h - 0.5 * px + 0.5 * x,
            py / h - 0.5 * py + u2,
            0.5 * x - 0.5 * px,
        ];
        let v = lu_solve(&a, &rhs).unwrap();
        // the implemented residual system must vanish on the
        // independently solved tuple
        let residual = step_residual(
            &sys,
            &cres,
            &lift,
            h,
            &[x, 0.0],
            &[px, py],
            &[v[0], 0.0],
            &[v[1], v[2]],
            &[v[3], u2],
        )
        .unwrap();
        for (i, r) in residual.iter().enumerate() {
            assert!(r.abs() <= 1e-12, "residual row {i} on an independent tuple: {r:.3e}");
        }
        // and the solver must land on the same tuple
        let (qn, pn, u, _) = presymplectic_step(
            &sys,
            &cres,
            &lift,
            h,
            &[x, 0.0],
            &[px, py],
            &[u2],
            &OcpStepOptions::default(),
        )
        .unwrap();
        assert!((qn[0] - v[0]).abs() <= 1e-10);
        assert!(qn[1].abs() <= 1e-12);
        assert!((pn[0] - v[1]).abs() <= 1e-10);
        assert!((pn[1] - v[2]).abs() <= 1e-10);
        assert!((u[0] - v[3]).abs() <= 1e-10);
    }

    // constraint drift over 100 steps
    let traj = integrate_ocp(
        &sys,
        &cres,
        &lift,
        0.01,
        100,
        &[1.0, 0.0],
        &[0.2, 0.4],
        &[0.0],
        &OcpStepOptions::default(),
    )
    .unwrap();
    let psis: Vec<Expr> = cres.constraints.iter().map(|c| c.expr.clone()).collect();
    let drift = diagnostics::constraint_drift(&traj, &psis).unwrap();
    assert!(drift <= 1e-10, "constraint drift {drift:.3e}");

    // presymplectic residual of one step in P^f coordinates
    let opts = OcpStepOptions { manifold_tol: 1e-6, ..OcpStepOptions::default() };
    let step = |z: &[f64]| -> Result<Vec<f64>, Error> {
        let (q, p, _, _) = presymplectic_step(&sys, &cres, &lift, h, &z[..2], &z[2..], &[0.0], &opts)?;
        Ok([q, p].concat())
    };
    let res = presymplectic_residual(step, &cres, &[0.8, 0.0, -0.4, 0.6], diagnostics::DEFAULT_FD_STEP).unwrap();
    assert!(res <= 1e-6, "presymplectic residual {res:.3e}");

    // gauge decoupling: u2 = 0 vs u2 = 1
    let run = |u2: f64| {
        integrate_ocp(
            &sys,
            &cres,
            &lift,
            0.01,
            100,
            &[1.0, 0.0],
            &[0.2, 0.4],
            &[u2],
            &OcpStepOptions::default(),
        )
        .unwrap()
    };
    let t0 = run(0.0);
    let t1 = run(1.0);
    for (a, b) in t0.samples.iter().zip(&t1.samples) {
        assert!((a.q[0] - b.q[0]).abs() <= 1e-12, "x decoupling");
        assert!((a.p[0] - b.p[0]).abs() <= 1e-12, "px decoupling");
    }
    let py_gap = (t0.samples.last().unwrap().p[1] - t1.samples.last().unwrap().p[1]).abs();
    assert!(py_gap > 1e-3, "py must react to the gauge schedule");

    finish(6, "presymplectic integrator", started, Duration::from_secs(5));
}

#[test]
fn criterion_7_regular_case_equivalence() {
    let started = Instant::now();

    let sys = build_pontryagin(&lqr_ocp());
    let cres = constraint_algorithm(&sys, &ConstraintOptions::default()).unwrap();
    assert!(cres.constraints.is_empty());
    let lift = DiscretizationMap::theta_method(2, 0.5).unwrap().cotangent_lift();
    let opts = OcpStepOptions::default();
    let traj = integrate_ocp(&sys, &cres, &lift, 0.01, 100, &[1.0, 0.0], &[0.3, -0.2], &[], &opts).unwrap();

    // reduce symbolically through the determined-control formulas and
    // run the plain symplectic method on the eliminated Hamiltonian
    let h_red = reduced_hamiltonian(&sys, &cres, &[]).unwrap();
    let red = HamiltonianSystem::new(2, h_red).unwrap();
    let hopts = StepOptions::default();
    let ref_traj = hamiltonian::integrate(&red, &lift, 0.01, 100, &[1.0, 0.0], &[0.3, -0.2], &hopts).unwrap();

    for (a, b) in traj.samples.iter().zip(&ref_traj.samples) {
        for i in 0..2 {
            assert!(
                (a.q[i] - b.q[i]).abs() <= 1e-10,
                "q{i} diverges: {} vs {}",
                a.q[i],
                b.q[i]
            );
            assert!(
                (a.p[i] - b.p[i]).abs() <= 1e-10,
                "p{i} diverges: {} vs {}",
                a.p[i],
                b.p[i]
            );
        }
    }

    finish(7, "regular-case equivalence", started, Duration::from_secs(5));
}

#[test]
fn criterion_8_appendix_suite() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(801);

    // --- dimension formula on random symplectic and presymplectic cases
    // presymplectic prototype: J (x) 0_1 on R^5, pushed through random
    // invertible maps; Lagrangian prototype: the q-plane plus a kernel
    // direction
    let d = 5;
    let mut omega_n_mat = Mat::zeros(d, d);
    omega_n_mat.set(0, 2, 1.0);
    omega_n_mat.set(2, 0, -1.0);
    omega_n_mat.set(1, 3, 1.0);
    omega_n_mat.set(3, 1, -1.0);
    let omega_n = FormMatrix::new(omega_n_mat).unwrap();
    let l_n = [
        vec![1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0],
    ];
    let base_report = lagrangian_check(&omega_n, &SubspaceBasis::from_columns(&l_n).unwrap(), 1e-9);
    assert!(base_report.is_lagrangian());
    assert_eq!(base_report.r_expected, 3);

    for _ in 0..100 {
        // propopre: pull back both the form and the subspace through a
        // random invertible B
        let b = Mat::from_fn(d, d, |i, j| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if i == j {
                v + 3.0
            } else {
                v
            }
        });
        let omega_m = FormMatrix::antisymmetrize(&b.transpose().matmul(omega_n.matrix()).matmul(&b));
        let cols: Vec<Vec<f64>> = l_n.iter().map(|c| lu_solve(&b, c).unwrap()).collect();
        let report = lagrangian_check(&omega_m, &SubspaceBasis::from_columns(&cols).unwrap(), 1e-9);
        assert!(report.is_lagrangian(), "pullback Lagrangian lost");

        // negative case: a non-isotropic plane in the same form must fail
        let bad = [lu_solve(&b, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
                   lu_solve(&b, &[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
                   lu_solve(&b, &[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap()];
        let bad_report = lagrangian_check(&omega_m, &SubspaceBasis::from_columns(&bad).unwrap(), 1e-9);
        assert!(!bad_report.is_lagrangian(), "q1-p1 plane cannot be isotropic");
    }

    // --- graphs of random symplectic matrices (Cayley construction)
    let omega = FormMatrix::canonical(2);
    for _ in 0..100 {
        let sym = {
            let mut s = Mat::zeros(4, 4);
            for i in 0..4 {
                for j in 0..=i {
                    let v = rng.gen_range(-0.4..0.4);
                    s.set(i, j, v);
                    s.set(j, i, v);
                }
            }
            s
        };
        let a = omega.matrix().matmul(&sym);
        let eye = Mat::identity(4);
        let i_minus = eye.sub(&a);
        let i_plus = eye.sub(&a.scaled(-1.0));
        let mut cayley = Mat::zeros(4, 4);
        for col in 0..4 {
            let x = lu_solve(&i_minus, &i_plus.col(col)).unwrap();
            for row in 0..4 {
                cayley.set(row, col, x[row]);
            }
        }
        let report = geomint::diagnostics::graph_lagrangian_check(&cayley, &omega, &omega, 1e-9).unwrap();
        assert!(report.holds(), "graph of a symplectic matrix must be Lagrangian");

        // negative control: a generic matrix is not symplectic
        let noise = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let report = geomint::diagnostics::graph_lagrangian_check(&noise, &omega, &omega, 1e-9).unwrap();
        assert!(!report.holds(), "random matrix slipped through the graph check");
    }

    // --- the S^f tangent model of the singular example is Lagrangian in
    // (T P^f, d_T omega_f), assembled from the defining equations
    let sys = build_pontryagin(&singular_ocp());
    let cres = constraint_algorithm(&sys, &ConstraintOptions::default()).unwrap();
    let basis = sf_tangent_basis(&sys, &cres, &[0.8, 0.0, -0.4, 0.6], &[0.3]).unwrap();
    let lifted = FormMatrix::tangent_lift(&cres.omega_f);
    // finite-difference columns: round to exact integers before the
    // strict isotropy test (the embedding is affine, FD noise ~1e-11)
    let rounded = Mat::from_fn(basis.rows(), basis.cols(), |i, j| basis.get(i, j).round());
    assert!(basis.sub(&rounded).max_abs() <= 1e-9, "S^f embedding should be affine");
    let report = lagrangian_check(&lifted, &SubspaceBasis::new(rounded).unwrap(), 1e-9);
    assert!(report.is_lagrangian(), "S^f tangent model must be Lagrangian (r_expected {})", report.r_expected);

    // rank of the d2 test matrix used throughout: zero false verdicts
    // also means the degenerate direction is really in the kernel
    assert_eq!(rank(&cres.omega_f, 1e-9).rank, 2);

    finish(8, "appendix suite", started, Duration::from_secs(2));
}
