//! Discretization maps on `T R^n` and their cotangent lifts to `T T*R^n`.
//!
//! The shipped family is the θ-methods
//! `R_d(x, v) = (x - θ v, x + (1-θ) v)`, θ in `[0, 1]`, which covers
//! explicit Euler (θ=0), the midpoint rule (θ=1/2) and implicit Euler
//! (θ=1). Their lifts have closed-form inverses, so every implicit step
//! downstream reduces to a plain root solve.
//!
//! The lift swaps θ and 1-θ on the momentum legs:
//!
//! ```text
//! q0 = q - θ q̇        q1 = q + (1-θ) q̇
//! p0 = p - (1-θ) ṗ     p1 = p + θ ṗ
//! ```
//!
//! This closed form is validated against the composition
//! `Φ⁻¹ ∘ (T R_d⁻¹)* ∘ α_Q` assembled from the three canonical
//! symplectomorphisms (see the unit tests and the acceptance suite, which
//! build that composition independently).

use crate::numeric::Mat;
use crate::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A θ-family discretization map on `T R^n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationMap {
    n: usize,
    theta: f64,
}

impl DiscretizationMap {
    /// θ-method with `theta` in `[0, 1]` on `R^n`.
    pub fn theta_method(n: usize, theta: f64) -> Result<DiscretizationMap, Error> {
        if n == 0 {
            return Err(Error::Invalid("state dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&theta) || !theta.is_finite() {
            return Err(Error::Invalid(format!("theta must lie in [0, 1], got {theta}")));
        }
        Ok(DiscretizationMap { n, theta })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn check_dim(&self, v: &[f64], what: &'static str) -> Result<(), Error> {
        if v.len() != self.n {
            return Err(Error::Dimension { what, expected: self.n, got: v.len() });
        }
        Ok(())
    }

    /// `R_d(x, v) = (x - θ v, x + (1-θ) v)`.
    pub fn apply(&self, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>), Error> {
        self.check_dim(x, "apply base point")?;
        self.check_dim(v, "apply velocity")?;
        let x0 = x.iter().zip(v).map(|(xi, vi)| xi - self.theta * vi).collect();
        let x1 = x.iter().zip(v).map(|(xi, vi)| xi + (1.0 - self.theta) * vi).collect();
        Ok((x0, x1))
    }

    /// Exact inverse: `v = x1 - x0`, `x = (1-θ) x0 + θ x1`.
    pub fn invert(&self, x0: &[f64], x1: &[f64]) -> Result<(Vec<f64>, Vec<f64>), Error> {
        self.check_dim(x0, "invert first point")?;
        self.check_dim(x1, "invert second point")?;
        let v = x1.iter().zip(x0).map(|(b, a)| b - a).collect();
        let x = x0
            .iter()
            .zip(x1)
            .map(|(a, b)| (1.0 - self.theta) * a + self.theta * b)
            .collect();
        Ok((x, v))
    }

    /// Cotangent lift to a discretization map on `T*R^n`.
    pub fn cotangent_lift(self) -> LiftedMap {
        LiftedMap { base: self }
    }
}

/// Cotangent lift `R_d^{T*}: T T*Q -> T*Q x T*Q` of a θ-method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftedMap {
    base: DiscretizationMap,
}

impl LiftedMap {
    pub fn dim(&self) -> usize {
        self.base.n
    }

    pub fn theta(&self) -> f64 {
        self.base.theta
    }

    pub fn base(&self) -> &DiscretizationMap {
        &self.base
    }

    fn check_dim(&self, v: &[f64], what: &'static str) -> Result<(), Error> {
        if v.len() != self.base.n {
            return Err(Error::Dimension { what, expected: self.base.n, got: v.len() });
        }
        Ok(())
    }

    /// Forward map `(q, p, q̇, ṗ) -> (q0, p0; q1, p1)`.
    pub fn apply(
        &self,
        q: &[f64],
        p: &[f64],
        qdot: &[f64],
        pdot: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), Error> {
        self.check_dim(q, "lift q")?;
        self.check_dim(p, "lift p")?;
        self.check_dim(qdot, "lift qdot")?;
        self.check_dim(pdot, "lift pdot")?;
        let th = self.base.theta;
        let q0 = q.iter().zip(qdot).map(|(a, d)| a - th * d).collect();
        let q1 = q.iter().zip(qdot).map(|(a, d)| a + (1.0 - th) * d).collect();
        let p0 = p.iter().zip(pdot).map(|(a, d)| a - (1.0 - th) * d).collect();
        let p1 = p.iter().zip(pdot).map(|(a, d)| a + th * d).collect();
        Ok((q0, p0, q1, p1))
    }

    /// Exact inverse `(q0, p0; q1, p1) -> (q, p, q̇, ṗ)`.
    ///
    /// The base point `(q, p)` realizes the tangent projection used by
    /// the implicit one-step methods.
    pub fn invert(
        &self,
        q0: &[f64],
        p0: &[f64],
        q1: &[f64],
        p1: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), Error> {
        self.check_dim(q0, "unlift q0")?;
        self.check_dim(p0, "unlift p0")?;
        self.check_dim(q1, "unlift q1")?;
        self.check_dim(p1, "unlift p1")?;
        let th = self.base.theta;
        let qdot: Vec<f64> = q1.iter().zip(q0).map(|(b, a)| b - a).collect();
        let pdot: Vec<f64> = p1.iter().zip(p0).map(|(b, a)| b - a).collect();
        let q = q0.iter().zip(q1).map(|(a, b)| (1.0 - th) * a + th * b).collect();
        let p = p0.iter().zip(p1).map(|(a, b)| th * a + (1.0 - th) * b).collect();
        Ok((q, p, qdot, pdot))
    }

    /// Forward map on a flat `R^{4n}` vector, ordered `(q, p, q̇, ṗ)`,
    /// producing `(q0, p0, q1, p1)` flattened.
    pub fn apply_flat(&self, z: &[f64]) -> Result<Vec<f64>, Error> {
        let n = self.base.n;
        if z.len() != 4 * n {
            return Err(Error::Dimension { what: "lift flat input", expected: 4 * n, got: z.len() });
        }
        let (q0, p0, q1, p1) = self.apply(&z[..n], &z[n..2 * n], &z[2 * n..3 * n], &z[3 * n..])?;
        Ok([q0, p0, q1, p1].concat())
    }
}

/// Matrix of `Ω₁₂ = pr₂* ω_Q - pr₁* ω_Q` on `(q0, p0, q1, p1)`.
fn omega_12(n: usize) -> Mat {
    let mut m = Mat::zeros(4 * n, 4 * n);
    for i in 0..n {
        // -ω on the first leg: -(dq0 ∧ dp0)
        m.set(i, n + i, -1.0);
        m.set(n + i, i, 1.0);
        // +ω on the second leg: dq1 ∧ dp1
        m.set(2 * n + i, 3 * n + i, 1.0);
        m.set(3 * n + i, 2 * n + i, -1.0);
    }
    m
}

/// Matrix of the tangent lift `d_T ω_Q` on `(q, p, q̇, ṗ)`:
/// the pairing `dq ∧ dṗ + dq̇ ∧ dp`.
fn omega_tangent_lift(n: usize) -> Mat {
    let mut m = Mat::zeros(4 * n, 4 * n);
    for i in 0..n {
        // dq_i ∧ dṗ_i
        m.set(i, 3 * n + i, 1.0);
        m.set(3 * n + i, i, -1.0);
        // dq̇_i ∧ dp_i
        m.set(2 * n + i, n + i, 1.0);
        m.set(n + i, 2 * n + i, -1.0);
    }
    m
}

/// Check `M^T Ω₁₂ M = d_T ω_Q` for the finite-difference Jacobian `M` of
/// a map `R^{4n} -> R^{4n}` at `samples` random points; returns the
/// largest absolute deviation.
pub fn verify_symplecto_generic<F>(map: F, n: usize, samples: usize, seed: u64) -> Result<f64, Error>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, Error>,
{
    assert!(samples >= 1, "need at least one sample");
    let mut rng = StdRng::seed_from_u64(seed);
    let omega12 = omega_12(n);
    let omega_dt = omega_tangent_lift(n);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let z: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let jac = fd_jacobian_of(&map, &z)?;
        let check = jac.transpose().matmul(&omega12).matmul(&jac).sub(&omega_dt);
        worst = worst.max(check.max_abs());
    }
    Ok(worst)
}

/// Symplectomorphism check for a lifted map: `R_d^{T*}` must pull
/// `Ω₁₂` back to `d_T ω_Q`. Returns the max residual over `samples`
/// random points.
pub fn verify_lift_symplectomorphism(lift: &LiftedMap, samples: usize, seed: u64) -> Result<f64, Error> {
    verify_symplecto_generic(|z| lift.apply_flat(z), lift.dim(), samples, seed)
}

/// Verify the two defining properties of a discretization map given its
/// two components: `R_d(x, 0) = (x, x)` and
/// `T_0 R² - T_0 R¹ = Id` (checked by central differences). Returns the
/// largest deviation observed.
pub fn verify_discretization_properties<F>(map: F, n: usize, samples: usize, seed: u64) -> Result<f64, Error>
where
    F: Fn(&[f64], &[f64]) -> Result<(Vec<f64>, Vec<f64>), Error>,
{
    assert!(samples >= 1, "need at least one sample");
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let zero = vec![0.0; n];
    for _ in 0..samples {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // property 1: the zero section maps to the diagonal
        let (r1, r2) = map(&x, &zero)?;
        for i in 0..n {
            worst = worst.max((r1[i] - x[i]).abs());
            worst = worst.max((r2[i] - x[i]).abs());
        }
        // property 2: d/dv (R² - R¹) at v = 0 is the identity
        let h = 1e-6;
        for j in 0..n {
            let mut vp = vec![0.0; n];
            vp[j] = h;
            let (ap, bp) = map(&x, &vp)?;
            vp[j] = -h;
            let (am, bm) = map(&x, &vp)?;
            for i in 0..n {
                let d2 = (bp[i] - bm[i]) / (2.0 * h);
                let d1 = (ap[i] - am[i]) / (2.0 * h);
                let expected = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d2 - d1 - expected).abs());
            }
        }
    }
    Ok(worst)
}

fn fd_jacobian_of<F>(map: &F, z: &[f64]) -> Result<Mat, Error>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, Error>,
{
    let dim = z.len();
    let out0 = map(z)?;
    let mut jac = Mat::zeros(out0.len(), dim);
    let mut zp = z.to_vec();
    for j in 0..dim {
        let h = 1e-6 * (1.0 + z[j].abs());
        zp[j] = z[j] + h;
        let fp = map(&zp)?;
        zp[j] = z[j] - h;
        let fm = map(&zp)?;
        zp[j] = z[j];
        for i in 0..fp.len() {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    Ok(jac)
}
