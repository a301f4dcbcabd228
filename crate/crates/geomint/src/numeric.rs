//! Small dense linear algebra and a damped Newton solver.
//!
//! Everything here operates on value types and is pure; the matrices are
//! tiny (a handful of rows), so the solvers are plain textbook
//! implementations with explicit pivot tolerances rather than bindings to
//! a BLAS.

use std::fmt;

/// Relative pivot threshold below which LU declares a matrix singular.
pub const SINGULAR_PIVOT_REL: f64 = 1e-12;

/// Default relative tolerance for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum LinAlgError {
    Dimension { what: &'static str, expected: usize, got: usize },
    Singular { pivot: f64, threshold: f64 },
    /// Residual evaluation failed inside an iterative solver.
    Residual(String),
}

impl fmt::Display for LinAlgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinAlgError::Dimension { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            LinAlgError::Singular { pivot, threshold } => {
                write!(f, "singular matrix: pivot {pivot:.3e} below threshold {threshold:.3e}")
            }
            LinAlgError::Residual(msg) => write!(f, "residual evaluation failed: {msg}"),
        }
    }
}

impl std::error::Error for LinAlgError {}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "entry count must be rows*cols");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.set(i, j, out.get(i, j) + a * other.get(k, j));
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matrix-vector dimension mismatch");
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    /// Operator infinity norm (max row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Columns as vectors.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "row counts must agree");
        Mat::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                other.get(i, j - self.cols)
            }
        })
    }
}

pub fn vec_norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn vec_norm_2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solve `A x = b` by LU with partial pivoting.
///
/// A pivot of magnitude below `SINGULAR_PIVOT_REL * ||A||_inf` raises
/// [`LinAlgError::Singular`].
pub fn lu_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>, LinAlgError> {
    if a.rows() != a.cols() {
        return Err(LinAlgError::Dimension { what: "lu_solve (square)", expected: a.rows(), got: a.cols() });
    }
    if b.len() != a.rows() {
        return Err(LinAlgError::Dimension { what: "lu_solve rhs", expected: a.rows(), got: b.len() });
    }
    let n = a.rows();
    let threshold = SINGULAR_PIVOT_REL * a.norm_inf().max(f64::MIN_POSITIVE);
    let mut lu = a.clone();
    let mut x = b.to_vec();
    for k in 0..n {
        // partial pivoting on column k
        let mut pivot_row = k;
        let mut pivot_val = lu.get(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.get(i, k).abs();
            if v > pivot_val {
                pivot_row = i;
                pivot_val = v;
            }
        }
        if pivot_val < threshold {
            return Err(LinAlgError::Singular { pivot: pivot_val, threshold });
        }
        if pivot_row != k {
            for j in 0..n {
                let tmp = lu.get(k, j);
                lu.set(k, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, tmp);
            }
            x.swap(k, pivot_row);
        }
        for i in (k + 1)..n {
            let factor = lu.get(i, k) / lu.get(k, k);
            if factor == 0.0 {
                continue;
            }
            for j in (k + 1)..n {
                lu.set(i, j, lu.get(i, j) - factor * lu.get(k, j));
            }
            x[i] -= factor * x[k];
        }
    }
    // back substitution
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= lu.get(i, j) * x[j];
        }
        x[i] = s / lu.get(i, i);
    }
    Ok(x)
}

/// Result of a rank computation: the numerical rank together with bases
/// of `ker A` and `ker A^T`.
#[derive(Debug, Clone)]
pub struct RankResult {
    pub rank: usize,
    /// Column indices chosen as pivots, in elimination order.
    pub pivot_cols: Vec<usize>,
    /// Basis vectors of the null space of `A` (length = cols each).
    pub kernel: Vec<Vec<f64>>,
    /// Basis vectors of the null space of `A^T` (length = rows each).
    pub cokernel: Vec<Vec<f64>>,
}

/// Numerical rank by Gaussian elimination with full pivoting.
///
/// Pivots below `tol * (largest initial pivot)` count as zero. The
/// kernel bases come from back-substitution on the echelon form with one
/// free column set to 1 at a time.
pub fn rank(a: &Mat, tol: f64) -> RankResult {
    assert!(tol > 0.0, "rank tolerance must be positive");
    let (rank, pivot_cols, kernel) = echelon_kernel(a, tol);
    let (_, _, cokernel) = echelon_kernel(&a.transpose(), tol);
    RankResult { rank, pivot_cols, kernel, cokernel }
}

/// Full-pivot elimination returning (rank, pivot columns, kernel basis).
fn echelon_kernel(a: &Mat, tol: f64) -> (usize, Vec<usize>, Vec<Vec<f64>>) {
    let rows = a.rows();
    let cols = a.cols();
    let mut m = a.clone();
    let mut row_perm: Vec<usize> = (0..rows).collect();
    let mut col_perm: Vec<usize> = (0..cols).collect();
    let mut rank = 0;
    let mut threshold = 0.0;

    for k in 0..rows.min(cols) {
        // full pivot search in the trailing block
        let mut best = (k, k, 0.0f64);
        for i in k..rows {
            for j in k..cols {
                let v = m.get(i, j).abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if k == 0 {
            threshold = tol * best.2;
        }
        if best.2 <= threshold || best.2 == 0.0 {
            break;
        }
        let (pi, pj, _) = best;
        if pi != k {
            for j in 0..cols {
                let tmp = m.get(k, j);
                m.set(k, j, m.get(pi, j));
                m.set(pi, j, tmp);
            }
            row_perm.swap(k, pi);
        }
        if pj != k {
            for i in 0..rows {
                let tmp = m.get(i, k);
                m.set(i, k, m.get(i, pj));
                m.set(i, pj, tmp);
            }
            col_perm.swap(k, pj);
        }
        for i in (k + 1)..rows {
            let factor = m.get(i, k) / m.get(k, k);
            if factor == 0.0 {
                continue;
            }
            m.set(i, k, 0.0);
            for j in (k + 1)..cols {
                m.set(i, j, m.get(i, j) - factor * m.get(k, j));
            }
        }
        rank += 1;
    }

    let pivot_cols: Vec<usize> = col_perm[..rank].to_vec();
    // kernel: for each free (permuted) column f >= rank, set that
    // variable to 1 and back-substitute the pivot variables
    let mut kernel = Vec::with_capacity(cols - rank);
    for f in rank..cols {
        let mut y = vec![0.0; cols]; // solution in permuted variables
        y[f] = 1.0;
        for i in (0..rank).rev() {
            let mut s = 0.0;
            for j in (i + 1)..cols {
                s += m.get(i, j) * y[j];
            }
            y[i] = -s / m.get(i, i);
        }
        let mut v = vec![0.0; cols];
        for (permuted, original) in col_perm.iter().enumerate() {
            v[*original] = y[permuted];
        }
        kernel.push(v);
    }
    (rank, pivot_cols, kernel)
}

/// Minimal-residual solution of `A x = b` (any shape) via column-pivoted
/// Householder QR; rank-deficient columns are dropped and the
/// corresponding variables set to zero (basic solution).
pub fn lstsq_solve(a: &Mat, b: &[f64], tol: f64) -> Result<Vec<f64>, LinAlgError> {
    if b.len() != a.rows() {
        return Err(LinAlgError::Dimension { what: "lstsq rhs", expected: a.rows(), got: b.len() });
    }
    let rows = a.rows();
    let cols = a.cols();
    let mut r = a.clone();
    let mut rhs = b.to_vec();
    let mut col_perm: Vec<usize> = (0..cols).collect();

    let kmax = rows.min(cols);
    let mut rank = 0;
    let mut first_diag = 0.0f64;
    for k in 0..kmax {
        // pivot on the column with the largest remaining norm
        let mut best = (k, 0.0f64);
        for j in k..cols {
            let norm: f64 = (k..rows).map(|i| r.get(i, j) * r.get(i, j)).sum();
            if norm > best.1 {
                best = (j, norm);
            }
        }
        let col_norm = best.1.sqrt();
        if k == 0 {
            first_diag = col_norm;
        }
        if col_norm <= tol * first_diag || col_norm == 0.0 {
            break;
        }
        if best.0 != k {
            for i in 0..rows {
                let tmp = r.get(i, k);
                r.set(i, k, r.get(i, best.0));
                r.set(i, best.0, tmp);
            }
            col_perm.swap(k, best.0);
        }
        // Householder reflector for column k
        let mut alpha: f64 = (k..rows).map(|i| r.get(i, k) * r.get(i, k)).sum::<f64>().sqrt();
        if r.get(k, k) > 0.0 {
            alpha = -alpha;
        }
        let mut v: Vec<f64> = (k..rows).map(|i| r.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // apply H = I - 2 v v^T / (v^T v) to R and rhs
            for j in k..cols {
                let dot: f64 = (k..rows).map(|i| v[i - k] * r.get(i, j)).sum();
                let scale = 2.0 * dot / vnorm2;
                for i in k..rows {
                    r.set(i, j, r.get(i, j) - scale * v[i - k]);
                }
            }
            let dot: f64 = (k..rows).map(|i| v[i - k] * rhs[i]).sum();
            let scale = 2.0 * dot / vnorm2;
            for i in k..rows {
                rhs[i] -= scale * v[i - k];
            }
        }
        rank += 1;
    }

    // solve the leading rank x rank triangular system
    let mut y = vec![0.0; cols];
    for i in (0..rank).rev() {
        let mut s = rhs[i];
        for j in (i + 1)..rank {
            s -= r.get(i, j) * y[j];
        }
        y[i] = s / r.get(i, i);
    }
    let mut x = vec![0.0; cols];
    for (permuted, original) in col_perm.iter().enumerate() {
        x[*original] = y[permuted];
    }
    Ok(x)
}

/// Outcome of a Newton solve. `converged` implies
/// `final_residual_norm <= tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_residual_norm: f64,
}

/// Knobs for [`newton_with`].
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Convergence threshold on the residual infinity norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Solve rectangular / rank-deficient Newton systems in the
    /// least-squares sense instead of requiring a square nonsingular
    /// Jacobian.
    pub least_squares: bool,
    /// Rank tolerance for the least-squares path.
    pub rank_tol: f64,
    /// Central-difference step scale for the fallback Jacobian.
    pub fd_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-12,
            max_iter: 50,
            least_squares: false,
            rank_tol: DEFAULT_RANK_TOL,
            fd_step: 1e-7,
        }
    }
}

/// Damped Newton with Armijo backtracking (up to 30 halvings per
/// iteration).
///
/// The Jacobian is taken from `jacobian` when supplied, otherwise by
/// central finite differences with step `fd_step * (1 + |x_i|)`.
/// Non-convergence after `max_iter` is reported, not an error; a
/// singular Jacobian at the starting point is an error, while one
/// encountered mid-iteration degrades to a least-squares step so the
/// iteration can stall out honestly.
pub fn newton_with<F, J>(
    mut residual: F,
    mut jacobian: Option<J>,
    x0: &[f64],
    opts: &NewtonOptions,
) -> Result<(Vec<f64>, NewtonReport), LinAlgError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, LinAlgError>,
    J: FnMut(&[f64]) -> Result<Mat, LinAlgError>,
{
    let mut x = x0.to_vec();
    let mut r = residual(&x)?;
    let mut rnorm = vec_norm_inf(&r);

    for iter in 1..=opts.max_iter {
        if rnorm <= opts.tol {
            return Ok((x, NewtonReport { converged: true, iterations: iter - 1, final_residual_norm: rnorm }));
        }
        let jac = match jacobian.as_mut() {
            Some(j) => j(&x)?,
            None => fd_jacobian(&mut residual, &x, &r, opts.fd_step)?,
        };
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let square = jac.rows() == jac.cols();
        let direction = if opts.least_squares || !square {
            lstsq_solve(&jac, &neg_r, opts.rank_tol)?
        } else {
            match lu_solve(&jac, &neg_r) {
                Ok(d) => d,
                // singular mid-iteration: fall back to a least-squares
                // direction; at the very first iterate surface the error
                Err(e @ LinAlgError::Singular { .. }) if iter > 1 => {
                    let _ = e;
                    lstsq_solve(&jac, &neg_r, opts.rank_tol)?
                }
                Err(e) => return Err(e),
            }
        };

        // Armijo backtracking on the 2-norm merit
        let merit0 = vec_norm_2(&r);
        let mut lambda = 1.0;
        let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..=30 {
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + lambda * di).collect();
            if let Ok(rt) = residual(&trial) {
                let mt = vec_norm_2(&rt);
                if mt.is_finite() {
                    let improved_enough = mt <= (1.0 - 1e-4 * lambda) * merit0;
                    if best.as_ref().map_or(true, |(_, _, mb)| mt < *mb) {
                        best = Some((trial.clone(), rt.clone(), mt));
                    }
                    if improved_enough {
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        match best {
            Some((xb, rb, _)) => {
                x = xb;
                r = rb;
                rnorm = vec_norm_inf(&r);
            }
            // every trial failed to evaluate: stall in place
            None => {
                return Ok((x, NewtonReport { converged: false, iterations: iter, final_residual_norm: rnorm }));
            }
        }
        if rnorm <= opts.tol {
            return Ok((x, NewtonReport { converged: true, iterations: iter, final_residual_norm: rnorm }));
        }
    }
    Ok((x, NewtonReport { converged: false, iterations: opts.max_iter, final_residual_norm: rnorm }))
}

/// [`newton_with`] with finite-difference Jacobian and default damping.
pub fn newton<F>(
    residual: F,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, NewtonReport), LinAlgError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, LinAlgError>,
{
    let opts = NewtonOptions { tol, max_iter, ..NewtonOptions::default() };
    newton_with(residual, None::<fn(&[f64]) -> Result<Mat, LinAlgError>>, x0, &opts)
}

fn fd_jacobian<F>(residual: &mut F, x: &[f64], r0: &[f64], fd_step: f64) -> Result<Mat, LinAlgError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, LinAlgError>,
{
    let n = x.len();
    let m = r0.len();
    let mut jac = Mat::zeros(m, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = fd_step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let rp = residual(&xp)?;
        xp[j] = x[j] - h;
        let rm = residual(&xp)?;
        xp[j] = x[j];
        for i in 0..m {
            jac.set(i, j, (rp[i] - rm[i]) / (2.0 * h));
        }
    }
    Ok(jac)
}
