//! Matrix-free Krylov kernels in a caller-supplied inner product.
//!
//! The Nash operator equation and the coupled-sweep escalation path both
//! solve small, well-conditioned operator equations whose matrices exist
//! only as solver compositions, so everything here takes `apply` and `dot`
//! closures. Reductions are sequential for bitwise reproducibility.

use crate::error::SolverError;

/// Options for restarted GMRES.
#[derive(Debug, Clone)]
pub struct GmresOptions {
    pub restart: usize,
    pub max_iters: usize,
    /// Relative residual target (against `|b|`).
    pub tol: f64,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            restart: 50,
            max_iters: 500,
            tol: 1e-10,
        }
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterationStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub history: Vec<f64>,
}

impl IterationStats {
    pub fn require_converged(&self) -> Result<(), SolverError> {
        if self.converged {
            Ok(())
        } else {
            Err(SolverError::NonConvergence {
                iterations: self.iterations,
                residual: self.residual,
                history: self.history.clone(),
            })
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Restarted GMRES for `apply(x) = b` with modified Gram-Schmidt Arnoldi
/// (one reorthogonalization pass) and Givens rotations.
pub fn gmres<A, D>(
    apply: A,
    b: &[f64],
    x0: Option<Vec<f64>>,
    dot: D,
    opts: &GmresOptions,
) -> (Vec<f64>, IterationStats)
where
    A: Fn(&[f64]) -> Vec<f64>,
    D: Fn(&[f64], &[f64]) -> f64,
{
    let n = b.len();
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let b_norm = norm(b).max(f64::MIN_POSITIVE);
    let mut x = x0.unwrap_or_else(|| vec![0.0; n]);
    let mut history = Vec::new();
    let mut total_iters = 0usize;

    loop {
        let ax = apply(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let r_norm = norm(&r);
        history.push(r_norm / b_norm);
        if r_norm / b_norm <= opts.tol || total_iters >= opts.max_iters {
            let converged = r_norm / b_norm <= opts.tol;
            return (
                x,
                IterationStats {
                    iterations: total_iters,
                    residual: r_norm / b_norm,
                    converged,
                    history,
                },
            );
        }

        let m = opts.restart.min(n).max(1);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        for v in r.iter_mut() {
            *v /= r_norm;
        }
        basis.push(r);
        // Hessenberg stored column-wise, with Givens (cs, sn) applied on the fly.
        let mut h = vec![vec![0.0; m + 1]; m];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = r_norm;
        let mut k_used = 0;

        for k in 0..m {
            if total_iters >= opts.max_iters {
                break;
            }
            total_iters += 1;
            let mut w = apply(&basis[k]);
            for j in 0..=k {
                let hjk = dot(&w, &basis[j]);
                h[k][j] = hjk;
                axpy(&mut w, -hjk, &basis[j]);
            }
            // Second orthogonalization pass.
            for j in 0..=k {
                let corr = dot(&w, &basis[j]);
                h[k][j] += corr;
                axpy(&mut w, -corr, &basis[j]);
            }
            let w_norm = norm(&w);
            h[k][k + 1] = w_norm;
            for (j, (&c, &s)) in cs.iter().zip(sn.iter()).enumerate().take(k) {
                let t = c * h[k][j] + s * h[k][j + 1];
                h[k][j + 1] = -s * h[k][j] + c * h[k][j + 1];
                h[k][j] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k][k + 1] * h[k][k + 1]).sqrt();
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k][k + 1] / denom;
            h[k][k] = denom;
            h[k][k + 1] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            history.push(g[k + 1].abs() / b_norm);
            if w_norm <= 1e-300 {
                break; // happy breakdown: exact solution in the subspace
            }
            if g[k + 1].abs() / b_norm <= opts.tol {
                break;
            }
            for v in w.iter_mut() {
                *v /= w_norm;
            }
            basis.push(w);
        }

        // Back-substitute and update.
        let mut y = vec![0.0; k_used];
        for j in (0..k_used).rev() {
            let mut s = g[j];
            for (i, yi) in y.iter().enumerate().take(k_used).skip(j + 1) {
                s -= h[i][j] * yi;
            }
            y[j] = s / h[j][j];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(&mut x, *yj, &basis[j]);
        }
        if k_used == 0 {
            // No progress possible.
            let stats = IterationStats {
                iterations: total_iters,
                residual: history.last().copied().unwrap_or(f64::INFINITY),
                converged: false,
                history,
            };
            return (x, stats);
        }
    }
}

/// Conjugate-gradient statistics.
#[derive(Debug, Clone)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Range of the local curvature estimates `1/alpha_k` (a cheap
    /// conditioning diagnostic).
    pub curvature_min: f64,
    pub curvature_max: f64,
}

/// Conjugate gradients for a symmetric positive semidefinite operator in a
/// caller-supplied inner product.
pub fn conjugate_gradient<A, D>(
    apply: A,
    b: &[f64],
    x0: Option<Vec<f64>>,
    dot: D,
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, CgStats)
where
    A: Fn(&[f64]) -> Vec<f64>,
    D: Fn(&[f64], &[f64]) -> f64,
{
    let n = b.len();
    let mut x = x0.unwrap_or_else(|| vec![0.0; n]);
    let b_norm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut curvature_min = f64::INFINITY;
    let mut curvature_max = 0.0f64;
    let mut iterations = 0;
    while iterations < max_iters {
        let rel = rs.sqrt() / b_norm;
        if rel <= tol {
            break;
        }
        let ap = apply(&p);
        let p_ap = dot(&p, &ap);
        if p_ap <= 0.0 {
            break; // lost positivity at roundoff
        }
        let p_sq = dot(&p, &p);
        if p_sq > 0.0 {
            let curv = p_ap / p_sq;
            curvature_min = curvature_min.min(curv);
            curvature_max = curvature_max.max(curv);
        }
        let alpha = rs / p_ap;
        for ((xi, pi), _) in x.iter_mut().zip(&p).zip(0..n) {
            *xi += alpha * pi;
        }
        for ((ri, api), _) in r.iter_mut().zip(&ap).zip(0..n) {
            *ri -= alpha * api;
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
        iterations += 1;
    }
    let residual = rs.sqrt() / b_norm;
    let converged = residual <= tol;
    (
        x,
        CgStats {
            iterations,
            residual,
            converged,
            curvature_min,
            curvature_max,
        },
    )
}

/// Number of eigenvalues of the symmetric tridiagonal `(alpha, beta)` that
/// are strictly below `x`, by the Sturm / LDL^T sign count.
fn sturm_count(alpha: &[f64], beta: &[f64], x: f64) -> usize {
    let mut count = 0usize;
    let mut d = 1.0f64;
    for (i, &a) in alpha.iter().enumerate() {
        let b2 = if i == 0 { 0.0 } else { beta[i - 1] * beta[i - 1] };
        d = a - x - b2 / d;
        if d == 0.0 {
            d = -1e-300;
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest eigenvalue of a symmetric tridiagonal matrix by bisection.
fn tridiag_smallest_eig(alpha: &[f64], beta: &[f64]) -> f64 {
    let n = alpha.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = (if i > 0 { beta[i - 1].abs() } else { 0.0 })
            + (if i < n - 1 { beta[i].abs() } else { 0.0 });
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    let scale = (hi - lo).abs().max(1.0);
    let mut a = lo - 1e-12 * scale;
    let mut b = hi + 1e-12 * scale;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if sturm_count(alpha, beta, mid) >= 1 {
            b = mid;
        } else {
            a = mid;
        }
        if b - a <= 1e-15 * scale {
            break;
        }
    }
    0.5 * (a + b)
}

/// Solve a small dense system by Gaussian elimination with partial pivoting;
/// near-zero pivots are nudged so inverse iteration can shift right through
/// the eigenvalue.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let (pivot_row, _) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        if a[col][col] == 0.0 {
            a[col][col] = 1e-300;
        }
        for r in col + 1..n {
            let m = a[r][col] / a[col][col];
            if m == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= m * a[col][c];
            }
            b[r] -= m * b[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for c in i + 1..n {
            s -= a[i][c] * b[c];
        }
        b[i] = s / a[i][i];
    }
    b
}

/// Eigenvector of the (small) tridiagonal for an isolated eigenvalue, by
/// dense inverse iteration.
fn tridiag_eigvec(alpha: &[f64], beta: &[f64], lambda: f64) -> Vec<f64> {
    let n = alpha.len();
    if n == 1 {
        return vec![1.0];
    }
    let shift = lambda - 1e-10 * (1.0 + lambda.abs());
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        t[i][i] = alpha[i] - shift;
        if i + 1 < n {
            t[i][i + 1] = beta[i];
            t[i + 1][i] = beta[i];
        }
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..4 {
        let w = dense_solve(t.clone(), v.clone());
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    v
}

/// Smallest Ritz value and vector of a symmetric operator by Lanczos with
/// full reorthogonalization.
///
/// `start` seeds the Krylov space (callers draw it from their scenario RNG
/// so runs stay reproducible). Returns `(value, vector, steps)`.
pub fn lanczos_smallest<A, D>(
    apply: A,
    start: Vec<f64>,
    dot: D,
    max_iters: usize,
) -> (f64, Vec<f64>, usize)
where
    A: Fn(&[f64]) -> Vec<f64>,
    D: Fn(&[f64], &[f64]) -> f64,
{
    let n = start.len();
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let mut q = start;
    let q0_norm = norm(&q);
    assert!(q0_norm > 0.0, "Lanczos needs a nonzero start vector");
    for v in q.iter_mut() {
        *v /= q0_norm;
    }
    let mut basis = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut last = f64::INFINITY;
    let mut stable = 0usize;
    let cap = max_iters.min(n).max(1);

    for j in 0..cap {
        let mut w = apply(&basis[j]);
        let a = dot(&w, &basis[j]);
        alpha.push(a);
        axpy(&mut w, -a, &basis[j]);
        if j > 0 {
            let b_prev = beta[j - 1];
            axpy(&mut w, -b_prev, &basis[j - 1]);
        }
        for q in &basis {
            let c = dot(&w, q);
            axpy(&mut w, -c, q);
        }
        let lam = tridiag_smallest_eig(&alpha, &beta);
        if (lam - last).abs() <= 1e-13 * (1.0 + lam.abs()) {
            stable += 1;
            if stable >= 3 {
                break;
            }
        } else {
            stable = 0;
        }
        last = lam;
        let b = norm(&w);
        if b <= 1e-13 * (1.0 + alpha[0].abs()) || j + 1 == cap {
            break; // invariant subspace reached: Ritz values are exact
        }
        beta.push(b);
        for v in w.iter_mut() {
            *v /= b;
        }
        basis.push(w);
    }

    let steps = alpha.len();
    let nb = steps.saturating_sub(1).min(beta.len());
    let lam = tridiag_smallest_eig(&alpha, &beta[..nb]);
    let coeffs = tridiag_eigvec(&alpha, &beta[..nb], lam);
    let mut vec_out = vec![0.0; n];
    for (c, q) in coeffs.iter().zip(&basis) {
        axpy(&mut vec_out, *c, q);
    }
    let vn = norm(&vec_out);
    if vn > 0.0 {
        for v in vec_out.iter_mut() {
            *v /= vn;
        }
    }
    (lam, vec_out, steps)
}
