//! One-dimensional spatial discretization of `(0, L)` with Dirichlet boundary.
//!
//! The interior nodes are `x_i = i*h`, `i = 1..=N`, `h = L/(N+1)`. The
//! discrete Laplacian is the standard second difference with zero boundary
//! values; it is symmetric and negative semidefinite in the `h`-weighted
//! inner product. Subdomains are diagonal `{0,1}` multiplication operators.

use crate::error::GridError;

/// Uniform interior grid on `(0, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    length: f64,
    n_interior: usize,
    h: f64,
}

impl SpatialGrid {
    pub fn new(length: f64, n_interior: usize) -> Result<Self, GridError> {
        if !(length > 0.0) {
            return Err(GridError::NonpositiveLength(length));
        }
        if n_interior < 3 {
            return Err(GridError::TooFewPoints(n_interior));
        }
        let h = length / (n_interior + 1) as f64;
        Ok(Self {
            length,
            n_interior,
            h,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Position of interior node `i` (0-based): `(i+1) * h`.
    pub fn position(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.h
    }

    /// `h`-weighted inner product of two interior vectors.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        self.h * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }

    /// Smallest Dirichlet eigenvalue of `-Laplacian` on this grid:
    /// `(2/h^2)(1 - cos(pi h / L))`, with eigenvector `sin(pi x / L)`.
    pub fn first_eigenvalue(&self) -> f64 {
        2.0 / (self.h * self.h) * (1.0 - (std::f64::consts::PI * self.h / self.length).cos())
    }

    pub fn first_eigenvector(&self) -> Vec<f64> {
        (0..self.n_interior)
            .map(|i| (std::f64::consts::PI * self.position(i) / self.length).sin())
            .collect()
    }
}

/// Apply the Dirichlet Laplacian: `(v_{i-1} - 2 v_i + v_{i+1}) / h^2` with
/// zero boundary values.
pub fn laplacian_apply(grid: &SpatialGrid, v: &[f64]) -> Result<Vec<f64>, GridError> {
    let n = grid.n_interior();
    if v.len() != n {
        return Err(GridError::Shape {
            got: v.len(),
            expected: n,
        });
    }
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let mut out = vec![0.0; n];
    for i in 0..n {
        let left = if i > 0 { v[i - 1] } else { 0.0 };
        let right = if i + 1 < n { v[i + 1] } else { 0.0 };
        out[i] = (left - 2.0 * v[i] + right) * inv_h2;
    }
    Ok(out)
}

/// Sign convention for the shifted operator `(I -/+ c*Laplacian + diag(zeroth))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftSign {
    /// `I - c*Laplacian + diag(zeroth)` (the parabolic stepping kernel).
    Minus,
    /// `I + c*Laplacian + diag(zeroth)`.
    Plus,
}

/// Solve `(I -/+ c*Laplacian + diag(zeroth)) w = rhs` by the Thomas algorithm.
///
/// Raises [`GridError::SingularSystem`] when elimination meets a vanishing
/// pivot (for `c >= 0` with sign `Minus` and `zeroth = 0` the matrix is
/// strictly diagonally dominant, so this cannot happen).
pub fn solve_shifted(
    grid: &SpatialGrid,
    c: f64,
    sign: ShiftSign,
    zeroth: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, GridError> {
    let n = grid.n_interior();
    if rhs.len() != n {
        return Err(GridError::Shape {
            got: rhs.len(),
            expected: n,
        });
    }
    if zeroth.len() != n {
        return Err(GridError::Shape {
            got: zeroth.len(),
            expected: n,
        });
    }
    let r = c / (grid.h() * grid.h());
    let (diag_add, off) = match sign {
        ShiftSign::Minus => (2.0 * r, -r),
        ShiftSign::Plus => (-2.0 * r, r),
    };
    // Thomas elimination with pivot diagnostics.
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    let mut pivot = 1.0 + diag_add + zeroth[0];
    let tiny = 1e-14 * (1.0 + diag_add.abs());
    if pivot.abs() < tiny {
        return Err(GridError::SingularSystem { row: 0, pivot });
    }
    c_prime[0] = off / pivot;
    d_prime[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = 1.0 + diag_add + zeroth[i] - off * c_prime[i - 1];
        if pivot.abs() < tiny {
            return Err(GridError::SingularSystem { row: i, pivot });
        }
        c_prime[i] = off / pivot;
        d_prime[i] = (rhs[i] - off * d_prime[i - 1]) / pivot;
    }
    let mut w = d_prime;
    for i in (0..n - 1).rev() {
        let next = w[i + 1];
        w[i] -= c_prime[i] * next;
    }
    Ok(w)
}

/// Prefactored solver for the constant-coefficient kernel `I - c*Laplacian`.
///
/// The forward/backward steppers apply this once per node per level, so the
/// Thomas coefficients are computed a single time.
#[derive(Debug, Clone)]
pub struct ImplicitKernel {
    n: usize,
    off: f64,
    c_prime: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl ImplicitKernel {
    pub fn new(grid: &SpatialGrid, c: f64) -> Self {
        assert!(c >= 0.0, "kernel requires c >= 0");
        let n = grid.n_interior();
        let r = c / (grid.h() * grid.h());
        let diag = 1.0 + 2.0 * r;
        let off = -r;
        let mut c_prime = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut pivot = diag;
        inv_pivot[0] = 1.0 / pivot;
        c_prime[0] = off / pivot;
        for i in 1..n {
            pivot = diag - off * c_prime[i - 1];
            inv_pivot[i] = 1.0 / pivot;
            c_prime[i] = off / pivot;
        }
        Self {
            n,
            off,
            c_prime,
            inv_pivot,
        }
    }

    /// Solve `(I - c*Laplacian) w = rhs` in place.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        debug_assert_eq!(rhs.len(), self.n);
        rhs[0] *= self.inv_pivot[0];
        for i in 1..self.n {
            rhs[i] = (rhs[i] - self.off * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..self.n - 1).rev() {
            let next = rhs[i + 1];
            rhs[i] -= self.c_prime[i] * next;
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut out = rhs.to_vec();
        self.solve_in_place(&mut out);
        out
    }
}

/// Diagonal `{0,1}` multiplication operator over the interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainMask {
    indicator: Vec<f64>,
}

impl SubdomainMask {
    /// Mask from a 1-based inclusive interior index range.
    pub fn from_range(grid: &SpatialGrid, lo: usize, hi: usize) -> Result<Self, GridError> {
        let n = grid.n_interior();
        if lo == 0 || hi > n || lo > hi {
            return Err(GridError::BadRange { lo, hi, n });
        }
        let mut indicator = vec![0.0; n];
        for v in &mut indicator[lo - 1..hi] {
            *v = 1.0;
        }
        Ok(Self { indicator })
    }

    /// Mask covering the whole interior (the identity observation operator).
    pub fn full(grid: &SpatialGrid) -> Self {
        Self {
            indicator: vec![1.0; grid.n_interior()],
        }
    }

    /// The explicitly empty mask.
    pub fn empty(grid: &SpatialGrid) -> Self {
        Self {
            indicator: vec![0.0; grid.n_interior()],
        }
    }

    pub fn indicator(&self) -> &[f64] {
        &self.indicator
    }

    pub fn is_empty(&self) -> bool {
        self.indicator.iter().all(|v| *v == 0.0)
    }

    pub fn intersects(&self, other: &SubdomainMask) -> bool {
        self.indicator
            .iter()
            .zip(&other.indicator)
            .any(|(a, b)| a * b != 0.0)
    }

    /// Does `self` cover every point of `other`?
    pub fn contains(&self, other: &SubdomainMask) -> bool {
        self.indicator
            .iter()
            .zip(&other.indicator)
            .all(|(a, b)| *b == 0.0 || *a != 0.0)
    }

    pub fn apply(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.indicator.len());
        for (x, m) in v.iter_mut().zip(&self.indicator) {
            *x *= m;
        }
    }

    pub fn applied(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.apply(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> SpatialGrid {
        SpatialGrid::new(1.0, 9).unwrap()
    }

    #[test]
    fn laplacian_of_zero_and_affine() {
        let g = grid();
        let zero = vec![0.0; 9];
        assert_eq!(laplacian_apply(&g, &zero).unwrap(), zero);
        // Second difference of an affine profile vanishes away from boundary.
        let affine: Vec<f64> = (0..9).map(|i| 2.0 * g.position(i) + 1.0).collect();
        let lap = laplacian_apply(&g, &affine).unwrap();
        for v in &lap[1..8] {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn laplacian_eigenpair_is_exact() {
        let g = grid();
        let v = g.first_eigenvector();
        let lap = laplacian_apply(&g, &v).unwrap();
        let lambda = g.first_eigenvalue();
        for (lv, vi) in lap.iter().zip(&v) {
            assert_abs_diff_eq!(*lv, -lambda * vi, epsilon = 1e-10);
        }
    }

    #[test]
    fn laplacian_symmetric_negative() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let u: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lu = laplacian_apply(&g, &u).unwrap();
            let lv = laplacian_apply(&g, &v).unwrap();
            assert_abs_diff_eq!(g.inner(&lu, &v), g.inner(&u, &lv), epsilon = 1e-12);
            assert!(g.inner(&lu, &u) <= 1e-12);
        }
    }

    #[test]
    fn solve_shifted_identity() {
        let g = grid();
        let rhs: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let w = solve_shifted(&g, 0.0, ShiftSign::Minus, &vec![0.0; 9], &rhs).unwrap();
        for (a, b) in w.iter().zip(&rhs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn solve_shifted_round_trip() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zeroth: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..0.5)).collect();
        let c = 0.03;
        // rhs = (I - c*Lap + diag(zeroth)) v, then solve back.
        let lap = laplacian_apply(&g, &v).unwrap();
        let rhs: Vec<f64> = (0..9)
            .map(|i| v[i] - c * lap[i] + zeroth[i] * v[i])
            .collect();
        let w = solve_shifted(&g, c, ShiftSign::Minus, &zeroth, &rhs).unwrap();
        for (a, b) in w.iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn solve_shifted_singular_detected() {
        let g = grid();
        // Adversarial zeroth-order term cancels the unit diagonal.
        let zeroth = vec![-1.0; 9];
        let err = solve_shifted(&g, 0.0, ShiftSign::Minus, &zeroth, &vec![1.0; 9]).unwrap_err();
        assert!(matches!(err, GridError::SingularSystem { .. }));
    }

    #[test]
    fn implicit_kernel_matches_general_solver() {
        let g = grid();
        let c = 0.01;
        let kernel = ImplicitKernel::new(&g, c);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rhs: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = kernel.solve(&rhs);
        let b = solve_shifted(&g, c, ShiftSign::Minus, &vec![0.0; 9], &rhs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn masks_are_idempotent_and_self_adjoint() {
        let g = grid();
        let m = SubdomainMask::from_range(&g, 3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu = m.applied(&u);
        let mmu = m.applied(&mu);
        assert_eq!(mu, mmu);
        assert_abs_diff_eq!(
            g.inner(&mu, &v),
            g.inner(&u, &m.applied(&v)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn mask_ranges_validate() {
        let g = grid();
        assert!(SubdomainMask::from_range(&g, 0, 4).is_err());
        assert!(SubdomainMask::from_range(&g, 2, 10).is_err());
        assert!(SubdomainMask::from_range(&g, 5, 4).is_err());
        let a = SubdomainMask::from_range(&g, 1, 4).unwrap();
        let b = SubdomainMask::from_range(&g, 4, 9).unwrap();
        let c = SubdomainMask::from_range(&g, 6, 9).unwrap();
        assert!(a.intersects(&b));
        assert!(!a.intersects(&c));
        assert!(b.contains(&c));
    }
}
