//! Exact discrete filtered probability space.
//!
//! The driving noise is a binomial walk: over step `k` the increment takes the
//! values `±sqrt(dt)` with equal weight. Level `k` of the tree has `2^k`
//! nodes; node `(k, j)` has children `(k+1, 2j)` ("up") and `(k+1, 2j+1)`
//! ("down"), each carrying half of its parent's probability `2^-k`. Adapted
//! processes store one spatial vector per node, so adaptedness is structural:
//! nothing at level `k` can read level `k+1` except the two designated
//! backward operators [`conditional_expectation`] and [`martingale_integrand`].

use crate::error::LatticeError;
use crate::grid::SpatialGrid;

/// Hard cap on the number of steps (the tree has `2^(K+1) - 1` nodes).
pub const MAX_STEPS: usize = 24;

/// Binomial lattice over `[0, T]` with `K` equal steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
    sqrt_dt: f64,
}

impl TreeGrid {
    /// Build a lattice with horizon `T > 0` and `1 <= steps <= 24`.
    pub fn new(horizon: f64, steps: usize) -> Result<Self, LatticeError> {
        if !(horizon > 0.0) {
            return Err(LatticeError::NonpositiveHorizon(horizon));
        }
        if steps == 0 || steps > MAX_STEPS {
            return Err(LatticeError::StepsOutOfRange {
                steps,
                max: MAX_STEPS,
            });
        }
        let dt = horizon / steps as f64;
        Ok(Self {
            horizon,
            steps,
            dt,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    /// Number of nodes at a level, `2^level`.
    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << level
    }

    /// Total number of nodes over levels `0..=steps`.
    pub fn total_nodes(&self) -> usize {
        (1usize << (self.steps + 1)) - 1
    }

    /// Probability carried by each node of a level, `2^-level`.
    pub fn node_probability(&self, level: usize) -> f64 {
        1.0 / self.nodes_at(level) as f64
    }

    /// Time coordinate of level `k`.
    pub fn time_at(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Noise increment on the way to a child: `+sqrt(dt)` up, `-sqrt(dt)` down.
    pub fn increment(&self, up: bool) -> f64 {
        if up {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }
}

/// An adapted, spatially discretized process: one spatial vector per node.
///
/// Trajectory-type fields live on levels `0..=K`; time-integrand fields
/// (sources, controls, martingale components) on levels `0..K`. All
/// space-time pairings use the left-endpoint rule over levels `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    n_space: usize,
    levels: Vec<Vec<f64>>,
}

impl AdaptedField {
    /// Zero field with `num_levels` levels (`steps` for integrands,
    /// `steps + 1` for trajectories).
    pub fn zeros(tree: &TreeGrid, n_space: usize, num_levels: usize) -> Self {
        assert!(num_levels <= tree.steps() + 1, "too many levels for tree");
        let levels = (0..num_levels)
            .map(|k| vec![0.0; tree.nodes_at(k) * n_space])
            .collect();
        Self { n_space, levels }
    }

    /// Field built node by node from `f(level, node) -> spatial vector`.
    pub fn from_fn<F>(tree: &TreeGrid, n_space: usize, num_levels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut field = Self::zeros(tree, n_space, num_levels);
        for k in 0..num_levels {
            for j in 0..tree.nodes_at(k) {
                let v = f(k, j);
                assert_eq!(v.len(), n_space);
                field.node_mut(k, j).copy_from_slice(&v);
            }
        }
        field
    }

    /// Deterministic field: the same spatial profile on every node of every level.
    pub fn deterministic(tree: &TreeGrid, profile: &[f64], num_levels: usize) -> Self {
        Self::from_fn(tree, profile.len(), num_levels, |_, _| profile.to_vec())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn node(&self, level: usize, node: usize) -> &[f64] {
        let n = self.n_space;
        &self.levels[level][node * n..(node + 1) * n]
    }

    pub fn node_mut(&mut self, level: usize, node: usize) -> &mut [f64] {
        let n = self.n_space;
        &mut self.levels[level][node * n..(node + 1) * n]
    }

    /// Split the level storage at `at`, for steppers that read one level
    /// while writing its neighbour.
    pub(crate) fn split_levels(&mut self, at: usize) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        self.levels.split_at_mut(at)
    }

    /// `self += c * other`, over the levels both fields share.
    pub fn axpy(&mut self, c: f64, other: &AdaptedField) {
        assert_eq!(self.n_space, other.n_space);
        let shared = self.levels.len().min(other.levels.len());
        for k in 0..shared {
            for (a, b) in self.levels[k].iter_mut().zip(&other.levels[k]) {
                *a += c * b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for lvl in &mut self.levels {
            for v in lvl.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Apply a spatial mask (`{0,1}` indicator) on every node.
    pub fn mask_in_place(&mut self, indicator: &[f64]) {
        assert_eq!(indicator.len(), self.n_space);
        for lvl in &mut self.levels {
            for node in lvl.chunks_mut(self.n_space) {
                for (v, m) in node.iter_mut().zip(indicator) {
                    *v *= m;
                }
            }
        }
    }

    /// Concatenate all levels into one flat vector (for Krylov iterations).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.levels.iter().map(Vec::len).sum());
        for lvl in &self.levels {
            out.extend_from_slice(lvl);
        }
        out
    }

    /// Rebuild a field of the given shape from a flat vector.
    pub fn from_flat(tree: &TreeGrid, n_space: usize, num_levels: usize, data: &[f64]) -> Self {
        let mut field = Self::zeros(tree, n_space, num_levels);
        let mut offset = 0;
        for k in 0..num_levels {
            let len = field.levels[k].len();
            field.levels[k].copy_from_slice(&data[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, data.len());
        field
    }

    /// Node-expectation at a level: `sum_j 2^-k x(k,j)`, one spatial vector.
    pub fn expectation_at(&self, tree: &TreeGrid, level: usize) -> Vec<f64> {
        let p = tree.node_probability(level);
        let mut out = vec![0.0; self.n_space];
        for j in 0..tree.nodes_at(level) {
            for (o, v) in out.iter_mut().zip(self.node(level, j)) {
                *o += p * v;
            }
        }
        out
    }
}

/// A real-valued adapted process, used for scalar weights in pairings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarProcess {
    levels: Vec<Vec<f64>>,
}

impl ScalarProcess {
    /// Deterministic process from a function of time, evaluated at `t_k`.
    pub fn from_time_fn<F: Fn(f64) -> f64>(tree: &TreeGrid, num_levels: usize, f: F) -> Self {
        let levels = (0..num_levels)
            .map(|k| vec![f(tree.time_at(k)); tree.nodes_at(k)])
            .collect();
        Self { levels }
    }

    pub fn value(&self, level: usize, node: usize) -> f64 {
        self.levels[level][node]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Two-point conditional expectation: from the values on level `upper` of
/// `field`, produce the level `upper - 1` field of parent averages.
pub fn conditional_expectation(
    field: &AdaptedField,
    upper: usize,
) -> Result<Vec<f64>, LatticeError> {
    if upper == 0 || upper >= field.num_levels() {
        return Err(LatticeError::LevelOutOfRange {
            level: upper,
            levels: field.num_levels(),
        });
    }
    let n = field.n_space();
    let data = field.level(upper);
    let parents = data.len() / (2 * n);
    let mut out = vec![0.0; parents * n];
    for j in 0..parents {
        let up = &data[(2 * j) * n..(2 * j + 1) * n];
        let down = &data[(2 * j + 1) * n..(2 * j + 2) * n];
        let dst = &mut out[j * n..(j + 1) * n];
        for i in 0..n {
            dst[i] = 0.5 * (up[i] + down[i]);
        }
    }
    Ok(out)
}

/// Martingale representation integrand: the scaled child difference
/// `Z(k,j) = (X(k+1,2j) - X(k+1,2j+1)) / (2 sqrt(dt))`, so that
/// `X(k+1,·) = E[X|F_k] + Z * dW_k` holds exactly on both children.
pub fn martingale_integrand(
    tree: &TreeGrid,
    field: &AdaptedField,
    upper: usize,
) -> Result<Vec<f64>, LatticeError> {
    if upper == 0 || upper >= field.num_levels() {
        return Err(LatticeError::LevelOutOfRange {
            level: upper,
            levels: field.num_levels(),
        });
    }
    let n = field.n_space();
    let data = field.level(upper);
    let parents = data.len() / (2 * n);
    let scale = 0.5 / tree.sqrt_dt();
    let mut out = vec![0.0; parents * n];
    for j in 0..parents {
        let up = &data[(2 * j) * n..(2 * j + 1) * n];
        let down = &data[(2 * j + 1) * n..(2 * j + 2) * n];
        let dst = &mut out[j * n..(j + 1) * n];
        for i in 0..n {
            dst[i] = scale * (up[i] - down[i]);
        }
    }
    Ok(out)
}

/// Discrete `E \int_0^T w^2 <X, Y>_{L^2} dt` with the left-endpoint time rule:
/// `sum_{k<K} dt sum_j 2^-k w(k,j)^2 h <X(k,j), Y(k,j)>`.
///
/// Both fields must cover levels `0..K`; an optional strictly positive scalar
/// weight multiplies the integrand as `w^2`.
pub fn space_time_inner(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    x: &AdaptedField,
    y: &AdaptedField,
    weight: Option<&ScalarProcess>,
) -> Result<f64, LatticeError> {
    let k_sum = tree.steps();
    if x.n_space() != y.n_space() || x.n_space() != grid.n_interior() {
        return Err(LatticeError::Shape(format!(
            "spatial sizes {} / {} / grid {}",
            x.n_space(),
            y.n_space(),
            grid.n_interior()
        )));
    }
    if x.num_levels() < k_sum || y.num_levels() < k_sum {
        return Err(LatticeError::Shape(format!(
            "fields must cover levels 0..{k_sum}"
        )));
    }
    if let Some(w) = weight {
        if w.num_levels() < k_sum {
            return Err(LatticeError::Shape("weight too short".into()));
        }
    }
    let n = x.n_space();
    let h = grid.h();
    let dt = tree.dt();
    let mut total = 0.0;
    for k in 0..k_sum {
        let p = tree.node_probability(k);
        let mut lvl = 0.0;
        for j in 0..tree.nodes_at(k) {
            let xa = x.node(k, j);
            let ya = y.node(k, j);
            let mut dot = 0.0;
            for i in 0..n {
                dot += xa[i] * ya[i];
            }
            let w = weight.map_or(1.0, |w| w.value(k, j));
            lvl += w * w * dot;
        }
        total += dt * p * h * lvl;
    }
    Ok(total)
}

/// Discrete `E <X(level), Y(level)>_{L^2}`: probability-weighted spatial
/// pairing across the nodes of one level.
pub fn expected_inner_at(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    x: &AdaptedField,
    y: &AdaptedField,
    level: usize,
) -> f64 {
    let n = grid.n_interior();
    let p = tree.node_probability(level);
    let mut total = 0.0;
    for j in 0..tree.nodes_at(level) {
        let xa = x.node(level, j);
        let ya = y.node(level, j);
        let mut dot = 0.0;
        for i in 0..n {
            dot += xa[i] * ya[i];
        }
        total += p * dot;
    }
    total * grid.h()
}

/// `E |X(level)|^2_{L^2}`.
pub fn expected_sq_norm_at(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    x: &AdaptedField,
    level: usize,
) -> f64 {
    expected_inner_at(tree, grid, x, x, level)
}

/// Probability-weighted pairing of two level fields stored as flat slices
/// (`2^level` nodes of `n` entries each).
pub fn level_inner(tree: &TreeGrid, grid: &SpatialGrid, level: usize, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let p = tree.node_probability(level);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    p * grid.h() * dot
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid5() -> SpatialGrid {
        SpatialGrid::new(1.0, 5).unwrap()
    }

    #[test]
    fn tree_counts_and_increments() {
        let tree = TreeGrid::new(1.0, 2).unwrap();
        assert_eq!(tree.total_nodes(), 7);
        assert_abs_diff_eq!(tree.dt(), 0.5);
        assert_abs_diff_eq!(tree.increment(true), 0.5f64.sqrt());
        assert_abs_diff_eq!(tree.increment(false), -(0.5f64.sqrt()));
    }

    #[test]
    fn tree_increment_moments() {
        // One step: E[dW] = 0 and E[dW^2] = dt exactly.
        let tree = TreeGrid::new(1.0, 1).unwrap();
        let up = tree.increment(true);
        let down = tree.increment(false);
        assert_eq!(0.5 * (up + down), 0.0);
        assert_abs_diff_eq!(0.5 * (up * up + down * down), tree.dt());
    }

    #[test]
    fn tree_guards() {
        assert_eq!(
            TreeGrid::new(2.0, 25).unwrap_err(),
            LatticeError::StepsOutOfRange { steps: 25, max: 24 }
        );
        assert!(matches!(
            TreeGrid::new(0.0, 4).unwrap_err(),
            LatticeError::NonpositiveHorizon(_)
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let tree = TreeGrid::new(1.0, 6).unwrap();
        for k in 0..=6 {
            let total = tree.node_probability(k) * tree.nodes_at(k) as f64;
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);
        }
    }

    fn random_field(tree: &TreeGrid, n: usize, levels: usize, seed: u64) -> AdaptedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AdaptedField::from_fn(tree, n, levels, |_, _| {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
    }

    #[test]
    fn cond_exp_of_constant_is_constant() {
        let tree = TreeGrid::new(1.0, 3).unwrap();
        let c = AdaptedField::deterministic(&tree, &[2.0, -1.0, 0.5], 4);
        let m = conditional_expectation(&c, 3).unwrap();
        for v in m.chunks(3) {
            assert_eq!(v, &[2.0, -1.0, 0.5]);
        }
    }

    #[test]
    fn cond_exp_of_increment_vanishes() {
        let tree = TreeGrid::new(1.0, 2).unwrap();
        // Field equal to the last increment dW_k on each level-(k+1) node.
        let f = AdaptedField::from_fn(&tree, 1, 3, |k, j| {
            if k == 0 {
                vec![0.0]
            } else {
                vec![tree.increment(j % 2 == 0)]
            }
        });
        for upper in 1..=2 {
            let m = conditional_expectation(&f, upper).unwrap();
            for v in &m {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn cond_exp_matches_path_enumeration() {
        // Independent oracle: average the 2^K path values sharing a prefix.
        let tree = TreeGrid::new(2.0, 3).unwrap();
        let f = random_field(&tree, 2, 4, 7);
        let m = conditional_expectation(&f, 3).unwrap();
        for j in 0..tree.nodes_at(2) {
            for i in 0..2 {
                let mut acc = 0.0;
                let mut count = 0.0;
                for path in 0..tree.nodes_at(3) {
                    if path >> 1 == j {
                        acc += f.node(3, path)[i];
                        count += 1.0;
                    }
                }
                assert_abs_diff_eq!(m[j * 2 + i], acc / count, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn integrand_of_increment_is_one() {
        let tree = TreeGrid::new(1.0, 1).unwrap();
        let f = AdaptedField::from_fn(&tree, 1, 2, |k, j| {
            if k == 0 {
                vec![0.0]
            } else {
                vec![tree.increment(j == 0)]
            }
        });
        let z = martingale_integrand(&tree, &f, 1).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn integrand_of_deterministic_is_zero() {
        let tree = TreeGrid::new(1.0, 3).unwrap();
        let f = AdaptedField::deterministic(&tree, &[3.0], 4);
        let z = martingale_integrand(&tree, &f, 2).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn martingale_representation_is_exact() {
        let tree = TreeGrid::new(1.5, 4).unwrap();
        let f = random_field(&tree, 3, 5, 13);
        for upper in 1..=4 {
            let m = conditional_expectation(&f, upper).unwrap();
            let z = martingale_integrand(&tree, &f, upper).unwrap();
            let n = 3;
            for j in 0..tree.nodes_at(upper - 1) {
                for i in 0..n {
                    let rec_up = m[j * n + i] + z[j * n + i] * tree.increment(true);
                    let rec_down = m[j * n + i] + z[j * n + i] * tree.increment(false);
                    assert_abs_diff_eq!(rec_up, f.node(upper, 2 * j)[i], epsilon = 1e-15);
                    assert_abs_diff_eq!(rec_down, f.node(upper, 2 * j + 1)[i], epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn tower_property_is_exact() {
        let tree = TreeGrid::new(1.0, 4).unwrap();
        let f = random_field(&tree, 2, 5, 3);
        // Two single-level averages from level 4 to level 2...
        let m3 = conditional_expectation(&f, 4).unwrap();
        let mut tmp = AdaptedField::zeros(&tree, 2, 4);
        tmp.level_mut(3).copy_from_slice(&m3);
        let m2 = conditional_expectation(&tmp, 3).unwrap();
        // ...equal direct four-child averaging.
        for j in 0..tree.nodes_at(2) {
            for i in 0..2 {
                let direct = (0..4).map(|c| f.node(4, 4 * j + c)[i]).sum::<f64>() / 4.0;
                assert_abs_diff_eq!(m2[j * 2 + i], direct, epsilon = 1e-16);
            }
        }
    }

    #[test]
    fn inner_product_of_ones_measures_domain() {
        let tree = TreeGrid::new(1.0, 2).unwrap();
        let grid = grid5();
        let ones = AdaptedField::deterministic(&tree, &vec![1.0; 5], 2);
        let val = space_time_inner(&tree, &grid, &ones, &ones, None).unwrap();
        // T * N * h with T = 1.
        assert_abs_diff_eq!(val, 5.0 * grid.h(), epsilon = 1e-15);
    }

    #[test]
    fn inner_product_disjoint_supports() {
        let tree = TreeGrid::new(1.0, 2).unwrap();
        let grid = grid5();
        let mut a = AdaptedField::deterministic(&tree, &vec![1.0; 5], 2);
        let mut b = a.clone();
        a.mask_in_place(&[1.0, 1.0, 0.0, 0.0, 0.0]);
        b.mask_in_place(&[0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(space_time_inner(&tree, &grid, &a, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_matches_brute_force() {
        let tree = TreeGrid::new(2.0, 3).unwrap();
        let grid = grid5();
        let x = random_field(&tree, 5, 3, 21);
        let y = random_field(&tree, 5, 3, 22);
        let w = ScalarProcess::from_time_fn(&tree, 3, |t| 1.0 + t);
        let got = space_time_inner(&tree, &grid, &x, &y, Some(&w)).unwrap();
        let mut want = 0.0;
        for k in 0..3 {
            for j in 0..tree.nodes_at(k) {
                let wv = 1.0 + tree.time_at(k);
                for i in 0..5 {
                    want += tree.dt()
                        * tree.node_probability(k)
                        * wv
                        * wv
                        * grid.h()
                        * x.node(k, j)[i]
                        * y.node(k, j)[i];
                }
            }
        }
        assert_abs_diff_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn one_step_ito_isometry() {
        // E[(Z dW)^2] over one step equals dt * E[Z^2] exactly.
        let tree = TreeGrid::new(1.0, 1).unwrap();
        let grid = grid5();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut f = AdaptedField::zeros(&tree, 5, 2);
        for (side, j) in [(true, 0usize), (false, 1usize)] {
            let inc = tree.increment(side);
            let dst = f.node_mut(1, j);
            for i in 0..5 {
                dst[i] = z[i] * inc;
            }
        }
        let lhs = expected_sq_norm_at(&tree, &grid, &f, 1);
        let z_sq: f64 = z.iter().map(|v| v * v).sum::<f64>() * grid.h();
        assert_abs_diff_eq!(lhs, tree.dt() * z_sq, epsilon = 1e-15);
    }

    #[test]
    fn level_guards() {
        let tree = TreeGrid::new(1.0, 2).unwrap();
        let f = AdaptedField::zeros(&tree, 1, 3);
        assert!(conditional_expectation(&f, 0).is_err());
        assert!(conditional_expectation(&f, 3).is_err());
        assert!(martingale_integrand(&tree, &f, 5).is_err());
    }
}
