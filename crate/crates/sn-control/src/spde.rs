//! Forward and backward linear SPDE stepping on the lattice.
//!
//! Forward scheme (implicit Laplacian, explicit zeroth-order and noise
//! terms), per node `n` at level `k` with children `c = 2n, 2n+1`:
//!
//! ```text
//! (I - dt*Lap) y(k+1,c) = y(k,n) + dt*(a1.y + f)(k,n) +- sqrt(dt)*(a2.y + g)(k,n)
//! ```
//!
//! The backward solver is the exact algebraic transpose of this map under
//! the probability-weighted space-time pairing, not an independent
//! discretization. Stepping from level `k+1` down to `k` it first smooths the
//! two-point conditional mean `m` and martingale integrand `Z` through the
//! same kernel,
//!
//! ```text
//! m~ = (I - dt*Lap)^-1 m,   Z~ = (I - dt*Lap)^-1 Z,
//! Y(k,n) = Z~ - g(k,n),
//! y(k,n) = (I - dt*diag(b1)) m~ - dt*diag(b2) Y - dt*f(k,n),
//! ```
//!
//! which is a consistent first-order scheme for
//! `dy = (-Lap y + b1 y + b2 Y + f) dt + (Y + g) dW`, `y(T)` given. With
//! `b = -a` the two solvers satisfy, for every choice of data and every
//! node-dependent bounded coefficient pair, the exact identity
//!
//! ```text
//! E<y_K, p_K> - E<y_0, p_0> =
//!     sum_k dt E[ <f_k, p~_k> + <g_k, P_k + q_k> + <y_k, s_k + a2.q_k> ]
//! ```
//!
//! where `(p, p~, P)` is the backward solution with sources `(s, q)`. All
//! higher layers (Nash operators, coupled systems, leader functionals) are
//! built so their pairings reduce to this identity, which is what makes the
//! duality certificates exact up to linear-solver tolerance.

use crate::error::SpdeError;
use crate::grid::{ImplicitKernel, SpatialGrid, SubdomainMask};
use crate::lattice::{AdaptedField, TreeGrid};
use crate::par;

/// Zeroth-order coefficient field. Constant profiles cover the standard
/// setting; per-level and per-node variants admit the bounded random
/// coefficients the well-posedness theory allows.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    /// One spatial profile for all times and nodes.
    Constant(Vec<f64>),
    /// One spatial profile per level (deterministic, time-dependent).
    PerLevel(Vec<Vec<f64>>),
    /// A full adapted field (random coefficient).
    PerNode(AdaptedField),
}

impl Coefficient {
    pub fn constant_scalar(grid: &SpatialGrid, value: f64) -> Self {
        Coefficient::Constant(vec![value; grid.n_interior()])
    }

    pub fn at(&self, level: usize, node: usize) -> &[f64] {
        match self {
            Coefficient::Constant(v) => v,
            Coefficient::PerLevel(levels) => &levels[level],
            Coefficient::PerNode(f) => f.node(level, node),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        let fold = |acc: f64, xs: &[f64]| xs.iter().fold(acc, |a, x| a.max(x.abs()));
        match self {
            Coefficient::Constant(v) => fold(0.0, v),
            Coefficient::PerLevel(levels) => levels.iter().fold(0.0, |a, l| fold(a, l)),
            Coefficient::PerNode(f) => {
                (0..f.num_levels()).fold(0.0, |a, k| fold(a, f.level(k)))
            }
        }
    }

    pub fn negated(&self) -> Self {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        match self {
            Coefficient::Constant(v) => Coefficient::Constant(neg(v)),
            Coefficient::PerLevel(levels) => {
                Coefficient::PerLevel(levels.iter().map(|l| neg(l)).collect())
            }
            Coefficient::PerNode(f) => {
                let mut g = f.clone();
                g.scale(-1.0);
                Coefficient::PerNode(g)
            }
        }
    }
}

/// Data for a forward solve with prescribed initial profile.
#[derive(Clone, Copy)]
pub struct ForwardProblem<'a> {
    pub a1: &'a Coefficient,
    pub a2: &'a Coefficient,
    pub drift_source: Option<&'a AdaptedField>,
    pub diffusion_source: Option<&'a AdaptedField>,
    /// Initial value, one spatial profile (level 0 has a single node).
    pub initial: &'a [f64],
}

/// Data for a backward solve with prescribed terminal data on level `K`.
#[derive(Clone, Copy)]
pub struct BackwardProblem<'a> {
    pub b1: &'a Coefficient,
    pub b2: &'a Coefficient,
    pub drift_source: Option<&'a AdaptedField>,
    pub diffusion_source: Option<&'a AdaptedField>,
    /// Terminal values, flat over the `2^K` level-`K` nodes.
    pub terminal: &'a [f64],
}

/// Output of a backward solve.
///
/// `state` holds the recursion values on levels `0..=K` (its level-0 entry is
/// the solution's initial value). `smoothed` is the kernel-smoothed
/// conditional mean on levels `0..K`: the trajectory every space-time pairing
/// and cost functional uses for a backward state. `integrand` is the
/// martingale component `Y` on levels `0..K`.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub state: AdaptedField,
    pub smoothed: AdaptedField,
    pub integrand: AdaptedField,
}

fn check_sources(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    src: Option<&AdaptedField>,
    what: &str,
) -> Result<(), SpdeError> {
    if let Some(s) = src {
        if s.n_space() != grid.n_interior() {
            return Err(SpdeError::Shape(format!(
                "{what} has {} spatial points, grid has {}",
                s.n_space(),
                grid.n_interior()
            )));
        }
        if s.num_levels() < tree.steps() {
            return Err(SpdeError::Shape(format!(
                "{what} covers {} levels, need {}",
                s.num_levels(),
                tree.steps()
            )));
        }
    }
    Ok(())
}

fn check_stability(tree: &TreeGrid, a1: &Coefficient) -> Result<(), SpdeError> {
    let bound = tree.dt() * a1.sup_norm();
    if bound >= 1.0 {
        return Err(SpdeError::StabilityGuard(bound));
    }
    Ok(())
}

/// Solve the forward equation
/// `dy = (Lap y + a1 y + f) dt + (a2 y + g) dW`, `y(0) = initial`.
pub fn solve_forward(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    problem: &ForwardProblem,
) -> Result<AdaptedField, SpdeError> {
    let n = grid.n_interior();
    if problem.initial.len() != n {
        return Err(SpdeError::Shape(format!(
            "initial profile has {} entries, grid has {n}",
            problem.initial.len()
        )));
    }
    check_sources(tree, grid, problem.drift_source, "drift source")?;
    check_sources(tree, grid, problem.diffusion_source, "diffusion source")?;
    check_stability(tree, problem.a1)?;

    let kernel = ImplicitKernel::new(grid, tree.dt());
    let dt = tree.dt();
    let sqrt_dt = tree.sqrt_dt();
    let steps = tree.steps();

    let mut out = AdaptedField::zeros(tree, n, steps + 1);
    out.level_mut(0).copy_from_slice(problem.initial);

    for k in 0..steps {
        let (done, rest) = out.split_levels(k + 1);
        let current = done.last().unwrap();
        let next = &mut rest[0];
        par::for_each_chunk_mut(next, 2 * n, |j, children| {
            let y = &current[j * n..(j + 1) * n];
            let a1 = problem.a1.at(k, j);
            let a2 = problem.a2.at(k, j);
            let (up, down) = children.split_at_mut(n);
            for i in 0..n {
                let f = problem.drift_source.map_or(0.0, |s| s.node(k, j)[i]);
                let g = problem.diffusion_source.map_or(0.0, |s| s.node(k, j)[i]);
                let w = y[i] + dt * (a1[i] * y[i] + f);
                let v = a2[i] * y[i] + g;
                up[i] = w + sqrt_dt * v;
                down[i] = w - sqrt_dt * v;
            }
            kernel.solve_in_place(up);
            kernel.solve_in_place(down);
        });
    }
    Ok(out)
}

/// Solve the backward equation
/// `dy = (-Lap y + b1 y + b2 Y + f) dt + (Y + g) dW`, `y(T) = terminal`,
/// by the transpose recursion described in the module docs.
pub fn solve_backward(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    problem: &BackwardProblem,
) -> Result<BackwardSolution, SpdeError> {
    let n = grid.n_interior();
    let steps = tree.steps();
    if problem.terminal.len() != tree.nodes_at(steps) * n {
        return Err(SpdeError::Shape(format!(
            "terminal data has {} entries, level {steps} needs {}",
            problem.terminal.len(),
            tree.nodes_at(steps) * n
        )));
    }
    check_sources(tree, grid, problem.drift_source, "drift source")?;
    check_sources(tree, grid, problem.diffusion_source, "diffusion source")?;
    check_stability(tree, problem.b1)?;

    let kernel = ImplicitKernel::new(grid, tree.dt());
    let dt = tree.dt();
    let half_inv_sqrt_dt = 0.5 / tree.sqrt_dt();

    let mut state = AdaptedField::zeros(tree, n, steps + 1);
    state.level_mut(steps).copy_from_slice(problem.terminal);
    let mut smoothed = AdaptedField::zeros(tree, n, steps);
    let mut integrand = AdaptedField::zeros(tree, n, steps);

    for k in (0..steps).rev() {
        let (done, rest) = state.split_levels(k + 1);
        let upper = &rest[0];
        let current = done.last_mut().unwrap();
        let smooth_lvl = smoothed.level_mut(k);
        let integ_lvl = integrand.level_mut(k);
        par::zip3_chunks_mut(current, smooth_lvl, integ_lvl, n, |j, y, sm, yc| {
            let up = &upper[(2 * j) * n..(2 * j + 1) * n];
            let down = &upper[(2 * j + 1) * n..(2 * j + 2) * n];
            let b1 = problem.b1.at(k, j);
            let b2 = problem.b2.at(k, j);
            for i in 0..n {
                sm[i] = 0.5 * (up[i] + down[i]);
                yc[i] = half_inv_sqrt_dt * (up[i] - down[i]);
            }
            kernel.solve_in_place(sm);
            kernel.solve_in_place(yc);
            for i in 0..n {
                let g = problem.diffusion_source.map_or(0.0, |s| s.node(k, j)[i]);
                let f = problem.drift_source.map_or(0.0, |s| s.node(k, j)[i]);
                yc[i] -= g;
                y[i] = sm[i] - dt * (b1[i] * sm[i] + b2[i] * yc[i] + f);
            }
        });
    }
    Ok(BackwardSolution {
        state,
        smoothed,
        integrand,
    })
}

/// Backward solve of the adjoint of a forward equation with coefficients
/// `(a1, a2)`: `dp = (-Lap p - a1 p - a2 P + s) dt + P dW`, `p(T)` given.
pub fn solve_adjoint_of_forward(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    a1: &Coefficient,
    a2: &Coefficient,
    terminal: &[f64],
    drift_source: Option<&AdaptedField>,
) -> Result<BackwardSolution, SpdeError> {
    let b1 = a1.negated();
    let b2 = a2.negated();
    solve_backward(
        tree,
        grid,
        &BackwardProblem {
            b1: &b1,
            b2: &b2,
            drift_source,
            diffusion_source: None,
            terminal,
        },
    )
}

/// Restriction of `scale * mask * (state - target)` to levels `0..K`.
///
/// `state` may be a trajectory (`K+1` levels) or an integrand (`K` levels);
/// only the first `K` levels enter. A missing target is treated as zero.
pub fn mismatch_source(
    tree: &TreeGrid,
    state: &AdaptedField,
    target: Option<&AdaptedField>,
    mask: &SubdomainMask,
    scale: f64,
) -> AdaptedField {
    let n = state.n_space();
    let ind = mask.indicator();
    AdaptedField::from_fn(tree, n, tree.steps(), |k, j| {
        let s = state.node(k, j);
        (0..n)
            .map(|i| {
                let t = target.map_or(0.0, |t| t.node(k, j)[i]);
                scale * ind[i] * (s[i] - t)
            })
            .collect()
    })
}

/// Follower adjoint states for the forward game: for each follower the
/// backward equation driven by the masked state mismatch
/// `-alpha_i 1_{O_i} (y - y_{i,d})` with zero terminal data.
pub fn solve_follower_adjoint_forward_game(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    a1: &Coefficient,
    a2: &Coefficient,
    y: &AdaptedField,
    targets: &[Option<AdaptedField>],
    alphas: &[f64],
    obs_masks: &[SubdomainMask],
) -> Result<Vec<BackwardSolution>, SpdeError> {
    let m = alphas.len();
    let n = grid.n_interior();
    let zero_terminal = vec![0.0; tree.nodes_at(tree.steps()) * n];
    let b1 = a1.negated();
    let b2 = a2.negated();
    let sources: Vec<AdaptedField> = (0..m)
        .map(|i| mismatch_source(tree, y, targets[i].as_ref(), &obs_masks[i], -alphas[i]))
        .collect();
    let results = par::map_indexed(m, |i| {
        solve_backward(
            tree,
            grid,
            &BackwardProblem {
                b1: &b1,
                b2: &b2,
                drift_source: Some(&sources[i]),
                diffusion_source: None,
                terminal: &zero_terminal,
            },
        )
    });
    results.into_iter().collect()
}

/// Follower adjoint states for the backward game: forward equations with the
/// paired drift and diffusion mismatches and zero initial data.
#[allow(clippy::too_many_arguments)]
pub fn solve_follower_adjoint_backward_game(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    a1: &Coefficient,
    a2: &Coefficient,
    y_smoothed: &AdaptedField,
    y_integrand: &AdaptedField,
    targets_y: &[Option<AdaptedField>],
    targets_diff: &[Option<AdaptedField>],
    alphas: &[f64],
    alphas_tilde: &[f64],
    obs_masks: &[SubdomainMask],
    obs_masks_tilde: &[SubdomainMask],
) -> Result<Vec<AdaptedField>, SpdeError> {
    let m = alphas.len();
    let zero_initial = vec![0.0; grid.n_interior()];
    let a1n = a1.negated();
    let a2n = a2.negated();
    let drift: Vec<AdaptedField> = (0..m)
        .map(|i| {
            mismatch_source(
                tree,
                y_smoothed,
                targets_y[i].as_ref(),
                &obs_masks[i],
                -alphas[i],
            )
        })
        .collect();
    let diff: Vec<AdaptedField> = (0..m)
        .map(|i| {
            mismatch_source(
                tree,
                y_integrand,
                targets_diff[i].as_ref(),
                &obs_masks_tilde[i],
                -alphas_tilde[i],
            )
        })
        .collect();
    let results = par::map_indexed(m, |i| {
        solve_forward(
            tree,
            grid,
            &ForwardProblem {
                a1: &a1n,
                a2: &a2n,
                drift_source: Some(&drift[i]),
                diffusion_source: Some(&diff[i]),
                initial: &zero_initial,
            },
        )
    });
    results.into_iter().collect()
}
