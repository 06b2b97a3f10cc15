//! The four coupled primal/adjoint systems and their duality certificates.
//!
//! Substituting the follower feedback into each game couples the state
//! equation to the follower adjoints; controllability of the resulting
//! system is what the leader layer works with. Each coupled system is an
//! affine fixed-point problem in its coupling source field and is solved by
//! relaxed Picard sweeps (the natural algorithm when the penalties dominate
//! the mismatch weights), escalating to matrix-free GMRES on the fixed-point
//! defect when the sweeps stall.
//!
//! `duality_gap_*` evaluate both sides of the pairing identity between a
//! coupled primal and its coupled adjoint from scratch; with the transpose
//! steppers underneath, the gap is solver tolerance, not O(dt).

use crate::error::{Error, SolverError};
use crate::krylov::{gmres, GmresOptions, IterationStats};
use crate::lattice::{expected_inner_at, space_time_inner, AdaptedField, ScalarProcess};
use crate::nash::{GameContext, Targets};
use crate::spde::{
    mismatch_source, solve_backward, solve_forward, BackwardProblem, BackwardSolution,
    Coefficient, ForwardProblem,
};

/// Options for the coupled fixed-point solves.
#[derive(Debug, Clone)]
pub struct CoupledOptions {
    /// Relative fixed-point residual target.
    pub tol: f64,
    /// Picard sweep budget before escalation.
    pub max_picard: usize,
    /// Relaxation halvings allowed on residual growth.
    pub max_halvings: usize,
    pub gmres: GmresOptions,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_picard: 120,
            max_halvings: 6,
            gmres: GmresOptions {
                restart: 40,
                max_iters: 400,
                tol: 1e-13,
            },
        }
    }
}

/// Convergence record of a coupled solve.
#[derive(Debug, Clone)]
pub struct SweepStats {
    pub sweeps: usize,
    pub residual: f64,
    pub escalated: bool,
    pub gmres: Option<IterationStats>,
}

/// Relaxed Picard iteration on `w = sweep(w)` with GMRES escalation.
fn solve_coupling<S, D>(
    dim: usize,
    sweep: S,
    dot: D,
    opts: &CoupledOptions,
) -> Result<(Vec<f64>, SweepStats), Error>
where
    S: Fn(&[f64]) -> Result<Vec<f64>, Error>,
    D: Fn(&[f64], &[f64]) -> f64,
{
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let mut w = vec![0.0; dim];
    let mut omega = 1.0;
    let mut halvings = 0usize;
    let mut prev_res = f64::INFINITY;
    let mut first_res = None;
    let mut sweeps = 0usize;

    while sweeps < opts.max_picard {
        let tw = sweep(&w)?;
        sweeps += 1;
        let diff: Vec<f64> = tw.iter().zip(&w).map(|(a, b)| a - b).collect();
        let res = norm(&diff) / (1.0 + norm(&tw));
        if first_res.is_none() {
            first_res = Some(res);
        }
        if res <= opts.tol {
            return Ok((
                tw,
                SweepStats {
                    sweeps,
                    residual: res,
                    escalated: false,
                    gmres: None,
                },
            ));
        }
        if res > prev_res {
            if halvings < opts.max_halvings {
                omega *= 0.5;
                halvings += 1;
            } else if res > 1e3 * first_res.unwrap() {
                break; // clearly non-contractive, switch to the Krylov path
            }
        }
        for (wi, di) in w.iter_mut().zip(&diff) {
            *wi += omega * di;
        }
        prev_res = res;
    }

    // Escalation: solve (I - T0) w = T(0) with T0 the linear part.
    let t0 = sweep(&vec![0.0; dim])?;
    let apply = |x: &[f64]| {
        let tx = sweep(x).expect("coupled sweep failed during escalation");
        x.iter()
            .zip(tx.iter().zip(&t0))
            .map(|(xi, (txi, t0i))| xi - (txi - t0i))
            .collect()
    };
    let (w_out, gstats) = gmres(apply, &t0, Some(w), &dot, &opts.gmres);
    let tw = sweep(&w_out)?;
    let diff: Vec<f64> = tw.iter().zip(&w_out).map(|(a, b)| a - b).collect();
    let res = norm(&diff) / (1.0 + norm(&tw));
    let sweeps_total = sweeps + gstats.iterations + 2;
    if res <= opts.tol.max(10.0 * opts.gmres.tol) {
        Ok((
            tw,
            SweepStats {
                sweeps: sweeps_total,
                residual: res,
                escalated: true,
                gmres: Some(gstats),
            },
        ))
    } else {
        Err(Error::Solver(SolverError::CouplingDiverged {
            sweeps: sweeps_total,
            residual: res,
        }))
    }
}

fn field_dot(ctx: &GameContext, a: &[f64], b: &[f64]) -> f64 {
    let n = ctx.n_space();
    let steps = ctx.tree.steps();
    let fa = AdaptedField::from_flat(ctx.tree, n, steps, a);
    let fb = AdaptedField::from_flat(ctx.tree, n, steps, b);
    space_time_inner(ctx.tree, ctx.grid, &fa, &fb, None).unwrap()
}

fn stacked_dot(ctx: &GameContext, a: &[f64], b: &[f64]) -> f64 {
    let half = a.len() / 2;
    field_dot(ctx, &a[..half], &b[..half]) + field_dot(ctx, &a[half..], &b[half..])
}

/// Pointwise product of a coefficient field with an adapted field over the
/// pairing levels.
pub fn coeff_times_field(
    ctx: &GameContext,
    coeff: &Coefficient,
    field: &AdaptedField,
) -> AdaptedField {
    let n = ctx.n_space();
    AdaptedField::from_fn(ctx.tree, n, ctx.tree.steps(), |k, j| {
        let c = coeff.at(k, j);
        let f = field.node(k, j);
        (0..n).map(|i| c[i] * f[i]).collect()
    })
}

/// Data for the forward-game coupled primal system.
///
/// The `extra_*` slots inject additional sources into each follower adjoint
/// equation; they exist so observability Gramians can be composed exactly
/// from primal solves and are zero in ordinary runs.
#[derive(Clone, Copy, Default)]
pub struct PrimalExtras<'a> {
    pub follower_drift: Option<&'a [AdaptedField]>,
    pub follower_diffusion: Option<&'a [AdaptedField]>,
}

#[derive(Clone, Copy)]
pub struct ForwardPrimalData<'a> {
    pub initial: &'a [f64],
    pub u1: Option<&'a AdaptedField>,
    pub u2: Option<&'a AdaptedField>,
    pub targets: &'a Targets,
    pub extras: PrimalExtras<'a>,
}

#[derive(Clone, Copy)]
pub struct BackwardPrimalData<'a> {
    /// Terminal data, flat over the level-`K` nodes.
    pub terminal: &'a [f64],
    pub u1: Option<&'a AdaptedField>,
    pub u2: Option<&'a AdaptedField>,
    pub targets: &'a Targets,
    pub extras: PrimalExtras<'a>,
}

/// Solution of the forward-game coupled primal system.
pub struct ForwardPrimalSolution {
    /// Controlled state trajectory (levels `0..=K`).
    pub state: AdaptedField,
    /// Follower adjoint states (smoothed trajectories drive the feedback).
    pub followers: Vec<BackwardSolution>,
    pub stats: SweepStats,
}

/// Solution of the forward-game coupled adjoint system.
pub struct ForwardAdjointSolution {
    pub phi: BackwardSolution,
    /// Companion forward states, one per follower (levels `0..=K`).
    pub psi: Vec<AdaptedField>,
    pub stats: SweepStats,
}

/// Solution of the backward-game coupled primal system.
pub struct BackwardPrimalSolution {
    pub state: BackwardSolution,
    /// Follower adjoint trajectories (levels `0..=K`).
    pub followers: Vec<AdaptedField>,
    pub stats: SweepStats,
}

/// Solution of the backward-game coupled adjoint system.
pub struct BackwardAdjointSolution {
    /// Adjoint state trajectory (levels `0..=K`).
    pub phi: AdaptedField,
    /// Companion backward states, one per follower.
    pub psi: Vec<BackwardSolution>,
    /// The summed masked diffusion observation `sum_i alpha~_i 1 Psi_i`.
    pub diffusion_obs: AdaptedField,
    pub stats: SweepStats,
}

/// Leader drift `1_{G_0} u_1 - feedback + nothing else`, shared assembly.
fn leader_drift(ctx: &GameContext, u1: Option<&AdaptedField>, feedback: &AdaptedField) -> AdaptedField {
    let mut drift = AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps());
    if let Some(u) = u1 {
        let mut f = u.clone();
        f.mask_in_place(ctx.leader_mask.indicator());
        drift.axpy(1.0, &f);
    }
    drift.axpy(-1.0, feedback);
    drift
}

/// Forward-game primal: state equation with feedback drift coupled to the
/// follower adjoint equations.
pub fn solve_forward_primal(
    ctx: &GameContext,
    data: &ForwardPrimalData,
    opts: &CoupledOptions,
) -> Result<ForwardPrimalSolution, Error> {
    let m = ctx.params.followers();
    let n = ctx.n_space();
    let steps = ctx.tree.steps();
    let zero_terminal = vec![0.0; ctx.tree.nodes_at(steps) * n];

    let followers_of_state = |y: &AdaptedField| -> Result<Vec<BackwardSolution>, Error> {
        let sources: Vec<AdaptedField> = (0..m)
            .map(|i| {
                let mut s = mismatch_source(
                    ctx.tree,
                    y,
                    data.targets.state_ref(i),
                    &ctx.params.obs_masks[i],
                    -ctx.params.alpha[i],
                );
                if let Some(extra) = data.extras.follower_drift {
                    s.axpy(1.0, &extra[i]);
                }
                s
            })
            .collect();
        let res = crate::par::map_indexed(m, |i| {
            solve_backward(
                ctx.tree,
                ctx.grid,
                &BackwardProblem {
                    b1: ctx.a1_neg(),
                    b2: ctx.a2_neg(),
                    drift_source: Some(&sources[i]),
                    diffusion_source: data.extras.follower_diffusion.map(|e| &e[i]),
                    terminal: &zero_terminal,
                },
            )
        });
        res.into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(Error::from)
    };

    let state_of_feedback = |w: &AdaptedField| -> Result<AdaptedField, Error> {
        let drift = leader_drift(ctx, data.u1, w);
        Ok(solve_forward(
            ctx.tree,
            ctx.grid,
            &ForwardProblem {
                a1: ctx.a1,
                a2: ctx.a2,
                drift_source: Some(&drift),
                diffusion_source: data.u2,
                initial: data.initial,
            },
        )?)
    };

    let sweep = |w_flat: &[f64]| -> Result<Vec<f64>, Error> {
        let w = AdaptedField::from_flat(ctx.tree, n, steps, w_flat);
        let y = state_of_feedback(&w)?;
        let zs = followers_of_state(&y)?;
        let mut w_new = AdaptedField::zeros(ctx.tree, n, steps);
        for (i, z) in zs.iter().enumerate() {
            let mut part = z.smoothed.clone();
            part.mask_in_place(ctx.params.control_masks[i].indicator());
            part.scale(ctx.params.gain(i));
            w_new.axpy(1.0, &part);
        }
        Ok(w_new.to_flat())
    };

    let dim = steps_dim(ctx);
    let (w_flat, stats) = solve_coupling(dim, sweep, |a, b| field_dot(ctx, a, b), opts)?;
    let w = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat);
    let state = state_of_feedback(&w)?;
    let followers = followers_of_state(&state)?;
    Ok(ForwardPrimalSolution {
        state,
        followers,
        stats,
    })
}

fn steps_dim(ctx: &GameContext) -> usize {
    AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps())
        .to_flat()
        .len()
}

/// Forward-game adjoint: backward state equation sourced by the companion
/// forward states.
pub fn solve_forward_adjoint(
    ctx: &GameContext,
    terminal: &[f64],
    opts: &CoupledOptions,
) -> Result<ForwardAdjointSolution, Error> {
    let m = ctx.params.followers();
    let n = ctx.n_space();
    let steps = ctx.tree.steps();

    let phi_of_coupling = |w: &AdaptedField| -> Result<BackwardSolution, Error> {
        Ok(solve_backward(
            ctx.tree,
            ctx.grid,
            &BackwardProblem {
                b1: ctx.a1_neg(),
                b2: ctx.a2_neg(),
                drift_source: Some(w),
                diffusion_source: None,
                terminal,
            },
        )?)
    };
    let psi_of_phi = |phi: &BackwardSolution| -> Result<Vec<AdaptedField>, Error> {
        let sources: Vec<AdaptedField> = (0..m)
            .map(|i| {
                let mut s = phi.smoothed.clone();
                s.mask_in_place(ctx.params.control_masks[i].indicator());
                s.scale(ctx.params.gain(i));
                s
            })
            .collect();
        let res = crate::par::map_indexed(m, |i| {
            solve_forward(
                ctx.tree,
                ctx.grid,
                &ForwardProblem {
                    a1: ctx.a1,
                    a2: ctx.a2,
                    drift_source: Some(&sources[i]),
                    diffusion_source: None,
                    initial: &vec![0.0; n],
                },
            )
        });
        res.into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(Error::from)
    };

    let sweep = |w_flat: &[f64]| -> Result<Vec<f64>, Error> {
        let w = AdaptedField::from_flat(ctx.tree, n, steps, w_flat);
        let phi = phi_of_coupling(&w)?;
        let psi = psi_of_phi(&phi)?;
        let mut w_new = AdaptedField::zeros(ctx.tree, n, steps);
        for (i, p) in psi.iter().enumerate() {
            w_new.axpy(
                1.0,
                &mismatch_source(ctx.tree, p, None, &ctx.params.obs_masks[i], ctx.params.alpha[i]),
            );
        }
        Ok(w_new.to_flat())
    };

    let (w_flat, stats) = solve_coupling(steps_dim(ctx), sweep, |a, b| field_dot(ctx, a, b), opts)?;
    let w = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat);
    let phi = phi_of_coupling(&w)?;
    let psi = psi_of_phi(&phi)?;
    Ok(ForwardAdjointSolution { phi, psi, stats })
}

/// Backward-game primal: backward state equation coupled to forward follower
/// adjoints with paired drift/diffusion mismatches.
pub fn solve_backward_primal(
    ctx: &GameContext,
    data: &BackwardPrimalData,
    opts: &CoupledOptions,
) -> Result<BackwardPrimalSolution, Error> {
    let m = ctx.params.followers();
    let n = ctx.n_space();
    let steps = ctx.tree.steps();

    let state_of_feedback = |w: &AdaptedField| -> Result<BackwardSolution, Error> {
        let drift = leader_drift(ctx, data.u1, w);
        Ok(solve_backward(
            ctx.tree,
            ctx.grid,
            &BackwardProblem {
                b1: ctx.a1,
                b2: ctx.a2,
                drift_source: Some(&drift),
                diffusion_source: data.u2,
                terminal: data.terminal,
            },
        )?)
    };
    let followers_of_state = |sol: &BackwardSolution| -> Result<Vec<AdaptedField>, Error> {
        let drifts: Vec<AdaptedField> = (0..m)
            .map(|i| {
                let mut s = mismatch_source(
                    ctx.tree,
                    &sol.smoothed,
                    data.targets.state_ref(i),
                    &ctx.params.obs_masks[i],
                    -ctx.params.alpha[i],
                );
                if let Some(extra) = data.extras.follower_drift {
                    s.axpy(1.0, &extra[i]);
                }
                s
            })
            .collect();
        let diffs: Vec<AdaptedField> = (0..m)
            .map(|i| {
                let mut s = mismatch_source(
                    ctx.tree,
                    &sol.integrand,
                    data.targets.diffusion_ref(i),
                    &ctx.params.obs_masks_tilde[i],
                    -ctx.params.alpha_tilde[i],
                );
                if let Some(extra) = data.extras.follower_diffusion {
                    s.axpy(1.0, &extra[i]);
                }
                s
            })
            .collect();
        let res = crate::par::map_indexed(m, |i| {
            solve_forward(
                ctx.tree,
                ctx.grid,
                &ForwardProblem {
                    a1: ctx.a1_neg(),
                    a2: ctx.a2_neg(),
                    drift_source: Some(&drifts[i]),
                    diffusion_source: Some(&diffs[i]),
                    initial: &vec![0.0; n],
                },
            )
        });
        res.into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(Error::from)
    };

    let sweep = |w_flat: &[f64]| -> Result<Vec<f64>, Error> {
        let w = AdaptedField::from_flat(ctx.tree, n, steps, w_flat);
        let sol = state_of_feedback(&w)?;
        let zs = followers_of_state(&sol)?;
        let mut w_new = AdaptedField::zeros(ctx.tree, n, steps);
        for (i, z) in zs.iter().enumerate() {
            let mut part = crate::nash::pairing_levels(ctx, z);
            part.mask_in_place(ctx.params.control_masks[i].indicator());
            part.scale(ctx.params.gain(i));
            w_new.axpy(1.0, &part);
        }
        Ok(w_new.to_flat())
    };

    let (w_flat, stats) = solve_coupling(steps_dim(ctx), sweep, |a, b| field_dot(ctx, a, b), opts)?;
    let w = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat);
    let state = state_of_feedback(&w)?;
    let followers = followers_of_state(&state)?;
    Ok(BackwardPrimalSolution {
        state,
        followers,
        stats,
    })
}

/// Backward-game adjoint: forward state equation with drift and diffusion
/// couplings from the companion backward states.
pub fn solve_backward_adjoint(
    ctx: &GameContext,
    initial: &[f64],
    opts: &CoupledOptions,
) -> Result<BackwardAdjointSolution, Error> {
    let m = ctx.params.followers();
    let n = ctx.n_space();
    let steps = ctx.tree.steps();
    let zero_terminal = vec![0.0; ctx.tree.nodes_at(steps) * n];

    let phi_of_coupling = |wd: &AdaptedField, wg: &AdaptedField| -> Result<AdaptedField, Error> {
        Ok(solve_forward(
            ctx.tree,
            ctx.grid,
            &ForwardProblem {
                a1: ctx.a1_neg(),
                a2: ctx.a2_neg(),
                drift_source: Some(wd),
                diffusion_source: Some(wg),
                initial,
            },
        )?)
    };
    let psi_of_phi = |phi: &AdaptedField| -> Result<Vec<BackwardSolution>, Error> {
        let phi_k = crate::nash::pairing_levels(ctx, phi);
        let sources: Vec<AdaptedField> = (0..m)
            .map(|i| {
                let mut s = phi_k.clone();
                s.mask_in_place(ctx.params.control_masks[i].indicator());
                s.scale(ctx.params.gain(i));
                s
            })
            .collect();
        let res = crate::par::map_indexed(m, |i| {
            solve_backward(
                ctx.tree,
                ctx.grid,
                &BackwardProblem {
                    b1: ctx.a1,
                    b2: ctx.a2,
                    drift_source: Some(&sources[i]),
                    diffusion_source: None,
                    terminal: &zero_terminal,
                },
            )
        });
        res.into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(Error::from)
    };
    let couplings_of_psi = |psi: &[BackwardSolution]| -> (AdaptedField, AdaptedField) {
        let mut wd = AdaptedField::zeros(ctx.tree, n, steps);
        let mut wg = AdaptedField::zeros(ctx.tree, n, steps);
        for (i, p) in psi.iter().enumerate() {
            wd.axpy(
                1.0,
                &mismatch_source(
                    ctx.tree,
                    &p.smoothed,
                    None,
                    &ctx.params.obs_masks[i],
                    ctx.params.alpha[i],
                ),
            );
            wg.axpy(
                1.0,
                &mismatch_source(
                    ctx.tree,
                    &p.integrand,
                    None,
                    &ctx.params.obs_masks_tilde[i],
                    ctx.params.alpha_tilde[i],
                ),
            );
        }
        (wd, wg)
    };

    let dim = steps_dim(ctx);
    let sweep = |w_flat: &[f64]| -> Result<Vec<f64>, Error> {
        let wd = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat[..dim]);
        let wg = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat[dim..]);
        let phi = phi_of_coupling(&wd, &wg)?;
        let psi = psi_of_phi(&phi)?;
        let (wd_new, wg_new) = couplings_of_psi(&psi);
        let mut out = wd_new.to_flat();
        out.extend_from_slice(&wg_new.to_flat());
        Ok(out)
    };

    let (w_flat, stats) = solve_coupling(2 * dim, sweep, |a, b| stacked_dot(ctx, a, b), opts)?;
    let wd = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat[..dim]);
    let wg = AdaptedField::from_flat(ctx.tree, n, steps, &w_flat[dim..]);
    let phi = phi_of_coupling(&wd, &wg)?;
    let psi = psi_of_phi(&phi)?;
    let (_, diffusion_obs) = couplings_of_psi(&psi);
    Ok(BackwardAdjointSolution {
        phi,
        psi,
        diffusion_obs,
        stats,
    })
}

/// Leader observation fields of a forward-game adjoint solution:
/// `(1_{G_0} phi~, Phi)`, the integrands the leader controls pair with.
pub fn forward_observations(
    ctx: &GameContext,
    adj: &ForwardAdjointSolution,
) -> (AdaptedField, AdaptedField) {
    let mut obs1 = adj.phi.smoothed.clone();
    obs1.mask_in_place(ctx.leader_mask.indicator());
    (obs1, adj.phi.integrand.clone())
}

/// Leader observation fields of a backward-game adjoint solution:
/// `(1_{G_0} phi, sum_i alpha~_i 1 Psi_i - a2 phi)`.
pub fn backward_observations(
    ctx: &GameContext,
    adj: &BackwardAdjointSolution,
) -> (AdaptedField, AdaptedField) {
    let phi_k = crate::nash::pairing_levels(ctx, &adj.phi);
    let mut obs1 = phi_k.clone();
    obs1.mask_in_place(ctx.leader_mask.indicator());
    let mut obs2 = adj.diffusion_obs.clone();
    let a2_phi = coeff_times_field(ctx, ctx.a2, &phi_k);
    obs2.axpy(-1.0, &a2_phi);
    (obs1, obs2)
}

/// Both sides of the forward-game duality identity, evaluated independently.
///
/// Returns `|lhs - rhs| / (1 + |lhs| + |rhs|)`.
pub fn duality_gap_forward(
    ctx: &GameContext,
    data: &ForwardPrimalData,
    adjoint_terminal: &[f64],
    opts: &CoupledOptions,
) -> Result<f64, Error> {
    let primal = solve_forward_primal(ctx, data, opts)?;
    let adj = solve_forward_adjoint(ctx, adjoint_terminal, opts)?;
    let steps = ctx.tree.steps();

    let lhs = expected_inner_at(ctx.tree, ctx.grid, &primal.state, &adj.phi.state, steps)
        - expected_inner_at(ctx.tree, ctx.grid, &primal.state, &adj.phi.state, 0);

    let (obs1, obs2) = forward_observations(ctx, &adj);
    let mut rhs = 0.0;
    if let Some(u1) = data.u1 {
        rhs += space_time_inner(ctx.tree, ctx.grid, u1, &obs1, None)?;
    }
    if let Some(u2) = data.u2 {
        rhs += space_time_inner(ctx.tree, ctx.grid, u2, &obs2, None)?;
    }
    for i in 0..ctx.params.followers() {
        if let Some(t) = data.targets.state_ref(i) {
            let masked_psi = mismatch_source(
                ctx.tree,
                &adj.psi[i],
                None,
                &ctx.params.obs_masks[i],
                ctx.params.alpha[i],
            );
            rhs += space_time_inner(ctx.tree, ctx.grid, t, &masked_psi, None)?;
        }
        if let Some(extra) = data.extras.follower_drift {
            let psi_k = crate::nash::pairing_levels(ctx, &adj.psi[i]);
            rhs += space_time_inner(ctx.tree, ctx.grid, &extra[i], &psi_k, None)?;
        }
        if let Some(extra) = data.extras.follower_diffusion {
            let psi_k = crate::nash::pairing_levels(ctx, &adj.psi[i]);
            let a2_psi = coeff_times_field(ctx, ctx.a2, &psi_k);
            rhs += space_time_inner(ctx.tree, ctx.grid, &extra[i], &a2_psi, None)?;
        }
    }
    Ok((lhs - rhs).abs() / (1.0 + lhs.abs() + rhs.abs()))
}

/// Both sides of the backward-game duality identity, evaluated independently.
pub fn duality_gap_backward(
    ctx: &GameContext,
    data: &BackwardPrimalData,
    adjoint_initial: &[f64],
    opts: &CoupledOptions,
) -> Result<f64, Error> {
    let primal = solve_backward_primal(ctx, data, opts)?;
    let adj = solve_backward_adjoint(ctx, adjoint_initial, opts)?;
    let steps = ctx.tree.steps();

    let lhs = expected_inner_at(ctx.tree, ctx.grid, &primal.state.state, &adj.phi, steps)
        - expected_inner_at(ctx.tree, ctx.grid, &primal.state.state, &adj.phi, 0);

    let (obs1, obs2) = backward_observations(ctx, &adj);
    let mut rhs = 0.0;
    if let Some(u1) = data.u1 {
        rhs += space_time_inner(ctx.tree, ctx.grid, u1, &obs1, None)?;
    }
    if let Some(u2) = data.u2 {
        rhs += space_time_inner(ctx.tree, ctx.grid, u2, &obs2, None)?;
    }
    for i in 0..ctx.params.followers() {
        if let Some(t) = data.targets.state_ref(i) {
            let masked = mismatch_source(
                ctx.tree,
                &adj.psi[i].smoothed,
                None,
                &ctx.params.obs_masks[i],
                ctx.params.alpha[i],
            );
            rhs += space_time_inner(ctx.tree, ctx.grid, t, &masked, None)?;
        }
        if let Some(t) = data.targets.diffusion_ref(i) {
            let masked = mismatch_source(
                ctx.tree,
                &adj.psi[i].integrand,
                None,
                &ctx.params.obs_masks_tilde[i],
                ctx.params.alpha_tilde[i],
            );
            rhs += space_time_inner(ctx.tree, ctx.grid, t, &masked, None)?;
        }
        if let Some(extra) = data.extras.follower_drift {
            rhs += space_time_inner(ctx.tree, ctx.grid, &extra[i], &adj.psi[i].smoothed, None)?;
        }
        if let Some(extra) = data.extras.follower_diffusion {
            rhs += space_time_inner(ctx.tree, ctx.grid, &extra[i], &adj.psi[i].integrand, None)?;
        }
    }
    Ok((lhs - rhs).abs() / (1.0 + lhs.abs() + rhs.abs()))
}

/// Deterministic weight process from a time function, for certificate norms.
pub fn weight_process<F: Fn(f64) -> f64>(ctx: &GameContext, f: F) -> ScalarProcess {
    ScalarProcess::from_time_fn(ctx.tree, ctx.tree.steps(), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SpatialGrid, SubdomainMask};
    use crate::lattice::TreeGrid;
    use crate::nash::{GameDirection, GameParameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        tree: TreeGrid,
        grid: SpatialGrid,
        a1: Coefficient,
        a2: Coefficient,
        leader: SubdomainMask,
        params: GameParameters,
    }

    fn fixture(steps: usize, n: usize, m: usize, beta: f64, alpha: f64) -> Fixture {
        let tree = TreeGrid::new(1.0, steps).unwrap();
        let grid = SpatialGrid::new(1.0, n).unwrap();
        let a1 = Coefficient::constant_scalar(&grid, 0.6);
        let a2 = Coefficient::constant_scalar(&grid, 0.5);
        let leader = SubdomainMask::from_range(&grid, 1, n.div_ceil(2)).unwrap();
        let params = GameParameters {
            alpha: vec![alpha; m],
            alpha_tilde: vec![alpha; m],
            beta: vec![beta; m],
            r_weight: vec![1.0; m],
            control_masks: (0..m)
                .map(|i| SubdomainMask::from_range(&grid, 1 + i, n - i).unwrap())
                .collect(),
            obs_masks: (0..m)
                .map(|_| SubdomainMask::from_range(&grid, n / 3 + 1, n).unwrap())
                .collect(),
            obs_masks_tilde: (0..m).map(|_| SubdomainMask::full(&grid)).collect(),
        };
        Fixture {
            tree,
            grid,
            a1,
            a2,
            leader,
            params,
        }
    }

    fn ctx(f: &Fixture, d: GameDirection) -> GameContext<'_> {
        GameContext::new(&f.tree, &f.grid, &f.a1, &f.a2, &f.leader, &f.params, d)
    }

    fn random_field(c: &GameContext, rng: &mut ChaCha8Rng) -> AdaptedField {
        AdaptedField::from_fn(c.tree, c.n_space(), c.tree.steps(), |_, _| {
            (0..c.n_space()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
    }

    #[test]
    fn zero_data_converges_immediately() {
        let f = fixture(3, 5, 2, 50.0, 1.0);
        let c = ctx(&f, GameDirection::Forward);
        let targets = Targets::zero(2);
        let data = ForwardPrimalData {
            initial: &vec![0.0; 5],
            u1: None,
            u2: None,
            targets: &targets,
            extras: PrimalExtras::default(),
        };
        let sol = solve_forward_primal(&c, &data, &CoupledOptions::default()).unwrap();
        assert_eq!(sol.stats.sweeps, 1);
        assert!(sol.state.level(3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoupled_system_needs_two_sweeps() {
        let f = fixture(3, 5, 2, 50.0, 0.0);
        let c = ctx(&f, GameDirection::Forward);
        let targets = Targets::zero(2);
        let data = ForwardPrimalData {
            initial: &vec![1.0; 5],
            u1: None,
            u2: None,
            targets: &targets,
            extras: PrimalExtras::default(),
        };
        let sol = solve_forward_primal(&c, &data, &CoupledOptions::default()).unwrap();
        assert!(sol.stats.sweeps <= 2, "sweeps {}", sol.stats.sweeps);
    }

    #[test]
    fn forward_duality_gap_is_tiny() {
        let f = fixture(5, 9, 2, 60.0, 1.0);
        let c = ctx(&f, GameDirection::Forward);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut targets = Targets::zero(2);
        targets.state[0] = Some(random_field(&c, &mut rng));
        targets.state[1] = Some(random_field(&c, &mut rng));
        let u1 = random_field(&c, &mut rng);
        let u2 = random_field(&c, &mut rng);
        let y0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phi_t: Vec<f64> = (0..c.tree.nodes_at(5) * 9)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let data = ForwardPrimalData {
            initial: &y0,
            u1: Some(&u1),
            u2: Some(&u2),
            targets: &targets,
            extras: PrimalExtras::default(),
        };
        let gap = duality_gap_forward(&c, &data, &phi_t, &CoupledOptions::default()).unwrap();
        assert!(gap < 1e-12, "gap {gap:.3e}");
    }

    #[test]
    fn backward_duality_gap_is_tiny() {
        let f = fixture(5, 9, 2, 60.0, 1.0);
        let c = ctx(&f, GameDirection::Backward);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut targets = Targets::zero(2);
        targets.state[0] = Some(random_field(&c, &mut rng));
        targets.diffusion[1] = Some(random_field(&c, &mut rng));
        let u1 = random_field(&c, &mut rng);
        let u2 = random_field(&c, &mut rng);
        let y_t: Vec<f64> = (0..c.tree.nodes_at(5) * 9)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let phi0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data = BackwardPrimalData {
            terminal: &y_t,
            u1: Some(&u1),
            u2: Some(&u2),
            targets: &targets,
            extras: PrimalExtras::default(),
        };
        let gap = duality_gap_backward(&c, &data, &phi0, &CoupledOptions::default()).unwrap();
        assert!(gap < 1e-12, "gap {gap:.3e}");
    }

    #[test]
    fn duality_gap_with_extra_slots() {
        // The injection slots must pair exactly too (the Gramian compositions
        // rely on it).
        let f = fixture(4, 7, 2, 40.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for direction in [GameDirection::Forward, GameDirection::Backward] {
            let c = ctx(&f, direction);
            let targets = Targets::zero(2);
            let extra_d: Vec<AdaptedField> =
                (0..2).map(|_| random_field(&c, &mut rng)).collect();
            let extra_g: Vec<AdaptedField> =
                (0..2).map(|_| random_field(&c, &mut rng)).collect();
            let extras = PrimalExtras {
                follower_drift: Some(&extra_d),
                follower_diffusion: Some(&extra_g),
            };
            let y_term: Vec<f64> = (0..c.tree.nodes_at(4) * 7)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let y0: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gap = match direction {
                GameDirection::Forward => {
                    let data = ForwardPrimalData {
                        initial: &y0,
                        u1: None,
                        u2: None,
                        targets: &targets,
                        extras,
                    };
                    duality_gap_forward(&c, &data, &y_term, &CoupledOptions::default()).unwrap()
                }
                GameDirection::Backward => {
                    let data = BackwardPrimalData {
                        terminal: &y_term,
                        u1: None,
                        u2: None,
                        targets: &targets,
                        extras,
                    };
                    duality_gap_backward(&c, &data, &y0, &CoupledOptions::default()).unwrap()
                }
            };
            assert!(gap < 1e-12, "{direction:?} gap {gap:.3e}");
        }
    }

    #[test]
    fn escalation_handles_small_penalties() {
        // beta = 1 with alpha = 6 stresses the sweeps; the Krylov path must
        // still deliver the fixed point.
        let f = fixture(4, 7, 2, 1.0, 6.0);
        let c = ctx(&f, GameDirection::Forward);
        let targets = Targets::zero(2);
        let y0 = vec![1.0; 7];
        let data = ForwardPrimalData {
            initial: &y0,
            u1: None,
            u2: None,
            targets: &targets,
            extras: PrimalExtras::default(),
        };
        let opts = CoupledOptions {
            max_picard: 15,
            ..CoupledOptions::default()
        };
        let sol = solve_forward_primal(&c, &data, &opts).unwrap();
        assert!(sol.stats.residual <= 1e-12);
    }
}
