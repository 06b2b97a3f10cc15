//! Follower layer: the Nash operator equation and its verification.
//!
//! For fixed leader controls the followers' best responses solve a linear
//! operator equation `M v* = rhs`, where block `i` of `M` composes the
//! control-to-state map of follower `i` with the masked observation of the
//! summed state and adds the quadratic penalty `beta_i r_i v_i`. `M` is
//! evaluated matrix-free (one state solve plus `m` adjoint solves) and the
//! equation is solved by restarted GMRES in the weighted space-time inner
//! product, with a Richardson fallback. The solution is cross-checked against
//! the feedback characterization `v_i = -(1/(beta_i r_i)) 1_{G_i} z_i`
//! obtained from one re-solve through the state.

use crate::error::Error;
use crate::grid::{SpatialGrid, SubdomainMask};
use crate::krylov::{gmres, GmresOptions, IterationStats};
use crate::lattice::{space_time_inner, AdaptedField, TreeGrid};
use crate::spde::{
    mismatch_source, solve_backward, solve_follower_adjoint_backward_game,
    solve_follower_adjoint_forward_game, solve_forward, BackwardProblem, BackwardSolution,
    Coefficient, ForwardProblem,
};
use rand::Rng;

/// Which of the two games is being played.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GameDirection {
    /// State runs forward from an initial profile; goal lives at `t = T`.
    Forward,
    /// State runs backward from terminal data; goal lives at `t = 0`.
    Backward,
}

/// Follower cost data: mismatch weights, control penalties, and regions.
///
/// `r_weight` holds the scalar control metrics `R_i = r_i Id` (kept at 1 in
/// the standard setting; the hook exists because the costs are stated for a
/// general coercive `R_i`).
#[derive(Debug, Clone)]
pub struct GameParameters {
    pub alpha: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    pub beta: Vec<f64>,
    pub r_weight: Vec<f64>,
    pub control_masks: Vec<SubdomainMask>,
    pub obs_masks: Vec<SubdomainMask>,
    pub obs_masks_tilde: Vec<SubdomainMask>,
}

impl GameParameters {
    pub fn followers(&self) -> usize {
        self.alpha.len()
    }

    /// Feedback gain of follower `i`: `1 / (beta_i r_i)`.
    pub fn gain(&self, i: usize) -> f64 {
        1.0 / (self.beta[i] * self.r_weight[i])
    }

    pub fn validate(&self) -> Result<(), Error> {
        let m = self.alpha.len();
        if m == 0 {
            return Err(Error::Geometry("at least one follower required".into()));
        }
        let lens = [
            self.alpha_tilde.len(),
            self.beta.len(),
            self.r_weight.len(),
            self.control_masks.len(),
            self.obs_masks.len(),
            self.obs_masks_tilde.len(),
        ];
        if lens.iter().any(|l| *l != m) {
            return Err(Error::Geometry(
                "per-follower arrays differ in length".into(),
            ));
        }
        if self.beta.iter().any(|b| *b < 1.0) {
            return Err(Error::Geometry(
                "control penalties must satisfy beta >= 1".into(),
            ));
        }
        if self.r_weight.iter().any(|r| *r <= 0.0) {
            return Err(Error::Geometry(
                "control metric weights must be positive".into(),
            ));
        }
        if self.alpha.iter().chain(&self.alpha_tilde).any(|a| *a < 0.0) {
            return Err(Error::Geometry("mismatch weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-follower target trajectories; `None` means the zero target.
#[derive(Debug, Clone, Default)]
pub struct Targets {
    pub state: Vec<Option<AdaptedField>>,
    pub diffusion: Vec<Option<AdaptedField>>,
}

impl Targets {
    pub fn zero(m: usize) -> Self {
        Self {
            state: vec![None; m],
            diffusion: vec![None; m],
        }
    }

    pub fn state_ref(&self, i: usize) -> Option<&AdaptedField> {
        self.state.get(i).and_then(|t| t.as_ref())
    }

    pub fn diffusion_ref(&self, i: usize) -> Option<&AdaptedField> {
        self.diffusion.get(i).and_then(|t| t.as_ref())
    }
}

/// Everything fixed for one game instance.
#[derive(Clone)]
pub struct GameContext<'a> {
    pub tree: &'a TreeGrid,
    pub grid: &'a SpatialGrid,
    pub a1: &'a Coefficient,
    pub a2: &'a Coefficient,
    pub leader_mask: &'a SubdomainMask,
    pub params: &'a GameParameters,
    pub direction: GameDirection,
    a1_neg: Coefficient,
    a2_neg: Coefficient,
}

impl<'a> GameContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: &'a TreeGrid,
        grid: &'a SpatialGrid,
        a1: &'a Coefficient,
        a2: &'a Coefficient,
        leader_mask: &'a SubdomainMask,
        params: &'a GameParameters,
        direction: GameDirection,
    ) -> Self {
        Self {
            tree,
            grid,
            a1,
            a2,
            leader_mask,
            params,
            direction,
            a1_neg: a1.negated(),
            a2_neg: a2.negated(),
        }
    }

    pub(crate) fn a1_neg(&self) -> &Coefficient {
        &self.a1_neg
    }

    pub(crate) fn a2_neg(&self) -> &Coefficient {
        &self.a2_neg
    }

    pub fn n_space(&self) -> usize {
        self.grid.n_interior()
    }
}

/// One control field per follower, supported on its control region.
#[derive(Debug, Clone)]
pub struct ControlSet {
    pub fields: Vec<AdaptedField>,
}

impl ControlSet {
    pub fn zeros(ctx: &GameContext) -> Self {
        let m = ctx.params.followers();
        Self {
            fields: (0..m)
                .map(|_| AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps()))
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in &self.fields {
            out.extend_from_slice(&f.to_flat());
        }
        out
    }

    pub fn from_flat(ctx: &GameContext, data: &[f64]) -> Self {
        let m = ctx.params.followers();
        let per = data.len() / m;
        Self {
            fields: (0..m)
                .map(|i| {
                    AdaptedField::from_flat(
                        ctx.tree,
                        ctx.n_space(),
                        ctx.tree.steps(),
                        &data[i * per..(i + 1) * per],
                    )
                })
                .collect(),
        }
    }

    /// Weighted control-space inner product: sum of space-time pairings.
    pub fn dot(ctx: &GameContext, a: &ControlSet, b: &ControlSet) -> f64 {
        a.fields
            .iter()
            .zip(&b.fields)
            .map(|(x, y)| space_time_inner(ctx.tree, ctx.grid, x, y, None).unwrap())
            .sum()
    }

    pub fn norm(ctx: &GameContext, a: &ControlSet) -> f64 {
        Self::dot(ctx, a, a).sqrt()
    }

    pub fn axpy(&mut self, c: f64, other: &ControlSet) {
        for (a, b) in self.fields.iter_mut().zip(&other.fields) {
            a.axpy(c, b);
        }
    }

    pub fn mask(&mut self, ctx: &GameContext) {
        for (f, m) in self.fields.iter_mut().zip(&ctx.params.control_masks) {
            f.mask_in_place(m.indicator());
        }
    }
}

/// Control-space dot product on flat vectors (fixed sequential reduction).
pub(crate) fn flat_control_dot(ctx: &GameContext, a: &[f64], b: &[f64]) -> f64 {
    let sa = ControlSet::from_flat(ctx, a);
    let sb = ControlSet::from_flat(ctx, b);
    ControlSet::dot(ctx, &sa, &sb)
}

/// State response of a follower control with homogeneous data.
///
/// Forward game: the forward trajectory driven by `1_{G_i} v_i`. Backward
/// game: the backward solution (smoothed trajectory + martingale component)
/// driven the same way.
pub enum LambdaImage {
    Forward(AdaptedField),
    Backward(BackwardSolution),
}

impl LambdaImage {
    /// The space-time pairing representative of the state trajectory.
    pub fn state_repr(&self) -> &AdaptedField {
        match self {
            LambdaImage::Forward(y) => y,
            LambdaImage::Backward(sol) => &sol.smoothed,
        }
    }
}

pub fn apply_lambda(ctx: &GameContext, i: usize, v: &AdaptedField) -> Result<LambdaImage, Error> {
    let mut src = v.clone();
    src.mask_in_place(ctx.params.control_masks[i].indicator());
    lambda_of_source(ctx, &src)
}

fn lambda_of_source(ctx: &GameContext, src: &AdaptedField) -> Result<LambdaImage, Error> {
    match ctx.direction {
        GameDirection::Forward => {
            let y = solve_forward(
                ctx.tree,
                ctx.grid,
                &ForwardProblem {
                    a1: ctx.a1,
                    a2: ctx.a2,
                    drift_source: Some(src),
                    diffusion_source: None,
                    initial: &vec![0.0; ctx.n_space()],
                },
            )?;
            Ok(LambdaImage::Forward(y))
        }
        GameDirection::Backward => {
            let zero_t = vec![0.0; ctx.tree.nodes_at(ctx.tree.steps()) * ctx.n_space()];
            let sol = solve_backward(
                ctx.tree,
                ctx.grid,
                &BackwardProblem {
                    b1: ctx.a1,
                    b2: ctx.a2,
                    drift_source: Some(src),
                    diffusion_source: None,
                    terminal: &zero_t,
                },
            )?;
            Ok(LambdaImage::Backward(sol))
        }
    }
}

/// Truncate a trajectory to the `K` pairing levels.
pub(crate) fn pairing_levels(ctx: &GameContext, traj: &AdaptedField) -> AdaptedField {
    let mut out = AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps());
    for k in 0..ctx.tree.steps() {
        out.level_mut(k).copy_from_slice(&traj.level(k)[..traj.level(k).len()]);
    }
    out
}

/// Adjoint of the control-to-state map of follower `i`.
///
/// Forward game: `w` pairs with the state trajectory; the adjoint is the
/// masked, sign-flipped smoothed trajectory of the backward solve driven by
/// `w`. Backward game: `(w, w_diff)` pair with (smoothed state, martingale
/// part); the adjoint is the masked, sign-flipped forward trajectory driven
/// by both.
pub fn apply_lambda_adjoint(
    ctx: &GameContext,
    i: usize,
    w: &AdaptedField,
    w_diff: Option<&AdaptedField>,
) -> Result<AdaptedField, Error> {
    let mut out = lambda_adjoint_common(ctx, w, w_diff)?;
    out.scale(-1.0);
    out.mask_in_place(ctx.params.control_masks[i].indicator());
    Ok(out)
}

/// Pairing trajectory of the dual solve driven by `w` (and `w_diff` in the
/// backward game), before masking and sign flip.
fn lambda_adjoint_common(
    ctx: &GameContext,
    w: &AdaptedField,
    w_diff: Option<&AdaptedField>,
) -> Result<AdaptedField, Error> {
    match ctx.direction {
        GameDirection::Forward => {
            let zero_t = vec![0.0; ctx.tree.nodes_at(ctx.tree.steps()) * ctx.n_space()];
            let sol = solve_backward(
                ctx.tree,
                ctx.grid,
                &BackwardProblem {
                    b1: ctx.a1_neg(),
                    b2: ctx.a2_neg(),
                    drift_source: Some(w),
                    diffusion_source: None,
                    terminal: &zero_t,
                },
            )?;
            Ok(sol.smoothed)
        }
        GameDirection::Backward => {
            let phi = solve_forward(
                ctx.tree,
                ctx.grid,
                &ForwardProblem {
                    a1: ctx.a1_neg(),
                    a2: ctx.a2_neg(),
                    drift_source: Some(w),
                    diffusion_source: w_diff,
                    initial: &vec![0.0; ctx.n_space()],
                },
            )?;
            Ok(pairing_levels(ctx, &phi))
        }
    }
}

/// Matrix-free application of the Nash operator: one combined state solve,
/// then one adjoint solve per follower.
pub fn apply_m(ctx: &GameContext, v: &ControlSet) -> Result<ControlSet, Error> {
    let m = ctx.params.followers();
    let mut combined = AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps());
    for (f, mask) in v.fields.iter().zip(&ctx.params.control_masks) {
        let mut part = f.clone();
        part.mask_in_place(mask.indicator());
        combined.axpy(1.0, &part);
    }
    let image = lambda_of_source(ctx, &combined)?;
    let mut out = ControlSet::zeros(ctx);
    match image {
        LambdaImage::Forward(y) => {
            let zs = solve_follower_adjoint_forward_game(
                ctx.tree,
                ctx.grid,
                ctx.a1,
                ctx.a2,
                &y,
                &vec![None; m],
                &ctx.params.alpha,
                &ctx.params.obs_masks,
            )?;
            for i in 0..m {
                // beta_i r_i v_i + 1_{G_i} z~_i, z_i driven by -alpha_i 1_O y.
                let mut term = zs[i].smoothed.clone();
                term.mask_in_place(ctx.params.control_masks[i].indicator());
                let mut vi = v.fields[i].clone();
                vi.mask_in_place(ctx.params.control_masks[i].indicator());
                vi.scale(ctx.params.beta[i] * ctx.params.r_weight[i]);
                vi.axpy(1.0, &term);
                out.fields[i] = vi;
            }
        }
        LambdaImage::Backward(sol) => {
            let zs = solve_follower_adjoint_backward_game(
                ctx.tree,
                ctx.grid,
                ctx.a1,
                ctx.a2,
                &sol.smoothed,
                &sol.integrand,
                &vec![None; m],
                &vec![None; m],
                &ctx.params.alpha,
                &ctx.params.alpha_tilde,
                &ctx.params.obs_masks,
                &ctx.params.obs_masks_tilde,
            )?;
            for i in 0..m {
                let mut term = pairing_levels(ctx, &zs[i]);
                term.mask_in_place(ctx.params.control_masks[i].indicator());
                let mut vi = v.fields[i].clone();
                vi.mask_in_place(ctx.params.control_masks[i].indicator());
                vi.scale(ctx.params.beta[i] * ctx.params.r_weight[i]);
                vi.axpy(1.0, &term);
                out.fields[i] = vi;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`apply_m`]: `m` state solves, one shared adjoint solve.
pub fn apply_m_transpose(ctx: &GameContext, w: &ControlSet) -> Result<ControlSet, Error> {
    let m = ctx.params.followers();
    let steps = ctx.tree.steps();
    let n = ctx.n_space();
    let mut x = AdaptedField::zeros(ctx.tree, n, steps);
    let mut x_diff = AdaptedField::zeros(ctx.tree, n, steps);
    let mut has_diff = false;
    for i in 0..m {
        let img = apply_lambda(ctx, i, &w.fields[i])?;
        match img {
            LambdaImage::Forward(y) => {
                x.axpy(
                    1.0,
                    &mismatch_source(ctx.tree, &y, None, &ctx.params.obs_masks[i], ctx.params.alpha[i]),
                );
            }
            LambdaImage::Backward(sol) => {
                has_diff = true;
                x.axpy(
                    1.0,
                    &mismatch_source(
                        ctx.tree,
                        &sol.smoothed,
                        None,
                        &ctx.params.obs_masks[i],
                        ctx.params.alpha[i],
                    ),
                );
                x_diff.axpy(
                    1.0,
                    &mismatch_source(
                        ctx.tree,
                        &sol.integrand,
                        None,
                        &ctx.params.obs_masks_tilde[i],
                        ctx.params.alpha_tilde[i],
                    ),
                );
            }
        }
    }
    let shared = lambda_adjoint_common(ctx, &x, if has_diff { Some(&x_diff) } else { None })?;
    let mut out = ControlSet::zeros(ctx);
    for i in 0..m {
        let mut term = shared.clone();
        term.scale(-1.0);
        term.mask_in_place(ctx.params.control_masks[i].indicator());
        let mut vi = w.fields[i].clone();
        vi.mask_in_place(ctx.params.control_masks[i].indicator());
        vi.scale(ctx.params.beta[i] * ctx.params.r_weight[i]);
        vi.axpy(1.0, &term);
        out.fields[i] = vi;
    }
    Ok(out)
}

/// Baseline leader-driven state: the solution with followers switched off.
pub(crate) fn leader_baseline(
    ctx: &GameContext,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
) -> Result<LambdaImage, Error> {
    solve_state(ctx, u1, u2, initial, terminal, &ControlSet::zeros(ctx))
}

/// Right-hand side of the Nash operator equation for given leader data.
pub fn nash_rhs(
    ctx: &GameContext,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
    targets: &Targets,
) -> Result<ControlSet, Error> {
    let m = ctx.params.followers();
    let baseline = leader_baseline(ctx, u1, u2, initial, terminal)?;
    let mut out = ControlSet::zeros(ctx);
    match baseline {
        LambdaImage::Forward(q) => {
            let zs = solve_follower_adjoint_forward_game(
                ctx.tree,
                ctx.grid,
                ctx.a1,
                ctx.a2,
                &q,
                &targets.state,
                &ctx.params.alpha,
                &ctx.params.obs_masks,
            )?;
            for i in 0..m {
                // rhs_i = -1_{G_i} z~_i with z_i driven by -alpha_i 1_O (q - y_id).
                let mut t = zs[i].smoothed.clone();
                t.scale(-1.0);
                t.mask_in_place(ctx.params.control_masks[i].indicator());
                out.fields[i] = t;
            }
        }
        LambdaImage::Backward(sol) => {
            let zs = solve_follower_adjoint_backward_game(
                ctx.tree,
                ctx.grid,
                ctx.a1,
                ctx.a2,
                &sol.smoothed,
                &sol.integrand,
                &targets.state,
                &targets.diffusion,
                &ctx.params.alpha,
                &ctx.params.alpha_tilde,
                &ctx.params.obs_masks,
                &ctx.params.obs_masks_tilde,
            )?;
            for i in 0..m {
                let mut t = pairing_levels(ctx, &zs[i]);
                t.scale(-1.0);
                t.mask_in_place(ctx.params.control_masks[i].indicator());
                out.fields[i] = t;
            }
        }
    }
    Ok(out)
}

/// Options for the Nash solve.
#[derive(Debug, Clone)]
pub struct NashOptions {
    pub gmres: GmresOptions,
    /// Richardson fallback iteration budget if GMRES stalls.
    pub fallback_iters: usize,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            gmres: GmresOptions {
                restart: 50,
                max_iters: 500,
                tol: 1e-10,
            },
            fallback_iters: 20_000,
        }
    }
}

/// Computed equilibrium with residual diagnostics.
#[derive(Debug, Clone)]
pub struct NashSolution {
    pub controls: ControlSet,
    /// Pairing trajectories of the follower adjoint states.
    pub adjoint_states: Vec<AdaptedField>,
    /// Martingale components of the adjoint states (forward game only).
    pub adjoint_integrands: Vec<AdaptedField>,
    /// Relative gap between the operator solution and the feedback form.
    pub characterization_gap: f64,
    /// Per-follower relative residual of the operator equation.
    pub stationarity: Vec<f64>,
    pub stats: IterationStats,
}

/// Solve `M v = rhs` for the equilibrium given leader data.
pub fn solve_nash(
    ctx: &GameContext,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
    targets: &Targets,
    opts: &NashOptions,
) -> Result<NashSolution, Error> {
    ctx.params.validate()?;
    let rhs = nash_rhs(ctx, u1, u2, initial, terminal, targets)?;
    let b = rhs.to_flat();
    let apply = |x: &[f64]| {
        let v = ControlSet::from_flat(ctx, x);
        apply_m(ctx, &v)
            .expect("operator application failed")
            .to_flat()
    };
    let dot = |a: &[f64], b: &[f64]| flat_control_dot(ctx, a, b);
    let (mut x, mut stats) = gmres(&apply, &b, None, &dot, &opts.gmres);

    if !stats.converged {
        // Richardson fallback with step 1 / max(beta_i r_i); coercivity makes
        // the iteration contract for large penalties.
        let step = 1.0
            / ctx
                .params
                .beta
                .iter()
                .zip(&ctx.params.r_weight)
                .map(|(b, r)| b * r)
                .fold(f64::MIN, f64::max);
        let b_norm = dot(&b, &b).sqrt().max(f64::MIN_POSITIVE);
        for it in 0..opts.fallback_iters {
            let ax = apply(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let rel = dot(&r, &r).sqrt() / b_norm;
            stats.iterations += 1;
            if rel <= opts.gmres.tol {
                stats.converged = true;
                stats.residual = rel;
                break;
            }
            for (xi, ri) in x.iter_mut().zip(&r) {
                *xi += step * ri;
            }
            if it + 1 == opts.fallback_iters {
                stats.residual = rel;
                stats.history.push(rel);
            }
        }
        stats.require_converged().map_err(Error::Solver)?;
    }

    let mut controls = ControlSet::from_flat(ctx, &x);
    controls.mask(ctx);

    // Characterization re-solve: push the equilibrium through the state and
    // read the feedback form back off the follower adjoints.
    let (feedback, adjoint_states, adjoint_integrands) =
        characterization_controls(ctx, u1, u2, initial, terminal, targets, &controls)?;
    let mut diff = feedback.clone();
    diff.axpy(-1.0, &controls);
    let denom = ControlSet::norm(ctx, &controls).max(1e-30);
    let characterization_gap = ControlSet::norm(ctx, &diff) / denom;

    // Blockwise stationarity residuals of the operator equation.
    let mv = apply_m(ctx, &controls)?;
    let mut stationarity = Vec::with_capacity(ctx.params.followers());
    for i in 0..ctx.params.followers() {
        let mut r = mv.fields[i].clone();
        r.axpy(-1.0, &rhs.fields[i]);
        let num = space_time_inner(ctx.tree, ctx.grid, &r, &r, None)
            .unwrap()
            .sqrt();
        let den = space_time_inner(ctx.tree, ctx.grid, &rhs.fields[i], &rhs.fields[i], None)
            .unwrap()
            .sqrt()
            .max(1e-30);
        stationarity.push(num / den);
    }

    Ok(NashSolution {
        controls,
        adjoint_states,
        adjoint_integrands,
        characterization_gap,
        stationarity,
        stats,
    })
}

/// Solve the full state for `(u, v)`, then the follower adjoints, and return
/// the feedback controls `-(1/(beta_i r_i)) 1_{G_i} z_i` with the adjoints.
#[allow(clippy::type_complexity)]
fn characterization_controls(
    ctx: &GameContext,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
    targets: &Targets,
    controls: &ControlSet,
) -> Result<(ControlSet, Vec<AdaptedField>, Vec<AdaptedField>), Error> {
    let m = ctx.params.followers();
    let state = solve_state(ctx, u1, u2, initial, terminal, controls)?;
    let mut feedback = ControlSet::zeros(ctx);
    let mut states = Vec::with_capacity(m);
    let mut integrands = Vec::with_capacity(m);
    match state {
        LambdaImage::Forward(y) => {
            let zs = solve_follower_adjoint_forward_game(
                ctx.tree,
                ctx.grid,
                ctx.a1,
                ctx.a2,
                &y,
                &targets.state,
                &ctx.params.alpha,
                &ctx.params.obs_masks,
            )?;
            for (i, z) in zs.into_iter().enumerate() {
                let mut f = z.smoothed.clone();
                f.scale(-ctx.params.gain(i));
                f.mask_in_place(ctx.params.control_masks[i].indicator());
                feedback.fields[i] = f;
                states.push(z.smoothed);
                integrands.push(z.integrand);
            }
        }
        LambdaImage::Backward(sol) => {
            let zs = solve_follower_adjoint_backward_game(
                ctx.tree,
                ctx.grid,
                ctx.a1,
                ctx.a2,
                &sol.smoothed,
                &sol.integrand,
                &targets.state,
                &targets.diffusion,
                &ctx.params.alpha,
                &ctx.params.alpha_tilde,
                &ctx.params.obs_masks,
                &ctx.params.obs_masks_tilde,
            )?;
            for (i, z) in zs.into_iter().enumerate() {
                let t = pairing_levels(ctx, &z);
                let mut f = t.clone();
                f.scale(-ctx.params.gain(i));
                f.mask_in_place(ctx.params.control_masks[i].indicator());
                feedback.fields[i] = f;
                states.push(t);
                integrands.push(AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps()));
            }
        }
    }
    Ok((feedback, states, integrands))
}

/// Full state solve for given leader and follower controls.
pub fn solve_state(
    ctx: &GameContext,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
    controls: &ControlSet,
) -> Result<LambdaImage, Error> {
    let mut drift = AdaptedField::zeros(ctx.tree, ctx.n_space(), ctx.tree.steps());
    if let Some(u) = u1 {
        let mut f = u.clone();
        f.mask_in_place(ctx.leader_mask.indicator());
        drift.axpy(1.0, &f);
    }
    for (f, mask) in controls.fields.iter().zip(&ctx.params.control_masks) {
        let mut part = f.clone();
        part.mask_in_place(mask.indicator());
        drift.axpy(1.0, &part);
    }
    match ctx.direction {
        GameDirection::Forward => {
            let y = solve_forward(
                ctx.tree,
                ctx.grid,
                &ForwardProblem {
                    a1: ctx.a1,
                    a2: ctx.a2,
                    drift_source: Some(&drift),
                    diffusion_source: u2,
                    initial: initial.expect("forward game needs initial data"),
                },
            )?;
            Ok(LambdaImage::Forward(y))
        }
        GameDirection::Backward => {
            let sol = solve_backward(
                ctx.tree,
                ctx.grid,
                &BackwardProblem {
                    b1: ctx.a1,
                    b2: ctx.a2,
                    drift_source: Some(&drift),
                    diffusion_source: u2,
                    terminal: terminal.expect("backward game needs terminal data"),
                },
            )?;
            Ok(LambdaImage::Backward(sol))
        }
    }
}

/// Follower cost at a control profile (the others held fixed inside `v`).
#[allow(clippy::too_many_arguments)]
pub fn follower_cost(
    ctx: &GameContext,
    i: usize,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
    targets: &Targets,
    v: &ControlSet,
) -> Result<f64, Error> {
    let state = solve_state(ctx, u1, u2, initial, terminal, v)?;
    let (repr, integrand) = match &state {
        LambdaImage::Forward(y) => (y, None),
        LambdaImage::Backward(sol) => (&sol.smoothed, Some(&sol.integrand)),
    };
    let mism = mismatch_source(
        ctx.tree,
        repr,
        targets.state_ref(i),
        &ctx.params.obs_masks[i],
        1.0,
    );
    let mut cost = 0.5
        * ctx.params.alpha[i]
        * space_time_inner(ctx.tree, ctx.grid, &mism, &mism, None).unwrap();
    if let Some(ig) = integrand {
        let mism_d = mismatch_source(
            ctx.tree,
            ig,
            targets.diffusion_ref(i),
            &ctx.params.obs_masks_tilde[i],
            1.0,
        );
        cost += 0.5
            * ctx.params.alpha_tilde[i]
            * space_time_inner(ctx.tree, ctx.grid, &mism_d, &mism_d, None).unwrap();
    }
    let mut vi = v.fields[i].clone();
    vi.mask_in_place(ctx.params.control_masks[i].indicator());
    cost += 0.5
        * ctx.params.beta[i]
        * ctx.params.r_weight[i]
        * space_time_inner(ctx.tree, ctx.grid, &vi, &vi, None).unwrap();
    Ok(cost)
}

/// Stationarity verification report.
#[derive(Debug, Clone)]
pub struct StationarityReport {
    /// Max |directional derivative| per follower over the random directions.
    pub max_directional: Vec<f64>,
    /// The acceptance threshold `1e-6 * (1 + |v*|)`.
    pub threshold: f64,
    /// Worst (most negative) unilateral cost gap `J_i(deviation) - J_i(v*)`.
    pub min_deviation_gap: f64,
}

impl StationarityReport {
    pub fn passed(&self) -> bool {
        self.max_directional.iter().all(|d| *d <= self.threshold)
            && self.min_deviation_gap >= -self.threshold
    }
}

/// Check the computed equilibrium by finite differences: directional
/// derivatives of each follower cost in random masked directions, and a grid
/// of unilateral deviations that must not improve the cost.
#[allow(clippy::too_many_arguments)]
pub fn verify_nash(
    ctx: &GameContext,
    solution: &NashSolution,
    u1: Option<&AdaptedField>,
    u2: Option<&AdaptedField>,
    initial: Option<&[f64]>,
    terminal: Option<&[f64]>,
    targets: &Targets,
    directions: usize,
    rng: &mut impl Rng,
) -> Result<StationarityReport, Error> {
    let m = ctx.params.followers();
    let v_norm = ControlSet::norm(ctx, &solution.controls);
    let threshold = 1e-6 * (1.0 + v_norm);
    let mut max_directional = vec![0.0f64; m];
    let mut min_gap = f64::INFINITY;

    for i in 0..m {
        let j0 = follower_cost(ctx, i, u1, u2, initial, terminal, targets, &solution.controls)?;
        for _ in 0..directions {
            let mut d = AdaptedField::from_fn(ctx.tree, ctx.n_space(), ctx.tree.steps(), |_, _| {
                (0..ctx.n_space())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            });
            d.mask_in_place(ctx.params.control_masks[i].indicator());
            let d_norm = space_time_inner(ctx.tree, ctx.grid, &d, &d, None)
                .unwrap()
                .sqrt();
            if d_norm == 0.0 {
                continue;
            }
            d.scale(1.0 / d_norm);
            let step = 1e-4 * (1.0 + v_norm);
            let mut plus = solution.controls.clone();
            plus.fields[i].axpy(step, &d);
            let mut minus = solution.controls.clone();
            minus.fields[i].axpy(-step, &d);
            let jp = follower_cost(ctx, i, u1, u2, initial, terminal, targets, &plus)?;
            let jm = follower_cost(ctx, i, u1, u2, initial, terminal, targets, &minus)?;
            let deriv = (jp - jm) / (2.0 * step);
            max_directional[i] = max_directional[i].max(deriv.abs());

            for s in [-1.0, -0.1, -0.01, 0.01, 0.1, 1.0] {
                let mut dev = solution.controls.clone();
                dev.fields[i].axpy(s, &d);
                let jd = follower_cost(ctx, i, u1, u2, initial, terminal, targets, &dev)?;
                min_gap = min_gap.min(jd - j0);
            }
        }
    }

    Ok(StationarityReport {
        max_directional,
        threshold,
        min_deviation_gap: min_gap,
    })
}

/// One row of the coercivity scan.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoercivityRow {
    pub beta: f64,
    pub lambda_min: f64,
}

/// Scan the smallest eigenvalue of the symmetric part of the Nash operator
/// over a grid of uniform penalties; the first positive row is the empirical
/// existence threshold.
pub fn coercivity_probe(
    ctx: &GameContext,
    beta_grid: &[f64],
    lanczos_iters: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<CoercivityRow>, Option<f64>), Error> {
    let mut rows = Vec::with_capacity(beta_grid.len());
    let dim = ControlSet::zeros(ctx).to_flat().len();
    let start: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for &beta in beta_grid {
        let mut params = ctx.params.clone();
        for b in params.beta.iter_mut() {
            *b = beta;
        }
        let local = GameContext::new(
            ctx.tree,
            ctx.grid,
            ctx.a1,
            ctx.a2,
            ctx.leader_mask,
            &params,
            ctx.direction,
        );
        let apply = |x: &[f64]| {
            let v = ControlSet::from_flat(&local, x);
            let mut mv = apply_m(&local, &v).expect("operator application failed");
            let mtv = apply_m_transpose(&local, &v).expect("transpose application failed");
            mv.axpy(1.0, &mtv);
            for f in mv.fields.iter_mut() {
                f.scale(0.5);
            }
            mv.to_flat()
        };
        let dot = |a: &[f64], b: &[f64]| flat_control_dot(&local, a, b);
        // Probe inside the masked control subspace.
        let mut seed = ControlSet::from_flat(&local, &start);
        seed.mask(&local);
        let (lam, _, _) =
            crate::krylov::lanczos_smallest(apply, seed.to_flat(), dot, lanczos_iters);
        rows.push(CoercivityRow {
            beta,
            lambda_min: lam,
        });
    }
    let beta_bar = rows.iter().find(|r| r.lambda_min > 0.0).map(|r| r.beta);
    Ok((rows, beta_bar))
}
