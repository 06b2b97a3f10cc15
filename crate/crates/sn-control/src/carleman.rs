//! Singular weight families and empirical observability probes.
//!
//! The weights are the standard parabolic family `alpha(t,x) =
//! (e^{mu eta0(x)} - e^{2 mu |eta0|_inf}) / l(t)`, `theta = e^{lambda alpha}`,
//! `gamma = 1/l(t)`, built from a bump profile `eta0` that is positive
//! inside the domain, vanishes at the boundary, and has nonvanishing slope
//! outside a critical interior set. The modified family replaces `t(T-t)` by
//! a one-sided `l(t)` so the weight stays finite at the goal end; the
//! scalar weight `rho(t) = exp(-lambda alpha*(t))` (with `alpha*` the spatial
//! minimum) blows up at the opposite end and is the target weight used by
//! every cost certificate.
//!
//! Observability is probed, not proved: the generalized Rayleigh quotient of
//! the adjoint-data quadratic forms (goal-side norm + weighted companion
//! norms over the observation norm) is maximized by normalized gradient
//! ascent, with both Gramians applied exactly through primal/adjoint solve
//! compositions.

use crate::coupled::{
    backward_observations, forward_observations, solve_backward_adjoint, solve_backward_primal,
    solve_forward_adjoint, solve_forward_primal, BackwardPrimalData, CoupledOptions,
    ForwardPrimalData, PrimalExtras,
};
use crate::error::Error;
use crate::grid::{SpatialGrid, SubdomainMask};
use crate::hum::{candidate_dot, candidate_norm};
use crate::lattice::{space_time_inner, AdaptedField, ScalarProcess, TreeGrid};
use crate::nash::{GameContext, GameDirection, Targets};
use crate::spde::mismatch_source;
use rand::Rng;

/// Bump profile with its analytic slope and continuum maximum.
#[derive(Debug, Clone)]
pub struct Eta0 {
    pub values: Vec<f64>,
    pub slope: Vec<f64>,
    /// Continuum maximum (the peak height, attained inside the critical set).
    pub max: f64,
    /// Grid minimum (attained at a boundary-adjacent node).
    pub grid_min: f64,
}

/// Build the bump profile: piecewise quadratic with matched first
/// derivatives, peak `height` at the centre of the critical set, vanishing
/// at both domain endpoints.
pub fn build_eta0(grid: &SpatialGrid, critical: &SubdomainMask, height: f64) -> Result<Eta0, Error> {
    let n = grid.n_interior();
    let ind = critical.indicator();
    let lo = ind.iter().position(|v| *v != 0.0);
    let hi = ind.iter().rposition(|v| *v != 0.0);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::Geometry("critical set is empty".into()));
    };
    if lo == 0 || hi == n - 1 {
        return Err(Error::Geometry(
            "critical set must not touch the boundary".into(),
        ));
    }
    let length = grid.length();
    let centre = 0.5 * (grid.position(lo) + grid.position(hi));
    let bump = |x: f64| -> f64 {
        let u = if x <= centre {
            x / centre
        } else {
            (length - x) / (length - centre)
        };
        height * u * (2.0 - u)
    };
    let slope = |x: f64| -> f64 {
        if x <= centre {
            height * (2.0 - 2.0 * x / centre) / centre
        } else {
            -height * (2.0 - 2.0 * (length - x) / (length - centre)) / (length - centre)
        }
    };
    let values: Vec<f64> = (0..n).map(|i| bump(grid.position(i))).collect();
    let slopes: Vec<f64> = (0..n).map(|i| slope(grid.position(i))).collect();
    // Validate the defining conditions on the grid.
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Geometry("bump not positive in the interior".into()));
    }
    for i in 0..n {
        if ind[i] == 0.0 && slopes[i].abs() <= 0.0 {
            return Err(Error::Geometry(format!(
                "bump slope vanishes outside the critical set at node {i}"
            )));
        }
    }
    let grid_min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Eta0 {
        values,
        slope: slopes,
        max: height,
        grid_min,
    })
}

/// Weight-family parameters.
#[derive(Debug, Clone)]
pub struct CarlemanParams {
    pub lambda: f64,
    pub mu: f64,
    pub horizon: f64,
    pub eta0: Eta0,
    /// Which end the modified weight leaves regular: `Backward` keeps
    /// `l = T^2/4` near `t = T` (rho blows up at 0), `Forward` mirrors it.
    pub direction: GameDirection,
}

impl CarlemanParams {
    pub fn validate(&self) -> Result<(), Error> {
        if self.lambda < 1.0 || self.mu < 1.0 {
            return Err(Error::Geometry("weight parameters must satisfy lambda, mu >= 1".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Geometry("weight horizon must be positive".into()));
        }
        Ok(())
    }

    /// The one-sided time factor of the modified family.
    pub fn modified_ell(&self, t: f64) -> f64 {
        let t_eff = match self.direction {
            GameDirection::Backward => t,
            GameDirection::Forward => self.horizon - t,
        };
        let half = 0.5 * self.horizon;
        if t_eff <= half {
            t_eff * (self.horizon - t_eff)
        } else {
            0.25 * self.horizon * self.horizon
        }
    }

    /// Spatial minimum of the modified exponent at time `t` (exact: the
    /// numerator is monotone in the bump, so the minimum sits at a
    /// boundary-adjacent node).
    pub fn alpha_star(&self, t: f64) -> f64 {
        let c_star = (self.mu * self.eta0.grid_min).exp() - (2.0 * self.mu * self.eta0.max).exp();
        c_star / self.modified_ell(t)
    }

    /// Scalar target weight `rho(t) = exp(-lambda alpha*(t))`, always >= 1.
    pub fn rho(&self, t: f64) -> f64 {
        (-self.lambda * self.alpha_star(t)).exp()
    }
}

/// Which member of the family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `l(t) = t(T-t)`, singular at both endpoints.
    Standard,
    /// The one-sided `l(t)` of [`CarlemanParams::modified_ell`].
    Modified,
}

/// Pointwise weight values at one time.
#[derive(Debug, Clone)]
pub struct WeightValues {
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: f64,
    pub ell: f64,
    pub alpha_star: f64,
    pub rho: f64,
}

/// Evaluate the weight family at time `t`.
pub fn eval_weights(
    grid: &SpatialGrid,
    params: &CarlemanParams,
    t: f64,
    mode: WeightMode,
) -> Result<WeightValues, Error> {
    let horizon = params.horizon;
    let ell = match mode {
        WeightMode::Standard => t * (horizon - t),
        WeightMode::Modified => params.modified_ell(t),
    };
    if !(ell > 0.0) {
        return Err(Error::Geometry(format!(
            "weight evaluated at a singular time t = {t}"
        )));
    }
    let big = (2.0 * params.mu * params.eta0.max).exp();
    let n = grid.n_interior();
    let alpha: Vec<f64> = (0..n)
        .map(|i| ((params.mu * params.eta0.values[i]).exp() - big) / ell)
        .collect();
    let theta: Vec<f64> = alpha.iter().map(|a| (params.lambda * a).exp()).collect();
    let c_star = (params.mu * params.eta0.grid_min).exp() - big;
    let alpha_star = c_star / ell;
    Ok(WeightValues {
        alpha,
        theta,
        gamma: 1.0 / ell,
        ell,
        alpha_star,
        rho: (-params.lambda * alpha_star).exp(),
    })
}

/// Target weight process for certificates, evaluated at the pairing times.
///
/// At the singular endpoint of the backward family (`t = 0`, which the
/// left-endpoint rule samples) the weight is clamped to its value one step
/// in; the forward family never samples its singular end.
pub fn rho_process(tree: &TreeGrid, params: &CarlemanParams) -> ScalarProcess {
    let dt = tree.dt();
    ScalarProcess::from_time_fn(tree, tree.steps(), |t| {
        let t_safe = match params.direction {
            GameDirection::Backward => t.max(dt),
            GameDirection::Forward => t,
        };
        params.rho(t_safe)
    })
}

/// Inverse target weight process for observability left-hand sides. The
/// inverse weight extends by continuity to 0 at the blow-up end.
pub fn inv_rho_process(tree: &TreeGrid, params: &CarlemanParams) -> ScalarProcess {
    ScalarProcess::from_time_fn(tree, tree.steps(), |t| {
        let singular = match params.direction {
            GameDirection::Backward => t <= 0.0,
            GameDirection::Forward => t >= params.horizon,
        };
        if singular {
            0.0
        } else {
            1.0 / params.rho(t)
        }
    })
}

/// Weighted space-time energy of a field over the window `[t1, t2]`:
/// the squared-amplitude term plus the discrete-gradient term, with the
/// standard (`lambda^3`, `lambda`) prefactors in standard mode and unit
/// prefactors in modified mode.
pub fn weighted_norm_i(
    tree: &TreeGrid,
    grid: &SpatialGrid,
    z: &AdaptedField,
    params: &CarlemanParams,
    mode: WeightMode,
    t1: f64,
    t2: f64,
) -> Result<f64, Error> {
    let n = grid.n_interior();
    let h = grid.h();
    let (pref_amp, pref_grad) = match mode {
        WeightMode::Standard => (params.lambda.powi(3), params.lambda),
        WeightMode::Modified => (1.0, 1.0),
    };
    let big = (2.0 * params.mu * params.eta0.max).exp();
    let boundary_alpha = |ell: f64| (1.0 - big) / ell;
    let mut total = 0.0;
    let levels = z.num_levels().min(tree.steps());
    for k in 0..levels {
        let t = tree.time_at(k);
        if t < t1 || t > t2 {
            continue;
        }
        let w = match eval_weights(grid, params, t, mode) {
            Ok(w) => w,
            Err(_) => continue, // singular endpoint: the weight limit is zero
        };
        let theta_sq: Vec<f64> = w.theta.iter().map(|v| v * v).collect();
        let theta_b_sq = {
            let a = boundary_alpha(w.ell);
            let th = (params.lambda * a).exp();
            th * th
        };
        let p = tree.node_probability(k);
        for j in 0..tree.nodes_at(k) {
            let zn = z.node(k, j);
            let mut amp = 0.0;
            for i in 0..n {
                amp += theta_sq[i] * zn[i] * zn[i];
            }
            // Forward differences over the N+1 edges, boundary values zero;
            // the weight on an edge is the mean of its endpoint values.
            let mut grad = 0.0;
            for e in 0..=n {
                let z_l = if e == 0 { 0.0 } else { zn[e - 1] };
                let z_r = if e == n { 0.0 } else { zn[e] };
                let th_l = if e == 0 { theta_b_sq } else { theta_sq[e - 1] };
                let th_r = if e == n { theta_b_sq } else { theta_sq[e] };
                let d = (z_r - z_l) / h;
                grad += 0.5 * (th_l + th_r) * d * d;
            }
            total += tree.dt()
                * p
                * h
                * (pref_amp * w.gamma.powi(3) * amp + pref_grad * w.gamma * grad);
        }
    }
    Ok(total)
}

/// Which observability inequality is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservabilityForm {
    /// Initial-value norm plus weighted masked companions vs the forward
    /// game's observations.
    ForwardNull,
    /// Terminal-value norm plus weighted whole-domain companions vs the
    /// backward game's observations.
    BackwardNull,
}

/// Scale a field by the square of a scalar weight process.
fn scale_by_weight_sq(field: &mut AdaptedField, w: &ScalarProcess) {
    for k in 0..field.num_levels().min(w.num_levels()) {
        for j in 0..(field.level(k).len() / field.n_space()) {
            let v = w.value(k, j);
            let s = v * v;
            for x in field.node_mut(k, j) {
                *x *= s;
            }
        }
    }
}

/// Both sides of the probed inequality at an adjoint datum, from one
/// coupled adjoint solve.
fn observability_pair(
    ctx: &GameContext,
    form: ObservabilityForm,
    inv_rho: &ScalarProcess,
    q: &[f64],
    opts: &CoupledOptions,
) -> Result<(f64, f64), Error> {
    match form {
        ObservabilityForm::ForwardNull => {
            let adj = solve_forward_adjoint(ctx, q, opts)?;
            let phi0 = &adj.phi.state.level(0)[..ctx.n_space()];
            let mut lhs = ctx.grid.inner(phi0, phi0);
            for i in 0..ctx.params.followers() {
                let masked =
                    mismatch_source(ctx.tree, &adj.psi[i], None, &ctx.params.obs_masks[i], 1.0);
                lhs += space_time_inner(ctx.tree, ctx.grid, &masked, &masked, Some(inv_rho))?;
            }
            let (obs1, obs2) = forward_observations(ctx, &adj);
            let rhs = space_time_inner(ctx.tree, ctx.grid, &obs1, &obs1, None)?
                + space_time_inner(ctx.tree, ctx.grid, &obs2, &obs2, None)?;
            Ok((lhs, rhs))
        }
        ObservabilityForm::BackwardNull => {
            let adj = solve_backward_adjoint(ctx, q, opts)?;
            let steps = ctx.tree.steps();
            let phi_t = adj.phi.level(steps);
            let mut lhs = crate::lattice::level_inner(ctx.tree, ctx.grid, steps, phi_t, phi_t);
            for i in 0..ctx.params.followers() {
                lhs += space_time_inner(
                    ctx.tree,
                    ctx.grid,
                    &adj.psi[i].smoothed,
                    &adj.psi[i].smoothed,
                    Some(inv_rho),
                )?;
                lhs += space_time_inner(
                    ctx.tree,
                    ctx.grid,
                    &adj.psi[i].integrand,
                    &adj.psi[i].integrand,
                    Some(inv_rho),
                )?;
            }
            let (obs1, obs2) = backward_observations(ctx, &adj);
            let rhs = space_time_inner(ctx.tree, ctx.grid, &obs1, &obs1, None)?
                + space_time_inner(ctx.tree, ctx.grid, &obs2, &obs2, None)?;
            Ok((lhs, rhs))
        }
    }
}

/// Left-hand side of the probed inequality at an adjoint datum.
#[cfg(test)]
fn observability_lhs(
    ctx: &GameContext,
    form: ObservabilityForm,
    inv_rho: &ScalarProcess,
    q: &[f64],
    opts: &CoupledOptions,
) -> Result<f64, Error> {
    Ok(observability_pair(ctx, form, inv_rho, q, opts)?.0)
}

/// Right-hand side (observation energy) at an adjoint datum.
#[cfg(test)]
fn observability_rhs(
    ctx: &GameContext,
    form: ObservabilityForm,
    q: &[f64],
    opts: &CoupledOptions,
) -> Result<f64, Error> {
    let inv_rho = ScalarProcess::from_time_fn(ctx.tree, ctx.tree.steps(), |_| 1.0);
    Ok(observability_pair(ctx, form, &inv_rho, q, opts)?.1)
}

/// Exact Gramian matvec of the left-hand side, via the transpose primal.
fn apply_lhs_gramian(
    ctx: &GameContext,
    form: ObservabilityForm,
    inv_rho: &ScalarProcess,
    q: &[f64],
    opts: &CoupledOptions,
) -> Result<Vec<f64>, Error> {
    let m = ctx.params.followers();
    let targets = Targets::zero(m);
    match form {
        ObservabilityForm::ForwardNull => {
            let adj = solve_forward_adjoint(ctx, q, opts)?;
            let phi0 = adj.phi.state.level(0)[..ctx.n_space()].to_vec();
            let extra: Vec<AdaptedField> = (0..m)
                .map(|i| {
                    let mut f =
                        mismatch_source(ctx.tree, &adj.psi[i], None, &ctx.params.obs_masks[i], 1.0);
                    scale_by_weight_sq(&mut f, inv_rho);
                    f
                })
                .collect();
            let data = ForwardPrimalData {
                initial: &phi0,
                u1: None,
                u2: None,
                targets: &targets,
                extras: PrimalExtras {
                    follower_drift: Some(&extra),
                    follower_diffusion: None,
                },
            };
            let primal = solve_forward_primal(ctx, &data, opts)?;
            Ok(primal.state.level(ctx.tree.steps()).to_vec())
        }
        ObservabilityForm::BackwardNull => {
            let adj = solve_backward_adjoint(ctx, q, opts)?;
            let steps = ctx.tree.steps();
            let phi_t = adj.phi.level(steps).to_vec();
            let extra_d: Vec<AdaptedField> = (0..m)
                .map(|i| {
                    let mut f = adj.psi[i].smoothed.clone();
                    scale_by_weight_sq(&mut f, inv_rho);
                    f.scale(-1.0);
                    f
                })
                .collect();
            let extra_g: Vec<AdaptedField> = (0..m)
                .map(|i| {
                    let mut f = adj.psi[i].integrand.clone();
                    scale_by_weight_sq(&mut f, inv_rho);
                    f.scale(-1.0);
                    f
                })
                .collect();
            let data = BackwardPrimalData {
                terminal: &phi_t,
                u1: None,
                u2: None,
                targets: &targets,
                extras: PrimalExtras {
                    follower_drift: Some(&extra_d),
                    follower_diffusion: Some(&extra_g),
                },
            };
            let primal = solve_backward_primal(ctx, &data, opts)?;
            Ok(primal.state.state.level(0).to_vec())
        }
    }
}

/// Exact Gramian matvec of the observation energy, via the controlled primal.
pub fn apply_observation_gramian(
    ctx: &GameContext,
    form: ObservabilityForm,
    q: &[f64],
    opts: &CoupledOptions,
) -> Result<Vec<f64>, Error> {
    let m = ctx.params.followers();
    let targets = Targets::zero(m);
    match form {
        ObservabilityForm::ForwardNull => {
            let adj = solve_forward_adjoint(ctx, q, opts)?;
            let (obs1, obs2) = forward_observations(ctx, &adj);
            let data = ForwardPrimalData {
                initial: &vec![0.0; ctx.n_space()],
                u1: Some(&obs1),
                u2: Some(&obs2),
                targets: &targets,
                extras: PrimalExtras::default(),
            };
            let primal = solve_forward_primal(ctx, &data, opts)?;
            Ok(primal.state.level(ctx.tree.steps()).to_vec())
        }
        ObservabilityForm::BackwardNull => {
            let adj = solve_backward_adjoint(ctx, q, opts)?;
            let (obs1, obs2) = backward_observations(ctx, &adj);
            let zero_t = vec![0.0; ctx.tree.nodes_at(ctx.tree.steps()) * ctx.n_space()];
            let data = BackwardPrimalData {
                terminal: &zero_t,
                u1: Some(&obs1),
                u2: Some(&obs2),
                targets: &targets,
                extras: PrimalExtras::default(),
            };
            let primal = solve_backward_primal(ctx, &data, opts)?;
            // The pairing identity delivers the Gramian with a sign flip here.
            Ok(primal.state.state.level(0).iter().map(|v| -v).collect())
        }
    }
}

/// Options for the observability probes.
#[derive(Debug, Clone)]
pub struct ObservabilityOptions {
    pub starts: usize,
    pub ascent_steps: usize,
    pub coupled: CoupledOptions,
}

impl Default for ObservabilityOptions {
    fn default() -> Self {
        Self {
            starts: 20,
            ascent_steps: 40,
            coupled: CoupledOptions::default(),
        }
    }
}

/// Outcome of the constant estimation.
#[derive(Debug, Clone)]
pub struct ObservabilityEstimate {
    /// Best ratio found (the empirical constant).
    pub c_hat: f64,
    /// Final ratio of every ascent start.
    pub ratios: Vec<f64>,
    pub maximizer: Vec<f64>,
    /// Set when some datum had observation energy at roundoff with a
    /// nonvanishing left-hand side: a unique-continuation violation candidate.
    pub degenerate_datum: Option<Vec<f64>>,
}

/// Estimate the observability constant by normalized gradient ascent on the
/// generalized Rayleigh quotient from random starts; `extra_candidates` are
/// evaluated as well (used to share candidate pools across nested masks).
pub fn estimate_observability_constant(
    ctx: &GameContext,
    form: ObservabilityForm,
    inv_rho: &ScalarProcess,
    opts: &ObservabilityOptions,
    extra_candidates: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<ObservabilityEstimate, Error> {
    let dim = match form {
        ObservabilityForm::ForwardNull => ctx.tree.nodes_at(ctx.tree.steps()) * ctx.n_space(),
        ObservabilityForm::BackwardNull => ctx.n_space(),
    };
    let ratio_of = |q: &[f64]| -> Result<(f64, f64, f64), Error> {
        let (lhs, rhs) = observability_pair(ctx, form, inv_rho, q, &opts.coupled)?;
        Ok((lhs, rhs, lhs / rhs.max(f64::MIN_POSITIVE)))
    };

    let mut best_ratio = f64::NEG_INFINITY;
    let mut best_q = vec![0.0; dim];
    let mut ratios = Vec::new();
    let mut degenerate = None;

    let consider = |q: &[f64],
                        ratios: &mut Vec<f64>,
                        best_ratio: &mut f64,
                        best_q: &mut Vec<f64>,
                        degenerate: &mut Option<Vec<f64>>|
     -> Result<f64, Error> {
        let (lhs, rhs, r) = ratio_of(q)?;
        if rhs <= 1e-14 * lhs && lhs > 0.0 {
            *degenerate = Some(q.to_vec());
        }
        ratios.push(r);
        if r > *best_ratio {
            *best_ratio = r;
            *best_q = q.to_vec();
        }
        Ok(r)
    };

    for q in extra_candidates {
        consider(q, &mut ratios, &mut best_ratio, &mut best_q, &mut degenerate)?;
    }

    for _ in 0..opts.starts {
        let mut q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = candidate_norm(ctx, &q);
        q.iter_mut().for_each(|v| *v /= norm);
        let (mut lhs, mut rhs, mut r) = ratio_of(&q)?;
        let mut step = 0.5;
        for _ in 0..opts.ascent_steps {
            let aq = apply_lhs_gramian(ctx, form, inv_rho, &q, &opts.coupled)?;
            let bq = apply_observation_gramian(ctx, form, &q, &opts.coupled)?;
            // gradient of lhs/rhs: (2/rhs) (A q - r B q)
            let grad: Vec<f64> = aq
                .iter()
                .zip(&bq)
                .map(|(a, b)| 2.0 / rhs.max(f64::MIN_POSITIVE) * (a - r * b))
                .collect();
            let g_norm = candidate_norm(ctx, &grad);
            if g_norm <= 1e-12 * (1.0 + r.abs()) {
                break;
            }
            let mut improved = false;
            for _ in 0..8 {
                let mut q_new: Vec<f64> = q
                    .iter()
                    .zip(&grad)
                    .map(|(a, g)| a + step / g_norm * g)
                    .collect();
                let norm = candidate_norm(ctx, &q_new);
                q_new.iter_mut().for_each(|v| *v /= norm);
                let (l_new, r_new, ratio_new) = ratio_of(&q_new)?;
                if ratio_new > r {
                    q = q_new;
                    lhs = l_new;
                    rhs = r_new;
                    r = ratio_new;
                    step = (step * 1.5).min(4.0);
                    improved = true;
                    break;
                }
                step *= 0.4;
            }
            if !improved {
                break;
            }
        }
        let _ = lhs;
        let _ = rhs;
        consider(&q, &mut ratios, &mut best_ratio, &mut best_q, &mut degenerate)?;
    }

    Ok(ObservabilityEstimate {
        c_hat: best_ratio,
        ratios,
        maximizer: best_q,
        degenerate_datum: degenerate,
    })
}

/// Probe unique continuation: the smallest observation energy over unit-norm
/// adjoint data (a value bounded away from zero supports injectivity of the
/// observation map at this resolution).
pub fn unique_continuation_probe(
    ctx: &GameContext,
    form: ObservabilityForm,
    lanczos_iters: usize,
    opts: &CoupledOptions,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>), Error> {
    let dim = match form {
        ObservabilityForm::ForwardNull => ctx.tree.nodes_at(ctx.tree.steps()) * ctx.n_space(),
        ObservabilityForm::BackwardNull => ctx.n_space(),
    };
    let apply = |q: &[f64]| {
        apply_observation_gramian(ctx, form, q, opts).expect("observation Gramian failed")
    };
    let dot = |a: &[f64], b: &[f64]| candidate_dot(ctx, a, b);
    let start: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (lam, vec, _) = crate::krylov::lanczos_smallest(apply, start, dot, lanczos_iters);
    Ok((lam.max(0.0), vec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SubdomainMask;
    use crate::nash::GameParameters;
    use crate::spde::Coefficient;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid9() -> SpatialGrid {
        SpatialGrid::new(1.0, 9).unwrap()
    }

    fn params(direction: GameDirection) -> CarlemanParams {
        let grid = grid9();
        let critical = SubdomainMask::from_range(&grid, 4, 6).unwrap();
        let eta0 = build_eta0(&grid, &critical, 0.1).unwrap();
        CarlemanParams {
            lambda: 1.0,
            mu: 2.0,
            horizon: 1.0,
            eta0,
            direction,
        }
    }

    #[test]
    fn eta0_conditions_hold_on_grid() {
        let grid = grid9();
        let critical = SubdomainMask::from_range(&grid, 4, 6).unwrap();
        let eta0 = build_eta0(&grid, &critical, 0.1).unwrap();
        assert!(eta0.values.iter().all(|v| *v > 0.0));
        let ind = critical.indicator();
        for i in 0..9 {
            if ind[i] == 0.0 {
                assert!(eta0.slope[i].abs() > 0.0);
            }
        }
        // Peak inside the critical set.
        let argmax = eta0
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(ind[argmax] != 0.0);
        // Symmetric construction for a centred set.
        for i in 0..9 {
            assert_abs_diff_eq!(eta0.values[i], eta0.values[8 - i], epsilon = 1e-12);
        }
        // Off-centre critical set still peaks inside it.
        let critical2 = SubdomainMask::from_range(&grid, 2, 3).unwrap();
        let eta2 = build_eta0(&grid, &critical2, 0.1).unwrap();
        let argmax2 = eta2
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(critical2.indicator()[argmax2] != 0.0);
        // Boundary-touching critical set is rejected.
        let bad = SubdomainMask::from_range(&grid, 1, 3).unwrap();
        assert!(build_eta0(&grid, &bad, 0.1).is_err());
    }

    #[test]
    fn modified_time_factor_piecewise() {
        let p = params(GameDirection::Backward);
        // Continuity at T/2 and the constant branch.
        assert_abs_diff_eq!(p.modified_ell(0.5), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.modified_ell(0.499999), 0.499999 * 0.500001, epsilon = 1e-12);
        assert_abs_diff_eq!(p.modified_ell(0.75), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.modified_ell(1.0), 0.25, epsilon = 1e-15);
        // Mirrored family.
        let pf = params(GameDirection::Forward);
        assert_abs_diff_eq!(pf.modified_ell(0.25), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(pf.modified_ell(0.9), 0.1 * 0.9, epsilon = 1e-14);
    }

    #[test]
    fn rho_properties() {
        let p = params(GameDirection::Backward);
        // rho >= 1 wherever evaluated, strictly decreasing on (0, T/2],
        // blowing up toward 0.
        let mut last = f64::INFINITY;
        for k in 1..=50 {
            let t = 0.5 * k as f64 / 50.0;
            let r = p.rho(t);
            assert!(r >= 1.0);
            assert!(r < last);
            last = r;
        }
        assert!(p.rho(1e-6) > p.rho(0.01));
        assert_abs_diff_eq!(p.rho(0.75), p.rho(0.6), epsilon = 1e-12);
        // Mirrored: blows up toward T.
        let pf = params(GameDirection::Forward);
        assert!(pf.rho(1.0 - 1e-6) > pf.rho(0.99));
        assert!(pf.rho(0.2) >= 1.0);
    }

    #[test]
    fn theta_is_bounded_by_one() {
        let grid = grid9();
        let p = params(GameDirection::Backward);
        for mode in [WeightMode::Standard, WeightMode::Modified] {
            for k in 1..10 {
                let t = 0.098 * k as f64;
                let w = eval_weights(&grid, &p, t, mode).unwrap();
                assert!(w.theta.iter().all(|v| *v <= 1.0 && *v > 0.0));
                assert!(w.alpha.iter().all(|v| *v < 0.0));
            }
        }
        // Standard mode is singular at the endpoints.
        assert!(eval_weights(&grid, &p, 0.0, WeightMode::Standard).is_err());
        assert!(eval_weights(&grid, &p, 1.0, WeightMode::Standard).is_err());
        // Modified backward mode is regular at T but singular at 0.
        assert!(eval_weights(&grid, &p, 1.0, WeightMode::Modified).is_ok());
        assert!(eval_weights(&grid, &p, 0.0, WeightMode::Modified).is_err());
    }

    #[test]
    fn weighted_energy_homogeneity_and_oracle() {
        let tree = TreeGrid::new(1.0, 4).unwrap();
        let grid = grid9();
        let p = params(GameDirection::Backward);
        // Constant-in-time profile: compare against a direct quadrature.
        let profile: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = AdaptedField::deterministic(&tree, &profile, 4);
        let got = weighted_norm_i(&tree, &grid, &z, &p, WeightMode::Standard, 0.0, 1.0).unwrap();
        // Oracle: per-time scalar quadrature with independently computed sums.
        let mut want = 0.0;
        let h = grid.h();
        for k in 1..4 {
            let t = tree.time_at(k);
            let ell = t * (1.0 - t);
            let gamma = 1.0 / ell;
            let big = (2.0 * p.mu * p.eta0.max).exp();
            let th = |eta: f64| ((p.mu * eta).exp() - big) / ell * p.lambda;
            let mut amp = 0.0;
            for i in 0..9 {
                amp += (2.0 * th(p.eta0.values[i])).exp() * profile[i] * profile[i];
            }
            let mut grad = 0.0;
            for e in 0..=9 {
                let zl = if e == 0 { 0.0 } else { profile[e - 1] };
                let zr = if e == 9 { 0.0 } else { profile[e] };
                let tl = if e == 0 {
                    (2.0 * th(0.0)).exp()
                } else {
                    (2.0 * th(p.eta0.values[e - 1])).exp()
                };
                let tr = if e == 9 {
                    (2.0 * th(0.0)).exp()
                } else {
                    (2.0 * th(p.eta0.values[e])).exp()
                };
                let d = (zr - zl) / h;
                grad += 0.5 * (tl + tr) * d * d;
            }
            want += tree.dt()
                * h
                * (p.lambda.powi(3) * gamma.powi(3) * amp + p.lambda * gamma * grad);
        }
        assert_relative_eq!(got, want, max_relative = 1e-12);
        // Quadratic homogeneity.
        let mut z3 = z.clone();
        z3.scale(3.0);
        let got3 = weighted_norm_i(&tree, &grid, &z3, &p, WeightMode::Standard, 0.0, 1.0).unwrap();
        assert_relative_eq!(got3, 9.0 * got, max_relative = 1e-12);
        // Zero field.
        let zero = AdaptedField::zeros(&tree, 9, 4);
        assert_eq!(
            weighted_norm_i(&tree, &grid, &zero, &p, WeightMode::Modified, 0.0, 1.0).unwrap(),
            0.0
        );
    }

    struct Fixture {
        tree: TreeGrid,
        grid: SpatialGrid,
        a1: Coefficient,
        a2: Coefficient,
        leader: SubdomainMask,
        params: GameParameters,
    }

    fn fixture(direction: GameDirection) -> Fixture {
        let tree = TreeGrid::new(1.0, 4).unwrap();
        let grid = grid9();
        let a1 = Coefficient::constant_scalar(&grid, 0.5);
        let a2 = Coefficient::constant_scalar(&grid, 0.4);
        let leader = SubdomainMask::from_range(&grid, 1, 6).unwrap();
        let m = 2;
        let obs_tilde = match direction {
            GameDirection::Backward => (0..m).map(|_| SubdomainMask::full(&grid)).collect(),
            GameDirection::Forward => (0..m).map(|_| SubdomainMask::full(&grid)).collect(),
        };
        let params = GameParameters {
            alpha: vec![1.0; m],
            alpha_tilde: vec![1.0; m],
            beta: vec![100.0; m],
            r_weight: vec![1.0; m],
            control_masks: (0..m)
                .map(|_| SubdomainMask::from_range(&grid, 3, 8).unwrap())
                .collect(),
            obs_masks: (0..m)
                .map(|_| SubdomainMask::from_range(&grid, 4, 9).unwrap())
                .collect(),
            obs_masks_tilde: obs_tilde,
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

    #[test]
    fn gramians_match_direct_quadratic_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (direction, form) in [
            (GameDirection::Forward, ObservabilityForm::ForwardNull),
            (GameDirection::Backward, ObservabilityForm::BackwardNull),
        ] {
            let f = fixture(direction);
            let c = ctx(&f, direction);
            let p = params(direction);
            let inv_rho = inv_rho_process(&c.tree.clone(), &p);
            let dim = match form {
                ObservabilityForm::ForwardNull => c.tree.nodes_at(4) * 9,
                ObservabilityForm::BackwardNull => 9,
            };
            let opts = CoupledOptions::default();
            use rand::Rng as _;
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let aq = apply_lhs_gramian(&c, form, &inv_rho, &q, &opts).unwrap();
            let bq = apply_observation_gramian(&c, form, &q, &opts).unwrap();
            let lhs = observability_lhs(&c, form, &inv_rho, &q, &opts).unwrap();
            let rhs = observability_rhs(&c, form, &q, &opts).unwrap();
            assert_relative_eq!(candidate_dot(&c, &aq, &q), lhs, max_relative = 1e-10);
            assert_relative_eq!(candidate_dot(&c, &bq, &q), rhs, max_relative = 1e-10);
            // Symmetry of both forms.
            let aq2 = apply_lhs_gramian(&c, form, &inv_rho, &q2, &opts).unwrap();
            let bq2 = apply_observation_gramian(&c, form, &q2, &opts).unwrap();
            assert_relative_eq!(
                candidate_dot(&c, &aq, &q2),
                candidate_dot(&c, &q, &aq2),
                max_relative = 1e-10
            );
            assert_relative_eq!(
                candidate_dot(&c, &bq, &q2),
                candidate_dot(&c, &q, &bq2),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn deterministic_datum_with_empty_leader_mask_is_unobservable() {
        // With no drift observation window, no multiplicative noise, and
        // deterministic data, the whole adjoint system stays deterministic,
        // the diffusion observation vanishes identically, and the
        // observation energy is zero for a nonzero datum.
        let mut f = fixture(GameDirection::Forward);
        f.a2 = Coefficient::constant_scalar(&f.grid, 0.0);
        let empty = SubdomainMask::empty(&f.grid);
        let c = GameContext::new(
            &f.tree,
            &f.grid,
            &f.a1,
            &f.a2,
            &empty,
            &f.params,
            GameDirection::Forward,
        );
        let profile: Vec<f64> = (0..9).map(|i| 1.0 + i as f64).collect();
        let q: Vec<f64> = (0..f.tree.nodes_at(4))
            .flat_map(|_| profile.clone())
            .collect();
        let rhs =
            observability_rhs(&c, ObservabilityForm::ForwardNull, &q, &CoupledOptions::default())
                .unwrap();
        assert!(rhs.abs() < 1e-20, "rhs {rhs:.3e}");
    }

    #[test]
    fn uncoupled_ratio_matches_eigen_recursion() {
        // alpha = 0, a1 = a2 = 0, whole-domain windows: every quantity is a
        // scalar recursion in the first eigencoordinate.
        let tree = TreeGrid::new(1.0, 4).unwrap();
        let grid = grid9();
        let a1 = Coefficient::constant_scalar(&grid, 0.0);
        let a2 = Coefficient::constant_scalar(&grid, 0.0);
        let leader = SubdomainMask::full(&grid);
        let params_g = GameParameters {
            alpha: vec![0.0],
            alpha_tilde: vec![0.0],
            beta: vec![50.0],
            r_weight: vec![1.0],
            control_masks: vec![SubdomainMask::full(&grid)],
            obs_masks: vec![SubdomainMask::full(&grid)],
            obs_masks_tilde: vec![SubdomainMask::full(&grid)],
        };
        let c = GameContext::new(
            &tree,
            &grid,
            &a1,
            &a2,
            &leader,
            &params_g,
            GameDirection::Forward,
        );
        let p = params(GameDirection::Backward);
        let inv_rho = inv_rho_process(&tree, &p);
        let v = grid.first_eigenvector();
        let q: Vec<f64> = (0..tree.nodes_at(4)).flat_map(|_| v.clone()).collect();
        let opts = CoupledOptions::default();
        let lhs = observability_lhs(&c, ObservabilityForm::ForwardNull, &inv_rho, &q, &opts)
            .unwrap();
        let rhs = observability_rhs(&c, ObservabilityForm::ForwardNull, &q, &opts).unwrap();

        // Scalar oracle: decay factor per backward step.
        let lam = grid.first_eigenvalue();
        let decay = 1.0 / (1.0 + tree.dt() * lam);
        let e_norm_sq = grid.inner(&v, &v);
        // phi_k = decay^(K-k) v; phi~_k = phi_k; psi recursion forward:
        // psi_{k+1} = decay (psi_k + dt * gain * phi_k).
        let steps = 4;
        let mut phi = vec![0.0; steps + 1];
        for (k, ph) in phi.iter_mut().enumerate() {
            *ph = decay.powi((steps - k) as i32);
        }
        let gain = 1.0 / 50.0;
        let mut psi = vec![0.0; steps + 1];
        for k in 0..steps {
            psi[k + 1] = decay * (psi[k] + tree.dt() * gain * phi[k]);
        }
        let mut lhs_want = phi[0] * phi[0] * e_norm_sq;
        let mut rhs_want = 0.0;
        for k in 0..steps {
            let t = tree.time_at(k);
            let w = if k == 0 { 0.0 } else { 1.0 / p.rho(t) };
            lhs_want += tree.dt() * w * w * psi[k] * psi[k] * e_norm_sq;
            rhs_want += tree.dt() * phi[k] * phi[k] * e_norm_sq;
        }
        assert_relative_eq!(lhs, lhs_want, max_relative = 1e-10);
        assert_relative_eq!(rhs, rhs_want, max_relative = 1e-10);
    }

    #[test]
    fn observability_estimate_is_stable_and_monotone() {
        let f = fixture(GameDirection::Forward);
        let c = ctx(&f, GameDirection::Forward);
        let p = params(GameDirection::Forward);
        let inv_rho = inv_rho_process(&f.tree, &p);
        let opts = ObservabilityOptions {
            starts: 5,
            ascent_steps: 15,
            coupled: CoupledOptions::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let est = estimate_observability_constant(
            &c,
            ObservabilityForm::ForwardNull,
            &inv_rho,
            &opts,
            &[],
            &mut rng,
        )
        .unwrap();
        assert!(est.c_hat.is_finite() && est.c_hat > 0.0);
        for r in &est.ratios {
            assert!(*r <= est.c_hat * (1.0 + 1e-12));
        }
        // Enlarging the observation window cannot increase the constant when
        // the candidate pool is shared.
        let mut f2 = fixture(GameDirection::Forward);
        f2.leader = SubdomainMask::full(&f2.grid);
        let c2 = GameContext::new(
            &f2.tree,
            &f2.grid,
            &f2.a1,
            &f2.a2,
            &f2.leader,
            &f2.params,
            GameDirection::Forward,
        );
        let mut rng2 = ChaCha8Rng::seed_from_u64(31);
        let mut pool: Vec<Vec<f64>> = vec![est.maximizer.clone()];
        pool.extend(est.ratios.iter().enumerate().map(|_| est.maximizer.clone()).take(1));
        let est2 = estimate_observability_constant(
            &c2,
            ObservabilityForm::ForwardNull,
            &inv_rho,
            &opts,
            &pool,
            &mut rng2,
        )
        .unwrap();
        assert!(
            est2.c_hat <= est.c_hat * (1.0 + 1e-9),
            "enlarged window constant {:.6e} > {:.6e}",
            est2.c_hat,
            est.c_hat
        );
    }

    #[test]
    fn unique_continuation_minimum_shrinks_with_window() {
        let f = fixture(GameDirection::Forward);
        let c_full = GameContext::new(
            &f.tree,
            &f.grid,
            &f.a1,
            &f.a2,
            &f.leader,
            &f.params,
            GameDirection::Forward,
        );
        let smaller = SubdomainMask::from_range(&f.grid, 1, 2).unwrap();
        let c_small = GameContext::new(
            &f.tree,
            &f.grid,
            &f.a1,
            &f.a2,
            &smaller,
            &f.params,
            GameDirection::Forward,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let opts = CoupledOptions::default();
        let (min_full, _) =
            unique_continuation_probe(&c_full, ObservabilityForm::ForwardNull, 40, &opts, &mut rng)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (min_small, _) =
            unique_continuation_probe(&c_small, ObservabilityForm::ForwardNull, 40, &opts, &mut rng)
                .unwrap();
        assert!(min_full >= 0.0 && min_small >= 0.0);
        assert!(
            min_small <= min_full * (1.0 + 1e-8),
            "shrinking window raised the minimum: {min_small:.3e} > {min_full:.3e}"
        );
    }
}
