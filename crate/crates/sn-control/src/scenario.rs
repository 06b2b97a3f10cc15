//! Scenario files: the user-facing problem description.
//!
//! A scenario is a TOML document holding the grids, coefficients, regions,
//! game parameters, goal, data generators, weight parameters, and solver
//! knobs. Loading validates everything at once and reports every violation;
//! the SHA-256 digest of the canonical re-serialization stamps all run
//! artifacts.

use crate::carleman::{build_eta0, CarlemanParams};
use crate::error::{Error, ScenarioError};
use crate::grid::{SpatialGrid, SubdomainMask};
use crate::lattice::{space_time_inner, AdaptedField, TreeGrid};
use crate::nash::{GameDirection, GameParameters, Targets};
use crate::spde::Coefficient;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

fn default_one() -> f64 {
    1.0
}

fn default_mu() -> f64 {
    2.0
}

fn default_eta0_height() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub length: f64,
    pub interior_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSection {
    pub horizon: f64,
    pub steps: usize,
}

/// Coefficient specification: constant, per-level scalars, a fixed spatial
/// profile, or a seeded bounded random field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoefficientSpec {
    Constant { value: f64 },
    PerLevel { values: Vec<f64> },
    Profile { values: Vec<f64> },
    RandomBounded { bound: f64 },
}

impl CoefficientSpec {
    pub fn build(
        &self,
        tree: &TreeGrid,
        grid: &SpatialGrid,
        rng: &mut ChaCha8Rng,
    ) -> Result<Coefficient, Error> {
        let n = grid.n_interior();
        match self {
            CoefficientSpec::Constant { value } => Ok(Coefficient::constant_scalar(grid, *value)),
            CoefficientSpec::PerLevel { values } => {
                if values.len() < tree.steps() {
                    return Err(Error::Geometry(format!(
                        "per-level coefficient needs {} entries, got {}",
                        tree.steps(),
                        values.len()
                    )));
                }
                Ok(Coefficient::PerLevel(
                    values.iter().map(|v| vec![*v; n]).collect(),
                ))
            }
            CoefficientSpec::Profile { values } => {
                if values.len() != n {
                    return Err(Error::Geometry(format!(
                        "coefficient profile needs {n} entries, got {}",
                        values.len()
                    )));
                }
                Ok(Coefficient::Constant(values.clone()))
            }
            CoefficientSpec::RandomBounded { bound } => {
                let field = AdaptedField::from_fn(tree, n, tree.steps(), |_, _| {
                    (0..n).map(|_| rng.gen_range(-bound.abs()..=bound.abs())).collect()
                });
                Ok(Coefficient::PerNode(field))
            }
        }
    }

    fn sup_norm_bound(&self) -> f64 {
        match self {
            CoefficientSpec::Constant { value } => value.abs(),
            CoefficientSpec::PerLevel { values } => {
                values.iter().fold(0.0, |a, v| a.max(v.abs()))
            }
            CoefficientSpec::Profile { values } => values.iter().fold(0.0, |a, v| a.max(v.abs())),
            CoefficientSpec::RandomBounded { bound } => bound.abs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientsSection {
    pub a1: CoefficientSpec,
    pub a2: CoefficientSpec,
}

/// 1-based inclusive interior index range.
pub type IndexRange = [usize; 2];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FollowerRegions {
    pub control: IndexRange,
    pub observation: IndexRange,
    /// Diffusion-observation window of the backward game; whole domain if
    /// omitted.
    pub observation_diffusion: Option<IndexRange>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubdomainsSection {
    pub leader: IndexRange,
    pub followers: Vec<FollowerRegions>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameSection {
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub alpha_tilde: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub r_weight: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSpec {
    Forward,
    Backward,
}

impl From<DirectionSpec> for GameDirection {
    fn from(d: DirectionSpec) -> Self {
        match d {
            DirectionSpec::Forward => GameDirection::Forward,
            DirectionSpec::Backward => GameDirection::Backward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalKind {
    Null,
    Approximate,
    Exact,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalSection {
    pub direction: DirectionSpec,
    pub kind: GoalKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-2
}

/// Deterministic or seeded-random data generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileSpec {
    Zero,
    Eigenmode {
        #[serde(default = "default_mode")]
        mode: usize,
        #[serde(default = "default_one")]
        amplitude: f64,
    },
    Random {
        #[serde(default = "default_one")]
        amplitude: f64,
    },
}

fn default_mode() -> usize {
    1
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Zero
    }
}

impl ProfileSpec {
    /// Deterministic spatial profile (length `N`).
    pub fn profile(&self, grid: &SpatialGrid, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = grid.n_interior();
        match self {
            ProfileSpec::Zero => vec![0.0; n],
            ProfileSpec::Eigenmode { mode, amplitude } => (0..n)
                .map(|i| {
                    amplitude
                        * (*mode as f64 * std::f64::consts::PI * grid.position(i) / grid.length())
                            .sin()
                })
                .collect(),
            ProfileSpec::Random { amplitude } => {
                (0..n).map(|_| rng.gen_range(-amplitude..=*amplitude)).collect()
            }
        }
    }

    /// Field over the level-`K` nodes (random variants vary per node).
    pub fn terminal_field(
        &self,
        tree: &TreeGrid,
        grid: &SpatialGrid,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let nodes = tree.nodes_at(tree.steps());
        match self {
            ProfileSpec::Random { amplitude } => (0..nodes * grid.n_interior())
                .map(|_| rng.gen_range(-amplitude..=*amplitude))
                .collect(),
            _ => {
                let p = self.profile(grid, rng);
                (0..nodes).flat_map(|_| p.clone()).collect()
            }
        }
    }

    /// Adapted target trajectory, `None` for the zero generator. Random
    /// draws are normalized to `amplitude` in the space-time norm.
    pub fn target_field(
        &self,
        tree: &TreeGrid,
        grid: &SpatialGrid,
        rng: &mut ChaCha8Rng,
    ) -> Option<AdaptedField> {
        match self {
            ProfileSpec::Zero => None,
            ProfileSpec::Eigenmode { .. } => {
                let p = self.profile(grid, rng);
                Some(AdaptedField::deterministic(tree, &p, tree.steps()))
            }
            ProfileSpec::Random { amplitude } => {
                let n = grid.n_interior();
                let mut f = AdaptedField::from_fn(tree, n, tree.steps(), |_, _| {
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
                });
                let norm = space_time_inner(tree, grid, &f, &f, None).unwrap().sqrt();
                if norm > 0.0 {
                    f.scale(amplitude / norm);
                }
                Some(f)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsSection {
    #[serde(default = "default_one")]
    pub lambda: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_eta0_height")]
    pub eta0_height: f64,
    /// Critical set of the bump profile; derived from the overlap of the
    /// observation and leader windows when omitted.
    pub critical: Option<IndexRange>,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 2.0,
            eta0_height: 0.1,
            critical: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSection {
    #[serde(default = "default_coupled_tol")]
    pub coupled_tol: f64,
    #[serde(default = "default_gmres_tol")]
    pub gmres_tol: f64,
    #[serde(default = "default_hum_tol")]
    pub hum_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_trials")]
    pub duality_trials: usize,
    #[serde(default = "default_starts")]
    pub ascent_starts: usize,
    #[serde(default = "default_ascent_steps")]
    pub ascent_steps: usize,
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
}

fn default_coupled_tol() -> f64 {
    1e-13
}
fn default_gmres_tol() -> f64 {
    1e-10
}
fn default_hum_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    2000
}
fn default_trials() -> usize {
    100
}
fn default_starts() -> usize {
    20
}
fn default_ascent_steps() -> usize {
    40
}
fn default_beta_grid() -> Vec<f64> {
    vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0]
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            coupled_tol: default_coupled_tol(),
            gmres_tol: default_gmres_tol(),
            hum_tol: default_hum_tol(),
            max_iters: default_max_iters(),
            duality_trials: default_trials(),
            ascent_starts: default_starts(),
            ascent_steps: default_ascent_steps(),
            beta_grid: default_beta_grid(),
        }
    }
}

/// Full problem description, as parsed from a scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSection,
    pub tree: TreeSection,
    pub coefficients: CoefficientsSection,
    pub subdomains: SubdomainsSection,
    pub game: GameSection,
    pub goal: GoalSection,
    #[serde(default)]
    pub initial: ProfileSpec,
    #[serde(default)]
    pub terminal: ProfileSpec,
    #[serde(default)]
    pub targets: ProfileSpec,
    #[serde(default)]
    pub targets_diffusion: ProfileSpec,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub solver: SolverSection,
}

impl Scenario {
    /// Parse and validate a scenario file.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// SHA-256 digest of the canonical serialization (defaults filled in).
    pub fn digest(&self) -> String {
        let canon = toml::to_string(self).expect("scenario serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn followers(&self) -> usize {
        self.subdomains.followers.len()
    }

    /// Validate every invariant at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        let n = self.grid.interior_points;
        if n < 3 {
            problems.push(format!("grid needs at least 3 interior points, got {n}"));
        }
        if !(self.grid.length > 0.0) {
            problems.push("grid length must be positive".into());
        }
        if self.tree.steps == 0 || self.tree.steps > crate::lattice::MAX_STEPS {
            problems.push(format!(
                "tree steps {} outside 1..={}",
                self.tree.steps,
                crate::lattice::MAX_STEPS
            ));
        }
        if !(self.tree.horizon > 0.0) {
            problems.push("tree horizon must be positive".into());
        }
        let check_range = |what: &str, r: &IndexRange, problems: &mut Vec<String>| {
            if r[0] == 0 || r[1] > n || r[0] > r[1] {
                problems.push(format!(
                    "{what} range [{}, {}] outside 1..={n}",
                    r[0], r[1]
                ));
            }
        };
        check_range("leader window", &self.subdomains.leader, &mut problems);
        let m = self.subdomains.followers.len();
        if m == 0 {
            problems.push("at least one follower required".into());
        }
        for (i, f) in self.subdomains.followers.iter().enumerate() {
            check_range(&format!("follower {i} control"), &f.control, &mut problems);
            check_range(
                &format!("follower {i} observation"),
                &f.observation,
                &mut problems,
            );
            if let Some(r) = &f.observation_diffusion {
                check_range(
                    &format!("follower {i} diffusion observation"),
                    r,
                    &mut problems,
                );
            }
        }
        for (name, v) in [("alpha", &self.game.alpha), ("beta", &self.game.beta)] {
            if v.len() != m {
                problems.push(format!("game.{name} has {} entries for {m} followers", v.len()));
            }
        }
        if !self.game.alpha_tilde.is_empty() && self.game.alpha_tilde.len() != m {
            problems.push(format!(
                "game.alpha_tilde has {} entries for {m} followers",
                self.game.alpha_tilde.len()
            ));
        }
        if !self.game.r_weight.is_empty() && self.game.r_weight.len() != m {
            problems.push(format!(
                "game.r_weight has {} entries for {m} followers",
                self.game.r_weight.len()
            ));
        }
        if self.game.beta.iter().any(|b| *b < 1.0) {
            problems.push("control penalties must satisfy beta >= 1".into());
        }
        if self.game.alpha.iter().any(|a| *a < 0.0) {
            problems.push("mismatch weights alpha must be nonnegative".into());
        }
        if matches!(self.goal.kind, GoalKind::Null | GoalKind::Approximate)
            && !(self.goal.epsilon > 0.0)
        {
            problems.push("goal epsilon must be positive for null/approximate goals".into());
        }
        // Controllability goals need an observation window meeting the
        // leader window.
        let leader = &self.subdomains.leader;
        for (i, f) in self.subdomains.followers.iter().enumerate() {
            let o = &f.observation;
            let meets = o[0].max(leader[0]) <= o[1].min(leader[1]);
            if !meets {
                problems.push(format!(
                    "follower {i} observation window [{}, {}] does not meet the leader window [{}, {}] (required for controllability goals)",
                    o[0], o[1], leader[0], leader[1]
                ));
            }
        }
        if self.weights.lambda < 1.0 || self.weights.mu < 1.0 {
            problems.push("weight parameters must satisfy lambda, mu >= 1".into());
        }
        if !(self.weights.eta0_height > 0.0) {
            problems.push("eta0 height must be positive".into());
        }
        if let Some(c) = &self.weights.critical {
            check_range("weights critical set", c, &mut problems);
            if c[0] <= 1 || c[1] >= n {
                problems.push("weights critical set must not touch the boundary".into());
            }
        }
        let dt = self.tree.horizon / self.tree.steps.max(1) as f64;
        let bound = dt * self.coefficients.a1.sup_norm_bound();
        if bound >= 1.0 {
            problems.push(format!(
                "stability guard violated: dt * sup|a1| = {bound:.3} >= 1"
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Validation(problems))
        }
    }

    pub fn build_tree(&self) -> Result<TreeGrid, Error> {
        Ok(TreeGrid::new(self.tree.horizon, self.tree.steps)?)
    }

    pub fn build_grid(&self) -> Result<SpatialGrid, Error> {
        Ok(SpatialGrid::new(self.grid.length, self.grid.interior_points)?)
    }

    pub fn leader_mask(&self, grid: &SpatialGrid) -> Result<SubdomainMask, Error> {
        Ok(SubdomainMask::from_range(
            grid,
            self.subdomains.leader[0],
            self.subdomains.leader[1],
        )?)
    }

    pub fn game_parameters(&self, grid: &SpatialGrid) -> Result<GameParameters, Error> {
        let m = self.followers();
        let mut control_masks = Vec::with_capacity(m);
        let mut obs_masks = Vec::with_capacity(m);
        let mut obs_masks_tilde = Vec::with_capacity(m);
        for f in &self.subdomains.followers {
            control_masks.push(SubdomainMask::from_range(grid, f.control[0], f.control[1])?);
            obs_masks.push(SubdomainMask::from_range(
                grid,
                f.observation[0],
                f.observation[1],
            )?);
            obs_masks_tilde.push(match &f.observation_diffusion {
                Some(r) => SubdomainMask::from_range(grid, r[0], r[1])?,
                None => SubdomainMask::full(grid),
            });
        }
        let alpha_tilde = if self.game.alpha_tilde.is_empty() {
            self.game.alpha.clone()
        } else {
            self.game.alpha_tilde.clone()
        };
        let r_weight = if self.game.r_weight.is_empty() {
            vec![1.0; m]
        } else {
            self.game.r_weight.clone()
        };
        let params = GameParameters {
            alpha: self.game.alpha.clone(),
            alpha_tilde,
            beta: self.game.beta.clone(),
            r_weight,
            control_masks,
            obs_masks,
            obs_masks_tilde,
        };
        params.validate()?;
        Ok(params)
    }

    /// The critical-set range of the weight family: the configured range, or
    /// the overlap of the first observation window with the leader window
    /// shrunk away from its ends.
    pub fn critical_range(&self) -> IndexRange {
        if let Some(c) = &self.weights.critical {
            return *c;
        }
        let leader = self.subdomains.leader;
        let obs = self.subdomains.followers[0].observation;
        let lo = leader[0].max(obs[0]);
        let hi = leader[1].min(obs[1]);
        let n = self.grid.interior_points;
        let lo = (lo + 1).clamp(2, n - 1);
        let hi = hi.saturating_sub(1).clamp(lo, n - 1);
        [lo, hi]
    }

    pub fn carleman_params(&self, grid: &SpatialGrid) -> Result<CarlemanParams, Error> {
        let range = self.critical_range();
        let critical = SubdomainMask::from_range(grid, range[0], range[1])?;
        let eta0 = build_eta0(grid, &critical, self.weights.eta0_height)?;
        Ok(CarlemanParams {
            lambda: self.weights.lambda,
            mu: self.weights.mu,
            horizon: self.tree.horizon,
            eta0,
            direction: self.goal.direction.into(),
        })
    }

    /// Target trajectories for all followers (state and diffusion parts).
    pub fn build_targets(
        &self,
        tree: &TreeGrid,
        grid: &SpatialGrid,
        rng: &mut ChaCha8Rng,
    ) -> Targets {
        let m = self.followers();
        let mut t = Targets::zero(m);
        for i in 0..m {
            t.state[i] = self.targets.target_field(tree, grid, rng);
        }
        if matches!(self.goal.direction, DirectionSpec::Backward) {
            for i in 0..m {
                t.diffusion[i] = self.targets_diffusion.target_field(tree, grid, rng);
            }
        }
        t
    }
}

/// A ready-to-ship default scenario (also used by the test suites).
pub fn default_scenario_text() -> &'static str {
    r#"# Two followers on the unit interval, forward-game null control.
seed = 0

[grid]
length = 3.0
interior_points = 21

[tree]
horizon = 1.0
steps = 8

[coefficients]
a1 = { kind = "constant", value = 0.5 }
a2 = { kind = "constant", value = 0.1 }

[subdomains]
leader = [1, 11]

[[subdomains.followers]]
control = [6, 16]
observation = [8, 18]

[[subdomains.followers]]
control = [10, 21]
observation = [8, 18]

[game]
alpha = [1.0, 1.0]
beta = [100.0, 100.0]

[goal]
direction = "forward"
kind = "null"
epsilon = 1e-2

[initial]
kind = "eigenmode"
mode = 1
amplitude = 2.0

[targets]
kind = "random"
amplitude = 0.5

[weights]
lambda = 1.0
mu = 2.0
eta0_height = 0.005
"#
}
