//! Sampling-based planning in latent or joint space.
//!
//! [`plan_step`] runs one receding-horizon iteration: it perturbs the nominal
//! control sequence, rolls every sample through `z ← z + (u + δu)·dt`,
//! decodes the states, scores them with the five-term stage cost and returns
//! the exponentially weighted average together with the shifted sequence.

use crate::geometry::Transform;
use crate::kinematics::{
    arm_sphere_counts, collision_spheres, constraint_norm, forward_kinematics, ChainModel,
    Configuration,
};
use crate::manifold_codec::{Decoder, IdentityChart};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One innovation per sample, held over the whole horizon.
    SingleInstance,
    /// Independent innovations at every horizon step.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceMode {
    Latent,
    JointPenalty,
}

/// How moving obstacles are seen inside the prediction horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObstaclePrediction {
    #[default]
    Frozen,
    Extrapolated,
}

/// Where the K rollouts are evaluated. `Parallel` falls back to sequential
/// evaluation when the crate is built without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

/// Stage-cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub w_track: f64,
    /// Multiplier of the tracking term at the last horizon step.
    pub terminal_multiplier: f64,
    pub w_coll: f64,
    /// Diagonal of `R` in the quadratic control penalty `½ uᵀRu`.
    pub r_diag: Vec<f64>,
    pub w_limit: f64,
    pub w_neutral: f64,
    /// Weight of `‖h(q)‖²` in joint-space penalty mode.
    pub w_h: f64,
    /// Clearance below which the collision hinge becomes active (m).
    pub margin: f64,
    /// Norm of `u` above which the velocity hinge becomes active.
    pub velocity_limit: f64,
    /// Neutral posture; empty means the model's neutral posture.
    pub q_neutral: Vec<f64>,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_track: 10.0,
            terminal_multiplier: 10.0,
            w_coll: 100.0,
            r_diag: Vec::new(),
            w_limit: 100.0,
            w_neutral: 0.01,
            w_h: 0.0,
            margin: 0.02,
            velocity_limit: f64::INFINITY,
            q_neutral: Vec::new(),
        }
    }
}

/// Planner settings. Empty `sigma`/`r_diag` vectors broadcast a scalar
/// default (`0.1`) over the control dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub samples: usize,
    pub horizon: usize,
    pub dt: f64,
    pub lambda: f64,
    /// Diagonal of the innovation covariance Σ.
    pub sigma: Vec<f64>,
    pub sampling_mode: SamplingMode,
    pub space_mode: SpaceMode,
    pub prediction: ObstaclePrediction,
    pub parallelism: Parallelism,
    pub weights: CostWeights,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            horizon: 30,
            dt: 0.01,
            lambda: 1.0,
            sigma: Vec::new(),
            sampling_mode: SamplingMode::SingleInstance,
            space_mode: SpaceMode::Latent,
            prediction: ObstaclePrediction::Frozen,
            parallelism: Parallelism::Parallel,
            weights: CostWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
}

impl PlannerConfig {
    pub fn validate(&self, control_dim: usize) -> Result<(), PlannerError> {
        let bad = |s: &str| Err(PlannerError::Config(s.into()));
        if self.samples == 0 || self.horizon == 0 {
            return bad("samples and horizon must be at least 1");
        }
        if !(self.dt > 0.0) || !(self.lambda > 0.0) {
            return bad("dt and lambda must be positive");
        }
        for (name, v) in [("sigma", &self.sigma), ("r_diag", &self.weights.r_diag)] {
            if !v.is_empty() && v.len() != control_dim {
                return Err(PlannerError::Config(format!(
                    "{name} has {} entries, control dimension is {control_dim}",
                    v.len()
                )));
            }
        }
        if self.sigma.iter().any(|s| *s < 0.0) || self.weights.r_diag.iter().any(|r| *r < 0.0) {
            return bad("sigma and R must be non-negative");
        }
        let w = &self.weights;
        if [w.w_track, w.terminal_multiplier, w.w_coll, w.w_limit, w.w_neutral, w.w_h, w.margin]
            .iter()
            .any(|v| *v < 0.0)
        {
            return bad("cost weights must be non-negative");
        }
        Ok(())
    }

    fn sigma_at(&self, i: usize) -> f64 {
        self.sigma.get(i).copied().unwrap_or(0.1)
    }

    fn r_at(&self, i: usize) -> f64 {
        self.weights.r_diag.get(i).copied().unwrap_or(0.1)
    }
}

// ----------------------------------------------------------------- scene

/// Scripted motion of an obstacle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleMotion {
    #[default]
    Static,
    /// Constant velocity `speed · axis` from `start_time` on.
    Linear {
        axis: [f64; 3],
        speed: f64,
        start_time: f64,
    },
}

/// Spherical obstacle (a disc in the planar model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default)]
    pub motion: ObstacleMotion,
}

impl Obstacle {
    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        let c = Vector3::from(self.center);
        match self.motion {
            ObstacleMotion::Static => c,
            ObstacleMotion::Linear {
                axis,
                speed,
                start_time,
            } => {
                let a = Vector3::from(axis);
                let a = if a.norm() > 0.0 { a.normalize() } else { a };
                c + a * speed * (t - start_time).max(0.0)
            }
        }
    }
}

/// Everything the cost needs from the outside world.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningScene {
    pub goal: Transform,
    pub obstacles: Vec<Obstacle>,
    /// Simulated time at the start of the horizon.
    pub time: f64,
}

impl PlanningScene {
    pub fn new(goal: Transform) -> Self {
        Self {
            goal,
            obstacles: Vec::new(),
            time: 0.0,
        }
    }

    fn obstacles_at(&self, t: f64, out: &mut Vec<(Vector3<f64>, f64)>) {
        out.clear();
        out.extend(self.obstacles.iter().map(|o| (o.position_at(t), o.radius)));
    }
}

// ------------------------------------------------------------------ costs

/// Per-term stage cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub track: f64,
    pub coll: f64,
    pub reg: f64,
    pub limit: f64,
    pub neutral: f64,
    /// Constraint penalty; zero outside joint-space penalty mode.
    pub penalty: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.track + self.coll + self.reg + self.limit + self.neutral + self.penalty
    }

    fn add(&mut self, o: &CostBreakdown) {
        self.track += o.track;
        self.coll += o.coll;
        self.reg += o.reg;
        self.limit += o.limit;
        self.neutral += o.neutral;
        self.penalty += o.penalty;
    }
}

/// Squared hinge `max(0, x)²`.
#[inline]
fn hinge2(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

/// Smallest signed clearance between robot spheres and obstacles, and between
/// distal spheres of the two arms.
pub fn min_clearance(model: &ChainModel, q: &[f64], obstacles: &[(Vector3<f64>, f64)]) -> f64 {
    let mut spheres = Vec::new();
    collision_spheres(model, q, &mut spheres);
    let mut best = f64::INFINITY;
    for (c, r) in &spheres {
        for (o, ro) in obstacles {
            best = best.min((c - o).norm() - r - ro);
        }
    }
    for_self_pairs(model, &spheres, |d| best = best.min(d));
    best
}

fn for_self_pairs(model: &ChainModel, spheres: &[(Vector3<f64>, f64)], mut f: impl FnMut(f64)) {
    let [nl, nr] = arm_sphere_counts(model);
    for (i, sl) in model.arms[0].spheres.iter().enumerate() {
        if sl.link == 0 {
            continue;
        }
        for (j, sr) in model.arms[1].spheres.iter().enumerate() {
            if sr.link == 0 {
                continue;
            }
            let (a, ra) = spheres[i];
            let (b, rb) = spheres[nl + j];
            f((a - b).norm() - ra - rb);
        }
    }
    debug_assert!(spheres.len() >= nl + nr);
}

/// Stage cost of one decoded state.
///
/// `terminal` scales the tracking term by the terminal multiplier.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost(
    cfg: &PlannerConfig,
    model: &ChainModel,
    q: &[f64],
    u: &[f64],
    goal: &Transform,
    obstacles: &[(Vector3<f64>, f64)],
    terminal: bool,
    spheres: &mut Vec<(Vector3<f64>, f64)>,
) -> CostBreakdown {
    let w = &cfg.weights;
    let mut out = CostBreakdown::default();

    let tray = forward_kinematics(model, q).tray;
    let err = tray
        .pose_error(goal)
        .map(|e| e.norm_squared())
        .unwrap_or(f64::INFINITY);
    out.track = w.track_scale(terminal) * err;

    if w.w_coll > 0.0 {
        collision_spheres(model, q, spheres);
        let mut c = 0.0;
        for (s, r) in spheres.iter() {
            for (o, ro) in obstacles {
                c += hinge2(w.margin - ((s - o).norm() - r - ro));
            }
        }
        for_self_pairs(model, spheres, |d| c += hinge2(w.margin - d));
        out.coll = w.w_coll * c;
    }

    out.reg = 0.5 * u.iter().enumerate().map(|(i, v)| cfg.r_at(i) * v * v).sum::<f64>();

    let mut lim = 0.0;
    for (i, v) in q.iter().enumerate() {
        lim += hinge2(v - model.upper[i]) + hinge2(model.lower[i] - v);
    }
    let speed = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    lim += hinge2(speed - w.velocity_limit);
    out.limit = w.w_limit * lim;

    let neutral = if w.q_neutral.is_empty() {
        &model.neutral
    } else {
        &w.q_neutral
    };
    out.neutral = w.w_neutral * q.iter().zip(neutral).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();

    if cfg.space_mode == SpaceMode::JointPenalty && w.w_h > 0.0 {
        let h = constraint_norm(model, q);
        out.penalty = w.w_h * h * h;
    }
    out
}

impl CostWeights {
    fn track_scale(&self, terminal: bool) -> f64 {
        if terminal {
            self.w_track * self.terminal_multiplier
        } else {
            self.w_track
        }
    }
}

// ------------------------------------------------------- control sequence

/// `T × d` control sequence stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ControlSequence {
    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self {
            steps,
            dim,
            data: vec![0.0; steps * dim],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Drops the first row and appends a zero row.
    pub fn shifted(&self) -> Self {
        let mut out = Self::zeros(self.steps, self.dim);
        out.data[..(self.steps - 1) * self.dim].copy_from_slice(&self.data[self.dim..]);
        out
    }
}

// ---------------------------------------------------------- perturbations

/// Innovation for one sample: a single row in single-instance mode, `T` rows otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub mode: SamplingMode,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Perturbation {
    /// Innovation applied at horizon step `t`.
    pub fn at(&self, t: usize) -> &[f64] {
        match self.mode {
            SamplingMode::SingleInstance => &self.data[..self.dim],
            SamplingMode::PerStep => &self.data[t * self.dim..(t + 1) * self.dim],
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// RNG stream for sample `k` of planner iteration `iteration`.
pub fn sample_rng(seed: u64, iteration: u64, k: usize) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ iteration) ^ k as u64);
    ChaCha8Rng::seed_from_u64(key)
}

/// Draws the innovation of sample `k` (`1 ≤ k ≤ K`) from `N(0, Σ)`.
pub fn sample_perturbations(cfg: &PlannerConfig, dim: usize, seed: u64, iteration: u64, k: usize) -> Perturbation {
    let mut rng = sample_rng(seed, iteration, k);
    let rows = match cfg.sampling_mode {
        SamplingMode::SingleInstance => 1,
        SamplingMode::PerStep => cfg.horizon,
    };
    let mut data = vec![0.0; rows * dim];
    for r in 0..rows {
        for i in 0..dim {
            let s = cfg.sigma_at(i);
            let e: f64 = rng.sample(StandardNormal);
            data[r * dim + i] = s.sqrt() * e;
        }
    }
    Perturbation {
        mode: cfg.sampling_mode,
        dim,
        data,
    }
}

// --------------------------------------------------------------- rollouts

/// Trajectory and cost of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `z_1 … z_T`.
    pub latent: Vec<Vec<f64>>,
    /// `ψ(z_1) … ψ(z_T)`.
    pub joints: Vec<Configuration>,
    pub total: f64,
    pub breakdown: CostBreakdown,
}

/// Scratch buffers reused across rollouts of one worker.
#[derive(Debug, Default)]
struct Workspace {
    z: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
    obstacles: Vec<(Vector3<f64>, f64)>,
    spheres: Vec<(Vector3<f64>, f64)>,
}

/// Euler integration `z_{t+1} = z_t + (u_t + δu_t)·dt`, writing the
/// states `z_1 … z_T` and the applied controls back to back.
pub fn propagate(
    z_c: &[f64],
    u_nom: &ControlSequence,
    pert: &Perturbation,
    dt: f64,
    z_out: &mut [f64],
    u_out: &mut [f64],
) {
    let m = z_c.len();
    let mut prev = z_c.to_vec();
    for t in 0..u_nom.steps {
        let d = pert.at(t);
        for i in 0..m {
            let u = u_nom.row(t)[i] + d[i];
            u_out[t * m + i] = u;
            prev[i] += u * dt;
            z_out[t * m + i] = prev[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn rollout_into(
    cfg: &PlannerConfig,
    model: &ChainModel,
    decoder: &dyn Decoder,
    z_c: &[f64],
    u_nom: &ControlSequence,
    pert: &Perturbation,
    scene: &PlanningScene,
    ws: &mut Workspace,
) -> CostBreakdown {
    let m = decoder.latent_dim();
    let n = decoder.output_dim();
    let t_len = cfg.horizon;
    ws.z.resize(m * t_len, 0.0);
    ws.q.resize(n * t_len, 0.0);
    ws.u.resize(m * t_len, 0.0);
    propagate(z_c, u_nom, pert, cfg.dt, &mut ws.z, &mut ws.u);
    decoder.decode_many(&ws.z, t_len, &mut ws.q);
    let mut total = CostBreakdown::default();
    if cfg.prediction == ObstaclePrediction::Frozen {
        scene.obstacles_at(scene.time, &mut ws.obstacles);
    }
    for t in 0..t_len {
        if cfg.prediction == ObstaclePrediction::Extrapolated {
            scene.obstacles_at(scene.time + (t + 1) as f64 * cfg.dt, &mut ws.obstacles);
        }
        let c = evaluate_cost(
            cfg,
            model,
            &ws.q[t * n..(t + 1) * n],
            &ws.u[t * m..(t + 1) * m],
            &scene.goal,
            &ws.obstacles,
            t + 1 == t_len,
            &mut ws.spheres,
        );
        total.add(&c);
    }
    total
}

/// Rolls one perturbed control sequence forward and scores it.
pub fn rollout(
    cfg: &PlannerConfig,
    model: &ChainModel,
    decoder: &dyn Decoder,
    z_c: &[f64],
    u_nom: &ControlSequence,
    pert: &Perturbation,
    scene: &PlanningScene,
) -> RolloutResult {
    let mut ws = Workspace::default();
    let breakdown = rollout_into(cfg, model, decoder, z_c, u_nom, pert, scene, &mut ws);
    let m = decoder.latent_dim();
    let n = decoder.output_dim();
    RolloutResult {
        latent: ws.z.chunks(m).map(|c| c.to_vec()).collect(),
        joints: ws.q.chunks(n).map(|c| Configuration(c.to_vec())).collect(),
        total: breakdown.total(),
        breakdown,
    }
}

/// Normalized exponential weights with the minimum cost shifted to zero.
pub fn importance_weights(costs: &[f64], lambda: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = costs.iter().map(|c| (-(c - min) / lambda).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

// -------------------------------------------------------------- plan step

/// Per-cycle planner record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub iteration: u64,
    pub min_cost: f64,
    pub mean_cost: f64,
    pub ess: f64,
    pub z_star: Vec<f64>,
    pub h_norm: f64,
    /// Wall-clock duration; excluded from deterministic comparisons.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub q_hat: Configuration,
    pub z_star: Vec<f64>,
    /// Weighted-average sequence before shifting.
    pub u_star: ControlSequence,
    /// Warm start for the next cycle.
    pub u_shifted: ControlSequence,
    pub diagnostics: PlanDiagnostics,
}

fn evaluate_samples(
    cfg: &PlannerConfig,
    model: &ChainModel,
    decoder: &dyn Decoder,
    z_c: &[f64],
    u_nom: &ControlSequence,
    scene: &PlanningScene,
    seed: u64,
    iteration: u64,
) -> Vec<(f64, Perturbation)> {
    let m = decoder.latent_dim();
    let one = |k: usize, ws: &mut Workspace| {
        let pert = sample_perturbations(cfg, m, seed, iteration, k);
        let cost = rollout_into(cfg, model, decoder, z_c, u_nom, &pert, scene, ws).total();
        (cost, pert)
    };
    #[cfg(feature = "parallel")]
    if cfg.parallelism == Parallelism::Parallel {
        use rayon::prelude::*;
        return (1..=cfg.samples)
            .into_par_iter()
            .map_init(Workspace::default, |ws, k| one(k, ws))
            .collect();
    }
    let mut ws = Workspace::default();
    (1..=cfg.samples).map(|k| one(k, &mut ws)).collect()
}

/// One planning iteration from latent state `z_c` around `u_nom`.
#[allow(clippy::too_many_arguments)]
pub fn plan_step(
    cfg: &PlannerConfig,
    model: &ChainModel,
    decoder: &dyn Decoder,
    z_c: &[f64],
    u_nom: &ControlSequence,
    scene: &PlanningScene,
    seed: u64,
    iteration: u64,
) -> PlanOutput {
    let start = Instant::now();
    let m = decoder.latent_dim();
    assert_eq!(z_c.len(), m, "latent state has the wrong dimension");
    assert_eq!((u_nom.steps, u_nom.dim), (cfg.horizon, m), "nominal sequence has the wrong shape");
    let samples = evaluate_samples(cfg, model, decoder, z_c, u_nom, scene, seed, iteration);
    let costs: Vec<f64> = samples.iter().map(|(c, _)| *c).collect();
    let weights = importance_weights(&costs, cfg.lambda);

    // fixed-order reduction keeps the result independent of scheduling
    let mut u_star = u_nom.clone();
    for (w, (_, pert)) in weights.iter().zip(&samples) {
        for t in 0..cfg.horizon {
            let d = pert.at(t);
            for (u, di) in u_star.row_mut(t).iter_mut().zip(d) {
                *u += w * di;
            }
        }
    }
    let z_star: Vec<f64> = z_c
        .iter()
        .zip(u_star.row(0))
        .map(|(z, u)| z + u * cfg.dt)
        .collect();
    let q_hat = decoder.decode(&z_star);
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    let h_norm = constraint_norm(model, &q_hat);
    PlanOutput {
        u_shifted: u_star.shifted(),
        u_star,
        diagnostics: PlanDiagnostics {
            iteration,
            min_cost,
            mean_cost,
            ess,
            z_star: z_star.clone(),
            h_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        q_hat,
        z_star,
    }
}

/// Joint-space baseline: state `q`, control `q̇`, constraint handled only by
/// the `w_h‖h‖²` penalty. Innovations are always drawn per step.
pub fn vanilla_plan_step(
    cfg: &PlannerConfig,
    model: &ChainModel,
    q_c: &[f64],
    u_nom: &ControlSequence,
    scene: &PlanningScene,
    seed: u64,
    iteration: u64,
) -> PlanOutput {
    let mut cfg = cfg.clone();
    cfg.space_mode = SpaceMode::JointPenalty;
    cfg.sampling_mode = SamplingMode::PerStep;
    let chart = IdentityChart {
        dim: model.joint_count(),
    };
    plan_step(&cfg, model, &chart, q_c, u_nom, scene, seed, iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Se2;
    use crate::manifold_codec::AnalyticChart;

    fn small_cfg() -> PlannerConfig {
        PlannerConfig {
            samples: 8,
            horizon: 3,
            lambda: 0.5,
            sigma: vec![0.01, 0.02, 0.05],
            ..PlannerConfig::default()
        }
    }

    fn scene() -> PlanningScene {
        let mut s = PlanningScene::new(Transform::Se2(Se2::from_xy_theta(-0.05, 0.45, 0.0)));
        s.obstacles.push(Obstacle {
            center: [0.0, 0.62, 0.0],
            radius: 0.03,
            motion: ObstacleMotion::Linear {
                axis: [1.0, 0.0, 0.0],
                speed: 0.1,
                start_time: 0.0,
            },
        });
        s
    }

    #[test]
    fn zero_covariance_gives_zero_perturbations() {
        let cfg = PlannerConfig {
            sigma: vec![0.0; 3],
            sampling_mode: SamplingMode::PerStep,
            ..small_cfg()
        };
        let p = sample_perturbations(&cfg, 3, 1, 0, 1);
        assert!(p.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_instance_innovation_is_constant() {
        let p = sample_perturbations(&small_cfg(), 3, 1, 0, 2);
        assert_eq!(p.at(0), p.at(2));
        assert_eq!(p.data.len(), 3);
    }

    #[test]
    fn stationary_rollout() {
        let model = ChainModel::planar();
        let chart = AnalyticChart::new(&model).unwrap();
        let cfg = small_cfg();
        let z = [0.0, 0.5, 0.0];
        let pert = Perturbation {
            mode: SamplingMode::SingleInstance,
            dim: 3,
            data: vec![0.0; 3],
        };
        let r = rollout(&cfg, &model, &chart, &z, &ControlSequence::zeros(3, 3), &pert, &scene());
        assert!(r.latent.iter().all(|zt| zt == &z.to_vec()));
        assert!(r.joints.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(r.breakdown.reg, 0.0);
    }

    #[test]
    fn scalar_two_step_rollout() {
        let u = ControlSequence {
            steps: 2,
            dim: 1,
            data: vec![1.0, -1.0],
        };
        let pert = Perturbation {
            mode: SamplingMode::SingleInstance,
            dim: 1,
            data: vec![0.5],
        };
        let (mut z, mut applied) = ([0.0; 2], [0.0; 2]);
        propagate(&[0.2], &u, &pert, 0.01, &mut z, &mut applied);
        assert!((z[0] - 0.215).abs() < 1e-15);
        assert!((z[1] - 0.210).abs() < 1e-15);
        assert_eq!(applied, [1.5, -0.5]);
    }

    #[test]
    fn global_minimum_has_zero_cost() {
        let model = ChainModel::planar();
        let q = model.neutral.clone();
        let goal = forward_kinematics(&model, &q).tray;
        let cfg = PlannerConfig::default();
        let c = evaluate_cost(&cfg, &model, &q, &[0.0; 3], &goal, &[], false, &mut Vec::new());
        assert!(c.total().abs() < 1e-20, "{c:?}");
    }

    #[test]
    fn collision_hinge_boundary() {
        let model = ChainModel::planar();
        let q = model.neutral.clone();
        let goal = forward_kinematics(&model, &q).tray;
        let cfg = PlannerConfig::default();
        let mut spheres = Vec::new();
        collision_spheres(&model, &q, &mut spheres);
        // place an obstacle straight above the topmost tray sphere
        let (top, r) = *spheres.last().unwrap();
        let ro = 0.03;
        let place = |gap: f64| vec![(top + Vector3::new(0.0, r + ro + gap, 0.0), ro)];
        let at_margin = evaluate_cost(&cfg, &model, &q, &[0.0; 3], &goal, &place(0.02), false, &mut spheres);
        let inside = evaluate_cost(&cfg, &model, &q, &[0.0; 3], &goal, &place(0.01), false, &mut spheres);
        assert!(at_margin.coll.abs() < 1e-12);
        assert!(inside.coll > 0.0);
    }

    #[test]
    fn weights_special_cases() {
        let w = importance_weights(&[3.0; 5], 1.0);
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = importance_weights(&[2.0, 1.0, 3.0], 1e-12);
        assert!((w[1] - 1.0).abs() < 1e-9 && w[0] < 1e-9 && w[2] < 1e-9);
        let w = importance_weights(&[1.0, 2.0, 4.0], 1.0);
        let e = [1.0, (-1.0f64).exp(), (-3.0f64).exp()];
        let s: f64 = e.iter().sum();
        for (a, b) in w.iter().zip(e) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_covariance_reproduces_nominal() {
        let model = ChainModel::planar();
        let chart = AnalyticChart::new(&model).unwrap();
        let cfg = PlannerConfig {
            sigma: vec![0.0; 3],
            ..small_cfg()
        };
        let mut u = ControlSequence::zeros(3, 3);
        u.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
        let z = [0.0, 0.5, 0.0];
        let out = plan_step(&cfg, &model, &chart, &z, &u, &scene(), 3, 0);
        assert_eq!(out.u_star, u);
        for i in 0..3 {
            assert_eq!(out.z_star[i], z[i] + u.row(0)[i] * cfg.dt);
        }
        assert_eq!(out.u_shifted.row(0), u.row(1));
        assert!(out.u_shifted.row(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_takes_its_own_sequence() {
        let model = ChainModel::planar();
        let chart = AnalyticChart::new(&model).unwrap();
        let cfg = PlannerConfig {
            samples: 1,
            ..small_cfg()
        };
        let u = ControlSequence::zeros(3, 3);
        let out = plan_step(&cfg, &model, &chart, &[0.0, 0.5, 0.0], &u, &scene(), 4, 2);
        let p = sample_perturbations(&cfg, 3, 4, 2, 1);
        for t in 0..3 {
            assert_eq!(out.u_star.row(t), p.at(t));
        }
        assert_eq!(out.diagnostics.ess, 1.0);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let model = ChainModel::planar();
        let chart = AnalyticChart::new(&model).unwrap();
        let mut cfg = PlannerConfig {
            samples: 64,
            horizon: 10,
            sampling_mode: SamplingMode::PerStep,
            ..small_cfg()
        };
        let u = ControlSequence::zeros(10, 3);
        let a = plan_step(&cfg, &model, &chart, &[0.0, 0.5, 0.0], &u, &scene(), 5, 1);
        cfg.parallelism = Parallelism::Sequential;
        let b = plan_step(&cfg, &model, &chart, &[0.0, 0.5, 0.0], &u, &scene(), 5, 1);
        assert_eq!(a.u_star, b.u_star);
        assert_eq!(a.q_hat, b.q_hat);
    }

    #[test]
    fn vanilla_penalty_matches_residual() {
        let model = ChainModel::planar();
        let cfg = PlannerConfig {
            space_mode: SpaceMode::JointPenalty,
            weights: CostWeights {
                w_h: 1e3,
                ..CostWeights::default()
            },
            ..PlannerConfig::default()
        };
        let q = [2.0, -1.5, 1.0, 0.9, 1.6, -1.0];
        let goal = Transform::Se2(Se2::identity());
        let c = evaluate_cost(&cfg, &model, &q, &[0.0; 6], &goal, &[], false, &mut Vec::new());
        let h = crate::kinematics::constraint(&model, &q).unwrap().norm();
        assert!((c.penalty - 1e3 * h * h).abs() < 1e-9 * c.penalty);
        let on = crate::kinematics::planar_chart(&model, 0.0, 0.5, 0.0).unwrap();
        let c = evaluate_cost(&cfg, &model, &on, &[0.0; 6], &goal, &[], false, &mut Vec::new());
        assert!(c.penalty < 1e-20);
    }
}
