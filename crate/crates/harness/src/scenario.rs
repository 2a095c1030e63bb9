//! Scenario files.
//!
//! A scenario is a TOML document with `schema_version = 1`:
//!
//! ```toml
//! schema_version = 1
//! name = "planar-point-to-point"
//! model = "planar"              # "planar", "spatial" or a model file path
//! seed = 0
//! max_time = 6.0                # s of simulated time
//! dt_plan = 0.01                # planner period (s)
//! dt_exec = 0.002               # executor period (s)
//! break_limit = 0.05            # grasp counts as broken above this ‖h‖
//!
//! [start]                       # tray pose; planar: translation [x, y] + angle
//! translation = [0.12, 0.56]    # spatial: translation [x, y, z] + rpy
//! angle = 0.0
//! [goal]
//! translation = [-0.12, 0.44]
//! angle = 0.0
//! [success]
//! position = 0.01               # m
//! orientation = 0.01            # rad
//!
//! [[obstacles]]
//! center = [0.0, 0.62, 0.0]
//! radius = 0.03
//! motion = { type = "linear", axis = [1.0, 0.0, 0.0], speed = 0.1, start_time = 0.0 }
//!
//! [planner]                     # planner settings, see PlannerConfig
//! [planner.weights]             # cost weights, see CostWeights
//! [executor]                    # corrective QP settings (dt is taken from dt_exec)
//! [tuning.analytic]             # per-decoder overrides of sigma / lambda / ...
//! [tuning.learned]
//! [tuning.vanilla]
//! [randomize]                   # ranges sampled by run_experiment
//! ```

use mcmppi_core::geometry::{Se2, Se3, Transform};
use mcmppi_core::kinematics::{ChainModel, ModelKind};
use mcmppi_core::mppi_planner::{Obstacle, ObstacleMotion, PlannerConfig};
use mcmppi_core::qp_executor::ExecutorConfig;
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Scenario files shipped with the crate, by name.
pub const BUILTIN: &[(&str, &str)] = &[
    ("point-to-point", include_str!("../scenarios/point-to-point.toml")),
    ("hard-constraint", include_str!("../scenarios/hard-constraint.toml")),
    ("static-obstacle", include_str!("../scenarios/static-obstacle.toml")),
    ("dynamic-obstacle", include_str!("../scenarios/dynamic-obstacle.toml")),
];

/// Text of a shipped scenario.
pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Tray pose as written in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub translation: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
}

impl PoseSpec {
    pub fn planar(x: f64, y: f64, angle: f64) -> Self {
        Self {
            translation: vec![x, y],
            angle: Some(angle),
            rpy: None,
        }
    }

    pub fn to_transform(&self, kind: ModelKind) -> Result<Transform, ScenarioError> {
        match (kind, self.translation.len()) {
            (ModelKind::Planar, 2) if self.rpy.is_none() => Ok(Transform::Se2(Se2::new(
                self.angle.unwrap_or(0.0),
                Vector2::new(self.translation[0], self.translation[1]),
            ))),
            (ModelKind::Spatial, 3) if self.angle.is_none() => {
                let [r, p, y] = self.rpy.unwrap_or([0.0; 3]);
                Ok(Transform::Se3(Se3::from_rpy(
                    r,
                    p,
                    y,
                    Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
                )))
            }
            _ => Err(ScenarioError::Invalid(
                "planar poses need translation [x, y] + angle, spatial poses translation [x, y, z] + rpy".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessThresholds {
    pub position: f64,
    pub orientation: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            position: 0.01,
            orientation: 0.01,
        }
    }
}

/// Partial planner settings applied on top of `[planner]` for one decoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerOverride {
    pub sigma: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub r_diag: Option<Vec<f64>>,
    pub velocity_limit: Option<f64>,
    pub w_h: Option<f64>,
    pub w_track: Option<f64>,
    pub w_neutral: Option<f64>,
}

impl PlannerOverride {
    pub fn apply(&self, cfg: &mut PlannerConfig) {
        if let Some(v) = &self.sigma {
            cfg.sigma = v.clone();
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = &self.r_diag {
            cfg.weights.r_diag = v.clone();
        }
        if let Some(v) = self.velocity_limit {
            cfg.weights.velocity_limit = v;
        }
        if let Some(v) = self.w_h {
            cfg.weights.w_h = v;
        }
        if let Some(v) = self.w_track {
            cfg.weights.w_track = v;
        }
        if let Some(v) = self.w_neutral {
            cfg.weights.w_neutral = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tuning {
    #[serde(default)]
    pub analytic: PlannerOverride,
    #[serde(default)]
    pub learned: PlannerOverride,
    #[serde(default)]
    pub vanilla: PlannerOverride,
}

/// A moving obstacle drawn per trial. It travels at constant speed along
/// one of `axes` on a lane through the start–goal midpoint and starts
/// `start_distance` before the point where it passes that midpoint.
///
/// Lanes along a horizontal axis are shifted vertically by `vertical_lane`
/// (planar: y, spatial: z) and are travelled in a random direction. A lane
/// along the planar vertical axis `"y"` is shifted sideways in x by
/// `side_lane`, with a random sign, and always descends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingObstacleRange {
    pub radius: f64,
    /// Axis names, any of "x", "y".
    pub axes: Vec<String>,
    pub speeds: Vec<f64>,
    pub vertical_lane: [f64; 2],
    #[serde(default)]
    pub side_lane: [f64; 2],
    pub start_distance: [f64; 2],
}

/// Uniform ranges sampled by `run_experiment`; every range is `[lo, hi]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Randomize {
    pub start_x: Option<[f64; 2]>,
    pub start_y: Option<[f64; 2]>,
    pub start_angle: Option<[f64; 2]>,
    pub goal_x: Option<[f64; 2]>,
    pub goal_y: Option<[f64; 2]>,
    pub goal_angle: Option<[f64; 2]>,
    pub moving_obstacle: Option<MovingObstacleRange>,
}

fn default_dt_plan() -> f64 {
    0.01
}
fn default_dt_exec() -> f64 {
    0.002
}
fn default_break() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: String,
    #[serde(default)]
    pub seed: u64,
    pub max_time: f64,
    #[serde(default = "default_dt_plan")]
    pub dt_plan: f64,
    #[serde(default = "default_dt_exec")]
    pub dt_exec: f64,
    #[serde(default = "default_break")]
    pub break_limit: f64,
    /// First-order tracking lag of the simulated position controller (s); 0 disables it.
    #[serde(default)]
    pub lag_time_constant: f64,
    pub start: PoseSpec,
    pub goal: PoseSpec,
    #[serde(default)]
    pub success: SuccessThresholds,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub executor: ExecutorConfig,
    #[serde(default)]
    pub tuning: Tuning,
    #[serde(default)]
    pub randomize: Randomize,
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |s: String| Err(ScenarioError::Invalid(s));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if !(self.success.position > 0.0 && self.success.orientation > 0.0) {
            return bad("success thresholds must be positive".into());
        }
        if !(self.max_time > 0.0 && self.dt_plan > 0.0 && self.dt_exec > 0.0 && self.break_limit > 0.0) {
            return bad("times and break limit must be positive".into());
        }
        let ratio = self.dt_plan / self.dt_exec;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad("dt_plan must be an integer multiple of dt_exec".into());
        }
        if self.lag_time_constant < 0.0 {
            return bad("lag_time_constant must be non-negative".into());
        }
        for o in &self.obstacles {
            if !(o.radius > 0.0) {
                return bad("obstacle radius must be positive".into());
            }
        }
        if let Some(m) = &self.randomize.moving_obstacle {
            if !(m.radius > 0.0) || m.speeds.is_empty() || m.axes.is_empty() {
                return bad("moving obstacle needs a radius, speeds and axes".into());
            }
            if m.axes.iter().any(|a| a != "x" && a != "y") {
                return bad("moving obstacle axes must be \"x\" or \"y\"".into());
            }
        }
        let model = self.chain_model()?;
        self.start.to_transform(model.kind)?;
        self.goal.to_transform(model.kind)?;
        let mut exec = self.executor.clone();
        exec.dt = self.dt_exec;
        exec.validate().map_err(ScenarioError::Invalid)?;
        Ok(())
    }

    pub fn chain_model(&self) -> Result<ChainModel, ScenarioError> {
        ChainModel::resolve(&self.model).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    /// Executor periods per planner period.
    pub fn exec_per_plan(&self) -> usize {
        (self.dt_plan / self.dt_exec).round() as usize
    }

    /// Draws a trial variant from the `[randomize]` ranges.
    pub fn randomized(&self, rng: &mut impl Rng) -> ScenarioSpec {
        let mut s = self.clone();
        let r = &self.randomize;
        let draw = |rng: &mut dyn rand::RngCore, range: Option<[f64; 2]>, keep: f64| match range {
            Some([lo, hi]) if hi > lo => rng.gen_range(lo..=hi),
            Some([lo, _]) => lo,
            None => keep,
        };
        let (sx, sy, sa) = (s.start.translation[0], s.start.translation[1], s.start.angle.unwrap_or(0.0));
        let (gx, gy, ga) = (s.goal.translation[0], s.goal.translation[1], s.goal.angle.unwrap_or(0.0));
        s.start.translation[0] = draw(rng, r.start_x, sx);
        s.start.translation[1] = draw(rng, r.start_y, sy);
        if s.start.angle.is_some() || r.start_angle.is_some() {
            s.start.angle = Some(draw(rng, r.start_angle, sa));
        }
        s.goal.translation[0] = draw(rng, r.goal_x, gx);
        s.goal.translation[1] = draw(rng, r.goal_y, gy);
        if s.goal.angle.is_some() || r.goal_angle.is_some() {
            s.goal.angle = Some(draw(rng, r.goal_angle, ga));
        }
        if let Some(m) = &r.moving_obstacle {
            let axis = &m.axes[rng.gen_range(0..m.axes.len())];
            let speed = m.speeds[rng.gen_range(0..m.speeds.len())];
            let spatial = s.start.translation.len() == 3;
            let mut mid = [0.0; 3];
            for (i, c) in mid.iter_mut().enumerate().take(s.start.translation.len()) {
                *c = 0.5 * (s.start.translation[i] + s.goal.translation[i]);
            }
            let vertical = if spatial { 2 } else { 1 };
            let along = if axis == "x" { 0 } else { 1 };
            if along == vertical {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                mid[0] += side * draw(rng, Some(m.side_lane), 0.0);
            } else {
                mid[vertical] += draw(rng, Some(m.vertical_lane), 0.0);
            }
            // the arms fill the space under the tray, so vertical lanes
            // always descend from above
            let dir = if along == vertical || rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            let distance = draw(rng, Some(m.start_distance), 0.0);
            let mut axis_v = [0.0; 3];
            axis_v[along] = dir;
            mid[along] -= dir * distance;
            s.obstacles.push(Obstacle {
                center: mid,
                radius: m.radius,
                motion: ObstacleMotion::Linear {
                    axis: axis_v,
                    speed,
                    start_time: 0.0,
                },
            });
        }
        s.randomize = Randomize::default();
        s
    }
}
