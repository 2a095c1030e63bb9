//! Closed-loop kinematic simulation of one episode.
//!
//! Time advances in integer executor ticks; the planner runs every
//! `dt_plan / dt_exec` ticks. Logged quantities depend only on the scenario,
//! the mode and the seed — wall-clock measurements are kept in a separate
//! [`EpisodeTiming`].

use crate::scenario::{ScenarioError, ScenarioSpec};
use mcmppi_core::geometry::Transform;
use mcmppi_core::kinematics::{
    constraint_norm, forward_kinematics, planar_chart, solve_tray_pose, ChainModel, Configuration,
    ModelKind,
};
use mcmppi_core::manifold_codec::Decoder;
use mcmppi_core::mppi_planner::{
    min_clearance, plan_step, vanilla_plan_step, ControlSequence, PlannerConfig, PlanningScene,
};
use mcmppi_core::qp_executor::{Executor, ExecutorConfig};
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Latent planning followed by the corrective QP.
    McMppi,
    /// Latent planning, decoded reference applied directly.
    LatentOnly,
    /// Joint-space planning with a constraint penalty.
    VanillaPenalty,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::McMppi, Mode::LatentOnly, Mode::VanillaPenalty];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::McMppi => "mc_mppi",
            Mode::LatentOnly => "latent_only",
            Mode::VanillaPenalty => "vanilla_penalty",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "mc_mppi" => Ok(Mode::McMppi),
            "latent_only" => Ok(Mode::LatentOnly),
            "vanilla_penalty" | "vanilla" => Ok(Mode::VanillaPenalty),
            _ => Err(format!("unknown mode {s:?} (expected mc_mppi, latent_only or vanilla_penalty)")),
        }
    }
}

/// Which decoder a latent mode plans through; selects the `[tuning.*]` table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Analytic,
    Learned,
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    InvalidCombination(String),
    #[error("start pose cannot be reached: {0}")]
    Start(String),
}

/// Per-planner-tick record. The final record carries the state at which the
/// episode ended and no plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub q: Vec<f64>,
    pub h_norm: f64,
    /// Tray position (m).
    pub tray_position: [f64; 3],
    pub position_error: f64,
    pub orientation_error: f64,
    pub clearance: f64,
    pub z_star: Option<Vec<f64>>,
    pub q_hat: Option<Vec<f64>>,
    /// Configuration reached at the end of this planner period.
    pub q_star: Option<Vec<f64>>,
    /// Largest ‖h‖ among the intermediate executor states of this period.
    pub h_exec_max: Option<f64>,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Success { t: f64 },
    Break { t: f64 },
    Collision { t: f64 },
    Timeout { t: f64 },
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success { .. })
    }

    pub fn time(&self) -> f64 {
        match *self {
            Outcome::Success { t } | Outcome::Break { t } | Outcome::Collision { t } | Outcome::Timeout { t } => t,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Success { .. } => "success",
            Outcome::Break { .. } => "break",
            Outcome::Collision { .. } => "collision",
            Outcome::Timeout { .. } => "timeout",
        }
    }
}

/// Wall-clock measurements, one entry per planner tick that planned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTiming {
    pub plan_ms: Vec<f64>,
    pub exec_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub dt_plan: f64,
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
    #[serde(skip)]
    pub timing: EpisodeTiming,
}

impl EpisodeLog {
    pub fn time_avg_h(&self) -> f64 {
        self.records.iter().map(|r| r.h_norm).sum::<f64>() / self.records.len() as f64
    }

    pub fn max_h(&self) -> f64 {
        self.records.iter().map(|r| r.h_norm).fold(0.0, f64::max)
    }

    pub fn min_clearance(&self) -> f64 {
        self.records.iter().map(|r| r.clearance).fold(f64::INFINITY, f64::min)
    }

    /// Largest ‖h‖ including the executor states between planner ticks.
    pub fn max_h_exec(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.h_norm.max(r.h_exec_max.unwrap_or(0.0)))
            .fold(0.0, f64::max)
    }

    /// Mean norm of the third difference of the planner references, per s³.
    pub fn reference_jerk(&self) -> f64 {
        let refs: Vec<&Vec<f64>> = self.records.iter().filter_map(|r| r.q_hat.as_ref()).collect();
        if refs.len() < 4 {
            return 0.0;
        }
        let dt3 = self.dt_plan.powi(3);
        let total: f64 = refs
            .windows(4)
            .map(|w| {
                (0..w[0].len())
                    .map(|i| {
                        let d = w[3][i] - 3.0 * w[2][i] + 3.0 * w[1][i] - w[0][i];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
                    / dt3
            })
            .sum();
        total / (refs.len() - 3) as f64
    }

    /// Parses the output of [`EpisodeLog::to_json_lines`]. Wall-clock timing
    /// is not part of the log and comes back empty.
    pub fn from_json_lines(text: &str) -> Result<Self, String> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (summary, body) = lines.split_last().ok_or("empty episode log")?;
        let records = body
            .iter()
            .map(|l| serde_json::from_str::<StepRecord>(l).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        #[derive(Deserialize)]
        struct Summary {
            scenario: String,
            mode: Mode,
            seed: u64,
            dt_plan: f64,
            outcome: Outcome,
        }
        let s: Summary = serde_json::from_str(summary).map_err(|e| e.to_string())?;
        if records.is_empty() {
            return Err("episode log has no records".into());
        }
        Ok(Self {
            scenario: s.scenario,
            mode: s.mode,
            seed: s.seed,
            dt_plan: s.dt_plan,
            records,
            outcome: s.outcome,
            timing: EpisodeTiming::default(),
        })
    }

    /// JSON-lines rendering: one record per line, then the outcome.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "scenario": self.scenario,
            "mode": self.mode,
            "seed": self.seed,
            "dt_plan": self.dt_plan,
            "outcome": self.outcome,
            "time_avg_h": self.time_avg_h(),
            "max_h": self.max_h(),
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Joint configuration holding the tray at `pose`.
pub fn configuration_for_pose(model: &ChainModel, pose: &Transform) -> Result<Configuration, EpisodeError> {
    match (model.kind, pose) {
        (ModelKind::Planar, Transform::Se2(t)) if model.joint_count() == 6 => {
            planar_chart(model, t.translation.x, t.translation.y, t.angle())
                .map_err(|e| EpisodeError::Start(e.to_string()))
        }
        _ => {
            let seed = model.home.clone().unwrap_or_else(|| model.neutral.clone());
            solve_tray_pose(model, pose, &seed, 1e-10, 200)
                .map(|o| o.q)
                .map_err(|e| EpisodeError::Start(e.to_string()))
        }
    }
}

/// Tray position and orientation error norms.
pub fn pose_errors(tray: &Transform, goal: &Transform) -> (f64, f64) {
    match tray.pose_error(goal) {
        Ok(e) => {
            let k = if e.len() == 3 { 1 } else { 3 };
            (e.rows(k, e.len() - k).norm(), e.rows(0, k).norm())
        }
        Err(_) => (f64::INFINITY, f64::INFINITY),
    }
}

/// Planner configuration for `mode` with the scenario's tuning applied.
pub fn planner_config(spec: &ScenarioSpec, mode: Mode, decoder: DecoderKind) -> PlannerConfig {
    let mut cfg = spec.planner.clone();
    cfg.dt = spec.dt_plan;
    match mode {
        Mode::VanillaPenalty => spec.tuning.vanilla.apply(&mut cfg),
        _ => match decoder {
            DecoderKind::Analytic => spec.tuning.analytic.apply(&mut cfg),
            DecoderKind::Learned => spec.tuning.learned.apply(&mut cfg),
        },
    }
    cfg
}

/// Extra knobs that are not part of the scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct EpisodeOptions {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
}

/// Runs one closed-loop episode.
pub fn run_episode(
    spec: &ScenarioSpec,
    mode: Mode,
    decoder: &dyn Decoder,
    decoder_kind: DecoderKind,
    opts: EpisodeOptions,
) -> Result<EpisodeLog, EpisodeError> {
    let model = spec.chain_model()?;
    if mode != Mode::VanillaPenalty && decoder.output_dim() != model.joint_count() {
        return Err(EpisodeError::InvalidCombination(format!(
            "decoder produces {} joints, model {} has {}",
            decoder.output_dim(),
            model.name,
            model.joint_count()
        )));
    }
    let seed = opts.seed.unwrap_or(spec.seed);
    let start = spec.start.to_transform(model.kind)?;
    let goal = spec.goal.to_transform(model.kind)?;
    let cfg = planner_config(spec, mode, decoder_kind);
    let mut exec_cfg: ExecutorConfig = spec.executor.clone();
    exec_cfg.dt = spec.dt_exec;

    let mut q = configuration_for_pose(&model, &start)?.0;
    let control_dim = match mode {
        Mode::VanillaPenalty => model.joint_count(),
        _ => decoder.latent_dim(),
    };
    cfg.validate(control_dim)
        .map_err(|e| EpisodeError::InvalidCombination(e.to_string()))?;
    let mut z_c = decoder.encode(&q);
    let mut u_nom = ControlSequence::zeros(cfg.horizon, control_dim);
    let mut executor = Executor::new(exec_cfg, &model, &q);
    let mut scene = PlanningScene {
        goal,
        obstacles: spec.obstacles.clone(),
        time: 0.0,
    };
    let per_plan = spec.exec_per_plan();
    let max_ticks = (spec.max_time / spec.dt_plan).round() as u64;
    let lag = if spec.lag_time_constant > 0.0 {
        spec.dt_exec / (spec.lag_time_constant + spec.dt_exec)
    } else {
        1.0
    };
    let mut records = Vec::new();
    let mut timing = EpisodeTiming::default();
    let mut obstacles_now = Vec::new();

    for tick in 0..=max_ticks {
        let t = tick as f64 * spec.dt_plan;
        obstacles_now.clear();
        obstacles_now.extend(spec.obstacles.iter().map(|o| (o.position_at(t), o.radius)));
        let h_norm = constraint_norm(&model, &q);
        let tray = forward_kinematics(&model, &q).tray;
        let (pos_err, ori_err) = pose_errors(&tray, &goal);
        let clearance = min_clearance(&model, &q, &obstacles_now);
        let outcome = if h_norm > spec.break_limit {
            Some(Outcome::Break { t })
        } else if clearance < 0.0 {
            Some(Outcome::Collision { t })
        } else if pos_err < spec.success.position && ori_err < spec.success.orientation {
            Some(Outcome::Success { t })
        } else if tick == max_ticks {
            Some(Outcome::Timeout { t })
        } else {
            None
        };
        let mut record = StepRecord {
            t,
            q: q.clone(),
            h_norm,
            tray_position: tray.position3().into(),
            position_error: pos_err,
            orientation_error: ori_err,
            clearance,
            z_star: None,
            q_hat: None,
            q_star: None,
            h_exec_max: None,
            fallbacks: executor.state.fallback_count,
        };
        if let Some(outcome) = outcome {
            records.push(record);
            return Ok(EpisodeLog {
                scenario: spec.name.clone(),
                mode,
                seed,
                dt_plan: spec.dt_plan,
                records,
                outcome,
                timing,
            });
        }

        scene.time = t;
        let plan_start = Instant::now();
        let plan = match mode {
            Mode::VanillaPenalty => vanilla_plan_step(&cfg, &model, &q, &u_nom, &scene, seed, tick),
            _ => plan_step(&cfg, &model, decoder, &z_c, &u_nom, &scene, seed, tick),
        };
        timing.plan_ms.push(plan_start.elapsed().as_secs_f64() * 1e3);
        u_nom = plan.u_shifted;
        z_c = plan.z_star.clone();

        let exec_start = Instant::now();
        let mut worst_exec: f64 = 0.0;
        let mut h_exec_max: f64 = 0.0;
        match mode {
            Mode::McMppi => {
                let task_goal = forward_kinematics(&model, &plan.q_hat).tray;
                for _ in 0..per_plan {
                    let step_start = Instant::now();
                    let (q_star, _) = executor.execute_step(&model, &q, &plan.q_hat, &task_goal);
                    worst_exec = worst_exec.max(step_start.elapsed().as_secs_f64() * 1e3);
                    apply(&mut q, &q_star, lag);
                    h_exec_max = h_exec_max.max(constraint_norm(&model, &q));
                }
            }
            Mode::LatentOnly | Mode::VanillaPenalty => {
                let mut target = plan.q_hat.0.clone();
                model.clamp_to_bounds(&mut target);
                for _ in 0..per_plan {
                    apply(&mut q, &target, lag);
                    h_exec_max = h_exec_max.max(constraint_norm(&model, &q));
                }
                worst_exec = exec_start.elapsed().as_secs_f64() * 1e3;
            }
        }
        timing.exec_ms.push(worst_exec);
        record.z_star = Some(plan.z_star);
        record.q_hat = Some(plan.q_hat.0);
        record.q_star = Some(q.clone());
        record.h_exec_max = Some(h_exec_max);
        record.fallbacks = executor.state.fallback_count;
        records.push(record);
    }
    unreachable!("the last tick always ends the episode")
}

fn apply(q: &mut [f64], target: &[f64], gain: f64) {
    for (v, t) in q.iter_mut().zip(target) {
        *v += gain * (t - *v);
    }
}
