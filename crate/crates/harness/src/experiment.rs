//! Multi-trial experiment suites and their aggregate reports.
//!
//! Reports contain only quantities derived from the deterministic episode
//! logs, so the same template, mode matrix and seed base always serialize to
//! the same bytes. Wall-clock percentiles live in a separate [`TimingSummary`].

use crate::episode::{configuration_for_pose, run_episode, DecoderKind, EpisodeError, EpisodeLog, EpisodeOptions, Mode};
use crate::scenario::ScenarioSpec;
use mcmppi_core::kinematics::ChainModel;
use mcmppi_core::manifold_codec::Decoder;
use mcmppi_core::mppi_planner::{min_clearance, SamplingMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed of trial `i` under seed base `base`.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(trial as u64)
}

/// Aggregates of one mode over all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Time-averaged ‖h‖ of every trial, in trial order.
    pub avg_h: Vec<f64>,
    pub avg_h_mean: f64,
    pub avg_h_std: f64,
    /// Episode-max ‖h‖ of every trial.
    pub max_h: Vec<f64>,
    /// Smallest obstacle or self clearance of every trial (m).
    pub min_clearance: Vec<f64>,
    /// Outcome label and time of every trial.
    pub outcomes: Vec<(String, f64)>,
    /// Convergence times of the successful trials.
    pub convergence_times: Vec<f64>,
}

impl ModeSummary {
    pub fn from_logs(mode: Mode, logs: &[&EpisodeLog]) -> Self {
        let avg_h: Vec<f64> = logs.iter().map(|l| l.time_avg_h()).collect();
        let (mean, std) = mean_std(&avg_h);
        let successes = logs.iter().filter(|l| l.outcome.is_success()).count();
        Self {
            mode,
            trials: logs.len(),
            successes,
            success_rate: successes as f64 / logs.len().max(1) as f64,
            avg_h_mean: mean,
            avg_h_std: std,
            avg_h,
            max_h: logs.iter().map(|l| l.max_h()).collect(),
            min_clearance: logs.iter().map(|l| l.min_clearance()).collect(),
            outcomes: logs
                .iter()
                .map(|l| (l.outcome.label().to_string(), l.outcome.time()))
                .collect(),
            convergence_times: logs
                .iter()
                .filter(|l| l.outcome.is_success())
                .map(|l| l.outcome.time())
                .collect(),
        }
    }
}

/// Wall-clock percentiles (ms) pooled over every planner tick of a mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mode: Option<Mode>,
    pub plan_p50: f64,
    pub plan_p99: f64,
    pub exec_p50: f64,
    pub exec_p99: f64,
    pub cycles: usize,
}

impl TimingSummary {
    pub fn from_logs<'a>(mode: Option<Mode>, logs: impl IntoIterator<Item = &'a EpisodeLog>) -> Self {
        let mut plan = Vec::new();
        let mut exec = Vec::new();
        for l in logs {
            plan.extend_from_slice(&l.timing.plan_ms);
            exec.extend_from_slice(&l.timing.exec_ms);
        }
        Self {
            mode,
            plan_p50: percentile(&mut plan, 0.50),
            plan_p99: percentile(&mut plan, 0.99),
            exec_p50: percentile(&mut exec, 0.50),
            exec_p99: percentile(&mut exec, 0.99),
            cycles: plan.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed_base: u64,
    pub trials: usize,
    pub modes: Vec<ModeSummary>,
    #[serde(skip)]
    pub timing: Vec<TimingSummary>,
    /// Logs in (trial, mode) order.
    #[serde(skip)]
    pub logs: Vec<EpisodeLog>,
}

impl ExperimentReport {
    fn build(scenario: &str, seed_base: u64, trials: usize, modes: &[Mode], logs: Vec<EpisodeLog>) -> Self {
        let summaries = summarize(modes, &logs);
        let timing = modes
            .iter()
            .map(|&m| TimingSummary::from_logs(Some(m), logs.iter().filter(|l| l.mode == m)))
            .collect();
        Self {
            scenario: scenario.to_string(),
            seed_base,
            trials,
            modes: summaries,
            timing,
            logs,
        }
    }

    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|s| s.mode == mode)
    }

    /// Logs of one mode in trial order.
    pub fn logs_for(&self, mode: Mode) -> Vec<&EpisodeLog> {
        self.logs.iter().filter(|l| l.mode == mode).collect()
    }

    /// True when the aggregates equal a recomputation from the retained logs.
    pub fn consistent_with_logs(&self) -> bool {
        let modes: Vec<Mode> = self.modes.iter().map(|s| s.mode).collect();
        summarize(&modes, &self.logs) == self.modes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn summarize(modes: &[Mode], logs: &[EpisodeLog]) -> Vec<ModeSummary> {
    modes
        .iter()
        .map(|&m| {
            let of_mode: Vec<&EpisodeLog> = logs.iter().filter(|l| l.mode == m).collect();
            ModeSummary::from_logs(m, &of_mode)
        })
        .collect()
}

/// Clearance between the start configuration and the obstacles at `t = 0`
/// that a randomized draw must keep (m).
pub const START_CLEARANCE: f64 = 0.05;

/// Draws per trial before the last draw is accepted as is.
const MAX_DRAWS: usize = 1000;

/// The spec a trial runs: the template itself when it declares no ranges,
/// otherwise a draw seeded by the trial seed. Draws whose start pose is
/// unreachable or starts within [`START_CLEARANCE`] of an obstacle are
/// redrawn.
pub fn trial_spec(template: &ScenarioSpec, seed: u64) -> ScenarioSpec {
    if template.randomize == Default::default() {
        return template.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7472_6961_6c73);
    let model = template.chain_model().ok();
    let mut spec = template.randomized(&mut rng);
    for _ in 1..MAX_DRAWS {
        if model.as_ref().map_or(true, |m| start_is_clear(m, &spec)) {
            break;
        }
        spec = template.randomized(&mut rng);
    }
    spec
}

fn start_is_clear(model: &ChainModel, spec: &ScenarioSpec) -> bool {
    let reachable = |pose: &crate::scenario::PoseSpec| {
        pose.to_transform(model.kind)
            .ok()
            .and_then(|t| configuration_for_pose(model, &t).ok())
    };
    let (Some(q), Some(_)) = (reachable(&spec.start), reachable(&spec.goal)) else {
        return false;
    };
    let obstacles: Vec<_> = spec.obstacles.iter().map(|o| (o.position_at(0.0), o.radius)).collect();
    min_clearance(model, &q, &obstacles) >= START_CLEARANCE
}

/// Runs every (trial, mode) cell. Trial `i` uses seed `seed_base + i` for
/// both the scenario draw and the planner, so modes are paired per trial.
pub fn run_experiment(
    template: &ScenarioSpec,
    modes: &[Mode],
    trials: usize,
    seed_base: u64,
    decoder: &dyn Decoder,
    decoder_kind: DecoderKind,
) -> Result<ExperimentReport, EpisodeError> {
    let trials = trials.max(1);
    let mut logs = Vec::with_capacity(trials * modes.len());
    for i in 0..trials {
        let seed = trial_seed(seed_base, i);
        let spec = trial_spec(template, seed);
        for &mode in modes {
            logs.push(run_episode(&spec, mode, decoder, decoder_kind, EpisodeOptions { seed: Some(seed) })?);
        }
    }
    Ok(ExperimentReport::build(&template.name, seed_base, trials, modes, logs))
}

/// One paired seed of the sampling ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPair {
    pub seed: u64,
    pub single_outcome: String,
    pub per_step_outcome: String,
    /// Convergence time; failed episodes are censored at the episode end.
    pub single_time: f64,
    pub per_step_time: f64,
    pub single_avg_h: f64,
    pub per_step_avg_h: f64,
    pub single_jerk: f64,
    pub per_step_jerk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingComparison {
    pub scenario: String,
    pub pairs: Vec<SamplingPair>,
    /// Median over pairs of per-step time divided by single-instance time.
    pub median_time_ratio: f64,
    /// Pairs where single-instance sampling gave the smoother reference.
    pub smoother_single: usize,
}

/// Runs mc_mppi with single-instance and per-step innovations on paired seeds.
pub fn compare_sampling_modes(
    template: &ScenarioSpec,
    trials: usize,
    seed_base: u64,
    decoder: &dyn Decoder,
    decoder_kind: DecoderKind,
) -> Result<SamplingComparison, EpisodeError> {
    let mut pairs = Vec::new();
    for i in 0..trials.max(1) {
        let seed = trial_seed(seed_base, i);
        let base = trial_spec(template, seed);
        let run = |mode: SamplingMode| {
            let mut spec = base.clone();
            spec.planner.sampling_mode = mode;
            run_episode(&spec, Mode::McMppi, decoder, decoder_kind, EpisodeOptions { seed: Some(seed) })
        };
        let single = run(SamplingMode::SingleInstance)?;
        let per_step = run(SamplingMode::PerStep)?;
        pairs.push(SamplingPair {
            seed,
            single_outcome: single.outcome.label().into(),
            per_step_outcome: per_step.outcome.label().into(),
            single_time: single.outcome.time(),
            per_step_time: per_step.outcome.time(),
            single_avg_h: single.time_avg_h(),
            per_step_avg_h: per_step.time_avg_h(),
            single_jerk: single.reference_jerk(),
            per_step_jerk: per_step.reference_jerk(),
        });
    }
    let mut ratios: Vec<f64> = pairs.iter().map(|p| p.per_step_time / p.single_time.max(1e-9)).collect();
    let median_time_ratio = percentile(&mut ratios, 0.5);
    let smoother_single = pairs.iter().filter(|p| p.single_jerk < p.per_step_jerk).count();
    Ok(SamplingComparison {
        scenario: template.name.clone(),
        pairs,
        median_time_ratio,
        smoother_single,
    })
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

/// Linear-interpolated percentile, `p ∈ [0, 1]`; sorts `v` in place.
pub fn percentile(v: &mut [f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
