//! Sequential reference for one planner iteration, shared by the planner
//! tests and the acceptance suite.

use mcmppi_core::kinematics::ChainModel;
use mcmppi_core::manifold_codec::Decoder;
use mcmppi_core::mppi_planner::{
    evaluate_cost, sample_perturbations, ControlSequence, CostBreakdown, ObstaclePrediction, PlannerConfig,
    PlanningScene,
};

/// Straight-line MPPI iteration: one sample at a time, decode one state at a
/// time, sum the stage costs term by term, normalize, average.
#[allow(clippy::too_many_arguments)]
pub fn reference_plan(
    cfg: &PlannerConfig,
    model: &ChainModel,
    decoder: &dyn Decoder,
    z_c: &[f64],
    u_nom: &ControlSequence,
    scene: &PlanningScene,
    seed: u64,
    iteration: u64,
) -> (Vec<f64>, ControlSequence, Vec<f64>) {
    let m = z_c.len();
    let mut spheres = Vec::new();
    let mut costs = Vec::new();
    let mut perts = Vec::new();
    for k in 1..=cfg.samples {
        let pert = sample_perturbations(cfg, m, seed, iteration, k);
        let mut z = z_c.to_vec();
        let mut acc = CostBreakdown::default();
        for t in 0..cfg.horizon {
            let u: Vec<f64> = (0..m).map(|i| u_nom.row(t)[i] + pert.at(t)[i]).collect();
            for i in 0..m {
                z[i] += u[i] * cfg.dt;
            }
            let q = decoder.decode(&z);
            let obstacle_time = match cfg.prediction {
                ObstaclePrediction::Frozen => scene.time,
                ObstaclePrediction::Extrapolated => scene.time + (t + 1) as f64 * cfg.dt,
            };
            let obstacles: Vec<_> = scene
                .obstacles
                .iter()
                .map(|o| (o.position_at(obstacle_time), o.radius))
                .collect();
            let c = evaluate_cost(cfg, model, &q, &u, &scene.goal, &obstacles, t + 1 == cfg.horizon, &mut spheres);
            acc.track += c.track;
            acc.coll += c.coll;
            acc.reg += c.reg;
            acc.limit += c.limit;
            acc.neutral += c.neutral;
            acc.penalty += c.penalty;
        }
        costs.push(acc.total());
        perts.push(pert);
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = costs.iter().map(|c| (-(c - min) / cfg.lambda).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    let mut u_star = u_nom.clone();
    for (wk, pert) in w.iter().zip(&perts) {
        for t in 0..cfg.horizon {
            for i in 0..m {
                u_star.row_mut(t)[i] += wk * pert.at(t)[i];
            }
        }
    }
    let z_star: Vec<f64> = (0..m).map(|i| z_c[i] + u_star.row(0)[i] * cfg.dt).collect();
    (z_star, u_star, w)
}
