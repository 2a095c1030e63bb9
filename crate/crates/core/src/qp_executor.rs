//! Single-step corrective QP.
//!
//! Given the measured configuration `q_c` and the planner reference `q̂`, the
//! executor solves for a joint velocity `q̇` that tracks `q̂`, pulls the task
//! frame towards its goal, shrinks the constraint residual at rate `α`
//! through `J_h q̇ = −α h(q_c)`, and keeps `q_c + q̇·dt` inside the joint
//! bounds. The QP is solved by a dual active-set method in the style of
//! Goldfarb and Idnani.

use crate::geometry::Transform;
use crate::kinematics::{
    constraint, constraint_jacobian, constraint_norm, task_jacobian, task_pose, ChainModel,
    Configuration, KinematicsError, TaskFrame,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// `min ½ xᵀHx + gᵀx  s.t.  A_eq x = b_eq,  lo ≤ x ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("active-set iterations exhausted ({0})")]
    MaxIterations(usize),
    #[error("Hessian is not positive definite")]
    NotConvex,
}

/// Bound at which a variable sits in the final active set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveBound {
    pub index: usize,
    pub upper: bool,
}

/// Optimality residuals of a returned solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖Hx + g + A_eqᵀν + μ‖∞` with bound multipliers `μ`.
    pub stationarity: f64,
    pub equality: f64,
    /// Largest bound violation.
    pub bounds: f64,
    /// Largest `|μ_i · slack_i|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity < tol && self.equality < tol && self.bounds < tol && self.complementarity < tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub active: Vec<ActiveBound>,
    /// Equality multipliers `ν` in `Hx + g + A_eqᵀν + μ = 0`.
    pub eq_multipliers: DVector<f64>,
    /// Signed bound multipliers `μ` (negative at lower, positive at upper bounds).
    pub bound_multipliers: DVector<f64>,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

/// A constraint `nᵀx ≥ b` (or `= b`) in the working set.
#[derive(Debug, Clone, Copy)]
enum Row {
    Eq(usize),
    Lower(usize),
    Upper(usize),
}

impl Row {
    fn normal(&self, p: &QpProblem) -> DVector<f64> {
        let n = p.dim();
        match *self {
            Row::Eq(i) => p.a_eq.row(i).transpose(),
            Row::Lower(i) => {
                let mut v = DVector::zeros(n);
                v[i] = 1.0;
                v
            }
            Row::Upper(i) => {
                let mut v = DVector::zeros(n);
                v[i] = -1.0;
                v
            }
        }
    }

    fn slack(&self, p: &QpProblem, x: &DVector<f64>) -> f64 {
        match *self {
            Row::Eq(i) => p.a_eq.row(i).dot(&x.transpose()) - p.b_eq[i],
            Row::Lower(i) => x[i] - p.lo[i],
            Row::Upper(i) => p.hi[i] - x[i],
        }
    }
}

/// Solves `[H Cᵀ; C 0] [z; r] = [rhs; 0]` for the working-set normals `C`.
fn kkt_direction(h: &DMatrix<f64>, normals: &[DVector<f64>], rhs: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let a = normals.len();
    let mut k = DMatrix::zeros(n + a, n + a);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (j, c) in normals.iter().enumerate() {
        k.view_mut((0, n + j), (n, 1)).copy_from(c);
        k.view_mut((n + j, 0), (1, n)).copy_from(&c.transpose());
    }
    let mut b = DVector::zeros(n + a);
    b.rows_mut(0, n).copy_from(rhs);
    let sol = k.lu().solve(&b)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, a).into_owned()))
}

/// Dual active-set solve. Equalities enter the working set first and are
/// never dropped; bound constraints are added most-violated first.
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    let n = p.dim();
    if p.lo.iter().zip(p.hi.iter()).any(|(l, h)| l > h) {
        return Err(QpError::Infeasible);
    }
    let chol = p.h.clone().cholesky().ok_or(QpError::NotConvex)?;
    let mut x = -chol.solve(&p.g);
    let mut rows: Vec<Row> = Vec::new();
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut iterations = 0;

    // equalities: full steps with unrestricted multipliers
    for i in 0..p.a_eq.nrows() {
        let row = Row::Eq(i);
        let np = row.normal(p);
        let s = row.slack(p, &x);
        let (z, r) = kkt_direction(&p.h, &normals, &np).ok_or(QpError::Infeasible)?;
        let zn = z.dot(&np);
        if zn <= 1e-14 * np.norm_squared().max(1e-300) {
            // linearly dependent on the equalities already in the working set
            if s.abs() > tol {
                return Err(QpError::Infeasible);
            }
            continue;
        }
        let t = -s / zn;
        x += t * &z;
        for (m, rj) in mult.iter_mut().zip(r.iter()) {
            *m -= t * rj;
        }
        rows.push(row);
        normals.push(np);
        mult.push(t);
        iterations += 1;
    }
    let n_eq = rows.len();

    loop {
        // most violated bound
        let mut worst: Option<(Row, f64)> = None;
        for i in 0..n {
            for row in [Row::Lower(i), Row::Upper(i)] {
                let s = row.slack(p, &x);
                let scale = 1.0 + match row {
                    Row::Lower(_) => p.lo[i].abs(),
                    _ => p.hi[i].abs(),
                };
                if s < -1e-13 * scale && worst.map_or(true, |(_, w)| s < w) {
                    worst = Some((row, s));
                }
            }
        }
        let Some((row_p, _)) = worst else { break };
        let np = row_p.normal(p);
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            let (z, r) = kkt_direction(&p.h, &normals, &np).ok_or(QpError::Infeasible)?;
            let zn = z.dot(&np);
            let s = row_p.slack(p, &x);
            let full = if zn > 1e-14 { -s / zn } else { f64::INFINITY };
            let mut partial = f64::INFINITY;
            let mut block = None;
            for j in n_eq..rows.len() {
                if r[j] > 1e-14 {
                    let t = mult[j] / r[j];
                    if t < partial {
                        partial = t;
                        block = Some(j);
                    }
                }
            }
            if full.is_infinite() && partial.is_infinite() {
                return Err(QpError::Infeasible);
            }
            let t = full.min(partial);
            if full.is_finite() {
                x += t * &z;
            }
            for (m, rj) in mult.iter_mut().zip(r.iter()) {
                *m -= t * rj;
            }
            u_p += t;
            if t == full {
                rows.push(row_p);
                normals.push(np.clone());
                mult.push(u_p);
                break;
            }
            let j = block.unwrap();
            rows.remove(j);
            normals.remove(j);
            mult.remove(j);
        }
    }

    let mut nu = DVector::zeros(p.a_eq.nrows());
    let mut mu = DVector::zeros(n);
    let mut active = Vec::new();
    for (row, m) in rows.iter().zip(&mult) {
        match *row {
            Row::Eq(i) => nu[i] = -m,
            Row::Lower(i) => {
                mu[i] -= m;
                active.push(ActiveBound { index: i, upper: false });
            }
            Row::Upper(i) => {
                mu[i] += m;
                active.push(ActiveBound { index: i, upper: true });
            }
        }
    }
    let kkt = kkt_residuals(p, &x, &nu, &mu);
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        active,
        eq_multipliers: nu,
        bound_multipliers: mu,
        iterations,
        kkt,
    })
}

/// Residuals of the optimality conditions at `(x, ν, μ)`.
pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, nu: &DVector<f64>, mu: &DVector<f64>) -> KktResiduals {
    let stat = &p.h * x + &p.g + p.a_eq.transpose() * nu + mu;
    let eq = &p.a_eq * x - &p.b_eq;
    let mut bounds: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..p.dim() {
        bounds = bounds.max(p.lo[i] - x[i]).max(x[i] - p.hi[i]);
        // μ_i < 0 pairs with the lower bound, μ_i > 0 with the upper bound
        let slack = if mu[i] < 0.0 { x[i] - p.lo[i] } else { p.hi[i] - x[i] };
        comp = comp.max((mu[i] * slack).abs());
    }
    KktResiduals {
        stationarity: stat.amax(),
        equality: if eq.is_empty() { 0.0 } else { eq.amax() },
        bounds: bounds.max(0.0),
        complementarity: comp,
    }
}

// --------------------------------------------------------------- executor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    /// Constraint decay rate α (1/s).
    pub alpha: f64,
    pub w_task: f64,
    /// Task proportional gain (1/s).
    pub kp_task: f64,
    pub dt: f64,
    pub task_frame: TaskFrame,
    /// Hessian regularization ε.
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            w_task: 0.0,
            kp_task: 0.0,
            dt: 0.01,
            task_frame: TaskFrame::TrayCenter,
            epsilon: 1e-9,
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0) || self.alpha * self.dt > 1.0 {
            return Err("alpha must be positive with alpha·dt ≤ 1".into());
        }
        if !(self.dt > 0.0) || self.w_task < 0.0 || self.kp_task < 0.0 || self.epsilon < 0.0 {
            return Err("dt must be positive and gains non-negative".into());
        }
        Ok(())
    }
}

/// Builds the QP from its ingredients; `j_task` may have zero rows.
#[allow(clippy::too_many_arguments)]
pub fn assemble_from_parts(
    cfg: &ExecutorConfig,
    q_c: &[f64],
    q_hat: &[f64],
    lower: &[f64],
    upper: &[f64],
    h: &DVector<f64>,
    j_h: &DMatrix<f64>,
    j_task: &DMatrix<f64>,
    xdot_task: &DVector<f64>,
) -> QpProblem {
    let n = q_c.len();
    let qdot_ref = DVector::from_iterator(n, q_c.iter().zip(q_hat).map(|(c, h)| (h - c) / cfg.dt));
    let jt = j_task.transpose();
    let hess = 2.0 * (DMatrix::identity(n, n) * (1.0 + cfg.epsilon) + cfg.w_task * &jt * j_task);
    let g = -2.0 * (&qdot_ref + cfg.w_task * &jt * xdot_task);
    QpProblem {
        h: hess,
        g,
        a_eq: j_h.clone(),
        b_eq: -cfg.alpha * h,
        lo: DVector::from_iterator(n, lower.iter().zip(q_c).map(|(l, c)| (l - c) / cfg.dt)),
        hi: DVector::from_iterator(n, upper.iter().zip(q_c).map(|(u, c)| (u - c) / cfg.dt)),
    }
}

/// Assembles the corrective QP at `q_c` for reference `q_hat`.
pub fn assemble_qp(
    cfg: &ExecutorConfig,
    model: &ChainModel,
    q_c: &[f64],
    q_hat: &[f64],
    task_goal: &Transform,
) -> Result<QpProblem, KinematicsError> {
    let h = constraint(model, q_c)?.values;
    let j_h = constraint_jacobian(model, q_c)?;
    let (j_task, xdot) = if cfg.w_task > 0.0 {
        let j = task_jacobian(model, q_c, cfg.task_frame)?;
        let e = task_pose(model, q_c, cfg.task_frame).pose_error(task_goal)?;
        (j, -cfg.kp_task * e)
    } else {
        (DMatrix::zeros(0, q_c.len()), DVector::zeros(0))
    };
    Ok(assemble_from_parts(cfg, q_c, q_hat, &model.lower, &model.upper, &h, &j_h, &j_task, &xdot))
}

/// Executor memory across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorState {
    pub q_prev: Configuration,
    pub fallback_count: usize,
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorReport {
    pub h_before: f64,
    /// `‖h + J_h q̇ dt‖` predicted by the linearization.
    pub h_predicted: f64,
    /// `‖h(q*)‖` from the full nonlinear residual.
    pub h_after: f64,
    pub task_error: f64,
    pub iterations: usize,
    pub active_set_size: usize,
    pub fallback: bool,
    /// Wall-clock solve time; excluded from deterministic comparisons.
    pub solve_ms: f64,
}

/// Hook applied to every assembled problem before solving (testing aid).
pub type ProblemHook = Box<dyn Fn(&mut QpProblem) + Send + Sync>;

pub struct Executor {
    pub cfg: ExecutorConfig,
    pub state: ExecutorState,
    hook: Option<ProblemHook>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("cfg", &self.cfg)
            .field("state", &self.state)
            .field("hook", &self.hook.is_some())
            .finish()
    }
}

impl Executor {
    /// `q_init` must lie within the joint bounds; it seeds the fallback.
    pub fn new(cfg: ExecutorConfig, model: &ChainModel, q_init: &[f64]) -> Self {
        let mut q = q_init.to_vec();
        model.clamp_to_bounds(&mut q);
        Self {
            cfg,
            state: ExecutorState {
                q_prev: Configuration(q),
                fallback_count: 0,
            },
            hook: None,
        }
    }

    pub fn set_hook(&mut self, hook: ProblemHook) {
        self.hook = Some(hook);
    }

    /// One corrective step. Any assembly or solver failure returns the
    /// previous output and bumps the fallback counter.
    pub fn execute_step(
        &mut self,
        model: &ChainModel,
        q_c: &[f64],
        q_hat: &[f64],
        task_goal: &Transform,
    ) -> (Configuration, ExecutorReport) {
        let start = Instant::now();
        let h_before = constraint_norm(model, q_c);
        let task_error = task_pose(model, q_c, self.cfg.task_frame)
            .pose_error(task_goal)
            .map(|e| e.norm())
            .unwrap_or(f64::INFINITY);
        let solved = assemble_qp(&self.cfg, model, q_c, q_hat, task_goal)
            .ok()
            .and_then(|mut p| {
                if let Some(hook) = &self.hook {
                    hook(&mut p);
                }
                solve_qp(&p, self.cfg.tol, self.cfg.max_iter).ok().map(|s| (p, s))
            });
        let (q_star, report) = match solved {
            Some((p, sol)) => {
                let mut q: Vec<f64> = q_c.iter().zip(sol.x.iter()).map(|(c, v)| c + v * self.cfg.dt).collect();
                model.clamp_to_bounds(&mut q);
                let lin = -&p.b_eq / self.cfg.alpha + &p.a_eq * &sol.x * self.cfg.dt;
                let report = ExecutorReport {
                    h_before,
                    h_predicted: lin.norm(),
                    h_after: constraint_norm(model, &q),
                    task_error,
                    iterations: sol.iterations,
                    active_set_size: sol.active.len(),
                    fallback: false,
                    solve_ms: 0.0,
                };
                (Configuration(q), report)
            }
            None => {
                self.state.fallback_count += 1;
                let q = self.state.q_prev.clone();
                let report = ExecutorReport {
                    h_before,
                    h_predicted: f64::NAN,
                    h_after: constraint_norm(model, &q),
                    task_error,
                    iterations: 0,
                    active_set_size: 0,
                    fallback: true,
                    solve_ms: 0.0,
                };
                (q, report)
            }
        };
        self.state.q_prev = q_star.clone();
        let mut report = report;
        report.solve_ms = start.elapsed().as_secs_f64() * 1e3;
        (q_star, report)
    }
}
