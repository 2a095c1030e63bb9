//! Dual-arm closed-chain kinematics.
//!
//! A [`ChainModel`] holds two serial arms whose tool frames are rigidly linked
//! by a grasp transform. The equality constraint `h(q)` stacks the logarithm
//! of the grasp error with, for spatial models, the tray roll and pitch.

use crate::geometry::{so3_exp, so3_log, vee, wrap_angle, GeometryError, Se2, Se3, Transform};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::Deserialize;
use std::ops::{Deref, DerefMut};
use std::path::Path;

/// Step used by every central-difference Jacobian in this module.
pub const FD_STEP: f64 = 1e-6;

/// Damping of the least-squares pseudoinverse used by the projections.
pub const PINV_DAMPING: f64 = 1e-8;

const PLANAR_MODEL: &str = include_str!("../models/planar_dual_3r.toml");
const SPATIAL_MODEL: &str = include_str!("../models/spatial_dual_7r.toml");

#[derive(Debug, thiserror::Error)]
pub enum KinematicsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("projection did not converge after {iterations} iterations (|h| = {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("clamping to joint bounds breaks the constraint (|h| = {residual:e})")]
    BoundsInfeasible { residual: f64 },
    #[error("tray pose is outside the reach of the {arm} arm")]
    Unreachable { arm: &'static str },
    #[error("configuration has {got} joints, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model file: {0}")]
    Model(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Planar,
    Spatial,
}

/// Joint-space configuration in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn new(q: Vec<f64>) -> Self {
        Self(q)
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl Deref for Configuration {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Configuration {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(q: Vec<f64>) -> Self {
        Self(q)
    }
}

/// Modified DH row: `RotX(alpha) TransX(a) RotZ(q + theta_offset) TransZ(d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JointChain {
    Planar { lengths: Vec<f64> },
    Spatial { dh: Vec<DhRow> },
}

impl JointChain {
    pub fn len(&self) -> usize {
        match self {
            JointChain::Planar { lengths } => lengths.len(),
            JointChain::Spatial { dh } => dh.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collision sphere attached to the frame of a joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSphere {
    pub link: usize,
    pub offset: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub base: Transform,
    pub chain: JointChain,
    pub tool: Transform,
    pub elbow_sign: f64,
    pub spheres: Vec<LinkSphere>,
}

/// Immutable description of a dual-arm closed chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub name: String,
    pub kind: ModelKind,
    pub arms: [Arm; 2],
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub neutral: Vec<f64>,
    /// Required pose of the right tool in the left tool frame.
    pub grasp: Transform,
    /// Collision spheres in the tray frame: (center, radius).
    pub tray_spheres: Vec<(Vector3<f64>, f64)>,
    pub home: Option<Vec<f64>>,
}

/// Tool and tray poses for one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkPoses {
    pub left: Transform,
    pub right: Transform,
    pub tray: Transform,
}

/// Frame selector for task Jacobians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFrame {
    TrayCenter,
    LeftEe,
}

/// Constraint value with the block layout kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResidual {
    pub values: DVector<f64>,
    /// Length of the closed-chain block (3 planar, 6 spatial).
    pub cc_len: usize,
}

impl ConstraintResidual {
    pub fn closed_chain(&self) -> &[f64] {
        &self.values.as_slice()[..self.cc_len]
    }

    pub fn flatness(&self) -> &[f64] {
        &self.values.as_slice()[self.cc_len..]
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutcome {
    pub q: Configuration,
    pub iterations: usize,
    pub residual: f64,
}

// ---------------------------------------------------------------- model file

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    translation: Vec<f64>,
    angle: Option<f64>,
    rpy: Option<[f64; 3]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmFile {
    name: String,
    base: PoseFile,
    links: Option<Vec<f64>>,
    dh: Option<Vec<[f64; 4]>>,
    tool: PoseFile,
    lower: Vec<f64>,
    upper: Vec<f64>,
    neutral: Vec<f64>,
    elbow: f64,
    #[serde(default)]
    spheres: Vec<[f64; 5]>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrayFile {
    #[serde(default)]
    spheres: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    name: String,
    kind: String,
    euler: String,
    grasp: PoseFile,
    home: Option<Vec<f64>>,
    arms: Vec<ArmFile>,
    #[serde(default)]
    tray: TrayFile,
}

fn pose_from_file(p: &PoseFile, kind: ModelKind) -> Result<Transform, KinematicsError> {
    match kind {
        ModelKind::Planar => {
            if p.translation.len() != 2 || p.rpy.is_some() {
                return Err(KinematicsError::Model(
                    "planar poses need translation=[x, y] and angle".into(),
                ));
            }
            Ok(Transform::Se2(Se2::new(
                p.angle.unwrap_or(0.0),
                Vector2::new(p.translation[0], p.translation[1]),
            )))
        }
        ModelKind::Spatial => {
            if p.translation.len() != 3 || p.angle.is_some() {
                return Err(KinematicsError::Model(
                    "spatial poses need translation=[x, y, z] and rpy".into(),
                ));
            }
            let [r, pi, y] = p.rpy.unwrap_or([0.0; 3]);
            Ok(Transform::Se3(Se3::from_rpy(
                r,
                pi,
                y,
                Vector3::new(p.translation[0], p.translation[1], p.translation[2]),
            )))
        }
    }
}

impl ChainModel {
    /// The bundled planar dual-3R testbed.
    pub fn planar() -> Self {
        Self::from_toml_str(PLANAR_MODEL).expect("bundled planar model is valid")
    }

    /// The bundled spatial dual-7R model.
    pub fn spatial() -> Self {
        Self::from_toml_str(SPATIAL_MODEL).expect("bundled spatial model is valid")
    }

    /// Resolves `"planar"`, `"spatial"` or a path to a model file.
    pub fn resolve(id: &str) -> Result<Self, KinematicsError> {
        match id {
            "planar" | "planar-dual-3r" => Ok(Self::planar()),
            "spatial" | "spatial-dual-7r" => Ok(Self::spatial()),
            path => Self::from_path(path),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| KinematicsError::Model(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, KinematicsError> {
        let f: ModelFile = toml::from_str(text).map_err(|e| KinematicsError::Model(e.to_string()))?;
        if f.schema_version != 1 {
            return Err(KinematicsError::Model(format!(
                "unsupported schema version {}",
                f.schema_version
            )));
        }
        if f.euler != "zyx" {
            return Err(KinematicsError::Model(format!(
                "unsupported euler convention {:?}",
                f.euler
            )));
        }
        let kind = match f.kind.as_str() {
            "planar" => ModelKind::Planar,
            "spatial" => ModelKind::Spatial,
            other => return Err(KinematicsError::Model(format!("unknown kind {other:?}"))),
        };
        if f.arms.len() != 2 {
            return Err(KinematicsError::Model("exactly two arms are required".into()));
        }
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut neutral = Vec::new();
        let mut arms = Vec::new();
        for a in &f.arms {
            let chain = match (kind, &a.links, &a.dh) {
                (ModelKind::Planar, Some(l), None) => JointChain::Planar { lengths: l.clone() },
                (ModelKind::Spatial, None, Some(dh)) => JointChain::Spatial {
                    dh: dh
                        .iter()
                        .map(|r| DhRow {
                            a: r[0],
                            alpha: r[1],
                            d: r[2],
                            theta_offset: r[3],
                        })
                        .collect(),
                },
                _ => {
                    return Err(KinematicsError::Model(format!(
                        "arm {}: planar arms need `links`, spatial arms need `dh`",
                        a.name
                    )))
                }
            };
            let nj = chain.len();
            if a.lower.len() != nj || a.upper.len() != nj || a.neutral.len() != nj {
                return Err(KinematicsError::Model(format!(
                    "arm {}: bounds and neutral posture need {nj} entries",
                    a.name
                )));
            }
            if a.lower.iter().zip(&a.upper).any(|(l, u)| l >= u) {
                return Err(KinematicsError::Model(format!(
                    "arm {}: lower bound must be below upper bound",
                    a.name
                )));
            }
            let spheres = a
                .spheres
                .iter()
                .map(|s| {
                    let link = s[0] as usize;
                    if link >= nj || s[4] <= 0.0 {
                        return Err(KinematicsError::Model(format!(
                            "arm {}: bad collision sphere {s:?}",
                            a.name
                        )));
                    }
                    Ok(LinkSphere {
                        link,
                        offset: Vector3::new(s[1], s[2], s[3]),
                        radius: s[4],
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            lower.extend_from_slice(&a.lower);
            upper.extend_from_slice(&a.upper);
            neutral.extend_from_slice(&a.neutral);
            arms.push(Arm {
                name: a.name.clone(),
                base: pose_from_file(&a.base, kind)?,
                chain,
                tool: pose_from_file(&a.tool, kind)?,
                elbow_sign: a.elbow.signum(),
                spheres,
            });
        }
        let n = lower.len();
        if let Some(h) = &f.home {
            if h.len() != n {
                return Err(KinematicsError::Model(format!("home pose needs {n} entries")));
            }
        }
        let right = arms.pop().unwrap();
        let left = arms.pop().unwrap();
        Ok(ChainModel {
            name: f.name,
            kind,
            arms: [left, right],
            lower,
            upper,
            neutral,
            grasp: pose_from_file(&f.grasp, kind)?,
            tray_spheres: f
                .tray
                .spheres
                .iter()
                .map(|s| (Vector3::new(s[0], s[1], s[2]), s[3]))
                .collect(),
            home: f.home,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.lower.len()
    }

    /// Number of scalar equality constraints `l`.
    pub fn constraint_dim(&self) -> usize {
        match self.kind {
            ModelKind::Planar => 3,
            ModelKind::Spatial => 8,
        }
    }

    /// Intrinsic manifold dimension `m = n - l`.
    pub fn manifold_dim(&self) -> usize {
        self.joint_count() - self.constraint_dim()
    }

    /// Dimension of a task-space twist (3 planar, 6 spatial).
    pub fn task_dim(&self) -> usize {
        match self.kind {
            ModelKind::Planar => 3,
            ModelKind::Spatial => 6,
        }
    }

    pub fn arm_joint_range(&self, arm: usize) -> std::ops::Range<usize> {
        let n0 = self.arms[0].chain.len();
        if arm == 0 {
            0..n0
        } else {
            n0..n0 + self.arms[1].chain.len()
        }
    }

    pub fn within_bounds(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn clamp_to_bounds(&self, q: &mut [f64]) {
        for (v, (l, u)) in q.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    fn check_len(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.joint_count() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.joint_count(),
                got: q.len(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------- forward kinematics

/// Frames rotating with each joint, and the tool pose.
fn arm_frames(arm: &Arm, q: &[f64], frames: &mut Vec<Transform>) -> Transform {
    frames.clear();
    match (&arm.chain, &arm.base, &arm.tool) {
        (JointChain::Planar { lengths }, Transform::Se2(base), Transform::Se2(tool)) => {
            let mut angle = base.angle();
            let mut p = base.translation;
            for (qi, li) in q.iter().zip(lengths) {
                angle += qi;
                frames.push(Transform::Se2(Se2::new(angle, p)));
                let (s, c) = angle.sin_cos();
                p += Vector2::new(li * c, li * s);
            }
            Transform::Se2(Se2::new(angle, p).compose(tool))
        }
        (JointChain::Spatial { dh }, Transform::Se3(base), Transform::Se3(tool)) => {
            let mut t = *base;
            for (qi, row) in q.iter().zip(dh) {
                let step = Se3::new(Se3::rot_x(row.alpha), Vector3::new(row.a, 0.0, 0.0))
                    .compose(&Se3::new(
                        Se3::rot_z(qi + row.theta_offset),
                        Vector3::new(0.0, 0.0, row.d),
                    ));
                t = t.compose(&step);
                frames.push(Transform::Se3(t));
            }
            Transform::Se3(t.compose(tool))
        }
        _ => unreachable!("model loader keeps chain and pose kinds consistent"),
    }
}

/// Tool pose of a planar arm without materialising intermediate frames.
fn planar_tool(arm: &Arm, q: &[f64]) -> Se2 {
    let (JointChain::Planar { lengths }, Transform::Se2(base), Transform::Se2(tool)) =
        (&arm.chain, &arm.base, &arm.tool)
    else {
        unreachable!()
    };
    let mut angle = base.angle();
    let mut p = base.translation;
    for (qi, li) in q.iter().zip(lengths) {
        angle += qi;
        let (s, c) = angle.sin_cos();
        p.x += li * c;
        p.y += li * s;
    }
    let (s, c) = angle.sin_cos();
    Se2::new(
        angle + tool.angle(),
        p + Vector2::new(
            c * tool.translation.x - s * tool.translation.y,
            s * tool.translation.x + c * tool.translation.y,
        ),
    )
}

fn tool_pose(arm: &Arm, q: &[f64]) -> Transform {
    match arm.chain {
        JointChain::Planar { .. } => Transform::Se2(planar_tool(arm, q)),
        JointChain::Spatial { .. } => {
            let mut frames = Vec::with_capacity(arm.chain.len());
            arm_frames(arm, q, &mut frames)
        }
    }
}

/// Midpoint frame between two tool poses.
pub fn tray_frame(left: &Transform, right: &Transform) -> Transform {
    match (left, right) {
        (Transform::Se2(l), Transform::Se2(r)) => Transform::Se2(Se2::new(
            l.angle() + 0.5 * wrap_angle(r.angle() - l.angle()),
            0.5 * (l.translation + r.translation),
        )),
        (Transform::Se3(l), Transform::Se3(r)) => {
            let rel = l.rotation.transpose() * r.rotation;
            // A half-turn relative rotation has no unique midpoint; keep the left frame.
            let half = so3_log(&rel).map(|w| so3_exp(&(0.5 * w))).unwrap_or_else(|_| {
                nalgebra::Matrix3::identity()
            });
            Transform::Se3(Se3::new(
                l.rotation * half,
                0.5 * (l.translation + r.translation),
            ))
        }
        _ => unreachable!("both tools of a model share a group"),
    }
}

/// Left tool, right tool and tray poses in the world frame.
pub fn forward_kinematics(model: &ChainModel, q: &[f64]) -> FkPoses {
    let r0 = model.arm_joint_range(0);
    let r1 = model.arm_joint_range(1);
    let left = tool_pose(&model.arms[0], &q[r0]);
    let right = tool_pose(&model.arms[1], &q[r1]);
    FkPoses {
        left,
        right,
        tray: tray_frame(&left, &right),
    }
}

/// World positions and radii of every robot collision sphere, arms first
/// (left then right), then the tray.
pub fn collision_spheres(model: &ChainModel, q: &[f64], out: &mut Vec<(Vector3<f64>, f64)>) {
    out.clear();
    let mut frames = Vec::with_capacity(8);
    let mut tools = [Transform::Se2(Se2::identity()); 2];
    for (i, arm) in model.arms.iter().enumerate() {
        tools[i] = arm_frames(arm, &q[model.arm_joint_range(i)], &mut frames);
        for s in &arm.spheres {
            let c = match &frames[s.link] {
                Transform::Se2(f) => {
                    let p = f.transform_point(&Vector2::new(s.offset.x, s.offset.y));
                    Vector3::new(p.x, p.y, 0.0)
                }
                Transform::Se3(f) => f.transform_point(&s.offset),
            };
            out.push((c, s.radius));
        }
    }
    let tray = tray_frame(&tools[0], &tools[1]);
    for (o, r) in &model.tray_spheres {
        let c = match &tray {
            Transform::Se2(f) => {
                let p = f.transform_point(&Vector2::new(o.x, o.y));
                Vector3::new(p.x, p.y, 0.0)
            }
            Transform::Se3(f) => f.transform_point(o),
        };
        out.push((c, *r));
    }
}

/// Number of spheres contributed by each arm, in the order of [`collision_spheres`].
pub fn arm_sphere_counts(model: &ChainModel) -> [usize; 2] {
    [model.arms[0].spheres.len(), model.arms[1].spheres.len()]
}

// ------------------------------------------------------------------ constraint

/// Residual `h(q)` of the closed-chain grasp and, for spatial models, tray flatness.
pub fn constraint(model: &ChainModel, q: &[f64]) -> Result<ConstraintResidual, KinematicsError> {
    model.check_len(q)?;
    let mut values = DVector::zeros(model.constraint_dim());
    constraint_into(model, q, values.as_mut_slice())?;
    Ok(ConstraintResidual {
        values,
        cc_len: model.task_dim(),
    })
}

/// Allocation-free variant of [`constraint`]; `out` has length `l`.
pub fn constraint_into(model: &ChainModel, q: &[f64], out: &mut [f64]) -> Result<(), KinematicsError> {
    let fk = forward_kinematics(model, q);
    match (&fk.left, &fk.right, &model.grasp) {
        (Transform::Se2(l), Transform::Se2(r), Transform::Se2(g)) => {
            let err = l.compose(g).inverse().compose(r).log()?;
            out[0] = err.angular;
            out[1] = err.linear.x;
            out[2] = err.linear.y;
        }
        (Transform::Se3(l), Transform::Se3(r), Transform::Se3(g)) => {
            let err = l.compose(g).inverse().compose(r).log()?;
            out[..3].copy_from_slice(err.angular.as_slice());
            out[3..6].copy_from_slice(err.linear.as_slice());
            let Transform::Se3(tray) = fk.tray else { unreachable!() };
            let (roll, pitch) = tray.roll_pitch();
            out[6] = roll;
            out[7] = pitch;
        }
        _ => unreachable!(),
    }
    Ok(())
}

/// `‖h(q)‖`, treating a logarithm singularity as an infinite violation.
pub fn constraint_norm(model: &ChainModel, q: &[f64]) -> f64 {
    let mut buf = [0.0; 8];
    let l = model.constraint_dim();
    match constraint_into(model, q, &mut buf[..l]) {
        Ok(()) => buf[..l].iter().map(|v| v * v).sum::<f64>().sqrt(),
        Err(_) => f64::INFINITY,
    }
}

/// `∂h/∂q` by central differences with step [`FD_STEP`].
pub fn constraint_jacobian(model: &ChainModel, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
    model.check_len(q)?;
    let n = model.joint_count();
    let l = model.constraint_dim();
    let mut jac = DMatrix::zeros(l, n);
    let mut qp = q.to_vec();
    let mut hp = vec![0.0; l];
    let mut hm = vec![0.0; l];
    for j in 0..n {
        qp[j] = q[j] + FD_STEP;
        constraint_into(model, &qp, &mut hp)?;
        qp[j] = q[j] - FD_STEP;
        constraint_into(model, &qp, &mut hm)?;
        qp[j] = q[j];
        for i in 0..l {
            jac[(i, j)] = (hp[i] - hm[i]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

// ------------------------------------------------------------- task jacobians

/// Geometric Jacobian `[ω; v]` (world frame) of the chosen frame.
pub fn task_jacobian(model: &ChainModel, q: &[f64], frame: TaskFrame) -> Result<DMatrix<f64>, KinematicsError> {
    model.check_len(q)?;
    let n = model.joint_count();
    let d = model.task_dim();
    let mut arm_jac = [DMatrix::zeros(d, n), DMatrix::zeros(d, n)];
    let mut frames = Vec::with_capacity(8);
    let mut tools = [Transform::Se2(Se2::identity()); 2];
    for (i, arm) in model.arms.iter().enumerate() {
        let range = model.arm_joint_range(i);
        tools[i] = arm_frames(arm, &q[range.clone()], &mut frames);
        let p_tool = tools[i].position3();
        for (k, f) in frames.iter().enumerate() {
            let col = range.start + k;
            match f {
                Transform::Se2(f) => {
                    let r = p_tool - Vector3::new(f.translation.x, f.translation.y, 0.0);
                    arm_jac[i][(0, col)] = 1.0;
                    arm_jac[i][(1, col)] = -r.y;
                    arm_jac[i][(2, col)] = r.x;
                }
                Transform::Se3(f) => {
                    let z = f.rotation.column(2).into_owned();
                    let v = z.cross(&(p_tool - f.translation));
                    for a in 0..3 {
                        arm_jac[i][(a, col)] = z[a];
                        arm_jac[i][(3 + a, col)] = v[a];
                    }
                }
            }
        }
    }
    let [jl, jr] = arm_jac;
    match frame {
        TaskFrame::LeftEe => Ok(jl),
        TaskFrame::TrayCenter => match model.kind {
            // tray heading and position are both exact averages in the plane
            ModelKind::Planar => Ok(0.5 * (jl + jr)),
            ModelKind::Spatial => {
                let mut j = 0.5 * (jl + jr);
                let mut qp = q.to_vec();
                for c in 0..n {
                    qp[c] = q[c] + FD_STEP;
                    let rp = tray_rotation(model, &qp);
                    qp[c] = q[c] - FD_STEP;
                    let rm = tray_rotation(model, &qp);
                    qp[c] = q[c];
                    let w = so3_log(&(rp * rm.transpose()))? / (2.0 * FD_STEP);
                    for a in 0..3 {
                        j[(a, c)] = w[a];
                    }
                }
                Ok(j)
            }
        },
    }
}

fn tray_rotation(model: &ChainModel, q: &[f64]) -> nalgebra::Matrix3<f64> {
    match forward_kinematics(model, q).tray {
        Transform::Se3(t) => t.rotation,
        Transform::Se2(_) => unreachable!(),
    }
}

/// Pose of the selected task frame.
pub fn task_pose(model: &ChainModel, q: &[f64], frame: TaskFrame) -> Transform {
    let fk = forward_kinematics(model, q);
    match frame {
        TaskFrame::TrayCenter => fk.tray,
        TaskFrame::LeftEe => fk.left,
    }
}

// ----------------------------------------------------------------- projection

fn damped_pinv_step(jac: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let rows = jac.nrows();
    let jjt = jac * jac.transpose() + DMatrix::identity(rows, rows) * PINV_DAMPING;
    let y = jjt
        .clone()
        .cholesky()
        .map(|c| c.solve(r))
        .unwrap_or_else(|| jjt.lu().solve(r).unwrap_or_else(|| DVector::zeros(rows)));
    jac.transpose() * y
}

/// Largest joint change allowed in one Gauss-Newton step.
const MAX_NEWTON_STEP: f64 = 0.5;

/// Gauss-Newton projection `q ← q − J⁺ h(q)` onto the constraint manifold.
pub fn project_to_manifold(
    model: &ChainModel,
    q0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ProjectionOutcome, KinematicsError> {
    model.check_len(q0)?;
    let mut q = q0.to_vec();
    let mut iterations = 0;
    loop {
        let h = constraint(model, &q)?;
        let res = h.norm();
        if res <= tol {
            break;
        }
        if iterations == max_iter {
            return Err(KinematicsError::NoConvergence {
                iterations,
                residual: res,
            });
        }
        let jac = constraint_jacobian(model, &q)?;
        let mut step = damped_pinv_step(&jac, &h.values);
        let big = step.amax();
        if big > MAX_NEWTON_STEP {
            step *= MAX_NEWTON_STEP / big;
        }
        for (v, s) in q.iter_mut().zip(step.iter()) {
            *v -= s;
        }
        iterations += 1;
    }
    if !model.within_bounds(&q) {
        model.clamp_to_bounds(&mut q);
        let res = constraint_norm(model, &q);
        if res > tol {
            return Err(KinematicsError::BoundsInfeasible { residual: res });
        }
    }
    let residual = constraint_norm(model, &q);
    Ok(ProjectionOutcome {
        q: Configuration(q),
        iterations,
        residual,
    })
}

/// Gauss-Newton solve of `h(q) = 0` together with `tray(q) = goal`.
pub fn solve_tray_pose(
    model: &ChainModel,
    goal: &Transform,
    q0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ProjectionOutcome, KinematicsError> {
    model.check_len(q0)?;
    let n = model.joint_count();
    let l = model.constraint_dim();
    let d = model.task_dim();
    let residual = |q: &[f64]| -> Result<DVector<f64>, KinematicsError> {
        let mut r = DVector::zeros(l + d);
        constraint_into(model, q, &mut r.as_mut_slice()[..l])?;
        let e = forward_kinematics(model, q).tray.pose_error(goal)?;
        r.rows_mut(l, d).copy_from(&e);
        Ok(r)
    };
    let mut q = q0.to_vec();
    let mut iterations = 0;
    loop {
        let r = residual(&q)?;
        if r.norm() <= tol {
            return Ok(ProjectionOutcome {
                residual: constraint_norm(model, &q),
                q: Configuration(q),
                iterations,
            });
        }
        if iterations == max_iter {
            return Err(KinematicsError::NoConvergence {
                iterations,
                residual: r.norm(),
            });
        }
        let mut jac = DMatrix::zeros(l + d, n);
        let mut qp = q.clone();
        for j in 0..n {
            qp[j] = q[j] + FD_STEP;
            let rp = residual(&qp)?;
            qp[j] = q[j] - FD_STEP;
            let rm = residual(&qp)?;
            qp[j] = q[j];
            jac.set_column(j, &((rp - rm) / (2.0 * FD_STEP)));
        }
        let mut step = damped_pinv_step(&jac, &r);
        let big = step.amax();
        if big > MAX_NEWTON_STEP {
            step *= MAX_NEWTON_STEP / big;
        }
        for (v, s) in q.iter_mut().zip(step.iter()) {
            *v -= s;
        }
        iterations += 1;
    }
}

/// Closed-form chart of the planar model: tray pose `(x, y, θ)` to joints.
///
/// Each arm is solved as a 3R chain with the elbow sign from the model file;
/// base and elbow angles are wrapped to the 2π window centred on the
/// joint-bound midpoint.
pub fn planar_chart(model: &ChainModel, x: f64, y: f64, theta: f64) -> Result<Configuration, KinematicsError> {
    let Transform::Se2(grasp) = model.grasp else {
        return Err(KinematicsError::Model("analytic chart needs the planar model".into()));
    };
    // The tray sits at the grasp midpoint with the left tool orientation
    // rotated by half the grasp rotation.
    let tray = Se2::from_xy_theta(x, y, theta);
    let half = Se2::new(0.5 * grasp.angle(), Vector2::zeros());
    let left_tool = {
        // left = tray * half^{-1} shifted back by half the grasp translation
        let l_rot = tray.compose(&half.inverse());
        let mid_in_left = 0.5 * grasp.translation;
        Se2::new(l_rot.angle(), tray.translation - l_rot.rotation() * mid_in_left)
    };
    let right_tool = left_tool.compose(&grasp);
    let mut q = Vec::with_capacity(model.joint_count());
    for (i, tool_pose) in [left_tool, right_tool].iter().enumerate() {
        let arm = &model.arms[i];
        let (JointChain::Planar { lengths }, Transform::Se2(base), Transform::Se2(tool)) =
            (&arm.chain, &arm.base, &arm.tool)
        else {
            return Err(KinematicsError::Model("analytic chart needs the planar model".into()));
        };
        if lengths.len() != 3 {
            return Err(KinematicsError::Model("analytic chart needs 3R arms".into()));
        }
        let flange = tool_pose.compose(&tool.inverse());
        let local = base.inverse().compose(&flange);
        let (l1, l2, l3) = (lengths[0], lengths[1], lengths[2]);
        let phi = local.angle();
        let w = local.translation - l3 * Vector2::new(phi.cos(), phi.sin());
        let c2 = (w.norm_squared() - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0..=1.0).contains(&c2) {
            return Err(KinematicsError::Unreachable {
                arm: if i == 0 { "left" } else { "right" },
            });
        }
        let q2 = arm.elbow_sign * c2.acos();
        let q1 = w.y.atan2(w.x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        let q3 = phi - q1 - q2;
        let r = model.arm_joint_range(i);
        for (k, v) in [q1, q2, q3].into_iter().enumerate() {
            let mid = 0.5 * (model.lower[r.start + k] + model.upper[r.start + k]);
            q.push(mid + wrap_angle(v - mid));
        }
    }
    Ok(Configuration(q))
}

/// Skew part helper re-exported for tests of rotation differentiation.
pub fn rotation_rate(r_plus: &nalgebra::Matrix3<f64>, r_minus: &nalgebra::Matrix3<f64>, step: f64) -> Vector3<f64> {
    vee(&(r_plus * r_minus.transpose())) / step
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(model: &ChainModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
        model
            .lower
            .iter()
            .zip(&model.upper)
            .map(|(l, u)| rng.gen_range(*l..*u))
            .collect()
    }

    fn fd_constraint_jacobian(model: &ChainModel, q: &[f64]) -> DMatrix<f64> {
        let n = q.len();
        let l = model.constraint_dim();
        let mut jac = DMatrix::zeros(l, n);
        for j in 0..n {
            let mut a = q.to_vec();
            let mut b = q.to_vec();
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let ha = constraint(model, &a).unwrap().values;
            let hb = constraint(model, &b).unwrap().values;
            jac.set_column(j, &((ha - hb) / 2e-6));
        }
        jac
    }

    /// Independent 4×4 chain product for a spatial arm.
    fn homogeneous_tool(arm: &Arm, q: &[f64]) -> nalgebra::Matrix4<f64> {
        let (JointChain::Spatial { dh }, Transform::Se3(base), Transform::Se3(tool)) =
            (&arm.chain, &arm.base, &arm.tool)
        else {
            panic!()
        };
        let mut m = base.to_matrix();
        for (qi, r) in q.iter().zip(dh) {
            let (sa, ca) = r.alpha.sin_cos();
            let (st, ct) = (qi + r.theta_offset).sin_cos();
            #[rustfmt::skip]
            let t = nalgebra::Matrix4::new(
                ct,      -st,      0.0,  r.a,
                st * ca,  ct * ca, -sa, -sa * r.d,
                st * sa,  ct * sa,  ca,  ca * r.d,
                0.0,      0.0,      0.0, 1.0,
            );
            m *= t;
        }
        m * tool.to_matrix()
    }

    #[test]
    fn bundled_models_load() {
        let p = ChainModel::planar();
        assert_eq!((p.joint_count(), p.constraint_dim(), p.manifold_dim()), (6, 3, 3));
        let s = ChainModel::spatial();
        assert_eq!((s.joint_count(), s.constraint_dim(), s.manifold_dim()), (14, 8, 6));
        assert!(p.lower.iter().zip(&p.upper).all(|(l, u)| l < u));
    }

    #[test]
    fn bad_model_file_is_rejected() {
        let text = include_str!("../models/planar_dual_3r.toml").replace("schema_version = 1", "schema_version = 9");
        assert!(ChainModel::from_toml_str(&text).is_err());
        let text = include_str!("../models/planar_dual_3r.toml").replace("kind = \"planar\"", "kind = \"spatial\"");
        assert!(ChainModel::from_toml_str(&text).is_err());
    }

    #[test]
    fn planar_zero_configuration_is_a_straight_stretch() {
        let model = ChainModel::planar();
        let fk = forward_kinematics(&model, &[0.0; 6]);
        let Transform::Se2(l) = fk.left else { panic!() };
        let Transform::Se2(r) = fk.right else { panic!() };
        // both arms stretched along +x: base + 0.75 m, tool turned by -π/2
        assert!((l.translation - Vector2::new(-0.25 + 0.75, 0.0)).norm() < 1e-15);
        assert!((r.translation - Vector2::new(0.25 + 0.75, 0.0)).norm() < 1e-15);
        assert!((l.angle() + std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn mirrored_configuration_has_level_tray() {
        let model = ChainModel::planar();
        let (a, b, c) = (2.2, -1.7, 1.2);
        let q = [a, b, c, std::f64::consts::PI - a, -b, -c];
        let Transform::Se2(t) = forward_kinematics(&model, &q).tray else { panic!() };
        assert!(t.angle().abs() < 1e-12);
        assert!(t.translation.x.abs() < 1e-12);
    }

    #[test]
    fn spatial_fk_matches_homogeneous_chain() {
        let model = ChainModel::spatial();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_q(&model, &mut rng);
            let fk = forward_kinematics(&model, &q);
            let Transform::Se3(l) = fk.left else { panic!() };
            let Transform::Se3(r) = fk.right else { panic!() };
            let ml = homogeneous_tool(&model.arms[0], &q[..7]);
            let mr = homogeneous_tool(&model.arms[1], &q[7..]);
            assert!((l.to_matrix() - ml).abs().max() < 1e-12);
            assert!((r.to_matrix() - mr).abs().max() < 1e-12);
        }
    }

    #[test]
    fn chart_output_satisfies_constraint() {
        let model = ChainModel::planar();
        let q = planar_chart(&model, 0.05, 0.5, 0.1).unwrap();
        assert!(constraint(&model, &q).unwrap().norm() < 1e-10);
    }

    #[test]
    fn perturbation_is_predicted_to_first_order() {
        let model = ChainModel::planar();
        let q = planar_chart(&model, 0.0, 0.5, 0.0).unwrap();
        let jac = constraint_jacobian(&model, &q).unwrap();
        let mut dq = DVector::zeros(6);
        dq[1] = 0.01;
        let mut qp = q.0.clone();
        qp[1] += 0.01;
        let h = constraint(&model, &qp).unwrap();
        assert!(h.norm() > 1e-3);
        let lin = &jac * &dq;
        assert!((h.values - lin).norm() < 0.01 * 0.01 * 5.0);
    }

    #[test]
    fn spatial_flatness_matches_independent_euler_extraction() {
        let model = ChainModel::spatial();
        let home = model.home.clone().unwrap();
        let h = constraint(&model, &home).unwrap();
        let Transform::Se3(t) = forward_kinematics(&model, &home).tray else { panic!() };
        let (roll, pitch, _) = nalgebra::Rotation3::from_matrix_unchecked(t.rotation).euler_angles();
        assert!((h.flatness()[0] - roll).abs() < 1e-12);
        assert!((h.flatness()[1] - pitch).abs() < 1e-12);
        assert_eq!(h.closed_chain().len(), 6);
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences() {
        for model in [ChainModel::planar(), ChainModel::spatial()] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..100 {
                let q = random_q(&model, &mut rng);
                if constraint(&model, &q).is_err() {
                    continue;
                }
                let a = constraint_jacobian(&model, &q).unwrap();
                let b = fd_constraint_jacobian(&model, &q);
                assert!((a - b).amax() < 1e-5);
            }
        }
        let model = ChainModel::planar();
        let a = constraint_jacobian(&model, &[0.0; 6]).unwrap();
        let b = fd_constraint_jacobian(&model, &[0.0; 6]);
        assert!((a - b).amax() < 1e-5);
    }

    #[test]
    fn constraint_jacobian_is_deterministic() {
        let model = ChainModel::planar();
        let q = [2.0, -1.5, 1.0, 0.9, 1.6, -1.0];
        let a = constraint_jacobian(&model, &q).unwrap();
        let b = constraint_jacobian(&model, &q).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn tangent_direction_keeps_constraint_to_second_order() {
        let model = ChainModel::planar();
        let q = planar_chart(&model, 0.02, 0.48, 0.05).unwrap();
        let jac = constraint_jacobian(&model, &q).unwrap();
        // project a fixed direction onto the null space of the Jacobian
        let pinv = jac.clone().pseudo_inverse(1e-12).unwrap();
        let e = DVector::from_column_slice(&[1.0, 0.5, -0.3, 0.2, 0.7, -0.4]);
        let v = &e - &pinv * (&jac * &e);
        let v = v.normalize();
        let step = |eps: f64| {
            let qp: Vec<f64> = q.iter().zip(v.iter()).map(|(a, b)| a + eps * b).collect();
            constraint(&model, &qp).unwrap().norm()
        };
        let (a, b) = (step(1e-2), step(5e-3));
        // quadratic scaling: halving the step quarters the residual
        assert!((a / b - 4.0).abs() < 0.5, "{a} {b}");
    }

    #[test]
    fn task_jacobian_matches_finite_differences() {
        for model in [ChainModel::planar(), ChainModel::spatial()] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for frame in [TaskFrame::TrayCenter, TaskFrame::LeftEe] {
                for _ in 0..20 {
                    let q = random_q(&model, &mut rng);
                    let jac = task_jacobian(&model, &q, frame).unwrap();
                    for c in 0..q.len() {
                        let mut a = q.clone();
                        let mut b = q.clone();
                        a[c] += 1e-6;
                        b[c] -= 1e-6;
                        let pa = task_pose(&model, &a, frame);
                        let pb = task_pose(&model, &b, frame);
                        let col: Vec<f64> = match (pa, pb) {
                            (Transform::Se2(x), Transform::Se2(y)) => {
                                let d = (x.translation - y.translation) / 2e-6;
                                vec![wrap_angle(x.angle() - y.angle()) / 2e-6, d.x, d.y]
                            }
                            (Transform::Se3(x), Transform::Se3(y)) => {
                                let w = rotation_rate(&x.rotation, &y.rotation, 2e-6);
                                let d = (x.translation - y.translation) / 2e-6;
                                vec![w.x, w.y, w.z, d.x, d.y, d.z]
                            }
                            _ => panic!(),
                        };
                        for (r, v) in col.iter().enumerate() {
                            assert!((jac[(r, c)] - v).abs() < 1e-5, "{frame:?} row {r} col {c}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distal_joints_do_not_move_the_left_tool() {
        let model = ChainModel::planar();
        let jac = task_jacobian(&model, &[2.0, -1.5, 1.0, 0.9, 1.6, -1.0], TaskFrame::LeftEe).unwrap();
        for c in 3..6 {
            assert!(jac.column(c).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn planar_tray_jacobian_averages_tool_jacobians() {
        let model = ChainModel::planar();
        let q = [2.0, -1.5, 1.0, 0.9, 1.6, -1.0];
        let tray = task_jacobian(&model, &q, TaskFrame::TrayCenter).unwrap();
        // right tool Jacobian by differencing the right tool pose directly
        let mut right = DMatrix::zeros(3, 6);
        for c in 0..6 {
            let mut a = q.to_vec();
            let mut b = q.to_vec();
            a[c] += 1e-6;
            b[c] -= 1e-6;
            let (Transform::Se2(x), Transform::Se2(y)) =
                (forward_kinematics(&model, &a).right, forward_kinematics(&model, &b).right)
            else {
                panic!()
            };
            right[(0, c)] = wrap_angle(x.angle() - y.angle()) / 2e-6;
            right[(1, c)] = (x.translation.x - y.translation.x) / 2e-6;
            right[(2, c)] = (x.translation.y - y.translation.y) / 2e-6;
        }
        let left = task_jacobian(&model, &q, TaskFrame::LeftEe).unwrap();
        assert!((tray - 0.5 * (left + right)).amax() < 1e-6);
    }

    #[test]
    fn projection_is_a_fixed_point_on_the_manifold() {
        let model = ChainModel::planar();
        let q = planar_chart(&model, 0.0, 0.5, 0.0).unwrap();
        let out = project_to_manifold(&model, &q, 1e-10, 20).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.q, q);
    }

    #[test]
    fn projection_converges_quickly_from_a_small_perturbation() {
        let model = ChainModel::planar();
        let mut q = planar_chart(&model, 0.03, 0.52, -0.05).unwrap();
        for (i, v) in q.iter_mut().enumerate() {
            *v += if i % 2 == 0 { 0.05 } else { -0.05 };
        }
        let out = project_to_manifold(&model, &q, 1e-10, 5).unwrap();
        assert!(out.iterations <= 5);
        assert!(constraint(&model, &out.q).unwrap().norm() <= 1e-10);
    }

    #[test]
    fn projection_fails_when_arms_cannot_meet() {
        let mut model = ChainModel::planar();
        // reach of each arm is 0.75 m, so bases 2.0 m apart cannot hold a 0.4 m bar
        model.arms[0].base = Transform::Se2(Se2::from_xy_theta(-1.0, 0.0, 0.0));
        model.arms[1].base = Transform::Se2(Se2::from_xy_theta(1.0, 0.0, 0.0));
        let q = model.neutral.clone();
        let r = project_to_manifold(&model, &q, 1e-10, 50);
        assert!(matches!(r, Err(KinematicsError::NoConvergence { .. })));
    }

    #[test]
    fn spatial_projection_reaches_the_manifold() {
        let model = ChainModel::spatial();
        let home = model.home.clone().unwrap();
        let out = project_to_manifold(&model, &home, 1e-10, 100).unwrap();
        assert!(constraint(&model, &out.q).unwrap().norm() <= 1e-10);
    }

    #[test]
    fn tray_pose_solve_hits_goal() {
        let model = ChainModel::planar();
        let goal = Transform::Se2(Se2::from_xy_theta(0.05, 0.45, 0.1));
        let out = solve_tray_pose(&model, &goal, &model.neutral, 1e-11, 50).unwrap();
        let t = forward_kinematics(&model, &out.q).tray;
        assert!(t.pose_error(&goal).unwrap().norm() < 1e-10);
        let chart = planar_chart(&model, 0.05, 0.45, 0.1).unwrap();
        assert!(out.q.iter().zip(chart.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
    }
}
