//! Residuals of the motion, measurement and biomechanical models.
//!
//! Every residual is written with its noise isolated, so that the batch
//! objective is a plain sum of `‖r‖²_{Σ⁻¹}` terms. Jacobians are taken with
//! respect to the tangent parametrisation: 3 columns per vector variable and 3
//! per orientation, perturbed on the right (`q ⊙ Exp(δ)`).

use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::{
    capsule_project, capsule_radius_at, least_aligned_axis, surface_frame, CalibrationEntry, CapsuleRegion,
    I2SCalibration, ResolvedModel, SegmentSpec, WorldConfig,
};
use crate::so3::{
    conj, exp_rotvec, log_rotvec, quat_mul, quat_to_rotmat, retract, right_jacobian, right_jacobian_inv, skew, Mat3,
    Quat, Vec3,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuState {
    /// `I^G`
    pub position: Vec3,
    /// `İ^G`
    pub velocity: Vec3,
    /// `q^GI`
    pub orientation: Quat,
    /// `ω^GI_I`, expressed in the IMU frame.
    pub angular_velocity: Vec3,
}

impl Default for ImuState {
    fn default() -> Self {
        Self { position: Vec3::zeros(), velocity: Vec3::zeros(), orientation: Quat::identity(), angular_velocity: Vec3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentState {
    /// `S^G`
    pub position: Vec3,
    /// `q^GS`
    pub orientation: Quat,
}

impl Default for SegmentState {
    fn default() -> Self {
        Self { position: Vec3::zeros(), orientation: Quat::identity() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: usize,
    /// Specific force, m/s².
    pub acc: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
    pub mag: Option<Vec3>,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        let ok = |v: &Vec3| v.iter().all(|x| x.is_finite());
        ok(&self.acc) && ok(&self.gyro) && self.mag.as_ref().map_or(true, ok)
    }
}

/// One 3-dimensional tangent block of the batch state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarId {
    ImuPos { t: usize, imu: usize },
    ImuVel { t: usize, imu: usize },
    ImuOri { t: usize, imu: usize },
    ImuOmega { t: usize, imu: usize },
    SegPos { t: usize, seg: usize },
    SegOri { t: usize, seg: usize },
    CalOri { imu: usize },
    CalPos { imu: usize },
}

impl VarId {
    pub fn is_rotation(&self) -> bool {
        matches!(self, Self::ImuOri { .. } | Self::SegOri { .. } | Self::CalOri { .. })
    }
}

/// Time-varying kinematics of one batch plus its calibration block.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    /// Indexed `[t][imu]`.
    pub imu: Vec<Vec<ImuState>>,
    /// Indexed `[t][segment]`.
    pub seg: Vec<Vec<SegmentState>>,
    pub cal: I2SCalibration,
}

impl BatchState {
    pub fn new(len: usize, num_imus: usize, num_segments: usize, cal: I2SCalibration) -> Self {
        Self {
            imu: vec![vec![ImuState::default(); num_imus]; len],
            seg: vec![vec![SegmentState::default(); num_segments]; len],
            cal,
        }
    }

    pub fn len(&self) -> usize {
        self.imu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imu.is_empty()
    }

    pub fn num_imus(&self) -> usize {
        self.cal.len()
    }

    pub fn num_segments(&self) -> usize {
        self.seg.first().map_or(0, Vec::len)
    }

    fn stride(&self) -> usize {
        12 * self.num_imus() + 6 * self.num_segments()
    }

    /// Tangent dimension `w(12|I| + 6|S|) + 6|I|`.
    pub fn tangent_dim(&self) -> usize {
        self.len() * self.stride() + 6 * self.num_imus()
    }

    /// Column of the first tangent coordinate of `var`.
    pub fn offset(&self, var: VarId) -> usize {
        let s = self.stride();
        let ni = self.num_imus();
        let cal0 = self.len() * s;
        match var {
            VarId::ImuPos { t, imu } => t * s + 12 * imu,
            VarId::ImuVel { t, imu } => t * s + 12 * imu + 3,
            VarId::ImuOri { t, imu } => t * s + 12 * imu + 6,
            VarId::ImuOmega { t, imu } => t * s + 12 * imu + 9,
            VarId::SegPos { t, seg } => t * s + 12 * ni + 6 * seg,
            VarId::SegOri { t, seg } => t * s + 12 * ni + 6 * seg + 3,
            VarId::CalOri { imu } => cal0 + 6 * imu,
            VarId::CalPos { imu } => cal0 + 6 * imu + 3,
        }
    }

    pub fn variables(&self) -> Vec<VarId> {
        let mut out = Vec::with_capacity(self.tangent_dim() / 3);
        for t in 0..self.len() {
            for imu in 0..self.num_imus() {
                out.extend([
                    VarId::ImuPos { t, imu },
                    VarId::ImuVel { t, imu },
                    VarId::ImuOri { t, imu },
                    VarId::ImuOmega { t, imu },
                ]);
            }
            for seg in 0..self.num_segments() {
                out.extend([VarId::SegPos { t, seg }, VarId::SegOri { t, seg }]);
            }
        }
        for imu in 0..self.num_imus() {
            out.extend([VarId::CalOri { imu }, VarId::CalPos { imu }]);
        }
        out
    }

    fn apply(&mut self, var: VarId, d: &Vec3) {
        match var {
            VarId::ImuPos { t, imu } => self.imu[t][imu].position += d,
            VarId::ImuVel { t, imu } => self.imu[t][imu].velocity += d,
            VarId::ImuOri { t, imu } => {
                let q = &mut self.imu[t][imu].orientation;
                *q = retract(q, d);
            }
            VarId::ImuOmega { t, imu } => self.imu[t][imu].angular_velocity += d,
            VarId::SegPos { t, seg } => self.seg[t][seg].position += d,
            VarId::SegOri { t, seg } => {
                let q = &mut self.seg[t][seg].orientation;
                *q = retract(q, d);
            }
            VarId::CalOri { imu } => {
                let q = &mut self.cal[imu].orientation;
                *q = retract(q, d);
            }
            VarId::CalPos { imu } => self.cal[imu].position += d,
        }
    }

    /// `x ⊞ dx`, using the quaternion exponential for orientations.
    pub fn retract(&self, dx: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for var in self.variables() {
            let o = self.offset(var);
            out.apply(var, &Vec3::new(dx[o], dx[o + 1], dx[o + 2]));
        }
        out
    }

    /// Perturbs a single variable; used by finite-difference checks.
    pub fn perturbed(&self, var: VarId, d: &Vec3) -> Self {
        let mut out = self.clone();
        out.apply(var, d);
        out
    }
}

/// Symmetric positive-definite noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance(pub DMatrix<f64>);

impl Covariance {
    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Self(DMatrix::identity(dim, dim) * variance)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(&self.0 * factor)
    }

    /// `Σ^{-1/2}` as the inverse Cholesky factor, so that `‖W r‖² = rᵀ Σ⁻¹ r`.
    pub fn sqrt_information(&self) -> Result<DMatrix<f64>, ResidualError> {
        let chol = self.0.clone().cholesky().ok_or(ResidualError::NotPositiveDefinite)?;
        let l = chol.l();
        let n = l.nrows();
        l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(ResidualError::NotPositiveDefinite)
    }
}

impl Serialize for Covariance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.0.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Covariance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("covariance must be square"));
        }
        Ok(Self(DMatrix::from_fn(n, n, |i, j| rows[i][j])))
    }
}

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("covariance for {block:?} has dimension {got}, expected {expected}")]
    Dimension { block: BlockTag, got: usize, expected: usize },
}

/// Noise covariances of every residual type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub motion_position: Covariance,
    pub motion_velocity: Covariance,
    pub motion_orientation: Covariance,
    pub gyroscope: Covariance,
    pub coupling_orientation: Covariance,
    pub coupling_position: Covariance,
    pub joint_velocity: Covariance,
    pub hinge: Covariance,
    pub range_of_motion: Covariance,
    pub shape_position: Covariance,
    pub shape_orientation: Covariance,
    pub fixed_position: Covariance,
    pub batch_init: Covariance,
    pub calib_orientation_change: Covariance,
    pub calib_position_change: Covariance,
}

impl Default for NoiseConfig {
    /// Identity everywhere except the joint-velocity term (10·I) and the
    /// shape and calibration-change priors (100·I).
    fn default() -> Self {
        Self {
            motion_position: Covariance::identity(3),
            motion_velocity: Covariance::identity(3),
            motion_orientation: Covariance::identity(3),
            gyroscope: Covariance::identity(3),
            coupling_orientation: Covariance::identity(3),
            coupling_position: Covariance::identity(3),
            joint_velocity: Covariance::isotropic(3, 10.0),
            hinge: Covariance::identity(3),
            range_of_motion: Covariance::identity(1),
            shape_position: Covariance::isotropic(3, 100.0),
            shape_orientation: Covariance::isotropic(2, 100.0),
            fixed_position: Covariance::identity(3),
            batch_init: Covariance::identity(3),
            calib_orientation_change: Covariance::isotropic(3, 100.0),
            calib_position_change: Covariance::isotropic(3, 100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    Motion,
    Gyro,
    Coupling,
    Connected,
    JointVelocity,
    Hinge,
    RangeOfMotion,
    FixedPosition,
    BatchInit,
    CalibrationSmoothness,
    ShapePosition,
    ShapeOrientation,
}

impl BlockTag {
    pub const ALL: [BlockTag; 12] = [
        Self::Motion,
        Self::Gyro,
        Self::Coupling,
        Self::Connected,
        Self::JointVelocity,
        Self::Hinge,
        Self::RangeOfMotion,
        Self::FixedPosition,
        Self::BatchInit,
        Self::CalibrationSmoothness,
        Self::ShapePosition,
        Self::ShapeOrientation,
    ];

    pub fn dim(&self) -> usize {
        match self {
            Self::Motion => 9,
            Self::Coupling | Self::CalibrationSmoothness => 6,
            Self::RangeOfMotion => 1,
            Self::ShapeOrientation => 2,
            _ => 3,
        }
    }
}

/// Square-root information matrices, one per residual type.
#[derive(Debug, Clone)]
pub struct Weights {
    pub motion: DMatrix<f64>,
    pub gyro: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub joint_velocity: DMatrix<f64>,
    pub hinge: DMatrix<f64>,
    pub rom: DMatrix<f64>,
    pub shape_position: DMatrix<f64>,
    pub shape_orientation: DMatrix<f64>,
    pub fixed: DMatrix<f64>,
    pub batch_init: DMatrix<f64>,
    pub calib: DMatrix<f64>,
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() + b.nrows();
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    m.view_mut((a.nrows(), a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    m
}

impl Weights {
    pub fn new(noise: &NoiseConfig) -> Result<Self, ResidualError> {
        let check = |c: &Covariance, block: BlockTag, expected: usize| {
            if c.dim() != expected {
                Err(ResidualError::Dimension { block, got: c.dim(), expected })
            } else {
                c.sqrt_information()
            }
        };
        let motion = block_diag(
            &block_diag(
                &check(&noise.motion_position, BlockTag::Motion, 3)?,
                &check(&noise.motion_velocity, BlockTag::Motion, 3)?,
            ),
            &check(&noise.motion_orientation, BlockTag::Motion, 3)?,
        );
        Ok(Self {
            motion,
            gyro: check(&noise.gyroscope, BlockTag::Gyro, 3)?,
            coupling: block_diag(
                &check(&noise.coupling_orientation, BlockTag::Coupling, 3)?,
                &check(&noise.coupling_position, BlockTag::Coupling, 3)?,
            ),
            joint_velocity: check(&noise.joint_velocity, BlockTag::JointVelocity, 3)?,
            hinge: check(&noise.hinge, BlockTag::Hinge, 3)?,
            rom: check(&noise.range_of_motion, BlockTag::RangeOfMotion, 1)?,
            shape_position: check(&noise.shape_position, BlockTag::ShapePosition, 3)?,
            shape_orientation: check(&noise.shape_orientation, BlockTag::ShapeOrientation, 2)?,
            fixed: check(&noise.fixed_position, BlockTag::FixedPosition, 3)?,
            batch_init: check(&noise.batch_init, BlockTag::BatchInit, 3)?,
            calib: block_diag(
                &check(&noise.calib_orientation_change, BlockTag::CalibrationSmoothness, 3)?,
                &check(&noise.calib_position_change, BlockTag::CalibrationSmoothness, 3)?,
            ),
        })
    }
}

/// Residual value plus one `rows × 3` Jacobian per footprint variable.
#[derive(Debug, Clone)]
pub struct BlockEval {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

struct JacBuilder {
    rows: usize,
    jac: Vec<DMatrix<f64>>,
    enabled: bool,
}

impl JacBuilder {
    fn new(rows: usize, vars: usize, enabled: bool) -> Self {
        let jac = if enabled { vec![DMatrix::zeros(rows, 3); vars] } else { Vec::new() };
        Self { rows, jac, enabled }
    }

    fn set(&mut self, var: usize, row: usize, m: &Mat3) {
        if self.enabled {
            self.jac[var].fixed_view_mut::<3, 3>(row, 0).copy_from(m);
        }
    }

    fn set_row(&mut self, var: usize, row: usize, v: &nalgebra::RowVector3<f64>) {
        if self.enabled {
            self.jac[var].fixed_view_mut::<1, 3>(row, 0).copy_from(v);
        }
    }

    fn finish(self, residual: &[f64]) -> BlockEval {
        debug_assert_eq!(residual.len(), self.rows);
        BlockEval { residual: DVector::from_column_slice(residual), jacobians: self.jac }
    }
}

fn rot(q: &Quat) -> Mat3 {
    quat_to_rotmat(q)
}

// ---------------------------------------------------------------------------
// Motion and measurement models.

/// Footprint: `[pos_t, vel_t, ori_t, ω_t, pos_t+1, vel_t+1, ori_t+1]`.
pub fn eval_motion(a: &ImuState, b: &ImuState, acc: &Vec3, world: &WorldConfig, jac: bool) -> BlockEval {
    let dt = world.sample_period;
    let g = world.gravity;
    let rt = rot(&a.orientation).transpose();
    let u_pos = (b.position - a.position - a.velocity * dt) * (2.0 / (dt * dt)) - g;
    let u_vel = (b.velocity - a.velocity) / dt - g;
    let r_pos = acc - rt * u_pos;
    let r_vel = acc - rt * u_vel;

    let step = a.angular_velocity * dt;
    let e = exp_rotvec(&step);
    let c = quat_mul(&conj(&a.orientation), &b.orientation);
    let m = quat_mul(&conj(&e), &c);
    let r_ori = log_rotvec(&m);

    let mut jb = JacBuilder::new(9, 7, jac);
    if jac {
        let k_pos = 2.0 / (dt * dt);
        let jri = right_jacobian_inv(&r_ori);
        jb.set(0, 0, &(rt * k_pos));
        jb.set(1, 0, &(rt * (2.0 / dt)));
        jb.set(1, 3, &(rt / dt));
        jb.set(2, 0, &(-skew(&(rt * u_pos))));
        jb.set(2, 3, &(-skew(&(rt * u_vel))));
        jb.set(2, 6, &(-jri * rot(&c).transpose()));
        jb.set(3, 6, &(-jri * rot(&m).transpose() * right_jacobian(&step) * dt));
        jb.set(4, 0, &(-rt * k_pos));
        jb.set(5, 3, &(-rt / dt));
        jb.set(6, 6, &jri);
    }
    jb.finish(&[r_pos[0], r_pos[1], r_pos[2], r_vel[0], r_vel[1], r_vel[2], r_ori[0], r_ori[1], r_ori[2]])
}

/// Process noises `[v^pos; v^vel; v^ori]` implied by two consecutive IMU states.
pub fn motion_residual(a: &ImuState, b: &ImuState, acc: &Vec3, world: &WorldConfig) -> SVector<f64, 9> {
    SVector::from_column_slice(eval_motion(a, b, acc, world, false).residual.as_slice())
}

/// Footprint: `[ω]`.
pub fn eval_gyro(imu: &ImuState, gyro: &Vec3, jac: bool) -> BlockEval {
    let r = gyro - imu.angular_velocity;
    let mut jb = JacBuilder::new(3, 1, jac);
    jb.set(0, 0, &(-Mat3::identity()));
    jb.finish(r.as_slice())
}

pub fn gyro_residual(imu: &ImuState, gyro: &Vec3) -> Vec3 {
    gyro - imu.angular_velocity
}

// ---------------------------------------------------------------------------
// Biomechanical constraints.

/// Footprint: `[S_j pos, S_i pos, S_i ori]`.
pub fn eval_connected(parent: &SegmentState, child: &SegmentState, parent_vector: &Vec3, jac: bool) -> BlockEval {
    let ri = rot(&parent.orientation);
    let r = child.position - parent.position - ri * parent_vector;
    let mut jb = JacBuilder::new(3, 3, jac);
    jb.set(0, 0, &Mat3::identity());
    jb.set(1, 0, &(-Mat3::identity()));
    jb.set(2, 0, &(ri * skew(parent_vector)));
    jb.finish(r.as_slice())
}

/// Root joint attached to the world. Footprint: `[S pos]`.
pub fn eval_connected_root(child: &SegmentState, anchor: &Vec3, jac: bool) -> BlockEval {
    let r = child.position - anchor;
    let mut jb = JacBuilder::new(3, 1, jac);
    jb.set(0, 0, &Mat3::identity());
    jb.finish(r.as_slice())
}

pub fn connected_segments_constraint(parent: &SegmentState, child: &SegmentState, parent_vector: &Vec3) -> Vec3 {
    child.position - (parent.position + rot(&parent.orientation) * parent_vector)
}

/// Footprint: `[I ori, I pos, S pos, S ori, q^SI, I^S]`.
pub fn eval_coupling(imu: &ImuState, seg: &SegmentState, cal: &CalibrationEntry, jac: bool) -> BlockEval {
    let rc = rot(&cal.orientation);
    let rs = rot(&seg.orientation);
    let n = quat_mul(&conj(&quat_mul(&seg.orientation, &cal.orientation)), &imu.orientation);
    let r_ori = log_rotvec(&n);
    let lever = rs.transpose() * (imu.position - seg.position);
    let r_pos = lever - cal.position;

    let mut jb = JacBuilder::new(6, 6, jac);
    if jac {
        let jri = right_jacobian_inv(&r_ori);
        let rnt = rot(&n).transpose();
        jb.set(0, 0, &jri);
        jb.set(1, 3, &rs.transpose());
        jb.set(2, 3, &(-rs.transpose()));
        jb.set(3, 0, &(-jri * rnt * rc.transpose()));
        jb.set(3, 3, &skew(&lever));
        jb.set(4, 0, &(-jri * rnt));
        jb.set(5, 3, &(-Mat3::identity()));
    }
    jb.finish(&[r_ori[0], r_ori[1], r_ori[2], r_pos[0], r_pos[1], r_pos[2]])
}

/// `[2·log(conj(q^GS ⊙ q^SI) ⊙ q^GI); R^SG (I^G − S^G) − I^S]`.
pub fn i2s_coupling_residual(imu: &ImuState, seg: &SegmentState, cal: &CalibrationEntry) -> SVector<f64, 6> {
    SVector::from_column_slice(eval_coupling(imu, seg, cal, false).residual.as_slice())
}

/// Velocity of the shared joint seen from the parent IMU minus the one seen
/// from the child IMU, in the parent IMU frame.
///
/// Footprint: `[v_i, ori_i, ω_i, v_j, ori_j, ω_j, q^SI_i, I^S_i, q^SI_j, I^S_j]`.
pub fn eval_joint_velocity(
    imu_i: &ImuState,
    imu_j: &ImuState,
    cal_i: &CalibrationEntry,
    cal_j: &CalibrationEntry,
    parent_vector: &Vec3,
    jac: bool,
) -> BlockEval {
    let ri = rot(&imu_i.orientation);
    let rj = rot(&imu_j.orientation);
    let rci = rot(&cal_i.orientation);
    let rcj = rot(&cal_j.orientation);
    let wi = imu_i.angular_velocity;
    let wj = imu_j.angular_velocity;
    // Lever arms in the IMU frames.
    let b_i = rci.transpose() * (parent_vector - cal_i.position);
    let a_j = rcj.transpose() * cal_j.position;
    let axw = a_j.cross(&wj);
    let m = imu_i.velocity - imu_j.velocity - rj * axw;
    let r = ri.transpose() * m + wi.cross(&b_i);

    let mut jb = JacBuilder::new(3, 10, jac);
    if jac {
        let rit = ri.transpose();
        let rirj = rit * rj;
        jb.set(0, 0, &rit);
        jb.set(1, 0, &skew(&(rit * m)));
        jb.set(2, 0, &(-skew(&b_i)));
        jb.set(3, 0, &(-rit));
        jb.set(4, 0, &(rirj * skew(&axw)));
        jb.set(5, 0, &(-rirj * skew(&a_j)));
        let d_b = skew(&wi);
        jb.set(6, 0, &(d_b * skew(&b_i)));
        jb.set(7, 0, &(-d_b * rci.transpose()));
        let d_a = rirj * skew(&wj);
        jb.set(8, 0, &(d_a * skew(&a_j)));
        jb.set(9, 0, &(d_a * rcj.transpose()));
    }
    jb.finish(r.as_slice())
}

pub fn joint_velocity_residual(
    imu_i: &ImuState,
    imu_j: &ImuState,
    cal_i: &CalibrationEntry,
    cal_j: &CalibrationEntry,
    parent: &SegmentSpec,
) -> Vec3 {
    let e = eval_joint_velocity(imu_i, imu_j, cal_i, cal_j, &parent.vector, false);
    Vec3::from_column_slice(e.residual.as_slice())
}

/// Footprint: `[S_i ori, S_j ori]`.
pub fn eval_hinge(seg_i: &SegmentState, seg_j: &SegmentState, axis: &Vec3, jac: bool) -> BlockEval {
    let ri = rot(&seg_i.orientation);
    let rj = rot(&seg_j.orientation);
    let mapped = rj.transpose() * ri * axis;
    let r = axis - mapped;
    let mut jb = JacBuilder::new(3, 2, jac);
    jb.set(0, 0, &(rj.transpose() * ri * skew(axis)));
    jb.set(1, 0, &(-skew(&mapped)));
    jb.finish(r.as_slice())
}

pub fn hinge_residual(seg_i: &SegmentState, seg_j: &SegmentState, axis: &Vec3) -> Vec3 {
    axis - rot(&seg_j.orientation).transpose() * rot(&seg_i.orientation) * axis
}

/// Relative joint angle `2·arccos([q^SG_j ⊙ q^GS_i]_w)` on the canonical
/// (`w ≥ 0`) hemisphere, in `[0, π]`.
pub fn joint_angle(seg_i: &SegmentState, seg_j: &SegmentState) -> f64 {
    log_rotvec(&quat_mul(&conj(&seg_j.orientation), &seg_i.orientation)).norm()
}

/// One-sided range-of-motion penalty (radians). Footprint: `[S_i ori, S_j ori]`.
pub fn eval_rom(seg_i: &SegmentState, seg_j: &SegmentState, min: f64, max: f64, jac: bool) -> BlockEval {
    let rel = quat_mul(&conj(&seg_j.orientation), &seg_i.orientation);
    let phi = log_rotvec(&rel);
    let theta = phi.norm();
    let (r, sign) = if theta < min {
        (min - theta, -1.0)
    } else if theta > max {
        (theta - max, 1.0)
    } else {
        (0.0, 0.0)
    };
    let mut jb = JacBuilder::new(1, 2, jac);
    if jac && sign != 0.0 && theta > 1e-12 {
        // φᵀ Jr⁻¹(φ) = φᵀ, so dθ/dδ_i = φ̂ᵀ.
        let dir = (phi / theta).transpose() * sign;
        jb.set_row(0, 0, &dir);
        jb.set_row(1, 0, &(-dir * rot(&rel).transpose()));
    }
    jb.finish(&[r])
}

pub fn rom_residual(seg_i: &SegmentState, seg_j: &SegmentState, min: f64, max: f64) -> f64 {
    eval_rom(seg_i, seg_j, min, max, false).residual[0]
}

// ---------------------------------------------------------------------------
// Body shape prior.

/// Position of an IMU relative to the capsule surface. Footprint: `[I^S]`.
pub fn eval_shape_position(cal_pos: &Vec3, seg: &SegmentSpec, jac: bool) -> BlockEval {
    let proj = capsule_project(cal_pos, seg);
    let mut jb = JacBuilder::new(3, 1, jac);
    if proj.degenerate {
        log::warn!("IMU position {cal_pos:?} on segment '{}' axis; shape residual disabled", seg.name);
        return jb.finish(&[0.0; 3]);
    }
    let radial = |d: Vec3, radius: f64, jb: &mut JacBuilder| {
        let n = d.norm();
        let dir = d / n;
        jb.set(0, 0, &(Mat3::identity() - radius * (Mat3::identity() - dir * dir.transpose()) / n));
        d - dir * radius
    };
    let r = match proj.region {
        CapsuleRegion::BelowProximal => radial(*cal_pos, seg.proximal_radius, &mut jb),
        CapsuleRegion::BeyondDistal => radial(cal_pos - seg.vector, seg.distal_radius, &mut jb),
        CapsuleRegion::Lateral => {
            let u = seg.axis();
            let o = proj.orthogonal;
            let on = o.norm();
            let dir = o / on;
            let radius = capsule_radius_at(proj.pr, seg).expect("lateral region");
            let p = Mat3::identity() - u * u.transpose();
            let d_dir = (Mat3::identity() - dir * dir.transpose()) * p / on;
            let d_radius = u.transpose() * ((seg.distal_radius - seg.proximal_radius) / seg.length());
            jb.set(0, 0, &(p - dir * d_radius - d_dir * radius));
            o - dir * radius
        }
    };
    jb.finish(r.as_slice())
}

pub fn shape_pos_residual(cal_pos: &Vec3, seg: &SegmentSpec) -> Vec3 {
    Vec3::from_column_slice(eval_shape_position(cal_pos, seg, false).residual.as_slice())
}

/// Tangential components of the IMU z-axis in segment coordinates.
/// Footprint: `[q^SI, I^S]`.
pub fn eval_shape_orientation(cal: &CalibrationEntry, seg: &SegmentSpec, jac: bool) -> BlockEval {
    let rc = rot(&cal.orientation);
    let z = rc.column(2).into_owned();
    let mut jb = JacBuilder::new(2, 2, jac);
    let frame = match surface_frame(&cal.position, seg) {
        Ok(f) => f,
        Err(_) => {
            log::warn!("IMU position on segment '{}' axis; shape orientation residual disabled", seg.name);
            return jb.finish(&[0.0, 0.0]);
        }
    };
    if jac {
        let dz = -rc * skew(&Vec3::z());
        jb.set_row(0, 0, &(frame.tangent1.transpose() * dz));
        jb.set_row(0, 1, &(frame.tangent2.transpose() * dz));

        let proj = capsule_project(&cal.position, seg);
        let (d_t1, d_t2) = match proj.region {
            CapsuleRegion::Lateral => {
                let u = seg.axis();
                let on = proj.orthogonal.norm();
                let n = frame.normal;
                let p = Mat3::identity() - u * u.transpose();
                let d_n = (Mat3::identity() - n * n.transpose()) * p / on;
                (Mat3::zeros(), -skew(&u) * d_n)
            }
            region => {
                let d = if region == CapsuleRegion::BelowProximal { cal.position } else { cal.position - seg.vector };
                let n = frame.normal;
                let d_n = (Mat3::identity() - n * n.transpose()) / d.norm();
                let mut a = Vec3::zeros();
                a[least_aligned_axis(&n)] = 1.0;
                let k = a - n * a.dot(&n);
                let d_k = -(n * a.transpose() + Mat3::identity() * a.dot(&n)) * d_n;
                let t1 = frame.tangent1;
                let d_t1 = (Mat3::identity() - t1 * t1.transpose()) / k.norm() * d_k;
                (d_t1, -skew(&t1) * d_n + skew(&n) * d_t1)
            }
        };
        jb.set_row(1, 0, &(z.transpose() * d_t1));
        jb.set_row(1, 1, &(z.transpose() * d_t2));
    }
    jb.finish(&[z.dot(&frame.tangent1), z.dot(&frame.tangent2)])
}

pub fn shape_ori_residual(cal: &CalibrationEntry, seg: &SegmentSpec) -> nalgebra::Vector2<f64> {
    let e = eval_shape_orientation(cal, seg, false);
    nalgebra::Vector2::new(e.residual[0], e.residual[1])
}

/// Footprint: `[S pos, S ori]`.
pub fn eval_fixed_position(seg: &SegmentState, local: &Vec3, global: &Vec3, jac: bool) -> BlockEval {
    let rs = rot(&seg.orientation);
    let r = global - seg.position - rs * local;
    let mut jb = JacBuilder::new(3, 2, jac);
    jb.set(0, 0, &(-Mat3::identity()));
    jb.set(1, 0, &(rs * skew(local)));
    jb.finish(r.as_slice())
}

pub fn fixed_pos_residual(seg: &SegmentState, local: &Vec3, global: &Vec3) -> Vec3 {
    global - (seg.position + rot(&seg.orientation) * local)
}

// ---------------------------------------------------------------------------
// Regularisation priors.

/// `2·log(conj(q_anchor) ⊙ q_first)`. Footprint: `[q_first]`.
pub fn eval_batch_init(first: &Quat, anchor: &Quat, jac: bool) -> BlockEval {
    let r = log_rotvec(&quat_mul(&conj(anchor), first));
    let mut jb = JacBuilder::new(3, 1, jac);
    if jac {
        jb.set(0, 0, &right_jacobian_inv(&r));
    }
    jb.finish(r.as_slice())
}

pub fn batch_init_residual(first: &Quat, anchor: &Quat) -> Vec3 {
    log_rotvec(&quat_mul(&conj(anchor), first))
}

/// `[log(conj(q^SI_prev) ⊙ q^SI); I^S − I^S_prev]` with the half-angle log.
/// Footprint: `[q^SI, I^S]`.
pub fn eval_calib_smoothness(cal: &CalibrationEntry, prev: &CalibrationEntry, jac: bool) -> BlockEval {
    let phi = log_rotvec(&quat_mul(&conj(&prev.orientation), &cal.orientation));
    let r_ori = phi * 0.5;
    let r_pos = cal.position - prev.position;
    let mut jb = JacBuilder::new(6, 2, jac);
    if jac {
        jb.set(0, 0, &(right_jacobian_inv(&phi) * 0.5));
        jb.set(1, 3, &Mat3::identity());
    }
    jb.finish(&[r_ori[0], r_ori[1], r_ori[2], r_pos[0], r_pos[1], r_pos[2]])
}

pub fn calib_smoothness_residual(cal: &CalibrationEntry, prev: &CalibrationEntry) -> SVector<f64, 6> {
    SVector::from_column_slice(eval_calib_smoothness(cal, prev, false).residual.as_slice())
}

// ---------------------------------------------------------------------------
// Typed blocks.

#[derive(Debug, Clone, PartialEq)]
pub enum ResidualKind {
    Motion { imu: usize, t: usize, acc: Vec3 },
    Gyro { imu: usize, t: usize, gyro: Vec3 },
    Coupling { imu: usize, t: usize },
    Connected { joint: usize, t: usize },
    JointVelocity { joint: usize, t: usize },
    Hinge { joint: usize, t: usize },
    RangeOfMotion { joint: usize, t: usize },
    FixedPosition { point: usize, t: usize },
    BatchInit { imu: usize, anchor: Quat },
    CalibrationSmoothness { imu: usize, previous: CalibrationEntry },
    ShapePosition { imu: usize },
    ShapeOrientation { imu: usize },
}

impl ResidualKind {
    pub fn tag(&self) -> BlockTag {
        match self {
            Self::Motion { .. } => BlockTag::Motion,
            Self::Gyro { .. } => BlockTag::Gyro,
            Self::Coupling { .. } => BlockTag::Coupling,
            Self::Connected { .. } => BlockTag::Connected,
            Self::JointVelocity { .. } => BlockTag::JointVelocity,
            Self::Hinge { .. } => BlockTag::Hinge,
            Self::RangeOfMotion { .. } => BlockTag::RangeOfMotion,
            Self::FixedPosition { .. } => BlockTag::FixedPosition,
            Self::BatchInit { .. } => BlockTag::BatchInit,
            Self::CalibrationSmoothness { .. } => BlockTag::CalibrationSmoothness,
            Self::ShapePosition { .. } => BlockTag::ShapePosition,
            Self::ShapeOrientation { .. } => BlockTag::ShapeOrientation,
        }
    }

    /// Variables this residual depends on, in Jacobian order.
    pub fn footprint(&self, model: &ResolvedModel) -> Vec<VarId> {
        use VarId::*;
        match *self {
            Self::Motion { imu, t, .. } => vec![
                ImuPos { t, imu },
                ImuVel { t, imu },
                ImuOri { t, imu },
                ImuOmega { t, imu },
                ImuPos { t: t + 1, imu },
                ImuVel { t: t + 1, imu },
                ImuOri { t: t + 1, imu },
            ],
            Self::Gyro { imu, t, .. } => vec![ImuOmega { t, imu }],
            Self::Coupling { imu, t } => {
                let seg = model.imu_segment[imu];
                vec![ImuOri { t, imu }, ImuPos { t, imu }, SegPos { t, seg }, SegOri { t, seg }, CalOri { imu }, CalPos { imu }]
            }
            Self::Connected { joint, t } => match model.joint_segments[joint] {
                (Some(p), c) => vec![SegPos { t, seg: c }, SegPos { t, seg: p }, SegOri { t, seg: p }],
                (None, c) => vec![SegPos { t, seg: c }],
            },
            Self::JointVelocity { joint, t } => {
                let (p, c) = model.joint_segments[joint];
                let i = model.segment_imu[p.expect("velocity joint has a parent")].expect("parent IMU");
                let j = model.segment_imu[c].expect("child IMU");
                vec![
                    ImuVel { t, imu: i },
                    ImuOri { t, imu: i },
                    ImuOmega { t, imu: i },
                    ImuVel { t, imu: j },
                    ImuOri { t, imu: j },
                    ImuOmega { t, imu: j },
                    CalOri { imu: i },
                    CalPos { imu: i },
                    CalOri { imu: j },
                    CalPos { imu: j },
                ]
            }
            Self::Hinge { joint, t } | Self::RangeOfMotion { joint, t } => {
                let (p, c) = model.joint_segments[joint];
                vec![SegOri { t, seg: p.expect("hinge has a parent") }, SegOri { t, seg: c }]
            }
            Self::FixedPosition { point, t } => {
                let seg = model.fixed_segments[point];
                vec![SegPos { t, seg }, SegOri { t, seg }]
            }
            Self::BatchInit { imu, .. } => vec![ImuOri { t: 0, imu }],
            Self::CalibrationSmoothness { imu, .. } => vec![CalOri { imu }, CalPos { imu }],
            Self::ShapePosition { imu } => vec![CalPos { imu }],
            Self::ShapeOrientation { imu } => vec![CalOri { imu }, CalPos { imu }],
        }
    }

    /// Unweighted residual (and Jacobians when `jac`).
    pub fn evaluate(&self, x: &BatchState, model: &ResolvedModel, jac: bool) -> BlockEval {
        let world = model.world();
        match self {
            Self::Motion { imu, t, acc } => eval_motion(&x.imu[*t][*imu], &x.imu[t + 1][*imu], acc, world, jac),
            Self::Gyro { imu, t, gyro } => eval_gyro(&x.imu[*t][*imu], gyro, jac),
            Self::Coupling { imu, t } => {
                let seg = model.imu_segment[*imu];
                eval_coupling(&x.imu[*t][*imu], &x.seg[*t][seg], &x.cal[*imu], jac)
            }
            Self::Connected { joint, t } => match model.joint_segments[*joint] {
                (Some(p), c) => eval_connected(&x.seg[*t][p], &x.seg[*t][c], &model.segment(p).vector, jac),
                (None, c) => eval_connected_root(&x.seg[*t][c], &model.model.joints[*joint].anchor, jac),
            },
            Self::JointVelocity { joint, t } => {
                let (p, c) = model.joint_segments[*joint];
                let p = p.expect("velocity joint has a parent");
                let i = model.segment_imu[p].expect("parent IMU");
                let j = model.segment_imu[c].expect("child IMU");
                eval_joint_velocity(&x.imu[*t][i], &x.imu[*t][j], &x.cal[i], &x.cal[j], &model.segment(p).vector, jac)
            }
            Self::Hinge { joint, t } => {
                let (p, c) = model.joint_segments[*joint];
                let (axis, _, _) = model.model.joints[*joint].hinge().expect("hinge joint");
                eval_hinge(&x.seg[*t][p.expect("hinge has a parent")], &x.seg[*t][c], &axis, jac)
            }
            Self::RangeOfMotion { joint, t } => {
                let (p, c) = model.joint_segments[*joint];
                let (_, min, max) = model.model.joints[*joint].hinge().expect("hinge joint");
                eval_rom(&x.seg[*t][p.expect("hinge has a parent")], &x.seg[*t][c], min, max, jac)
            }
            Self::FixedPosition { point, t } => {
                let fp = &model.model.fixed_points[*point];
                eval_fixed_position(&x.seg[*t][model.fixed_segments[*point]], &fp.local_point, &fp.global_point, jac)
            }
            Self::BatchInit { imu, anchor } => eval_batch_init(&x.imu[0][*imu].orientation, anchor, jac),
            Self::CalibrationSmoothness { imu, previous } => eval_calib_smoothness(&x.cal[*imu], previous, jac),
            Self::ShapePosition { imu } => {
                eval_shape_position(&x.cal[*imu].position, model.segment(model.imu_segment[*imu]), jac)
            }
            Self::ShapeOrientation { imu } => {
                eval_shape_orientation(&x.cal[*imu], model.segment(model.imu_segment[*imu]), jac)
            }
        }
    }
}

impl std::fmt::Display for ResidualKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Motion { imu, t, .. } => write!(f, "motion (imu {imu}, t {t})"),
            Self::Gyro { imu, t, .. } => write!(f, "gyroscope (imu {imu}, t {t})"),
            Self::Coupling { imu, t } => write!(f, "I2S coupling (imu {imu}, t {t})"),
            Self::Connected { joint, t } => write!(f, "connected segments (joint {joint}, t {t})"),
            Self::JointVelocity { joint, t } => write!(f, "joint velocity (joint {joint}, t {t})"),
            Self::Hinge { joint, t } => write!(f, "hinge (joint {joint}, t {t})"),
            Self::RangeOfMotion { joint, t } => write!(f, "range of motion (joint {joint}, t {t})"),
            Self::FixedPosition { point, t } => write!(f, "fixed position (point {point}, t {t})"),
            Self::BatchInit { imu, .. } => write!(f, "batch initialisation (imu {imu})"),
            Self::CalibrationSmoothness { imu, .. } => write!(f, "calibration smoothness (imu {imu})"),
            Self::ShapePosition { imu } => write!(f, "shape position (imu {imu})"),
            Self::ShapeOrientation { imu } => write!(f, "shape orientation (imu {imu})"),
        }
    }
}

/// A residual with its square-root information weight.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub kind: ResidualKind,
    pub footprint: Vec<VarId>,
    /// `Σ^{-1/2}`
    pub weight: DMatrix<f64>,
    /// Enforced as an equality constraint rather than penalised.
    pub hard_constraint: bool,
}

impl ResidualBlock {
    pub fn new(kind: ResidualKind, model: &ResolvedModel, weight: DMatrix<f64>, hard_constraint: bool) -> Self {
        let footprint = kind.footprint(model);
        Self { kind, footprint, weight, hard_constraint }
    }

    pub fn tag(&self) -> BlockTag {
        self.kind.tag()
    }

    /// Tangent columns touched by this block.
    pub fn tangent_dim(&self) -> usize {
        3 * self.footprint.len()
    }

    pub fn evaluate(&self, x: &BatchState, model: &ResolvedModel, jac: bool) -> BlockEval {
        self.kind.evaluate(x, model, jac)
    }

    /// Whitened residual and Jacobians.
    pub fn evaluate_weighted(&self, x: &BatchState, model: &ResolvedModel, jac: bool) -> BlockEval {
        let e = self.evaluate(x, model, jac);
        BlockEval {
            residual: &self.weight * e.residual,
            jacobians: e.jacobians.iter().map(|j| &self.weight * j).collect(),
        }
    }

    /// Block Jacobian with all footprint columns side by side.
    pub fn jacobian(&self, x: &BatchState, model: &ResolvedModel) -> DMatrix<f64> {
        let e = self.evaluate(x, model, true);
        let rows = e.residual.len();
        let mut out = DMatrix::zeros(rows, self.tangent_dim());
        for (k, j) in e.jacobians.iter().enumerate() {
            out.view_mut((0, 3 * k), (rows, 3)).copy_from(j);
        }
        out
    }
}

/// Central finite-difference Jacobian of a block, used as a test oracle.
pub fn numeric_jacobian(block: &ResidualBlock, x: &BatchState, model: &ResolvedModel, step: f64) -> DMatrix<f64> {
    let rows = block.evaluate(x, model, false).residual.len();
    let mut out = DMatrix::zeros(rows, block.tangent_dim());
    for (k, var) in block.footprint.iter().enumerate() {
        for c in 0..3 {
            let mut d = Vec3::zeros();
            d[c] = step;
            let fwd = block.evaluate(&x.perturbed(*var, &d), model, false).residual;
            let bwd = block.evaluate(&x.perturbed(*var, &(-d)), model, false).residual;
            out.set_column(3 * k + c, &((fwd - bwd) / (2.0 * step)));
        }
    }
    out
}
