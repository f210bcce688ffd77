//! Synthetic two-segment motion, inertial signals and calibration offsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::biomech::{CalibrationEntry, I2SCalibration, JointKind, ResolvedModel, WorldConfig};
use crate::residuals::{ImuSample, ImuState, SegmentState};
use crate::so3::{angular_offset, axis_angle, log_rotvec, quat_mul, quat_to_rotmat, rot_x, rot_y, rot_z, Mat3, Quat, Vec3};

/// `φ(t) = A · sin(α/2) · sin(α)` with `α = 2πt / period`, clipped per DoF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleProfile {
    pub num_steps: usize,
    pub period: f64,
    pub amplitude: f64,
    /// `(min, max)` in radians, one entry per DoF.
    pub clip: Vec<(f64, f64)>,
}

impl AngleProfile {
    /// 629 steps, amplitude π, four DoFs (ball xyz, hinge) with the hinge
    /// clipped to its upper RoM bound.
    pub fn study(hinge_max: f64) -> Self {
        let pi = std::f64::consts::PI;
        Self { num_steps: 629, period: 629.0, amplitude: pi, clip: vec![(-pi, pi), (-pi, pi), (-pi, pi), (-pi, hinge_max)] }
    }

    pub fn num_dofs(&self) -> usize {
        self.clip.len()
    }

    /// Angle of DoF `d` at (possibly fractional) step `t`.
    pub fn angle_at(&self, d: usize, t: f64) -> f64 {
        let a = 2.0 * std::f64::consts::PI * t / self.period;
        let (lo, hi) = self.clip[d];
        ((a / 2.0).sin() * a.sin() * self.amplitude).clamp(lo, hi)
    }

    pub fn angles_at(&self, t: f64) -> Vec<f64> {
        (0..self.num_dofs()).map(|d| self.angle_at(d, t)).collect()
    }
}

fn joint_dofs(kind: &JointKind) -> usize {
    match kind {
        JointKind::Ball => 3,
        JointKind::Hinge { .. } => 1,
    }
}

/// Total rotational DoFs of the model, in joint order.
pub fn model_dofs(model: &ResolvedModel) -> usize {
    model.model.joints.iter().map(|j| joint_dofs(&j.kind)).sum()
}

/// Segment poses for one set of joint angles, consumed in joint declaration
/// order (3 per ball joint as x-y-z Euler angles, 1 per hinge).
pub fn forward_kinematics(angles: &[f64], model: &ResolvedModel) -> Vec<SegmentState> {
    assert_eq!(angles.len(), model_dofs(model), "angle count must match joint DoFs");
    let mut start = Vec::with_capacity(model.model.joints.len());
    let mut k = 0;
    for j in &model.model.joints {
        start.push(k);
        k += joint_dofs(&j.kind);
    }
    let mut out = vec![SegmentState::default(); model.num_segments()];
    for &j in &model.joint_order {
        let def = &model.model.joints[j];
        let a = &angles[start[j]..];
        let rel = match &def.kind {
            JointKind::Ball => quat_mul(&quat_mul(&rot_x(a[0]), &rot_y(a[1])), &rot_z(a[2])),
            JointKind::Hinge { axis, .. } => axis_angle(axis, a[0]),
        };
        let (p, c) = model.joint_segments[j];
        out[c] = match p {
            None => SegmentState { position: def.anchor, orientation: rel },
            Some(p) => {
                let parent = out[p];
                SegmentState {
                    position: parent.position + quat_to_rotmat(&parent.orientation) * model.segment(p).vector,
                    orientation: quat_mul(&parent.orientation, &rel),
                }
            }
        };
    }
    out
}

/// IMU pose implied by its segment pose and calibration.
pub fn imu_pose(seg: &SegmentState, cal: &CalibrationEntry) -> (Vec3, Quat) {
    (seg.position + quat_to_rotmat(&seg.orientation) * cal.position, quat_mul(&seg.orientation, &cal.orientation))
}

/// Exact discrete-time trajectory.
///
/// Angular rates are the constant rates that carry `q_t` into `q_{t+1}`,
/// velocities follow the trapezoidal recursion `v_{t+1} = 2(I_{t+1} − I_t)/T − v_t`
/// started from the analytic velocity, and accelerations are `(v_{t+1} − v_t)/T`.
/// With these definitions the motion model holds with zero process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `[t][segment]`
    pub segments: Vec<Vec<SegmentState>>,
    /// `[t][imu]`
    pub imus: Vec<Vec<ImuState>>,
    /// `[t][imu]`, global frame, gravity excluded.
    pub accelerations: Vec<Vec<Vec3>>,
    pub calibration: I2SCalibration,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.imus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imus.is_empty()
    }

    pub fn generate(model: &ResolvedModel, profile: &AngleProfile, calibration: &I2SCalibration) -> Self {
        let n = profile.num_steps;
        let dt = model.world().sample_period;
        let ni = model.num_imus();
        let pose_at = |t: f64| {
            let segs = forward_kinematics(&profile.angles_at(t), model);
            let imus: Vec<(Vec3, Quat)> =
                (0..ni).map(|i| imu_pose(&segs[model.imu_segment[i]], &calibration[i])).collect();
            (segs, imus)
        };
        // One trailing step so that rates and accelerations exist at t = n − 1.
        let poses: Vec<_> = (0..=n).map(|t| pose_at(t as f64)).collect();

        let h = 1e-4;
        let (_, fwd) = pose_at(h);
        let (_, bwd) = pose_at(-h);
        let mut vel: Vec<Vec3> = (0..ni).map(|i| (fwd[i].0 - bwd[i].0) / (2.0 * h * dt)).collect();

        let mut segments = Vec::with_capacity(n);
        let mut imus = Vec::with_capacity(n);
        let mut accelerations = Vec::with_capacity(n);
        for t in 0..n {
            let (segs, cur) = &poses[t];
            let (_, next) = &poses[t + 1];
            let mut row = Vec::with_capacity(ni);
            let mut acc = Vec::with_capacity(ni);
            for i in 0..ni {
                let omega = log_rotvec(&quat_mul(&cur[i].1.conjugate(), &next[i].1)) / dt;
                let v_next = (next[i].0 - cur[i].0) * (2.0 / dt) - vel[i];
                row.push(ImuState { position: cur[i].0, velocity: vel[i], orientation: cur[i].1, angular_velocity: omega });
                acc.push((v_next - vel[i]) / dt);
                vel[i] = v_next;
            }
            segments.push(segs.clone());
            imus.push(row);
            accelerations.push(acc);
        }
        Self { segments, imus, accelerations, calibration: calibration.clone() }
    }
}

/// Standard deviations of additive white sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub gyro_std: f64,
    pub acc_std: f64,
    pub mag_std: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { gyro_std: 0.01, acc_std: 0.05, mag_std: 0.0 }
    }
}

/// Inertial and magnetic readings for every IMU, indexed `[t][imu]`.
pub fn synthesize_imu(truth: &GroundTruth, world: &WorldConfig, noise: Option<(SensorNoise, u64)>) -> Vec<Vec<ImuSample>> {
    let mut rng = noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut jitter = |std: f64| -> Vec3 {
        match rng.as_mut() {
            Some(r) if std > 0.0 => {
                let n = Normal::new(0.0, std).expect("finite std");
                Vec3::new(n.sample(r), n.sample(r), n.sample(r))
            }
            _ => Vec3::zeros(),
        }
    };
    let levels = noise.map(|(n, _)| n).unwrap_or(SensorNoise { gyro_std: 0.0, acc_std: 0.0, mag_std: 0.0 });
    truth
        .imus
        .iter()
        .zip(&truth.accelerations)
        .enumerate()
        .map(|(t, (row, acc))| {
            row.iter()
                .zip(acc)
                .map(|(s, a)| {
                    let rt: Mat3 = quat_to_rotmat(&s.orientation).transpose();
                    ImuSample {
                        t,
                        acc: rt * (a - world.gravity) + jitter(levels.acc_std),
                        gyro: s.angular_velocity + jitter(levels.gyro_std),
                        mag: Some(rt * world.magnetic_field + jitter(levels.mag_std)),
                    }
                })
                .collect()
        })
        .collect()
}

/// Target calibrations of the two-segment study: both IMUs sit on the capsule
/// surface at mid-segment with their z-axis along the outward normal.
pub fn study_calibration() -> I2SCalibration {
    let from_columns = |x: Vec3, y: Vec3, z: Vec3| {
        Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(Mat3::from_columns(&[x, y, z])))
    };
    vec![
        CalibrationEntry {
            orientation: from_columns(Vec3::z(), -Vec3::y(), Vec3::x()),
            position: Vec3::new(0.1, 0.0, 0.15),
        },
        CalibrationEntry {
            orientation: from_columns(Vec3::z(), -Vec3::x(), -Vec3::y()),
            position: Vec3::new(0.0, -0.1, 0.15),
        },
    ]
}

/// `q_z(γ) ⊙ q^SI ⊙ q_z(β)` and `R_z(γ) I^S`, angles in degrees.
pub fn apply_offset(entry: &CalibrationEntry, beta_deg: f64, gamma_deg: f64) -> CalibrationEntry {
    let qg = rot_z(gamma_deg.to_radians());
    let qb = rot_z(beta_deg.to_radians());
    CalibrationEntry {
        orientation: quat_mul(&quat_mul(&qg, &entry.orientation), &qb),
        position: quat_to_rotmat(&qg) * entry.position,
    }
}

/// `(β, γ)` offsets applied to one IMU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetGrid {
    /// Offset values in degrees, used for both β and γ.
    pub values_deg: Vec<f64>,
    pub imu: usize,
}

impl OffsetGrid {
    /// `{−100°, −90°, …, 100°}`, 441 points.
    pub fn study(imu: usize) -> Self {
        Self { values_deg: (-10..=10).map(|k| k as f64 * 10.0).collect(), imu }
    }

    /// Grid points `(β, γ)` with β varying slowest.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.values_deg.iter().flat_map(|&b| self.values_deg.iter().map(move |&g| (b, g))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max) }
    }
}

/// Error statistics of one IMU after convergence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    /// `‖I^S_est − I^S‖`, metres.
    pub position: Stat,
    /// Angular offset of `q^SI`, degrees.
    pub orientation: Stat,
    /// Angular offset of `q^GS`, degrees.
    pub segment: Stat,
    pub samples: usize,
}

/// Statistics over all steps `t > from` of per-step calibration and segment
/// orientation estimates.
pub fn error_stats(
    calibration: &[CalibrationEntry],
    segment: &[Quat],
    truth_cal: &CalibrationEntry,
    truth_segment: &[Quat],
    from: usize,
) -> ErrorStats {
    let range = (from + 1).min(calibration.len())..calibration.len();
    let pos: Vec<f64> = calibration[range.clone()].iter().map(|c| (c.position - truth_cal.position).norm()).collect();
    let ori: Vec<f64> =
        calibration[range.clone()].iter().map(|c| angular_offset(&c.orientation, &truth_cal.orientation)).collect();
    let seg: Vec<f64> = range.clone().map(|t| angular_offset(&segment[t], &truth_segment[t])).collect();
    ErrorStats { position: Stat::of(&pos), orientation: Stat::of(&ori), segment: Stat::of(&seg), samples: pos.len() }
}
