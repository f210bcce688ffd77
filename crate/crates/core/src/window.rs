//! Sliding-window orchestration of the batch solver.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::{I2SCalibration, ResolvedModel, WorldConfig};
use crate::residuals::{BatchState, BlockTag, ImuSample, ImuState, NoiseConfig, ResidualError, SegmentState, Weights};
use crate::so3::{log_rotvec, quat_mul, quat_to_rotmat, rot_z, Mat3, Quat, Vec3};
use crate::solver::{build_problem, solve, BatchInput, SolveReport, SolverConfig, SolverError, TermMask};

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
    #[error("TRIAD needs two non-zero, non-parallel vectors")]
    DegenerateTriad,
    #[error("no magnetometer sample for IMU {0} and no initial yaw configured")]
    MissingMagnetometer(usize),
    #[error("batch {batch} expects {expected} samples, got {got}")]
    BatchLength { batch: usize, expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Noise(#[from] ResidualError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub batch_size: usize,
    pub history: usize,
    pub th_joint_velocity: f64,
    pub th_orientation: f64,
    pub th_position: f64,
    /// Divisor applied once to the calibration-change covariances on detection.
    pub tightening_factor: f64,
    /// Mean relative angular rate across the velocity joints, rad/s, below
    /// which a batch's joint-velocity residuals count as uninformative.
    pub min_joint_excitation: f64,
    /// Number of leading samples averaged for the TRIAD bootstrap.
    pub triad_samples: usize,
    /// Heading used when no magnetometer sample is available, radians.
    pub initial_yaw: Option<f64>,
    /// Slide the window by one step instead of `batch_size − 1`; the
    /// calibration prior then acts as the arrival cost.
    pub moving_horizon: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            history: 10,
            th_joint_velocity: 0.01,
            th_orientation: 0.01,
            th_position: 0.05,
            tightening_factor: 10.0,
            min_joint_excitation: 0.05,
            triad_samples: 1,
            initial_yaw: None,
            moving_horizon: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), WindowError> {
        let bad = |m: &str| Err(WindowError::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.history < 1 {
            return bad("history must be at least 1");
        }
        if [self.th_joint_velocity, self.th_orientation, self.th_position].iter().any(|t| !(*t > 0.0)) {
            return bad("thresholds must be positive");
        }
        if !(self.tightening_factor > 1.0) {
            return bad("tightening_factor must exceed 1");
        }
        if !(self.min_joint_excitation >= 0.0) {
            return bad("min_joint_excitation must be non-negative");
        }
        if self.triad_samples < 1 {
            return bad("triad_samples must be at least 1");
        }
        Ok(())
    }

    /// First and last global step of batch `b` for a stream of `n` steps, if
    /// the batch has at least two samples and the stream is not yet covered.
    pub fn batch_range(&self, b: usize, n: usize) -> Option<(usize, usize)> {
        let start = b * self.stride();
        if start + 1 >= n || (b > 0 && start - self.stride() + self.batch_size >= n) {
            return None;
        }
        Some((start, (start + self.batch_size - 1).min(n - 1)))
    }

    /// New steps per batch.
    pub fn stride(&self) -> usize {
        if self.moving_horizon {
            1
        } else {
            self.batch_size - 1
        }
    }

    pub fn num_batches(&self, n: usize) -> usize {
        (0..).take_while(|&b| self.batch_range(b, n).is_some()).count()
    }
}

/// Two-vector attitude: the `q^GI` that maps the measured specific-force and
/// magnetic directions onto `−g^G` and `m^G`.
pub fn triad_init(acc: &Vec3, mag: &Vec3, world: &WorldConfig) -> Result<Quat, WindowError> {
    let triad = |a: &Vec3, b: &Vec3| -> Result<Mat3, WindowError> {
        let t1 = a.try_normalize(1e-12).ok_or(WindowError::DegenerateTriad)?;
        let t2 = a.cross(b).try_normalize(1e-9 * a.norm() * b.norm()).ok_or(WindowError::DegenerateTriad)?;
        Ok(Mat3::from_columns(&[t1, t2, t1.cross(&t2)]))
    };
    let global = triad(&(-world.gravity), &world.magnetic_field)?;
    let body = triad(acc, mag)?;
    let r = global * body.transpose();
    Ok(Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r)))
}

/// Attitude from gravity alone with a given heading about the vertical.
fn gravity_init(acc: &Vec3, yaw: f64, world: &WorldConfig) -> Result<Quat, WindowError> {
    let up = -world.gravity;
    let a = acc.try_normalize(1e-12).ok_or(WindowError::DegenerateTriad)?;
    let tilt = Quat::rotation_between(&a, &up.normalize()).unwrap_or_else(|| crate::so3::rot_x(std::f64::consts::PI));
    Ok(quat_mul(&rot_z(yaw), &tilt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTerms {
    pub joint_velocity: f64,
    /// Mean `‖R^GI_a ω_a − R^GI_b ω_b‖` over the batch and velocity joints.
    pub joint_excitation: f64,
    pub orientation: f64,
    pub position: f64,
}

#[derive(Debug, Clone)]
pub struct WindowState {
    pub batch: usize,
    /// IMU and segment states of the previous batch at the first step of
    /// the next one.
    pub anchor_imus: Vec<ImuState>,
    pub anchor_segments: Vec<SegmentState>,
    /// Solution of the previous batch.
    pub previous: Option<BatchState>,
    pub calibration: I2SCalibration,
    /// Per-batch calibration changes summed over IMUs: (orientation, position).
    pub history: VecDeque<(Vec3, Vec3)>,
    pub noise: NoiseConfig,
    /// Batch index of the first detection.
    pub converged_batch: Option<usize>,
    /// Global step of the last sample of the detecting batch.
    pub converged_step: Option<usize>,
    /// Replaces TRIAD for the first batch when set.
    pub initial_orientations: Option<Vec<Quat>>,
}

/// Output of one window step.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub batch: usize,
    pub first_step: usize,
    pub last_step: usize,
    pub solution: BatchState,
    pub report: SolveReport,
    pub indicator: Option<IndicatorTerms>,
    /// Convergence was detected at this batch.
    pub detected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub window: WindowConfig,
    pub solver: SolverConfig,
    pub noise: NoiseConfig,
    pub mask: TermMask,
}

/// Sequential estimator over a stream of synchronised IMU samples.
#[derive(Debug, Clone)]
pub struct Estimator<'m> {
    pub model: &'m ResolvedModel,
    pub config: EstimatorConfig,
    pub state: WindowState,
}

impl<'m> Estimator<'m> {
    pub fn new(model: &'m ResolvedModel, config: EstimatorConfig, initial: I2SCalibration) -> Result<Self, WindowError> {
        config.window.validate()?;
        config.solver.validate()?;
        Weights::new(&config.noise)?;
        if initial.len() != model.num_imus() {
            return Err(WindowError::InvalidConfig(format!(
                "initial calibration has {} entries for {} IMUs",
                initial.len(),
                model.num_imus()
            )));
        }
        let state = WindowState {
            batch: 0,
            anchor_imus: Vec::new(),
            anchor_segments: Vec::new(),
            previous: None,
            calibration: initial,
            history: VecDeque::new(),
            noise: config.noise.clone(),
            converged_batch: None,
            converged_step: None,
            initial_orientations: None,
        };
        Ok(Self { model, config, state })
    }

    /// TRIAD orientations from the leading samples of a stream.
    pub fn initial_orientations(&self, samples: &[Vec<ImuSample>]) -> Result<Vec<Quat>, WindowError> {
        let k = self.config.window.triad_samples.min(samples.len()).max(1);
        let world = self.model.world();
        (0..self.model.num_imus())
            .map(|i| {
                let acc: Vec3 = samples[..k].iter().map(|r| r[i].acc).sum::<Vec3>() / k as f64;
                let mags: Vec<Vec3> = samples[..k].iter().filter_map(|r| r[i].mag).collect();
                if mags.len() == k {
                    triad_init(&acc, &(mags.iter().sum::<Vec3>() / k as f64), world)
                } else if let Some(yaw) = self.config.window.initial_yaw {
                    log::warn!("IMU {i}: no magnetometer, using configured yaw {yaw} rad");
                    gravity_init(&acc, yaw, world)
                } else {
                    Err(WindowError::MissingMagnetometer(i))
                }
            })
            .collect()
    }

    /// Starting point and orientation anchors for the next batch.
    pub fn init_batch(&self, samples: &[Vec<ImuSample>]) -> Result<(BatchState, Vec<Quat>), WindowError> {
        let w = samples.len();
        let mut x = BatchState::new(w, self.model.num_imus(), self.model.num_segments(), self.state.calibration.clone());
        if self.state.batch == 0 {
            let q = match &self.state.initial_orientations {
                Some(q) => q.clone(),
                None => self.initial_orientations(samples)?,
            };
            let (imus, segs) = consistent_pose(self.model, &q, &self.state.calibration);
            for t in 0..w {
                x.imu[t].clone_from(&imus);
                x.seg[t].clone_from(&segs);
            }
            Ok((x, q))
        } else {
            // The previous solution shifted by the stride, padded with its last step.
            let stride = self.config.window.stride();
            for t in 0..w {
                match &self.state.previous {
                    Some(prev) if t > 0 => {
                        let src = (t + stride).min(prev.len() - 1);
                        x.imu[t].clone_from(&prev.imu[src]);
                        x.seg[t].clone_from(&prev.seg[src]);
                    }
                    _ => {
                        x.imu[t].clone_from(&self.state.anchor_imus);
                        x.seg[t].clone_from(&self.state.anchor_segments);
                    }
                }
            }
            Ok((x, self.state.anchor_imus.iter().map(|s| s.orientation).collect()))
        }
    }

    /// Processes one batch (`w` samples, the first shared with the previous batch).
    pub fn step(&mut self, samples: &[Vec<ImuSample>], first_step: usize) -> Result<BatchOutcome, WindowError> {
        let wcfg = &self.config.window;
        let b = self.state.batch;
        if samples.len() < 2 || samples.len() > wcfg.batch_size {
            return Err(WindowError::BatchLength { batch: b, expected: wcfg.batch_size, got: samples.len() });
        }
        let (x0, anchors) = self.init_batch(samples)?;
        let weights = Weights::new(&self.state.noise)?;
        let prev = self.state.calibration.clone();
        let input = BatchInput {
            samples,
            anchors: &anchors,
            previous_calibration: (b > 0).then_some(&prev),
            mask: self.config.mask,
            mode: self.config.solver.mode,
            soft_constraint_variance: self.config.solver.soft_constraint_variance,
        };
        let problem = build_problem(self.model, &input, &weights)?;
        let (x, report) = solve(&problem, self.model, &x0, &self.config.solver)?;
        if !report.converged {
            log::debug!("batch {b}: solver stopped after {} iterations without converging", report.iterations);
        }

        if b > 0 {
            let mut d_ori = Vec3::zeros();
            let mut d_pos = Vec3::zeros();
            for (new, old) in x.cal.iter().zip(&prev) {
                d_ori += log_rotvec(&quat_mul(&old.orientation.conjugate(), &new.orientation));
                d_pos += new.position - old.position;
            }
            self.state.history.push_back((d_ori, d_pos));
            while self.state.history.len() > wcfg.history + 1 {
                self.state.history.pop_front();
            }
        }

        let jv = problem.residuals_of(BlockTag::JointVelocity, &x, self.model);
        let indicator = (b > wcfg.history && self.state.history.len() == wcfg.history + 1).then(|| {
            let ni = self.model.num_imus() as f64;
            let h = wcfg.history as f64;
            let nj = self.model.velocity_joints().len().max(1) as f64;
            let jv_sum: Vec3 = jv.iter().map(|r| Vec3::new(r[0], r[1], r[2])).sum();
            let excitation = joint_excitation(self.model, &x);
            let (o, p) = self.state.history.iter().fold((Vec3::zeros(), Vec3::zeros()), |(a, c), (o, p)| (a + o, c + p));
            IndicatorTerms {
                // Without velocity residuals this term carries no evidence.
                joint_velocity: if jv.is_empty() || excitation < wcfg.min_joint_excitation {
                    f64::INFINITY
                } else {
                    jv_sum.norm() / (samples.len() as f64 * nj)
                },
                joint_excitation: excitation,
                orientation: o.norm() / (h * ni),
                position: p.norm() / (h * ni),
            }
        });
        let fired = indicator.as_ref().is_some_and(|t| {
            t.joint_velocity < wcfg.th_joint_velocity && t.orientation < wcfg.th_orientation && t.position < wcfg.th_position
        });
        let last_step = first_step + samples.len() - 1;
        let detected = fired && self.state.converged_batch.is_none();
        if detected {
            let f = 1.0 / wcfg.tightening_factor;
            self.state.noise.calib_orientation_change = self.state.noise.calib_orientation_change.scaled(f);
            self.state.noise.calib_position_change = self.state.noise.calib_position_change.scaled(f);
            self.state.converged_batch = Some(b);
            self.state.converged_step = Some(last_step);
            log::info!("convergence detected at batch {b} (step {last_step})");
        }

        let next_first = wcfg.stride().min(x.len() - 1);
        self.state.anchor_imus.clone_from(&x.imu[next_first]);
        self.state.anchor_segments.clone_from(&x.seg[next_first]);
        self.state.previous = Some(x.clone());
        self.state.calibration.clone_from(&x.cal);
        self.state.batch += 1;
        Ok(BatchOutcome { batch: b, first_step, last_step, solution: x, report, indicator, detected })
    }

    /// Runs every batch of a stream indexed `[t][imu]`.
    pub fn run(&mut self, samples: &[Vec<ImuSample>]) -> Result<Vec<BatchOutcome>, WindowError> {
        let n = samples.len();
        let nb = self.config.window.num_batches(n);
        let mut out = Vec::with_capacity(nb);
        for b in 0..nb {
            let (s, e) = self.config.window.batch_range(b, n).expect("batch in range");
            out.push(self.step(&samples[s..=e], s)?);
        }
        Ok(out)
    }
}

/// Mean relative angular rate between the IMUs on either side of each
/// velocity joint; zero when the model has none.
pub fn joint_excitation(model: &ResolvedModel, x: &BatchState) -> f64 {
    let joints = model.velocity_joints();
    if joints.is_empty() {
        return 0.0;
    }
    let world_rate = |s: &ImuState| quat_to_rotmat(&s.orientation) * s.angular_velocity;
    let total: f64 = x
        .imu
        .iter()
        .flat_map(|row| joints.iter().map(move |&(_, a, b)| (world_rate(&row[a]) - world_rate(&row[b])).norm()))
        .sum();
    total / (x.len() * joints.len()) as f64
}

/// Static pose that satisfies the coupling and connection equations for the
/// given IMU orientations and calibration. Segments without an IMU keep the
/// orientation of their parent.
pub fn consistent_pose(model: &ResolvedModel, imu_ori: &[Quat], cal: &I2SCalibration) -> (Vec<ImuState>, Vec<SegmentState>) {
    let mut segs = vec![SegmentState::default(); model.num_segments()];
    for &j in &model.joint_order {
        let (p, c) = model.joint_segments[j];
        let parent = p.map(|p| (segs[p], model.segment(p).vector));
        let orientation = match model.segment_imu[c] {
            Some(i) => quat_mul(&imu_ori[i], &cal[i].orientation.conjugate()),
            None => parent.map_or(Quat::identity(), |(s, _)| s.orientation),
        };
        let position = match parent {
            Some((s, v)) => s.position + quat_to_rotmat(&s.orientation) * v,
            None => model.model.joints[j].anchor,
        };
        segs[c] = SegmentState { position, orientation };
    }
    let imus = (0..model.num_imus())
        .map(|i| {
            let s = segs[model.imu_segment[i]];
            ImuState {
                position: s.position + quat_to_rotmat(&s.orientation) * cal[i].position,
                orientation: imu_ori[i],
                ..ImuState::default()
            }
        })
        .collect();
    (imus, segs)
}

/// Per-step calibration and segment estimates stitched from batch outcomes:
/// every step takes the values of the batch in which it first appears.
pub fn per_step_estimates(outcomes: &[BatchOutcome], num_segments: usize) -> (Vec<I2SCalibration>, Vec<Vec<Quat>>) {
    let mut cal = Vec::new();
    let mut seg = Vec::new();
    let mut next = 0usize;
    for o in outcomes {
        let skip = next.saturating_sub(o.first_step);
        next = next.max(o.last_step + 1);
        for t in skip..o.solution.len() {
            cal.push(o.solution.cal.clone());
            seg.push((0..num_segments).map(|s| o.solution.seg[t][s].orientation).collect());
        }
    }
    (cal, seg)
}
