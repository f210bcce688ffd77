//! Per-batch constrained weighted least squares.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biomech::{I2SCalibration, JointKind, ResolvedModel};
use crate::residuals::{BatchState, BlockTag, ImuSample, ResidualBlock, ResidualKind, VarId, Weights};
use crate::so3::Quat;

const MIN_DAMPING: f64 = 1e-12;
const RESTORATION_STEPS: usize = 10;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("batch has {0} time steps, at least 2 are required")]
    TooShort(usize),
    #[error("time step {t} has {got} IMU samples, expected {expected}")]
    MissingSamples { t: usize, got: usize, expected: usize },
    #[error("non-finite sample for IMU {imu} at step {t}")]
    NonFiniteSample { t: usize, imu: usize },
    #[error("expected {expected} entries for {what}, got {got}")]
    Dimension { what: &'static str, got: usize, expected: usize },
    #[error("non-finite residual in block {0}")]
    NonFinite(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Infeasible-start Gauss-Newton with the connected-segment equations as
    /// equality constraints.
    #[default]
    Hard,
    /// Levenberg-Marquardt with the connected-segment equations as stiff residuals.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mode: ConstraintMode,
    pub max_iterations: usize,
    /// Relative objective decrease below which the iteration stops.
    pub objective_tolerance: f64,
    /// Max-norm of the constraint vector required for convergence.
    pub constraint_tolerance: f64,
    pub initial_damping: f64,
    pub damping_scale: f64,
    /// Variance of the connected-segment residual in soft mode.
    pub soft_constraint_variance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: ConstraintMode::Hard,
            max_iterations: 50,
            objective_tolerance: 1e-9,
            constraint_tolerance: 1e-8,
            initial_damping: 1e-8,
            damping_scale: 10.0,
            soft_constraint_variance: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("objective_tolerance", self.objective_tolerance),
            ("constraint_tolerance", self.constraint_tolerance),
            ("soft_constraint_variance", self.soft_constraint_variance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolverError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.initial_damping < 0.0 || self.damping_scale <= 1.0 {
            return Err(SolverError::InvalidConfig("damping must be non-negative with scale > 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which biomechanical terms enter the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermMask {
    pub connected: bool,
    pub hinge: bool,
    pub velocity: bool,
    pub shape: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        Self { connected: true, hinge: true, velocity: true, shape: true }
    }
}

impl TermMask {
    /// Short label such as `c+h+v+s`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.connected, "c"), (self.hinge, "h"), (self.velocity, "v"), (self.shape, "s")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, l)| *l)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Everything a batch needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    /// Indexed `[t][imu]`.
    pub samples: &'a [Vec<ImuSample>],
    /// Orientation prior for the first step of each IMU.
    pub anchors: &'a [Quat],
    /// Calibration of the previous batch; `None` for the first batch.
    pub previous_calibration: Option<&'a I2SCalibration>,
    pub mask: TermMask,
    pub mode: ConstraintMode,
    pub soft_constraint_variance: f64,
}

#[derive(Debug, Clone)]
pub struct BatchProblem {
    pub len: usize,
    pub num_imus: usize,
    pub num_segments: usize,
    /// Penalised residuals.
    pub blocks: Vec<ResidualBlock>,
    /// Equality constraints (hard mode only).
    pub constraints: Vec<ResidualBlock>,
}

pub fn build_problem(model: &ResolvedModel, input: &BatchInput, weights: &Weights) -> Result<BatchProblem, SolverError> {
    let w = input.samples.len();
    let ni = model.num_imus();
    if w < 2 {
        return Err(SolverError::TooShort(w));
    }
    for (t, row) in input.samples.iter().enumerate() {
        if row.len() != ni {
            return Err(SolverError::MissingSamples { t, got: row.len(), expected: ni });
        }
        if let Some(imu) = row.iter().position(|s| !s.is_finite()) {
            return Err(SolverError::NonFiniteSample { t, imu });
        }
    }
    if input.anchors.len() != ni {
        return Err(SolverError::Dimension { what: "anchors", got: input.anchors.len(), expected: ni });
    }
    if let Some(prev) = input.previous_calibration {
        if prev.len() != ni {
            return Err(SolverError::Dimension { what: "previous calibration", got: prev.len(), expected: ni });
        }
    }

    let mut blocks = Vec::new();
    let mut constraints = Vec::new();
    let mut push = |kind: ResidualKind, weight: &DMatrix<f64>| blocks.push(ResidualBlock::new(kind, model, weight.clone(), false));

    for t in 0..w {
        for imu in 0..ni {
            if t + 1 < w {
                push(ResidualKind::Motion { imu, t, acc: input.samples[t][imu].acc }, &weights.motion);
            }
            push(ResidualKind::Gyro { imu, t, gyro: input.samples[t][imu].gyro }, &weights.gyro);
            push(ResidualKind::Coupling { imu, t }, &weights.coupling);
        }
        for (joint, def) in model.model.joints.iter().enumerate() {
            if let JointKind::Hinge { .. } = def.kind {
                if input.mask.hinge {
                    push(ResidualKind::Hinge { joint, t }, &weights.hinge);
                    push(ResidualKind::RangeOfMotion { joint, t }, &weights.rom);
                }
            }
        }
        if input.mask.velocity {
            for (joint, _, _) in model.velocity_joints() {
                push(ResidualKind::JointVelocity { joint, t }, &weights.joint_velocity);
            }
        }
        for point in 0..model.model.fixed_points.len() {
            push(ResidualKind::FixedPosition { point, t }, &weights.fixed);
        }
    }
    for imu in 0..ni {
        push(ResidualKind::BatchInit { imu, anchor: input.anchors[imu] }, &weights.batch_init);
        if let Some(prev) = input.previous_calibration {
            push(ResidualKind::CalibrationSmoothness { imu, previous: prev[imu] }, &weights.calib);
        }
        if input.mask.shape {
            push(ResidualKind::ShapePosition { imu }, &weights.shape_position);
            push(ResidualKind::ShapeOrientation { imu }, &weights.shape_orientation);
        }
    }
    if input.mask.connected {
        let soft_weight = DMatrix::identity(3, 3) / input.soft_constraint_variance.sqrt();
        for t in 0..w {
            for joint in 0..model.model.joints.len() {
                let kind = ResidualKind::Connected { joint, t };
                match input.mode {
                    ConstraintMode::Hard => {
                        constraints.push(ResidualBlock::new(kind, model, DMatrix::identity(3, 3), true))
                    }
                    ConstraintMode::Soft => blocks.push(ResidualBlock::new(kind, model, soft_weight.clone(), false)),
                }
            }
        }
    }
    Ok(BatchProblem { len: w, num_imus: ni, num_segments: model.num_segments(), blocks, constraints })
}

/// Gauss-Newton system at one linearisation point.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// `Jᵀ W J` over the penalised blocks.
    pub hessian: DMatrix<f64>,
    /// `Jᵀ W r`
    pub gradient: DVector<f64>,
    /// `Σ ‖r‖²_{Σ⁻¹}`
    pub objective: f64,
    pub constraint_jacobian: DMatrix<f64>,
    pub constraint: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub tag: BlockTag,
    pub count: usize,
    /// Max-norm of the unweighted residuals.
    pub max_abs: f64,
    /// Contribution to the objective (zero for hard constraints).
    pub weighted_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub objective: f64,
    pub max_constraint_violation: f64,
    pub blocks: Vec<BlockSummary>,
    pub converged: bool,
    /// Set when the normal equations needed extra damping to factor.
    pub damped_fallback: bool,
}

impl SolveReport {
    pub fn block(&self, tag: BlockTag) -> Option<&BlockSummary> {
        self.blocks.iter().find(|b| b.tag == tag)
    }
}

impl BatchProblem {
    pub fn tangent_dim(&self) -> usize {
        self.len * (12 * self.num_imus + 6 * self.num_segments) + 6 * self.num_imus
    }

    pub fn block_counts(&self) -> BTreeMap<BlockTag, usize> {
        let mut out = BTreeMap::new();
        for b in self.blocks.iter().chain(&self.constraints) {
            *out.entry(b.tag()).or_insert(0) += 1;
        }
        out
    }

    fn layout(&self, x: &BatchState) {
        debug_assert_eq!(x.len(), self.len);
        debug_assert_eq!(x.tangent_dim(), self.tangent_dim());
    }

    /// Pairs of 3-column variable blocks with a non-zero `JᵀWJ` entry.
    pub fn nonzero_pattern(&self, x: &BatchState) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for b in &self.blocks {
            for va in &b.footprint {
                for vb in &b.footprint {
                    out.insert((x.offset(*va) / 3, x.offset(*vb) / 3));
                }
            }
        }
        out
    }

    /// First structurally non-zero column of each row of the Hessian.
    fn profile(&self, x: &BatchState) -> Vec<usize> {
        let n = self.tangent_dim();
        let mut first: Vec<usize> = (0..n).collect();
        for b in &self.blocks {
            let lo = b.footprint.iter().map(|v| x.offset(*v)).min().unwrap_or(0);
            for v in &b.footprint {
                let o = x.offset(*v);
                for f in &mut first[o..o + 3] {
                    *f = (*f).min(lo);
                }
            }
        }
        first
    }

    fn eval_checked(block: &ResidualBlock, x: &BatchState, model: &ResolvedModel, jac: bool) -> Result<crate::residuals::BlockEval, SolverError> {
        let e = block.evaluate_weighted(x, model, jac);
        if e.residual.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite(block.kind.to_string()));
        }
        Ok(e)
    }

    /// Objective and constraint vector without derivatives.
    pub fn cost(&self, x: &BatchState, model: &ResolvedModel) -> Result<(f64, DVector<f64>), SolverError> {
        let mut f = 0.0;
        for b in &self.blocks {
            f += Self::eval_checked(b, x, model, false)?.residual.norm_squared();
        }
        let mut c = DVector::zeros(3 * self.constraints.len());
        for (k, b) in self.constraints.iter().enumerate() {
            c.rows_mut(3 * k, 3).copy_from(&Self::eval_checked(b, x, model, false)?.residual);
        }
        Ok((f, c))
    }

    pub fn linearize(&self, x: &BatchState, model: &ResolvedModel) -> Result<Linearization, SolverError> {
        self.layout(x);
        let n = self.tangent_dim();
        let mut hessian = DMatrix::zeros(n, n);
        let mut gradient = DVector::zeros(n);
        let mut objective = 0.0;
        for b in &self.blocks {
            let e = Self::eval_checked(b, x, model, true)?;
            objective += e.residual.norm_squared();
            let offs: Vec<usize> = b.footprint.iter().map(|v| x.offset(*v)).collect();
            for (ja, oa) in e.jacobians.iter().zip(&offs) {
                let g = ja.tr_mul(&e.residual);
                let mut seg = gradient.fixed_rows_mut::<3>(*oa);
                seg += g;
                for (jb, ob) in e.jacobians.iter().zip(&offs) {
                    if ob < oa {
                        continue;
                    }
                    let h = ja.tr_mul(jb);
                    let mut blk = hessian.fixed_view_mut::<3, 3>(*oa, *ob);
                    blk += &h;
                    if ob != oa {
                        let mut sym = hessian.fixed_view_mut::<3, 3>(*ob, *oa);
                        sym += h.transpose();
                    }
                }
            }
        }
        let m = 3 * self.constraints.len();
        let mut constraint_jacobian = DMatrix::zeros(m, n);
        let mut constraint = DVector::zeros(m);
        for (k, b) in self.constraints.iter().enumerate() {
            let e = Self::eval_checked(b, x, model, true)?;
            constraint.rows_mut(3 * k, 3).copy_from(&e.residual);
            for (j, v) in e.jacobians.iter().zip(&b.footprint) {
                constraint_jacobian.view_mut((3 * k, x.offset(*v)), (3, 3)).copy_from(j);
            }
        }
        Ok(Linearization { hessian, gradient, objective, constraint_jacobian, constraint })
    }

    /// Per-type residual statistics at `x`.
    pub fn summarize(&self, x: &BatchState, model: &ResolvedModel) -> Vec<BlockSummary> {
        let mut acc: BTreeMap<BlockTag, BlockSummary> = BTreeMap::new();
        for b in self.blocks.iter().chain(&self.constraints) {
            let raw = b.evaluate(x, model, false).residual;
            let weighted = if b.hard_constraint { 0.0 } else { (&b.weight * &raw).norm_squared() };
            let s = acc.entry(b.tag()).or_insert(BlockSummary { tag: b.tag(), count: 0, max_abs: 0.0, weighted_sq: 0.0 });
            s.count += 1;
            s.max_abs = s.max_abs.max(raw.amax());
            s.weighted_sq += weighted;
        }
        acc.into_values().collect()
    }

    /// Unweighted residuals of every block of one type, in block order.
    pub fn residuals_of(&self, tag: BlockTag, x: &BatchState, model: &ResolvedModel) -> Vec<DVector<f64>> {
        self.blocks
            .iter()
            .chain(&self.constraints)
            .filter(|b| b.tag() == tag)
            .map(|b| b.evaluate(x, model, false).residual)
            .collect()
    }
}

/// Cholesky factor of a symmetric matrix stored within its row envelope.
///
/// Fill-in of `L` stays inside the envelope of `A`, so rows only touch columns
/// from their first non-zero on. The band-plus-arrow structure of the batch
/// Hessian makes this much cheaper than a dense factorisation.
#[derive(Debug, Clone)]
pub struct ProfileCholesky {
    n: usize,
    first: Vec<usize>,
    l: Vec<f64>,
}

impl ProfileCholesky {
    /// Factors `a + diag(shift)`; `None` if not positive definite.
    pub fn factor(a: &DMatrix<f64>, shift: &[f64], first: &[usize]) -> Option<Self> {
        let n = a.nrows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j].max(fi);
                let (ri, rj) = (i * n, j * n);
                let dot: f64 = l[ri + fj..ri + j].iter().zip(&l[rj + fj..rj + j]).map(|(p, q)| p * q).sum();
                let mut s = a[(i, j)] - dot;
                if i == j {
                    s += shift[i];
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Some(Self { n, first: first.to_vec(), l })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.l[i * n..i * n + i];
            let dot: f64 = row[fi..].iter().zip(&b[fi..i]).map(|(p, q)| p * q).sum();
            b[i] = (b[i] - dot) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            b[i] /= self.l[i * n + i];
            let xi = b[i];
            let fi = self.first[i];
            for (k, lik) in (fi..i).zip(&self.l[i * n + fi..i * n + i]) {
                b[k] -= lik * xi;
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.solve_in_place(out.as_mut_slice());
        out
    }
}

struct Step {
    dx: DVector<f64>,
    /// Lagrange multipliers (empty in soft mode).
    nu: DVector<f64>,
}

fn damped_step(lin: &Linearization, gradient: &DVector<f64>, first: &[usize], lambda: f64) -> Option<Step> {
    let n = gradient.len();
    let shift: Vec<f64> = (0..n).map(|i| lambda * (lin.hessian[(i, i)].abs() + 1e-9)).collect();
    let chol = ProfileCholesky::factor(&lin.hessian, &shift, first)?;
    let hg = chol.solve(gradient);
    let m = lin.constraint.len();
    if m == 0 {
        return Some(Step { dx: -hg, nu: DVector::zeros(0) });
    }
    let a = &lin.constraint_jacobian;
    // X = H̃⁻¹ Aᵀ, column by column.
    let mut x = a.transpose();
    for mut col in x.column_iter_mut() {
        chol.solve_in_place(col.as_mut_slice());
    }
    let s = a * &x;
    let rhs = &lin.constraint - a * &hg;
    let nu = match s.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => s.lu().solve(&rhs)?,
    };
    let dx = -(hg + &x * &nu);
    Some(Step { dx, nu })
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn amax(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Solves one batch from `x0`. Non-convergence is reported, not raised.
pub fn solve(
    problem: &BatchProblem,
    model: &ResolvedModel,
    x0: &BatchState,
    cfg: &SolverConfig,
) -> Result<(BatchState, SolveReport), SolverError> {
    cfg.validate()?;
    problem.layout(x0);
    let first = problem.profile(x0);
    let mut x = x0.clone();
    let mut lambda = cfg.initial_damping;
    let mut mu = 0.0f64;
    let mut converged = false;
    let mut damped_fallback = false;
    let mut iterations = 0;

    let mut lin = problem.linearize(&x, model)?;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let f0 = lin.objective;
        let c0 = l1(&lin.constraint);
        let mut accepted: Option<(BatchState, f64, DVector<f64>)> = None;
        let mut predicted = 0.0;
        for _attempt in 0..12 {
            let Some(step) = damped_step(&lin, &lin.gradient, &first, lambda) else {
                damped_fallback = true;
                lambda = (lambda * cfg.damping_scale).max(1e-9);
                continue;
            };
            mu = mu.max(2.0 * amax(&step.nu));
            let phi0 = 0.5 * f0 + mu * c0;
            // Directional derivative of the merit along the step.
            let slope = lin.gradient.dot(&step.dx) - mu * c0;
            predicted = -slope;
            let mut alpha = 1.0;
            for _ in 0..8 {
                let trial = x.retract(&(&step.dx * alpha));
                let (f1, c1) = problem.cost(&trial, model)?;
                let phi1 = 0.5 * f1 + mu * l1(&c1);
                if phi1 <= phi0 + 1e-4 * alpha * slope.min(0.0) {
                    accepted = Some((trial, f1, c1));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                if alpha == 1.0 {
                    lambda = (lambda / cfg.damping_scale).max(MIN_DAMPING);
                }
                break;
            }
            lambda = (lambda * cfg.damping_scale).max(1e-9);
        }
        let Some((xn, f1, c1)) = accepted else {
            // No merit decrease is possible: stationary up to rounding.
            let feasible = amax(&lin.constraint) < cfg.constraint_tolerance;
            converged = feasible && predicted <= 1e-10 * (1.0 + f0);
            break;
        };
        log::trace!(
            "iter {iterations}: f {f0:.6e} -> {f1:.6e}, |c| {:.3e}, lambda {lambda:.1e}, |dx| pred {predicted:.3e}",
            amax(&c1)
        );
        x = xn;
        let rel = (f0 - f1).abs() / f0.max(1e-300);
        let feasible = amax(&c1) < cfg.constraint_tolerance;
        lin = problem.linearize(&x, model)?;
        if feasible && (rel < cfg.objective_tolerance || f1 < 1e-24) {
            converged = true;
            break;
        }
    }
    // Restoration: project back onto the constraints in the Hessian metric.
    let zero = DVector::zeros(lin.gradient.len());
    for _ in 0..RESTORATION_STEPS {
        let c0 = amax(&lin.constraint);
        if c0 < cfg.constraint_tolerance {
            break;
        }
        let Some(step) = damped_step(&lin, &zero, &first, lambda.max(MIN_DAMPING)) else {
            break;
        };
        let trial = x.retract(&step.dx);
        let trial_lin = problem.linearize(&trial, model)?;
        if amax(&trial_lin.constraint) >= c0 {
            break;
        }
        x = trial;
        lin = trial_lin;
    }
    let report = SolveReport {
        iterations,
        objective: lin.objective,
        max_constraint_violation: amax(&lin.constraint),
        blocks: problem.summarize(&x, model),
        converged,
        damped_fallback,
    };
    Ok((x, report))
}

/// Variables of `x` that no block touches; empty for a well-posed problem.
pub fn unreferenced_variables(problem: &BatchProblem, x: &BatchState) -> Vec<VarId> {
    let used: BTreeSet<VarId> =
        problem.blocks.iter().chain(&problem.constraints).flat_map(|b| b.footprint.iter().copied()).collect();
    x.variables().into_iter().filter(|v| !used.contains(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biomech::BodyModel;
    use crate::residuals::NoiseConfig;
    use crate::sim::{apply_offset, study_calibration, synthesize_imu, AngleProfile, GroundTruth};
    use crate::so3::{angular_offset, quat_mul, rot_x, rot_z, quat_to_rotmat, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        model: ResolvedModel,
        truth: GroundTruth,
        samples: Vec<Vec<ImuSample>>,
    }

    fn fixture() -> Fixture {
        let model = ResolvedModel::new(BodyModel::two_segment_study()).unwrap();
        let truth = GroundTruth::generate(&model, &AngleProfile::study(162f64.to_radians()), &study_calibration());
        let samples = synthesize_imu(&truth, model.world(), None);
        Fixture { model, truth, samples }
    }

    impl Fixture {
        fn state(&self, start: usize, w: usize) -> BatchState {
            BatchState {
                imu: self.truth.imus[start..start + w].to_vec(),
                seg: self.truth.segments[start..start + w].to_vec(),
                cal: self.truth.calibration.clone(),
            }
        }

        fn anchors(&self, start: usize) -> Vec<Quat> {
            self.truth.imus[start].iter().map(|s| s.orientation).collect()
        }

        fn problem(&self, start: usize, w: usize, prev: Option<&I2SCalibration>, mask: TermMask, mode: ConstraintMode) -> BatchProblem {
            let anchors = self.anchors(start);
            let input = BatchInput {
                samples: &self.samples[start..start + w],
                anchors: &anchors,
                previous_calibration: prev,
                mask,
                mode,
                soft_constraint_variance: 1e-6,
            };
            build_problem(&self.model, &input, &Weights::new(&NoiseConfig::default()).unwrap()).unwrap()
        }
    }

    fn no_velocity() -> TermMask {
        TermMask { velocity: false, ..TermMask::default() }
    }

    #[test]
    fn block_counts_of_study_batch() {
        let f = fixture();
        let p = f.problem(100, 10, None, TermMask::default(), ConstraintMode::Hard);
        let c = p.block_counts();
        let expected = [
            (BlockTag::Motion, 18),
            (BlockTag::Gyro, 20),
            (BlockTag::Coupling, 20),
            (BlockTag::JointVelocity, 10),
            (BlockTag::Hinge, 10),
            (BlockTag::RangeOfMotion, 10),
            (BlockTag::FixedPosition, 10),
            (BlockTag::BatchInit, 2),
            (BlockTag::ShapePosition, 2),
            (BlockTag::ShapeOrientation, 2),
            (BlockTag::Connected, 20),
        ];
        for (tag, n) in expected {
            assert_eq!(c.get(&tag), Some(&n), "{tag:?}");
        }
        assert!(!c.contains_key(&BlockTag::CalibrationSmoothness));
        assert_eq!(p.constraints.len(), 20);
        assert_eq!(p.tangent_dim(), 372);
        assert!(unreferenced_variables(&p, &f.state(100, 10)).is_empty());

        let prev = study_calibration();
        let p = f.problem(100, 10, Some(&prev), TermMask::default(), ConstraintMode::Soft);
        assert_eq!(p.block_counts()[&BlockTag::CalibrationSmoothness], 2);
        assert!(p.constraints.is_empty());
        assert_eq!(p.block_counts()[&BlockTag::Connected], 20);
    }

    #[test]
    fn minimal_batch_and_input_errors() {
        let f = fixture();
        let p = f.problem(0, 2, None, TermMask::default(), ConstraintMode::Hard);
        assert_eq!(p.block_counts()[&BlockTag::Motion], 2);
        assert_eq!(p.tangent_dim(), 2 * (24 + 12) + 12);

        let weights = Weights::new(&NoiseConfig::default()).unwrap();
        let anchors = f.anchors(0);
        let mut input = BatchInput {
            samples: &f.samples[0..1],
            anchors: &anchors,
            previous_calibration: None,
            mask: TermMask::default(),
            mode: ConstraintMode::Hard,
            soft_constraint_variance: 1e-6,
        };
        assert!(matches!(build_problem(&f.model, &input, &weights), Err(SolverError::TooShort(1))));
        let mut short = f.samples[0..3].to_vec();
        short[1].pop();
        input.samples = &short;
        assert!(matches!(build_problem(&f.model, &input, &weights), Err(SolverError::MissingSamples { t: 1, .. })));
    }

    #[test]
    fn truth_is_a_fixed_point_without_velocity_term() {
        // The joint-velocity term is not exactly zero at discrete-time truth.
        let f = fixture();
        let p = f.problem(200, 10, Some(&study_calibration()), no_velocity(), ConstraintMode::Hard);
        let x0 = f.state(200, 10);
        let (x, r) = solve(&p, &f.model, &x0, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2, "{}", r.iterations);
        assert!(r.objective < 1e-10, "{:e}", r.objective);
        for (a, b) in x.cal.iter().zip(&x0.cal) {
            assert!(angular_offset(&a.orientation, &b.orientation) < 1e-6);
        }
    }

    #[test]
    fn infeasible_start_becomes_feasible() {
        let f = fixture();
        let p = f.problem(300, 10, Some(&study_calibration()), TermMask::default(), ConstraintMode::Hard);
        let mut x0 = f.state(300, 10);
        for row in &mut x0.seg {
            row[1].position += Vec3::new(0.1, 0.0, 0.0);
        }
        let (_, c0) = p.cost(&x0, &f.model).unwrap();
        assert!(c0.amax() > 0.09);
        for max_iterations in [1, 50] {
            // Also far from the rest of the batch: a wrong IMU orientation.
            let mut x0 = x0.clone();
            x0.imu[0][0].orientation = quat_mul(&x0.imu[0][0].orientation, &rot_x(0.6));
            let cfg = SolverConfig { max_iterations, ..SolverConfig::default() };
            let (x, r) = solve(&p, &f.model, &x0, &cfg).unwrap();
            let (_, c) = p.cost(&x, &f.model).unwrap();
            assert!(c.amax() < 1e-6, "{max_iterations}: {:e}", c.amax());
            assert!(r.max_constraint_violation < 1e-6);
        }
    }

    #[test]
    fn soft_mode_objective_is_monotone_and_quaternions_stay_unit() {
        let f = fixture();
        let p = f.problem(150, 10, Some(&study_calibration()), TermMask::default(), ConstraintMode::Soft);
        let mut x0 = f.state(150, 10);
        for row in &mut x0.imu {
            row[0].orientation = quat_mul(&row[0].orientation, &rot_x(20f64.to_radians()));
        }
        let cfg = SolverConfig { mode: ConstraintMode::Soft, ..SolverConfig::default() };
        let mut last = p.cost(&x0, &f.model).unwrap().0;
        for k in 1..=12 {
            let (x, r) = solve(&p, &f.model, &x0, &SolverConfig { max_iterations: k, ..cfg.clone() }).unwrap();
            assert!(r.objective <= last * (1.0 + 1e-12), "iteration {k}: {} > {last}", r.objective);
            last = r.objective;
            let quats = x
                .imu
                .iter()
                .flat_map(|row| row.iter().map(|s| s.orientation))
                .chain(x.seg.iter().flat_map(|row| row.iter().map(|s| s.orientation)))
                .chain(x.cal.iter().map(|c| c.orientation));
            for q in quats {
                assert!((q.norm() - 1.0).abs() < 1e-9);
            }
        }
        let (x, _) = solve(&p, &f.model, &x0, &cfg).unwrap();
        let worst = p.residuals_of(BlockTag::Connected, &x, &f.model).iter().map(|r| r.amax()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst:e}");
    }

    #[test]
    fn soft_and_hard_modes_agree() {
        let f = fixture();
        let prev = study_calibration();
        let mut x0 = f.state(250, 10);
        x0.cal[0] = apply_offset(&prev[0], 2.0, -2.0);
        let mut out = Vec::new();
        for mode in [ConstraintMode::Hard, ConstraintMode::Soft] {
            let p = f.problem(250, 10, Some(&prev), TermMask::default(), mode);
            let cfg = SolverConfig { mode, max_iterations: 100, ..SolverConfig::default() };
            out.push(solve(&p, &f.model, &x0, &cfg).unwrap().0);
        }
        for (a, b) in out[0].cal.iter().zip(&out[1].cal) {
            let ang = angular_offset(&a.orientation, &b.orientation);
            assert!(ang < 0.1, "{ang}°");
            assert!((a.position - b.position).norm() < 1e-3);
        }
    }

    #[test]
    fn heading_does_not_leak_into_calibration() {
        let f = fixture();
        let prev = vec![apply_offset(&study_calibration()[0], 10.0, 10.0), study_calibration()[1]];
        let x0 = BatchState { cal: prev.clone(), ..f.state(120, 10) };
        let yaw = rot_z(0.8);
        let r = quat_to_rotmat(&yaw);
        let mut x1 = x0.clone();
        for row in &mut x1.imu {
            for s in row {
                s.position = r * s.position;
                s.velocity = r * s.velocity;
                s.orientation = quat_mul(&yaw, &s.orientation);
            }
        }
        for row in &mut x1.seg {
            for s in row {
                s.position = r * s.position;
                s.orientation = quat_mul(&yaw, &s.orientation);
            }
        }
        let weights = Weights::new(&NoiseConfig::default()).unwrap();
        let mut cals = Vec::new();
        for x in [&x0, &x1] {
            let anchors: Vec<Quat> = x.imu[0].iter().map(|s| s.orientation).collect();
            let input = BatchInput {
                samples: &f.samples[120..130],
                anchors: &anchors,
                previous_calibration: Some(&prev),
                mask: TermMask::default(),
                mode: ConstraintMode::Hard,
                soft_constraint_variance: 1e-6,
            };
            let p = build_problem(&f.model, &input, &weights).unwrap();
            cals.push(solve(&p, &f.model, x, &SolverConfig::default()).unwrap().0.cal);
        }
        for (a, b) in cals[0].iter().zip(&cals[1]) {
            assert!(angular_offset(&a.orientation, &b.orientation) < 0.1);
        }
    }

    #[test]
    fn hessian_pattern_matches_footprints() {
        let f = fixture();
        let p = f.problem(40, 10, Some(&study_calibration()), TermMask::default(), ConstraintMode::Hard);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = f.state(40, 10);
        let dx = DVector::from_fn(x0.tangent_dim(), |_, _| rng.random_range(-0.1..0.1));
        let x = x0.retract(&dx);
        let lin = p.linearize(&x, &f.model).unwrap();
        let pattern = p.nonzero_pattern(&x);
        let n = lin.hessian.nrows();
        for i in 0..n {
            for j in 0..n {
                if lin.hessian[(i, j)] != 0.0 {
                    assert!(pattern.contains(&(i / 3, j / 3)), "({i}, {j})");
                }
            }
        }
        // Arrow: only the 6|I| calibration columns couple distant time steps.
        let cal0 = x.len() * 36;
        assert_eq!(n - cal0, 12);
        let stride_blocks = 12;
        for &(a, b) in &pattern {
            if a * 3 < cal0 && b * 3 < cal0 {
                assert!((a / stride_blocks).abs_diff(b / stride_blocks) <= 1, "({a}, {b})");
            }
        }
    }

    #[test]
    fn profile_cholesky_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let band = 4;
        let arrow = 6;
        let mut j = DMatrix::zeros(3 * n, n);
        for r in 0..3 * n {
            let c = (r / 3).min(n - arrow - 1);
            for k in c..(c + band).min(n - arrow) {
                j[(r, k)] = rng.random_range(-1.0..1.0);
            }
            for k in n - arrow..n {
                j[(r, k)] = rng.random_range(-1.0..1.0);
            }
        }
        let a = j.transpose() * &j;
        let first: Vec<usize> = (0..n).map(|i| (0..=i).find(|&k| a[(i, k)] != 0.0).unwrap()).collect();
        let shift = vec![0.5; n];
        let chol = ProfileCholesky::factor(&a, &shift, &first).unwrap();
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let got = chol.solve(&b);
        let dense = (&a + DMatrix::from_diagonal(&DVector::from_element(n, 0.5))).cholesky().unwrap().solve(&b);
        assert!((got - dense).amax() < 1e-10);
        let indefinite = -DMatrix::<f64>::identity(3, 3);
        assert!(ProfileCholesky::factor(&indefinite, &[0.0; 3], &[0, 1, 2]).is_none());
    }

    #[test]
    fn nan_state_names_the_block() {
        let f = fixture();
        let p = f.problem(0, 10, None, TermMask::default(), ConstraintMode::Hard);
        let mut x = f.state(0, 10);
        x.imu[3][1].velocity.x = f64::NAN;
        let err = p.linearize(&x, &f.model).unwrap_err();
        match err {
            SolverError::NonFinite(name) => assert!(name.contains("imu 1") && name.contains("t "), "{name}"),
            e => panic!("unexpected {e}"),
        }
        assert!(p.cost(&x, &f.model).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { constraint_tolerance: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { damping_scale: 1.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TermMask::default().label(), "c+h+v+s");
        assert_eq!(TermMask { hinge: false, velocity: false, shape: false, connected: true }.label(), "c");
    }
}
