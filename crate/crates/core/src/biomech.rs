//! Static body description and capsule geometry.
//!
//! A body is a tree of rigid segments. Each segment frame has its origin in the
//! proximal joint centre and its z-axis pointing along the segment vector. Soft
//! tissue is approximated by a capsule around the segment whose radius varies
//! linearly between the proximal and distal joint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{Quat, Vec3};

/// Tolerance under which an IMU position counts as lying on the segment axis.
pub const AXIS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub name: String,
    /// Points from the proximal to the distal joint, in segment coordinates.
    pub vector: Vec3,
    pub proximal_radius: f64,
    pub distal_radius: f64,
}

impl SegmentSpec {
    pub fn length(&self) -> f64 {
        self.vector.norm()
    }

    pub fn axis(&self) -> Vec3 {
        self.vector / self.length()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JointKind {
    Ball,
    Hinge {
        /// Rotation axis, identical in both segment frames.
        axis: Vec3,
        rom_min_deg: f64,
        rom_max_deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// `None` for a joint that attaches the root segment to the world.
    pub parent: Option<String>,
    pub child: String,
    #[serde(flatten)]
    pub kind: JointKind,
    /// World position of a root joint. Ignored for inter-segment joints.
    #[serde(default = "Vec3::zeros")]
    pub anchor: Vec3,
}

impl JointSpec {
    pub fn hinge(&self) -> Option<(Vec3, f64, f64)> {
        match &self.kind {
            JointKind::Ball => None,
            JointKind::Hinge { axis, rom_min_deg, rom_max_deg } => {
                Some((*axis, rom_min_deg.to_radians(), rom_max_deg.to_radians()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuAttachment {
    pub name: String,
    pub segment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSpec {
    pub segment: String,
    pub local_point: Vec3,
    pub global_point: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub gravity: Vec3,
    pub magnetic_field: Vec3,
    /// Sample period in seconds.
    pub sample_period: f64,
    /// Skip the `‖g‖ ∈ [9.7, 9.9]` plausibility check.
    #[serde(default)]
    pub allow_unusual_gravity: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let dip = 60f64.to_radians();
        Self {
            gravity: Vec3::new(0.0, 0.0, -9.81),
            magnetic_field: Vec3::new(dip.cos(), 0.0, -dip.sin()),
            sample_period: 0.01,
            allow_unusual_gravity: false,
        }
    }
}

/// Relative pose of one IMU with respect to its segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationEntry {
    /// `q^SI`
    pub orientation: Quat,
    /// `I^S`, metres.
    pub position: Vec3,
}

/// Calibration of every IMU, in the IMU order of the body model.
pub type I2SCalibration = Vec<CalibrationEntry>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    pub segments: Vec<SegmentSpec>,
    pub joints: Vec<JointSpec>,
    pub imus: Vec<ImuAttachment>,
    #[serde(default)]
    pub fixed_points: Vec<FixedPointSpec>,
    #[serde(default)]
    pub world: WorldConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelViolation {
    DuplicateName(String),
    DegenerateSegment(String),
    NonPositiveRadius(String),
    UnknownSegment { referenced_by: String, segment: String },
    HingeAxisNotUnit(String),
    EmptyRangeOfMotion(String),
    SegmentWithSeveralParents(String),
    ImuCountOnSegment { segment: String, count: usize },
    NotATree(String),
    Gravity(f64),
    SamplePeriod(f64),
    MagneticField,
    NoImus,
}

impl fmt::Display for ModelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateName(n) => write!(f, "name '{n}' is used more than once"),
            Self::DegenerateSegment(n) => write!(f, "segment '{n}' has a zero-length vector"),
            Self::NonPositiveRadius(n) => write!(f, "segment '{n}' has a non-positive capsule radius"),
            Self::UnknownSegment { referenced_by, segment } => {
                write!(f, "'{referenced_by}' references unknown segment '{segment}'")
            }
            Self::HingeAxisNotUnit(n) => write!(f, "hinge '{n}' axis is not unit length"),
            Self::EmptyRangeOfMotion(n) => write!(f, "hinge '{n}' has rom_min >= rom_max"),
            Self::SegmentWithSeveralParents(n) => write!(f, "segment '{n}' is the child of several joints"),
            Self::ImuCountOnSegment { segment, count } => {
                write!(f, "segment '{segment}' carries {count} IMUs (at most one allowed)")
            }
            Self::NotATree(msg) => write!(f, "joints do not form a connected tree: {msg}"),
            Self::Gravity(g) => write!(f, "gravity magnitude {g} outside [9.7, 9.9]"),
            Self::SamplePeriod(t) => write!(f, "sample period {t} must be positive"),
            Self::MagneticField => write!(f, "magnetic field reference must be a unit vector"),
            Self::NoImus => write!(f, "model has no IMUs"),
        }
    }
}

#[derive(Debug, Error)]
pub enum BiomechError {
    #[error("projection {pr} outside segment range [0, {length}]")]
    ProjectionOutOfRange { pr: f64, length: f64 },
    #[error("IMU position lies on the segment axis; surface normal undefined")]
    OnAxis,
    #[error("invalid body model: {0}")]
    InvalidModel(String),
}

/// Index-resolved view of a valid [`BodyModel`].
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub model: BodyModel,
    /// Segment carrying each IMU.
    pub imu_segment: Vec<usize>,
    /// IMU mounted on each segment, if any.
    pub segment_imu: Vec<Option<usize>>,
    /// `(parent, child)` segment indices per joint.
    pub joint_segments: Vec<(Option<usize>, usize)>,
    pub fixed_segments: Vec<usize>,
    /// Joints in parent-before-child order.
    pub joint_order: Vec<usize>,
}

impl ResolvedModel {
    pub fn new(model: BodyModel) -> Result<Self, BiomechError> {
        let violations = validate_model(&model);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(BiomechError::InvalidModel(msg.join("; ")));
        }
        let idx = |name: &str| model.segments.iter().position(|s| s.name == name).unwrap();
        let imu_segment: Vec<usize> = model.imus.iter().map(|i| idx(&i.segment)).collect();
        let mut segment_imu = vec![None; model.segments.len()];
        for (i, &s) in imu_segment.iter().enumerate() {
            segment_imu[s] = Some(i);
        }
        let joint_segments: Vec<(Option<usize>, usize)> = model
            .joints
            .iter()
            .map(|j| (j.parent.as_deref().map(idx), idx(&j.child)))
            .collect();
        let fixed_segments = model.fixed_points.iter().map(|f| idx(&f.segment)).collect();

        // Breadth-first from the roots.
        let mut placed = vec![false; model.segments.len()];
        let mut joint_order = Vec::new();
        let mut remaining: Vec<usize> = (0..model.joints.len()).collect();
        for (s, flag) in placed.iter_mut().enumerate() {
            if !joint_segments.iter().any(|(p, c)| p.is_some() && *c == s) {
                *flag = true;
            }
        }
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|&j| {
                let (p, c) = joint_segments[j];
                if p.map_or(true, |p| placed[p]) {
                    placed[c] = true;
                    joint_order.push(j);
                    false
                } else {
                    true
                }
            });
            if remaining.len() == before {
                return Err(BiomechError::InvalidModel("cyclic joint graph".into()));
            }
        }

        Ok(Self { model, imu_segment, segment_imu, joint_segments, fixed_segments, joint_order })
    }

    pub fn num_imus(&self) -> usize {
        self.model.imus.len()
    }

    pub fn num_segments(&self) -> usize {
        self.model.segments.len()
    }

    pub fn segment(&self, s: usize) -> &SegmentSpec {
        &self.model.segments[s]
    }

    pub fn world(&self) -> &WorldConfig {
        &self.model.world
    }

    /// Inter-segment joints whose both segments carry an IMU; these get a
    /// joint-velocity residual. Returns `(joint, parent imu, child imu)`.
    pub fn velocity_joints(&self) -> Vec<(usize, usize, usize)> {
        self.joint_segments
            .iter()
            .enumerate()
            .filter_map(|(j, &(p, c))| {
                let p = p?;
                Some((j, self.segment_imu[p]?, self.segment_imu[c]?))
            })
            .collect()
    }
}

/// Structural checks on a body model. An empty list means the model is usable.
pub fn validate_model(model: &BodyModel) -> Vec<ModelViolation> {
    let mut out = Vec::new();
    let mut names = BTreeSet::new();
    for n in model
        .segments
        .iter()
        .map(|s| &s.name)
        .chain(model.joints.iter().map(|j| &j.name))
        .chain(model.imus.iter().map(|i| &i.name))
    {
        if !names.insert(n.clone()) {
            out.push(ModelViolation::DuplicateName(n.clone()));
        }
    }
    let seg_names: BTreeSet<&str> = model.segments.iter().map(|s| s.name.as_str()).collect();
    let check_ref = |owner: &str, seg: &str, out: &mut Vec<ModelViolation>| {
        let ok = seg_names.contains(seg);
        if !ok {
            out.push(ModelViolation::UnknownSegment { referenced_by: owner.into(), segment: seg.into() });
        }
        ok
    };

    for s in &model.segments {
        if !(s.vector.norm() > 0.0) {
            out.push(ModelViolation::DegenerateSegment(s.name.clone()));
        }
        if !(s.proximal_radius > 0.0 && s.distal_radius > 0.0) {
            out.push(ModelViolation::NonPositiveRadius(s.name.clone()));
        }
    }

    let mut refs_ok = true;
    let mut parent_of: BTreeMap<&str, Vec<Option<&str>>> = BTreeMap::new();
    for j in &model.joints {
        if let Some(p) = &j.parent {
            refs_ok &= check_ref(&j.name, p, &mut out);
        }
        refs_ok &= check_ref(&j.name, &j.child, &mut out);
        parent_of.entry(j.child.as_str()).or_default().push(j.parent.as_deref());
        if let JointKind::Hinge { axis, rom_min_deg, rom_max_deg } = &j.kind {
            if (axis.norm() - 1.0).abs() > 1e-9 {
                out.push(ModelViolation::HingeAxisNotUnit(j.name.clone()));
            }
            if !(rom_min_deg < rom_max_deg) {
                out.push(ModelViolation::EmptyRangeOfMotion(j.name.clone()));
            }
        }
    }

    let mut per_segment: BTreeMap<&str, usize> = BTreeMap::new();
    for i in &model.imus {
        if check_ref(&i.name, &i.segment, &mut out) {
            *per_segment.entry(i.segment.as_str()).or_default() += 1;
        }
    }
    for (seg, count) in per_segment {
        if count > 1 {
            out.push(ModelViolation::ImuCountOnSegment { segment: seg.into(), count });
        }
    }
    for f in &model.fixed_points {
        check_ref("fixed point", &f.segment, &mut out);
    }
    if model.imus.is_empty() {
        out.push(ModelViolation::NoImus);
    }

    if refs_ok {
        for (child, parents) in &parent_of {
            if parents.len() > 1 {
                out.push(ModelViolation::SegmentWithSeveralParents((*child).into()));
            }
        }
        // Undirected connectivity over inter-segment joints; with n segments a tree has n-1 edges.
        let edges: Vec<(&str, &str)> = model
            .joints
            .iter()
            .filter_map(|j| j.parent.as_deref().map(|p| (p, j.child.as_str())))
            .collect();
        let n = model.segments.len();
        if n > 0 {
            let mut seen = BTreeSet::new();
            let mut stack = vec![model.segments[0].name.as_str()];
            while let Some(s) = stack.pop() {
                if seen.insert(s) {
                    for &(a, b) in &edges {
                        if a == s {
                            stack.push(b);
                        }
                        if b == s {
                            stack.push(a);
                        }
                    }
                }
            }
            if seen.len() != n {
                out.push(ModelViolation::NotATree(format!("{} of {n} segments reachable", seen.len())));
            } else if edges.len() != n - 1 {
                out.push(ModelViolation::NotATree(format!("{} inter-segment joints for {n} segments", edges.len())));
            }
        }
    }

    let w = &model.world;
    let g = w.gravity.norm();
    if !w.allow_unusual_gravity && !(9.7..=9.9).contains(&g) {
        out.push(ModelViolation::Gravity(g));
    }
    if !(w.sample_period > 0.0) {
        out.push(ModelViolation::SamplePeriod(w.sample_period));
    }
    if (w.magnetic_field.norm() - 1.0).abs() > 1e-6 {
        out.push(ModelViolation::MagneticField);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsuleRegion {
    BelowProximal,
    Lateral,
    BeyondDistal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleProjection {
    /// Signed length of the projection onto the segment axis.
    pub pr: f64,
    /// Component of the position orthogonal to the segment.
    pub orthogonal: Vec3,
    pub region: CapsuleRegion,
    /// The normalised direction used by the shape prior is undefined.
    pub degenerate: bool,
}

pub fn capsule_project(position: &Vec3, seg: &SegmentSpec) -> CapsuleProjection {
    let len = seg.length();
    let axis = seg.axis();
    let pr = position.dot(&axis);
    let orthogonal = position - axis * pr;
    let region = if pr < 0.0 {
        CapsuleRegion::BelowProximal
    } else if pr > len {
        CapsuleRegion::BeyondDistal
    } else {
        CapsuleRegion::Lateral
    };
    let degenerate = match region {
        CapsuleRegion::BelowProximal => position.norm() < AXIS_EPS,
        CapsuleRegion::Lateral => orthogonal.norm() < AXIS_EPS,
        CapsuleRegion::BeyondDistal => (position - seg.vector).norm() < AXIS_EPS,
    };
    CapsuleProjection { pr, orthogonal, region, degenerate }
}

/// Capsule radius at projection length `pr`, linear between the joint radii.
pub fn capsule_radius_at(pr: f64, seg: &SegmentSpec) -> Result<f64, BiomechError> {
    let len = seg.length();
    if !(0.0..=len).contains(&pr) {
        return Err(BiomechError::ProjectionOutOfRange { pr, length: len });
    }
    Ok(seg.proximal_radius + pr / len * (seg.distal_radius - seg.proximal_radius))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceFrame {
    pub normal: Vec3,
    pub tangent1: Vec3,
    pub tangent2: Vec3,
}

/// Outward normal and two tangents of the capsule at the point closest to `position`.
pub fn surface_frame(position: &Vec3, seg: &SegmentSpec) -> Result<SurfaceFrame, BiomechError> {
    let proj = capsule_project(position, seg);
    if proj.degenerate {
        return Err(BiomechError::OnAxis);
    }
    let axis = seg.axis();
    let frame = match proj.region {
        CapsuleRegion::Lateral => {
            let normal = proj.orthogonal.normalize();
            SurfaceFrame { normal, tangent1: axis, tangent2: normal.cross(&axis) }
        }
        CapsuleRegion::BelowProximal => cap_frame(position.normalize()),
        CapsuleRegion::BeyondDistal => cap_frame((position - seg.vector).normalize()),
    };
    Ok(frame)
}

/// Axis of the segment frame least aligned with `n`; ties resolve to the lowest index.
pub fn least_aligned_axis(n: &Vec3) -> usize {
    let a = n.abs();
    if a.x <= a.y && a.x <= a.z {
        0
    } else if a.y <= a.z {
        1
    } else {
        2
    }
}

fn cap_frame(normal: Vec3) -> SurfaceFrame {
    let mut a = Vec3::zeros();
    a[least_aligned_axis(&normal)] = 1.0;
    let tangent1 = (a - normal * a.dot(&normal)).normalize();
    SurfaceFrame { normal, tangent1, tangent2: normal.cross(&tangent1) }
}

impl BodyModel {
    /// Two segments of 0.3 m with 0.1 m capsules: a ball joint pins the root
    /// segment to the origin and a hinge about x (RoM 0°..162°) links the two.
    pub fn two_segment_study() -> Self {
        let seg = |name: &str| SegmentSpec {
            name: name.into(),
            vector: Vec3::new(0.0, 0.0, 0.3),
            proximal_radius: 0.1,
            distal_radius: 0.1,
        };
        Self {
            segments: vec![seg("S0"), seg("S1")],
            joints: vec![
                JointSpec {
                    name: "J0".into(),
                    parent: None,
                    child: "S0".into(),
                    kind: JointKind::Ball,
                    anchor: Vec3::zeros(),
                },
                JointSpec {
                    name: "J1".into(),
                    parent: Some("S0".into()),
                    child: "S1".into(),
                    kind: JointKind::Hinge { axis: Vec3::x(), rom_min_deg: 0.0, rom_max_deg: 162.0 },
                    anchor: Vec3::zeros(),
                },
            ],
            imus: vec![
                ImuAttachment { name: "I0".into(), segment: "S0".into() },
                ImuAttachment { name: "I1".into(), segment: "S1".into() },
            ],
            fixed_points: vec![FixedPointSpec {
                segment: "S0".into(),
                local_point: Vec3::zeros(),
                global_point: Vec3::zeros(),
            }],
            world: WorldConfig::default(),
        }
    }
}
