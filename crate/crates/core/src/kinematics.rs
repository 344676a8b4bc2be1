//! Kinematic model of a seated human torso and left arm.
//!
//! The chain has nine revolute joints: a 3-DoF torso (yaw, pitch, roll), a
//! 3-DoF shoulder, a 1-DoF elbow and a 2-DoF wrist. With every joint at zero
//! the torso is upright and the arm hangs straight down from the shoulder.

use nalgebra::{Isometry3, Matrix3, SMatrix, SVector, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 9;

pub type JointVector = SVector<f64, NUM_JOINTS>;
pub type Jacobian = SMatrix<f64, 3, NUM_JOINTS>;
pub type JacobianInverse = SMatrix<f64, NUM_JOINTS, 3>;
pub type NullspaceProjector = SMatrix<f64, NUM_JOINTS, NUM_JOINTS>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkLengths {
    pub torso: f64,
    pub shoulder_offset: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub hand: f64,
}

impl LinkLengths {
    pub fn total(&self) -> f64 {
        self.torso + self.shoulder_offset + self.upper_arm + self.forearm + self.hand
    }

    /// Reach of the arm alone, shoulder to grasp point.
    pub fn arm_span(&self) -> f64 {
        self.upper_arm + self.forearm + self.hand
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub lower: f64,
    pub upper: f64,
}

impl JointLimit {
    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper
    }
}

/// Immutable description of the 9-DoF torso and arm chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArmModel")]
pub struct ArmModel {
    pub link_lengths: LinkLengths,
    pub joint_axes: [Vector3<f64>; NUM_JOINTS],
    pub joint_limits: [JointLimit; NUM_JOINTS],
    pub theta_sec: JointVector,
    pub base_pose: Isometry3<f64>,
}

#[derive(Deserialize)]
struct RawArmModel {
    link_lengths: LinkLengths,
    joint_axes: [Vector3<f64>; NUM_JOINTS],
    joint_limits: [JointLimit; NUM_JOINTS],
    theta_sec: JointVector,
    base_pose: Isometry3<f64>,
}

impl TryFrom<RawArmModel> for ArmModel {
    type Error = Error;

    fn try_from(raw: RawArmModel) -> Result<Self> {
        ArmModel::new(raw.link_lengths, raw.joint_axes, raw.joint_limits, raw.theta_sec, raw.base_pose)
    }
}

/// Joint positions and velocities of the chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointState {
    pub theta: JointVector,
    pub theta_dot: JointVector,
}

impl JointState {
    pub fn at_rest(theta: JointVector) -> Self {
        Self {
            theta,
            theta_dot: JointVector::zeros(),
        }
    }

    /// Explicit Euler step followed by a clamp onto the joint limits.
    pub fn integrate(&mut self, model: &ArmModel, theta_dot: JointVector, dt: f64) {
        self.theta_dot = theta_dot;
        self.theta += theta_dot * dt;
        model.clamp(&mut self.theta);
    }
}

impl ArmModel {
    pub fn new(
        link_lengths: LinkLengths,
        joint_axes: [Vector3<f64>; NUM_JOINTS],
        joint_limits: [JointLimit; NUM_JOINTS],
        theta_sec: JointVector,
        base_pose: Isometry3<f64>,
    ) -> Result<Self> {
        let lengths = [
            link_lengths.torso,
            link_lengths.shoulder_offset,
            link_lengths.upper_arm,
            link_lengths.forearm,
            link_lengths.hand,
        ];
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Parameter(format!("link lengths must be positive: {lengths:?}")));
        }
        for (i, axis) in joint_axes.iter().enumerate() {
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("joint {i} axis is not unit norm")));
            }
        }
        for (i, limit) in joint_limits.iter().enumerate() {
            if !(limit.lower < limit.upper) {
                return Err(Error::Parameter(format!("joint {i} limits are not ordered")));
            }
        }
        let model = Self {
            link_lengths,
            joint_axes,
            joint_limits,
            theta_sec,
            base_pose,
        };
        if !model.within_limits(&theta_sec) {
            return Err(Error::Parameter("theta_sec violates joint limits".into()));
        }
        Ok(model)
    }

    /// The documented seated-adult geometry.
    pub fn standard() -> Self {
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        let limits = config::JOINT_LIMITS.map(|l| JointLimit { lower: -l, upper: l });
        Self::new(
            LinkLengths {
                torso: config::TORSO_LENGTH,
                shoulder_offset: config::SHOULDER_OFFSET,
                upper_arm: config::UPPER_ARM_LENGTH,
                forearm: config::FOREARM_LENGTH,
                hand: config::HAND_LENGTH,
            },
            // Pitch uses -x so that positive values lean the torso forward.
            [z, -x, y, x, y, z, x, x, y],
            limits,
            JointVector::from(config::SECONDARY_POSTURE),
            Isometry3::from_parts(
                Translation3::from(Vector3::from(config::TORSO_BASE)),
                UnitQuaternion::identity(),
            ),
        )
        .expect("standard arm model is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn within_limits(&self, theta: &JointVector) -> bool {
        theta.iter().zip(&self.joint_limits).all(|(t, l)| l.contains(*t))
    }

    pub fn clamp(&self, theta: &mut JointVector) {
        for (t, l) in theta.iter_mut().zip(&self.joint_limits) {
            *t = t.clamp(l.lower, l.upper);
        }
    }

    fn check_limits(&self, theta: &JointVector) -> Result<()> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("joint vector is not finite".into()));
        }
        for (i, (t, l)) in theta.iter().zip(&self.joint_limits).enumerate() {
            if !l.contains(*t) {
                return Err(Error::Domain(format!(
                    "joint {i} = {t} outside [{}, {}]",
                    l.lower, l.upper
                )));
            }
        }
        Ok(())
    }

    /// Offset of joint `i` from the previous joint, in the previous joint's frame.
    fn joint_offset(&self, i: usize) -> Vector3<f64> {
        let l = &self.link_lengths;
        match i {
            3 => Vector3::new(-l.shoulder_offset, 0.0, l.torso),
            6 => Vector3::new(0.0, 0.0, -l.upper_arm),
            7 => Vector3::new(0.0, 0.0, -l.forearm),
            _ => Vector3::zeros(),
        }
    }

    fn tool_offset(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.link_lengths.hand)
    }

    /// World position of the shoulder joint when the torso is at `theta`.
    pub fn shoulder_position(&self, theta: &JointVector) -> Vector3<f64> {
        let mut rotation = *self.base_pose.rotation.to_rotation_matrix().matrix();
        let mut position = self.base_pose.translation.vector;
        for i in 0..3 {
            position += rotation * self.joint_offset(i);
            rotation *= axis_rotation(&self.joint_axes[i], theta[i]);
        }
        position + rotation * self.joint_offset(3)
    }

    /// Hand (grasp point) position in the world frame.
    pub fn forward_kinematics(&self, theta: &JointVector) -> Result<Vector3<f64>> {
        self.check_limits(theta)?;
        Ok(self.chain(theta, |_, _, _| {}))
    }

    /// Hand position and the 3x9 positional Jacobian.
    pub fn jacobian(&self, theta: &JointVector) -> Result<(Vector3<f64>, Jacobian)> {
        self.check_limits(theta)?;
        Ok(self.hand_and_jacobian(theta))
    }

    /// Unchecked evaluation used inside the integration loop, where the state
    /// is clamped to the limits by construction.
    pub(crate) fn hand_and_jacobian(&self, theta: &JointVector) -> (Vector3<f64>, Jacobian) {
        let mut axes = [Vector3::zeros(); NUM_JOINTS];
        let mut origins = [Vector3::zeros(); NUM_JOINTS];
        let hand = self.chain(theta, |i, axis, origin| {
            axes[i] = axis;
            origins[i] = origin;
        });
        let mut jac = Jacobian::zeros();
        for i in 0..NUM_JOINTS {
            jac.set_column(i, &axes[i].cross(&(hand - origins[i])));
        }
        (hand, jac)
    }

    pub(crate) fn hand_unchecked(&self, theta: &JointVector) -> Vector3<f64> {
        self.chain(theta, |_, _, _| {})
    }

    /// Walks the chain, reporting each joint's world axis and origin.
    fn chain(
        &self,
        theta: &JointVector,
        mut visit: impl FnMut(usize, Vector3<f64>, Vector3<f64>),
    ) -> Vector3<f64> {
        let mut rotation = *self.base_pose.rotation.to_rotation_matrix().matrix();
        let mut position = self.base_pose.translation.vector;
        for i in 0..NUM_JOINTS {
            position += rotation * self.joint_offset(i);
            visit(i, rotation * self.joint_axes[i], position);
            rotation *= axis_rotation(&self.joint_axes[i], theta[i]);
        }
        position + rotation * self.tool_offset()
    }
}

fn axis_rotation(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&Unit::new_unchecked(*axis), angle).matrix()
}

/// Damped least-squares inverse `J^T (J J^T + damping^2 I)^-1`.
///
/// With `damping == 0` this is the Moore-Penrose inverse of a full-rank `J`;
/// a rank-deficient `J` is then reported as singular.
pub fn pseudo_inverse(jac: &Jacobian, damping: f64) -> Result<JacobianInverse> {
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::Parameter(format!("damping must be >= 0, got {damping}")));
    }
    let gram = jac * jac.transpose();
    if damping == 0.0 {
        let eig = gram.symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        if !(max > 0.0) || min <= max * 1e-12 {
            return Err(Error::Singular("Jacobian is rank deficient; use damping > 0".into()));
        }
    }
    let damped = gram + Matrix3::identity() * (damping * damping);
    let inverse = damped
        .cholesky()
        .ok_or_else(|| Error::Singular("J J^T + damping^2 I is not positive definite".into()))?
        .inverse();
    Ok(jac.transpose() * inverse)
}

/// `I - J_dagger J`, the projector onto motions that leave the hand still.
pub fn nullspace_projector(jac_dagger: &JacobianInverse, jac: &Jacobian) -> NullspaceProjector {
    NullspaceProjector::identity() - jac_dagger * jac
}
