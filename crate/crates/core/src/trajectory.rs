//! Reaching trajectory generator: a task-space PID controller with a
//! repulsive potential field, mapped to joint space through the damped
//! Jacobian inverse with a nullspace posture objective.

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{Error, Result};
use crate::kinematics::{nullspace_projector, pseudo_inverse, ArmModel, JointState, JointVector};
use crate::scene::Scene;

/// Time-stamped hand positions sampled at a fixed rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Vector3<f64>>,
    pub dt: f64,
    /// Onset time of the first point (s).
    pub t0: f64,
}

impl Trajectory {
    pub fn new(points: Vec<Vector3<f64>>, dt: f64) -> Self {
        Self { points, dt, t0: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<&Vector3<f64>> {
        self.points.last()
    }

    /// The first `count` points (all of them if shorter).
    pub fn prefix(&self, count: usize) -> Trajectory {
        Trajectory {
            points: self.points[..count.min(self.points.len())].to_vec(),
            dt: self.dt,
            t0: self.t0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub k_rep: f64,
    /// Output sample period (s).
    pub dt: f64,
    /// Number of output samples.
    pub horizon: usize,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            k_p: 6.0,
            k_i: 0.01,
            k_d: 0.1,
            k_rep: 8.5,
            dt: 1.0 / config::SAMPLE_RATE,
            horizon: config::HORIZON,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Parameter("dt must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Parameter("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that maps a reach target to a hand trajectory: the controller
/// simulation or a learned surrogate of it.
pub trait TrajectorySource: Sync {
    fn generate(&self, target: &Vector3<f64>) -> Result<Trajectory>;

    /// Generates one trajectory per target, in order. The first failure aborts
    /// with the index of the offending target.
    fn generate_batch(&self, targets: &[Vector3<f64>]) -> Result<Vec<Trajectory>> {
        targets
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.generate(t).map_err(|e| Error::TargetGeneration {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Writes all trajectories into `out` as packed `[target][point][xyz]`
    /// single-precision values and returns the points per trajectory.
    fn generate_packed(&self, targets: &[Vector3<f64>], out: &mut Vec<f32>) -> Result<usize> {
        let trajectories = self.generate_batch(targets)?;
        let points = trajectories.first().map_or(0, Trajectory::len);
        out.clear();
        out.reserve(targets.len() * points * 3);
        for (index, t) in trajectories.iter().enumerate() {
            if t.len() != points {
                return Err(Error::TargetGeneration {
                    index,
                    source: Box::new(Error::Parameter(format!("{} points, expected {points}", t.len()))),
                });
            }
            out.extend(t.points.iter().flat_map(|p| p.iter().map(|&c| c as f32)));
        }
        Ok(points)
    }

    /// Sample period of the produced trajectories (s).
    fn sample_period(&self) -> f64 {
        1.0 / config::SAMPLE_RATE
    }

    /// Identifies the generator so that caches built from it can be checked.
    fn generation_tag(&self) -> String;
}

/// Range below which obstacles repel the hand (m).
pub const REPULSION_CUTOFF: f64 = 0.15;
/// Integral state bound for anti-windup (m s).
pub const INTEGRAL_LIMIT: f64 = 1.0;
pub const SUBSTEPS: usize = 4;

/// Repulsive velocity away from the nearest obstacle, fading linearly to zero
/// at `cutoff`.
pub fn repulsion_term(
    hand: &Vector3<f64>,
    obstacles: &[Vector3<f64>],
    k_rep: f64,
    cutoff: f64,
) -> Result<Vector3<f64>> {
    if !(cutoff > 0.0) {
        return Err(Error::Parameter("repulsion cutoff must be positive".into()));
    }
    Ok(repulsion(hand, obstacles, k_rep, cutoff))
}

fn repulsion(hand: &Vector3<f64>, obstacles: &[Vector3<f64>], k_rep: f64, cutoff: f64) -> Vector3<f64> {
    let nearest = obstacles
        .iter()
        .map(|o| (o, (hand - o).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((obstacle, mut distance)) = nearest else {
        return Vector3::zeros();
    };
    if distance >= cutoff {
        return Vector3::zeros();
    }
    let mut away = hand - obstacle;
    if distance < 1e-6 {
        warn!("hand coincides with obstacle at {obstacle:?}; clamping distance");
        distance = 1e-6;
        if away.norm() < 1e-12 {
            away = Vector3::z() * distance;
        } else {
            away = away.normalize() * distance;
        }
    }
    away * (k_rep * (1.0 - distance / cutoff) / distance)
}

/// The reference trajectory generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub model: ArmModel,
    pub gains: ControllerGains,
    pub scene: Scene,
    pub start_theta: JointVector,
    pub damping: f64,
    pub repulsion_cutoff: f64,
}

impl Simulator {
    pub fn new(model: ArmModel, gains: ControllerGains, scene: Scene, start_theta: JointVector) -> Result<Self> {
        gains.validate()?;
        if !model.within_limits(&start_theta) {
            return Err(Error::Domain("start posture violates joint limits".into()));
        }
        Ok(Self {
            model,
            gains,
            scene,
            start_theta,
            damping: config::DEFAULT_DAMPING,
            repulsion_cutoff: REPULSION_CUTOFF,
        })
    }

    /// Standard arm, default gains, start from the resting posture.
    pub fn standard(scene: Scene) -> Self {
        Self::new(
            ArmModel::standard(),
            ControllerGains::default(),
            scene,
            JointVector::from(config::START_POSTURE),
        )
        .expect("standard simulator is valid")
    }

    pub fn start_hand(&self) -> Vector3<f64> {
        self.model.hand_unchecked(&self.start_theta)
    }

    pub fn check_target(&self, target: &Vector3<f64>) -> Result<()> {
        if target.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("target is not finite".into()));
        }
        if !self.scene.table_frame.contains(target, config::WORKSPACE_MARGIN) {
            return Err(Error::Domain(format!("target {target:?} is off the table workspace")));
        }
        let base = self.model.base_pose.translation.vector;
        let span = self.model.link_lengths.total();
        if (target - base).norm() > span {
            return Err(Error::Domain(format!(
                "target {target:?} is beyond the arm span of {span} m"
            )));
        }
        Ok(())
    }

    /// Simulates the reach, returning `horizon` samples starting at the start posture.
    pub fn generate_with_states(&self, target: &Vector3<f64>) -> Result<(Trajectory, Vec<JointState>)> {
        self.check_target(target)?;
        let gains = &self.gains;
        let h = gains.dt / SUBSTEPS as f64;
        let mut state = JointState::at_rest(self.start_theta);
        let mut hand = self.model.hand_unchecked(&state.theta);
        let mut integral = Vector3::zeros();
        let mut previous_error: Option<Vector3<f64>> = None;

        let mut points = Vec::with_capacity(gains.horizon);
        let mut states = Vec::with_capacity(gains.horizon);
        points.push(hand);
        states.push(state);
        for _ in 1..gains.horizon {
            for _ in 0..SUBSTEPS {
                let error = target - hand;
                integral += error * h;
                let norm = integral.norm();
                if norm > INTEGRAL_LIMIT {
                    integral *= INTEGRAL_LIMIT / norm;
                }
                let derivative = previous_error.map_or_else(Vector3::zeros, |prev| (error - prev) / h);
                previous_error = Some(error);

                let velocity = error * gains.k_p
                    + integral * gains.k_i
                    + derivative * gains.k_d
                    + repulsion(&hand, &self.scene.obstacles, gains.k_rep, self.repulsion_cutoff);

                let (_, jac) = self.model.hand_and_jacobian(&state.theta);
                let jac_dagger = pseudo_inverse(&jac, self.damping)?;
                let null = nullspace_projector(&jac_dagger, &jac);
                let theta_dot = jac_dagger * velocity + null * (self.model.theta_sec - state.theta);
                state.integrate(&self.model, theta_dot, h);
                hand = self.model.hand_unchecked(&state.theta);
            }
            points.push(hand);
            states.push(state);
        }
        Ok((Trajectory::new(points, gains.dt), states))
    }

    fn tag_digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("simulator serializes");
        hex(&Sha256::digest(bytes))
    }
}

impl TrajectorySource for Simulator {
    fn generate(&self, target: &Vector3<f64>) -> Result<Trajectory> {
        self.generate_with_states(target).map(|(t, _)| t)
    }

    fn sample_period(&self) -> f64 {
        self.gains.dt
    }

    fn generation_tag(&self) -> String {
        format!("simulator:{}", self.tag_digest())
    }
}

/// Generates trajectories for all targets in order; identical to calling
/// [`TrajectorySource::generate`] on each.
pub fn batch_generate(sim: &Simulator, targets: &[Vector3<f64>]) -> Result<Vec<Trajectory>> {
    sim.generate_batch(targets)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
