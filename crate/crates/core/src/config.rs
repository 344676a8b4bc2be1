//! Frozen geometry and default constants shared by the simulator, the
//! surrogate trainer and the inference engine.
//!
//! World frame: the origin sits on the table surface at the middle of the
//! human's table edge. `x` points to the human's right, `y` away from the
//! human across the table, `z` up. The table surface is the plane `z = 0`.

use std::f64::consts::PI;

/// Seated torso height, hip pivot to shoulder line (m).
pub const TORSO_LENGTH: f64 = 0.55;
/// Lateral offset from the spine to the left shoulder joint (m).
pub const SHOULDER_OFFSET: f64 = 0.20;
pub const UPPER_ARM_LENGTH: f64 = 0.37;
pub const FOREARM_LENGTH: f64 = 0.27;
/// Wrist joint to the grasp point (m).
pub const HAND_LENGTH: f64 = 0.08;

/// Hip pivot of the seated human in the world frame (m).
pub const TORSO_BASE: [f64; 3] = [0.0, -0.25, -0.25];

/// Per-joint symmetric limits (rad), in chain order:
/// torso yaw, torso pitch, torso roll, shoulder flexion, shoulder abduction,
/// humeral rotation, elbow flexion, wrist flexion, wrist deviation.
pub const JOINT_LIMITS: [f64; 9] = [
    60.0 * PI / 180.0,
    45.0 * PI / 180.0,
    30.0 * PI / 180.0,
    160.0 * PI / 180.0,
    150.0 * PI / 180.0,
    90.0 * PI / 180.0,
    150.0 * PI / 180.0,
    80.0 * PI / 180.0,
    40.0 * PI / 180.0,
];

/// Resting posture used as the start of every generated reach: upright torso,
/// upper arm slightly forward, elbow bent, hand resting just above the near
/// edge of the table.
pub const START_POSTURE: [f64; 9] = [0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 2.0, -0.4, 0.0];

/// Posture the redundant degrees of freedom are pulled towards.
pub const SECONDARY_POSTURE: [f64; 9] = [0.0, 0.0, 0.0, 0.6, 0.1, 0.0, 1.2, 0.0, 0.0];

/// Damping of the least-squares Jacobian inverse used by the simulator.
pub const DEFAULT_DAMPING: f64 = 0.01;

pub const TABLE_HEIGHT: f64 = 0.0;

/// Inference workspace on the table plane: 130 x 70 cells of 1 cm.
pub const GRID_ORIGIN: [f64; 2] = [-0.65, 0.0];
pub const GRID_CELL_SIZE: f64 = 0.01;
pub const GRID_NX: usize = 130;
pub const GRID_NY: usize = 70;

/// Margin around the workspace rectangle accepted as a reach target (m).
pub const WORKSPACE_MARGIN: f64 = 0.05;

/// Sample rate of hand trajectories (Hz) and canonical length.
pub const SAMPLE_RATE: f64 = 30.0;
pub const HORIZON: usize = 90;

/// Region of the table the seated human reaches comfortably: a disc on the
/// table plane around the left shoulder, intersected with the workspace.
pub const REACH_ZONE_CENTER: [f64; 2] = [-0.20, -0.25];
pub const REACH_ZONE_RADIUS: f64 = 1.10;

/// Speed separating motion from rest when segmenting hand streams (m/s).
pub const MOTION_SPEED_THRESHOLD: f64 = 0.05;

/// Relative tolerance when comparing sample periods; files store them in
/// single precision.
pub const DT_RELATIVE_TOLERANCE: f64 = 1e-6;
