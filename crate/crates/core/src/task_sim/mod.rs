//! Turn-based pick-and-place between a simulated human and a robot: sixteen
//! objects go into one shared box. Four policies, velocity-based phase
//! segmentation, fluency metrics and a task diagram.

mod diagram;
mod human;
mod metrics;
mod policy;
mod segment;

pub use diagram::export_task_diagram;
pub use human::{simulate_human, HumanStream, ReachPlan};
pub use metrics::{compute_metrics, summarize, FluencyMetrics, MetricSummary, MetricsSummary};
pub use policy::{conflicts, run_policy, task_scene};
pub use segment::{segment_phases, HandEvent, Segmentation};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::abc::InferenceConfig;
use crate::error::{Error, LoadError, Result};
use crate::session::{PriorWeights, DEFAULT_CONFLICT_RADIUS, DEFAULT_P_SAFE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Human,
    Robot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Reach,
    Grasp,
    Transport,
    Release,
    Retreat,
}

impl ActionKind {
    /// Grasp and release count towards the task time but are not drawn.
    pub fn is_motion(self) -> bool {
        !matches!(self, ActionKind::Grasp | ActionKind::Release)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicAction {
    pub agent: Agent,
    pub kind: ActionKind,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
    /// A robot reach cut short by the safety override.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted: bool,
}

impl AtomicAction {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    SoloHuman,
    SoloRobot,
    TurnTaking,
    IntentPrediction,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::SoloHuman,
        Policy::SoloRobot,
        Policy::TurnTaking,
        Policy::IntentPrediction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::SoloHuman => "solo_human",
            Policy::SoloRobot => "solo_robot",
            Policy::TurnTaking => "turn_taking",
            Policy::IntentPrediction => "intent_prediction",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown policy {s:?}")))
    }
}

/// Everything both agents did during one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub policy: Policy,
    pub seed: u64,
    pub t0: f64,
    pub t_final: f64,
    pub actions: Vec<AtomicAction>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    policy: Policy,
    seed: u64,
    t0: f64,
    t_final: f64,
}

impl TaskLog {
    /// Objects put into the box.
    pub fn placements(&self) -> usize {
        self.actions.iter().filter(|a| a.kind == ActionKind::Release).count()
    }

    pub fn agent_actions(&self, agent: Agent) -> impl Iterator<Item = &AtomicAction> {
        self.actions.iter().filter(move |a| a.agent == agent)
    }

    /// A header line with the run identity, then one action per line.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        let header = LogHeader {
            policy: self.policy,
            seed: self.seed,
            t0: self.t0,
            t_final: self.t_final,
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for action in &self.actions {
            serde_json::to_writer(&mut *out, action)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines().filter(|l| !l.as_ref().is_ok_and(|l| l.trim().is_empty()));
        let header: LogHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(LoadError::Truncated("empty task log".into()).into()),
        };
        let actions = lines
            .map(|line| Ok(serde_json::from_str(&line?)?))
            .collect::<Result<Vec<AtomicAction>>>()?;
        Ok(Self {
            policy: header.policy,
            seed: header.seed,
            t0: header.t0,
            t_final: header.t_final,
            actions,
        })
    }
}

/// Fixed durations of the robot's timed motion segments (s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotDurations {
    pub reach: f64,
    pub grasp: f64,
    pub transport: f64,
    pub release: f64,
    pub retreat: f64,
}

impl Default for RobotDurations {
    fn default() -> Self {
        Self {
            reach: 1.4,
            grasp: 0.25,
            transport: 1.6,
            release: 0.25,
            retreat: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanConfig {
    /// Per-coordinate noise added to the observed hand positions (m).
    pub noise_sigma: f64,
    /// Jitter of the gaze/table intersections (m).
    pub gaze_jitter: f64,
    /// How long before hand onset the gaze locks onto the target (s).
    pub gaze_lead: f64,
    pub grasp: f64,
    pub release: f64,
    /// Hand speed of transport and retreat segments (m/s).
    pub speed: f64,
    /// Rest between a retreat and the next reach (s).
    pub pause: f64,
}

impl Default for HumanConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.003,
            gaze_jitter: 0.02,
            gaze_lead: 0.3,
            grasp: 0.4,
            release: 0.4,
            speed: 0.5,
            pause: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub objects: usize,
    pub min_separation: f64,
    pub robot: RobotDurations,
    /// Robot base on the far side of the table (table plane, m).
    pub robot_home: [f64; 2],
    pub human: HumanConfig,
    pub p_safe: f64,
    /// Consecutive decision steps a candidate must stay safe before commit.
    pub commit_steps: usize,
    /// Reach probability of the committed object that makes the robot back off.
    pub abort_probability: f64,
    pub deadlock_timeout: f64,
    pub conflict_radius: f64,
    pub prior_weights: PriorWeights,
    pub inference: InferenceConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            objects: 16,
            min_separation: 0.05,
            robot: RobotDurations::default(),
            robot_home: [0.0, 0.85],
            human: HumanConfig::default(),
            p_safe: DEFAULT_P_SAFE,
            commit_steps: 3,
            abort_probability: 0.5,
            deadlock_timeout: 10.0,
            conflict_radius: DEFAULT_CONFLICT_RADIUS,
            prior_weights: PriorWeights::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        self.inference.validate()?;
        self.prior_weights.validate()?;
        let r = &self.robot;
        let h = &self.human;
        let positive = [r.reach, r.grasp, r.transport, r.release, r.retreat, h.grasp, h.release, h.speed];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(h.pause >= 0.0)
            || !(h.noise_sigma >= 0.0)
            || !(h.gaze_jitter >= 0.0)
            || !(h.gaze_lead >= 0.0)
            || self.objects == 0
            || self.commit_steps == 0
            || !(self.p_safe > 0.0 && self.p_safe < self.abort_probability && self.abort_probability <= 1.0)
            || !(self.deadlock_timeout > 0.0)
            || !(self.conflict_radius > 0.0)
        {
            return Err(Error::Parameter(format!("invalid task config {self:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_log_jsonl_round_trip() {
        let log = TaskLog {
            policy: Policy::TurnTaking,
            seed: 3,
            t0: 0.0,
            t_final: 2.0,
            actions: vec![
                AtomicAction {
                    agent: Agent::Human,
                    kind: ActionKind::Reach,
                    t_start: 0.0,
                    t_end: 1.0,
                    object_id: Some(4),
                    aborted: false,
                },
                AtomicAction {
                    agent: Agent::Robot,
                    kind: ActionKind::Retreat,
                    t_start: 1.0,
                    t_end: 2.0,
                    object_id: None,
                    aborted: true,
                },
            ],
        };
        let mut text = Vec::new();
        log.write_jsonl(&mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains("\"kind\":\"reach\""));
        assert!(!text.lines().nth(1).unwrap().contains("aborted"));
        assert_eq!(TaskLog::read_jsonl(text.as_bytes()).unwrap(), log);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("both".parse::<Policy>().is_err());
    }
}
