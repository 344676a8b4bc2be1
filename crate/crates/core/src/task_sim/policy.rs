//! Event-driven simulation of one pick-and-place run.
//!
//! Both agents step through reach → grasp → transport → release → retreat.
//! The box takes one agent at a time: the human waits to transport while the
//! robot is transporting or releasing, and the robot waits to transport while
//! the human holds an object. Policies differ only in when the robot starts a
//! reach and which object it picks.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use nalgebra::{Vector2, Vector3};
use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::abc::{decision_summary, evaluate, prior_densities, InferenceGrid};
use crate::error::{Error, Result};
use crate::priors::{default_proximity_prior, gaze_prior, objects_prior, GazeBuffer};
use crate::scene::Scene;
use crate::session::{mix_cells, safe_object};
use crate::trajectory::{Simulator, TrajectorySource};

use super::human::{drop_point, hold_steps, travel_steps, ReachPlan};
use super::{ActionKind, Agent, AtomicAction, Policy, TaskConfig, TaskLog};

const EPS: f64 = 1e-9;

/// The seeded table layout used for a run.
pub fn task_scene(objects: usize, min_separation: f64, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Scene::random_layout(objects, min_separation, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    /// Human only: resting between a retreat and the next reach.
    Pause { until: f64 },
    /// Robot only: free and not yet committed.
    Idle { since: f64 },
    Reach { obj: u32, start: f64, until: f64 },
    Grasp { obj: u32, start: f64, until: f64 },
    /// Holding an object, waiting for the box.
    Hold { obj: u32 },
    Transport { obj: u32, start: f64, until: f64 },
    Release { obj: u32, start: f64, until: f64 },
    Retreat { start: f64, until: f64 },
    Done,
}

impl Phase {
    fn until(&self) -> Option<f64> {
        match *self {
            Phase::Pause { until }
            | Phase::Reach { until, .. }
            | Phase::Grasp { until, .. }
            | Phase::Transport { until, .. }
            | Phase::Release { until, .. }
            | Phase::Retreat { until, .. } => Some(until),
            Phase::Idle { .. } | Phase::Hold { .. } | Phase::Done => None,
        }
    }

    fn holding(&self) -> bool {
        matches!(
            self,
            Phase::Grasp { .. } | Phase::Hold { .. } | Phase::Transport { .. } | Phase::Release { .. }
        )
    }

    fn at_box(&self) -> bool {
        matches!(self, Phase::Transport { .. } | Phase::Release { .. })
    }
}

/// The human reach currently being observed.
struct Observation {
    plan: ReachPlan,
    onset: f64,
    /// Gaze samples not yet delivered to the buffer.
    gaze: Vec<(f64, Vector2<f64>)>,
}

struct Run<'a> {
    policy: Policy,
    config: &'a TaskConfig,
    scene: &'a Scene,
    grid: Option<&'a InferenceGrid>,
    sim: Simulator,
    dt: f64,
    rng: ChaCha8Rng,
    rest: Vector3<f64>,
    drop: Vector3<f64>,
    robot_home: Vector2<f64>,

    remaining: BTreeSet<u32>,
    human: Phase,
    robot: Phase,
    human_target: Option<u32>,
    robot_target: Option<u32>,
    actions: Vec<AtomicAction>,
    /// Set while processing the instant the human starts a retreat.
    retreat_started: bool,

    observation: Option<Observation>,
    onsets: u64,
    committed_onset: Option<u64>,
    candidate: Option<(u32, usize)>,
    backed_off: Vec<u32>,
    last_tick: f64,
    gaze: GazeBuffer,
    proximity_cells: Vec<f64>,
    objects_cells: Option<(BTreeSet<u32>, Vec<f64>)>,
}

/// Simulates one run. `grid` (with its trajectory cache) is required by the
/// intent-prediction policy and ignored by the others.
pub fn run_policy(
    policy: Policy,
    scene: &Scene,
    grid: Option<&InferenceGrid>,
    config: &TaskConfig,
    seed: u64,
) -> Result<TaskLog> {
    config.validate()?;
    if scene.objects.is_empty() {
        return Err(Error::EmptyScene);
    }
    if policy == Policy::IntentPrediction {
        let grid = grid.ok_or_else(|| Error::Parameter("intent prediction needs an inference grid".into()))?;
        if grid.cache().is_none() {
            return Err(Error::Parameter("inference grid has no trajectory cache".into()));
        }
    }
    let sim = Simulator::standard(scene.clone());
    let dt = sim.sample_period();
    let proximity_cells = match (policy, grid) {
        (Policy::IntentPrediction, Some(g)) => prior_densities(&g.spec, &default_proximity_prior()),
        _ => Vec::new(),
    };
    let mut run = Run {
        policy,
        config,
        scene,
        grid,
        rest: sim.start_hand(),
        drop: drop_point(scene),
        robot_home: Vector2::from(config.robot_home),
        sim,
        dt,
        rng: ChaCha8Rng::seed_from_u64(seed),
        remaining: scene.objects.iter().map(|o| o.id).collect(),
        human: if policy == Policy::SoloRobot { Phase::Done } else { Phase::Pause { until: 0.0 } },
        robot: if policy == Policy::SoloHuman { Phase::Done } else { Phase::Idle { since: 0.0 } },
        human_target: None,
        robot_target: None,
        actions: Vec::new(),
        retreat_started: false,
        observation: None,
        onsets: 0,
        committed_onset: None,
        candidate: None,
        backed_off: Vec::new(),
        last_tick: f64::NEG_INFINITY,
        gaze: GazeBuffer::new(),
        proximity_cells,
        objects_cells: None,
    };
    run.simulate()?;
    let mut actions = run.actions;
    actions.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.agent.cmp(&b.agent)));
    let t0 = actions.iter().map(|a| a.t_start).fold(f64::INFINITY, f64::min);
    let t_final = actions.iter().map(|a| a.t_end).fold(f64::NEG_INFINITY, f64::max);
    Ok(TaskLog {
        policy,
        seed,
        t0: if t0.is_finite() { t0 } else { 0.0 },
        t_final: if t_final.is_finite() { t_final } else { 0.0 },
        actions,
    })
}

impl Run<'_> {
    fn simulate(&mut self) -> Result<()> {
        let mut t = 0.0;
        // Generous bound: every object handled by the slower agent, plus timeouts.
        let limit = self.scene.objects.len() as f64 * 60.0 + 10.0 * self.config.deadlock_timeout;
        loop {
            self.settle(t)?;
            if self.human == Phase::Done && self.robot == Phase::Done {
                return Ok(());
            }
            let next = self.next_time(t).ok_or_else(|| {
                Error::Parameter(format!(
                    "simulation stalled at {t:.3} s: human {:?}, robot {:?}",
                    self.human, self.robot
                ))
            })?;
            if next > limit {
                return Err(Error::Parameter(format!("simulation exceeded {limit} s")));
            }
            t = next;
        }
    }

    fn record(&mut self, agent: Agent, kind: ActionKind, t_start: f64, t_end: f64, object_id: Option<u32>) {
        self.actions.push(AtomicAction {
            agent,
            kind,
            t_start,
            t_end,
            object_id,
            aborted: false,
        });
    }

    /// Applies every transition due at `t` until nothing changes.
    fn settle(&mut self, t: f64) -> Result<()> {
        self.retreat_started = false;
        loop {
            let before = (self.human, self.robot);
            self.step_human(t)?;
            self.step_robot(t);
            if self.policy == Policy::IntentPrediction && self.tick_due(t) {
                self.last_tick = t;
                self.decide(t)?;
            }
            if (self.human, self.robot) == before {
                return Ok(());
            }
        }
    }

    fn step_human(&mut self, t: f64) -> Result<()> {
        let due = |until: f64| t >= until - EPS;
        match self.human {
            Phase::Pause { until } if due(until) => {
                let choice = self
                    .remaining
                    .iter()
                    .copied()
                    .filter(|id| Some(*id) != self.robot_target)
                    .choose(&mut self.rng);
                match choice {
                    None => self.human = Phase::Done,
                    Some(obj) => self.start_human_reach(obj, t)?,
                }
            }
            Phase::Reach { obj, start, until } if due(until) => {
                self.record(Agent::Human, ActionKind::Reach, start, until, Some(obj));
                self.remaining.remove(&obj);
                if self.robot_target == Some(obj) {
                    // The robot was heading for the same object; it backs off.
                    warn!("robot target {obj} taken by the human at {t:.2} s");
                    self.abort_robot(t);
                }
                let hold = hold_steps(self.config.human.grasp, self.dt) as f64 * self.dt;
                self.human = Phase::Grasp {
                    obj,
                    start: until,
                    until: until + hold,
                };
            }
            Phase::Grasp { obj, start, until } if due(until) => {
                self.record(Agent::Human, ActionKind::Grasp, start, until, Some(obj));
                self.human = Phase::Hold { obj };
            }
            Phase::Hold { obj } if !self.robot.at_box() => {
                let from = self.scene.object(obj).expect("scene object").position;
                let n = travel_steps((self.drop - from).norm(), self.config.human.speed, self.dt);
                self.human = Phase::Transport {
                    obj,
                    start: t,
                    until: t + n as f64 * self.dt,
                };
            }
            Phase::Transport { obj, start, until } if due(until) => {
                self.record(Agent::Human, ActionKind::Transport, start, until, Some(obj));
                let hold = hold_steps(self.config.human.release, self.dt) as f64 * self.dt;
                self.human = Phase::Release {
                    obj,
                    start: until,
                    until: until + hold,
                };
            }
            Phase::Release { obj, start, until } if due(until) => {
                self.record(Agent::Human, ActionKind::Release, start, until, Some(obj));
                self.human_target = None;
                let n = travel_steps((self.rest - self.drop).norm(), self.config.human.speed, self.dt);
                self.human = Phase::Retreat {
                    start: until,
                    until: until + n as f64 * self.dt,
                };
                self.retreat_started = true;
            }
            Phase::Retreat { start, until } if due(until) => {
                self.record(Agent::Human, ActionKind::Retreat, start, until, None);
                let pause = hold_steps(self.config.human.pause, self.dt) as f64 * self.dt;
                let pause = if self.config.human.pause > 0.0 { pause } else { 0.0 };
                self.human = Phase::Pause { until: until + pause };
            }
            _ => {}
        }
        Ok(())
    }

    fn start_human_reach(&mut self, obj: u32, t: f64) -> Result<()> {
        let target = self.scene.object(obj).expect("scene object").position;
        let plan = ReachPlan::new(&self.sim, obj, target, self.config.human.noise_sigma, &mut self.rng)?;
        self.human_target = Some(obj);
        self.human = Phase::Reach {
            obj,
            start: t,
            until: t + plan.duration(),
        };
        self.onsets += 1;
        self.candidate = None;
        self.backed_off.clear();
        if self.policy == Policy::IntentPrediction {
            let gaze = self.gaze_samples(&plan, t)?;
            self.observation = Some(Observation { plan, onset: t, gaze });
        }
        Ok(())
    }

    /// Gaze settles on the target `gaze_lead` before onset and stays there
    /// until the hand arrives.
    fn gaze_samples(&mut self, plan: &ReachPlan, onset: f64) -> Result<Vec<(f64, Vector2<f64>)>> {
        let h = &self.config.human;
        let lead = (h.gaze_lead / self.dt).round() as i64;
        let jitter = Normal::new(0.0, h.gaze_jitter).map_err(|e| Error::Parameter(e.to_string()))?;
        Ok((-lead..=plan.steps() as i64)
            .map(|k| {
                let noise = Vector2::new(jitter.sample(&mut self.rng), jitter.sample(&mut self.rng));
                (onset + k as f64 * self.dt, plan.target.xy() + noise)
            })
            .collect())
    }

    fn nearest_to_robot(&self, allowed: impl Fn(u32) -> bool) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for o in &self.scene.objects {
            if !self.remaining.contains(&o.id) || !allowed(o.id) {
                continue;
            }
            let d = (o.plane_position() - self.robot_home).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((o.id, d));
            }
        }
        best.map(|(id, _)| id)
    }

    fn start_robot_reach(&mut self, obj: u32, t: f64) {
        self.robot_target = Some(obj);
        self.committed_onset = Some(self.onsets);
        self.candidate = None;
        self.robot = Phase::Reach {
            obj,
            start: t,
            until: t + self.config.robot.reach,
        };
    }

    fn abort_robot(&mut self, t: f64) {
        if let Phase::Reach { obj, start, .. } = self.robot {
            if t > start {
                self.actions.push(AtomicAction {
                    agent: Agent::Robot,
                    kind: ActionKind::Reach,
                    t_start: start,
                    t_end: t,
                    object_id: Some(obj),
                    aborted: true,
                });
                self.robot = Phase::Retreat {
                    start: t,
                    until: t + self.config.robot.retreat,
                };
            } else {
                self.robot = Phase::Idle { since: t };
            }
            self.robot_target = None;
            self.committed_onset = None;
            self.backed_off.push(obj);
        }
    }

    fn step_robot(&mut self, t: f64) {
        let due = |until: f64| t >= until - EPS;
        let d = self.config.robot;
        match self.robot {
            Phase::Idle { .. } => {
                let human_target = self.human_target;
                if self.remaining.iter().all(|id| Some(*id) == human_target) {
                    if self.remaining.is_empty() || self.human == Phase::Done {
                        self.robot = Phase::Done;
                    }
                    return;
                }
                let free = |id: u32| Some(id) != human_target;
                let start = match self.policy {
                    Policy::SoloRobot => true,
                    Policy::TurnTaking => self.retreat_started || self.human == Phase::Done,
                    // Committing is decided on the observation clock; once the
                    // human has finished there is nothing left to predict.
                    Policy::IntentPrediction => self.human == Phase::Done,
                    Policy::SoloHuman => false,
                };
                if start {
                    if let Some(obj) = self.nearest_to_robot(free) {
                        self.start_robot_reach(obj, t);
                    }
                }
            }
            Phase::Reach { obj, start, until } if due(until) => {
                self.record(Agent::Robot, ActionKind::Reach, start, until, Some(obj));
                self.remaining.remove(&obj);
                self.robot = Phase::Grasp {
                    obj,
                    start: until,
                    until: until + d.grasp,
                };
            }
            Phase::Grasp { obj, start, until } if due(until) => {
                self.record(Agent::Robot, ActionKind::Grasp, start, until, Some(obj));
                self.robot = Phase::Hold { obj };
            }
            Phase::Hold { obj } if !self.human.holding() => {
                self.robot = Phase::Transport {
                    obj,
                    start: t,
                    until: t + d.transport,
                };
            }
            Phase::Transport { obj, start, until } if due(until) => {
                self.record(Agent::Robot, ActionKind::Transport, start, until, Some(obj));
                self.robot = Phase::Release {
                    obj,
                    start: until,
                    until: until + d.release,
                };
            }
            Phase::Release { obj, start, until } if due(until) => {
                self.record(Agent::Robot, ActionKind::Release, start, until, Some(obj));
                self.robot_target = None;
                self.robot = Phase::Retreat {
                    start: until,
                    until: until + d.retreat,
                };
            }
            Phase::Retreat { start, until } if due(until) => {
                self.record(Agent::Robot, ActionKind::Retreat, start, until, None);
                self.robot = Phase::Idle { since: until };
            }
            _ => {}
        }
    }

    /// Whether the robot watches the human at `t`: it is free or still
    /// reaching (and may have to back off) while a human reach is observed.
    fn watching(&self) -> bool {
        self.observation.is_some()
            && self.human != Phase::Done
            && matches!(self.robot, Phase::Idle { .. } | Phase::Reach { .. })
    }

    fn tick_due(&self, t: f64) -> bool {
        if !self.watching() || t <= self.last_tick + EPS {
            return false;
        }
        let onset = self.observation.as_ref().expect("observation").onset;
        let k = (t - onset) / self.dt;
        (k - k.round()).abs() < 1e-6 && k > -EPS
    }

    fn next_time(&self, t: f64) -> Option<f64> {
        let mut next = [self.human.until(), self.robot.until()]
            .into_iter()
            .flatten()
            .filter(|u| *u > t + EPS)
            .fold(f64::INFINITY, f64::min);
        if self.policy == Policy::IntentPrediction && self.watching() {
            let onset = self.observation.as_ref().expect("observation").onset;
            let k = ((t - onset) / self.dt + 1e-6).floor() + 1.0;
            next = next.min(onset + k.max(0.0) * self.dt);
            if let Phase::Idle { since } = self.robot {
                let deadline = since + self.config.deadlock_timeout;
                if deadline > t + EPS {
                    next = next.min(deadline);
                }
            }
        }
        next.is_finite().then_some(next)
    }

    /// Reach probability of every object still on the table.
    fn object_probs(&mut self, t: f64) -> Result<BTreeMap<u32, f64>> {
        let grid = self.grid.expect("grid checked at start");
        let observation = self.observation.as_mut().expect("observation");
        let due = observation.gaze.iter().take_while(|(ts, _)| *ts <= t + EPS).count();
        for (ts, p) in observation.gaze.drain(..due) {
            if self.gaze.push(ts, p).is_err() {
                continue;
            }
        }
        let observed = observation.plan.observed_until(t - observation.onset);

        let on_table: BTreeSet<u32> = self.remaining.clone();
        let mut table = self.scene.clone();
        table.objects.retain(|o| on_table.contains(&o.id));
        let stale = self.objects_cells.as_ref().is_none_or(|(ids, _)| *ids != on_table);
        if stale {
            let cells = match objects_prior(&table) {
                Ok(prior) => prior_densities(&grid.spec, &prior),
                Err(Error::EmptyScene) => Vec::new(),
                Err(e) => return Err(e),
            };
            self.objects_cells = Some((on_table, cells));
        }
        let w = self.config.prior_weights;
        let gaze_cells = gaze_prior(&self.gaze, t)
            .ok()
            .map(|g| prior_densities(&grid.spec, &g));
        let mut parts: Vec<(f64, &[f64])> = vec![(w.proximity, &self.proximity_cells)];
        if let Some(g) = &gaze_cells {
            parts.push((w.gaze, g));
        }
        if let Some((_, cells)) = &self.objects_cells {
            if !cells.is_empty() {
                parts.push((w.objects, cells));
            }
        }
        let prior = mix_cells(&parts, grid.spec.len());
        let posterior = evaluate(grid, &prior, &observed, &self.config.inference)?;
        Ok(decision_summary(&posterior, &table, self.config.conflict_radius))
    }

    /// One decision step of the anticipating robot.
    fn decide(&mut self, t: f64) -> Result<()> {
        let probs = self.object_probs(t)?;
        match self.robot {
            Phase::Reach { obj, .. } => {
                if probs.get(&obj).is_some_and(|p| *p > self.config.abort_probability) {
                    warn!("robot backs off object {obj} at {t:.2} s");
                    self.abort_robot(t);
                }
            }
            Phase::Idle { since } => {
                if self.committed_onset == Some(self.onsets) {
                    return Ok(());
                }
                let mut table = self.scene.clone();
                table.objects.retain(|o| self.remaining.contains(&o.id));
                let pick = safe_object(&probs, &table, self.config.p_safe, &self.backed_off);
                self.candidate = match (pick, self.candidate) {
                    (Some(c), Some((prev, n))) if c == prev => Some((c, n + 1)),
                    (Some(c), _) => Some((c, 1)),
                    (None, _) => None,
                };
                if let Some((c, n)) = self.candidate {
                    if n >= self.config.commit_steps {
                        self.start_robot_reach(c, t);
                        return Ok(());
                    }
                }
                if t - since >= self.config.deadlock_timeout - EPS {
                    let limit = self.config.abort_probability;
                    let choice = self.nearest_to_robot(|id| probs.get(&id).is_none_or(|p| *p <= limit));
                    if let Some(obj) = choice {
                        warn!("no safe object for {:.1} s; robot takes object {obj}", t - since);
                        self.start_robot_reach(obj, t);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Times at which both agents had their hand at objects closer than
/// `radius` to each other (grasping, or arrived and about to grasp).
pub fn conflicts(log: &TaskLog, scene: &Scene, radius: f64) -> usize {
    let at_object = |agent: Agent| -> Vec<(f64, f64, Vector2<f64>)> {
        log.agent_actions(agent)
            .filter(|a| a.kind == ActionKind::Grasp)
            .filter_map(|a| {
                let o = scene.object(a.object_id?)?;
                Some((a.t_start, a.t_end, o.plane_position()))
            })
            .collect()
    };
    let human = at_object(Agent::Human);
    let robot = at_object(Agent::Robot);
    human
        .iter()
        .flat_map(|h| robot.iter().map(move |r| (h, r)))
        .filter(|(h, r)| h.0 < r.1 && r.0 < h.1 && (h.2 - r.2).norm() < radius)
        .count()
}
