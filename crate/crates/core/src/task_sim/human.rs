//! Simulated human: reaches from the arm simulator, straight constant-speed
//! transport and retreat segments, fixed grasp/release holds, and a gaze
//! stream that settles on the next target shortly before the hand moves.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::trajectory::{Simulator, Trajectory, TrajectorySource};

use super::segment::HandEvent;
use super::{ActionKind, Agent, AtomicAction, HumanConfig};

/// One reach to an object: the generated motion up to the moment the hand
/// comes to rest, and the noisy version an observer sees.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachPlan {
    pub object_id: u32,
    pub target: Vector3<f64>,
    pub clean: Trajectory,
    pub observed: Vec<Vector3<f64>>,
}

impl ReachPlan {
    pub fn new(sim: &Simulator, object_id: u32, target: Vector3<f64>, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let full = sim.generate(&target)?;
        let end = rest_index(&full, config::MOTION_SPEED_THRESHOLD);
        let clean = full.prefix(end + 1);
        let observed = add_noise(&clean.points, sigma, rng)?;
        Ok(Self {
            object_id,
            target,
            clean,
            observed,
        })
    }

    /// Samples from onset to arrival.
    pub fn steps(&self) -> usize {
        self.clean.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.clean.dt
    }

    /// Onset-aligned noisy observation up to `elapsed` seconds after onset.
    pub fn observed_until(&self, elapsed: f64) -> Trajectory {
        let k = ((elapsed / self.clean.dt) + 1e-9).floor().max(0.0) as usize;
        let n = (k + 1).min(self.observed.len());
        Trajectory::new(self.observed[..n].to_vec(), self.clean.dt)
    }
}

/// First sample after which the hand never again moves faster than
/// `threshold`; at least 1 so that every reach takes time.
pub fn rest_index(traj: &Trajectory, threshold: f64) -> usize {
    let last_fast = traj
        .points
        .windows(2)
        .rposition(|w| (w[1] - w[0]).norm() / traj.dt > threshold);
    last_fast.map_or(1, |k| k + 1)
}

fn add_noise(points: &[Vector3<f64>], sigma: f64, rng: &mut impl Rng) -> Result<Vec<Vector3<f64>>> {
    if sigma == 0.0 {
        return Ok(points.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(points
        .iter()
        .map(|p| p + Vector3::from_fn(|_, _| normal.sample(rng)))
        .collect())
}

/// Whole samples needed to cover `distance` at `speed`.
pub(crate) fn travel_steps(distance: f64, speed: f64, dt: f64) -> usize {
    ((distance / (speed * dt)) - 1e-9).ceil().max(1.0) as usize
}

/// Whole samples of a fixed hold.
pub(crate) fn hold_steps(duration: f64, dt: f64) -> usize {
    (duration / dt).round().max(1.0) as usize
}

/// Point where the hand drops objects into the box.
pub(crate) fn drop_point(scene: &Scene) -> Vector3<f64> {
    scene.box_position
}

/// Continuous hand and gaze streams of a human placing `targets` one after
/// the other with nobody else around.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanStream {
    pub dt: f64,
    /// Noise-free hand positions, one per sample starting at `t = 0`.
    pub clean: Vec<Vector3<f64>>,
    /// What a tracker reports: `clean` plus per-point noise.
    pub hand: Vec<(f64, Vector3<f64>)>,
    /// Gaze/table intersections; the first lock starts before `t = 0`.
    pub gaze: Vec<(f64, Vector2<f64>)>,
    pub events: Vec<HandEvent>,
    /// Ground truth, including grasp and release.
    pub actions: Vec<AtomicAction>,
}

pub fn simulate_human(scene: &Scene, targets: &[u32], config: &HumanConfig, seed: u64) -> Result<HumanStream> {
    let sim = Simulator::standard(scene.clone());
    let dt = sim.sample_period();
    let rest = sim.start_hand();
    let drop = drop_point(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = vec![rest];
    let mut actions = Vec::new();
    let mut events = Vec::new();
    // (onset sample, arrival sample, target) per reach, for the gaze stream.
    let mut locks = Vec::new();
    let time = |k: usize| k as f64 * dt;

    for (i, &id) in targets.iter().enumerate() {
        let object = scene
            .object(id)
            .ok_or_else(|| Error::Parameter(format!("target {id} is not a scene object")))?;
        if i > 0 && config.pause > 0.0 {
            clean.extend(std::iter::repeat_n(rest, hold_steps(config.pause, dt)));
        }
        let onset = clean.len() - 1;
        let reach = ReachPlan::new(&sim, id, object.position, 0.0, &mut rng)?;
        clean.extend(reach.clean.points[1..].iter().copied());
        let arrival = clean.len() - 1;
        locks.push((onset, arrival, object.plane_position()));
        actions.push(action(ActionKind::Reach, time(onset), time(arrival), Some(id)));
        let here = clean[arrival];

        let grasp_end = arrival + hold_steps(config.grasp, dt);
        clean.extend(std::iter::repeat_n(here, grasp_end - arrival));
        actions.push(action(ActionKind::Grasp, time(arrival), time(grasp_end), Some(id)));
        events.push(HandEvent {
            kind: ActionKind::Grasp,
            t_start: time(arrival),
            t_end: time(grasp_end),
            object_id: Some(id),
        });

        let n = travel_steps((drop - here).norm(), config.speed, dt);
        clean.extend((1..=n).map(|j| here + (drop - here) * (j as f64 / n as f64)));
        let transport_end = grasp_end + n;
        actions.push(action(ActionKind::Transport, time(grasp_end), time(transport_end), Some(id)));

        let release_end = transport_end + hold_steps(config.release, dt);
        clean.extend(std::iter::repeat_n(drop, release_end - transport_end));
        actions.push(action(ActionKind::Release, time(transport_end), time(release_end), Some(id)));
        events.push(HandEvent {
            kind: ActionKind::Release,
            t_start: time(transport_end),
            t_end: time(release_end),
            object_id: Some(id),
        });

        let n = travel_steps((rest - drop).norm(), config.speed, dt);
        clean.extend((1..=n).map(|j| drop + (rest - drop) * (j as f64 / n as f64)));
        actions.push(action(ActionKind::Retreat, time(release_end), time(release_end + n), None));
    }

    let hand = add_noise(&clean, config.noise_sigma, &mut rng)?
        .into_iter()
        .enumerate()
        .map(|(k, p)| (time(k), p))
        .collect();

    let jitter = Normal::new(0.0, config.gaze_jitter.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let lead = (config.gaze_lead / dt).round() as isize;
    let mut gaze = Vec::new();
    for k in -lead..clean.len() as isize {
        let locked = locks
            .iter()
            .find(|(onset, arrival, _)| k >= *onset as isize - lead && k <= *arrival as isize);
        let base = match locked {
            Some((_, _, target)) => *target,
            None => clean[k.max(0) as usize].xy(),
        };
        let noise = if config.gaze_jitter > 0.0 {
            Vector2::new(jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            Vector2::zeros()
        };
        gaze.push((k as f64 * dt, base + noise));
    }

    Ok(HumanStream {
        dt,
        clean,
        hand,
        gaze,
        events,
        actions,
    })
}

fn action(kind: ActionKind, t_start: f64, t_end: f64, object_id: Option<u32>) -> AtomicAction {
    AtomicAction {
        agent: Agent::Human,
        kind,
        t_start,
        t_end,
        object_id,
        aborted: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::GazeBuffer;
    use crate::task_sim::task_scene;

    fn scene() -> Scene {
        task_scene(16, 0.05, 11).unwrap()
    }

    #[test]
    fn noiseless_single_reach_is_the_generator_output() {
        let scene = scene();
        let config = HumanConfig {
            noise_sigma: 0.0,
            ..HumanConfig::default()
        };
        let stream = simulate_human(&scene, &[3], &config, 1).unwrap();
        let generated = Simulator::standard(scene.clone()).generate(&scene.objects[3].position).unwrap();
        let reach = stream.actions[0];
        let n = (reach.t_end / stream.dt).round() as usize;
        for k in 0..=n {
            assert_eq!(stream.hand[k].1, generated.points[k]);
        }
        assert_eq!(stream.actions.len(), 5);
    }

    #[test]
    fn same_seed_same_streams() {
        let scene = scene();
        let a = simulate_human(&scene, &[1, 2], &HumanConfig::default(), 5).unwrap();
        assert_eq!(a, simulate_human(&scene, &[1, 2], &HumanConfig::default(), 5).unwrap());
        assert_ne!(a.hand, simulate_human(&scene, &[1, 2], &HumanConfig::default(), 6).unwrap().hand);
    }

    #[test]
    fn gaze_leads_the_hand_to_the_target() {
        let scene = scene();
        for seed in 0..20 {
            let targets = [(seed % 16) as u32, ((seed + 5) % 16) as u32];
            let stream = simulate_human(&scene, &targets, &HumanConfig::default(), seed).unwrap();
            for (reach, id) in stream.actions.iter().filter(|a| a.kind == ActionKind::Reach).zip(targets) {
                let mut buffer = GazeBuffer::new();
                for (t, p) in stream.gaze.iter().filter(|(t, _)| *t <= reach.t_start + 1e-9) {
                    buffer.push(*t, *p).unwrap();
                }
                let window: Vec<_> = buffer.in_window(reach.t_start).map(|s| s.intersection).collect();
                let mean = window.iter().sum::<Vector2<f64>>() / window.len() as f64;
                let target = scene.object(id).unwrap().plane_position();
                assert!((mean - target).norm() <= 3.0 * 0.02, "seed {seed}: {}", (mean - target).norm());
            }
        }
    }

    #[test]
    fn timeline_is_contiguous() {
        let stream = simulate_human(&scene(), &[0, 7, 9], &HumanConfig::default(), 2).unwrap();
        assert_eq!(stream.actions.len(), 15);
        for pair in stream.actions.windows(2) {
            assert!(pair[0].t_end <= pair[1].t_start + 1e-12);
            assert!(pair[0].t_start < pair[0].t_end);
        }
        let last = stream.actions.last().unwrap();
        assert!(((stream.clean.len() - 1) as f64 * stream.dt - last.t_end).abs() < 1e-9);
    }

    #[test]
    fn reach_observation_is_onset_aligned() {
        let scene = scene();
        let sim = Simulator::standard(scene.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = ReachPlan::new(&sim, 0, scene.objects[0].position, 0.003, &mut rng).unwrap();
        assert_eq!(plan.observed_until(0.0).len(), 1);
        assert_eq!(plan.observed_until(0.1).len(), 4);
        assert_eq!(plan.observed_until(100.0).len(), plan.clean.len());
        assert!((plan.clean.points[plan.steps()] - plan.target).norm() < 0.02);
    }
}
