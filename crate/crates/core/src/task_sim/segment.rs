//! Splits a hand stream into reach / transport / retreat bouts using its speed,
//! with grasp and release taken from external events.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};

use super::{ActionKind, Agent, AtomicAction};

/// A grasp or release reported by the task (not inferred from motion).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandEvent {
    pub kind: ActionKind,
    pub t_start: f64,
    pub t_end: f64,
    pub object_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Motion bouts and the grasp/release events, in time order.
    pub actions: Vec<AtomicAction>,
    /// Stream duration not covered by any action (s).
    pub idle: f64,
    pub total: f64,
    pub diagnostic: Option<String>,
}

/// Samples the speed has to stay on one side of the threshold before the
/// motion state flips (100 ms at 30 Hz).
pub const HYSTERESIS_SAMPLES: usize = 3;
/// Half width of the position smoothing window.
const SMOOTH: usize = 2;
/// Displacement from rest that counts as having left it (m).
const REST_RADIUS: f64 = 0.012;

/// Smoothed speed at every sample: positions are averaged over five samples,
/// and the speed is the central difference of that average over four.
fn smoothed_speeds(points: &[Vector3<f64>], dt: f64) -> Vec<f64> {
    let n = points.len();
    let avg: Vec<Vector3<f64>> = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(SMOOTH);
            let hi = (k + SMOOTH).min(n - 1);
            points[lo..=hi].iter().sum::<Vector3<f64>>() / (hi - lo + 1) as f64
        })
        .collect();
    (0..n)
        .map(|k| {
            let lo = k.saturating_sub(SMOOTH);
            let hi = (k + SMOOTH).min(n - 1);
            if hi == lo {
                0.0
            } else {
                (avg[hi] - avg[lo]).norm() / ((hi - lo) as f64 * dt)
            }
        })
        .collect()
}

/// Motion bouts `[start, end]` in samples, with hysteresis on both edges.
fn bouts(speeds: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut moving = false;
    let mut run = 0;
    let mut start = 0;
    for (k, s) in speeds.iter().enumerate() {
        let fast = *s > threshold;
        if fast != moving {
            run += 1;
            if run == HYSTERESIS_SAMPLES {
                let edge = k + 1 - HYSTERESIS_SAMPLES;
                if moving {
                    out.push((start, edge));
                } else {
                    start = edge;
                }
                moving = !moving;
                run = 0;
            }
        } else {
            run = 0;
        }
    }
    if moving {
        out.push((start, speeds.len() - 1));
    }
    out
}

/// Moves a coarse bout edge to where the hand actually leaves (or reaches)
/// the resting position next to it.
fn refine(points: &[Vector3<f64>], speeds: &[f64], threshold: f64, edge: usize, leaving: bool, lo: usize, hi: usize) -> usize {
    // Rest position: the contiguous slow run on the still side of the edge.
    let slow = |k: &usize| speeds[*k] <= threshold;
    let run: Vec<usize> = if leaving {
        let mut v: Vec<usize> = (edge.saturating_sub(4).max(lo)..edge).rev().take_while(slow).collect();
        v.reverse();
        v
    } else {
        (edge..=(edge + 4).min(hi)).take_while(slow).collect()
    };
    if run.is_empty() {
        return edge;
    }
    let rest = run.iter().map(|&k| points[k]).sum::<Vector3<f64>>() / run.len() as f64;
    let away = |k: usize| (points[k] - rest).norm() > REST_RADIUS;
    let (first, last) = (run[0], run[run.len() - 1]);
    if leaving {
        // Last sample before the hand is away for good.
        let to = (edge + 6).min(hi);
        (first..to).find(|&k| away(k + 1) && (k + 1..=(k + 2).min(to)).all(away)).unwrap_or(edge)
    } else {
        // First sample from which the hand stays at rest.
        let from = edge.saturating_sub(6).max(lo);
        (from..=last).find(|&k| (k..=last).all(|j| !away(j))).unwrap_or(edge)
    }
}

pub fn segment_phases(hand: &[(f64, Vector3<f64>)], events: &[HandEvent]) -> Result<Segmentation> {
    segment_phases_with(hand, events, config::MOTION_SPEED_THRESHOLD)
}

pub fn segment_phases_with(hand: &[(f64, Vector3<f64>)], events: &[HandEvent], threshold: f64) -> Result<Segmentation> {
    if hand.len() < 2 {
        return Err(Error::InsufficientData("hand stream needs two samples".into()));
    }
    let dt = hand[1].0 - hand[0].0;
    if !(dt > 0.0) || hand.windows(2).any(|w| ((w[1].0 - w[0].0) - dt).abs() > 1e-6) {
        return Err(Error::Alignment("hand stream is not sampled at a fixed rate".into()));
    }
    let t_first = hand[0].0;
    let total = hand[hand.len() - 1].0 - t_first;
    let points: Vec<Vector3<f64>> = hand.iter().map(|(_, p)| *p).collect();
    let sample = |t: f64| ((t - t_first) / dt).round().clamp(0.0, (hand.len() - 1) as f64) as usize;
    let time = |k: usize| t_first + k as f64 * dt;

    let mut events = events.to_vec();
    events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    let spans: Vec<(usize, usize)> = events.iter().map(|e| (sample(e.t_start), sample(e.t_end))).collect();

    let speeds = smoothed_speeds(&points, dt);
    let mut actions: Vec<AtomicAction> = Vec::new();
    for (start, end) in bouts(&speeds, threshold) {
        // Event spans cut bouts; the hand is considered still while grasping.
        let mut pieces = vec![(start, end)];
        for &(es, ee) in &spans {
            pieces = pieces
                .into_iter()
                .flat_map(|(s, e)| {
                    let mut out = Vec::new();
                    if s < es.min(e) {
                        out.push((s, es.min(e)));
                    }
                    if ee.max(s) < e {
                        out.push((ee.max(s), e));
                    }
                    out
                })
                .collect();
        }
        for (s, e) in pieces {
            let prev_event_end = spans.iter().filter(|(_, ee)| *ee <= s).map(|(_, ee)| *ee).max();
            let next_event_start = spans.iter().filter(|(es, _)| *es >= e).map(|(es, _)| *es).min();
            let prev_bout_end = actions.last().map(|a| sample(a.t_end)).unwrap_or(0);
            let lo = prev_event_end.unwrap_or(0).max(prev_bout_end);
            let hi = next_event_start.unwrap_or(hand.len() - 1);
            let s = if prev_event_end == Some(s) { s } else { refine(&points, &speeds, threshold, s, true, lo, hi) };
            let e = if next_event_start == Some(e) { e } else { refine(&points, &speeds, threshold, e, false, lo, hi) };
            if e > s {
                actions.push(AtomicAction {
                    agent: Agent::Human,
                    kind: ActionKind::Reach,
                    t_start: time(s),
                    t_end: time(e),
                    object_id: None,
                    aborted: false,
                });
            }
        }
    }
    if actions.is_empty() {
        return Ok(Segmentation {
            actions: Vec::new(),
            idle: total,
            total,
            diagnostic: Some("no motion detected".into()),
        });
    }

    // Label bouts from the preceding event: nothing or a finished retreat →
    // reach, grasp → transport, release → retreat.
    let mut retreated_since_release = false;
    let mut last_event: Option<&HandEvent> = None;
    let mut event_iter = events.iter().peekable();
    for action in &mut actions {
        while let Some(e) = event_iter.peek() {
            if e.t_end <= action.t_start + 1e-9 {
                last_event = event_iter.next();
                retreated_since_release = false;
            } else {
                break;
            }
        }
        let next_grasp = events
            .iter()
            .find(|e| e.kind == ActionKind::Grasp && e.t_start >= action.t_end - 1e-9);
        match last_event.map(|e| e.kind) {
            Some(ActionKind::Grasp) => {
                action.kind = ActionKind::Transport;
                action.object_id = last_event.and_then(|e| e.object_id);
            }
            Some(ActionKind::Release) if !retreated_since_release => {
                action.kind = ActionKind::Retreat;
                retreated_since_release = true;
            }
            _ => {
                action.kind = ActionKind::Reach;
                action.object_id = next_grasp.and_then(|e| e.object_id);
            }
        }
    }

    // A bout that settles just before the next event runs up to it.
    for i in 0..actions.len() {
        let end = actions[i].t_end;
        let next_bout = actions.get(i + 1).map_or(f64::INFINITY, |a| a.t_start);
        if let Some(e) = events.iter().find(|e| e.t_start >= end - 1e-9 && e.t_start <= next_bout) {
            actions[i].t_end = e.t_start;
        }
    }

    actions.extend(events.iter().map(|e| AtomicAction {
        agent: Agent::Human,
        kind: e.kind,
        t_start: e.t_start,
        t_end: e.t_end,
        object_id: e.object_id,
        aborted: false,
    }));
    actions.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    let busy: f64 = actions.iter().map(|a| a.duration()).sum();
    Ok(Segmentation {
        actions,
        idle: total - busy,
        total,
        diagnostic: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_sim::{simulate_human, task_scene, HumanConfig};

    fn stream(at: impl Fn(usize) -> Vector3<f64>, n: usize) -> Vec<(f64, Vector3<f64>)> {
        (0..n).map(|k| (k as f64 / 30.0, at(k))).collect()
    }

    #[test]
    fn stationary_stream_has_no_actions() {
        let hand = stream(|_| Vector3::new(0.1, 0.2, 0.0), 60);
        let seg = segment_phases(&hand, &[]).unwrap();
        assert!(seg.actions.is_empty());
        assert!((seg.idle - 59.0 / 30.0).abs() < 1e-12);
        assert!(seg.diagnostic.is_some());
    }

    #[test]
    fn clean_reach_transport_retreat_gives_three_motions_in_order() {
        // 20 still, reach over 15, grasp 12, transport 15, release 12, retreat 15, still 20.
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(0.3, 0.2, 0.0);
        let c = Vector3::new(-0.3, 0.1, 0.0);
        let lerp = |p: Vector3<f64>, q: Vector3<f64>, s: f64| p + (q - p) * s;
        let at = |k: usize| match k {
            0..=20 => a,
            21..=35 => lerp(a, b, (k - 20) as f64 / 15.0),
            36..=47 => b,
            48..=62 => lerp(b, c, (k - 47) as f64 / 15.0),
            63..=74 => c,
            75..=89 => lerp(c, a, (k - 74) as f64 / 15.0),
            _ => a,
        };
        let hand = stream(at, 110);
        let t = |k: usize| k as f64 / 30.0;
        let events = [
            HandEvent {
                kind: ActionKind::Grasp,
                t_start: t(35),
                t_end: t(47),
                object_id: Some(2),
            },
            HandEvent {
                kind: ActionKind::Release,
                t_start: t(62),
                t_end: t(74),
                object_id: Some(2),
            },
        ];
        let seg = segment_phases(&hand, &events).unwrap();
        let motions: Vec<_> = seg.actions.iter().filter(|a| a.kind.is_motion()).collect();
        let kinds: Vec<_> = motions.iter().map(|a| a.kind).collect();
        assert_eq!(kinds, [ActionKind::Reach, ActionKind::Transport, ActionKind::Retreat]);
        assert!((motions[0].t_start - t(20)).abs() < 1e-9);
        assert!((motions[2].t_end - t(89)).abs() < 1e-9);
        assert_eq!(motions[0].object_id, Some(2));
        let busy: f64 = seg.actions.iter().map(|a| a.duration()).sum();
        assert!((busy + seg.idle - seg.total).abs() < 1e-9);
    }

    #[test]
    fn simulated_human_phases_are_recovered_within_two_samples() {
        let scene = task_scene(16, 0.05, 4).unwrap();
        for seed in 0..5u64 {
            let targets: Vec<u32> = (0..4).map(|i| ((seed * 3 + i * 5) % 16) as u32).collect();
            let s = simulate_human(&scene, &targets, &HumanConfig::default(), seed).unwrap();
            let seg = segment_phases(&s.hand, &s.events).unwrap();
            assert_eq!(seg.actions.len(), s.actions.len(), "seed {seed}");
            for (got, want) in seg.actions.iter().zip(&s.actions) {
                assert_eq!(got.kind, want.kind);
                for (g, w) in [(got.t_start, want.t_start), (got.t_end, want.t_end)] {
                    assert!((g - w).abs() <= 2.0 * s.dt + 1e-9, "seed {seed} {:?}: {g} vs {w}", want.kind);
                }
            }
        }
    }

    #[test]
    fn irregular_sampling_is_rejected() {
        let mut hand = stream(|_| Vector3::zeros(), 10);
        hand[5].0 += 0.01;
        assert!(matches!(segment_phases(&hand, &[]), Err(Error::Alignment(_))));
    }
}
