//! SVG task diagram: one row per agent, a coloured block per motion labelled
//! with its duration.

use std::fmt::Write;

use super::{ActionKind, Agent, TaskLog};

const LEFT: f64 = 70.0;
const PX_PER_S: f64 = 20.0;
const ROW_H: f64 = 28.0;
const ROW_GAP: f64 = 12.0;
const TOP: f64 = 10.0;

fn colour(kind: ActionKind) -> &'static str {
    match kind {
        ActionKind::Reach => "#4e79a7",
        ActionKind::Transport => "#f28e2b",
        ActionKind::Retreat => "#59a14f",
        ActionKind::Grasp | ActionKind::Release => "#bab0ac",
    }
}

pub fn export_task_diagram(log: &TaskLog) -> String {
    let span = (log.t_final - log.t0).max(0.0);
    let width = LEFT + span * PX_PER_S + 20.0;
    let rows = [Agent::Human, Agent::Robot];
    let axis_y = TOP + rows.len() as f64 * (ROW_H + ROW_GAP);
    let height = axis_y + 30.0;
    let x = |t: f64| LEFT + (t - log.t0) * PX_PER_S;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(
        svg,
        r#"<title>{} seed {} T={:.2}s</title>"#,
        log.policy, log.seed, span
    );
    for (r, agent) in rows.iter().enumerate() {
        let y = TOP + r as f64 * (ROW_H + ROW_GAP);
        let name = match agent {
            Agent::Human => "human",
            Agent::Robot => "robot",
        };
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{:.1}" font-size="11">{name}</text>"#,
            y + ROW_H / 2.0 + 4.0
        );
        for a in log.agent_actions(*agent).filter(|a| a.kind.is_motion()) {
            let x0 = x(a.t_start);
            let w = (a.t_end - a.t_start) * PX_PER_S;
            let opacity = if a.aborted { "0.5" } else { "1" };
            let _ = writeln!(
                svg,
                r#"<rect class="action" data-kind="{:?}" x="{x0:.2}" y="{y:.1}" width="{w:.2}" height="{ROW_H:.1}" fill="{}" fill-opacity="{opacity}" stroke="white"/>"#,
                a.kind,
                colour(a.kind)
            );
            let _ = writeln!(
                svg,
                r#"<text class="duration" x="{:.2}" y="{:.1}" text-anchor="middle" fill="white">{:.2}</text>"#,
                x0 + w / 2.0,
                y + ROW_H / 2.0 + 3.0,
                a.duration()
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT:.1}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="black"/>"#,
        x(log.t_final.max(log.t0))
    );
    let ticks = span.floor() as usize;
    for s in (0..=ticks).step_by(5) {
        let tx = LEFT + s as f64 * PX_PER_S;
        let _ = writeln!(
            svg,
            r#"<line x1="{tx:.1}" y1="{axis_y:.1}" x2="{tx:.1}" y2="{:.1}" stroke="black"/><text x="{tx:.1}" y="{:.1}" text-anchor="middle">{s}s</text>"#,
            axis_y + 4.0,
            axis_y + 15.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_sim::{AtomicAction, Policy};

    fn log(actions: Vec<AtomicAction>) -> TaskLog {
        TaskLog {
            policy: Policy::TurnTaking,
            seed: 1,
            t0: 0.0,
            t_final: actions.iter().map(|a| a.t_end).fold(0.0, f64::max),
            actions,
        }
    }

    #[test]
    fn empty_log_has_axes_only() {
        let svg = export_task_diagram(&log(Vec::new()));
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<line"));
        assert_eq!(svg.matches("class=\"action\"").count(), 0);
    }

    #[test]
    fn one_block_per_motion_with_durations() {
        let mk = |agent, kind, t_start, t_end| AtomicAction {
            agent,
            kind,
            t_start,
            t_end,
            object_id: None,
            aborted: false,
        };
        let actions = vec![
            mk(Agent::Human, ActionKind::Reach, 0.0, 0.6333),
            mk(Agent::Human, ActionKind::Grasp, 0.6333, 1.0),
            mk(Agent::Human, ActionKind::Transport, 1.0, 2.25),
            mk(Agent::Robot, ActionKind::Reach, 0.5, 1.9),
            mk(Agent::Robot, ActionKind::Retreat, 1.9, 2.4),
        ];
        let svg = export_task_diagram(&log(actions.clone()));
        assert_eq!(svg.matches("class=\"action\"").count(), 4);
        for a in actions.iter().filter(|a| a.kind.is_motion()) {
            assert!(svg.contains(&format!(">{:.2}<", a.duration())));
        }
        assert!(svg.contains(">0.63<"));
        assert_eq!(svg, export_task_diagram(&log(actions)));
    }
}
