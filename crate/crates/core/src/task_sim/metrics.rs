use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ActionKind, Agent, Policy, TaskLog};

/// Fluency of one run. Metrics an agent-less run cannot define are absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluencyMetrics {
    /// Elapsed time from the first action to the end of the last (s).
    #[serde(rename = "T")]
    pub t: f64,
    /// Mean over handovers of robot reach start minus human retreat end (s).
    #[serde(rename = "FD")]
    pub fd: Option<f64>,
    /// Sum of the same per-handover delays (s).
    #[serde(rename = "FD_sum")]
    pub fd_sum: Option<f64>,
    /// Robot time outside any action (s).
    #[serde(rename = "RI")]
    pub ri: Option<f64>,
    /// Human time outside any action (s).
    #[serde(rename = "HI")]
    pub hi: Option<f64>,
}

pub const EXPECTED_PLACEMENTS: usize = 16;

/// Each completed robot reach is paired with the human cycle it starts in, or
/// failing that with the latest human retreat already finished. Reaches before
/// any human retreat or after the human's last cycle are not handovers.
pub fn compute_metrics(log: &TaskLog) -> Result<FluencyMetrics> {
    compute_metrics_for(log, EXPECTED_PLACEMENTS)
}

pub fn compute_metrics_for(log: &TaskLog, expected: usize) -> Result<FluencyMetrics> {
    let placements = log.placements();
    if placements != expected {
        return Err(Error::IncompleteTask { placements, expected });
    }
    let t = log.t_final - log.t0;
    let idle = |agent: Agent| {
        let mut busy = 0.0;
        let mut any = false;
        for a in log.agent_actions(agent) {
            busy += a.duration();
            any = true;
        }
        any.then(|| (t - busy).max(0.0))
    };
    // Human cycles run from reach start to retreat end.
    let reach_starts: Vec<f64> = log
        .agent_actions(Agent::Human)
        .filter(|a| a.kind == ActionKind::Reach)
        .map(|a| a.t_start)
        .collect();
    let retreat_ends: Vec<f64> = log
        .agent_actions(Agent::Human)
        .filter(|a| a.kind == ActionKind::Retreat)
        .map(|a| a.t_end)
        .collect();
    let delays: Vec<f64> = log
        .agent_actions(Agent::Robot)
        .filter(|a| a.kind == ActionKind::Reach && !a.aborted)
        .filter_map(|a| {
            let r = a.t_start;
            let within = retreat_ends.iter().enumerate().find(|(k, &end)| {
                let start = reach_starts.get(*k).copied().unwrap_or(f64::NEG_INFINITY);
                start <= r && r <= end
            });
            within
                .map(|(_, &end)| end)
                .or_else(|| {
                    // Between cycles; once the human is finished the robot is on its own.
                    reach_starts.iter().any(|&s| s > r).then_some(())?;
                    retreat_ends.iter().copied().filter(|&end| end <= r).last()
                })
                .map(|end| r - end)
        })
        .collect();
    let (fd, fd_sum) = if delays.is_empty() {
        (None, None)
    } else {
        let sum: f64 = delays.iter().sum();
        (Some(sum / delays.len() as f64), Some(sum))
    };
    Ok(FluencyMetrics {
        t,
        fd,
        fd_sum,
        ri: idle(Agent::Robot),
        hi: idle(Agent::Human),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub n: usize,
}

/// Per-policy aggregate over seeded runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub policy: Policy,
    pub seeds: Vec<u64>,
    /// Keyed by metric name; metrics undefined for the policy are left out.
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl MetricsSummary {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }
}

pub fn summarize(policy: Policy, runs: &[(u64, FluencyMetrics)]) -> MetricsSummary {
    let mut metrics = BTreeMap::new();
    let columns: [(&str, fn(&FluencyMetrics) -> Option<f64>); 5] = [
        ("T", |m| Some(m.t)),
        ("FD", |m| m.fd),
        ("FD_sum", |m| m.fd_sum),
        ("RI", |m| m.ri),
        ("HI", |m| m.hi),
    ];
    for (name, get) in columns {
        let values: Vec<f64> = runs.iter().filter_map(|(_, m)| get(m)).collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        metrics.insert(name.to_string(), MetricSummary { mean, std, n });
    }
    MetricsSummary {
        policy,
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        metrics,
    }
}
