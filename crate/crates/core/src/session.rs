//! One live observation stream: hand and gaze samples in, a posterior over the
//! grid and per-object reach probabilities out.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::abc::{decision_summary, evaluate, prior_densities, InferenceConfig, InferenceGrid, PosteriorEstimate};
use crate::config;
use crate::error::{Error, Result};
use crate::priors::{default_proximity_prior, gaze_prior, objects_prior, GazeBuffer};
use crate::scene::Scene;
use crate::trajectory::Trajectory;

/// Mixture weights of the proximity, gaze and object priors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub proximity: f64,
    pub gaze: f64,
    pub objects: f64,
}

impl Default for PriorWeights {
    fn default() -> Self {
        Self {
            proximity: 0.2,
            gaze: 0.4,
            objects: 0.4,
        }
    }
}

impl PriorWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.proximity, self.gaze, self.objects];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Parameter(format!("invalid prior weights {self:?}")));
        }
        Ok(())
    }
}

/// Objects whose reach probability is above this are treated as possibly wanted.
pub const DEFAULT_P_SAFE: f64 = 0.05;
/// Radius around an object whose posterior mass is its reach probability (m).
pub const DEFAULT_CONFLICT_RADIUS: f64 = 0.025;
/// Samples spanned by the displacement used as the smoothed hand speed.
pub const ONSET_SPAN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub inference: InferenceConfig,
    pub prior_weights: PriorWeights,
    pub conflict_radius: f64,
    pub p_safe: f64,
    pub onset_speed: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig::default(),
            prior_weights: PriorWeights::default(),
            conflict_radius: DEFAULT_CONFLICT_RADIUS,
            p_safe: DEFAULT_P_SAFE,
            onset_speed: config::MOTION_SPEED_THRESHOLD,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.inference.validate()?;
        self.prior_weights.validate()?;
        if !(self.conflict_radius > 0.0) || !(self.p_safe > 0.0 && self.p_safe < 1.0) || !(self.onset_speed > 0.0) {
            return Err(Error::Parameter(format!("invalid session config {self:?}")));
        }
        Ok(())
    }
}

/// What the session reports after each hand sample.
#[derive(Clone, Debug)]
pub struct Update {
    pub t: f64,
    pub posterior: PosteriorEstimate,
    pub object_probs: BTreeMap<u32, f64>,
    pub safe_object: Option<u32>,
    /// Whether motion onset has been seen, i.e. the posterior uses hand evidence.
    pub moving: bool,
}

/// Object farthest from every object that is still likely to be reached, among
/// those that are themselves unlikely. Ties go to the lowest id.
pub fn safe_object(probs: &BTreeMap<u32, f64>, scene: &Scene, p_safe: f64, excluded: &[u32]) -> Option<u32> {
    let likely: Vec<Vector2<f64>> = scene
        .objects
        .iter()
        .filter(|o| probs.get(&o.id).is_some_and(|p| *p > p_safe))
        .map(|o| o.plane_position())
        .collect();
    let mut best: Option<(u32, f64)> = None;
    for o in &scene.objects {
        if excluded.contains(&o.id) || probs.get(&o.id).is_none_or(|p| *p >= p_safe) {
            continue;
        }
        let clearance = likely
            .iter()
            .map(|p| (p - o.plane_position()).norm())
            .fold(f64::INFINITY, f64::min);
        let better = match best {
            None => true,
            Some((id, c)) => clearance > c || (clearance == c && o.id < id),
        };
        if better {
            best = Some((o.id, clearance));
        }
    }
    best.map(|(id, _)| id)
}

/// Streaming inference state for one observer. Hand samples are taken as
/// consecutive samples at the grid's sample period.
pub struct Session {
    grid: Arc<InferenceGrid>,
    scene: Scene,
    config: SessionConfig,
    proximity_cells: Vec<f64>,
    objects_cells: Option<Vec<f64>>,
    gaze: GazeBuffer,
    hand: Vec<(f64, Vector3<f64>)>,
    onset: Option<usize>,
}

impl Session {
    pub fn new(grid: Arc<InferenceGrid>, scene: Scene, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        if grid.cache().is_none() {
            return Err(Error::Parameter("session grid has no trajectory cache".into()));
        }
        let proximity_cells = normalized(prior_densities(&grid.spec, &default_proximity_prior()));
        let mut session = Self {
            grid,
            scene: Scene::empty(),
            config,
            proximity_cells,
            objects_cells: None,
            gaze: GazeBuffer::new(),
            hand: Vec::new(),
            onset: None,
        };
        session.set_scene(scene)?;
        Ok(session)
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn grid(&self) -> &InferenceGrid {
        &self.grid
    }

    /// Replaces the scene and clears the observation buffers.
    pub fn set_scene(&mut self, scene: Scene) -> Result<()> {
        scene.validate()?;
        self.objects_cells = match objects_prior(&scene) {
            Ok(prior) => Some(normalized(prior_densities(&self.grid.spec, &prior))),
            Err(Error::EmptyScene) => None,
            Err(e) => return Err(e),
        };
        self.scene = scene;
        self.reset();
        Ok(())
    }

    pub fn reset(&mut self) {
        self.gaze.clear();
        self.hand.clear();
        self.onset = None;
    }

    pub fn push_gaze(&mut self, t: f64, p: Vector2<f64>) -> Result<()> {
        if !t.is_finite() || !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("non-finite gaze sample".into()));
        }
        self.gaze.push(t, p)
    }

    /// Prior over the cells at time `now`: the weighted mixture of whatever
    /// components are available (gaze needs two recent samples, objects a
    /// non-empty scene), renormalized over those present.
    pub fn prior_cells(&self, now: f64) -> Vec<f64> {
        let w = self.config.prior_weights;
        let gaze_cells = gaze_prior(&self.gaze, now)
            .ok()
            .map(|g| normalized(prior_densities(&self.grid.spec, &g)));
        let mut parts: Vec<(f64, &[f64])> = vec![(w.proximity, &self.proximity_cells)];
        if let Some(g) = &gaze_cells {
            parts.push((w.gaze, g));
        }
        if let Some(o) = &self.objects_cells {
            parts.push((w.objects, o));
        }
        mix_cells(&parts, self.grid.spec.len())
    }

    /// Onset-aligned observation: from the last resting sample to now.
    pub fn observed(&self) -> Option<Trajectory> {
        let start = self.onset?;
        let points = self.hand[start..].iter().map(|(_, p)| *p).collect();
        let mut traj = Trajectory::new(points, self.grid.cache().expect("cache").dt);
        traj.t0 = self.hand[start].0;
        Some(traj)
    }

    pub fn push_hand(&mut self, t: f64, p: Vector3<f64>) -> Result<Update> {
        if !t.is_finite() || !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("non-finite hand sample".into()));
        }
        if let Some((last, _)) = self.hand.last() {
            if !(t > *last) {
                return Err(Error::Parameter(format!("hand timestamps must increase: {t} after {last}")));
            }
        }
        self.hand.push((t, p));
        let k = self.hand.len() - 1;
        if self.onset.is_none() && k >= ONSET_SPAN {
            let (t0, p0) = self.hand[k - ONSET_SPAN];
            if (p - p0).norm() / (t - t0) > self.config.onset_speed {
                // The observation starts at the last sample before the first fast step.
                let fast = |j: usize| {
                    let (ta, a) = self.hand[j];
                    let (tb, b) = self.hand[j + 1];
                    (b - a).norm() / (tb - ta) > self.config.onset_speed
                };
                self.onset = (k - ONSET_SPAN..k).find(|&j| fast(j)).or(Some(k - ONSET_SPAN));
            }
        }
        let prior = self.prior_cells(t);
        let posterior = match self.observed() {
            Some(obs) => evaluate(&self.grid, &prior, &obs, &self.config.inference)?,
            None => PosteriorEstimate::from_weights(self.grid.spec, prior),
        };
        let object_probs = decision_summary(&posterior, &self.scene, self.config.conflict_radius);
        let safe = safe_object(&object_probs, &self.scene, self.config.p_safe, &[]);
        Ok(Update {
            t,
            posterior,
            object_probs,
            safe_object: safe,
            moving: self.onset.is_some(),
        })
    }
}

/// Weighted mixture of per-cell densities, each normalized over the grid and
/// the weights renormalized over the parts given. No usable part → uniform.
pub fn mix_cells(parts: &[(f64, &[f64])], cells: usize) -> Vec<f64> {
    let parts: Vec<(f64, Vec<f64>)> = parts
        .iter()
        .filter(|(w, c)| *w > 0.0 && c.len() == cells && c.iter().sum::<f64>() > 0.0)
        .map(|(w, c)| (*w, normalized(c.to_vec())))
        .collect();
    let total: f64 = parts.iter().map(|(w, _)| w).sum();
    if parts.is_empty() {
        return vec![1.0 / cells as f64; cells];
    }
    (0..cells)
        .map(|i| parts.iter().map(|(w, c)| w / total * c[i]).sum())
        .collect()
}

fn normalized(mut cells: Vec<f64>) -> Vec<f64> {
    let total: f64 = cells.iter().sum();
    if total > 0.0 && total.is_finite() {
        cells.iter_mut().for_each(|c| *c /= total);
    } else {
        let n = cells.len() as f64;
        cells.iter_mut().for_each(|c| *c = 1.0 / n);
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::{GridSpec, TrajectoryCache};
    use crate::scene::SceneObject;

    /// Small grid whose cached trajectories move in a straight line from a
    /// common start to each cell centre.
    fn grid() -> Arc<InferenceGrid> {
        let spec = GridSpec {
            nx: 20,
            ny: 10,
            origin: [-0.1, 0.0],
            cell_size: 0.02,
        };
        let start = Vector3::new(0.0, -0.1, 0.0);
        let n = 30;
        let mut data = Vec::new();
        for cell in 0..spec.len() {
            let target = spec.target(cell);
            for k in 0..n {
                let p = start + (target - start) * (k as f64 / (n - 1) as f64);
                data.extend([p.x as f32, p.y as f32, p.z as f32]);
            }
        }
        let cache = TrajectoryCache {
            generation_tag: "line".into(),
            points_per_traj: n,
            dt: 1.0 / 30.0,
            data,
        };
        Arc::new(InferenceGrid::with_cache(spec, cache).unwrap())
    }

    fn scene() -> Scene {
        let objects = [(0, -0.05, 0.1), (1, 0.2, 0.15), (2, 0.05, 0.05)]
            .iter()
            .map(|&(id, x, y)| SceneObject {
                id,
                position: Vector3::new(x, y, 0.0),
                extent: 0.04,
                confidence: 1.0,
            })
            .collect();
        Scene::empty().with_objects(objects).unwrap()
    }

    fn session() -> Session {
        Session::new(grid(), scene(), SessionConfig::default()).unwrap()
    }

    #[test]
    fn resting_hand_gives_the_prior_and_reset_restores_it() {
        let mut s = session();
        let start = Vector3::new(0.0, -0.1, 0.0);
        let first = s.push_hand(0.0, start).unwrap();
        assert!(!first.moving);
        assert_eq!(first.posterior.weights, s.prior_cells(0.0));
        let sum: f64 = first.posterior.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let spec = s.grid().spec;
        let target = spec.target(spec.index(15, 7));
        let mut last = first;
        for k in 1..20 {
            let p = start + (target - start) * (k as f64 / 29.0);
            last = s.push_hand(k as f64 / 30.0, p).unwrap();
        }
        assert!(last.moving);
        assert_ne!(last.posterior.weights, s.prior_cells(1.0));
        s.reset();
        let after = s.push_hand(2.0, target).unwrap();
        assert!(!after.moving);
        assert_eq!(after.posterior.weights, s.prior_cells(2.0));
    }

    #[test]
    fn onset_aligns_the_observation_with_the_cache() {
        let mut config = SessionConfig::default();
        // Sharp enough for the hand evidence to override the object peaks.
        config.inference.epsilon = 0.005;
        let mut s = Session::new(grid(), scene(), config).unwrap();
        let start = Vector3::new(0.0, -0.1, 0.0);
        for k in 0..5 {
            s.push_hand(k as f64 / 30.0, start).unwrap();
        }
        assert!(s.observed().is_none());
        let spec = s.grid().spec;
        let truth = spec.index(4, 8);
        let target = spec.target(truth);
        let mut update = None;
        for k in 1..18 {
            let p = start + (target - start) * (k as f64 / 29.0);
            update = Some(s.push_hand((4 + k) as f64 / 30.0, p).unwrap());
        }
        let obs = s.observed().unwrap();
        assert_eq!(obs.points[0], start);
        assert_eq!(obs.len(), 18);
        assert_eq!(update.unwrap().posterior.map_cell, truth);
    }

    #[test]
    fn gaze_shifts_the_prior() {
        let mut s = session();
        let before = s.prior_cells(1.0);
        for k in 0..6 {
            let jitter = 0.002 * (k % 3) as f64;
            s.push_gaze(0.9 + 0.02 * k as f64, Vector2::new(0.25 + jitter, 0.15 - jitter)).unwrap();
        }
        let after = s.prior_cells(1.0);
        let spec = s.grid().spec;
        let near = spec.cell_of(&Vector2::new(0.25, 0.15)).unwrap();
        assert!(after[near] > before[near]);
        assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Samples fall out of the window as time passes.
        assert_eq!(s.prior_cells(5.0), before);
    }

    #[test]
    fn timestamps_must_increase() {
        let mut s = session();
        s.push_hand(1.0, Vector3::zeros()).unwrap();
        assert!(s.push_hand(1.0, Vector3::zeros()).is_err());
        assert!(s.push_hand(2.0, Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn safe_object_avoids_likely_targets() {
        let scene = scene();
        let probs = BTreeMap::from([(0, 0.6), (1, 0.01), (2, 0.02)]);
        // Object 1 is farther from object 0 than object 2 is.
        assert_eq!(safe_object(&probs, &scene, 0.05, &[]), Some(1));
        assert_eq!(safe_object(&probs, &scene, 0.05, &[1]), Some(2));
        let flat = BTreeMap::from([(0, 0.0), (1, 0.0), (2, 0.0)]);
        assert_eq!(safe_object(&flat, &scene, 0.05, &[]), Some(0));
        let busy = BTreeMap::from([(0, 0.3), (1, 0.3), (2, 0.3)]);
        assert_eq!(safe_object(&busy, &scene, 0.05, &[]), None);
    }
}
