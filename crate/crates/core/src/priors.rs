//! Prior densities over the table plane.
//!
//! Every prior is a (mixture of) bivariate Gaussian(s) in table-plane
//! coordinates (m), so densities are in 1/m².

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Perception precision of object poses (m).
pub const PERCEPTION_SIGMA: f64 = 0.005;
/// Length of the gaze history used for the gaze prior (s).
pub const GAZE_WINDOW: f64 = 0.3;
pub const GAZE_REGULARIZER: f64 = 1e-4;
pub const GAZE_SCALE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl Gaussian2 {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let g = Self { mean, cov };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.cov;
        let symmetric = (c[(0, 1)] - c[(1, 0)]).abs() <= 1e-12 * (c[(0, 0)].abs() + c[(1, 1)].abs());
        if !symmetric || !(c[(0, 0)] > 0.0) || !(c.determinant() > 0.0) || !self.mean.iter().all(|v| v.is_finite())
        {
            return Err(Error::Parameter(format!("covariance is not symmetric positive definite: {c:?}")));
        }
        Ok(())
    }

    pub fn density(&self, z: &Vector2<f64>) -> f64 {
        let c = &self.cov;
        let det = c.determinant();
        let d = z - self.mean;
        // Closed-form 2x2 inverse quadratic form.
        let q = (c[(1, 1)] * d.x * d.x - (c[(0, 1)] + c[(1, 0)]) * d.x * d.y + c[(0, 0)] * d.y * d.y) / det;
        (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector2<f64> {
        let c = &self.cov;
        let l11 = c[(0, 0)].sqrt();
        let l21 = c[(1, 0)] / l11;
        let l22 = (c[(1, 1)] - l21 * l21).sqrt();
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        self.mean + Vector2::new(l11 * u, l21 * u + l22 * v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedGaussian {
    pub weight: f64,
    #[serde(flatten)]
    pub gaussian: Gaussian2,
}

/// A composable prior over reach targets on the table plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PriorSpec {
    /// Reaching favours locations close to the human.
    Proximity(Gaussian2),
    /// Centred where the gaze meets the table.
    Gaze(Gaussian2),
    /// One mode per detected object.
    Objects { components: Vec<WeightedGaussian> },
    Mixture { children: Vec<PriorSpec>, weights: Vec<f64> },
}

impl PriorSpec {
    pub fn evaluate(&self, z: &Vector2<f64>) -> f64 {
        match self {
            PriorSpec::Proximity(g) | PriorSpec::Gaze(g) => g.density(z),
            PriorSpec::Objects { components } => components.iter().map(|c| c.weight * c.gaussian.density(z)).sum(),
            PriorSpec::Mixture { children, weights } => {
                children.iter().zip(weights).map(|(c, w)| w * c.evaluate(z)).sum()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector2<f64> {
        match self {
            PriorSpec::Proximity(g) | PriorSpec::Gaze(g) => g.sample(rng),
            PriorSpec::Objects { components } => {
                let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
                components[pick(&weights, rng)].gaussian.sample(rng)
            }
            PriorSpec::Mixture { children, weights } => children[pick(weights, rng)].sample(rng),
        }
    }

    pub fn sample_seeded(&self, seed: u64) -> Vector2<f64> {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Every Gaussian component, with its total weight in this prior.
    pub fn components(&self) -> Vec<WeightedGaussian> {
        let mut out = Vec::new();
        self.collect_components(1.0, &mut out);
        out
    }

    fn collect_components(&self, scale: f64, out: &mut Vec<WeightedGaussian>) {
        match self {
            PriorSpec::Proximity(g) | PriorSpec::Gaze(g) => out.push(WeightedGaussian {
                weight: scale,
                gaussian: *g,
            }),
            PriorSpec::Objects { components } => out.extend(components.iter().map(|c| WeightedGaussian {
                weight: scale * c.weight,
                gaussian: c.gaussian,
            })),
            PriorSpec::Mixture { children, weights } => {
                for (c, w) in children.iter().zip(weights) {
                    c.collect_components(scale * w, out);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Proximity(g) | PriorSpec::Gaze(g) => g.validate(),
            PriorSpec::Objects { components } => {
                components.iter().try_for_each(|c| c.gaussian.validate())?;
                check_weights(&components.iter().map(|c| c.weight).collect::<Vec<_>>())
            }
            PriorSpec::Mixture { children, weights } => {
                if children.len() != weights.len() || children.is_empty() {
                    return Err(Error::Parameter("mixture needs one weight per child".into()));
                }
                check_weights(weights)?;
                children.iter().try_for_each(PriorSpec::validate)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PriorSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Parameter("weights must be non-negative".into()));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter("weights must sum to one".into()));
    }
    Ok(())
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Parameter("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Parameter("weights are all zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just under 1; take the last live entry.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn proximity_prior(human_origin: Vector2<f64>, scale: Matrix2<f64>) -> Result<PriorSpec> {
    Ok(PriorSpec::Proximity(Gaussian2::new(human_origin, scale)?))
}

/// `N(origin, 0.1 I)` on the table plane.
pub fn default_proximity_prior() -> PriorSpec {
    proximity_prior(Vector2::zeros(), Matrix2::identity() * 0.1).expect("valid default")
}

/// Gaussian per object, weighted by detection confidence and widened by the
/// object size and perception precision.
pub fn objects_prior(scene: &Scene) -> Result<PriorSpec> {
    if scene.objects.is_empty() {
        return Err(Error::EmptyScene);
    }
    let weights = normalized(&scene.objects.iter().map(|o| o.confidence).collect::<Vec<_>>())?;
    let components = scene
        .objects
        .iter()
        .zip(weights)
        .map(|(o, weight)| {
            let var = (o.extent / 2.0).powi(2) + PERCEPTION_SIGMA.powi(2);
            Ok(WeightedGaussian {
                weight,
                gaussian: Gaussian2::new(o.plane_position(), Matrix2::identity() * var)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorSpec::Objects { components })
}

pub fn mixture(children: Vec<PriorSpec>, weights: &[f64]) -> Result<PriorSpec> {
    if children.len() != weights.len() || children.is_empty() {
        return Err(Error::Parameter(format!(
            "mixture of {} children given {} weights",
            children.len(),
            weights.len()
        )));
    }
    Ok(PriorSpec::Mixture {
        children,
        weights: normalized(weights)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub time: f64,
    pub intersection: Vector2<f64>,
}

/// Recent gaze/table intersections, oldest first.
#[derive(Clone, Debug, Default)]
pub struct GazeBuffer {
    samples: VecDeque<GazeSample>,
}

impl GazeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a sample and evicts everything older than the gaze window.
    pub fn push(&mut self, time: f64, intersection: Vector2<f64>) -> Result<()> {
        if let Some(last) = self.samples.back() {
            if !(time > last.time) {
                return Err(Error::Parameter(format!(
                    "gaze timestamps must increase: {time} after {}",
                    last.time
                )));
            }
        }
        self.samples.push_back(GazeSample { time, intersection });
        while self.samples.front().is_some_and(|s| s.time < time - GAZE_WINDOW) {
            self.samples.pop_front();
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn in_window(&self, now: f64) -> impl Iterator<Item = &GazeSample> {
        self.samples
            .iter()
            .filter(move |s| s.time >= now - GAZE_WINDOW - 1e-12 && s.time <= now)
    }
}

/// Gaussian at the mean recent gaze point, scaled by the spread of the
/// intersections in the window (unbiased covariance plus a regularizer).
pub fn gaze_prior(buffer: &GazeBuffer, now: f64) -> Result<PriorSpec> {
    let points: Vec<Vector2<f64>> = buffer.in_window(now).map(|s| s.intersection).collect();
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "gaze prior needs 2 samples in the last {GAZE_WINDOW} s, found {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let scatter = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix2<f64>>();
    let cov = scatter / (n - 1.0) * GAZE_SCALE + Matrix2::identity() * GAZE_REGULARIZER;
    Ok(PriorSpec::Gaze(Gaussian2::new(mean, cov)?))
}
