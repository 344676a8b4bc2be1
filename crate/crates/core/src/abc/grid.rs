use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::priors::PriorSpec;
use crate::trajectory::{Trajectory, TrajectorySource};

use super::{kernel_weights, InferenceConfig, PosteriorEstimate};

/// Regular discretization of the table workspace, row-major with `x` fastest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: config::GRID_NX,
            ny: config::GRID_NY,
            origin: config::GRID_ORIGIN,
            cell_size: config::GRID_CELL_SIZE,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || !(self.cell_size > 0.0) {
            return Err(Error::Parameter(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn center(&self, cell: usize) -> Vector2<f64> {
        let (ix, iy) = self.coords(cell);
        Vector2::new(
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell centre lifted onto the table surface.
    pub fn target(&self, cell: usize) -> Vector3<f64> {
        let c = self.center(cell);
        Vector3::new(c.x, c.y, config::TABLE_HEIGHT)
    }

    pub fn targets(&self) -> Vec<Vector3<f64>> {
        (0..self.len()).map(|i| self.target(i)).collect()
    }

    pub fn cell_of(&self, point: &Vector2<f64>) -> Option<usize> {
        let fx = ((point.x - self.origin[0]) / self.cell_size).floor();
        let fy = ((point.y - self.origin[1]) / self.cell_size).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(self.index(fx as usize, fy as usize))
    }

    /// Chebyshev distance between two cells, in cells.
    pub fn chebyshev(&self, a: usize, b: usize) -> usize {
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        ax.abs_diff(bx).max(ay.abs_diff(by))
    }
}

/// One generated trajectory per grid cell, packed as `[cell][point][xyz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCache {
    pub generation_tag: String,
    pub points_per_traj: usize,
    pub dt: f64,
    pub data: Vec<f32>,
}

impl TrajectoryCache {
    pub fn len(&self) -> usize {
        if self.points_per_traj == 0 {
            0
        } else {
            self.data.len() / (3 * self.points_per_traj)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn packed(&self, cell: usize) -> &[f32] {
        let n = 3 * self.points_per_traj;
        &self.data[cell * n..(cell + 1) * n]
    }

    pub fn trajectory(&self, cell: usize) -> Trajectory {
        let points = self
            .packed(cell)
            .chunks_exact(3)
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect();
        Trajectory::new(points, self.dt)
    }
}

/// Generates the trajectory of every cell centre with `source`.
pub fn build_cache(spec: &GridSpec, source: &dyn TrajectorySource) -> Result<TrajectoryCache> {
    spec.validate()?;
    let mut data = Vec::new();
    let points_per_traj = source
        .generate_packed(&spec.targets(), &mut data)
        .map_err(|e| match e {
            Error::TargetGeneration { index, source } => Error::CellGeneration { cell: index, source },
            other => other,
        })?;
    if points_per_traj == 0 {
        return Err(Error::Parameter("generator produced empty trajectories".into()));
    }
    Ok(TrajectoryCache {
        generation_tag: source.generation_tag(),
        points_per_traj,
        dt: source.sample_period(),
        data,
    })
}

#[derive(Clone, Debug, Default)]
pub struct InferenceGrid {
    pub spec: GridSpec,
    cache: Option<TrajectoryCache>,
}

impl InferenceGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, cache: None })
    }

    pub fn with_cache(spec: GridSpec, cache: TrajectoryCache) -> Result<Self> {
        spec.validate()?;
        if cache.len() != spec.len() || cache.data.len() != spec.len() * cache.points_per_traj * 3 {
            return Err(Error::Parameter(format!(
                "cache holds {} trajectories for a grid of {} cells",
                cache.len(),
                spec.len()
            )));
        }
        Ok(Self {
            spec,
            cache: Some(cache),
        })
    }

    pub fn cache(&self) -> Option<&TrajectoryCache> {
        self.cache.as_ref()
    }

    pub fn generation_tag(&self) -> Option<&str> {
        self.cache.as_ref().map(|c| c.generation_tag.as_str())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Builds the cache from `source`, replacing any existing one.
    pub fn rebuild(&mut self, source: &dyn TrajectorySource) -> Result<&TrajectoryCache> {
        let cache = build_cache(&self.spec, source)?;
        Ok(self.cache.insert(cache))
    }

    /// The cache, built on first use; fails if it was built by another generator.
    pub fn ensure_cache(&mut self, source: &dyn TrajectorySource) -> Result<&TrajectoryCache> {
        if let Some(cache) = &self.cache {
            let tag = source.generation_tag();
            if cache.generation_tag != tag {
                return Err(Error::StaleCache {
                    cache: cache.generation_tag.clone(),
                    generator: tag,
                });
            }
        } else {
            self.rebuild(source)?;
        }
        Ok(self.cache.as_ref().expect("cache present"))
    }
}

/// Prior density at every cell centre.
pub fn prior_densities(spec: &GridSpec, prior: &PriorSpec) -> Vec<f64> {
    (0..spec.len()).map(|i| prior.evaluate(&spec.center(i))).collect()
}

/// Posterior over the cached grid given the onset-aligned observation so far
/// (its last point is the current time step).
pub fn evaluate(
    grid: &InferenceGrid,
    prior_cells: &[f64],
    observed: &Trajectory,
    config: &InferenceConfig,
) -> Result<PosteriorEstimate> {
    let cache = grid
        .cache()
        .ok_or_else(|| Error::Parameter("grid has no trajectory cache".into()))?;
    if prior_cells.len() != grid.spec.len() {
        return Err(Error::Parameter(format!(
            "{} prior values for {} cells",
            prior_cells.len(),
            grid.spec.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::InsufficientData("no observed points".into()));
    }
    if (observed.dt - cache.dt).abs() > config::DT_RELATIVE_TOLERANCE * cache.dt {
        return Err(Error::Alignment(format!(
            "observation sampled at {} s, cache at {} s",
            observed.dt, cache.dt
        )));
    }
    let w = config.window.get();
    let t = observed.len() - 1;
    let start = (t + 1).saturating_sub(w);
    let last = cache.points_per_traj - 1;
    // Window of observed points and the generated sample index each is compared with.
    let window: Vec<([f64; 3], usize)> = (start..=t)
        .map(|i| {
            let p = observed.points[i];
            ([p.x, p.y, p.z], i.min(last))
        })
        .collect();
    let scale = 1.0 / window.len() as f64;
    let losses: Vec<f64> = (0..grid.spec.len())
        .map(|cell| {
            let traj = cache.packed(cell);
            let mut sum = 0.0;
            for (o, j) in &window {
                let g = &traj[3 * j..3 * j + 3];
                let dx = o[0] - g[0] as f64;
                let dy = o[1] - g[1] as f64;
                let dz = o[2] - g[2] as f64;
                sum += dx * dx + dy * dy + dz * dz;
            }
            sum * scale
        })
        .collect();
    let (weights, degenerate) = kernel_weights(prior_cells, &losses, config.kernel, config.epsilon);
    let mut estimate = PosteriorEstimate::from_weights(grid.spec, weights);
    estimate.degenerate_evidence = degenerate;
    estimate.partial_window = t + 1 < w;
    Ok(estimate)
}

/// Posterior over the grid for the observation up to and including
/// `t_index`, building the trajectory cache from `source` if needed.
pub fn grid_posterior(
    grid: &mut InferenceGrid,
    prior: &PriorSpec,
    source: &dyn TrajectorySource,
    config: &InferenceConfig,
    observed: &Trajectory,
    t_index: usize,
) -> Result<PosteriorEstimate> {
    config.validate()?;
    if t_index >= observed.len() {
        return Err(Error::Alignment(format!(
            "t_index {t_index} beyond {} observed points",
            observed.len()
        )));
    }
    let cache = grid.ensure_cache(source)?;
    if t_index >= cache.points_per_traj {
        return Err(Error::Alignment(format!(
            "t_index {t_index} beyond the generated horizon of {}",
            cache.points_per_traj
        )));
    }
    let prior_cells = prior_densities(&grid.spec, prior);
    evaluate(grid, &prior_cells, &observed.prefix(t_index + 1), config)
}
