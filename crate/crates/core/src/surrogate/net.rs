use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{Error, Result};
use crate::trajectory::{hex, Trajectory, TrajectorySource};

use super::mlp::Mlp;

pub const LAYER_SIZES: [usize; 4] = [3, 32, 64, 3 * config::HORIZON];

/// Affine map of each target coordinate from `[lo, hi]` to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for InputNormalization {
    /// The inference workspace, with a 10 cm band around the table height.
    fn default() -> Self {
        let width = config::GRID_NX as f64 * config::GRID_CELL_SIZE;
        let depth = config::GRID_NY as f64 * config::GRID_CELL_SIZE;
        Self {
            lo: [config::GRID_ORIGIN[0], config::GRID_ORIGIN[1], config::TABLE_HEIGHT - 0.1],
            hi: [
                config::GRID_ORIGIN[0] + width,
                config::GRID_ORIGIN[1] + depth,
                config::TABLE_HEIGHT + 0.1,
            ],
        }
    }
}

impl InputNormalization {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.hi[i] > self.lo[i]) || !self.lo[i].is_finite() || !self.hi[i].is_finite()) {
            return Err(Error::Parameter(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, target: &Vector3<f64>) -> [f32; 3] {
        std::array::from_fn(|i| (2.0 * (target[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0) as f32)
    }

    pub fn matrix(&self, targets: &[Vector3<f64>]) -> DMatrix<f32> {
        let mut data = Vec::with_capacity(3 * targets.len());
        for t in targets {
            data.extend(self.apply(t));
        }
        DMatrix::from_vec(3, targets.len(), data)
    }
}

/// Learned stand-in for the simulator: maps a target to a packed trajectory
/// (`[point][xyz]`, metres).
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateNet {
    mlp: Mlp<f32>,
    normalization: InputNormalization,
    dt: f64,
    seed: u64,
    digest: String,
    #[cfg(all(target_arch = "x86_64", target_os = "linux"))]
    tiles: Option<std::sync::Arc<super::amx::PackedMlp>>,
}

impl SurrogateNet {
    pub fn new(mlp: Mlp<f32>, normalization: InputNormalization, dt: f64, seed: u64) -> Result<Self> {
        normalization.validate()?;
        if mlp.layers.is_empty() || mlp.input_size() != 3 || mlp.output_size() % 3 != 0 {
            return Err(Error::CorruptModel(format!(
                "network maps {} inputs to {} outputs; expected 3 to a multiple of 3",
                mlp.layers.first().map_or(0, |l| l.inputs()),
                mlp.layers.last().map_or(0, |l| l.outputs())
            )));
        }
        if mlp.layers.windows(2).any(|w| w[0].outputs() != w[1].inputs()) {
            return Err(Error::CorruptModel("consecutive layer shapes disagree".into()));
        }
        if !mlp.is_finite() {
            return Err(Error::CorruptModel("non-finite parameters".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Parameter("dt must be positive".into()));
        }
        let digest = params_sha256(&mlp);
        Ok(Self {
            normalization,
            dt,
            seed,
            digest,
            #[cfg(all(target_arch = "x86_64", target_os = "linux"))]
            tiles: super::amx::PackedMlp::new(&mlp).map(std::sync::Arc::new),
            mlp,
        })
    }

    pub fn mlp(&self) -> &Mlp<f32> {
        &self.mlp
    }

    pub fn normalization(&self) -> &InputNormalization {
        &self.normalization
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// SHA-256 of the little-endian, row-major parameter blobs.
    pub fn sha256(&self) -> &str {
        &self.digest
    }

    pub fn points_per_traj(&self) -> usize {
        self.mlp.output_size() / 3
    }

    pub fn forward(&self, target: &Vector3<f64>) -> Result<Trajectory> {
        Ok(self.batch_forward(std::slice::from_ref(target))?.remove(0))
    }

    pub fn batch_forward(&self, targets: &[Vector3<f64>]) -> Result<Vec<Trajectory>> {
        let packed = self.batch_forward_packed(targets, Vec::new())?;
        let n = self.mlp.output_size();
        Ok(packed
            .chunks_exact(n.max(1))
            .map(|c| {
                let points = c
                    .chunks_exact(3)
                    .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
                    .collect();
                Trajectory::new(points, self.dt)
            })
            .collect())
    }

    /// Packed `[target][point][xyz]` output written into the allocation of `out`.
    pub fn batch_forward_packed(&self, targets: &[Vector3<f64>], out: Vec<f32>) -> Result<Vec<f32>> {
        if let Some(i) = targets.iter().position(|t| t.iter().any(|c| !c.is_finite())) {
            return Err(Error::TargetGeneration {
                index: i,
                source: Box::new(Error::Domain("target is not finite".into())),
            });
        }
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.normalization.matrix(targets);
        #[cfg(all(target_arch = "x86_64", target_os = "linux"))]
        if let Some(tiles) = &self.tiles {
            return Ok(tiles.forward_into(x.as_slice(), out));
        }
        Ok(self.mlp.forward_into(&x, out))
    }
}

/// Parameter bytes in file order: per layer the row-major weight, then the bias.
pub(crate) fn layer_blobs(mlp: &Mlp<f32>) -> Vec<(Vec<u8>, Vec<u8>)> {
    mlp.layers
        .iter()
        .map(|l| {
            let mut w = Vec::with_capacity(4 * l.weight.len());
            for r in 0..l.outputs() {
                for c in 0..l.inputs() {
                    w.extend_from_slice(&l.weight[(r, c)].to_le_bytes());
                }
            }
            let b = l.bias.iter().flat_map(|v| v.to_le_bytes()).collect();
            (w, b)
        })
        .collect()
}

fn params_sha256(mlp: &Mlp<f32>) -> String {
    let mut hasher = Sha256::new();
    for (w, b) in layer_blobs(mlp) {
        hasher.update(&w);
        hasher.update(&b);
    }
    hex(&hasher.finalize())
}

impl TrajectorySource for SurrogateNet {
    fn generate(&self, target: &Vector3<f64>) -> Result<Trajectory> {
        self.forward(target)
    }

    fn generate_batch(&self, targets: &[Vector3<f64>]) -> Result<Vec<Trajectory>> {
        self.batch_forward(targets)
    }

    fn generate_packed(&self, targets: &[Vector3<f64>], out: &mut Vec<f32>) -> Result<usize> {
        *out = self.batch_forward_packed(targets, std::mem::take(out))?;
        Ok(self.points_per_traj())
    }

    fn sample_period(&self) -> f64 {
        self.dt
    }

    fn generation_tag(&self) -> String {
        format!("surrogate:{}", self.digest)
    }
}
