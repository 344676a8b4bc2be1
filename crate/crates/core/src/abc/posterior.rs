use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::scene::Scene;

use super::GridSpec;

/// Normalized weights over the grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEstimate {
    pub spec: GridSpec,
    pub weights: Vec<f64>,
    /// Highest-weight cell; ties go to the lowest index.
    pub map_cell: usize,
    pub map_point: Vector3<f64>,
    /// Kish effective sample size `1 / Σ w²`.
    pub n_effective: f64,
    /// Fewer observed points than the window length were compared.
    pub partial_window: bool,
    /// No cell had non-zero kernel weight; the weights are the prior.
    pub degenerate_evidence: bool,
}

impl PosteriorEstimate {
    /// Wraps already-normalized weights.
    pub fn from_weights(spec: GridSpec, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), spec.len(), "one weight per cell");
        let mut map_cell = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w > weights[map_cell] {
                map_cell = i;
            }
        }
        let n_effective = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Self {
            map_point: spec.target(map_cell),
            spec,
            weights,
            map_cell,
            n_effective,
            partial_window: false,
            degenerate_evidence: false,
        }
    }

    pub fn uniform(spec: GridSpec) -> Self {
        let n = spec.len();
        Self::from_weights(spec, vec![1.0 / n as f64; n])
    }

    pub fn credible_mass_at(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.weights[c]).sum()
    }

    /// Mass of the cells whose centres lie within `radius` of `point`.
    pub fn mass_within(&self, point: &Vector2<f64>, radius: f64) -> f64 {
        let spec = &self.spec;
        let cell_range = |lo: f64, origin: f64, n: usize| {
            let k = ((lo - origin) / spec.cell_size).floor();
            k.clamp(0.0, n as f64) as usize
        };
        let x0 = cell_range(point.x - radius, spec.origin[0], spec.nx);
        let x1 = cell_range(point.x + radius, spec.origin[0], spec.nx - 1) + 1;
        let y0 = cell_range(point.y - radius, spec.origin[1], spec.ny);
        let y1 = cell_range(point.y + radius, spec.origin[1], spec.ny - 1) + 1;
        let r2 = radius * radius;
        let mut mass = 0.0;
        for iy in y0..y1.min(spec.ny) {
            for ix in x0..x1.min(spec.nx) {
                let cell = spec.index(ix, iy);
                if (spec.center(cell) - point).norm_squared() <= r2 {
                    mass += self.weights[cell];
                }
            }
        }
        mass.min(1.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }

    /// Weights scaled so that the largest maps to 255.
    pub fn quantize_u8(&self) -> Vec<u8> {
        let max = self.weights[self.map_cell];
        if !(max > 0.0) {
            return vec![0; self.weights.len()];
        }
        self.weights.iter().map(|w| (w / max * 255.0).round() as u8).collect()
    }

    pub fn to_json(&self) -> PosteriorJson {
        PosteriorJson {
            grid: self.spec,
            weights: self.weights.clone(),
            map_cell: self.map_cell,
            map_point: [self.map_point.x, self.map_point.y, self.map_point.z],
            n_effective: self.n_effective,
        }
    }

    pub fn write_ipos(&self, out: &mut impl Write) -> Result<()> {
        let weights: Vec<f32> = self.weights.iter().map(|&w| w as f32).collect();
        write_ipos(out, self.spec.nx, self.spec.ny, &weights)
    }
}

/// Heat-map export: grid metadata plus row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorJson {
    pub grid: GridSpec,
    pub weights: Vec<f64>,
    pub map_cell: usize,
    pub map_point: [f64; 3],
    pub n_effective: f64,
}

const IPOS_MAGIC: &[u8; 4] = b"IPOS";
const IPOS_VERSION: u32 = 1;

pub fn write_ipos(out: &mut impl Write, nx: usize, ny: usize, weights: &[f32]) -> Result<()> {
    if weights.len() != nx * ny {
        return Err(Error::Parameter(format!("{} weights for a {nx}x{ny} grid", weights.len())));
    }
    out.write_all(IPOS_MAGIC)?;
    out.write_all(&IPOS_VERSION.to_le_bytes())?;
    out.write_all(&(nx as u32).to_le_bytes())?;
    out.write_all(&(ny as u32).to_le_bytes())?;
    for w in weights {
        out.write_all(&w.to_le_bytes())?;
    }
    Ok(())
}

/// Reads an IPOS file and returns `(nx, ny, weights)`.
pub fn read_ipos(input: &mut impl Read) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(LoadError::Truncated(format!("{} header bytes", bytes.len())).into());
    }
    if &bytes[..4] != IPOS_MAGIC {
        return Err(LoadError::BadMagic {
            expected: "IPOS".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != IPOS_VERSION {
        return Err(LoadError::Version(version).into());
    }
    let (nx, ny) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != nx * ny * 4 {
        return Err(LoadError::Truncated(format!("{} weight bytes for a {nx}x{ny} grid", body.len())).into());
    }
    let weights = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((nx, ny, weights))
}

/// Posterior mass within `conflict_radius` of each object, keyed by id.
/// Regions of nearby objects overlap, so the values need not sum to one.
pub fn decision_summary(posterior: &PosteriorEstimate, scene: &Scene, conflict_radius: f64) -> BTreeMap<u32, f64> {
    scene
        .objects
        .iter()
        .map(|o| (o.id, posterior.mass_within(&o.plane_position(), conflict_radius)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneObject;

    fn spec() -> GridSpec {
        GridSpec::default()
    }

    fn point_mass(cell: usize) -> PosteriorEstimate {
        let mut w = vec![0.0; spec().len()];
        w[cell] = 1.0;
        PosteriorEstimate::from_weights(spec(), w)
    }

    fn scene_with(positions: &[(f64, f64)]) -> Scene {
        let objects = positions
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| SceneObject {
                id: i as u32,
                position: Vector3::new(x, y, 0.0),
                extent: 0.05,
                confidence: 1.0,
            })
            .collect();
        Scene::empty().with_objects(objects).unwrap()
    }

    #[test]
    fn map_ties_go_to_lowest_index() {
        let mut w = vec![0.0; spec().len()];
        w[40] = 0.5;
        w[20] = 0.5;
        let post = PosteriorEstimate::from_weights(spec(), w);
        assert_eq!(post.map_cell, 20);
        assert_eq!(post.n_effective, 2.0);
        assert!((post.entropy() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_decision() {
        let scene = scene_with(&[(0.105, 0.305), (-0.2, 0.4), (0.3, 0.2)]);
        let cell = spec().cell_of(&Vector2::new(0.105, 0.305)).unwrap();
        let probs = decision_summary(&point_mass(cell), &scene, 0.04);
        assert_eq!(probs[&0], 1.0);
        assert_eq!(probs[&1], 0.0);
        assert_eq!(probs[&2], 0.0);
    }

    #[test]
    fn uniform_decision_counts_cells() {
        let spec = spec();
        let post = PosteriorEstimate::uniform(spec);
        let scene = scene_with(&[(0.0, 0.35)]);
        let radius = 0.1;
        let inside = (0..spec.len())
            .filter(|&c| (spec.center(c) - Vector2::new(0.0, 0.35)).norm() <= radius)
            .count();
        let p = decision_summary(&post, &scene, radius)[&0];
        assert!((p - inside as f64 / spec.len() as f64).abs() < 1e-12);
        // Roughly the disc area over the workspace area.
        assert!((p - std::f64::consts::PI * 0.01 / 0.91).abs() < 0.002);
    }

    #[test]
    fn dense_objects_overlap() {
        let positions: Vec<(f64, f64)> = (0..16).map(|i| (-0.2 + 0.05 * (i % 4) as f64, 0.2 + 0.05 * (i / 4) as f64)).collect();
        let scene = scene_with(&positions);
        let mut w = vec![0.0; spec().len()];
        for (x, y) in &positions {
            w[spec().cell_of(&Vector2::new(*x + 0.001, *y + 0.001)).unwrap()] = 1.0 / 16.0;
        }
        let post = PosteriorEstimate::from_weights(spec(), w);
        let probs = decision_summary(&post, &scene, 0.15);
        let sum: f64 = probs.values().sum();
        assert!(sum > 1.0, "{sum}");
        assert!(probs.values().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn mass_within_handles_the_border() {
        let post = PosteriorEstimate::uniform(spec());
        assert!((post.mass_within(&Vector2::new(0.0, 0.35), 5.0) - 1.0).abs() < 1e-9);
        assert_eq!(post.mass_within(&Vector2::new(5.0, 5.0), 0.1), 0.0);
        let corner = post.mass_within(&Vector2::new(-0.65, 0.0), 0.05);
        assert!(corner > 0.0);
    }

    #[test]
    fn quantization_scales_to_255() {
        let mut w = vec![0.0; spec().len()];
        w[0] = 0.2;
        w[1] = 0.8;
        let q = PosteriorEstimate::from_weights(spec(), w).quantize_u8();
        assert_eq!(q[1], 255);
        assert_eq!(q[0], 64);
        assert_eq!(q[2], 0);
    }

    #[test]
    fn ipos_round_trip_and_errors() {
        let post = point_mass(77);
        let mut bytes = Vec::new();
        post.write_ipos(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"IPOS");
        assert_eq!(bytes.len(), 16 + 4 * 9100);
        let (nx, ny, w) = read_ipos(&mut bytes.as_slice()).unwrap();
        assert_eq!((nx, ny), (130, 70));
        assert_eq!(w[77], 1.0);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_ipos(&mut bad.as_slice()), Err(Error::Load(LoadError::BadMagic { .. }))));
        let short = &bytes[..100];
        assert!(matches!(read_ipos(&mut &short[..]), Err(Error::Load(LoadError::Truncated(_)))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(read_ipos(&mut version.as_slice()), Err(Error::Load(LoadError::Version(9)))));
    }

    #[test]
    fn json_export_shape() {
        let json = serde_json::to_value(point_mass(5).to_json()).unwrap();
        assert_eq!(json["grid"]["nx"], 130);
        assert_eq!(json["grid"]["ny"], 70);
        assert_eq!(json["grid"]["cell_size"], 0.01);
        assert_eq!(json["weights"].as_array().unwrap().len(), 9100);
        assert_eq!(json["map_cell"], 5);
    }
}
