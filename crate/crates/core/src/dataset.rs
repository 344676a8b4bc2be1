//! Trajectory datasets: generation from the simulator and the ITRJ binary
//! format (plus a JSONL export and a JSON sidecar with the generation setup).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abc::GridSpec;
use crate::config;
use crate::error::{Error, LoadError, Result};
use crate::trajectory::{Simulator, Trajectory, TrajectorySource};

const MAGIC: &[u8; 4] = b"ITRJ";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Targets and their trajectories, packed as `[record][point][xyz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dt: f32,
    pub points_per_traj: usize,
    pub targets: Vec<[f32; 3]>,
    pub points: Vec<f32>,
}

/// Generation setup stored next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    pub seed: u64,
    pub generation_tag: String,
    pub simulator: Simulator,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn record_len(&self) -> usize {
        3 * self.points_per_traj
    }

    pub fn record(&self, i: usize) -> &[f32] {
        let n = self.record_len();
        &self.points[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> Vector3<f64> {
        let t = self.targets[i];
        Vector3::new(t[0] as f64, t[1] as f64, t[2] as f64)
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        let points = self
            .record(i)
            .chunks_exact(3)
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect();
        Trajectory::new(points, self.dt as f64)
    }

    /// Simulates `count` reaches to targets drawn uniformly over the workspace.
    pub fn generate(source: &dyn TrajectorySource, count: usize, seed: u64) -> Result<Self> {
        let targets = sample_targets(count, seed);
        let mut points = Vec::new();
        let points_per_traj = source.generate_packed(&targets, &mut points)?;
        Ok(Self {
            dt: source.sample_period() as f32,
            points_per_traj,
            targets: targets.iter().map(|t| [t.x as f32, t.y as f32, t.z as f32]).collect(),
            points,
        })
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        out.write_all(&(self.points_per_traj as u32).to_le_bytes())?;
        out.write_all(&self.dt.to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.targets[i].iter().chain(self.record(i)) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN {
            return Err(LoadError::Truncated(format!("{} header bytes", bytes.len())).into());
        }
        if &bytes[..4] != MAGIC {
            return Err(LoadError::BadMagic {
                expected: "ITRJ".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if word(4) != VERSION {
            return Err(LoadError::Version(word(4)).into());
        }
        let count = word(8) as usize;
        let points_per_traj = word(12) as usize;
        let dt = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let record_floats = 3 + 3 * points_per_traj;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * record_floats * 4 {
            return Err(LoadError::Truncated(format!(
                "{} body bytes for {count} records of {points_per_traj} points",
                body.len()
            ))
            .into());
        }
        let mut targets = Vec::with_capacity(count);
        let mut points = Vec::with_capacity(count * 3 * points_per_traj);
        for record in body.chunks_exact(record_floats * 4) {
            let mut floats = record.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
            targets.push([
                floats.next().expect("x"),
                floats.next().expect("y"),
                floats.next().expect("z"),
            ]);
            points.extend(floats);
        }
        Ok(Self {
            dt,
            points_per_traj,
            targets,
            points,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// One `{"target": [..], "points": [[..], ..]}` object per line.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for i in 0..self.len() {
            let record = JsonRecord {
                target: self.targets[i],
                points: self.record(i).chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
            };
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead, dt: f32) -> Result<Self> {
        let mut targets = Vec::new();
        let mut points = Vec::new();
        let mut points_per_traj = None;
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: JsonRecord = serde_json::from_str(&line)?;
            if *points_per_traj.get_or_insert(record.points.len()) != record.points.len() {
                return Err(LoadError::ShapeMismatch(format!("line {}: {} points", n + 1, record.points.len())).into());
            }
            targets.push(record.target);
            points.extend(record.points.iter().flatten());
        }
        Ok(Self {
            dt,
            points_per_traj: points_per_traj.unwrap_or(0),
            targets,
            points,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    target: [f32; 3],
    points: Vec<[f32; 3]>,
}

/// Reach targets uniform over the inference workspace, on the table surface.
pub fn sample_targets(count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let spec = GridSpec::default();
    let width = spec.nx as f64 * spec.cell_size;
    let depth = spec.ny as f64 * spec.cell_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Vector3::new(
                spec.origin[0] + rng.random::<f64>() * width,
                spec.origin[1] + rng.random::<f64>() * depth,
                config::TABLE_HEIGHT,
            )
        })
        .collect()
}

pub fn meta_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

impl DatasetMeta {
    pub fn new(simulator: &Simulator, count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            generation_tag: simulator.generation_tag(),
            simulator: simulator.clone(),
        }
    }

    pub fn save(&self, dataset: &Path) -> Result<()> {
        std::fs::write(meta_path(dataset), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dataset: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(meta_path(dataset))?;
        serde_json::from_str(&text).map_err(|e| Error::Load(LoadError::Malformed(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Scene;

    fn small() -> Dataset {
        Dataset::generate(&Simulator::standard(Scene::empty()), 5, 3).unwrap()
    }

    #[test]
    fn generation_is_seeded_and_shaped() {
        let a = small();
        assert_eq!(a.len(), 5);
        assert_eq!(a.points_per_traj, 90);
        assert_eq!(a.points.len(), 5 * 270);
        assert_eq!(a, small());
        assert_ne!(a.targets, Dataset::generate(&Simulator::standard(Scene::empty()), 5, 4).unwrap().targets);
        let spec = GridSpec::default();
        for t in &a.targets {
            assert!(spec.cell_of(&nalgebra::Vector2::new(t[0] as f64, t[1] as f64)).is_some());
        }
    }

    #[test]
    fn itrj_round_trip_and_layout() {
        let data = small();
        let mut bytes = Vec::new();
        data.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"ITRJ");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 90);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), (1.0f64 / 30.0) as f32);
        assert_eq!(bytes.len(), 20 + 5 * (3 + 270) * 4);
        // First record starts with its target, then the start point.
        let x = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        assert_eq!(x, data.targets[0][0]);
        assert_eq!(Dataset::read(&mut bytes.as_slice()).unwrap(), data);
    }

    #[test]
    fn itrj_errors_are_named() {
        let mut bytes = Vec::new();
        small().write(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Dataset::read(&mut bad.as_slice()), Err(Error::Load(LoadError::BadMagic { .. }))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Dataset::read(&mut &cut[..]), Err(Error::Load(LoadError::Truncated(_)))));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(Dataset::read(&mut version.as_slice()), Err(Error::Load(LoadError::Version(2)))));
    }

    #[test]
    fn jsonl_round_trip() {
        let data = small();
        let mut text = Vec::new();
        data.write_jsonl(&mut text).unwrap();
        assert_eq!(text.iter().filter(|b| **b == b'\n').count(), 5);
        let back = Dataset::read_jsonl(text.as_slice(), data.dt).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn meta_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.itrj");
        let sim = Simulator::standard(Scene::empty());
        let data = Dataset::generate(&sim, 2, 1).unwrap();
        data.save(&path).unwrap();
        DatasetMeta::new(&sim, 2, 1).save(&path).unwrap();
        assert!(dir.path().join("d.itrj.meta.json").exists());
        let meta = DatasetMeta::load(&path).unwrap();
        assert_eq!(meta.simulator, sim);
        assert_eq!(meta.generation_tag, sim.generation_tag());
        assert_eq!(Dataset::load(&path).unwrap(), data);
    }
}
