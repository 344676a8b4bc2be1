use nalgebra::{Isometry3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};

/// A graspable object detected on the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub position: Vector3<f64>,
    /// Edge length of the object (m).
    pub extent: f64,
    /// Detection confidence in [0, 1].
    pub confidence: f64,
}

impl SceneObject {
    pub fn plane_position(&self) -> Vector2<f64> {
        self.position.xy()
    }
}

/// Table surface: pose of its centre plus half extents along its local x/y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableFrame {
    pub pose: Isometry3<f64>,
    pub half_extents: Vector2<f64>,
}

impl TableFrame {
    /// Rectangle matching the inference workspace.
    pub fn workspace() -> Self {
        let width = config::GRID_NX as f64 * config::GRID_CELL_SIZE;
        let depth = config::GRID_NY as f64 * config::GRID_CELL_SIZE;
        let centre = Vector3::new(
            config::GRID_ORIGIN[0] + width / 2.0,
            config::GRID_ORIGIN[1] + depth / 2.0,
            config::TABLE_HEIGHT,
        );
        Self {
            pose: Isometry3::translation(centre.x, centre.y, centre.z),
            half_extents: Vector2::new(width / 2.0, depth / 2.0),
        }
    }

    /// Whether `point` projects onto the rectangle grown by `margin`.
    pub fn contains(&self, point: &Vector3<f64>, margin: f64) -> bool {
        let local = self.pose.inverse_transform_point(&(*point).into());
        local.x.abs() <= self.half_extents.x + margin && local.y.abs() <= self.half_extents.y + margin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub table_frame: TableFrame,
    pub box_position: Vector3<f64>,
    /// Points the hand is repelled from while reaching.
    pub obstacles: Vec<Vector3<f64>>,
}

/// Default location of the shared box: near the human's left, on the table.
pub const BOX_POSITION: [f64; 3] = [-0.55, 0.08, config::TABLE_HEIGHT];

impl Scene {
    /// Empty table with the box, which is the only obstacle.
    pub fn empty() -> Self {
        let box_position = Vector3::from(BOX_POSITION);
        Self {
            objects: Vec::new(),
            table_frame: TableFrame::workspace(),
            box_position,
            obstacles: vec![box_position],
        }
    }

    pub fn with_objects(mut self, objects: Vec<SceneObject>) -> Result<Self> {
        self.objects = objects;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for obj in &self.objects {
            if !(obj.extent > 0.0) {
                return Err(Error::Parameter(format!("object {} has non-positive extent", obj.id)));
            }
            if !(0.0..=1.0).contains(&obj.confidence) {
                return Err(Error::Parameter(format!("object {} confidence outside [0, 1]", obj.id)));
            }
            if !self.table_frame.contains(&obj.position, 1e-9) {
                return Err(Error::Parameter(format!("object {} lies off the table", obj.id)));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Random layout of `count` cubes inside the human's reach zone, kept clear
    /// of the box and at least `min_separation` apart (centre to centre).
    pub fn random_layout(count: usize, min_separation: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut scene = Self::empty();
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while objects.len() < count {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Parameter(format!(
                    "could not place {count} objects {min_separation} m apart"
                )));
            }
            let candidate = Vector2::new(rng.random_range(-0.45..0.35), rng.random_range(0.15..0.55));
            if !in_reach_zone(&candidate, 0.04) {
                continue;
            }
            if (candidate - scene.box_position.xy()).norm() < OBJECT_BOX_CLEARANCE {
                continue;
            }
            if objects.iter().any(|o| (o.plane_position() - candidate).norm() < min_separation) {
                continue;
            }
            objects.push(SceneObject {
                id: objects.len() as u32,
                position: Vector3::new(candidate.x, candidate.y, config::TABLE_HEIGHT),
                extent: 0.05,
                confidence: 1.0,
            });
        }
        scene.objects = objects;
        scene.validate()?;
        Ok(scene)
    }
}

/// Objects are kept this far from the box so that the box's repulsion does not
/// act at a reach target.
pub const OBJECT_BOX_CLEARANCE: f64 = 0.22;

/// Whether a table-plane point lies inside the comfortable reach zone, shrunk
/// by `margin`.
pub fn in_reach_zone(point: &Vector2<f64>, margin: f64) -> bool {
    let centre = Vector2::from(config::REACH_ZONE_CENTER);
    (point - centre).norm() <= config::REACH_ZONE_RADIUS - margin
}
