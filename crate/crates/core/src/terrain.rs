//! Terrain description: bounded contact planes, gap volumes that may not
//! receive footholds, and spherical obstacles.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned rectangle in the world xy plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x[0] + self.x[1]), 0.5 * (self.y[0] + self.y[1])]
    }

    /// Shrinks (positive `by`) or grows (negative `by`) the rectangle on
    /// every side. Collapses to the center line when it would invert.
    pub fn inset(&self, by: f64) -> Bounds {
        let shrink = |r: [f64; 2]| {
            let (lo, hi) = (r[0] + by, r[1] - by);
            if lo > hi {
                let mid = 0.5 * (r[0] + r[1]);
                [mid, mid]
            } else {
                [lo, hi]
            }
        };
        Bounds {
            x: shrink(self.x),
            y: shrink(self.y),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Bounds {
        Bounds {
            x: [self.x[0] + dx, self.x[1] + dx],
            y: [self.y[0] + dy, self.y[1] + dy],
        }
    }
}

/// Plane `n·r + d = 0`, optionally restricted to a rectangle of the xy plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactPlane {
    pub normal: [f64; 3],
    pub offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

impl ContactPlane {
    /// Horizontal plane at height `z`.
    pub fn horizontal(z: f64) -> Self {
        Self {
            normal: [0.0, 0.0, 1.0],
            offset: -z,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn normal_vector(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }

    /// Signed residual of the plane equation.
    pub fn residual(&self, r: &Vector3<f64>) -> f64 {
        self.normal_vector().dot(r) + self.offset
    }

    /// Height of the plane above `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let n = self.normal;
        -(self.offset + n[0] * x + n[1] * y) / n[2]
    }

    pub fn covers(&self, x: f64, y: f64) -> bool {
        self.bounds.map_or(true, |b| b.contains(x, y))
    }

    /// Same normal, passing through `point`.
    pub fn reanchored(&self, point: &Vector3<f64>) -> Self {
        Self {
            normal: self.normal,
            offset: -self.normal_vector().dot(point),
            bounds: self.bounds,
        }
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        let norm = self.normal_vector().norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(TerrainError::Invalid(format!("plane normal must be unit length, got norm {norm}")));
        }
        if self.normal[2] <= 0.0 {
            return Err(TerrainError::Invalid("plane normal must point upwards".into()));
        }
        if let Some(b) = self.bounds {
            if b.x[0] > b.x[1] || b.y[0] > b.y[1] {
                return Err(TerrainError::Invalid("plane bounds are inverted".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereObstacle {
    pub center: [f64; 3],
    pub radius: f64,
}

impl SphereObstacle {
    pub fn center_vector(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }
}

/// Region of the xy plane where no foothold may be placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapVolume {
    pub x: [f64; 2],
    pub y: [f64; 2],
    #[serde(default = "default_gap_depth")]
    pub z: [f64; 2],
}

fn default_gap_depth() -> [f64; 2] {
    [-1.0, 1.0]
}

impl GapVolume {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }

    pub fn contains(&self, r: &Vector3<f64>) -> bool {
        self.contains_xy(r.x, r.y) && r.z >= self.z[0] && r.z <= self.z[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPlane {
    pub id: String,
    #[serde(flatten)]
    pub plane: ContactPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedGap {
    pub id: String,
    #[serde(flatten)]
    pub gap: GapVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSphere {
    pub id: String,
    #[serde(flatten)]
    pub sphere: SphereObstacle,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TerrainError {
    #[error("invalid terrain: {0}")]
    Invalid(String),
    #[error("unknown terrain object `{0}`")]
    UnknownId(String),
}

/// Ordered terrain description. Where several planes cover the same
/// point, the highest one is the walkable surface.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terrain {
    #[serde(default)]
    pub planes: Vec<NamedPlane>,
    #[serde(default)]
    pub gaps: Vec<NamedGap>,
    #[serde(default)]
    pub spheres: Vec<NamedSphere>,
}

impl Terrain {
    pub fn flat() -> Self {
        Terrain {
            planes: vec![NamedPlane {
                id: "ground".into(),
                plane: ContactPlane::horizontal(0.0),
            }],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        if self.planes.is_empty() {
            return Err(TerrainError::Invalid("terrain has no planes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let ids = self
            .planes
            .iter()
            .map(|p| &p.id)
            .chain(self.gaps.iter().map(|g| &g.id))
            .chain(self.spheres.iter().map(|s| &s.id));
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(TerrainError::Invalid(format!("duplicate terrain id `{id}`")));
            }
        }
        for p in &self.planes {
            p.plane.validate()?;
        }
        for s in &self.spheres {
            if !(s.sphere.radius > 0.0) {
                return Err(TerrainError::Invalid(format!("sphere `{}` needs a positive radius", s.id)));
            }
        }
        Ok(())
    }

    pub fn gap_at(&self, x: f64, y: f64) -> Option<&GapVolume> {
        self.gaps.iter().map(|g| &g.gap).find(|g| g.contains_xy(x, y))
    }

    /// Highest plane whose bounds cover `(x, y)`.
    pub fn support_plane(&self, x: f64, y: f64) -> Option<&ContactPlane> {
        self.planes
            .iter()
            .map(|p| &p.plane)
            .filter(|p| p.covers(x, y))
            .max_by(|a, b| a.height_at(x, y).total_cmp(&b.height_at(x, y)))
    }

    pub fn obstacles(&self) -> Vec<SphereObstacle> {
        self.spheres.iter().map(|s| s.sphere).collect()
    }

    /// Moves a plane or sphere so that its reference point lands on `pose`.
    ///
    /// For a bounded plane the reference point is the center of its bounds
    /// on the surface; for an unbounded plane only the height changes. For a
    /// sphere it is the center.
    pub fn relocate(&mut self, id: &str, pose: [f64; 3]) -> Result<(), TerrainError> {
        if let Some(p) = self.planes.iter_mut().find(|p| p.id == id) {
            let plane = &mut p.plane;
            if let Some(b) = plane.bounds {
                let c = b.center();
                plane.bounds = Some(b.translated(pose[0] - c[0], pose[1] - c[1]));
            }
            plane.offset = -plane.normal_vector().dot(&Vector3::from(pose));
            return Ok(());
        }
        if let Some(s) = self.spheres.iter_mut().find(|s| s.id == id) {
            s.sphere.center = pose;
            return Ok(());
        }
        if let Some(g) = self.gaps.iter_mut().find(|g| g.id == id) {
            let cx = 0.5 * (g.gap.x[0] + g.gap.x[1]);
            let cy = 0.5 * (g.gap.y[0] + g.gap.y[1]);
            let (dx, dy) = (pose[0] - cx, pose[1] - cy);
            g.gap.x = [g.gap.x[0] + dx, g.gap.x[1] + dx];
            g.gap.y = [g.gap.y[0] + dy, g.gap.y[1] + dy];
            return Ok(());
        }
        Err(TerrainError::UnknownId(id.to_string()))
    }

    /// Rigid horizontal translation of every terrain element.
    pub fn translated(&self, dx: f64, dy: f64) -> Terrain {
        let mut t = self.clone();
        for p in &mut t.planes {
            let n = p.plane.normal;
            p.plane.offset -= n[0] * dx + n[1] * dy;
            p.plane.bounds = p.plane.bounds.map(|b| b.translated(dx, dy));
        }
        for g in &mut t.gaps {
            g.gap.x = [g.gap.x[0] + dx, g.gap.x[1] + dx];
            g.gap.y = [g.gap.y[0] + dy, g.gap.y[1] + dy];
        }
        for s in &mut t.spheres {
            s.sphere.center[0] += dx;
            s.sphere.center[1] += dy;
        }
        t
    }
}
