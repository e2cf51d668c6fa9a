//! Quaternion and pose representations with the evaluation metrics used
//! for reporting: Euclidean position error in meters, geodesic orientation
//! error in degrees, and per-scene median summaries.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("quaternion norm {0} too small to normalize")]
    DegenerateOrientation(f64),
    #[error("cannot summarize an empty error list")]
    EmptySummary,
}

/// Orientation as a quaternion, component order w-first (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn normalize(&self) -> Result<Quaternion, PoseError> {
        let n = self.norm();
        if n <= 1e-12 {
            return Err(PoseError::DegenerateOrientation(n));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Resolve the q/-q double cover: flip so w > 0; when w == 0, flip so
    /// the first nonzero of (x, y, z) is positive.
    pub fn canonicalize_sign(&self) -> Quaternion {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quaternion::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    /// Unit-normalized and sign-canonicalized.
    pub fn canonical(&self) -> Result<Quaternion, PoseError> {
        Ok(self.normalize()?.canonicalize_sign())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Camera pose: position in meters (world frame) plus unit quaternion
/// orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: Quaternion,
}

impl Pose {
    pub fn new(position: [f64; 3], orientation: Quaternion) -> Result<Self, PoseError> {
        Ok(Pose { position, orientation: orientation.canonical()? })
    }

    /// Flat 7-vector (x, y, z, qw, qx, qy, qz).
    pub fn to_vec7(&self) -> [f64; 7] {
        let q = self.orientation;
        [self.position[0], self.position[1], self.position[2], q.w, q.x, q.y, q.z]
    }
}

/// Geodesic angle between two unit quaternions in degrees:
/// `2 acos(|<q0, q1>|)`, insensitive to the double cover, in [0, 180].
///
/// acos is ill-conditioned near 1, so angles below ~1e-5 degrees carry
/// rounding noise of the same order.
pub fn angular_error_deg(q0: &Quaternion, q1: &Quaternion) -> f64 {
    let d = q0.dot(q1).abs().clamp(0.0, 1.0);
    2.0 * d.acos().to_degrees()
}

/// Euclidean distance in meters.
pub fn position_error_m(x0: &[f64; 3], x1: &[f64; 3]) -> f64 {
    let dx = x0[0] - x1[0];
    let dy = x0[1] - x1[1];
    let dz = x0[2] - x1[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// One evaluated sample: scene id, position error, angular error and
/// whether the scene classifier was right.
#[derive(Debug, Clone, Copy)]
pub struct SampleError {
    pub scene_id: usize,
    pub position_m: f64,
    pub orientation_deg: f64,
    pub scene_correct: bool,
}

#[derive(Debug, Clone)]
pub struct SceneSummary {
    pub median_position_m: f64,
    pub median_orientation_deg: f64,
    pub samples: usize,
    pub accuracy: f64,
}

/// Evaluation summary: per-scene medians, their cross-scene average and
/// the overall scene classification accuracy.
#[derive(Debug, Clone)]
pub struct PoseErrorSummary {
    pub median_position_m: f64,
    pub median_orientation_deg: f64,
    pub per_scene: BTreeMap<usize, SceneSummary>,
    pub scene_accuracy: f64,
}

/// Lower median: for even counts the smaller of the two central order
/// statistics, chosen for reproducibility.
fn lower_median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("NaN in error list"));
    values[(values.len() - 1) / 2]
}

pub fn summarize(errors: &[SampleError]) -> Result<PoseErrorSummary, PoseError> {
    if errors.is_empty() {
        return Err(PoseError::EmptySummary);
    }
    let mut by_scene: BTreeMap<usize, Vec<&SampleError>> = BTreeMap::new();
    for e in errors {
        by_scene.entry(e.scene_id).or_default().push(e);
    }
    let mut per_scene = BTreeMap::new();
    for (&scene, samples) in &by_scene {
        let mut pos: Vec<f64> = samples.iter().map(|e| e.position_m).collect();
        let mut ang: Vec<f64> = samples.iter().map(|e| e.orientation_deg).collect();
        let correct = samples.iter().filter(|e| e.scene_correct).count();
        per_scene.insert(
            scene,
            SceneSummary {
                median_position_m: lower_median(&mut pos),
                median_orientation_deg: lower_median(&mut ang),
                samples: samples.len(),
                accuracy: correct as f64 / samples.len() as f64,
            },
        );
    }
    let n_scenes = per_scene.len() as f64;
    let median_position_m =
        per_scene.values().map(|s| s.median_position_m).sum::<f64>() / n_scenes;
    let median_orientation_deg =
        per_scene.values().map(|s| s.median_orientation_deg).sum::<f64>() / n_scenes;
    let scene_accuracy =
        errors.iter().filter(|e| e.scene_correct).count() as f64 / errors.len() as f64;
    Ok(PoseErrorSummary { median_position_m, median_orientation_deg, per_scene, scene_accuracy })
}
