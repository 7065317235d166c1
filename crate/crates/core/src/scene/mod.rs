//! Synthetic labeled point-cloud scenes and their box-derived label regions.

mod generate;
mod io;
mod partition;

pub use generate::{generate_scene, SceneConfig};
pub use io::{load_corpus, load_scene, save_scene, scene_file_name, write_corpus, SCENE_FORMAT_VERSION};
pub use partition::{macc_oracle, partition_regions, RegionLabel, RegionPartition};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported scene format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("overlap target [{lo}, {hi}] unreachable after {attempts} attempts; closest achieved fraction {achieved:.4}")]
    OverlapUnreachable {
        lo: f64,
        hi: f64,
        attempts: usize,
        achieved: f64,
    },
    #[error("overlap point {point} belongs to instance {instance}, which is not among its candidates {candidates:?}")]
    OracleMismatch {
        point: usize,
        instance: usize,
        candidates: Vec<usize>,
    },
}

/// Axis-aligned box around one ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub class_id: usize,
}

impl Instance {
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.box_min[a] + self.box_max[a]) / 2.0)
    }

    /// Inclusive containment: tight boxes put extreme points on the boundary.
    pub fn contains(&self, p: &[f64]) -> bool {
        (0..3).all(|a| p[a] >= self.box_min[a] && p[a] <= self.box_max[a])
    }
}

/// One point cloud with per-point instance labels. Each point row is
/// `x, y, z, r, g, b` with colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 6]>,
    /// `None` marks background.
    pub gt_instance: Vec<Option<usize>>,
    pub instances: Vec<Instance>,
}

/// Affine map of scene coordinates onto the unit cube:
/// `(p - min) / max_extent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub min: [f64; 3],
    pub extent: f64,
}

impl Normalization {
    pub fn apply(&self, p: &[f64]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.min[a]) / self.extent)
    }
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.instances.iter().map(Instance::center).collect()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.class_id).collect()
    }

    pub fn normalization(&self) -> Normalization {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        Normalization {
            min,
            extent: if extent > 0.0 { extent } else { 1.0 },
        }
    }

    pub fn normalized_coords(&self) -> Vec<[f64; 3]> {
        let norm = self.normalization();
        self.points.iter().map(|p| norm.apply(p)).collect()
    }

    /// Ground-truth point mask of every instance.
    pub fn gt_masks(&self) -> Vec<Vec<bool>> {
        let mut masks = vec![vec![false; self.num_points()]; self.num_instances()];
        for (j, gt) in self.gt_instance.iter().enumerate() {
            if let Some(k) = *gt {
                masks[k][j] = true;
            }
        }
        masks
    }

    /// Checks the structural invariants every scene must satisfy.
    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.num_points();
        if n == 0 {
            return Err(SceneError::Invalid("scene has no points".into()));
        }
        if self.instances.is_empty() {
            return Err(SceneError::Invalid("scene has no instances".into()));
        }
        if self.gt_instance.len() != n {
            return Err(SceneError::Invalid(format!(
                "{} labels for {} points",
                self.gt_instance.len(),
                n
            )));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SceneError::Invalid("non-finite point value".into()));
        }
        let mut owned = vec![0usize; self.num_instances()];
        for (j, gt) in self.gt_instance.iter().enumerate() {
            if let Some(k) = *gt {
                if k >= owned.len() {
                    return Err(SceneError::Invalid(format!(
                        "point {j} references instance {k} of {}",
                        owned.len()
                    )));
                }
                owned[k] += 1;
            }
        }
        for (k, inst) in self.instances.iter().enumerate() {
            if owned[k] == 0 {
                return Err(SceneError::Invalid(format!("instance {k} owns no points")));
            }
            if (0..3).any(|a| inst.box_min[a] >= inst.box_max[a]) {
                return Err(SceneError::Invalid(format!("instance {k} has a degenerate box")));
            }
        }
        Ok(())
    }
}
