use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{partition_regions, Instance, Scene, SceneError};

/// Blobs are Gaussians truncated at this many standard deviations per axis.
const TRUNCATION: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Inclusive range of instances per scene.
    pub instances: (usize, usize),
    /// Inclusive range of points per instance.
    pub points_per_instance: (usize, usize),
    pub background_points: usize,
    pub room_extent: [f64; 3],
    /// Per-axis standard deviation range of instance blobs.
    pub blob_sigma: (f64, f64),
    /// Accepted range of `N_u / N`; only enforced when a scene has more
    /// than one instance.
    pub overlap_fraction: (f64, f64),
    /// Probability that a new instance is placed next to an existing one.
    pub cluster_probability: f64,
    pub num_classes: usize,
    /// Weight of the class color in each point's RGB, in `[0, 1]`.
    pub color_signal: f64,
    /// Standard deviation of per-point color noise.
    pub color_noise: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            instances: (3, 8),
            points_per_instance: (200, 340),
            background_points: 300,
            room_extent: [6.0, 6.0, 2.5],
            blob_sigma: (0.12, 0.35),
            overlap_fraction: (0.10, 0.30),
            cluster_probability: 0.7,
            num_classes: 6,
            color_signal: 0.8,
            color_noise: 0.06,
            max_attempts: 400,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        if self.instances.0 == 0 || self.instances.0 > self.instances.1 {
            return bad(format!("instance range {:?}", self.instances));
        }
        if self.points_per_instance.0 < 2 || self.points_per_instance.0 > self.points_per_instance.1 {
            return bad(format!("points per instance {:?}", self.points_per_instance));
        }
        if !(self.blob_sigma.0 > 0.0 && self.blob_sigma.0 <= self.blob_sigma.1) {
            return bad(format!("blob sigma {:?}", self.blob_sigma));
        }
        let (lo, hi) = self.overlap_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("overlap fraction {:?} must lie in (0, 1)", self.overlap_fraction));
        }
        if self.room_extent.iter().any(|&e| !(e > 0.0)) {
            return bad(format!("room extent {:?}", self.room_extent));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.color_signal) || self.color_noise < 0.0 {
            return bad("color signal/noise out of range".into());
        }
        if !(0.0..=1.0).contains(&self.cluster_probability) {
            return bad("cluster probability out of range".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }
}

/// Evenly spaced hues, one per class.
fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let h = class as f64 / num_classes as f64 * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Blob {
    mean: [f64; 3],
    sigma: [f64; 3],
    class_id: usize,
    count: usize,
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION {
            return z;
        }
    }
}

fn place_blobs(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let k = rng.gen_range(config.instances.0..=config.instances.1);
    let mut blobs: Vec<Blob> = Vec::with_capacity(k);
    let room = config.room_extent;
    for _ in 0..k {
        let sigma: [f64; 3] = std::array::from_fn(|_| rng.gen_range(config.blob_sigma.0..=config.blob_sigma.1));
        let half: [f64; 3] = std::array::from_fn(|a| (TRUNCATION * sigma[a]).min(room[a] / 2.0));
        let anchor = (!blobs.is_empty() && rng.gen_bool(config.cluster_probability))
            .then(|| rng.gen_range(0..blobs.len()));
        let mean: [f64; 3] = match anchor {
            Some(j) => {
                let other = &blobs[j];
                // Offset each axis by a fraction of the combined half-extent;
                // fractions below one make the boxes intersect on that axis.
                std::array::from_fn(|a| {
                    let reach = TRUNCATION * (sigma[a] + other.sigma[a]);
                    let frac = rng.gen_range(0.35..1.05);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (other.mean[a] + sign * frac * reach).clamp(half[a], room[a] - half[a])
                })
            }
            None => std::array::from_fn(|a| rng.gen_range(half[a]..=room[a] - half[a])),
        };
        let count = rng.gen_range(config.points_per_instance.0..=config.points_per_instance.1);
        let class_id = rng.gen_range(0..config.num_classes);
        blobs.push(Blob {
            mean,
            sigma,
            class_id,
            count,
        });
    }
    blobs
}

fn color(config: &SceneConfig, class_id: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = class_color(class_id, config.num_classes);
    let noise = Normal::new(0.0, config.color_noise).expect("validated noise");
    std::array::from_fn(|c| {
        let v = config.color_signal * base[c] + (1.0 - config.color_signal) * 0.5 + noise.sample(rng);
        v.clamp(0.0, 1.0)
    })
}

fn build_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let blobs = place_blobs(config, rng);
    let room = config.room_extent;
    let mut points = Vec::new();
    let mut gt_instance = Vec::new();
    let mut instances = Vec::with_capacity(blobs.len());
    for (k, blob) in blobs.iter().enumerate() {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for _ in 0..blob.count {
            let xyz: [f64; 3] = std::array::from_fn(|a| {
                (blob.mean[a] + blob.sigma[a] * truncated_normal(rng)).clamp(0.0, room[a])
            });
            for a in 0..3 {
                lo[a] = lo[a].min(xyz[a]);
                hi[a] = hi[a].max(xyz[a]);
            }
            let rgb = color(config, blob.class_id, rng);
            points.push([xyz[0], xyz[1], xyz[2], rgb[0], rgb[1], rgb[2]]);
            gt_instance.push(Some(k));
        }
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return None;
        }
        instances.push(Instance {
            box_min: lo,
            box_max: hi,
            class_id: blob.class_id,
        });
    }
    // Background fills the room outside every box.
    let budget = config.background_points * 200 + 1000;
    let mut placed = 0;
    for _ in 0..budget {
        if placed == config.background_points {
            break;
        }
        let xyz: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..=room[a]));
        if instances.iter().any(|inst| inst.contains(&xyz)) {
            continue;
        }
        let gray = rng.gen_range(0.2..0.8);
        points.push([xyz[0], xyz[1], xyz[2], gray, gray, gray]);
        gt_instance.push(None);
        placed += 1;
    }
    (placed == config.background_points).then_some(Scene {
        points,
        gt_instance,
        instances,
    })
}

/// Generates one scene. Deterministic in `(config, seed)`; `config.seed` is
/// ignored in favor of the explicit seed.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.overlap_fraction;
    let mut closest = f64::NAN;
    for _ in 0..config.max_attempts {
        let Some(scene) = build_scene(config, &mut rng) else {
            continue;
        };
        if scene.num_instances() == 1 {
            return Ok(scene);
        }
        let partition = partition_regions(&scene);
        let frac = partition.num_overlap() as f64 / scene.num_points() as f64;
        if (lo..=hi).contains(&frac) {
            return Ok(scene);
        }
        let target = (lo + hi) / 2.0;
        if closest.is_nan() || (frac - target).abs() < (closest - target).abs() {
            closest = frac;
        }
    }
    Err(SceneError::OverlapUnreachable {
        lo,
        hi,
        attempts: config.max_attempts,
        achieved: closest,
    })
}
