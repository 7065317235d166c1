#![allow(dead_code)]

pub mod grad;
pub mod oracles;

use boxseg::model::ModelConfig;
use boxseg::scene::{generate_scene, Scene, SceneConfig};

/// Scenes small enough for exhaustive finite differences.
pub fn tiny_scene_config() -> SceneConfig {
    SceneConfig {
        instances: (2, 3),
        points_per_instance: (6, 8),
        background_points: 4,
        room_extent: [2.0, 2.0, 1.0],
        blob_sigma: (0.15, 0.3),
        overlap_fraction: (0.05, 0.6),
        cluster_probability: 1.0,
        num_classes: 3,
        ..SceneConfig::default()
    }
}

pub fn tiny_scene(seed: u64) -> Scene {
    let scene = generate_scene(&tiny_scene_config(), seed).expect("tiny scene");
    assert!(scene.num_points() <= 30);
    scene
}

/// Narrow network used wherever every parameter is perturbed.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        decoder_layers: 2,
        num_queries: 4,
        attention_heads: 2,
        ffn_dim: 12,
        num_classes: 3,
        fourier_freqs: 3,
        fps_start: 0,
    }
}
