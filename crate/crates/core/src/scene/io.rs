use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_scene, Instance, Scene, SceneConfig, SceneError};

pub const SCENE_FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u64,
    points: Vec<[f64; 6]>,
    gt_instance: Vec<i64>,
    instances: Vec<Instance>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> SceneError {
    SceneError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn scene_file_name(seed: u64) -> String {
    format!("scene_{seed}.json")
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<(), SceneError> {
    let path = path.as_ref();
    let file = SceneFile {
        version: SCENE_FORMAT_VERSION,
        points: scene.points.clone(),
        gt_instance: scene
            .gt_instance
            .iter()
            .map(|g| g.map_or(-1, |k| k as i64))
            .collect(),
        instances: scene.instances.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| parse_err(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    if probe.version != SCENE_FORMAT_VERSION {
        return Err(SceneError::Version {
            found: probe.version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    let gt_instance = file
        .gt_instance
        .iter()
        .enumerate()
        .map(|(j, &g)| match g {
            -1 => Ok(None),
            g if g >= 0 => Ok(Some(g as usize)),
            g => Err(SceneError::Parse {
                path: path.display().to_string(),
                message: format!("gt_instance[{j}] = {g}"),
            }),
        })
        .collect::<Result<_, _>>()?;
    let scene = Scene {
        points: file.points,
        gt_instance,
        instances: file.instances,
    };
    scene.validate()?;
    Ok(scene)
}

/// Generates and writes `scene_<seed>.json` for each seed, in parallel.
pub fn write_corpus(dir: impl AsRef<Path>, config: &SceneConfig, seeds: &[u64]) -> Result<Vec<PathBuf>, SceneError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    crate::parallel::par_map(seeds, |&seed| {
        let scene = generate_scene(config, seed)?;
        let path = dir.join(scene_file_name(seed));
        save_scene(&path, &scene)?;
        Ok(path)
    })
    .into_iter()
    .collect()
}

/// Loads every `scene_<seed>.json` in `dir`, ordered by seed.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(u64, Scene)>, SceneError> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let seed = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("scene_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(seed) = seed {
            entries.push((seed, path));
        }
    }
    entries.sort();
    if entries.is_empty() {
        return Err(SceneError::Invalid(format!("no scene files in {}", dir.display())));
    }
    entries
        .into_iter()
        .map(|(seed, path)| Ok((seed, load_scene(&path)?)))
        .collect()
}
