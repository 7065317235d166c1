//! Trains the default model and its two ablations on a generated corpus,
//! then scores each on a held-out set.
//!
//! cargo run --release -p boxseg --example desk_run -- [steps] [train_scenes]

use std::time::Instant;

use boxseg::eval::{evaluate, EvalScene};
use boxseg::model::ModelConfig;
use boxseg::scene::{generate_scene, SceneConfig};
use boxseg::training::{train, PreparedScene, TrainConfig};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(500);
    let n_train = args.get(1).copied().unwrap_or(50) as u64;
    let scene_config = SceneConfig::default();
    let model = ModelConfig::desk();
    let corpus: Vec<PreparedScene<f32>> = (0..n_train)
        .map(|s| PreparedScene::new(s, generate_scene(&scene_config, s).unwrap()))
        .collect();
    let held: Vec<EvalScene<f32>> = (1000..1010)
        .map(|s| EvalScene::new(generate_scene(&scene_config, s).unwrap()).unwrap())
        .collect();

    let base = TrainConfig { steps, ..TrainConfig::default() };
    let mut no_consistency = base.clone();
    no_consistency.weights.q = 0.0;
    no_consistency.weights.f = 0.0;
    let variants = [
        ("default", base.clone()),
        ("no-center-refine", TrainConfig { center_refine: false, ..base.clone() }),
        ("no-consistency", no_consistency),
    ];
    for (name, config) in variants {
        let start = Instant::now();
        let run = train(&model, &config, &corpus, |r| {
            if r.step % 50 == 0 {
                eprintln!("{name} step {} total {:.4}", r.step, r.total);
            }
        })
        .unwrap();
        let secs = start.elapsed().as_secs_f64();
        let report = evaluate(&run.state.student, &run.state.teacher, &model, &held, &config.weights, config.center_refine)
            .unwrap();
        println!(
            "{name}: {secs:.1}s | AP {:.3} AP50 {:.3} AP25 {:.3} | teacher mACC {:?} nearest-center {:?}",
            report.ap, report.ap50, report.ap25, report.macc, report.baseline_macc
        );
    }
}
