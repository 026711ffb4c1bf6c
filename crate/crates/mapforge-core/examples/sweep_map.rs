//! Meta step-size / length calibration sweep (developer aid).

use std::time::Instant;

use mapforge_core::attacks::{map_train, MapConfig, DEFAULT_EPSILON};
use mapforge_core::data::{load_dataset, sample_balanced_subset, DataFormat, Split};
use mapforge_core::eval::{accuracy_under_attack, AttackProcedure};
use mapforge_core::models::{build_model, train, Arch, ModelSpec, TrainConfig};

fn main() {
    let root = std::path::PathBuf::from("/tmp/mapforge-bench-data");
    let train_set = load_dataset(&root, DataFormat::Idx, Split::Train).unwrap();
    let test_set = load_dataset(&root, DataFormat::Idx, Split::Test).unwrap();

    let spec = ModelSpec::new(Arch::CnnSmall, &[28, 28, 1], 10).unwrap();
    let mut model = build_model(spec, 0).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        epochs: 1,
        batch: 64,
        seed: 0,
        limit: 0,
    };
    train(&mut model, &train_set, &test_set, &cfg).unwrap();

    let eps = DEFAULT_EPSILON;
    let fgsm =
        accuracy_under_attack(&model, &test_set, &AttackProcedure::Fgsm { step: eps }).unwrap();
    println!("fgsm baseline {:.4}", fgsm);

    let d = sample_balanced_subset(&train_set, 100, 17).unwrap();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let alphas: Vec<f32> = if args.is_empty() {
        vec![DEFAULT_EPSILON, 0.3, 1.0, 3.0, 10.0]
    } else {
        args.iter().map(|s| s.parse().unwrap()).collect()
    };
    for &alpha in &alphas {
        for beta in [0.2f32, 1.0] {
            let map_cfg = MapConfig {
                alpha,
                beta,
                meta_iterations: 50,
                ..MapConfig::default()
            };
            let t = Instant::now();
            let map = map_train(&model, &d, &map_cfg, eps).unwrap();
            let acc = accuracy_under_attack(
                &model,
                &test_set,
                &AttackProcedure::Map {
                    perturbation: &map,
                    alpha: eps,
                },
            )
            .unwrap();
            let mean_abs: f32 =
                map.v.data().iter().map(|v| v.abs()).sum::<f32>() / map.v.numel() as f32;
            println!(
                "alpha {:6.3} beta {:4.1}: map accuracy {:.4} (gap {:+.1} pts) mean|v| {:.4} trained in {:.1?}",
                alpha,
                beta,
                acc,
                (fgsm - acc) * 100.0,
                mean_abs,
                t.elapsed()
            );
        }
    }
}
