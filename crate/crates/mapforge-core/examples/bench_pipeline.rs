//! End-to-end timing and attack-strength calibration (developer aid).
//!
//! Usage: cargo run -p mapforge-core --example bench_pipeline [epochs] [arch]

use std::time::Instant;

use mapforge_core::attacks::{
    map_train, uap_train, AttackBudget, MapConfig, DEFAULT_EPSILON,
};
use mapforge_core::data::{load_dataset, sample_balanced_subset, synth, DataFormat, Split};
use mapforge_core::eval::{accuracy_under_attack, AttackProcedure};
use mapforge_core::models::{build_model, train, Arch, ModelSpec, TrainConfig};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let arch = std::env::args()
        .nth(2)
        .map(|s| Arch::parse(&s).unwrap())
        .unwrap_or(Arch::CnnSmall);

    let root = std::path::PathBuf::from("/tmp/mapforge-bench-data");
    let t = Instant::now();
    let generated = synth::ensure_corpus(&root, 60000, 10000, 7).unwrap();
    println!("corpus ready (generated={generated}) in {:.1?}", t.elapsed());

    let t = Instant::now();
    let train_set = load_dataset(&root, DataFormat::Idx, Split::Train).unwrap();
    let test_set = load_dataset(&root, DataFormat::Idx, Split::Test).unwrap();
    println!("loaded {} train / {} test in {:.1?}", train_set.len(), test_set.len(), t.elapsed());

    let spec = ModelSpec::new(arch, &[28, 28, 1], 10).unwrap();
    let mut model = build_model(spec, 0).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        epochs,
        batch: 64,
        seed: 0,
        limit: 0,
    };
    let t = Instant::now();
    let history = train(&mut model, &train_set, &test_set, &cfg).unwrap();
    println!(
        "{} trained {} epochs in {:.1?}; accuracy history {:?}",
        arch.id(),
        epochs,
        t.elapsed(),
        history
    );

    let eps = DEFAULT_EPSILON;
    let t = Instant::now();
    let clean = accuracy_under_attack(&model, &test_set, &AttackProcedure::Clean).unwrap();
    println!("clean accuracy {:.4} in {:.1?}", clean, t.elapsed());

    let t = Instant::now();
    let fgsm = accuracy_under_attack(&model, &test_set, &AttackProcedure::Fgsm { step: eps }).unwrap();
    println!("fgsm accuracy {:.4} in {:.1?}", fgsm, t.elapsed());

    let d = sample_balanced_subset(&train_set, 100, 17).unwrap();

    let t = Instant::now();
    let map_cfg = MapConfig::default();
    let map = map_train(&model, &d, &map_cfg, eps).unwrap();
    println!("map trained in {:.1?}", t.elapsed());

    let t = Instant::now();
    let map_acc = accuracy_under_attack(
        &model,
        &test_set,
        &AttackProcedure::Map {
            perturbation: &map,
            alpha: eps,
        },
    )
    .unwrap();
    println!("map accuracy {:.4} in {:.1?}", map_acc, t.elapsed());

    let t = Instant::now();
    let budget = AttackBudget {
        epsilon: eps,
        step: eps / 4.0,
        iterations: 1,
    };
    let uap = uap_train(&model, &d, &budget, 20, 17).unwrap();
    let uap_acc = accuracy_under_attack(&model, &test_set, &AttackProcedure::Uap { perturbation: &uap }).unwrap();
    println!("uap trained+evaluated: accuracy {:.4} in {:.1?}", uap_acc, t.elapsed());

    println!("\nsummary {}: clean {:.4} fgsm {:.4} map {:.4} uap {:.4} (map-fgsm gap {:+.1} pts)",
        arch.id(), clean, fgsm, map_acc, uap_acc, (fgsm - map_acc) * 100.0);
}
