use mlda_core::data::{make_dataset, Dataset, GenConfig, Split};
use mlda_core::eval::evaluate_checkpoint;
use mlda_core::train::{run_training, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("mlda_smoke");
    let _ = std::fs::remove_dir_all(&dir);
    let gen = GenConfig { master_seed: 7, ..Default::default() };
    make_dataset(&gen, &dir.join("data")).unwrap();
    let dataset = Dataset::open(&dir.join("data")).unwrap();

    let mut config = TrainConfig::default();
    config.lambda = 0.0;
    config.epochs_phase1 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    config.epochs_phase2 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let summary = run_training(&config, &dataset, &dir.join("run")).unwrap();
    for (e, m) in summary.epoch_means.iter().enumerate() {
        println!("epoch {e}: L_det {:.4}", m.det);
    }
    println!("wall clock: {:.1}s", summary.wall_clock_s);
    let (src, _) = evaluate_checkpoint(&summary.checkpoint, &dataset, Split::SourceVal).unwrap();
    let (tgt, _) = evaluate_checkpoint(&summary.checkpoint, &dataset, Split::TargetVal).unwrap();
    println!("source-val mAP {:.3} per-class {:?}", src.mean_ap, src.per_class_ap);
    println!("target-val mAP {:.3}", tgt.mean_ap);
}
