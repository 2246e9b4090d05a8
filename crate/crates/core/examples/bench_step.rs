use mlda_core::data::{generate_scene, Domain, Scene, UnlabeledScene};
use mlda_core::train::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let mut config = TrainConfig::default();
    config.lambda = 0.1;
    let mut trainer = Trainer::new(config).unwrap();
    let sources: Vec<Scene> = (0..8).map(|i| generate_scene(i, Domain::Source, 3).unwrap()).collect();
    let targets: Vec<UnlabeledScene> = (100..108).map(|i| generate_scene(i, Domain::Target, 3).unwrap().strip_annotations()).collect();
    // warmup
    for i in 0..4 {
        trainer.train_step(&sources[i % 8], Some(&targets[i % 8]), 0, i).unwrap();
    }
    let n = 40;
    let t0 = Instant::now();
    for i in 0..n {
        trainer.train_step(&sources[i % 8], Some(&targets[i % 8]), 0, i + 4).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("lambda=0.1: {:.1} ms/iter -> full run (4000 iters) ~{:.1} min", dt / n as f64 * 1e3, dt / n as f64 * 4000.0 / 60.0);

    let mut config0 = TrainConfig::default();
    config0.lambda = 0.0;
    let mut trainer0 = Trainer::new(config0).unwrap();
    for i in 0..4 { trainer0.train_step(&sources[i % 8], None, 0, i).unwrap(); }
    let t0 = Instant::now();
    for i in 0..n {
        trainer0.train_step(&sources[i % 8], None, 0, i + 4).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("lambda=0:   {:.1} ms/iter -> full run ~{:.1} min", dt / n as f64 * 1e3, dt / n as f64 * 4000.0 / 60.0);
}
