use mlda_core::data::{make_dataset, Dataset, GenConfig, Split};
use mlda_core::detector::{anchor_grid, assign_anchors, detection_loss, propose, AnchorLabel, BoxF, iou};
use mlda_core::eval::evaluate_checkpoint;
use mlda_core::train::{run_training, TrainConfig};
use mlda_core::autodiff::Tape;
use mlda_core::rng;

fn main() {
    let dir = std::env::temp_dir().join("mlda_diag");
    let _ = std::fs::remove_dir_all(&dir);
    let gen = GenConfig { master_seed: 7, ..Default::default() };
    make_dataset(&gen, &dir.join("data")).unwrap();
    let dataset = Dataset::open(&dir.join("data")).unwrap();

    let mut config = TrainConfig::default();
    config.lambda = 0.0;
    config.epochs_phase1 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    config.epochs_phase2 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    if let Some(lr) = std::env::args().nth(3) { config.lr_phase1 = lr.parse().unwrap(); config.lr_phase2 = config.lr_phase1 * 0.1; }
    let summary = run_training(&config, &dataset, &dir.join("run")).unwrap();
    println!("wall {:.0}s; final L_det {:.4}", summary.wall_clock_s, summary.epoch_means.last().unwrap().det);

    // per-term losses on a few training scenes with the final model
    let (store, detector) = mlda_core::eval::load_detector(&summary.checkpoint).unwrap();
    let mut terms = [0.0f64; 4];
    let n_probe = 20;
    for i in 0..n_probe {
        let scene = dataset.load_train_source(i).unwrap();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let pyr = detector.backbone.forward(&mut tape, &params, &scene.image.to_tensor()).unwrap();
        let rpn_out = detector.rpn.forward(&mut tape, &params, pyr.final_level()).unwrap();
        let logits: Vec<f64> = rpn_out.logits.data().iter().map(|&v| v as f64).collect();
        let deltas: Vec<f64> = rpn_out.deltas.data().iter().map(|&v| v as f64).collect();
        let proposals = propose(&logits, &deltas, &anchor_grid(), 24, 0.7, 12);
        let mut r = rng::rng(999 + i as u64);
        let loss = detection_loss(&mut tape, &params, &detector.head, &rpn_out, pyr.final_level(),
            &proposals, scene.domain, &scene.annotations, &mut r).unwrap();
        terms[0] += loss.rpn_cls.item() as f64;
        terms[1] += loss.rpn_reg.item() as f64;
        terms[2] += loss.rcnn_cls.item() as f64;
        terms[3] += loss.rcnn_reg.item() as f64;
    }
    println!("mean terms over {n_probe} scenes: rpn_cls {:.3} rpn_reg {:.3} rcnn_cls {:.3} rcnn_reg {:.3}",
        terms[0]/n_probe as f64, terms[1]/n_probe as f64, terms[2]/n_probe as f64, terms[3]/n_probe as f64);

    // proposal recall on val
    let mut covered = 0usize; let mut total = 0usize;
    for i in 0..50 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let pyr = detector.backbone.forward(&mut tape, &params, &scene.image.to_tensor()).unwrap();
        let rpn_out = detector.rpn.forward(&mut tape, &params, pyr.final_level()).unwrap();
        let logits: Vec<f64> = rpn_out.logits.data().iter().map(|&v| v as f64).collect();
        let deltas: Vec<f64> = rpn_out.deltas.data().iter().map(|&v| v as f64).collect();
        let proposals = propose(&logits, &deltas, &anchor_grid(), 24, 0.7, 12);
        for ann in &scene.annotations {
            total += 1;
            let gt = BoxF::from_annotation(ann);
            if proposals.iter().any(|p| iou(&p.rect, &gt) >= 0.5) { covered += 1; }
        }
    }
    println!("proposal recall@0.5 on source-val: {}/{} = {:.2}", covered, total, covered as f64 / total as f64);

    // anchor coverage: how many gts have a >=0.5 anchor at all
    let mut pos_cov = 0usize; let mut total2 = 0usize;
    for i in 0..50 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        let labels = assign_anchors(&anchor_grid(), &scene.annotations);
        let anchors = anchor_grid();
        for (gi, ann) in scene.annotations.iter().enumerate() {
            total2 += 1;
            let gt = BoxF::from_annotation(ann);
            let any = anchors.iter().enumerate().any(|(ai, a)| iou(&a.to_box(), &gt) >= 0.5 && matches!(labels[ai], AnchorLabel::Positive(g) if g == gi));
            if any { pos_cov += 1; }
        }
    }
    println!("gts with an IoU>=0.5 positive anchor: {}/{}", pos_cov, total2);

    let (src, _) = evaluate_checkpoint(&summary.checkpoint, &dataset, Split::SourceVal).unwrap();
    println!("source-val mAP {:.3} per-class {:?}", src.mean_ap, src.per_class_ap);

    // dump a couple of scenes: gt vs detections
    for i in 0..3 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        println!("scene {i} gt:");
        for a in &scene.annotations { println!("   class {} at ({:.0},{:.0},{:.0},{:.0})", a.class_id, a.x1, a.y1, a.x2, a.y2); }
        let dets = detector.infer(&store, &scene.image.to_tensor()).unwrap();
        println!("  detections (top 6):");
        for d in dets.iter().take(6) { println!("   class {} score {:.2} at ({:.0},{:.0},{:.0},{:.0})", d.class_id, d.score, d.rect.x1, d.rect.y1, d.rect.x2, d.rect.y2); }
    }
}
// appended diagnostics run as part of main via include trick is awkward; edit instead
