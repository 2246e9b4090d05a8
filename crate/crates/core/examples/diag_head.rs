use mlda_core::autodiff::Tape;
use mlda_core::data::{Dataset, Split};
use mlda_core::detector::{BoxF, iou};
use mlda_core::eval::load_detector;
use mlda_core::nn::softmax;

fn main() {
    // expects the dataset and run dir left behind by diag_detect
    let dir = std::env::temp_dir().join("mlda_diag");
    let dataset = Dataset::open(&dir.join("data")).unwrap();
    let (store, detector) = load_detector(&dir.join("run/checkpoint.mlda")).unwrap();

    // classification accuracy on exactly-framed gt boxes
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut bg_called = 0usize;
    for i in 0..100 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let pyr = detector.backbone.forward(&mut tape, &params, &scene.image.to_tensor()).unwrap();
        for ann in &scene.annotations {
            let rect = BoxF::from_annotation(ann);
            let pooled = tape.roi_pool(pyr.final_level(), rect.as_roi(), 16, 4).unwrap();
            let out = detector.head.forward(&mut tape, &params, &pooled).unwrap();
            let probs = softmax(&mut tape, &out.class_logits).unwrap();
            let pred = probs.data().iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            total += 1;
            if pred == ann.class_id { correct += 1; }
            if pred == 3 { bg_called += 1; }
        }
    }
    println!("gt-box classification: {}/{} correct, {} called background", correct, total, bg_called);

    // detection outcome analysis on source-val
    let mut matched_any = 0usize; let mut matched_correct_class = 0usize; let mut n_gt = 0usize;
    let mut fp_high = 0usize; let mut n_det = 0usize;
    for i in 0..100 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        let dets = detector.infer(&store, &scene.image.to_tensor()).unwrap();
        n_det += dets.len();
        for ann in &scene.annotations {
            n_gt += 1;
            let gt = BoxF::from_annotation(ann);
            if dets.iter().any(|d| iou(&d.rect, &gt) >= 0.5) { matched_any += 1; }
            if dets.iter().any(|d| d.class_id == ann.class_id && iou(&d.rect, &gt) >= 0.5) { matched_correct_class += 1; }
        }
        for d in &dets {
            let is_tp_able = scene.annotations.iter().any(|a| a.class_id == d.class_id && iou(&d.rect, &BoxF::from_annotation(a)) >= 0.5);
            if !is_tp_able && d.score > 0.5 { fp_high += 1; }
        }
    }
    println!("gt covered by any detection @0.5: {}/{}", matched_any, n_gt);
    println!("gt covered with CORRECT class @0.5: {}/{}", matched_correct_class, n_gt);
    println!("detections total {} (avg {:.1}/scene), high-score FPs {}", n_det, n_det as f64 / 100.0, fp_high);
}
