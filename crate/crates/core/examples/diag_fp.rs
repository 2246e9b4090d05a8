use mlda_core::autodiff::Tape;
use mlda_core::data::{Dataset, Split};
use mlda_core::detector::{anchor_grid, propose, decode_delta, BoxF, iou};
use mlda_core::eval::load_detector;
use mlda_core::nn::softmax;

fn main() {
    let dir = std::env::temp_dir().join("mlda_diag");
    let dataset = Dataset::open(&dir.join("data")).unwrap();
    let (store, detector) = load_detector(&dir.join("run/checkpoint.mlda")).unwrap();

    let mut before = 0.0; let mut after = 0.0; let mut n = 0usize;
    let mut fp_near_dup = 0usize; let mut fp_wrong_class = 0usize; let mut fp_background = 0usize;
    for i in 0..100 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        let gts: Vec<(usize, BoxF)> = scene.annotations.iter().map(|a| (a.class_id, BoxF::from_annotation(a))).collect();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let pyr = detector.backbone.forward(&mut tape, &params, &scene.image.to_tensor()).unwrap();
        let rpn_out = detector.rpn.forward(&mut tape, &params, pyr.final_level()).unwrap();
        let logits: Vec<f64> = rpn_out.logits.data().iter().map(|&v| v as f64).collect();
        let deltas: Vec<f64> = rpn_out.deltas.data().iter().map(|&v| v as f64).collect();
        let proposals = propose(&logits, &deltas, &anchor_grid(), 24, 0.7, 12);
        for p in &proposals {
            // best gt
            let best = gts.iter().map(|(c, g)| (iou(&p.rect, g), *c, *g)).fold((0.0, 0usize, BoxF::new(0.,0.,1.,1.)), |acc, x| if x.0 > acc.0 { x } else { acc });
            if best.0 < 0.3 { continue; }
            let pooled = tape.roi_pool(pyr.final_level(), p.rect.as_roi(), 16, 4).unwrap();
            let out = detector.head.forward(&mut tape, &params, &pooled).unwrap();
            let dv: Vec<f64> = out.deltas.data().iter().map(|&v| v as f64).collect();
            let c = best.1;
            let reg = decode_delta([dv[4*c]*0.1, dv[4*c+1]*0.1, dv[4*c+2]*0.2, dv[4*c+3]*0.2], &p.rect).clip(64.0, 64.0);
            before += best.0; after += iou(&reg, &best.2); n += 1;
        }
        // classify the high-score FPs
        let dets = detector.infer(&store, &scene.image.to_tensor()).unwrap();
        for d in dets.iter().filter(|d| d.score > 0.5) {
            let tp = gts.iter().any(|(c, g)| *c == d.class_id && iou(&d.rect, g) >= 0.5);
            if tp { continue; }
            let best_iou = gts.iter().map(|(_, g)| iou(&d.rect, g)).fold(0.0, f64::max);
            let best_same_class = gts.iter().filter(|(c, _)| *c == d.class_id).map(|(_, g)| iou(&d.rect, g)).fold(0.0, f64::max);
            if best_same_class >= 0.25 { fp_near_dup += 1; }
            else if best_iou >= 0.25 { fp_wrong_class += 1; }
            else { fp_background += 1; }
        }
    }
    println!("regression effect on proposals IoU>=0.3: before {:.3} after {:.3} (n={})", before / n as f64, after / n as f64, n);
    println!("high-score FP composition: near-dup(same class, IoU>=.25) {}, wrong-class {}, background {}", fp_near_dup, fp_wrong_class, fp_background);
}
