use mlda_core::autodiff::Tape;
use mlda_core::data::{Dataset, Split};
use mlda_core::detector::{decode_delta, BoxF, iou};
use mlda_core::eval::load_detector;
use rand::Rng;
use mlda_core::rng;

fn main() {
    let dir = std::env::temp_dir().join("mlda_diag");
    let dataset = Dataset::open(&dir.join("data")).unwrap();
    let (store, detector) = load_detector(&dir.join("run/checkpoint.mlda")).unwrap();
    let mut r = rng::rng(4242);
    let scale = [0.1, 0.1, 0.2, 0.2];
    let mut per_class = [[0.0f64; 3]; 3]; // class -> (before, after, n)
    for i in 0..100 {
        let scene = dataset.load_eval(Split::SourceVal, i).unwrap();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let pyr = detector.backbone.forward(&mut tape, &params, &scene.image.to_tensor()).unwrap();
        for ann in &scene.annotations {
            let gt = BoxF::from_annotation(ann);
            for _ in 0..3 {
                let (w, h) = (gt.width(), gt.height());
                let jit = BoxF::new(
                    gt.x1 + r.gen_range(-0.22..0.22) * w,
                    gt.y1 + r.gen_range(-0.22..0.22) * h,
                    gt.x2 + r.gen_range(-0.22..0.22) * w,
                    gt.y2 + r.gen_range(-0.22..0.22) * h,
                ).clip(64.0, 64.0);
                if jit.is_degenerate() { continue; }
                let pooled = tape.roi_pool(pyr.final_level(), jit.as_roi(), 16, 4).unwrap();
                let out = detector.head.forward(&mut tape, &params, &pooled).unwrap();
                let dv: Vec<f64> = out.deltas.data().iter().map(|&v| v as f64).collect();
                let c = ann.class_id;
                let reg = decode_delta([dv[4*c]*scale[0], dv[4*c+1]*scale[1], dv[4*c+2]*scale[2], dv[4*c+3]*scale[3]], &jit).clip(64.0, 64.0);
                per_class[c][0] += iou(&jit, &gt);
                per_class[c][1] += iou(&reg, &gt);
                per_class[c][2] += 1.0;
            }
        }
    }
    for c in 0..3 {
        println!("class {c}: jittered-gt IoU before {:.3} after {:.3} (n={})", per_class[c][0]/per_class[c][2], per_class[c][1]/per_class[c][2], per_class[c][2]);
    }
}
