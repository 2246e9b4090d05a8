//! Detection metrics: IoU, per-class average precision, mAP@0.5, and
//! feature export for offline embedding plots.

mod features;

pub use features::{dump_features, FeatureKind};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, Split, NUM_CLASSES};
use crate::detector::{iou as box_iou, BoxF, Detection, Detector};
use crate::error::{Error, Result};
use crate::optim::ParamStore;

pub const MAP_IOU_THRESHOLD: f64 = 0.5;

/// IoU with the degenerate-box precondition enforced.
pub fn iou(a: &BoxF, b: &BoxF) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::invalid(format!("iou: degenerate box {a:?} or {b:?}")));
    }
    Ok(box_iou(a, b))
}

/// Per-class AP and their unweighted mean over classes that have at least
/// one ground-truth instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct APResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub gt_counts: BTreeMap<usize, usize>,
    pub detection_counts: BTreeMap<usize, usize>,
}

/// One scored detection inside some item (scene) of an evaluation set.
#[derive(Clone, Copy, Debug)]
pub struct ScoredBox {
    pub item: usize,
    pub score: f64,
    pub rect: BoxF,
}

/// Ground-truth box inside an item.
#[derive(Clone, Copy, Debug)]
pub struct GtBox {
    pub item: usize,
    pub rect: BoxF,
}

/// All-point-interpolated average precision with greedy matching: detections
/// are visited in descending score order (ties by insertion index); each
/// matches the highest-IoU unmatched ground truth of its item at IoU >=
/// `iou_threshold`.
pub fn average_precision(detections: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(detections.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.item != det.item || matched[gi] {
                continue;
            }
            let v = box_iou(&det.rect, &gt.rect);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // precision-recall points, then area under the precision envelope
    let n_gt = gts.len() as f64;
    let mut cum_tp = 0usize;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (i, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precision.push(cum_tp as f64 / (i + 1) as f64);
        recall.push(cum_tp as f64 / n_gt);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precision.len() {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    ap
}

/// Run inference on every scene of a split and aggregate mAP@0.5.
pub fn evaluate(
    store: &ParamStore<f32>,
    detector: &Detector,
    dataset: &Dataset,
    split: Split,
) -> Result<APResult> {
    Ok(evaluate_with_detections(store, detector, dataset, split)?.0)
}

/// As [`evaluate`], additionally returning per-scene detections (scene_id,
/// detections) for export.
pub fn evaluate_with_detections(
    store: &ParamStore<f32>,
    detector: &Detector,
    dataset: &Dataset,
    split: Split,
) -> Result<(APResult, Vec<(u64, Vec<Detection>)>)> {
    let n = dataset.len(split);
    if n == 0 {
        return Err(Error::Dataset(format!("split {} is empty", split.name())));
    }
    let scenes: Result<Vec<_>> = (0..n).map(|i| dataset.load_eval(split, i)).collect();
    let scenes = scenes?;
    let per_scene: Result<Vec<Vec<Detection>>> = scenes
        .par_iter()
        .map(|scene| detector.infer(store, &scene.image.to_tensor()))
        .collect();
    let per_scene = per_scene?;

    let mut result = score_detections(
        scenes
            .iter()
            .map(|s| s.annotations.as_slice())
            .collect::<Vec<_>>()
            .as_slice(),
        &per_scene,
    );
    let with_ids = scenes
        .iter()
        .map(|s| s.scene_id)
        .zip(per_scene)
        .collect::<Vec<_>>();
    // clamp away -0.0 noise for clean JSON
    result.mean_ap = result.mean_ap.max(0.0);
    Ok((result, with_ids))
}

/// mAP over already-computed detections, exposed so tests can cross-check
/// `evaluate` against a manual composition of infer + average_precision.
pub fn score_detections(
    gts_per_item: &[&[crate::data::BoxAnnotation]],
    dets_per_item: &[Vec<Detection>],
) -> APResult {
    let mut per_class_ap = BTreeMap::new();
    let mut gt_counts = BTreeMap::new();
    let mut detection_counts = BTreeMap::new();
    let mut sum = 0.0;
    let mut classes_with_gt = 0usize;
    for class_id in 0..NUM_CLASSES {
        let gts: Vec<GtBox> = gts_per_item
            .iter()
            .enumerate()
            .flat_map(|(item, anns)| {
                anns.iter()
                    .filter(|a| a.class_id == class_id)
                    .map(move |a| GtBox {
                        item,
                        rect: BoxF::from_annotation(a),
                    })
            })
            .collect();
        let dets: Vec<ScoredBox> = dets_per_item
            .iter()
            .enumerate()
            .flat_map(|(item, dets)| {
                dets.iter()
                    .filter(|d| d.class_id == class_id)
                    .map(move |d| ScoredBox {
                        item,
                        score: d.score,
                        rect: d.rect,
                    })
            })
            .collect();
        gt_counts.insert(class_id, gts.len());
        detection_counts.insert(class_id, dets.len());
        if gts.is_empty() {
            continue; // classes without ground truth are excluded from the mean
        }
        let ap = average_precision(&dets, &gts, MAP_IOU_THRESHOLD);
        per_class_ap.insert(class_id, ap);
        sum += ap;
        classes_with_gt += 1;
    }
    let mean_ap = if classes_with_gt == 0 {
        0.0
    } else {
        sum / classes_with_gt as f64
    };
    APResult {
        per_class_ap,
        mean_ap,
        gt_counts,
        detection_counts,
    }
}

/// Evaluate a checkpoint file on a split. The checkpoint must cover every
/// detection parameter; extra (adaptation) parameters are carried along but
/// never read by inference.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    dataset: &Dataset,
    split: Split,
) -> Result<(APResult, Vec<(u64, Vec<Detection>)>)> {
    let (store, detector) = load_detector(checkpoint_path)?;
    evaluate_with_detections(&store, &detector, dataset, split)
}

/// Build a detector-only model and fill it from a checkpoint.
pub fn load_detector(checkpoint_path: &Path) -> Result<(ParamStore<f32>, Detector)> {
    let mut store = ParamStore::<f32>::new();
    let detector = Detector::register(&mut store, 0);
    checkpoint::load_into_store_requiring_all(&mut store, checkpoint_path)?;
    Ok((store, detector))
}
