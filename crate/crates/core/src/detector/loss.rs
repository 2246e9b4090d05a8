//! Supervised detection loss: RPN classification/regression plus R-CNN
//! classification/regression over sampled ROIs.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::anchors::{anchor_grid, assign_anchors, delta_flat_index, AnchorLabel, Proposal, NUM_ANCHORS};
use super::boxes::{encode_delta, iou, BoxF};
use super::model::{RoiHead, RpnOut, ROI_POOL_SIZE};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::data::{BoxAnnotation, Domain, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{clamped_log, log_softmax, masked_mean, smooth_l1};
use crate::optim::BoundParams;

/// Sampled anchors per image for the RPN classification term.
pub const RPN_SAMPLE: usize = 16;
/// At most half of the sample may be positive.
pub const RPN_POS_CAP: usize = RPN_SAMPLE / 2;
/// Sampled ROIs per image for the R-CNN terms.
pub const ROI_SAMPLE: usize = 8;
pub const ROI_POS_CAP: usize = ROI_SAMPLE / 2;
/// Proposals with IoU >= this against a ground truth are foreground.
pub const ROI_FG_IOU: f64 = 0.5;
/// Proposals below this IoU are background. Near misses in [0.4, 0.5) pool
/// cells similar to the ground-truth box, but leaving them unsupervised
/// floods inference with confident duplicates, so only a thin band is
/// ignored.
pub const ROI_BG_IOU: f64 = 0.4;
/// Feature-map stride for ROI pooling on the final level.
pub const ROI_STRIDE: usize = 16;

/// Background class index in the head's classification output.
pub const BACKGROUND_CLASS: usize = NUM_CLASSES;

/// The R-CNN head predicts deltas divided by these per-component scales
/// (the usual Faster R-CNN target normalization); raw offsets are fractions
/// of the box size, too small to compete with the classification gradients.
/// Inference multiplies the head output back before decoding.
pub const HEAD_DELTA_SCALE: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// The four detection loss terms and their sum, all scalars on the tape.
/// `details` carries the sampled sets and raw head outputs as plain numbers
/// so independent oracles can recompute every term.
pub struct DetectionLoss<T> {
    pub rpn_cls: Tensor<T>,
    pub rpn_reg: Tensor<T>,
    pub rcnn_cls: Tensor<T>,
    pub rcnn_reg: Tensor<T>,
    pub total: Tensor<T>,
    pub details: DetectionLossDetails,
}

/// Raw numbers behind one detection-loss evaluation.
#[derive(Clone, Debug, Default)]
pub struct DetectionLossDetails {
    /// (anchor index, is_positive) of the sampled RPN anchors.
    pub sampled_anchors: Vec<(usize, bool)>,
    /// Sigmoid inputs (logits) of all anchors, flat, in anchor order.
    pub rpn_logits: Vec<f64>,
    /// Predicted deltas of all anchors, flat (see `delta_flat_index`).
    pub rpn_deltas: Vec<f64>,
    /// (flat delta index, target value) for each positive sampled component.
    pub rpn_reg_targets: Vec<(usize, f64)>,
    /// One entry per sampled ROI.
    pub rois: Vec<RoiDetail>,
}

#[derive(Clone, Debug)]
pub struct RoiDetail {
    pub label: usize,
    /// Raw class logits (NUM_CLASSES + 1).
    pub class_logits: Vec<f64>,
    /// Raw regression outputs (NUM_CLASSES * 4), in normalized units.
    pub deltas: Vec<f64>,
    /// Foreground only: normalized regression target for the matched class
    /// (encoded delta divided by `HEAD_DELTA_SCALE`).
    pub target_delta: Option<[f64; 4]>,
}

struct RoiSample {
    rect: BoxF,
    label: usize,
    target_delta: Option<[f64; 4]>,
}

/// Compute the detection loss for one labeled source-domain image.
///
/// Calling this with a target-domain label is an annotation leak and fails
/// hard; the unlabeled domain never contributes supervised terms.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams<'_, T>,
    head: &RoiHead,
    rpn_out: &RpnOut<T>,
    final_level: &Tensor<T>,
    proposals: &[Proposal],
    domain: Domain,
    annotations: &[BoxAnnotation],
    rng: &mut ChaCha8Rng,
) -> Result<DetectionLoss<T>> {
    if domain.is_target() {
        return Err(Error::AnnotationLeak(
            "detection_loss called on a target-domain scene".into(),
        ));
    }

    let anchors = anchor_grid();
    let labels = assign_anchors(&anchors, annotations);

    // ── RPN sampling: up to 8 positives, fill to 16 with negatives ──
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => pos.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(RPN_POS_CAP);
    let n_neg = (RPN_SAMPLE - pos.len()).min(neg.len());
    neg.truncate(n_neg);
    let sampled_total = pos.len() + neg.len();

    let mut details = DetectionLossDetails {
        rpn_logits: rpn_out.logits.data().iter().map(|v| v.as_f64()).collect(),
        rpn_deltas: rpn_out.deltas.data().iter().map(|v| v.as_f64()).collect(),
        ..Default::default()
    };
    details
        .sampled_anchors
        .extend(pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))));

    // ── rpn_cls: BCE over the sampled anchors ──
    let mut cls_target = vec![T::zero(); NUM_ANCHORS];
    let mut cls_mask = vec![T::zero(); NUM_ANCHORS];
    for &i in &pos {
        cls_target[i] = T::one();
        cls_mask[i] = T::one();
    }
    for &i in &neg {
        cls_mask[i] = T::one();
    }
    let probs = tape.sigmoid(&rpn_out.logits);
    let log_p = clamped_log(tape, &probs)?;
    let one_minus = {
        let neg_p = tape.scale(&probs, -T::one());
        tape.offset(&neg_p, T::one())
    };
    let log_1mp = clamped_log(tape, &one_minus)?;
    let t_const = Tensor::from_vec(vec![NUM_ANCHORS], cls_target.clone())?;
    let omt_const = Tensor::from_vec(
        vec![NUM_ANCHORS],
        cls_target.iter().map(|&t| T::one() - t).collect(),
    )?;
    let pos_term = tape.mul(&log_p, &t_const)?;
    let neg_term = tape.mul(&log_1mp, &omt_const)?;
    let ll = tape.add(&pos_term, &neg_term)?;
    let bce = tape.scale(&ll, -T::one());
    let mask_const = Tensor::from_vec(vec![NUM_ANCHORS], cls_mask)?;
    let rpn_cls = masked_mean(tape, &bce, &mask_const, sampled_total.max(1))?;

    // ── rpn_reg: smooth-L1 on the sampled positives' deltas ──
    let rpn_reg = if pos.is_empty() {
        Tensor::scalar(T::zero())
    } else {
        let mut reg_target = vec![T::zero(); NUM_ANCHORS * 4];
        let mut reg_mask = vec![T::zero(); NUM_ANCHORS * 4];
        for &i in &pos {
            let AnchorLabel::Positive(gi) = labels[i] else { unreachable!() };
            let gt = BoxF::from_annotation(&annotations[gi]);
            let d = encode_delta(&gt, &anchors[i].to_box());
            for (c, &dv) in d.iter().enumerate() {
                let flat = delta_flat_index(i, c);
                reg_target[flat] = T::of(dv);
                reg_mask[flat] = T::one();
                details.rpn_reg_targets.push((flat, dv));
            }
        }
        let target_const = Tensor::from_vec(vec![NUM_ANCHORS * 4], reg_target)?;
        let mask_const = Tensor::from_vec(vec![NUM_ANCHORS * 4], reg_mask)?;
        let diff = tape.sub(&rpn_out.deltas, &target_const)?;
        let sl1 = smooth_l1(tape, &diff)?;
        masked_mean(tape, &sl1, &mask_const, 4 * pos.len())?
    };

    // ── ROI sampling: proposals plus ground-truth boxes ──
    let rois = sample_rois(proposals, annotations, rng);

    let mut ce_terms: Vec<Tensor<T>> = Vec::with_capacity(rois.len());
    let mut reg_terms: Vec<Tensor<T>> = Vec::new();
    let mut n_fg = 0usize;
    for roi in &rois {
        let pooled = tape.roi_pool(final_level, roi.rect.as_roi(), ROI_STRIDE, ROI_POOL_SIZE)?;
        let out = head.forward(tape, params, &pooled)?;
        details.rois.push(RoiDetail {
            label: roi.label,
            class_logits: out.class_logits.data().iter().map(|v| v.as_f64()).collect(),
            deltas: out.deltas.data().iter().map(|v| v.as_f64()).collect(),
            target_delta: roi
                .target_delta
                .map(|d| std::array::from_fn(|c| d[c] / HEAD_DELTA_SCALE[c])),
        });
        let ls = log_softmax(tape, &out.class_logits)?;
        let mut onehot = vec![T::zero(); NUM_CLASSES + 1];
        onehot[roi.label] = T::one();
        let onehot_const = Tensor::from_vec(vec![NUM_CLASSES + 1], onehot)?;
        let picked = tape.mul(&ls, &onehot_const)?;
        let picked_sum = tape.sum(&picked);
        ce_terms.push(tape.scale(&picked_sum, -T::one()));

        if let Some(delta) = roi.target_delta {
            n_fg += 1;
            let mut target = vec![T::zero(); NUM_CLASSES * 4];
            let mut mask = vec![T::zero(); NUM_CLASSES * 4];
            for (c, &dv) in delta.iter().enumerate() {
                target[roi.label * 4 + c] = T::of(dv / HEAD_DELTA_SCALE[c]);
                mask[roi.label * 4 + c] = T::one();
            }
            let target_const = Tensor::from_vec(vec![NUM_CLASSES * 4], target)?;
            let mask_const = Tensor::from_vec(vec![NUM_CLASSES * 4], mask)?;
            let diff = tape.sub(&out.deltas, &target_const)?;
            let sl1 = smooth_l1(tape, &diff)?;
            let masked = tape.mul(&sl1, &mask_const)?;
            reg_terms.push(tape.sum(&masked));
        }
    }

    let rcnn_cls = mean_of_scalars(tape, &ce_terms)?;
    let rcnn_reg = if n_fg == 0 {
        Tensor::scalar(T::zero())
    } else {
        let total = sum_of_scalars(tape, &reg_terms)?;
        tape.scale(&total, T::of(1.0 / (4 * n_fg) as f64))
    };

    let rpn_sum = tape.add(&rpn_cls, &rpn_reg)?;
    let rcnn_sum = tape.add(&rcnn_cls, &rcnn_reg)?;
    let total = tape.add(&rpn_sum, &rcnn_sum)?;

    Ok(DetectionLoss {
        rpn_cls,
        rpn_reg,
        rcnn_cls,
        rcnn_reg,
        total,
        details,
    })
}

/// Candidate ROIs are the proposals plus the ground-truth boxes and jittered
/// copies of them (so the head sees foreground before the RPN warms up, and
/// the regressor sees corrections with nonzero targets); foreground iff best
/// IoU >= 0.5. Up to 4 foreground, filled to 8 with background, both
/// shuffled.
fn sample_rois(
    proposals: &[Proposal],
    annotations: &[BoxAnnotation],
    rng: &mut ChaCha8Rng,
) -> Vec<RoiSample> {
    use rand::Rng;
    let gt_boxes: Vec<BoxF> = annotations.iter().map(BoxF::from_annotation).collect();
    let mut candidates: Vec<BoxF> = proposals.iter().map(|p| p.rect).collect();
    candidates.extend(gt_boxes.iter().copied());
    let size = crate::data::IMAGE_SIZE as f64;
    for gt in &gt_boxes {
        for _ in 0..4 {
            let (w, h) = (gt.width(), gt.height());
            let jittered = BoxF::new(
                gt.x1 + rng.gen_range(-0.22..0.22) * w,
                gt.y1 + rng.gen_range(-0.22..0.22) * h,
                gt.x2 + rng.gen_range(-0.22..0.22) * w,
                gt.y2 + rng.gen_range(-0.22..0.22) * h,
            )
            .clip(size, size);
            if !jittered.is_degenerate() {
                candidates.push(jittered);
            }
        }
    }

    let mut fg: Vec<RoiSample> = Vec::new();
    let mut bg: Vec<RoiSample> = Vec::new();
    for rect in candidates {
        if rect.is_degenerate() {
            continue;
        }
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let v = iou(&rect, gt);
            if v > best_iou {
                best_iou = v;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best_iou >= ROI_FG_IOU => fg.push(RoiSample {
                rect,
                label: annotations[gi].class_id,
                target_delta: Some(encode_delta(&gt_boxes[gi], &rect)),
            }),
            _ if best_iou < ROI_BG_IOU => bg.push(RoiSample {
                rect,
                label: BACKGROUND_CLASS,
                target_delta: None,
            }),
            _ => {} // ignore band
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(ROI_POS_CAP);
    let n_bg = (ROI_SAMPLE - fg.len()).min(bg.len());
    bg.truncate(n_bg);
    fg.extend(bg);
    fg
}

fn sum_of_scalars<T: Scalar>(tape: &mut Tape<T>, terms: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = tape.add(&acc, t)?;
    }
    Ok(acc)
}

fn mean_of_scalars<T: Scalar>(tape: &mut Tape<T>, terms: &[Tensor<T>]) -> Result<Tensor<T>> {
    if terms.is_empty() {
        return Ok(Tensor::scalar(T::zero()));
    }
    let total = sum_of_scalars(tape, terms)?;
    Ok(tape.scale(&total, T::of(1.0 / terms.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::{Backbone, Rpn};
    use crate::optim::ParamStore;
    use crate::rng;

    fn setup() -> (ParamStore<f32>, Backbone, Rpn, RoiHead) {
        let mut store = ParamStore::new();
        let b = Backbone::register(&mut store, 11);
        let r = Rpn::register(&mut store, 11);
        let h = RoiHead::register(&mut store, 11);
        (store, b, r, h)
    }

    #[test]
    fn target_domain_is_rejected() {
        let (store, backbone, rpn, head) = setup();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let image = Tensor::zeros(vec![3, 64, 64]);
        let pyr = backbone.forward(&mut tape, &params, &image).unwrap();
        let out = rpn.forward(&mut tape, &params, pyr.final_level()).unwrap();
        let mut r = rng::rng(1);
        let res = detection_loss(
            &mut tape,
            &params,
            &head,
            &out,
            pyr.final_level(),
            &[],
            Domain::Target,
            &[],
            &mut r,
        );
        match res {
            Err(Error::AnnotationLeak(_)) => {}
            Err(other) => panic!("expected annotation leak, got {other}"),
            Ok(_) => panic!("target-domain detection loss must fail"),
        }
    }

    #[test]
    fn loss_is_finite_and_assembled_from_terms() {
        let (store, backbone, rpn, head) = setup();
        let scene = crate::data::generate_scene(3, Domain::Source, 3).unwrap();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let pyr = backbone
            .forward(&mut tape, &params, &scene.image.to_tensor())
            .unwrap();
        let out = rpn.forward(&mut tape, &params, pyr.final_level()).unwrap();
        let logits: Vec<f64> = out.logits.data().iter().map(|&v| f64::from(v)).collect();
        let deltas: Vec<f64> = out.deltas.data().iter().map(|&v| f64::from(v)).collect();
        let proposals = super::super::anchors::propose(&logits, &deltas, &anchor_grid(), 24, 0.7, 12);
        let mut r = rng::rng(2);
        let loss = detection_loss(
            &mut tape,
            &params,
            &head,
            &out,
            pyr.final_level(),
            &proposals,
            Domain::Source,
            &scene.annotations,
            &mut r,
        )
        .unwrap();
        let total = f64::from(loss.total.item());
        let parts = f64::from(loss.rpn_cls.item())
            + f64::from(loss.rpn_reg.item())
            + f64::from(loss.rcnn_cls.item())
            + f64::from(loss.rcnn_reg.item());
        assert!(total.is_finite());
        assert!((total - parts).abs() < 1e-5, "{total} vs {parts}");
        assert!(total > 0.0);
    }
}
