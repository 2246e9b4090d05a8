//! Anchor grid, anchor/ground-truth assignment, and proposal selection.

use super::boxes::{decode_delta, iou, nms, BoxF};
use crate::data::{BoxAnnotation, IMAGE_SIZE};

/// Square anchor side lengths, one anchor scale per final-map cell.
pub const ANCHOR_SIDES: [f64; 3] = [12.0, 24.0, 40.0];
/// Stride of the final feature map relative to the image.
pub const FEAT_STRIDE: usize = 16;
/// Final feature map extent (64 / 16).
pub const FINAL_GRID: usize = 4;
pub const NUM_ANCHORS: usize = ANCHOR_SIDES.len() * FINAL_GRID * FINAL_GRID;

pub const PRE_NMS_TOP: usize = 24;
pub const PROPOSAL_NMS_IOU: f64 = 0.7;
pub const POST_NMS_TOP: usize = 12;

/// Fixed reference box centered on the stride-16 grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub fn to_box(self) -> BoxF {
        BoxF::new(
            self.cx - self.width / 2.0,
            self.cy - self.height / 2.0,
            self.cx + self.width / 2.0,
            self.cy + self.height / 2.0,
        )
    }
}

/// The 48 anchors in scale-major order: index = s*16 + row*4 + col. This
/// matches the row-major flattening of the RPN's (3, 4, 4) logit map, so
/// flat logit index equals anchor index.
pub fn anchor_grid() -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(NUM_ANCHORS);
    for side in ANCHOR_SIDES {
        for row in 0..FINAL_GRID {
            for col in 0..FINAL_GRID {
                anchors.push(Anchor {
                    cx: (col as f64 + 0.5) * FEAT_STRIDE as f64,
                    cy: (row as f64 + 0.5) * FEAT_STRIDE as f64,
                    width: side,
                    height: side,
                });
            }
        }
    }
    anchors
}

/// Flat index into the RPN's (12, 4, 4) delta map for component `comp` of
/// anchor `a`: channels are grouped four per anchor scale.
pub fn delta_flat_index(anchor_idx: usize, comp: usize) -> usize {
    let scale = anchor_idx / (FINAL_GRID * FINAL_GRID);
    let cell = anchor_idx % (FINAL_GRID * FINAL_GRID);
    (4 * scale + comp) * FINAL_GRID * FINAL_GRID + cell
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Positive iff IoU >= 0.5 with some ground truth or the anchor is the
/// argmax-IoU anchor for a ground truth; negative iff max IoU < 0.3; ignore
/// otherwise. Ties resolve to the first candidate in index order.
pub fn assign_anchors(anchors: &[Anchor], gts: &[BoxAnnotation]) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let gt_boxes: Vec<BoxF> = gts.iter().map(BoxF::from_annotation).collect();
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_anchor_per_gt: Vec<(usize, f64)> = vec![(0, -1.0); gt_boxes.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let abox = anchor.to_box();
        let mut best_gt = 0;
        let mut best_iou = -1.0;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let v = iou(&abox, gt);
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
            if v > best_anchor_per_gt[gi].1 {
                best_anchor_per_gt[gi] = (ai, v);
            }
        }
        labels.push(if best_iou >= 0.5 {
            AnchorLabel::Positive(best_gt)
        } else if best_iou < 0.3 {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    for (gi, &(ai, _)) in best_anchor_per_gt.iter().enumerate() {
        if !matches!(labels[ai], AnchorLabel::Positive(_)) {
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    labels
}

/// Scored, class-agnostic region proposal.
#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub rect: BoxF,
    pub objectness: f64,
}

/// Decode, clip, take the top `pre_nms_top` by objectness, NMS, keep
/// `post_nms_top`. Logit order must match `anchor_grid()`.
pub fn propose(
    logits: &[f64],
    deltas: &[f64],
    anchors: &[Anchor],
    pre_nms_top: usize,
    nms_iou: f64,
    post_nms_top: usize,
) -> Vec<Proposal> {
    debug_assert_eq!(logits.len(), anchors.len());
    debug_assert_eq!(deltas.len(), anchors.len() * 4);
    let size = IMAGE_SIZE as f64;
    let mut decoded: Vec<(usize, BoxF)> = Vec::with_capacity(anchors.len());
    for (ai, anchor) in anchors.iter().enumerate() {
        let d = [
            deltas[delta_flat_index(ai, 0)],
            deltas[delta_flat_index(ai, 1)],
            deltas[delta_flat_index(ai, 2)],
            deltas[delta_flat_index(ai, 3)],
        ];
        let rect = decode_delta(d, &anchor.to_box()).clip(size, size);
        if rect.width() > 1e-3 && rect.height() > 1e-3 {
            decoded.push((ai, rect));
        }
    }
    decoded.sort_by(|a, b| logits[b.0].partial_cmp(&logits[a.0]).unwrap().then(a.0.cmp(&b.0)));
    decoded.truncate(pre_nms_top);
    let boxes: Vec<BoxF> = decoded.iter().map(|(_, b)| *b).collect();
    let scores: Vec<f64> = decoded.iter().map(|(ai, _)| logits[*ai]).collect();
    let kept = nms(&boxes, &scores, nms_iou);
    kept.into_iter()
        .take(post_nms_top)
        .map(|i| Proposal {
            rect: boxes[i],
            objectness: sigmoid(scores[i]),
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
