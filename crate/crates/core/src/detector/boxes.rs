//! Box geometry: IoU, delta encoding, clipping, NMS.
//!
//! All box arithmetic runs in f64 regardless of the training precision; the
//! encode/decode round-trip tolerance is unreachable in f32.

use crate::data::BoxAnnotation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxF { x1, y1, x2, y2 }
    }

    pub fn from_annotation(b: &BoxAnnotation) -> Self {
        BoxF::new(b.x1, b.y1, b.x2, b.y2)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x2 > self.x1 && self.y2 > self.y1)
    }

    pub fn clip(&self, width: f64, height: f64) -> BoxF {
        BoxF {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn as_roi(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection-over-union. Degenerate inputs yield 0.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Standard box regression targets: (dx, dy) relative to anchor center and
/// size, (dw, dh) log-scaled.
pub fn encode_delta(gt: &BoxF, anchor: &BoxF) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

pub fn decode_delta(delta: [f64; 4], anchor: &BoxF) -> BoxF {
    let (acx, acy) = anchor.center();
    let cx = delta[0] * anchor.width() + acx;
    let cy = delta[1] * anchor.height() + acy;
    let w = anchor.width() * delta[2].exp();
    let h = anchor.height() * delta[3].exp();
    BoxF {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Greedy non-maximum suppression. Boxes are visited in descending score
/// order (ties broken by original index); a box is kept iff its IoU with
/// every kept box is at most `iou_threshold`. Returns kept indices in visit
/// order.
pub fn nms(boxes: &[BoxF], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
