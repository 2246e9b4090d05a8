//! Scalar-loop oracles for the detector building blocks: convolution,
//! the full backbone, ROI pooling, and anchor assignment, plus the box
//! delta round-trip and probability well-formedness properties.

mod common;

use common::{random_values, rng, tensor_of};
use mlda_core::autodiff::{Tape, Tensor};
use mlda_core::data::{BoxAnnotation, IMAGE_SIZE};
use mlda_core::detector::{
    anchor_grid, assign_anchors, decode_delta, encode_delta, iou, Anchor, AnchorLabel, Backbone,
    BoxF, BACKBONE_CHANNELS,
};
use mlda_core::nn::softmax;
use mlda_core::optim::ParamStore;
use rand::Rng;

// ── Convolution oracle: quadruple scalar loop ────────────────────────

#[allow(clippy::too_many_arguments)]
fn oracle_conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                let iv = input[(ci * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((co * c_in + ci) * k + ky) * k + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_quadruple_loop_oracle() {
    let mut r = rng(3100);
    for case in 0..30 {
        let (c_in, c_out) = (r.gen_range(1..4usize), r.gen_range(1..4usize));
        let k = [1usize, 3][case % 2];
        let stride = r.gen_range(1..3usize);
        let pad = r.gen_range(0..2usize);
        let h = r.gen_range(k + pad..10usize);
        let w = r.gen_range(k + pad..10usize);
        let input = random_values(&mut r, c_in * h * w, -2.0, 2.0, 0.0);
        let kernel = random_values(&mut r, c_out * c_in * k * k, -1.0, 1.0, 0.0);
        let bias = random_values(&mut r, c_out, -0.5, 0.5, 0.0);

        let mut tape = Tape::new();
        let x = tensor_of::<f64>(vec![c_in, h, w], &input);
        let kt = tensor_of::<f64>(vec![c_out, c_in, k, k], &kernel);
        let bt = tensor_of::<f64>(vec![c_out], &bias);
        let got = tape.conv2d(&x, &kt, Some(&bt), stride, pad).unwrap();
        let want = oracle_conv2d(&input, c_in, h, w, &kernel, c_out, k, Some(&bias), stride, pad);
        assert_eq!(got.numel(), want.len());
        for (g, w_) in got.data().iter().zip(want.iter()) {
            assert!((g - w_).abs() < 1e-12, "case {case}: {g} vs {w_}");
        }
    }
}

#[test]
fn conv2d_on_2x8x8_matches_oracle_within_1e12() {
    let mut r = rng(3200);
    let input = random_values(&mut r, 2 * 8 * 8, -1.0, 1.0, 0.0);
    let kernel = random_values(&mut r, 3 * 2 * 9, -1.0, 1.0, 0.0);
    let mut tape = Tape::new();
    let x = tensor_of::<f64>(vec![2, 8, 8], &input);
    let kt = tensor_of::<f64>(vec![3, 2, 3, 3], &kernel);
    let got = tape.conv2d(&x, &kt, None, 1, 0).unwrap();
    let want = oracle_conv2d(&input, 2, 8, 8, &kernel, 3, 3, None, 1, 0);
    for (g, w) in got.data().iter().zip(want.iter()) {
        assert!((g - w).abs() < 1e-12);
    }
}

// ── Backbone oracle: scalar re-implementation over the same weights ──

fn oracle_relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn oracle_maxpool2x2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(input[(ci * h + oy * 2 + dy) * w + ox * 2 + dx]);
                    }
                }
                out[(ci * ho + oy) * wo + ox] = best;
            }
        }
    }
    out
}

#[test]
fn backbone_pyramid_matches_scalar_reimplementation() {
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::register(&mut store, 71);
    let mut r = rng(72);
    let image_vals = random_values(&mut r, 3 * IMAGE_SIZE * IMAGE_SIZE, 0.0, 1.0, 0.0);
    let image = tensor_of::<f64>(vec![3, IMAGE_SIZE, IMAGE_SIZE], &image_vals);

    let mut tape = Tape::inference();
    let params = store.bind_frozen();
    let pyramid = backbone.forward(&mut tape, &params, &image).unwrap();

    // independent forward from raw weights
    let weight = |name: &str| store.get(store.id_of(name).unwrap()).value.data().to_vec();
    let mut cur = image_vals.clone();
    let mut c_in = 3usize;
    let mut hw = IMAGE_SIZE;
    for (block, &c_out) in BACKBONE_CHANNELS.iter().enumerate() {
        for conv in 1..=2 {
            let prefix = format!("backbone/block{}/conv{conv}", block + 1);
            let kernel = weight(&format!("{prefix}/weight"));
            let bias = weight(&format!("{prefix}/bias"));
            let cin_here = if conv == 1 { c_in } else { c_out };
            cur = oracle_conv2d(&cur, cin_here, hw, hw, &kernel, c_out, 3, Some(&bias), 1, 1);
            oracle_relu(&mut cur);
        }
        cur = oracle_maxpool2x2(&cur, c_out, hw, hw);
        hw /= 2;
        c_in = c_out;
        let level = pyramid.level(block + 1);
        assert_eq!(level.shape(), &[c_out, hw, hw]);
        let mut max_err = 0.0f64;
        for (g, w) in level.data().iter().zip(cur.iter()) {
            max_err = max_err.max((g - w).abs());
        }
        assert!(max_err < 1e-10, "block {} max err {max_err:e}", block + 1);
    }
}

// ── ROI pooling oracle ───────────────────────────────────────────────

fn oracle_roi_pool(
    data: &[f64],
    c: usize,
    hf: usize,
    wf: usize,
    roi: [f64; 4],
    stride: usize,
    out_size: usize,
) -> Vec<f64> {
    let cells = |lo: f64, hi: f64, extent: usize| -> (usize, usize) {
        let a = ((lo / stride as f64).floor().max(0.0) as usize).min(extent - 1);
        let b = (((hi / stride as f64).ceil()).max(1.0) as usize)
            .min(extent)
            .max(a + 1);
        (a, b)
    };
    let (cx0, cx1) = cells(roi[0], roi[2], wf);
    let (cy0, cy1) = cells(roi[1], roi[3], hf);
    let (nx, ny) = (cx1 - cx0, cy1 - cy0);
    let bin = |j: usize, n: usize, base: usize| -> (usize, usize) {
        let a = base + j * n / out_size;
        let b = base + (j + 1) * n / out_size;
        if a == b {
            let cell = a.min(base + n - 1);
            (cell, cell + 1)
        } else {
            (a, b)
        }
    };
    let mut out = Vec::with_capacity(c * out_size * out_size);
    for ci in 0..c {
        for by in 0..out_size {
            let (ya, yb) = bin(by, ny, cy0);
            for bx in 0..out_size {
                let (xa, xb) = bin(bx, nx, cx0);
                let mut best = f64::NEG_INFINITY;
                for y in ya..yb {
                    for x in xa..xb {
                        best = best.max(data[(ci * hf + y) * wf + x]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

#[test]
fn roi_pool_matches_scalar_binning_oracle() {
    let mut r = rng(3300);
    for case in 0..100 {
        let c = r.gen_range(1..4usize);
        let vals = random_values(&mut r, c * 16, -2.0, 2.0, 0.0);
        let x1: f64 = r.gen_range(0.0..56.0);
        let y1: f64 = r.gen_range(0.0..56.0);
        let roi = [
            x1,
            y1,
            x1 + r.gen_range(2.0..(64.0 - x1)),
            y1 + r.gen_range(2.0..(64.0 - y1)),
        ];
        let mut tape = Tape::new();
        let feat = tensor_of::<f64>(vec![c, 4, 4], &vals);
        let got = tape.roi_pool(&feat, roi, 16, 4).unwrap();
        let want = oracle_roi_pool(&vals, c, 4, 4, roi, 16, 4);
        assert_eq!(got.data(), &want[..], "case {case} roi {roi:?}");
    }
}

// ── Anchor assignment oracle ─────────────────────────────────────────

/// Brute-force O(A*G): compute the full IoU matrix, then apply the three
/// rules directly.
fn oracle_assign(anchors: &[Anchor], gts: &[BoxAnnotation]) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut matrix = vec![vec![0.0f64; gts.len()]; anchors.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            matrix[ai][gi] = iou(&a.to_box(), &BoxF::from_annotation(g));
        }
    }
    let mut labels: Vec<AnchorLabel> = (0..anchors.len())
        .map(|ai| {
            let (best_gi, best) = matrix[ai]
                .iter()
                .enumerate()
                .fold((0, -1.0), |(bi, bv), (gi, &v)| if v > bv { (gi, v) } else { (bi, bv) });
            if best >= 0.5 {
                AnchorLabel::Positive(best_gi)
            } else if best < 0.3 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for gi in 0..gts.len() {
        let (best_ai, _) = (0..anchors.len())
            .map(|ai| (ai, matrix[ai][gi]))
            .fold((0, -1.0), |(bi, bv), (ai, v)| if v > bv { (ai, v) } else { (bi, bv) });
        if !matches!(labels[best_ai], AnchorLabel::Positive(_)) {
            labels[best_ai] = AnchorLabel::Positive(gi);
        }
    }
    labels
}

#[test]
fn anchor_assignment_matches_bruteforce_oracle() {
    let anchors = anchor_grid();
    for case in 0..100u64 {
        let mut r = rng(3400 + case);
        let n = r.gen_range(0..6usize);
        let gts: Vec<BoxAnnotation> = (0..n)
            .map(|_| {
                let x1: f64 = r.gen_range(0.0..44.0);
                let y1: f64 = r.gen_range(0.0..44.0);
                BoxAnnotation {
                    x1,
                    y1,
                    x2: x1 + r.gen_range(8.0..20.0),
                    y2: y1 + r.gen_range(8.0..20.0),
                    class_id: r.gen_range(0..3),
                }
            })
            .collect();
        let got = assign_anchors(&anchors, &gts);
        let want = oracle_assign(&anchors, &gts);
        assert_eq!(got, want, "case {case}");
    }
}

// ── Box delta and probability properties ─────────────────────────────

#[test]
fn encode_decode_roundtrip_within_1e6_on_random_boxes() {
    let mut r = rng(3500);
    for _ in 0..500 {
        let ax1: f64 = r.gen_range(0.0..48.0);
        let ay1: f64 = r.gen_range(0.0..48.0);
        let anchor = BoxF::new(ax1, ay1, ax1 + r.gen_range(4.0..16.0), ay1 + r.gen_range(4.0..16.0));
        let gx1: f64 = r.gen_range(0.0..48.0);
        let gy1: f64 = r.gen_range(0.0..48.0);
        let gt = BoxF::new(gx1, gy1, gx1 + r.gen_range(4.0..16.0), gy1 + r.gen_range(4.0..16.0));
        let rt = decode_delta(encode_delta(&gt, &anchor), &anchor);
        for (a, b) in [(rt.x1, gt.x1), (rt.y1, gt.y1), (rt.x2, gt.x2), (rt.y2, gt.y2)] {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_and_sigmoid_outputs_are_well_formed() {
    let mut r = rng(3600);
    for _ in 0..50 {
        let logits = random_values(&mut r, 4, -6.0, 6.0, 0.0);
        let mut tape = Tape::new();
        let z = tensor_of::<f64>(vec![4], &logits);
        let p = softmax(&mut tape, &z).unwrap();
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for &v in p.data() {
            assert!(v > 0.0 && v < 1.0);
        }
        let s = tape.sigmoid(&z);
        for &v in s.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }
}

#[test]
fn proposals_are_valid_boxes_after_clipping() {
    let mut r = rng(3700);
    let anchors = anchor_grid();
    for _ in 0..50 {
        let logits = random_values(&mut r, 48, -2.0, 2.0, 0.0);
        let deltas = random_values(&mut r, 192, -0.8, 0.8, 0.0);
        let proposals = mlda_core::detector::propose(&logits, &deltas, &anchors, 24, 0.7, 12);
        assert!(proposals.len() <= 12);
        for p in &proposals {
            assert!(p.rect.x1 < p.rect.x2 && p.rect.y1 < p.rect.y2);
            assert!(p.rect.x1 >= 0.0 && p.rect.y2 <= 64.0);
            assert!(p.objectness > 0.0 && p.objectness < 1.0);
        }
    }
}

#[test]
fn tensor_of_helper_is_exercised() {
    let t = tensor_of::<f32>(vec![2], &[1.0, 2.0]);
    let mut tape = Tape::<f32>::new();
    let s = tape.sum(&t);
    assert_eq!(s.item(), 3.0);
}
