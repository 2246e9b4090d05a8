//! Scalar-loop oracles for every loss: the patch losses (single- and
//! multi-level), the instance loss, the consistency regularizer, and all
//! four detection terms. Each oracle is an independent re-implementation
//! from raw numbers; the engine must match it within 1e-10 in f64.

mod common;

use common::rng;
use mlda_core::adaptation::{consistency_loss, image_patch_loss, instance_loss, multi_level_loss};
use mlda_core::autodiff::{Tape, Tensor};
use mlda_core::data::{generate_scene, Domain};
use mlda_core::detector::{
    anchor_grid, detection_loss, propose, Backbone, DetectionLossDetails, RoiHead, Rpn,
};
use mlda_core::nn::PROB_EPS;
use mlda_core::optim::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-10;

// ── Oracles ──────────────────────────────────────────────────────────

fn oracle_bce(p: f64, target_domain: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if target_domain {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn oracle_multi_level(maps: &[Vec<f64>], target_domain: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for map in maps {
        for &p in map {
            total += oracle_bce(p, target_domain);
            count += 1;
        }
    }
    total / count as f64
}

fn oracle_instance(probs: &[f64], target_domain: bool) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().map(|&p| oracle_bce(p, target_domain)).sum::<f64>() / probs.len() as f64
}

fn oracle_consistency(final_map: &[f64], probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let m = final_map.iter().sum::<f64>() / final_map.len() as f64;
    probs.iter().map(|&p| (m - p) * (m - p)).sum::<f64>() / probs.len() as f64
}

fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn oracle_log_softmax(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits[class] - lse
}

/// Recompute all four detection terms from the raw numbers the loss exposes.
fn oracle_detection_terms(details: &DetectionLossDetails) -> (f64, f64, f64, f64) {
    let rpn_cls = {
        let mut total = 0.0;
        for &(idx, is_pos) in &details.sampled_anchors {
            let p = oracle_sigmoid(details.rpn_logits[idx]);
            total += oracle_bce(p, is_pos);
        }
        total / details.sampled_anchors.len().max(1) as f64
    };
    let rpn_reg = if details.rpn_reg_targets.is_empty() {
        0.0
    } else {
        let mut total = 0.0;
        for &(flat, target) in &details.rpn_reg_targets {
            total += oracle_smooth_l1(details.rpn_deltas[flat] - target);
        }
        total / details.rpn_reg_targets.len() as f64
    };
    let rcnn_cls = if details.rois.is_empty() {
        0.0
    } else {
        details
            .rois
            .iter()
            .map(|r| -oracle_log_softmax(&r.class_logits, r.label))
            .sum::<f64>()
            / details.rois.len() as f64
    };
    let (reg_sum, fg) = details.rois.iter().fold((0.0, 0usize), |(s, n), r| {
        match r.target_delta {
            Some(t) => {
                let mut roi_sum = 0.0;
                for (c, &tv) in t.iter().enumerate() {
                    roi_sum += oracle_smooth_l1(r.deltas[r.label * 4 + c] - tv);
                }
                (s + roi_sum, n + 1)
            }
            None => (s, n),
        }
    });
    let rcnn_reg = if fg == 0 { 0.0 } else { reg_sum / (4 * fg) as f64 };
    (rpn_cls, rpn_reg, rcnn_cls, rcnn_reg)
}

// ── Random instance generators ───────────────────────────────────────

fn random_prob_map(r: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|_| r.gen_range(0.001..0.999)).collect()
}

fn map_tensor(vals: &[f64], h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(vec![1, h, w], vals.to_vec()).unwrap()
}

// ── Tests ────────────────────────────────────────────────────────────

#[test]
fn multi_level_loss_matches_scalar_oracle_on_100_instances() {
    for case in 0..100u64 {
        let mut r = rng(4000 + case);
        let n_levels = r.gen_range(1..=4usize);
        let sizes = [(8usize, 8usize), (4, 4), (2, 2), (1, 1)];
        let domain = if case % 2 == 0 { Domain::Target } else { Domain::Source };
        let raw: Vec<(Vec<f64>, usize, usize)> = (0..n_levels)
            .map(|i| {
                let (h, w) = sizes[i];
                (random_prob_map(&mut r, h, w), h, w)
            })
            .collect();
        let mut tape = Tape::new();
        let maps: Vec<Tensor<f64>> = raw.iter().map(|(v, h, w)| map_tensor(v, *h, *w)).collect();
        let got = multi_level_loss(&mut tape, &maps, domain).unwrap().item();
        let vals: Vec<Vec<f64>> = raw.iter().map(|(v, _, _)| v.clone()).collect();
        let want = oracle_multi_level(&vals, domain.is_target());
        assert!((got - want).abs() < TOLERANCE, "case {case}: {got} vs {want}");
    }
}

#[test]
fn image_patch_loss_matches_scalar_oracle_on_100_instances() {
    for case in 0..100u64 {
        let mut r = rng(4300 + case);
        let vals = random_prob_map(&mut r, 4, 4);
        let domain = if case % 2 == 0 { Domain::Target } else { Domain::Source };
        let mut tape = Tape::new();
        let got = image_patch_loss(&mut tape, &map_tensor(&vals, 4, 4), domain)
            .unwrap()
            .item();
        let want = oracle_multi_level(&[vals], domain.is_target());
        assert!((got - want).abs() < TOLERANCE, "case {case}: {got} vs {want}");
    }
}

#[test]
fn single_level_reduction_is_exact_on_100_instances() {
    for case in 0..100u64 {
        let mut r = rng(4600 + case);
        let vals = random_prob_map(&mut r, 4, 4);
        let domain = if case % 3 == 0 { Domain::Source } else { Domain::Target };
        let mut tape = Tape::new();
        let map = map_tensor(&vals, 4, 4);
        let a = multi_level_loss(&mut tape, std::slice::from_ref(&map), domain)
            .unwrap()
            .item();
        let b = image_patch_loss(&mut tape, &map, domain).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits(), "case {case}");
    }
}

#[test]
fn instance_loss_matches_scalar_oracle_on_100_instances() {
    for case in 0..100u64 {
        let mut r = rng(4900 + case);
        let n = r.gen_range(1..=12usize);
        let probs: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..0.999)).collect();
        let domain = if case % 2 == 0 { Domain::Target } else { Domain::Source };
        let mut tape = Tape::new();
        let tensors: Vec<Tensor<f64>> = probs
            .iter()
            .map(|&p| Tensor::from_vec(vec![1], vec![p]).unwrap())
            .collect();
        let got = instance_loss(&mut tape, &tensors, domain).unwrap().item();
        let want = oracle_instance(&probs, domain.is_target());
        assert!((got - want).abs() < TOLERANCE, "case {case}: {got} vs {want}");
    }
}

#[test]
fn consistency_loss_matches_scalar_oracle_on_100_instances() {
    for case in 0..100u64 {
        let mut r = rng(5200 + case);
        let map_vals = random_prob_map(&mut r, 4, 4);
        let n = r.gen_range(1..=12usize);
        let probs: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..0.999)).collect();
        let mut tape = Tape::new();
        let map = map_tensor(&map_vals, 4, 4);
        let tensors: Vec<Tensor<f64>> = probs
            .iter()
            .map(|&p| Tensor::from_vec(vec![1], vec![p]).unwrap())
            .collect();
        let got = consistency_loss(&mut tape, &map, &tensors).unwrap().item();
        let want = oracle_consistency(&map_vals, &probs);
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
    }
}

#[test]
fn detection_terms_match_scalar_oracle_on_100_instances() {
    // one f64 model, 100 random scenes and sampling draws
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::register(&mut store, 61);
    let rpn = Rpn::register(&mut store, 61);
    let head = RoiHead::register(&mut store, 61);

    for case in 0..100u64 {
        let scene = generate_scene(7000 + case, Domain::Source, 1 + (case as usize % 5)).unwrap();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let image = scene.image.to_tensor().cast::<f64>();
        let pyramid = backbone.forward(&mut tape, &params, &image).unwrap();
        let rpn_out = rpn.forward(&mut tape, &params, pyramid.final_level()).unwrap();
        let logits: Vec<f64> = rpn_out.logits.data().to_vec();
        let deltas: Vec<f64> = rpn_out.deltas.data().to_vec();
        let proposals = propose(&logits, &deltas, &anchor_grid(), 24, 0.7, 12);
        let mut sample_rng = rng(8000 + case);
        let loss = detection_loss(
            &mut tape,
            &params,
            &head,
            &rpn_out,
            pyramid.final_level(),
            &proposals,
            scene.domain,
            &scene.annotations,
            &mut sample_rng,
        )
        .unwrap();
        let (want_rpn_cls, want_rpn_reg, want_rcnn_cls, want_rcnn_reg) =
            oracle_detection_terms(&loss.details);
        for (name, got, want) in [
            ("rpn_cls", loss.rpn_cls.item(), want_rpn_cls),
            ("rpn_reg", loss.rpn_reg.item(), want_rpn_reg),
            ("rcnn_cls", loss.rcnn_cls.item(), want_rcnn_cls),
            ("rcnn_reg", loss.rcnn_reg.item(), want_rcnn_reg),
        ] {
            assert!(
                (got - want).abs() < TOLERANCE,
                "case {case} {name}: {got} vs {want}"
            );
        }
        let total = loss.total.item();
        let sum = loss.rpn_cls.item() + loss.rpn_reg.item() + loss.rcnn_cls.item() + loss.rcnn_reg.item();
        assert!((total - sum).abs() < TOLERANCE, "case {case} total: {total} vs {sum}");
    }
}

#[test]
fn smooth_l1_formula_point() {
    // pinned arithmetic: smooth-L1 at d = 0.5 is 0.125
    assert_eq!(oracle_smooth_l1(0.5), 0.125);
    let mut tape = Tape::new();
    let d = Tensor::from_vec(vec![1], vec![0.5f64]).unwrap();
    let y = mlda_core::nn::smooth_l1(&mut tape, &d).unwrap();
    assert!((y.data()[0] - 0.125).abs() < 1e-15);
}
