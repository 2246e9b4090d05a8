//! Adversarial domain alignment: multi-level patch classifiers, the
//! instance-stage classifier, the consistency regularizer, and classifier
//! placement.
//!
//! Every classifier reads its features through a gradient-reversal node of
//! constant strength 1, so minimizing the classifiers' binary cross-entropy
//! simultaneously pushes the backbone toward domain-insensitive features.
//! Classifier parameters themselves sit downstream of the reversal and
//! receive ordinary gradients.

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::data::Domain;
use crate::detector::{FeaturePyramid, BACKBONE_CHANNELS, NUM_LEVELS, ROI_FEATURE_LEN};
use crate::error::{Error, Result};
use crate::nn::{bce_with_constant_label, Conv2dLayer, LinearLayer};
use crate::optim::{BoundParams, ParamStore};

/// Reversal strength used throughout training (no ramp-up schedule).
pub const GRL_STRENGTH: f64 = 1.0;
const CLASSIFIER_HIDDEN: usize = 64;

/// Patch-based domain classifier for one pyramid level: grl -> 1x1 conv
/// C_k -> 64 -> relu -> 1x1 conv 64 -> 1 -> sigmoid. The 1x1 convolutions
/// preserve the level's spatial extent, so the output is a per-location
/// target-domain probability map.
pub struct PatchClassifier {
    pub level: usize,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl PatchClassifier {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, level: usize, init_seed: u64) -> Self {
        let c_in = BACKBONE_CHANNELS[level - 1];
        let prefix = format!("da/level_{level}");
        PatchClassifier {
            level,
            conv1: Conv2dLayer::register(store, &format!("{prefix}/conv1"), CLASSIFIER_HIDDEN, c_in, 1, 1, 0, init_seed),
            conv2: Conv2dLayer::register(store, &format!("{prefix}/conv2"), 1, CLASSIFIER_HIDDEN, 1, 1, 0, init_seed),
        }
    }

    /// Per-pixel target-domain probability map, shape (1, H_k, W_k).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        feature: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let expect_c = BACKBONE_CHANNELS[self.level - 1];
        if feature.shape().len() != 3 || feature.shape()[0] != expect_c {
            return Err(Error::shape(
                "patch_classifier",
                format!(
                    "level {} expects ({}, H, W), got {:?}",
                    self.level,
                    expect_c,
                    feature.shape()
                ),
            ));
        }
        let reversed = tape.grl(feature, T::of(GRL_STRENGTH))?;
        let h = self.conv1.forward(tape, params, &reversed)?;
        let r = tape.relu(&h);
        let logits = self.conv2.forward(tape, params, &r)?;
        Ok(tape.sigmoid(&logits))
    }
}

/// Instance-stage domain classifier over a pooled, flattened proposal
/// feature: grl -> fc 1024 -> 64 -> relu -> fc 64 -> 1 -> sigmoid.
pub struct InstanceClassifier {
    fc1: LinearLayer,
    fc2: LinearLayer,
}

impl InstanceClassifier {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, init_seed: u64) -> Self {
        InstanceClassifier {
            fc1: LinearLayer::register(store, "da/instance/fc1", CLASSIFIER_HIDDEN, ROI_FEATURE_LEN, init_seed),
            fc2: LinearLayer::register(store, "da/instance/fc2", 1, CLASSIFIER_HIDDEN, init_seed),
        }
    }

    /// Target-domain probability for one proposal, shape (1,).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        pooled: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if pooled.numel() != ROI_FEATURE_LEN {
            return Err(Error::shape(
                "instance_classifier",
                format!("expected {} pooled values, got {:?}", ROI_FEATURE_LEN, pooled.shape()),
            ));
        }
        let flat = tape.flatten(pooled);
        let reversed = tape.grl(&flat, T::of(GRL_STRENGTH))?;
        let h = self.fc1.forward(tape, params, &reversed)?;
        let r = tape.relu(&h);
        let logit = self.fc2.forward(tape, params, &r)?;
        Ok(tape.sigmoid(&logit))
    }
}

/// All adaptation branches for a given classifier placement.
pub struct AdaptationBranches {
    pub levels: Vec<usize>,
    pub patch: Vec<PatchClassifier>,
    pub instance: InstanceClassifier,
}

impl AdaptationBranches {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, n_classifiers: usize, init_seed: u64) -> Result<Self> {
        let levels = place_classifiers(n_classifiers, NUM_LEVELS)?;
        let patch = levels
            .iter()
            .map(|&k| PatchClassifier::register(store, k, init_seed))
            .collect();
        Ok(AdaptationBranches {
            levels,
            patch,
            instance: InstanceClassifier::register(store, init_seed),
        })
    }

    /// Probability maps for every placed level of a pyramid.
    pub fn patch_maps<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.patch
            .iter()
            .map(|c| c.forward(tape, params, pyramid.level(c.level)))
            .collect()
    }
}

/// Equal-interval placement of `n` classifiers over levels 1..=K: round the
/// n-point linspace from 1 to K (half away from zero), deduplicate, always
/// include the final level. n = 1 places only the final level.
pub fn place_classifiers(n: usize, k: usize) -> Result<Vec<usize>> {
    if n < 1 || n > k {
        return Err(Error::invalid(format!(
            "n_classifiers must be in [1, {k}], got {n}"
        )));
    }
    let mut levels: Vec<usize> = if n == 1 {
        vec![k]
    } else {
        (0..n)
            .map(|i| {
                let x = 1.0 + (k - 1) as f64 * i as f64 / (n - 1) as f64;
                x.round() as usize
            })
            .collect()
    };
    if !levels.contains(&k) {
        levels.push(k);
    }
    levels.sort_unstable();
    levels.dedup();
    Ok(levels)
}

/// Multi-level patch loss: binary cross-entropy of every map location
/// against the image's domain label, summed over locations and levels and
/// divided by the total location count (one global mean).
pub fn multi_level_loss<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &[Tensor<T>],
    domain: Domain,
) -> Result<Tensor<T>> {
    if maps.is_empty() {
        return Err(Error::invalid("multi_level_loss: no levels selected"));
    }
    let mut total: Option<Tensor<T>> = None;
    let mut count = 0usize;
    for map in maps {
        let bce = bce_with_constant_label(tape, map, domain.is_target())?;
        let s = tape.sum(&bce);
        count += map.numel();
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    let total = total.expect("at least one map");
    Ok(tape.scale(&total, T::of(1.0 / count as f64)))
}

/// The single-level special case at the final map, kept as its own entry
/// point for the n = 1 ablation.
pub fn image_patch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    final_map: &Tensor<T>,
    domain: Domain,
) -> Result<Tensor<T>> {
    multi_level_loss(tape, std::slice::from_ref(final_map), domain)
}

/// Instance-stage loss: mean BCE of per-proposal probabilities against the
/// domain label. An image with no proposals contributes zero (with a logged
/// warning) rather than failing; early-training RPNs can produce empty sets.
pub fn instance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &[Tensor<T>],
    domain: Domain,
) -> Result<Tensor<T>> {
    if probs.is_empty() {
        log::warn!("instance_loss: no proposals; contributing 0");
        return Ok(Tensor::scalar(T::zero()));
    }
    let refs: Vec<&Tensor<T>> = probs.iter().collect();
    let stacked = tape.concat(&refs)?;
    let bce = bce_with_constant_label(tape, &stacked, domain.is_target())?;
    Ok(tape.mean(&bce))
}

/// Consistency regularizer: squared difference between the image-level mean
/// patch probability (final level only) and each instance probability,
/// averaged over proposals. Both inputs already sit downstream of their own
/// reversal nodes; no extra reversal is inserted here.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    final_map: &Tensor<T>,
    probs: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if probs.is_empty() {
        return Ok(Tensor::scalar(T::zero()));
    }
    let map_mean = tape.mean(final_map);
    let mut sq_terms = Vec::with_capacity(probs.len());
    for p in probs {
        // (p - m)^2 == (m - p)^2; p goes first so the result keeps p's shape
        let d = tape.sub(p, &map_mean)?;
        sq_terms.push(tape.mul(&d, &d)?);
    }
    let refs: Vec<&Tensor<T>> = sq_terms.iter().collect();
    let stacked = tape.concat(&refs)?;
    Ok(tape.mean(&stacked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn placement_rule() {
        assert_eq!(place_classifiers(4, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(place_classifiers(1, 4).unwrap(), vec![4]);
        assert_eq!(place_classifiers(2, 4).unwrap(), vec![1, 4]);
        assert_eq!(place_classifiers(3, 4).unwrap(), vec![1, 3, 4]);
        assert!(place_classifiers(0, 4).is_err());
        assert!(place_classifiers(5, 4).is_err());
    }

    #[test]
    fn symmetric_probabilities_give_ln2() {
        let mut tape = Tape::new();
        let a = Tensor::full(vec![1, 1, 1], 0.5f64);
        let b = Tensor::full(vec![1, 1, 1], 0.5f64);
        let loss = multi_level_loss(&mut tape, &[a, b], Domain::Target).unwrap();
        assert!((loss.item() - LN_2).abs() < 1e-12);

        let map = Tensor::full(vec![1, 2, 2], 0.5f64);
        let img = image_patch_loss(&mut tape, &map, Domain::Source).unwrap();
        assert!((img.item() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_probabilities_give_near_zero_loss() {
        let mut tape = Tape::new();
        let map = Tensor::full(vec![1, 4, 4], 1.0f64);
        let loss = multi_level_loss(&mut tape, &[map], Domain::Target).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn single_level_multi_equals_image_patch_loss_exactly() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| 0.05 + 0.055 * i as f64).collect();
        let map = Tensor::from_vec(vec![1, 4, 4], vals).unwrap();
        for domain in [Domain::Source, Domain::Target] {
            let a = multi_level_loss(&mut tape, std::slice::from_ref(&map), domain).unwrap();
            let b = image_patch_loss(&mut tape, &map, domain).unwrap();
            assert_eq!(a.item(), b.item());
        }
    }

    #[test]
    fn instance_loss_basics() {
        let mut tape = Tape::new();
        let p = Tensor::from_vec(vec![1], vec![0.5f64]).unwrap();
        let l = instance_loss(&mut tape, &[p], Domain::Target).unwrap();
        assert!((l.item() - LN_2).abs() < 1e-12);

        let saturated = Tensor::from_vec(vec![1], vec![1.0f64]).unwrap();
        let l0 = instance_loss(&mut tape, &[saturated], Domain::Target).unwrap();
        assert!(l0.item() < 1e-6);

        let empty = instance_loss::<f64>(&mut tape, &[], Domain::Source).unwrap();
        assert_eq!(empty.item(), 0.0);
    }

    #[test]
    fn consistency_loss_arithmetic() {
        let mut tape = Tape::new();
        let map = Tensor::full(vec![1, 2, 2], 0.6f64);
        let p = Tensor::from_vec(vec![1], vec![0.4f64]).unwrap();
        let l = consistency_loss(&mut tape, &map, &[p]).unwrap();
        assert!((l.item() - 0.04).abs() < 1e-12);

        let matching = Tensor::from_vec(vec![1], vec![0.6f64]).unwrap();
        let l0 = consistency_loss(&mut tape, &map, &[matching]).unwrap();
        assert!(l0.item().abs() < 1e-15);

        let empty = consistency_loss::<f64>(&mut tape, &map, &[]).unwrap();
        assert_eq!(empty.item(), 0.0);
    }

    #[test]
    fn zero_weight_classifier_outputs_half_everywhere() {
        let mut store = ParamStore::<f64>::new();
        let c = PatchClassifier::register(&mut store, 4, 1);
        for id in 0..store.len() {
            let p = store.get_mut(id);
            let shape = p.value.shape().to_vec();
            let n = p.value.numel();
            p.value = Tensor::from_vec(shape, vec![0.0; n]).unwrap();
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let feat = Tensor::from_vec(vec![64, 4, 4], (0..64 * 16).map(|i| i as f64 * 0.01).collect()).unwrap();
        let map = c.forward(&mut tape, &params, &feat).unwrap();
        assert_eq!(map.shape(), &[1, 4, 4]);
        assert!(map.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn patch_map_preserves_spatial_extent_per_level() {
        let mut store = ParamStore::<f32>::new();
        let branches = AdaptationBranches::register(&mut store, 4, 9).unwrap();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        for (c, &ch) in branches.patch.iter().zip(BACKBONE_CHANNELS.iter()) {
            let hw = 64 >> c.level;
            let feat = Tensor::full(vec![ch, hw, hw], 0.1f32);
            let map = c.forward(&mut tape, &params, &feat).unwrap();
            assert_eq!(map.shape(), &[1, hw, hw]);
            assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
