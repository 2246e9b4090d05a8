//! Raw feature export as CSV, for offline embedding plots.

use std::io::Write;

use crate::autodiff::{Scalar, Tape};
use crate::data::{Dataset, Split};
use crate::detector::{
    anchor_grid, propose, Detector, BACKBONE_CHANNELS, NUM_LEVELS, POST_NMS_TOP, PRE_NMS_TOP,
    PROPOSAL_NMS_IOU, ROI_POOL_SIZE, ROI_STRIDE,
};
use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::optim::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Per-location channel vectors of pyramid level k (1-based).
    PatchLevel(usize),
    /// Pooled, flattened per-proposal features plus the predicted class.
    Instance,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Result<FeatureKind> {
        if s == "instance" {
            return Ok(FeatureKind::Instance);
        }
        if let Some(k) = s.strip_prefix("patch_level_") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("bad feature kind {s:?}")))?;
            if (1..=NUM_LEVELS).contains(&k) {
                return Ok(FeatureKind::PatchLevel(k));
            }
            return Err(Error::invalid(format!(
                "patch level must be in [1, {NUM_LEVELS}], got {k}"
            )));
        }
        Err(Error::invalid(format!(
            "feature kind must be patch_level_<k> or instance, got {s:?}"
        )))
    }
}

/// Write one CSV row per location (patch) or per proposal (instance) over a
/// whole split. Returns the number of data rows written.
pub fn dump_features<W: Write>(
    store: &ParamStore<f32>,
    detector: &Detector,
    dataset: &Dataset,
    split: Split,
    kind: FeatureKind,
    out: &mut W,
) -> Result<usize> {
    let n = dataset.len(split);
    if n == 0 {
        return Err(Error::Dataset(format!("split {} is empty", split.name())));
    }
    let mut rows = 0usize;
    match kind {
        FeatureKind::PatchLevel(k) => {
            let channels = BACKBONE_CHANNELS[k - 1];
            write!(out, "scene_id,domain,u,v")?;
            for c in 0..channels {
                write!(out, ",c{c}")?;
            }
            writeln!(out)?;
            for i in 0..n {
                let scene = dataset.load_eval(split, i)?;
                let mut tape = Tape::inference();
                let params = store.bind_frozen();
                let pyramid = detector
                    .backbone
                    .forward(&mut tape, &params, &scene.image.to_tensor())?;
                let level = pyramid.level(k);
                let hw = level.shape()[1];
                let data = level.data();
                for u in 0..hw {
                    for v in 0..hw {
                        write!(out, "{},{},{},{}", scene.scene_id, scene.domain.value(), u, v)?;
                        for c in 0..channels {
                            write!(out, ",{}", data[(c * hw + u) * hw + v])?;
                        }
                        writeln!(out)?;
                        rows += 1;
                    }
                }
            }
        }
        FeatureKind::Instance => {
            let feat_len = BACKBONE_CHANNELS[NUM_LEVELS - 1] * ROI_POOL_SIZE * ROI_POOL_SIZE;
            write!(out, "scene_id,domain,proposal,pred_class")?;
            for f in 0..feat_len {
                write!(out, ",f{f}")?;
            }
            writeln!(out)?;
            for i in 0..n {
                let scene = dataset.load_eval(split, i)?;
                let mut tape = Tape::inference();
                let params = store.bind_frozen();
                let pyramid = detector
                    .backbone
                    .forward(&mut tape, &params, &scene.image.to_tensor())?;
                let rpn_out = detector.rpn.forward(&mut tape, &params, pyramid.final_level())?;
                let logits: Vec<f64> = rpn_out.logits.data().iter().map(|v| v.as_f64()).collect();
                let deltas: Vec<f64> = rpn_out.deltas.data().iter().map(|v| v.as_f64()).collect();
                let proposals = propose(
                    &logits,
                    &deltas,
                    &anchor_grid(),
                    PRE_NMS_TOP,
                    PROPOSAL_NMS_IOU,
                    POST_NMS_TOP,
                );
                for (j, p) in proposals.iter().enumerate() {
                    let pooled =
                        tape.roi_pool(pyramid.final_level(), p.rect.as_roi(), ROI_STRIDE, ROI_POOL_SIZE)?;
                    let head_out = detector.head.forward(&mut tape, &params, &pooled)?;
                    let probs = softmax(&mut tape, &head_out.class_logits)?;
                    let pred = probs
                        .data()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(c, _)| c)
                        .unwrap();
                    write!(
                        out,
                        "{},{},{},{}",
                        scene.scene_id,
                        scene.domain.value(),
                        j,
                        pred
                    )?;
                    for v in pooled.data() {
                        write!(out, ",{v}")?;
                    }
                    writeln!(out)?;
                    rows += 1;
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_kind_parsing() {
        assert_eq!(FeatureKind::parse("instance").unwrap(), FeatureKind::Instance);
        assert_eq!(FeatureKind::parse("patch_level_4").unwrap(), FeatureKind::PatchLevel(4));
        assert!(FeatureKind::parse("patch_level_9").is_err());
        assert!(FeatureKind::parse("bogus").is_err());
    }
}
