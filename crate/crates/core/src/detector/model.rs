//! Backbone, RPN head, and ROI head.

use super::anchors::{FINAL_GRID, NUM_ANCHORS};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::data::{IMAGE_CHANNELS, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, LinearLayer};
use crate::optim::{BoundParams, ParamStore};

/// Channels per backbone block.
pub const BACKBONE_CHANNELS: [usize; 4] = [16, 32, 64, 64];
/// Number of backbone blocks, and therefore of pyramid levels.
pub const NUM_LEVELS: usize = BACKBONE_CHANNELS.len();
/// ROI pooling output extent.
pub const ROI_POOL_SIZE: usize = 4;
/// Flattened ROI feature length fed to the heads.
pub const ROI_FEATURE_LEN: usize = BACKBONE_CHANNELS[NUM_LEVELS - 1] * ROI_POOL_SIZE * ROI_POOL_SIZE;
const HEAD_HIDDEN: usize = 128;

/// Ordered feature maps tapped after every backbone block; level k (1-based)
/// has shape (C_k, 64/2^k, 64/2^k).
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Level by 1-based index.
    pub fn level(&self, k: usize) -> &Tensor<T> {
        &self.levels[k - 1]
    }

    pub fn final_level(&self) -> &Tensor<T> {
        self.levels.last().expect("pyramid non-empty")
    }
}

struct Block {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

/// Four blocks of conv3x3/relu/conv3x3/relu/maxpool2x2.
pub struct Backbone {
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, init_seed: u64) -> Self {
        let mut blocks = Vec::with_capacity(NUM_LEVELS);
        let mut c_in = IMAGE_CHANNELS;
        for (i, &c_out) in BACKBONE_CHANNELS.iter().enumerate() {
            let prefix = format!("backbone/block{}", i + 1);
            blocks.push(Block {
                conv1: Conv2dLayer::register(store, &format!("{prefix}/conv1"), c_out, c_in, 3, 1, 1, init_seed),
                conv2: Conv2dLayer::register(store, &format!("{prefix}/conv2"), c_out, c_out, 3, 1, 1, init_seed),
            });
            c_in = c_out;
        }
        Backbone { blocks }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        image: &Tensor<T>,
    ) -> Result<FeaturePyramid<T>> {
        if image.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape(
                "backbone",
                format!(
                    "image must be ({IMAGE_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}), got {:?}",
                    image.shape()
                ),
            ));
        }
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut x = image.clone();
        for block in &self.blocks {
            let c1 = block.conv1.forward(tape, params, &x)?;
            let r1 = tape.relu(&c1);
            let c2 = block.conv2.forward(tape, params, &r1)?;
            let r2 = tape.relu(&c2);
            x = tape.maxpool2x2(&r2)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

/// RPN outputs: flat per-anchor objectness logits (48,) and box deltas
/// (192,), in `anchor_grid()` order (see `delta_flat_index`).
pub struct RpnOut<T> {
    pub logits: Tensor<T>,
    pub deltas: Tensor<T>,
}

pub struct Rpn {
    conv: Conv2dLayer,
    cls: Conv2dLayer,
    reg: Conv2dLayer,
}

impl Rpn {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, init_seed: u64) -> Self {
        let c = BACKBONE_CHANNELS[NUM_LEVELS - 1];
        let n_scales = super::anchors::ANCHOR_SIDES.len();
        Rpn {
            conv: Conv2dLayer::register(store, "rpn/conv", c, c, 3, 1, 1, init_seed),
            cls: Conv2dLayer::register(store, "rpn/cls", n_scales, c, 1, 1, 0, init_seed),
            reg: Conv2dLayer::register(store, "rpn/reg", n_scales * 4, c, 1, 1, 0, init_seed),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        final_level: &Tensor<T>,
    ) -> Result<RpnOut<T>> {
        let expect = [BACKBONE_CHANNELS[NUM_LEVELS - 1], FINAL_GRID, FINAL_GRID];
        if final_level.shape() != expect {
            return Err(Error::shape(
                "rpn",
                format!("expected final level {:?}, got {:?}", expect, final_level.shape()),
            ));
        }
        let c = self.conv.forward(tape, params, final_level)?;
        let h = tape.relu(&c);
        let logits_map = self.cls.forward(tape, params, &h)?;
        let deltas_map = self.reg.forward(tape, params, &h)?;
        let logits = tape.flatten(&logits_map);
        let deltas = tape.flatten(&deltas_map);
        debug_assert_eq!(logits.numel(), NUM_ANCHORS);
        debug_assert_eq!(deltas.numel(), NUM_ANCHORS * 4);
        Ok(RpnOut { logits, deltas })
    }
}

/// Per-ROI head outputs: class logits over 3 foreground classes plus
/// background (last index), and per-foreground-class box deltas.
pub struct HeadOut<T> {
    pub class_logits: Tensor<T>,
    pub deltas: Tensor<T>,
}

pub struct RoiHead {
    fc1: LinearLayer,
    fc2: LinearLayer,
    cls: LinearLayer,
    reg: LinearLayer,
}

impl RoiHead {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, init_seed: u64) -> Self {
        RoiHead {
            fc1: LinearLayer::register(store, "head/fc1", HEAD_HIDDEN, ROI_FEATURE_LEN, init_seed),
            fc2: LinearLayer::register(store, "head/fc2", HEAD_HIDDEN, HEAD_HIDDEN, init_seed),
            cls: LinearLayer::register(store, "head/cls", NUM_CLASSES + 1, HEAD_HIDDEN, init_seed),
            reg: LinearLayer::register(store, "head/reg", NUM_CLASSES * 4, HEAD_HIDDEN, init_seed),
        }
    }

    /// Forward a pooled (64, 4, 4) ROI feature through the shared trunk and
    /// the two parallel output layers.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams<'_, T>,
        pooled: &Tensor<T>,
    ) -> Result<HeadOut<T>> {
        if pooled.numel() != ROI_FEATURE_LEN {
            return Err(Error::shape(
                "head",
                format!("pooled feature must have {} values, got {:?}", ROI_FEATURE_LEN, pooled.shape()),
            ));
        }
        let flat = tape.flatten(pooled);
        let h1 = self.fc1.forward(tape, params, &flat)?;
        let r1 = tape.relu(&h1);
        let h2 = self.fc2.forward(tape, params, &r1)?;
        let r2 = tape.relu(&h2);
        Ok(HeadOut {
            class_logits: self.cls.forward(tape, params, &r2)?,
            deltas: self.reg.forward(tape, params, &r2)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detector_store() -> (ParamStore<f32>, Backbone, Rpn, RoiHead) {
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, 7);
        let rpn = Rpn::register(&mut store, 7);
        let head = RoiHead::register(&mut store, 7);
        (store, backbone, rpn, head)
    }

    #[test]
    fn pyramid_shapes_halve_per_level() {
        let (store, backbone, _, _) = detector_store();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let image = Tensor::zeros(vec![3, 64, 64]);
        let pyr = backbone.forward(&mut tape, &params, &image).unwrap();
        let expect = [(16, 32), (32, 16), (64, 8), (64, 4)];
        for (level, (c, hw)) in pyr.levels.iter().zip(expect.iter()) {
            assert_eq!(level.shape(), &[*c, *hw, *hw]);
        }
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_pyramid() {
        // biases register at zero; weights are nonzero but conv of a zero
        // image stays zero through relu and pooling
        let (store, backbone, _, _) = detector_store();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let image = Tensor::zeros(vec![3, 64, 64]);
        let pyr = backbone.forward(&mut tape, &params, &image).unwrap();
        for level in &pyr.levels {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let (store, backbone, _, _) = detector_store();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let image = Tensor::zeros(vec![3, 32, 32]);
        assert!(backbone.forward(&mut tape, &params, &image).is_err());
    }

    #[test]
    fn rpn_output_arity() {
        let (store, backbone, rpn, _) = detector_store();
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let image = Tensor::zeros(vec![3, 64, 64]);
        let pyr = backbone.forward(&mut tape, &params, &image).unwrap();
        let out = rpn.forward(&mut tape, &params, pyr.final_level()).unwrap();
        assert_eq!(out.logits.shape(), &[48]);
        assert_eq!(out.deltas.shape(), &[192]);
    }

    #[test]
    fn head_arity_and_zero_weight_uniform_softmax() {
        let mut store = ParamStore::<f32>::new();
        let head = RoiHead::register(&mut store, 3);
        // zero out every head parameter
        for id in 0..store.len() {
            let numel = store.get(id).value.numel();
            let shape = store.get(id).value.shape().to_vec();
            let p = store.get_mut(id);
            p.value = Tensor::from_vec(shape, vec![0.0; numel]).unwrap();
        }
        let mut tape = Tape::inference();
        let params = store.bind_frozen();
        let pooled = Tensor::full(vec![64, 4, 4], 0.3f32);
        let out = head.forward(&mut tape, &params, &pooled).unwrap();
        assert_eq!(out.class_logits.shape(), &[4]);
        assert_eq!(out.deltas.shape(), &[12]);
        let probs = crate::nn::softmax(&mut tape, &out.class_logits).unwrap();
        for v in probs.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }
}
