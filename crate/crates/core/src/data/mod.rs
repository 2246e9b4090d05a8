//! Synthetic paired-domain detection data.
//!
//! Scenes are 3x64x64 float images with axis-aligned box annotations over
//! three shape classes (disk, square, bar). The target domain is the same
//! scene distribution rendered clean and then passed through a fog blend,
//! so the domain shift changes pixels but never geometry.

mod dataset;
mod generate;

pub use dataset::{make_dataset, Dataset, GenConfig, Manifest, Split};
pub use generate::{apply_fog, fog_with_sigma, generate_scene, generate_scene_with_fog, DEFAULT_FOG_INTENSITY};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
/// Shape classes: 0 = disk, 1 = square, 2 = bar.
pub const NUM_CLASSES: usize = 3;
/// Minimum object extent along either axis, in pixels.
pub const MIN_OBJECT_SIZE: f64 = 6.0;

/// Which side of the domain shift a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// 0 = source, 1 = target; 1 means target because classifier outputs are
    /// the probability of belonging to the target domain.
    pub fn value(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_value(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            other => Err(Error::invalid(format!("domain label must be 0 or 1, got {other}"))),
        }
    }

    pub fn is_target(self) -> bool {
        matches!(self, Domain::Target)
    }
}

/// Ground-truth box with a class label. Coordinates are continuous pixel
/// positions within `[0, IMAGE_SIZE]`, quantized to 1/256 px by the
/// generator so that mirroring is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl BoxAnnotation {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= IMAGE_SIZE as f64
            && self.y2 <= IMAGE_SIZE as f64
            && self.width() >= MIN_OBJECT_SIZE
            && self.height() >= MIN_OBJECT_SIZE
            && self.class_id < NUM_CLASSES
    }
}

/// Dense (C, H, W) pixel grid with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn zeros() -> Self {
        Image {
            pixels: vec![0.0; IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    #[inline]
    pub fn idx(c: usize, y: usize, x: usize) -> usize {
        (c * IMAGE_SIZE + y) * IMAGE_SIZE + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[Self::idx(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[Self::idx(c, y, x)] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }

    /// As a detector input tensor (3, 64, 64).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            self.pixels.clone(),
        )
        .expect("image dims fixed")
    }

    /// Mirror about the vertical axis.
    pub fn flipped(&self) -> Image {
        let mut out = Image::zeros();
        for c in 0..IMAGE_CHANNELS {
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    out.set(c, y, x, self.get(c, y, IMAGE_SIZE - 1 - x));
                }
            }
        }
        out
    }
}

/// A rendered image with ground truth and a domain label.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub domain: Domain,
    pub image: Image,
    pub annotations: Vec<BoxAnnotation>,
}

/// A scene whose annotations are not available to the caller. The training
/// path receives target-domain scenes only in this form.
#[derive(Clone, Debug)]
pub struct UnlabeledScene {
    pub scene_id: u64,
    pub domain: Domain,
    pub image: Image,
}

impl Scene {
    pub fn strip_annotations(self) -> UnlabeledScene {
        UnlabeledScene {
            scene_id: self.scene_id,
            domain: self.domain,
            image: self.image,
        }
    }
}

/// Mirror the scene about the vertical axis; boxes map to
/// `(W - x2, y1, W - x1, y2)` and class labels are unchanged.
pub fn horizontal_flip(scene: &Scene) -> Scene {
    let w = IMAGE_SIZE as f64;
    Scene {
        scene_id: scene.scene_id,
        domain: scene.domain,
        image: scene.image.flipped(),
        annotations: scene
            .annotations
            .iter()
            .map(|b| BoxAnnotation {
                x1: w - b.x2,
                y1: b.y1,
                x2: w - b.x1,
                y2: b.y2,
                class_id: b.class_id,
            })
            .collect(),
    }
}

/// Image-only flip for unlabeled scenes.
pub fn horizontal_flip_unlabeled(scene: &UnlabeledScene) -> UnlabeledScene {
    UnlabeledScene {
        scene_id: scene.scene_id,
        domain: scene.domain,
        image: scene.image.flipped(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with_box(b: BoxAnnotation) -> Scene {
        let mut image = Image::zeros();
        image.set(0, 3, 5, 0.7);
        Scene {
            scene_id: 1,
            domain: Domain::Source,
            image,
            annotations: vec![b],
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_scene(42, Domain::Source, 3).unwrap();
        let back = horizontal_flip(&horizontal_flip(&s));
        assert_eq!(back, s);
    }

    #[test]
    fn flip_maps_corner_box() {
        let s = scene_with_box(BoxAnnotation {
            x1: 0.0,
            y1: 0.0,
            x2: 10.0,
            y2: 10.0,
            class_id: 0,
        });
        let f = horizontal_flip(&s);
        let b = f.annotations[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (54.0, 0.0, 64.0, 10.0));
    }

    #[test]
    fn centered_box_is_a_flip_fixed_point() {
        let s = scene_with_box(BoxAnnotation {
            x1: 28.0,
            y1: 10.0,
            x2: 36.0,
            y2: 20.0,
            class_id: 2,
        });
        let f = horizontal_flip(&s);
        assert_eq!(f.annotations[0], s.annotations[0]);
    }

    #[test]
    fn domain_values() {
        assert_eq!(Domain::Source.value(), 0);
        assert_eq!(Domain::Target.value(), 1);
        assert!(Domain::from_value(2).is_err());
    }
}
