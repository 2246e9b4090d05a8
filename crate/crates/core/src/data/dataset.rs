//! On-disk datasets: scene files, the manifest, and leak-guarded loading.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{
    generate_scene_with_fog, BoxAnnotation, Domain, Image, Scene, UnlabeledScene,
    DEFAULT_FOG_INTENSITY, IMAGE_CHANNELS, IMAGE_SIZE,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    SourceTrain,
    TargetTrain,
    SourceVal,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::TargetTrain,
        Split::SourceVal,
        Split::TargetVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::SourceVal => "source_val",
            Split::TargetVal => "target_val",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceVal => Domain::Source,
            Split::TargetTrain | Split::TargetVal => Domain::Target,
        }
    }
}

/// Generation parameters for one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub master_seed: u64,
    pub fog_intensity: f64,
    pub source_train: usize,
    pub target_train: usize,
    pub source_val: usize,
    pub target_val: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            master_seed: 0,
            fog_intensity: DEFAULT_FOG_INTENSITY,
            source_train: 400,
            target_train: 400,
            source_val: 100,
            target_val: 100,
        }
    }
}

impl GenConfig {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::SourceVal => self.source_val,
            Split::TargetVal => self.target_val,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub fog_intensity: f64,
    /// Split name to relative scene-file paths, in scene order.
    pub splits: BTreeMap<String, Vec<String>>,
}

// ── Scene file schema ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SceneFile {
    scene_id: u64,
    domain: u8,
    channels: usize,
    height: usize,
    width: usize,
    /// Base-64 of the little-endian f32 pixel grid, row-major (C, H, W).
    image_b64: String,
    annotations: Vec<BoxAnnotation>,
}

fn encode_scene(scene: &Scene) -> String {
    let mut bytes = Vec::with_capacity(scene.image.pixels.len() * 4);
    for v in &scene.image.pixels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let file = SceneFile {
        scene_id: scene.scene_id,
        domain: scene.domain.value(),
        channels: IMAGE_CHANNELS,
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        image_b64: BASE64.encode(bytes),
        annotations: scene.annotations.clone(),
    };
    serde_json::to_string(&file).expect("scene serializes")
}

fn decode_scene(text: &str, path: &Path) -> Result<Scene> {
    let file: SceneFile = serde_json::from_str(text)?;
    if file.channels != IMAGE_CHANNELS || file.height != IMAGE_SIZE || file.width != IMAGE_SIZE {
        return Err(Error::Dataset(format!(
            "{}: unexpected image dims {}x{}x{}",
            path.display(),
            file.channels,
            file.height,
            file.width
        )));
    }
    let bytes = BASE64
        .decode(file.image_b64.as_bytes())
        .map_err(|e| Error::Dataset(format!("{}: bad image payload: {e}", path.display())))?;
    let expect = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE * 4;
    if bytes.len() != expect {
        return Err(Error::Dataset(format!(
            "{}: image payload has {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Scene {
        scene_id: file.scene_id,
        domain: Domain::from_value(file.domain)?,
        image: Image { pixels },
        annotations: file.annotations,
    })
}

// ── Generation ───────────────────────────────────────────────────────

const OBJECT_COUNT_TAG: u64 = 0x0b;

/// Write the four splits plus `manifest.json` under `out_dir`. Each scene's
/// RNG stream derives from (master_seed, scene_id), so regeneration is
/// byte-identical and embarrassingly parallel.
pub fn make_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    for split in Split::ALL {
        if cfg.count(split) == 0 {
            return Err(Error::invalid(format!("{} count must be > 0", split.name())));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut splits = BTreeMap::new();
    let mut scene_id: u64 = 0;
    for split in Split::ALL {
        let split_dir = out_dir.join(split.name());
        fs::create_dir_all(&split_dir)?;
        let mut paths = Vec::with_capacity(cfg.count(split));
        for _ in 0..cfg.count(split) {
            let seed = rng::derive(cfg.master_seed, &[scene_id]);
            let num_objects =
                1 + (rng::derive(cfg.master_seed, &[scene_id, OBJECT_COUNT_TAG]) % 3) as usize;
            let mut scene =
                generate_scene_with_fog(seed, split.domain(), num_objects, cfg.fog_intensity)?;
            scene.scene_id = scene_id;
            let rel = format!("{}/scene_{:06}.json", split.name(), scene_id);
            fs::write(out_dir.join(&rel), encode_scene(&scene))?;
            paths.push(rel);
            scene_id += 1;
        }
        splits.insert(split.name().to_string(), paths);
    }
    let manifest = Manifest {
        master_seed: cfg.master_seed,
        fog_intensity: cfg.fog_intensity,
        splits,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

// ── Loading ──────────────────────────────────────────────────────────

/// A dataset rooted at a directory with a manifest.
///
/// Loading is the annotation-leak guard: the training path obtains target
/// scenes only through [`Dataset::load_train_target`], which strips
/// annotations before returning. Evaluation uses [`Dataset::load_eval`].
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest_path = root.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Dataset(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        for split in Split::ALL {
            if !manifest.splits.contains_key(split.name()) {
                return Err(Error::Dataset(format!(
                    "manifest missing split {:?}",
                    split.name()
                )));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.splits[split.name()].len()
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    fn load_raw(&self, split: Split, index: usize) -> Result<Scene> {
        let paths = &self.manifest.splits[split.name()];
        let rel = paths.get(index).ok_or_else(|| {
            Error::Dataset(format!(
                "index {index} out of range for {} ({} scenes)",
                split.name(),
                paths.len()
            ))
        })?;
        let path = self.root.join(rel);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let scene = decode_scene(&text, &path)?;
        if scene.domain != split.domain() {
            return Err(Error::Dataset(format!(
                "{}: domain label {} does not match split {}",
                path.display(),
                scene.domain.value(),
                split.name()
            )));
        }
        Ok(scene)
    }

    /// Full scene with annotations, for evaluation and feature export.
    pub fn load_eval(&self, split: Split, index: usize) -> Result<Scene> {
        self.load_raw(split, index)
    }

    /// Labeled source-train scene for the detection loss.
    pub fn load_train_source(&self, index: usize) -> Result<Scene> {
        self.load_raw(Split::SourceTrain, index)
    }

    /// Target-train scene with annotations stripped; the training path has
    /// no way to reach target labels through this call.
    pub fn load_train_target(&self, index: usize) -> Result<UnlabeledScene> {
        Ok(self.load_raw(Split::TargetTrain, index)?.strip_annotations())
    }

    /// Cross-check the manifest: every referenced file exists, parses, and
    /// carries the split's domain label.
    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            for i in 0..self.len(split) {
                self.load_raw(split, i)?;
            }
        }
        Ok(())
    }
}
