use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::Anchor;
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::eval::synthetic_difficulty;
use crate::ingest::{build_manifest, HybridManifest, RawAnnotation, RawDataset, RawImage};
use crate::label_space::{ConflictMatrix, DatasetId, HybridLabelSpace, MergeConfig};

pub const TEST_DATASET: &str = "test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthWorldConfig {
    pub canvas_width: f64,
    pub canvas_height: f64,
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    /// Inclusive range of objects of each class per image.
    pub objects_per_class: (usize, usize),
    /// Inclusive range of the object's longer side.
    pub object_size: (f64, f64),
    /// Inclusive range of height / width.
    pub aspect: (f64, f64),
    pub signature_noise: f64,
    pub background_noise: f64,
    pub images_per_dataset: usize,
    pub test_images: usize,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            canvas_width: 128.0,
            canvas_height: 128.0,
            class_names: vec!["class0".into(), "class1".into()],
            feature_dim: 16,
            objects_per_class: (1, 2),
            object_size: (20.0, 48.0),
            aspect: (0.8, 1.25),
            signature_noise: 0.3,
            background_noise: 0.3,
            images_per_dataset: 48,
            test_images: 48,
            seed: 0,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.canvas_width > 0.0 && self.canvas_height > 0.0) {
            return bad("canvas size must be positive");
        }
        if self.feature_dim == 0 || self.class_names.is_empty() {
            return bad("feature_dim and class count must be positive");
        }
        if self.objects_per_class.0 > self.objects_per_class.1 {
            return bad("objects_per_class range is inverted");
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi <= self.canvas_width.min(self.canvas_height)) {
            return bad("object_size must satisfy 0 < min <= max <= canvas");
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return bad("aspect range must be positive and ordered");
        }
        if !(self.signature_noise >= 0.0 && self.background_noise >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        Ok(())
    }
}

/// One label a dataset attaches to a world class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub class: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPolicy {
    pub dataset: DatasetId,
    pub labels: Vec<ClassLabel>,
}

/// Which world classes each synthetic dataset annotates, and under which name.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelingPolicy {
    pub datasets: Vec<DatasetPolicy>,
}

impl LabelingPolicy {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut labeled = vec![false; num_classes];
        for d in &self.datasets {
            for l in &d.labels {
                *labeled.get_mut(l.class).ok_or(Error::UnknownClass(l.class))? = true;
            }
        }
        match labeled.iter().position(|&l| !l) {
            Some(c) => Err(Error::InvalidPolicy(c)),
            None => Ok(()),
        }
    }

    /// World class behind a `(dataset, name)` label.
    pub fn world_class(&self, dataset: &DatasetId, name: &str) -> Option<usize> {
        self.datasets
            .iter()
            .find(|d| &d.dataset == dataset)
            .and_then(|d| d.labels.iter().find(|l| l.name == name))
            .map(|l| l.class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BBox,
    pub signature: Vec<f64>,
}

/// Ground truth of one synthetic image, labeled or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: SynthWorldConfig,
    pub policy: LabelingPolicy,
    pub signatures: Vec<Vec<f64>>,
    /// Keyed by image uri (`synth://<dataset>/<index>`).
    pub scenes: BTreeMap<String, Scene>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn scene_uri(dataset: &str, index: usize) -> String {
    format!("synth://{dataset}/{index}")
}

fn random_scene(cfg: &SynthWorldConfig, signatures: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Scene {
    let mut objects = Vec::new();
    for (class, signature) in signatures.iter().enumerate() {
        let n = rng.gen_range(cfg.objects_per_class.0..=cfg.objects_per_class.1);
        for _ in 0..n {
            let side = rng.gen_range(cfg.object_size.0..=cfg.object_size.1);
            let aspect = rng.gen_range(cfg.aspect.0..=cfg.aspect.1);
            let (w, h) = if aspect >= 1.0 { (side / aspect, side) } else { (side, side * aspect) };
            let x = rng.gen_range(0.0..=(cfg.canvas_width - w));
            let y = rng.gen_range(0.0..=(cfg.canvas_height - h));
            let signature = signature.iter().map(|&e| e + cfg.signature_noise * normal(rng)).collect();
            objects.push(SceneObject { class, bbox: BBox { x, y, w, h }, signature });
        }
    }
    Scene { width: cfg.canvas_width, height: cfg.canvas_height, objects, noise_seed: rng.gen() }
}

/// Generates every scene of the world: `images_per_dataset` per policy
/// dataset plus `test_images` under the `test` prefix. Every scene holds
/// objects of all classes regardless of what its dataset labels.
pub fn generate_world(cfg: &SynthWorldConfig, policy: &LabelingPolicy) -> Result<SynthWorld> {
    cfg.validate()?;
    policy.validate(cfg.class_names.len())?;
    if policy.datasets.iter().any(|d| d.dataset.as_str() == TEST_DATASET) {
        return Err(Error::InvalidParameter(format!("dataset id {TEST_DATASET:?} is reserved")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures: Vec<Vec<f64>> = (0..cfg.class_names.len())
        .map(|_| (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    for i in 0..signatures.len() {
        for j in 0..i {
            if signatures[i] == signatures[j] {
                return Err(Error::InvalidParameter("class signatures collide".into()));
            }
        }
    }
    let mut scenes = BTreeMap::new();
    for d in &policy.datasets {
        for i in 0..cfg.images_per_dataset {
            scenes.insert(scene_uri(d.dataset.as_str(), i), random_scene(cfg, &signatures, &mut rng));
        }
    }
    for i in 0..cfg.test_images {
        scenes.insert(scene_uri(TEST_DATASET, i), random_scene(cfg, &signatures, &mut rng));
    }
    Ok(SynthWorld { config: cfg.clone(), policy: policy.clone(), signatures, scenes })
}

impl SynthWorld {
    fn records(&self, dataset: &str, labels: impl Fn(usize) -> Option<String>) -> Vec<RawImage> {
        let prefix = format!("synth://{dataset}/");
        let mut images: Vec<RawImage> = self
            .scenes
            .iter()
            .filter_map(|(uri, scene)| {
                let index: u64 = uri.strip_prefix(&prefix)?.parse().ok()?;
                let annotations = scene
                    .objects
                    .iter()
                    .filter_map(|o| {
                        labels(o.class).map(|class_name| RawAnnotation {
                            class_name,
                            bbox: o.bbox,
                            ignore: false,
                            difficulty: Some(synthetic_difficulty(o.bbox.h, scene.height)),
                        })
                    })
                    .collect();
                Some(RawImage { original_id: index, uri: uri.clone(), width: scene.width, height: scene.height, annotations })
            })
            .collect();
        images.sort_by_key(|i| i.original_id);
        images
    }

    /// Raw records of each training dataset, carrying only labeled classes.
    pub fn raw_datasets(&self) -> Vec<RawDataset> {
        self.policy
            .datasets
            .iter()
            .map(|d| RawDataset {
                dataset: d.dataset.clone(),
                classes: d.labels.iter().map(|l| l.name.clone()).collect(),
                images: self.records(d.dataset.as_str(), |c| {
                    d.labels.iter().find(|l| l.class == c).map(|l| l.name.clone())
                }),
            })
            .collect()
    }

    /// Fully labeled held-out images, classes named by the world's class names.
    pub fn test_raw(&self) -> RawDataset {
        RawDataset {
            dataset: DatasetId::new(TEST_DATASET).expect("valid id"),
            classes: self.config.class_names.clone(),
            images: self.records(TEST_DATASET, |c| Some(self.config.class_names[c].clone())),
        }
    }

    /// Hybrid training manifest under the given merge/conflict config.
    pub fn manifest(&self, merge: &MergeConfig) -> Result<HybridManifest> {
        let raw = self.raw_datasets();
        let sources: Vec<_> = raw.iter().map(RawDataset::source_list).collect();
        let (space, conflicts) = merge.build(&sources)?;
        build_manifest(&raw, &space, &conflicts)
    }

    /// Test manifest whose class indices are world class indices.
    pub fn test_manifest(&self) -> Result<HybridManifest> {
        let raw = self.test_raw();
        let space = HybridLabelSpace::build(&[raw.source_list()], &[])?;
        let conflicts = ConflictMatrix::new(space.datasets().to_vec(), Default::default());
        build_manifest(&[raw], &space, &conflicts)
    }

    /// World class of each hybrid class (through any of its sources).
    pub fn world_classes_of(&self, space: &HybridLabelSpace) -> Vec<Option<usize>> {
        space
            .classes()
            .iter()
            .map(|c| c.sources.iter().find_map(|s| self.policy.world_class(&s.dataset, &s.name)))
            .collect()
    }

    pub fn scene(&self, uri: &str) -> Result<&Scene> {
        self.scenes.get(uri).ok_or_else(|| Error::MalformedDocument(format!("no synthetic scene for {uri:?}")))
    }

    /// Overlap-pooled features, row-major `anchors x feature_dim`:
    /// `sum over objects of IoU(anchor, object) * signature + background noise`.
    pub fn features(&self, uri: &str, anchors: &[Anchor]) -> Result<Vec<f64>> {
        let scene = self.scene(uri)?;
        let f = self.config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        let mut out = Vec::with_capacity(anchors.len() * f);
        for anchor in anchors {
            let start = out.len();
            out.extend((0..f).map(|_| self.config.background_noise * normal(&mut rng)));
            for obj in &scene.objects {
                let overlap = iou(anchor, &obj.bbox);
                if overlap > 0.0 {
                    for (v, s) in out[start..].iter_mut().zip(&obj.signature) {
                        *v += overlap * s;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
