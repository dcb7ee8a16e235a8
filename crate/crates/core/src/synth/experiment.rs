use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::head::DetectorHead;
use super::infer::{infer, InferConfig};
use super::trainer::{train, TrainConfig, TrainMode, TrainOutput};
use super::world::{generate_world, ClassLabel, DatasetPolicy, LabelingPolicy, SynthWorld, SynthWorldConfig};
use crate::anchors::{generate_anchors, AnchorConfig};
use crate::error::{Error, Result};
use crate::eval::{coco_report, Detection};
use crate::ingest::HybridManifest;
use crate::label_space::{DatasetId, MergeConfig, SourceRef};
use crate::loss::LossConfig;

/// Everything a synthetic run needs; the training config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: SynthWorldConfig,
    pub policy: LabelingPolicy,
    pub merge: MergeConfig,
    pub anchors: AnchorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

/// Anchors sized for the 128x128 synthetic canvas: strides 8 and 16, square,
/// three scales.
pub fn synth_anchor_config() -> AnchorConfig {
    AnchorConfig { levels: vec![3, 4], ratios: vec![1.0], scales: vec![2.0, 3.0, 4.0], ..AnchorConfig::default() }
}

fn dataset(id: &str) -> DatasetId {
    DatasetId::new(id).expect("valid id")
}

fn label(class: usize, name: &str) -> ClassLabel {
    ClassLabel { class, name: name.into() }
}

/// Two datasets with cross-conflicting partial labels: `a` labels class 0
/// only, `b` labels class 1 only.
pub fn split_policy() -> LabelingPolicy {
    LabelingPolicy {
        datasets: vec![
            DatasetPolicy { dataset: dataset("a"), labels: vec![label(0, "class0")] },
            DatasetPolicy { dataset: dataset("b"), labels: vec![label(1, "class1")] },
        ],
    }
}

/// Both datasets label class 0, under the names `person` and `pedestrian`;
/// `b` also labels class 1.
pub fn synonym_policy() -> LabelingPolicy {
    LabelingPolicy {
        datasets: vec![
            DatasetPolicy { dataset: dataset("a"), labels: vec![label(0, "person")] },
            DatasetPolicy { dataset: dataset("b"), labels: vec![label(0, "pedestrian"), label(1, "class1")] },
        ],
    }
}

/// Merge config joining `a/person` and `b/pedestrian`.
pub fn synonym_merge() -> MergeConfig {
    let members = vec![SourceRef::new("a", "person").expect("valid"), SourceRef::new("b", "pedestrian").expect("valid")];
    MergeConfig { merges: vec![crate::label_space::MergeEntry::Members(members)], ..MergeConfig::default() }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: SynthWorldConfig::default(),
            policy: split_policy(),
            merge: MergeConfig::default(),
            anchors: synth_anchor_config(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.policy.validate(self.world.class_names.len())?;
        self.anchors.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.infer.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Trained parameters plus the fingerprint of the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub mode: TrainMode,
    pub head: DetectorHead,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.head.validate()?;
        Ok(ckpt)
    }
}

/// Runs inference on every image of `manifest`, in manifest order.
pub fn detect_manifest(
    head: &DetectorHead,
    world: &SynthWorld,
    manifest: &HybridManifest,
    anchor_cfg: &AnchorConfig,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for img in &manifest.images {
        let anchors = generate_anchors(anchor_cfg, img.width, img.height)?;
        let features = world.features(&img.uri, &anchors)?;
        out.extend(infer(head, &features, &anchors, img.image_id, (img.width, img.height), cfg)?);
    }
    Ok(out)
}

/// AP50 of one hybrid class on the fully labeled test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub hybrid_class: usize,
    pub name: String,
    pub world_class: usize,
    pub ap50: f64,
}

/// Scores each hybrid class's detections against the world class it stands for.
pub fn score_hybrid_classes(
    detections: &[Detection],
    world: &SynthWorld,
    train_manifest: &HybridManifest,
    test_manifest: &HybridManifest,
) -> Result<Vec<ClassScore>> {
    let mut scores = Vec::new();
    for (h, world_class) in world.world_classes_of(&train_manifest.label_space).into_iter().enumerate() {
        let Some(w) = world_class else { continue };
        let dets: Vec<Detection> =
            detections.iter().filter(|d| d.class == h).map(|d| Detection { class: w, ..*d }).collect();
        let report = coco_report(&dets, test_manifest)?;
        let ap50 = report.per_class[w].ap50.unwrap_or(0.0);
        let name = train_manifest.label_space.class(h)?.canonical_name.clone();
        scores.push(ClassScore { hybrid_class: h, name, world_class: w, ap50 });
    }
    Ok(scores)
}

/// Output of one end-to-end synthetic run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub train: TrainOutput,
    pub scores: Vec<ClassScore>,
}

impl RunResult {
    /// Best AP50 among hybrid classes standing for `world_class`.
    pub fn world_ap50(&self, world_class: usize) -> Option<f64> {
        self.scores.iter().filter(|s| s.world_class == world_class).map(|s| s.ap50).reduce(f64::max)
    }

    pub fn class_ap50(&self, name: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.name == name).map(|s| s.ap50)
    }
}

/// Generates the world, trains in `mode` and scores on the test split.
pub fn run(cfg: &ExperimentConfig, mode: &TrainMode) -> Result<RunResult> {
    cfg.validate()?;
    let world = generate_world(&cfg.world, &cfg.policy)?;
    run_on(&world, cfg, mode)
}

pub fn run_on(world: &SynthWorld, cfg: &ExperimentConfig, mode: &TrainMode) -> Result<RunResult> {
    let manifest = world.manifest(&cfg.merge)?;
    let test = world.test_manifest()?;
    let out = train(&manifest, world, &cfg.anchors, &cfg.loss, &cfg.train, mode)?;
    let dets = detect_manifest(&out.head, world, &test, &cfg.anchors, &cfg.infer)?;
    let scores = score_hybrid_classes(&dets, world, &manifest, &test)?;
    if scores.is_empty() {
        return Err(Error::InvalidParameter("no hybrid class maps to a world class".into()));
    }
    Ok(RunResult { train: out, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_config() {
        let a = ExperimentConfig::default();
        assert_eq!(a.fingerprint(), ExperimentConfig::default().fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        assert_ne!(a.fingerprint(), a.clone().with_seed(9).fingerprint());
    }

    #[test]
    fn config_round_trips_through_toml_shaped_json() {
        let cfg = ExperimentConfig::default().with_seed(5);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"train":{"total_steps":7}}"#).unwrap();
        assert_eq!(partial.train.total_steps, 7);
        assert_eq!(partial.world, SynthWorldConfig::default());
    }

    #[test]
    fn synonym_world_merges_to_one_class() {
        let cfg = ExperimentConfig { policy: synonym_policy(), merge: synonym_merge(), ..Default::default() };
        let world = generate_world(&SynthWorldConfig { images_per_dataset: 2, test_images: 1, ..cfg.world.clone() }, &cfg.policy).unwrap();
        let merged = world.manifest(&cfg.merge).unwrap();
        assert_eq!(merged.label_space.num_classes(), 2);
        let unmerged = world.manifest(&MergeConfig::default()).unwrap();
        assert_eq!(unmerged.label_space.num_classes(), 3);
        assert_eq!(world.world_classes_of(&unmerged.label_space), vec![Some(0), Some(0), Some(1)]);
    }
}
