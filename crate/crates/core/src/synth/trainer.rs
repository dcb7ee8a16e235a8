use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{DetectorHead, HeadGradient, TrainSample};
use crate::anchors::{assign, generate_anchors, regression_targets, AnchorConfig, AnchorState, GtBox};
use crate::error::{Error, Result};
use crate::ingest::{HybridManifest, ImageRecord};
use crate::label_space::DatasetId;
use crate::loss::{build_loss_mask, build_naive_mask, LossConfig};

/// Anything that can produce per-anchor features for a manifest image.
pub trait FeatureSource {
    fn feature_dim(&self) -> usize;
    fn features(&self, uri: &str, anchors: &[crate::anchors::Anchor]) -> Result<Vec<f64>>;
}

impl FeatureSource for super::world::SynthWorld {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn features(&self, uri: &str, anchors: &[crate::anchors::Anchor]) -> Result<Vec<f64>> {
        super::world::SynthWorld::features(self, uri, anchors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Initial foreground probability of every class.
    pub prior: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            decay_steps: vec![600, 850],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            warmup_steps: 50,
            total_steps: 1000,
            prior: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale RetinaNet schedule expressed in steps: lr 0.04 at batch
    /// 32, two warm-up epochs, 20 epochs with x0.1 decays after epochs 10 and 15.
    pub fn retinanet_schedule(steps_per_epoch: usize) -> Self {
        Self {
            base_lr: 0.04,
            decay_steps: vec![10 * steps_per_epoch, 15 * steps_per_epoch],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            warmup_steps: 2 * steps_per_epoch,
            total_steps: 20 * steps_per_epoch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0,1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.decay_factor > 0.0) {
            return bad("weight_decay must be >= 0 and decay_factor > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return bad("prior must be in (0,1)");
        }
        Ok(())
    }

    /// Learning rate at step `step` (0-based): linear warm-up from 0.1 lr,
    /// then step decay.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let decayed = self.base_lr * self.decay_factor.powi(self.decay_steps.iter().filter(|&&s| step >= s).count() as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            decayed * (0.1 + 0.9 * t)
        } else {
            decayed
        }
    }
}

/// How the loss mask is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    DatasetAware,
    NaiveConcat,
    Solo(DatasetId),
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset-aware" => Ok(Self::DatasetAware),
            "naive-concat" => Ok(Self::NaiveConcat),
            _ => match s.strip_prefix("solo:") {
                Some(d) => Ok(Self::Solo(DatasetId::new(d)?)),
                None => Err(Error::InvalidParameter(format!(
                    "unknown mode {s:?} (expected dataset-aware, naive-concat or solo:<dataset>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub head: DetectorHead,
    pub history: Vec<StepRecord>,
}

/// Prepares one image: anchors, assignment, mode-specific mask and targets.
pub fn prepare_sample(
    image: &ImageRecord,
    manifest: &HybridManifest,
    source: &dyn FeatureSource,
    anchor_cfg: &AnchorConfig,
    loss_cfg: &LossConfig,
    mode: &TrainMode,
) -> Result<TrainSample> {
    let anchors = generate_anchors(anchor_cfg, image.width, image.height)?;
    let gts: Vec<GtBox> = image.annotations.iter().map(|a| GtBox { bbox: a.bbox, ignore: a.ignore }).collect();
    let gt_classes: Vec<usize> = image.annotations.iter().map(|a| a.hybrid_class).collect();
    let assignment = assign(&anchors, &gts, anchor_cfg.pos_iou, anchor_cfg.neg_iou)?;
    let k = manifest.label_space.num_classes();
    let mask = match mode {
        TrainMode::NaiveConcat => build_naive_mask(&assignment, &gt_classes, k)?,
        _ => build_loss_mask(
            &assignment,
            &image.dataset,
            &gt_classes,
            &manifest.label_space,
            &manifest.conflicts,
            loss_cfg.cross_positive_as_negative,
        )?,
    };
    let targets = assignment
        .states
        .iter()
        .zip(&anchors)
        .map(|(s, a)| match s {
            AnchorState::Positive(g) => regression_targets(a, &gts[*g].bbox),
            _ => [0.0; 4],
        })
        .collect();
    let features = source.features(&image.uri, &anchors)?;
    if features.len() != anchors.len() * source.feature_dim() {
        return Err(Error::DimensionMismatch(format!("{} features for {} anchors", features.len(), anchors.len())));
    }
    Ok(TrainSample { image_id: image.image_id, features, assignment, mask, targets })
}

/// Prepares every image the mode trains on, in manifest order.
pub fn prepare_samples(
    manifest: &HybridManifest,
    source: &dyn FeatureSource,
    anchor_cfg: &AnchorConfig,
    loss_cfg: &LossConfig,
    mode: &TrainMode,
) -> Result<Vec<TrainSample>> {
    if let TrainMode::Solo(d) = mode {
        if !manifest.label_space.has_dataset(d) {
            return Err(Error::UnknownDataset(d.to_string()));
        }
    }
    manifest
        .images
        .iter()
        .filter(|img| match mode {
            TrainMode::Solo(d) => &img.dataset == d,
            _ => true,
        })
        .map(|img| prepare_sample(img, manifest, source, anchor_cfg, loss_cfg, mode))
        .collect()
}

/// Mean total loss and gradient over a batch, accumulated in batch order.
pub fn batch_loss_and_gradient(
    head: &DetectorHead,
    batch: &[&TrainSample],
    loss_cfg: &LossConfig,
) -> Result<(StepRecord, HeadGradient)> {
    let focal = loss_cfg.focal()?;
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut grad = HeadGradient::zeros_like(head);
    let mut rec = StepRecord { step: 0, lr: 0.0, loss: 0.0, classification: 0.0, regression: 0.0 };
    for sample in batch {
        let (value, g) = head.loss_and_gradient(sample, &focal, loss_cfg.lambda_reg, loss_cfg.smooth_l1_beta)?;
        rec.classification += scale * value.classification;
        rec.regression += scale * value.regression;
        grad.add_scaled(&g, scale);
    }
    rec.loss = rec.classification + loss_cfg.lambda_reg * rec.regression;
    Ok((rec, grad))
}

/// SGD with momentum and weight decay over prepared samples.
///
/// Each epoch visits the samples in a fresh permutation drawn from the seed;
/// the last partial batch of an epoch is dropped unless it is the only one.
pub fn train_samples(
    samples: &[TrainSample],
    num_classes: usize,
    feature_dim: usize,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no training images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = DetectorHead::init(num_classes, feature_dim, cfg.prior, cfg.seed)?;
    let mut velocity = vec![0.0; head.num_parameters()];
    let batch = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        if order.len() < batch {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
        }
        let picked: Vec<&TrainSample> = order.drain(..batch).map(|i| &samples[i]).collect();
        let (mut rec, grad) = match batch_loss_and_gradient(&head, &picked, loss_cfg) {
            Err(Error::NonFiniteLogit { .. }) => return Err(Error::DivergedLoss { step, loss: f64::NAN }),
            other => other?,
        };
        if !rec.loss.is_finite() {
            return Err(Error::DivergedLoss { step, loss: rec.loss });
        }
        let lr = cfg.learning_rate(step);
        for ((p, v), g) in head.parameters_mut().zip(velocity.iter_mut()).zip(grad.values()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
            *p -= lr * *v;
        }
        rec.step = step;
        rec.lr = lr;
        history.push(rec);
    }
    Ok(TrainOutput { head, history })
}

/// Prepares samples for `mode` and trains a head on them.
pub fn train(
    manifest: &HybridManifest,
    source: &dyn FeatureSource,
    anchor_cfg: &AnchorConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mode: &TrainMode,
) -> Result<TrainOutput> {
    anchor_cfg.validate()?;
    let samples = prepare_samples(manifest, source, anchor_cfg, loss_cfg, mode)?;
    train_samples(&samples, manifest.label_space.num_classes(), source.feature_dim(), loss_cfg, cfg)
}

/// Loss history as `step,lr,loss,classification,regression` CSV.
pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,lr,loss,classification,regression\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.loss, r.classification, r.regression));
    }
    out
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub points: usize,
    pub max_relative_error: f64,
}

/// Relative error with a denominator floor so that tiny gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares every parameter's analytic gradient of the mean batch loss
/// with a central difference of step `eps`.
pub fn check_head_gradient(head: &DetectorHead, batch: &[&TrainSample], loss_cfg: &LossConfig, eps: f64) -> Result<GradCheck> {
    let (_, grad) = batch_loss_and_gradient(head, batch, loss_cfg)?;
    let analytic: Vec<f64> = grad.values().copied().collect();
    let mut probe = head.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.parameters().nth(i).expect("index in range");
        let mut eval_at = |v: f64| -> Result<f64> {
            *probe.parameters_mut().nth(i).expect("index in range") = v;
            Ok(batch_loss_and_gradient(&probe, batch, loss_cfg)?.0.loss)
        };
        let numeric = (eval_at(original + eps)? - eval_at(original - eps)?) / (2.0 * eps);
        eval_at(original)?;
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(GradCheck { points: analytic.len(), max_relative_error: worst })
}
