use serde::{Deserialize, Serialize};

use super::head::DetectorHead;
use crate::anchors::{decode, Anchor};
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::eval::{Detection, MAX_DETECTIONS_PER_IMAGE};
use crate::loss::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, max_detections: MAX_DETECTIONS_PER_IMAGE }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!("score threshold {} must be in (0,1)", self.score_threshold)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidParameter(format!("nms iou {} must be in [0,1]", self.nms_iou)));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep input order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Detections of one image: per class, threshold sigmoid scores, decode
/// deltas against anchors, clip to the canvas and suppress; then keep the
/// `max_detections` best across classes.
pub fn infer(
    head: &DetectorHead,
    features: &[f64],
    anchors: &[Anchor],
    image_id: u64,
    canvas: (f64, f64),
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let out = head.forward(features)?;
    if out.deltas.len() != anchors.len() {
        return Err(Error::DimensionMismatch(format!("{} feature rows for {} anchors", out.deltas.len(), anchors.len())));
    }
    let k = head.num_classes;
    let mut all = Vec::new();
    for c in 0..k {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, anchor) in anchors.iter().enumerate() {
            let p = sigmoid(out.logits[i * k + c]);
            if p < cfg.score_threshold {
                continue;
            }
            if let Some(b) = decode(anchor, &out.deltas[i]).clamp(canvas.0, canvas.1) {
                boxes.push(b);
                scores.push(p);
            }
        }
        for i in nms(&boxes, &scores, cfg.nms_iou) {
            all.push(Detection { image_id, class: c, bbox: boxes[i], score: scores[i] });
        }
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(cfg.max_detections);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::regression_targets;

    fn anchor(cx: f64, cy: f64, s: f64) -> Anchor {
        Anchor { cx, cy, w: s, h: s, level: 3 }
    }

    #[test]
    fn nms_exact_duplicate() {
        let b = BBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
        let far = BBox { x: 50.0, ..b };
        assert_eq!(nms(&[b, far, b], &[0.9, 0.8, 0.7], 0.5), vec![0, 1]);
    }

    #[test]
    fn strongly_negative_logits_give_nothing() {
        let mut head = DetectorHead::zeros(2, 1);
        head.b_cls = vec![-30.0, -30.0];
        let dets = infer(&head, &[1.0, 2.0], &[anchor(8.0, 8.0, 16.0), anchor(24.0, 8.0, 16.0)], 1, (64.0, 64.0), &InferConfig::default()).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn decodes_learned_deltas() {
        let a = anchor(20.0, 20.0, 16.0);
        let gt = BBox { x: 10.0, y: 14.0, w: 22.0, h: 12.0 };
        let t = regression_targets(&a, &gt);
        let mut head = DetectorHead::zeros(1, 1);
        head.b_cls = vec![3.0];
        head.b_reg = t;
        let dets = infer(&head, &[0.0], &[a], 7, (64.0, 64.0), &InferConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert_eq!((d.image_id, d.class), (7, 0));
        for (x, y) in [(d.bbox.x, gt.x), (d.bbox.y, gt.y), (d.bbox.w, gt.w), (d.bbox.h, gt.h)] {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn clips_and_caps() {
        let anchors: Vec<Anchor> = (0..150).map(|i| anchor(30.0 * i as f64, 4.0, 16.0)).collect();
        let mut head = DetectorHead::zeros(1, 1);
        head.w_cls = vec![0.01];
        let feats: Vec<f64> = (0..150).map(|i| i as f64).collect();
        let dets = infer(&head, &feats, &anchors, 1, (3000.0, 3000.0), &InferConfig::default()).unwrap();
        assert_eq!(dets.len(), 100);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(dets.iter().all(|d| d.bbox.x >= 0.0 && d.bbox.y >= 0.0));
    }

    #[test]
    fn rejects_bad_threshold() {
        let head = DetectorHead::zeros(1, 1);
        let cfg = InferConfig { score_threshold: 1.0, ..Default::default() };
        assert!(infer(&head, &[0.0], &[anchor(8.0, 8.0, 16.0)], 1, (16.0, 16.0), &cfg).is_err());
    }
}
