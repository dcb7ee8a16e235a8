//! Pyramid anchors, IoU assignment and box-delta encoding.

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, Rect};
use crate::error::{Error, Result};

pub use crate::bbox::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Pyramid levels; level `l` has stride `2^l`.
    pub levels: Vec<u32>,
    /// Height / width.
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { levels: vec![3, 4, 5, 6, 7], ratios: vec![0.5, 1.0, 2.0], scales: vec![2.0, 3.0, 4.0], pos_iou: 0.5, neg_iou: 0.4 }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.ratios.is_empty() || self.scales.is_empty() {
            return Err(Error::EmptyConfig);
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidAnchorConfig("levels must be strictly increasing".into()));
        }
        if self.levels.iter().any(|&l| l > 30) {
            return Err(Error::InvalidAnchorConfig("level exceeds 30".into()));
        }
        if self.ratios.iter().chain(&self.scales).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidAnchorConfig("ratios and scales must be positive".into()));
        }
        if self.neg_iou > self.pos_iou {
            return Err(Error::ThresholdOrder { pos: self.pos_iou, neg: self.neg_iou });
        }
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    /// Closed-form anchor count for a `width x height` image.
    pub fn anchor_count(&self, width: f64, height: f64) -> usize {
        self.levels
            .iter()
            .map(|&l| {
                let t = f64::from(1u32 << l);
                (width / t).ceil() as usize * (height / t).ceil() as usize * self.anchors_per_location()
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub level: u32,
}

impl Anchor {
    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

impl Rect for Anchor {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }
}

/// Tiles anchors over every level. Order: level, row, column, ratio, scale.
pub fn generate_anchors(cfg: &AnchorConfig, width: f64, height: f64) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidImageSize(width, height));
    }
    let mut anchors = Vec::with_capacity(cfg.anchor_count(width, height));
    for &level in &cfg.levels {
        let stride = f64::from(1u32 << level);
        let cols = (width / stride).ceil() as usize;
        let rows = (height / stride).ceil() as usize;
        let shapes: Vec<(f64, f64)> = cfg
            .ratios
            .iter()
            .flat_map(|&ratio| {
                cfg.scales.iter().map(move |&scale| {
                    let base = scale * stride;
                    let sqrt_ratio = ratio.sqrt();
                    (base / sqrt_ratio, base * sqrt_ratio)
                })
            })
            .collect();
        for j in 0..rows {
            let cy = (j as f64 + 0.5) * stride;
            for i in 0..cols {
                let cx = (i as f64 + 0.5) * stride;
                anchors.extend(shapes.iter().map(|&(w, h)| Anchor { cx, cy, w, h, level }));
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorState {
    Positive(usize),
    Negative,
    Ignore,
}

/// Ground truth as seen by the assigner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub states: Vec<AnchorState>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.states.iter().filter(|s| matches!(s, AnchorState::Positive(_))).count()
    }
}

/// Max-IoU assignment. Ties on IoU go to the lowest gt index; anchors that
/// overlap an ignore-flagged gt by at least `pos_threshold` become `Ignore`.
pub fn assign(anchors: &[Anchor], gts: &[GtBox], pos_threshold: f64, neg_threshold: f64) -> Result<Assignment> {
    if neg_threshold > pos_threshold {
        return Err(Error::ThresholdOrder { pos: pos_threshold, neg: neg_threshold });
    }
    let states = anchors
        .iter()
        .map(|anchor| {
            let mut best = (0.0, None);
            let mut ignore_overlap: f64 = 0.0;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(anchor, &gt.bbox);
                if gt.ignore {
                    ignore_overlap = ignore_overlap.max(v);
                } else if v > best.0 {
                    best = (v, Some(g));
                }
            }
            if ignore_overlap >= pos_threshold {
                return AnchorState::Ignore;
            }
            match best {
                (v, Some(g)) if v >= pos_threshold => AnchorState::Positive(g),
                (v, _) if v < neg_threshold => AnchorState::Negative,
                _ => AnchorState::Ignore,
            }
        })
        .collect();
    Ok(Assignment { states })
}

/// Encodes `gt` against `anchor` as `(tx, ty, tw, th)`.
pub fn regression_targets(anchor: &Anchor, gt: &BBox) -> [f64; 4] {
    [
        (gt.cx() - anchor.cx) / anchor.w,
        (gt.cy() - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Inverse of [`regression_targets`].
pub fn decode(anchor: &Anchor, deltas: &[f64; 4]) -> BBox {
    let cx = deltas[0] * anchor.w + anchor.cx;
    let cy = deltas[1] * anchor.h + anchor.cy;
    BBox::from_center(cx, cy, anchor.w * deltas[2].exp(), anchor.h * deltas[3].exp())
}
