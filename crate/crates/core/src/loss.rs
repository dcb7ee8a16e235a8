//! Dataset-aware focal loss and the shared smooth-L1 box loss.
//!
//! Each `(anchor, class)` entry of the classification output carries a
//! [`MaskState`]. Background anchors of an image only act as negatives for
//! classes whose sources include a dataset compatible with the image's own
//! dataset; every other background entry is `Masked` and contributes exactly
//! zero loss and zero gradient.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorState, Assignment};
use crate::error::{Error, Result};
use crate::label_space::{ConflictMatrix, DatasetId, HybridLabelSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskState {
    PositiveTarget,
    NegativeActive,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight negatives by `alpha` instead of `1 - alpha`.
    pub symmetric_alpha: bool,
    pub lambda_reg: f64,
    pub smooth_l1_beta: f64,
    pub prob_clamp: f64,
    /// Positive anchors of one dataset act as negatives for every other class.
    pub cross_positive_as_negative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            symmetric_alpha: false,
            lambda_reg: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
            prob_clamp: 1e-7,
            cross_positive_as_negative: true,
        }
    }
}

impl LossConfig {
    pub fn focal(&self) -> Result<FocalParams> {
        FocalParams::new(self.alpha, self.gamma, self.symmetric_alpha, self.prob_clamp)
    }

    pub fn validate(&self) -> Result<()> {
        self.focal()?;
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::InvalidParameter(format!("smooth_l1_beta must be > 0, got {}", self.smooth_l1_beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    alpha: f64,
    gamma: f64,
    symmetric_alpha: bool,
    clamp: f64,
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64, symmetric_alpha: bool, clamp: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(clamp > 0.0 && clamp < 0.5) {
            return Err(Error::InvalidParameter(format!("prob_clamp must lie in (0, 0.5), got {clamp}")));
        }
        Ok(Self { alpha, gamma, symmetric_alpha, clamp })
    }

    /// RetinaNet defaults: alpha 0.25, gamma 2, `(1 - alpha)` on negatives.
    pub fn retinanet() -> Self {
        Self { alpha: 0.25, gamma: 2.0, symmetric_alpha: false, clamp: 1e-7 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn negative_weight(&self) -> f64 {
        if self.symmetric_alpha {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }

    fn clamp_prob(&self, p: f64) -> f64 {
        p.clamp(self.clamp, 1.0 - self.clamp)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-anchor, per-class supervision states, row-major `anchors x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask {
    num_classes: usize,
    states: Vec<MaskState>,
    num_positive: usize,
}

impl LossMask {
    pub fn from_states(num_classes: usize, states: Vec<MaskState>, num_positive: usize) -> Result<Self> {
        if num_classes == 0 || !states.len().is_multiple_of(num_classes) {
            return Err(Error::DimensionMismatch(format!("{} states for {num_classes} classes", states.len())));
        }
        Ok(Self { num_classes, states, num_positive })
    }

    pub fn num_anchors(&self) -> usize {
        self.states.len() / self.num_classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of positive anchors (the loss normalizer before `max(1, _)`).
    pub fn num_positive(&self) -> usize {
        self.num_positive
    }

    pub fn states(&self) -> &[MaskState] {
        &self.states
    }

    pub fn get(&self, anchor: usize, class: usize) -> MaskState {
        self.states[anchor * self.num_classes + class]
    }

    pub fn count(&self, state: MaskState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }
}

/// Builds the dataset-aware mask for one image.
///
/// `gt_classes[g]` is the hybrid class of ground truth `g`, indexed like the
/// assignment's `Positive(g)`.
pub fn build_loss_mask(
    assignment: &Assignment,
    dataset: &DatasetId,
    gt_classes: &[usize],
    space: &HybridLabelSpace,
    conflicts: &ConflictMatrix,
    cross_positive_as_negative: bool,
) -> Result<LossMask> {
    let k = space.num_classes();
    let background = space.active_classes_for(conflicts, dataset)?;
    let background_row: Vec<MaskState> =
        background.iter().map(|&a| if a { MaskState::NegativeActive } else { MaskState::Masked }).collect();
    let mut states = Vec::with_capacity(assignment.states.len() * k);
    let mut num_positive = 0;
    for state in &assignment.states {
        match *state {
            AnchorState::Positive(g) => {
                let target = *gt_classes
                    .get(g)
                    .ok_or_else(|| Error::DimensionMismatch(format!("assignment references gt {g} of {}", gt_classes.len())))?;
                if target >= k {
                    return Err(Error::UnknownClass(target));
                }
                num_positive += 1;
                for c in 0..k {
                    states.push(if c == target {
                        MaskState::PositiveTarget
                    } else if cross_positive_as_negative {
                        MaskState::NegativeActive
                    } else {
                        background_row[c]
                    });
                }
            }
            AnchorState::Negative => states.extend_from_slice(&background_row),
            AnchorState::Ignore => states.extend(std::iter::repeat_n(MaskState::Masked, k)),
        }
    }
    Ok(LossMask { num_classes: k, states, num_positive })
}

/// Mask of plain label concatenation: every non-ignored entry is supervised.
pub fn build_naive_mask(assignment: &Assignment, gt_classes: &[usize], num_classes: usize) -> Result<LossMask> {
    let mut states = Vec::with_capacity(assignment.states.len() * num_classes);
    let mut num_positive = 0;
    for state in &assignment.states {
        match *state {
            AnchorState::Positive(g) => {
                let target = *gt_classes
                    .get(g)
                    .ok_or_else(|| Error::DimensionMismatch(format!("assignment references gt {g} of {}", gt_classes.len())))?;
                if target >= num_classes {
                    return Err(Error::UnknownClass(target));
                }
                num_positive += 1;
                states.extend((0..num_classes).map(|c| {
                    if c == target {
                        MaskState::PositiveTarget
                    } else {
                        MaskState::NegativeActive
                    }
                }));
            }
            AnchorState::Negative => states.extend(std::iter::repeat_n(MaskState::NegativeActive, num_classes)),
            AnchorState::Ignore => states.extend(std::iter::repeat_n(MaskState::Masked, num_classes)),
        }
    }
    Ok(LossMask { num_classes, states, num_positive })
}

/// Focal loss of one entry at probability `p`.
pub fn focal_term(p: f64, state: MaskState, params: &FocalParams) -> f64 {
    let p = params.clamp_prob(p);
    match state {
        MaskState::PositiveTarget => -params.alpha * (1.0 - p).powf(params.gamma) * p.ln(),
        MaskState::NegativeActive => -params.negative_weight() * p.powf(params.gamma) * (1.0 - p).ln(),
        MaskState::Masked => 0.0,
    }
}

/// Derivative of [`focal_term`] with respect to the logit, `p = sigmoid(logit)`.
///
/// The closed form is evaluated at the clamped probability, so saturated
/// logits keep a nonzero gradient.
pub fn focal_gradient(p: f64, state: MaskState, params: &FocalParams) -> f64 {
    let p = params.clamp_prob(p);
    let g = params.gamma;
    match state {
        // d/dx [-a (1-p)^g ln p] = a (1-p)^g (g p ln p - (1 - p))
        MaskState::PositiveTarget => params.alpha * (1.0 - p).powf(g) * (g * p * p.ln() - (1.0 - p)),
        // d/dx [-w p^g ln(1-p)] = w p^g (p - g (1-p) ln(1-p))
        MaskState::NegativeActive => params.negative_weight() * p.powf(g) * (p - g * (1.0 - p) * (1.0 - p).ln()),
        MaskState::Masked => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub classification: f64,
    pub regression: f64,
    pub normalizer: usize,
}

impl LossValue {
    pub fn total(&self, lambda_reg: f64) -> f64 {
        self.classification + lambda_reg * self.regression
    }
}

/// Sum of focal terms over non-masked entries divided by `max(1, positives)`.
///
/// `logits` is row-major `anchors x classes`. Returns the loss and its
/// gradient with respect to every logit; masked entries get exact zeros.
pub fn classification_loss(logits: &[f64], mask: &LossMask, params: &FocalParams) -> Result<(f64, Vec<f64>)> {
    if logits.len() != mask.states.len() {
        return Err(Error::DimensionMismatch(format!("{} logits for {} mask entries", logits.len(), mask.states.len())));
    }
    let norm = mask.num_positive.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&x, &state)) in logits.iter().zip(&mask.states).enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFiniteLogit { anchor: i / mask.num_classes, class: i % mask.num_classes });
        }
        if state == MaskState::Masked {
            continue;
        }
        let p = sigmoid(x);
        loss += focal_term(p, state, params);
        grad[i] = focal_gradient(p, state, params) / norm;
    }
    Ok((loss / norm, grad))
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_gradient(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Class-agnostic smooth-L1 over the four deltas of positive anchors,
/// divided by `max(1, positives)`. `targets[i]` is read only for positives.
pub fn regression_loss(
    predicted: &[[f64; 4]],
    targets: &[[f64; 4]],
    assignment: &Assignment,
    beta: f64,
) -> Result<(f64, Vec<[f64; 4]>)> {
    let n = assignment.states.len();
    if predicted.len() != n || targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions and {} targets for {n} anchors",
            predicted.len(),
            targets.len()
        )));
    }
    let norm = assignment.num_positive().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 4]; n];
    for (i, state) in assignment.states.iter().enumerate() {
        if !matches!(state, AnchorState::Positive(_)) {
            continue;
        }
        for j in 0..4 {
            let r = predicted[i][j] - targets[i][j];
            loss += smooth_l1(r, beta);
            grad[i][j] = smooth_l1_gradient(r, beta) / norm;
        }
    }
    Ok((loss / norm, grad))
}
