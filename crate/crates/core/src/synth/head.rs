use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::Assignment;
use crate::error::{Error, Result};
use crate::loss::{classification_loss, regression_loss, sigmoid, FocalParams, LossMask, LossValue};

/// Linear classification and box subnets over per-anchor features.
///
/// Weights are row-major: `w_cls[k * feature_dim + f]`, `w_reg[j * feature_dim + f]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHead {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_reg: Vec<f64>,
    pub b_reg: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Row-major `anchors x classes`.
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

impl HeadOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&x| sigmoid(x)).collect()
    }
}

impl DetectorHead {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            w_cls: vec![0.0; num_classes * feature_dim],
            b_cls: vec![0.0; num_classes],
            w_reg: vec![0.0; 4 * feature_dim],
            b_reg: [0.0; 4],
        }
    }

    /// Small Gaussian weights, class biases set so every class starts at
    /// probability `prior`, zero regression biases.
    pub fn init(num_classes: usize, feature_dim: usize, prior: f64, seed: u64) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidParameter(format!("prior {prior} must be in (0,1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut head = Self::zeros(num_classes, feature_dim);
        head.w_cls.iter_mut().chain(head.w_reg.iter_mut()).for_each(|w| *w = normal.sample(&mut rng));
        head.b_cls.fill(-((1.0 - prior) / prior).ln());
        Ok(head)
    }

    pub fn num_parameters(&self) -> usize {
        self.w_cls.len() + self.b_cls.len() + self.w_reg.len() + 4
    }

    /// Parameters in the fixed order `w_cls, b_cls, w_reg, b_reg`.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.w_cls.iter().chain(&self.b_cls).chain(&self.w_reg).chain(&self.b_reg)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_cls.iter_mut().chain(self.b_cls.iter_mut()).chain(self.w_reg.iter_mut()).chain(self.b_reg.iter_mut())
    }

    fn check_shape(&self) -> Result<()> {
        let (k, f) = (self.num_classes, self.feature_dim);
        if self.w_cls.len() != k * f || self.b_cls.len() != k || self.w_reg.len() != 4 * f {
            return Err(Error::DimensionMismatch(format!("head parameters do not match {k} classes x {f} features")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        if self.parameters().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("head has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Exact affine map of row-major `anchors x feature_dim` features.
    pub fn forward(&self, features: &[f64]) -> Result<HeadOutput> {
        self.check_shape()?;
        let f = self.feature_dim;
        if f == 0 || !features.len().is_multiple_of(f) {
            return Err(Error::DimensionMismatch(format!("{} feature values are not a multiple of {f}", features.len())));
        }
        let n = features.len() / f;
        let mut logits = Vec::with_capacity(n * self.num_classes);
        let mut deltas = Vec::with_capacity(n);
        for x in features.chunks_exact(f) {
            for (row, b) in self.w_cls.chunks_exact(f).zip(&self.b_cls) {
                logits.push(dot(row, x) + b);
            }
            let mut d = self.b_reg;
            for (dj, row) in d.iter_mut().zip(self.w_reg.chunks_exact(f)) {
                *dj += dot(row, x);
            }
            deltas.push(d);
        }
        Ok(HeadOutput { logits, deltas })
    }

    /// Total loss of one image and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, sample: &TrainSample, focal: &FocalParams, lambda_reg: f64, beta: f64) -> Result<(LossValue, HeadGradient)> {
        let out = self.forward(&sample.features)?;
        let (cls, g_cls) = classification_loss(&out.logits, &sample.mask, focal)?;
        let (reg, g_reg) = regression_loss(&out.deltas, &sample.targets, &sample.assignment, beta)?;
        let (k, f) = (self.num_classes, self.feature_dim);
        let mut grad = HeadGradient(DetectorHead::zeros(k, f));
        for (i, x) in sample.features.chunks_exact(f).enumerate() {
            for c in 0..k {
                let g = g_cls[i * k + c];
                if g != 0.0 {
                    axpy(&mut grad.0.w_cls[c * f..(c + 1) * f], g, x);
                    grad.0.b_cls[c] += g;
                }
            }
            for j in 0..4 {
                let g = lambda_reg * g_reg[i][j];
                if g != 0.0 {
                    axpy(&mut grad.0.w_reg[j * f..(j + 1) * f], g, x);
                    grad.0.b_reg[j] += g;
                }
            }
        }
        let normalizer = sample.mask.num_positive().max(1);
        Ok((LossValue { classification: cls, regression: reg, normalizer }, grad))
    }
}

/// Parameter gradient, laid out exactly like the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient(pub DetectorHead);

impl HeadGradient {
    pub fn zeros_like(head: &DetectorHead) -> Self {
        Self(DetectorHead::zeros(head.num_classes, head.feature_dim))
    }

    pub fn add_scaled(&mut self, other: &HeadGradient, scale: f64) {
        for (a, b) in self.0.parameters_mut().zip(other.0.parameters()) {
            *a += scale * b;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.0.parameters()
    }
}

/// One image prepared for training: features, anchor assignment, the loss
/// mask for the chosen training mode and regression targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_id: u64,
    pub features: Vec<f64>,
    pub assignment: Assignment,
    pub mask: LossMask,
    pub targets: Vec<[f64; 4]>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_half() {
        let head = DetectorHead::zeros(3, 4);
        let out = head.forward(&[1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.logits.len(), 6);
        assert!(out.probabilities().iter().all(|&p| p == 0.5));
        assert_eq!(out.deltas, vec![[0.0; 4]; 2]);
    }

    #[test]
    fn aligned_row_scores_high() {
        let e = [0.3, -1.2, 0.8, 2.0];
        let mut head = DetectorHead::zeros(2, 4);
        head.w_cls[4..8].copy_from_slice(&e);
        let x: Vec<f64> = e.iter().map(|v| 3.0 * v).collect();
        let p = head.forward(&x).unwrap().probabilities();
        assert!(p[1] > 0.5);
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn affine_map_is_exact() {
        let mut head = DetectorHead::zeros(1, 2);
        head.w_cls = vec![2.0, -1.0];
        head.b_cls = vec![0.5];
        head.w_reg = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0];
        head.b_reg = [0.0, 0.25, 0.0, 1.0];
        let out = head.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(out.logits, vec![2.5]);
        assert_eq!(out.deltas, vec![[3.0, 4.25, 7.0, -2.0]]);
    }

    #[test]
    fn shape_errors() {
        let head = DetectorHead::zeros(2, 4);
        assert!(matches!(head.forward(&[1.0; 6]), Err(Error::DimensionMismatch(_))));
        let mut broken = head.clone();
        broken.b_cls.pop();
        assert!(matches!(broken.forward(&[1.0; 4]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn init_prior() {
        let head = DetectorHead::init(2, 16, 0.01, 3).unwrap();
        assert!((sigmoid(head.b_cls[0]) - 0.01).abs() < 1e-12);
        assert_eq!(head, DetectorHead::init(2, 16, 0.01, 3).unwrap());
        assert_ne!(head, DetectorHead::init(2, 16, 0.01, 4).unwrap());
        assert_eq!(head.num_parameters(), 2 * 16 + 2 + 64 + 4);
    }
}
