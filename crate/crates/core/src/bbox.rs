use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image units, top-left corner plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::NonPositiveBox(format!("[{x}, {y}, {w}, {h}]")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h }
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn cx(&self) -> f64 {
        self.x + 0.5 * self.w
    }

    pub fn cy(&self) -> f64 {
        self.y + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersects the box with `[0, width] x [0, height]`. `None` if nothing
    /// of positive area remains.
    pub fn clamp(&self, width: f64, height: f64) -> Option<Self> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        if x2 > x1 && y2 > y1 {
            Some(Self { x: x1, y: y1, w: x2 - x1, h: y2 - y1 })
        } else {
            None
        }
    }
}

/// Anything with axis-aligned corners.
pub trait Rect {
    /// `(x1, y1, x2, y2)`
    fn corners(&self) -> (f64, f64, f64, f64);
}

impl Rect for BBox {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (self.x, self.y, self.x2(), self.y2())
    }
}

/// Intersection over union of two boxes with positive extents.
pub fn iou<A: Rect + ?Sized, B: Rect + ?Sized>(a: &A, b: &B) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    (inter / union).clamp(0.0, 1.0)
}
