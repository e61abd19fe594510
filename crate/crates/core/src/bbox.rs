//! Axis-aligned boxes in center form.

use crate::error::{Error, Result};

/// Axis-aligned box `(cx, cy, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Box with validated positive, finite extent.
    pub fn checked(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(cx, cy, w, h);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::OutOfRange(alloc::format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Centre-location error: Euclidean distance between box centers.
pub fn cle(pred: &BBox, gt: &BBox) -> f64 {
    libm::hypot(pred.cx - gt.cx, pred.cy - gt.cy)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clamp the center into `[0, width] × [0, height]` and the extent into `[1, dim]`.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> BBox {
    BBox {
        cx: b.cx.clamp(0.0, width),
        cy: b.cy.clamp(0.0, height),
        w: b.w.clamp(1.0, width.max(1.0)),
        h: b.h.clamp(1.0, height.max(1.0)),
    }
}
