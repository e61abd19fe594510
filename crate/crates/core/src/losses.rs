//! Modality-consistent training losses with analytic gradients.
//!
//! The total is the sum of three parts:
//!
//! * tracking: `λ₁·L1 + λ₂·SIoU + λ₃·((N − C)/N)·CE`, with `(λ₁, λ₂, λ₃) = (5, 2, 2)`;
//! * modality: `α·BCE(m, m̂)`, `α = 2`;
//! * template: `ζ·((N − C)/N)·(1 − cos(f, f̂))`, `ζ = 2`.
//!
//! `C` is the current epoch and `N` the number of epochs. The CE value is an
//! input; its classification target belongs to the host tracker.
//!
//! # SIoU
//!
//! `1 − IoU + (Δ + Ω)/2` following the original SIoU definition:
//!
//! * angle cost `Λ = 1 − 2·sin²(arcsin(|dy|/σ) − π/4)`, evaluated through the
//!   identity `Λ = 2·|dx|·|dy| / σ²`, where `(dx, dy)` is the center offset
//!   and `σ` its length;
//! * distance cost `Δ = Σ_{x,y} (1 − exp(−γ·ρ))` with `γ = 2 − Λ`,
//!   `ρ_x = (dx / c_w)²` and `ρ_y = (dy / c_h)²` over the enclosing box;
//! * shape cost `Ω = Σ_{w,h} (1 − exp(−ω))⁴` with `ω_w = |w − w_gt| / max(w, w_gt)`.
//!
//! The gradient is undefined on the set where `dx = 0` or `dy = 0` (the angle
//! cost has a kink there, and `σ = 0` takes `Λ = 0`), where `w = w_gt` or
//! `h = h_gt`, and where a pair of box edges coincide.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::nn::{cosine_similarity, cosine_similarity_backward};
use crate::tensor::Tensor;

pub const LAMBDA_L1: f64 = 5.0;
pub const LAMBDA_SIOU: f64 = 2.0;
pub const LAMBDA_CE: f64 = 2.0;
pub const ALPHA_MODALITY: f64 = 2.0;
pub const ZETA_TEMPLATE: f64 = 2.0;
/// Lower clamp on probabilities inside logarithms.
pub const BCE_CLAMP: f64 = 1e-7;
const SHAPE_THETA: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSchedule {
    current: u32,
    total: u32,
}

impl EpochSchedule {
    pub fn new(current: u32, total: u32) -> Result<Self> {
        if total == 0 || current > total {
            return Err(Error::OutOfRange(alloc::format!("epoch {current} of {total}")));
        }
        Ok(Self { current, total })
    }

    pub fn current(&self) -> u32 {
        self.current
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    /// `(N − C) / N`.
    pub fn decay(&self) -> f64 {
        f64::from(self.total - self.current) / f64::from(self.total)
    }
}

pub fn decayed_ce_weight(sched: &EpochSchedule) -> f64 {
    sched.decay()
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| libm::fabs(p - g))
        .sum::<f64>()
        / 4.0
}

/// Gradient of [`l1_loss`] with respect to `pred` (0 at ties).
pub fn l1_loss_grad(pred: &BBox, gt: &BBox) -> [f64; 4] {
    let (p, g) = (pred.to_array(), gt.to_array());
    core::array::from_fn(|i| {
        let d = p[i] - g[i];
        if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        }
    })
}

/// A value with its gradient over the four predicted box coordinates.
#[derive(Debug, Clone, Copy)]
struct Grad4 {
    v: f64,
    d: [f64; 4],
}

impl Grad4 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn lin(self, a: f64, other: Self, b: f64) -> Self {
        Self {
            v: a * self.v + b * other.v,
            d: core::array::from_fn(|i| a * self.d[i] + b * other.d[i]),
        }
    }

    fn add(self, o: Self) -> Self {
        self.lin(1.0, o, 1.0)
    }

    fn sub(self, o: Self) -> Self {
        self.lin(1.0, o, -1.0)
    }

    fn scale(self, k: f64) -> Self {
        Self {
            v: k * self.v,
            d: self.d.map(|x| k * x),
        }
    }

    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: core::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }

    fn div(self, o: Self) -> Self {
        Self {
            v: self.v / o.v,
            d: core::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v)),
        }
    }

    /// Apply a scalar function given its value and derivative at `self.v`.
    fn chain(self, value: f64, deriv: f64) -> Self {
        Self {
            v: value,
            d: self.d.map(|x| deriv * x),
        }
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }

    fn abs(self) -> Self {
        if self.v < 0.0 {
            self.scale(-1.0)
        } else {
            self
        }
    }

    fn exp_neg(self) -> Self {
        let e = libm::exp(-self.v);
        self.chain(e, -e)
    }
}

fn siou_terms(pred: &BBox, gt: &BBox) -> Result<Grad4> {
    pred.validate()?;
    gt.validate().map_err(|_| Error::Degenerate("ground-truth box must have positive extent"))?;
    let (px, py, pw, ph) = (
        Grad4::var(pred.cx, 0),
        Grad4::var(pred.cy, 1),
        Grad4::var(pred.w, 2),
        Grad4::var(pred.h, 3),
    );
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let (gx1, gy1, gx2, gy2) = (
        Grad4::constant(gx1),
        Grad4::constant(gy1),
        Grad4::constant(gx2),
        Grad4::constant(gy2),
    );
    let px1 = px.lin(1.0, pw, -0.5);
    let px2 = px.lin(1.0, pw, 0.5);
    let py1 = py.lin(1.0, ph, -0.5);
    let py2 = py.lin(1.0, ph, 0.5);

    let zero = Grad4::constant(0.0);
    let iw = px2.min(gx2).sub(px1.max(gx1)).max(zero);
    let ih = py2.min(gy2).sub(py1.max(gy1)).max(zero);
    let inter = iw.mul(ih);
    let union = pw.mul(ph).add(Grad4::constant(gt.area())).sub(inter);
    let iou = inter.div(union);

    let cw = px2.max(gx2).sub(px1.min(gx1));
    let ch = py2.max(gy2).sub(py1.min(gy1));
    let dx = Grad4::constant(gt.cx).sub(px);
    let dy = Grad4::constant(gt.cy).sub(py);
    let sigma2 = dx.mul(dx).add(dy.mul(dy));
    let angle = if sigma2.v > 0.0 {
        dx.abs().mul(dy.abs()).scale(2.0).div(sigma2)
    } else {
        zero
    };
    let gamma = Grad4::constant(2.0).sub(angle);
    let rx = dx.div(cw);
    let ry = dy.div(ch);
    let rho_x = rx.mul(rx);
    let rho_y = ry.mul(ry);
    let distance = Grad4::constant(2.0)
        .sub(gamma.mul(rho_x).exp_neg())
        .sub(gamma.mul(rho_y).exp_neg());

    let shape_term = |p: Grad4, g: f64| {
        let g = Grad4::constant(g);
        let omega = p.sub(g).abs().div(p.max(g));
        let base = Grad4::constant(1.0).sub(omega.exp_neg());
        let v = libm::pow(base.v, f64::from(SHAPE_THETA));
        base.chain(v, f64::from(SHAPE_THETA) * libm::pow(base.v, f64::from(SHAPE_THETA - 1)))
    };
    let shape = shape_term(pw, gt.w).add(shape_term(ph, gt.h));

    Ok(Grad4::constant(1.0)
        .sub(iou)
        .add(distance.add(shape).scale(0.5)))
}

/// SIoU regression loss in `[0, 2]`.
pub fn siou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok(siou_terms(pred, gt)?.v)
}

/// Gradient of [`siou_loss`] with respect to `(cx, cy, w, h)` of `pred`.
pub fn siou_loss_grad(pred: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    Ok(siou_terms(pred, gt)?.d)
}

/// Loss-term multipliers of the tracking loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingWeights {
    pub l1: f64,
    pub siou: f64,
    pub ce: f64,
}

impl Default for TrackingWeights {
    fn default() -> Self {
        Self {
            l1: LAMBDA_L1,
            siou: LAMBDA_SIOU,
            ce: LAMBDA_CE,
        }
    }
}

/// `λ₁·L1 + λ₂·SIoU + λ₃·((N − C)/N)·CE`.
pub fn tracking_loss(pred: &BBox, gt: &BBox, ce: f64, sched: &EpochSchedule, w: &TrackingWeights) -> Result<f64> {
    if !(ce >= 0.0 && ce.is_finite()) {
        return Err(Error::OutOfRange(alloc::format!("cross-entropy term {ce}")));
    }
    Ok(w.l1 * l1_loss(pred, gt) + w.siou * siou_loss(pred, gt)? + w.ce * sched.decay() * ce)
}

/// Gradient of [`tracking_loss`] with respect to `pred`.
pub fn tracking_loss_grad(pred: &BBox, gt: &BBox, w: &TrackingWeights) -> Result<[f64; 4]> {
    let l1 = l1_loss_grad(pred, gt);
    let si = siou_loss_grad(pred, gt)?;
    Ok(core::array::from_fn(|i| w.l1 * l1[i] + w.siou * si[i]))
}

/// Binary cross-entropy with logarithm arguments clamped below at [`BCE_CLAMP`].
pub fn bce(target: f64, predicted: f64) -> Result<f64> {
    check_prob(target)?;
    check_prob(predicted)?;
    let mut loss = 0.0;
    if target > 0.0 {
        loss -= target * libm::log(predicted.max(BCE_CLAMP));
    }
    if target < 1.0 {
        loss -= (1.0 - target) * libm::log((1.0 - predicted).max(BCE_CLAMP));
    }
    Ok(loss)
}

/// `d bce / d predicted`; clamped terms contribute nothing.
pub fn bce_grad(target: f64, predicted: f64) -> Result<f64> {
    check_prob(target)?;
    check_prob(predicted)?;
    let mut g = 0.0;
    if target > 0.0 && predicted > BCE_CLAMP {
        g -= target / predicted;
    }
    if target < 1.0 && 1.0 - predicted > BCE_CLAMP {
        g += (1.0 - target) / (1.0 - predicted);
    }
    Ok(g)
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::OutOfRange(alloc::format!("probability {p}")))
    }
}

/// `α · BCE(m, m̂)` for ground-truth modality `m` and prediction `m̂`.
pub fn modality_loss(m: f64, m_hat: f64, alpha: f64) -> Result<f64> {
    Ok(alpha * bce(m, m_hat)?)
}

pub fn modality_loss_grad(m: f64, m_hat: f64, alpha: f64) -> Result<f64> {
    Ok(alpha * bce_grad(m, m_hat)?)
}

/// `ζ · ((N − C)/N) · (1 − cos(f, f̂))`.
pub fn template_sim_loss(f: &Tensor, f_hat: &Tensor, sched: &EpochSchedule, zeta: f64) -> Result<f64> {
    Ok(zeta * sched.decay() * (1.0 - cosine_similarity(f, f_hat)?))
}

/// Gradients of [`template_sim_loss`] with respect to `f` and `f̂`.
pub fn template_sim_loss_grad(f: &Tensor, f_hat: &Tensor, sched: &EpochSchedule, zeta: f64) -> Result<(Tensor, Tensor)> {
    let k = -zeta * sched.decay();
    let (ga, gb) = cosine_similarity_backward(f, f_hat)?;
    Ok((ga.scale(k), gb.scale(k)))
}

/// The three loss components and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub tracking: f64,
    pub modality: f64,
    pub template: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        total_loss(self.tracking, self.modality, self.template)
    }
}

pub fn total_loss(tracking: f64, modality: f64, template: f64) -> f64 {
    tracking + modality + template
}
